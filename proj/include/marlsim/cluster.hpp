#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "marlsim/errors.hpp"
#include "marlsim/event_log.hpp"
#include "marlsim/sim.hpp"

namespace marlsim {

using DeviceId = int;
using NodeId = int;

struct BusyInterval {
    SimTime start;
    SimTime end;
};

// One accelerator: a memory arena plus a busy-time account. Compute is not
// modeled below the granularity of busy intervals.
struct Device {
    DeviceId global_dev_id = 0;
    NodeId node_id = 0;
    std::uint64_t mem_capacity = 0;
    std::uint64_t mem_used = 0;
    SimTime busy_until = 0.0;
    double busy_accum = 0.0;  // seconds, monotone
    std::vector<BusyInterval> busy_intervals;
    std::uint64_t next_offset = 0;  // bump allocator for location metadata
};

struct HostArena {
    NodeId node_id = 0;
    std::uint64_t capacity = 0;
    std::uint64_t used = 0;
    std::uint64_t next_buffer_id = 0;
};

struct Node {
    NodeId node_id = 0;
    std::vector<DeviceId> devices;  // contiguous global ids, bundle i <-> devices[i]
    HostArena host_mem;
    double rdma_bw = 0.0;  // bytes/second to every other node
};

enum class PoolKind { Rollout, Training };

struct ResourcePool {
    PoolKind kind = PoolKind::Rollout;
    std::vector<DeviceId> devices;
};

enum class HopKind { SameDevice, D2D, D2H, H2D, Rdma, Rh2d };

inline const char* hop_name(HopKind h) {
    switch (h) {
        case HopKind::SameDevice: return "SameDevice";
        case HopKind::D2D: return "D2D";
        case HopKind::D2H: return "D2H";
        case HopKind::H2D: return "H2D";
        case HopKind::Rdma: return "RDMA";
        case HopKind::Rh2d: return "RH2D";
    }
    return "?";
}

// Per-link-class linear cost: duration = latency + bytes / bandwidth.
// SameDevice is free by definition.
struct LinkCostModel {
    double d2d_latency_s = 10e-6;
    double d2d_bytes_per_s = 200e9;
    double h2d_latency_s = 20e-6;
    double h2d_bytes_per_s = 50e9;
    double rdma_latency_s = 50e-6;
    double rdma_bytes_per_s = 25e9;

    double hop_cost(HopKind hop, std::uint64_t bytes) const {
        const double b = static_cast<double>(bytes);
        switch (hop) {
            case HopKind::SameDevice: return 0.0;
            case HopKind::D2D: return d2d_latency_s + b / d2d_bytes_per_s;
            case HopKind::D2H:
            case HopKind::H2D:
            case HopKind::Rh2d: return h2d_latency_s + b / h2d_bytes_per_s;
            case HopKind::Rdma: return rdma_latency_s + b / rdma_bytes_per_s;
        }
        return 0.0;
    }
};

struct Reservation {
    DeviceId dev = -1;
    std::uint64_t bytes = 0;
    std::uint64_t offset = 0;
};

struct HostReservation {
    NodeId node = -1;
    std::uint64_t bytes = 0;
    std::uint64_t buffer_id = 0;
};

class Cluster {
public:
    Cluster(int num_nodes, int devices_per_node, std::uint64_t dev_mem_bytes,
            std::uint64_t host_mem_bytes, LinkCostModel links = {})
        : links_(links) {
        for (int n = 0; n < num_nodes; ++n) {
            Node node;
            node.node_id = n;
            node.host_mem = HostArena{n, host_mem_bytes, 0, 0};
            node.rdma_bw = links.rdma_bytes_per_s;
            for (int d = 0; d < devices_per_node; ++d) {
                Device dev;
                dev.global_dev_id = n * devices_per_node + d;
                dev.node_id = n;
                dev.mem_capacity = dev_mem_bytes;
                node.devices.push_back(dev.global_dev_id);
                devices_.push_back(dev);
            }
            nodes_.push_back(std::move(node));
        }
    }

    const std::vector<Node>& nodes() const { return nodes_; }
    std::size_t device_count() const { return devices_.size(); }

    Device& device(DeviceId id) { return devices_.at(static_cast<std::size_t>(id)); }
    const Device& device(DeviceId id) const { return devices_.at(static_cast<std::size_t>(id)); }
    Node& node(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)); }
    const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    NodeId node_of_device(DeviceId id) const { return device(id).node_id; }
    const LinkCostModel& links() const { return links_; }

    // Fixed bijection between a node's logical bundle index and the physical
    // device id; placement code relies on it.
    DeviceId bundle_to_device(NodeId node, int bundle) const {
        return nodes_.at(static_cast<std::size_t>(node)).devices.at(static_cast<std::size_t>(bundle));
    }
    int device_to_bundle(DeviceId dev) const {
        const Node& n = node(node_of_device(dev));
        for (std::size_t i = 0; i < n.devices.size(); ++i)
            if (n.devices[i] == dev) return static_cast<int>(i);
        raise(ErrorCode::ConfigError, "device not in its node's bundle list");
    }

    Reservation reserve_device_mem(DeviceId id, std::uint64_t bytes) {
        Device& d = device(id);
        if (bytes == 0) raise(ErrorCode::ConfigError, "zero-byte reservation");
        if (d.mem_used + bytes > d.mem_capacity) {
            raise(ErrorCode::DeviceOom, "device " + std::to_string(id) + " needs " +
                                            std::to_string(bytes) + "B, free " +
                                            std::to_string(d.mem_capacity - d.mem_used) + "B");
        }
        d.mem_used += bytes;
        const std::uint64_t off = d.next_offset;
        d.next_offset += bytes;
        return Reservation{id, bytes, off};
    }

    void release_device_mem(const Reservation& r) {
        Device& d = device(r.dev);
        d.mem_used -= r.bytes;
    }

    HostReservation reserve_host_mem(NodeId id, std::uint64_t bytes) {
        HostArena& h = node(id).host_mem;
        if (h.used + bytes > h.capacity) {
            raise(ErrorCode::HostOom, "host arena on node " + std::to_string(id) + " full");
        }
        h.used += bytes;
        return HostReservation{id, bytes, h.next_buffer_id++};
    }

    void release_host_mem(const HostReservation& r) { node(r.node).host_mem.used -= r.bytes; }

    // Record [start, start+duration) as busy on the device.
    void charge_busy(DeviceId id, SimTime start, double duration, EventLog* log = nullptr) {
        if (duration <= 0) return;
        Device& d = device(id);
        d.busy_accum += duration;
        d.busy_until = std::max(d.busy_until, start + duration);
        d.busy_intervals.push_back(BusyInterval{start, start + duration});
        if (log) {
            log->append(start, "device_busy",
                        Json{{"dev", id}, {"start", start}, {"end", start + duration}});
        }
    }

    // Mean busy fraction of the pool's devices inside [t0, t1].
    double utilization(const ResourcePool& pool, SimTime t0, SimTime t1) const {
        if (pool.devices.empty()) raise(ErrorCode::EmptyPool, "utilization over empty pool");
        if (!(t1 > t0)) raise(ErrorCode::ConfigError, "utilization window must have t1 > t0");
        double total = 0.0;
        for (DeviceId id : pool.devices) {
            double busy = 0.0;
            for (const BusyInterval& iv : device(id).busy_intervals) {
                const double lo = std::max(iv.start, t0);
                const double hi = std::min(iv.end, t1);
                if (hi > lo) busy += hi - lo;
            }
            total += busy / (t1 - t0);
        }
        return total / static_cast<double>(pool.devices.size());
    }

private:
    std::vector<Node> nodes_;
    std::vector<Device> devices_;
    LinkCostModel links_;
};

}  // namespace marlsim
