#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "marlsim/cluster.hpp"
#include "marlsim/errors.hpp"
#include "marlsim/event_log.hpp"
#include "marlsim/sim.hpp"
#include "marlsim/tensor.hpp"

namespace marlsim {

enum class DType { Bytes, F64Tensor, String, List };

inline const char* dtype_name(DType t) {
    switch (t) {
        case DType::Bytes: return "bytes";
        case DType::F64Tensor: return "f64tensor";
        case DType::String: return "string";
        case DType::List: return "list";
    }
    return "?";
}

// A byte payload tagged with its logical type. Tensors carry their shape;
// payload length must be 8 * product(shape) for them.
struct HeterogeneousObject {
    std::string key;
    std::vector<std::uint8_t> payload;
    DType dtype = DType::Bytes;
    std::vector<std::size_t> shape;  // only meaningful for F64Tensor

    static HeterogeneousObject from_tensor(std::string key, const F64Tensor& t) {
        HeterogeneousObject o;
        o.key = std::move(key);
        o.dtype = DType::F64Tensor;
        o.shape = t.shape;
        o.payload.resize(t.data.size() * sizeof(double));
        if (!t.data.empty()) std::memcpy(o.payload.data(), t.data.data(), o.payload.size());
        return o;
    }

    F64Tensor to_tensor() const {
        F64Tensor t;
        t.shape = shape;
        t.data.resize(payload.size() / sizeof(double));
        if (!t.data.empty()) std::memcpy(t.data.data(), payload.data(), payload.size());
        return t;
    }
};

struct DeviceTier {
    DeviceId dev;
    std::uint64_t offset;
};
struct HostTier {
    NodeId node;
    std::uint64_t buffer_id;
};

struct ObjectLocation {
    std::variant<DeviceTier, HostTier> tier;
    std::uint64_t len = 0;

    bool on_device() const { return std::holds_alternative<DeviceTier>(tier); }
    const DeviceTier& as_device() const { return std::get<DeviceTier>(tier); }
    const HostTier& as_host() const { return std::get<HostTier>(tier); }
};

// Where a caller wants an object to live.
struct Placement {
    enum class Kind { Device, Host } kind;
    int id;  // DeviceId or NodeId

    static Placement device(DeviceId d) { return Placement{Kind::Device, d}; }
    static Placement host(NodeId n) { return Placement{Kind::Host, n}; }
};

struct TransferRecord {
    std::string key;
    std::vector<HopKind> path;
    std::uint64_t bytes = 0;
    double sim_duration = 0.0;  // sum of hop costs, excludes waiting on the producer
};

struct ObjectRef {
    std::string key;
    ObjectLocation location;
    SimTime ready_at = 0.0;  // readable once the producing copy completes
};

struct GetResult {
    HeterogeneousObject object;
    TransferRecord record;
    SimTime start = 0.0;
    SimTime done = 0.0;
};

// Location-agnostic key-value store spanning device, host, and remote tiers.
// Metadata lives in one resident daemon per node; payload copies are costed
// through the cluster's link model but never block the registry.
class ObjectStore {
public:
    ObjectStore(EventLoop& loop, Cluster& cluster, EventLog& log)
        : loop_(loop), cluster_(cluster), log_(log), daemons_(cluster.nodes().size()) {}

    ObjectRef set(const std::string& key, HeterogeneousObject obj, const Placement& where) {
        validate_object(obj);
        const std::uint64_t len = obj.payload.size();
        Entry entry;
        entry.object = std::move(obj);
        entry.object.key = key;

        NodeId daemon_node;
        std::vector<HopKind> path;
        if (where.kind == Placement::Kind::Device) {
            Reservation r = cluster_.reserve_device_mem(where.id, len);
            entry.location = ObjectLocation{DeviceTier{where.id, r.offset}, len};
            entry.dev_reservation = r;
            daemon_node = cluster_.node_of_device(where.id);
            entry.ready_at = loop_.now();  // registration of an existing segment
        } else {
            HostReservation r = cluster_.reserve_host_mem(where.id, len);
            entry.location = ObjectLocation{HostTier{where.id, r.buffer_id}, len};
            entry.host_reservation = r;
            daemon_node = where.id;
            path.push_back(HopKind::D2H);  // async offload to the host buffer
            entry.ready_at = loop_.now() + cluster_.links().hop_cost(HopKind::D2H, len);
        }
        entry.daemon_node = daemon_node;

        Daemon& daemon = daemons_[static_cast<std::size_t>(daemon_node)];
        ObjectRef ref;
        {
            std::lock_guard<std::mutex> guard(daemon.mu);
            if (key_owner_.count(key)) {
                // Roll back the reservation taken above.
                release_storage(entry);
                raise(ErrorCode::DuplicateKey, key);
            }
            key_owner_[key] = daemon_node;
            auto [it, inserted] = daemon.objects.emplace(key, std::move(entry));
            (void)inserted;
            ref = ObjectRef{key, it->second.location, it->second.ready_at};
            ++set_calls_;
            log_.append(loop_.now(), "store_set",
                        Json{{"key", key},
                             {"bytes", len},
                             {"tier", where.kind == Placement::Kind::Device ? "device" : "host"},
                             {"path", path_names(path)},
                             {"duration", ref.ready_at - loop_.now()}});
        }
        // Wake subscribers blocked on this key.
        std::vector<Waiter> to_wake;
        auto range = pending_waiters_.equal_range(key);
        for (auto it = range.first; it != range.second; ++it) to_wake.push_back(it->second);
        pending_waiters_.erase(range.first, range.second);
        for (Waiter& w : to_wake) fulfill_waiter(key, std::move(w));
        return ref;
    }

    // Resolve and fetch. The returned record's duration covers the hop costs;
    // `done` additionally accounts for waiting on an in-flight producing copy.
    GetResult get(const std::string& key, const Placement& dest) {
        auto owner = key_owner_.find(key);
        if (owner == key_owner_.end()) raise(ErrorCode::KeyNotFound, key);
        Daemon& daemon = daemons_[static_cast<std::size_t>(owner->second)];
        GetResult out;
        {
            std::lock_guard<std::mutex> guard(daemon.mu);
            const Entry& e = daemon.objects.at(key);
            out.object = e.object;
            out.record.key = key;
            out.record.bytes = e.location.len;
            out.record.path = resolve_path(e.location, dest);
            for (HopKind h : out.record.path)
                out.record.sim_duration += cluster_.links().hop_cost(h, e.location.len);
            out.start = std::max(loop_.now(), e.ready_at);
            out.done = out.start + out.record.sim_duration;
            ++get_calls_;
        }
        log_.append(loop_.now(), "store_get",
                    Json{{"key", key},
                         {"bytes", out.record.bytes},
                         {"path", path_names(out.record.path)},
                         {"duration", out.record.sim_duration}});
        return out;
    }

    // Subscription flavor: invoke `on_ready` (via the event loop, at the
    // virtual completion time) once the key's Set has completed, or
    // `on_timeout` if nothing published it within `timeout_s`.
    void get_when_ready(const std::string& key, const Placement& dest, double timeout_s,
                        std::function<void(GetResult)> on_ready,
                        std::function<void()> on_timeout = {}) {
        if (key_owner_.count(key)) {
            GetResult r = get(key, dest);
            loop_.schedule(r.done, [on_ready = std::move(on_ready), r]() { on_ready(r); });
            return;
        }
        // Publisher node is unknown until Set, so the subscription is held in a
        // store-wide pending list that set() consults after registration.
        auto state = std::make_shared<WaiterState>();
        Waiter w{dest, std::move(on_ready), state};
        pending_waiters_.emplace(key, w);
        loop_.schedule_after(timeout_s, [this, key, state, on_timeout]() {
            if (state->fired) return;
            state->fired = true;
            erase_pending_waiter(key, state);
            if (on_timeout) {
                on_timeout();
            } else {
                raise(ErrorCode::GetTimeout, key);
            }
        });
    }

    void del(const std::string& key) {
        auto owner = key_owner_.find(key);
        if (owner == key_owner_.end()) raise(ErrorCode::KeyNotFound, key);
        Daemon& daemon = daemons_[static_cast<std::size_t>(owner->second)];
        {
            std::lock_guard<std::mutex> guard(daemon.mu);
            auto it = daemon.objects.find(key);
            release_storage(it->second);
            daemon.objects.erase(it);
        }
        key_owner_.erase(owner);
        log_.append(loop_.now(), "store_delete", Json{{"key", key}});
    }

    bool contains(const std::string& key) const { return key_owner_.count(key) != 0; }

    // Metadata-only inspection: no transfer is modeled or logged.
    const HeterogeneousObject* peek(const std::string& key) const {
        auto owner = key_owner_.find(key);
        if (owner == key_owner_.end()) return nullptr;
        const Daemon& daemon = daemons_[static_cast<std::size_t>(owner->second)];
        return &daemon.objects.at(key).object;
    }

    // --- contiguous weight buffers -----------------------------------------

    struct LayoutSlot {
        std::uint64_t offset;  // byte offset into the packed buffer
        std::vector<std::size_t> shape;
    };

    static std::pair<HeterogeneousObject, std::vector<LayoutSlot>> pack_weights(
        const std::vector<F64Tensor>& tensors) {
        if (tensors.empty()) raise(ErrorCode::EmptyList, "pack_weights of empty list");
        HeterogeneousObject buf;
        buf.dtype = DType::Bytes;
        std::vector<LayoutSlot> layout;
        std::uint64_t off = 0;
        for (const F64Tensor& t : tensors) {
            layout.push_back(LayoutSlot{off, t.shape});
            buf.payload.resize(off + t.byte_length());
            if (!t.data.empty())
                std::memcpy(buf.payload.data() + off, t.data.data(), t.byte_length());
            off += t.byte_length();
        }
        return {std::move(buf), std::move(layout)};
    }

    static std::vector<F64Tensor> unpack_weights(const HeterogeneousObject& buf,
                                                 const std::vector<LayoutSlot>& layout) {
        std::vector<F64Tensor> out;
        for (const LayoutSlot& slot : layout) {
            F64Tensor t;
            t.shape = slot.shape;
            const std::uint64_t n = F64Tensor::element_count(slot.shape);
            if (slot.offset + n * sizeof(double) > buf.payload.size()) {
                raise(ErrorCode::LayoutOutOfBounds,
                      "slot at offset " + std::to_string(slot.offset) + " past buffer end");
            }
            t.data.resize(n);
            if (n) std::memcpy(t.data.data(), buf.payload.data() + slot.offset, n * sizeof(double));
            out.push_back(std::move(t));
        }
        return out;
    }

    // --- accounting hooks for the coherence invariant -----------------------

    std::uint64_t attributed_device_bytes(DeviceId dev) const {
        std::uint64_t total = 0;
        for (const Daemon& d : daemons_)
            for (const auto& [k, e] : d.objects)
                if (e.location.on_device() && e.location.as_device().dev == dev)
                    total += e.location.len;
        return total;
    }

    std::uint64_t attributed_host_bytes(NodeId node) const {
        std::uint64_t total = 0;
        const Daemon& d = daemons_.at(static_cast<std::size_t>(node));
        for (const auto& [k, e] : d.objects)
            if (!e.location.on_device()) total += e.location.len;
        return total;
    }

    std::uint64_t reserved_device_bytes(DeviceId dev) const {
        std::uint64_t total = 0;
        for (const Daemon& d : daemons_)
            for (const auto& [k, e] : d.objects)
                if (e.dev_reservation && e.dev_reservation->dev == dev)
                    total += e.dev_reservation->bytes;
        return total;
    }

    std::uint64_t set_calls() const { return set_calls_; }
    std::uint64_t get_calls() const { return get_calls_; }

    // Shortest legal path for a stored location / destination pair; exposed
    // so tests can compare against an enumerating oracle.
    std::vector<HopKind> resolve_path(const ObjectLocation& src, const Placement& dest) const {
        if (dest.kind != Placement::Kind::Device) {
            raise(ErrorCode::ConfigError, "get destination must be a device");
        }
        const DeviceId dst = dest.id;
        if (src.on_device()) {
            if (src.as_device().dev == dst) return {HopKind::SameDevice};
            return {HopKind::D2D};
        }
        const NodeId src_node = src.as_host().node;
        if (src_node == cluster_.node_of_device(dst)) return {HopKind::H2D};
        return {HopKind::Rdma, HopKind::Rh2d};
    }

private:
    struct Entry {
        HeterogeneousObject object;
        ObjectLocation location;
        SimTime ready_at = 0.0;
        NodeId daemon_node = 0;
        std::optional<Reservation> dev_reservation;
        std::optional<HostReservation> host_reservation;
    };

    struct WaiterState {
        bool fired = false;
    };

    struct Waiter {
        Placement dest{Placement::Kind::Device, 0};
        std::function<void(GetResult)> on_ready;
        std::shared_ptr<WaiterState> state;
    };

    struct Daemon {
        std::mutex mu;
        std::map<std::string, Entry> objects;
    };

    static std::vector<std::string> path_names(const std::vector<HopKind>& hops) {
        std::vector<std::string> out;
        for (HopKind h : hops) out.emplace_back(hop_name(h));
        return out;
    }

    void validate_object(const HeterogeneousObject& obj) const {
        if (obj.dtype == DType::F64Tensor) {
            const std::size_t expect = F64Tensor::element_count(obj.shape) * sizeof(double);
            if (obj.payload.size() != expect) {
                raise(ErrorCode::ConfigError, "tensor payload length inconsistent with shape");
            }
        }
        if (obj.payload.empty()) raise(ErrorCode::ConfigError, "zero-length object payload");
    }

    void release_storage(Entry& e) {
        if (e.dev_reservation) cluster_.release_device_mem(*e.dev_reservation);
        if (e.host_reservation) cluster_.release_host_mem(*e.host_reservation);
        e.dev_reservation.reset();
        e.host_reservation.reset();
    }

    void fulfill_waiter(const std::string& key, Waiter w) {
        if (w.state->fired) return;
        w.state->fired = true;
        GetResult r = get(key, w.dest);
        loop_.schedule(r.done, [on_ready = std::move(w.on_ready), r]() { on_ready(r); });
    }

    void erase_pending_waiter(const std::string& key, const std::shared_ptr<WaiterState>& state) {
        auto range = pending_waiters_.equal_range(key);
        for (auto it = range.first; it != range.second; ++it) {
            if (it->second.state == state) {
                pending_waiters_.erase(it);
                return;
            }
        }
    }

    EventLoop& loop_;
    Cluster& cluster_;
    EventLog& log_;
    std::vector<Daemon> daemons_;
    std::map<std::string, NodeId> key_owner_;
    std::multimap<std::string, Waiter> pending_waiters_;
    std::uint64_t set_calls_ = 0;
    std::uint64_t get_calls_ = 0;
};

}  // namespace marlsim
