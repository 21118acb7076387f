#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <queue>
#include <thread>
#include <vector>

#include "marlsim/errors.hpp"

namespace marlsim {

using SimTime = double;  // seconds
using EventId = std::uint64_t;

enum class ClockMode { Virtual, Wall };

// Single-threaded event loop. Virtual mode jumps the clock from event to
// event; two runs with the same schedule produce the same firing order
// (timestamp order, ties broken by ascending EventId). Wall mode sleeps out
// the gaps scaled by `wall_scale` and exists for demo runs only.
class EventLoop {
public:
    explicit EventLoop(ClockMode mode = ClockMode::Virtual, double wall_scale = 1.0)
        : mode_(mode), wall_scale_(wall_scale) {}

    SimTime now() const { return now_; }
    ClockMode mode() const { return mode_; }

    EventId schedule(SimTime at, std::function<void()> fn) {
        if (at < now_) {
            raise(ErrorCode::SchedulingInPast, "event at t=" + std::to_string(at) +
                                                   " before now=" + std::to_string(now_));
        }
        const EventId id = next_id_++;
        queue_.push(Entry{at, id, std::move(fn)});
        return id;
    }

    EventId schedule_after(SimTime delay, std::function<void()> fn) {
        return schedule(now_ + delay, std::move(fn));
    }

    bool empty() const { return queue_.empty(); }
    std::size_t pending() const { return queue_.size(); }

    // Fire the next event; returns false when the queue is empty.
    bool step() {
        if (queue_.empty()) return false;
        Entry e = queue_.top();
        queue_.pop();
        if (mode_ == ClockMode::Wall && e.at > now_) {
            const double gap = (e.at - now_) * wall_scale_;
            if (gap > 0) std::this_thread::sleep_for(std::chrono::duration<double>(gap));
        }
        now_ = e.at;
        e.fn();
        return true;
    }

    // Process events until the queue drains.
    void run() {
        while (step()) {
        }
    }

    // Process events with timestamp <= t, then advance the clock to t.
    void run_until(SimTime t) {
        while (!queue_.empty() && queue_.top().at <= t) step();
        if (t > now_) now_ = t;
    }

private:
    struct Entry {
        SimTime at;
        EventId id;
        std::function<void()> fn;
    };
    struct Later {
        bool operator()(const Entry& a, const Entry& b) const {
            if (a.at != b.at) return a.at > b.at;
            return a.id > b.id;
        }
    };

    ClockMode mode_;
    double wall_scale_;
    SimTime now_ = 0.0;
    EventId next_id_ = 0;
    std::priority_queue<Entry, std::vector<Entry>, Later> queue_;
};

}  // namespace marlsim
