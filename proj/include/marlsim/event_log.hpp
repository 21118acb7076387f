#pragma once

#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "marlsim/sim.hpp"

namespace marlsim {

using Json = nlohmann::ordered_json;

struct LogRecord {
    SimTime t = 0.0;
    std::string kind;
    Json payload;
};

// Append-only run log. Engines record domain events here; tests and the
// acceptance oracles replay it, and the CLI can dump it as ndjson.
class EventLog {
public:
    void append(SimTime t, std::string kind, Json payload) {
        records_.push_back(LogRecord{t, std::move(kind), std::move(payload)});
    }

    const std::vector<LogRecord>& records() const { return records_; }

    std::size_t count(const std::string& kind) const {
        std::size_t n = 0;
        for (const auto& r : records_)
            if (r.kind == kind) ++n;
        return n;
    }

    std::vector<const LogRecord*> filter(const std::string& kind) const {
        std::vector<const LogRecord*> out;
        for (const auto& r : records_)
            if (r.kind == kind) out.push_back(&r);
        return out;
    }

    std::string to_ndjson() const {
        std::string out;
        for (const auto& r : records_) {
            Json line;
            line["t"] = r.t;
            line["event_kind"] = r.kind;
            line["payload"] = r.payload;
            out += line.dump();
            out += '\n';
        }
        return out;
    }

    void dump_ndjson(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        f << to_ndjson();
    }

    void clear() { records_.clear(); }

private:
    std::vector<LogRecord> records_;
};

}  // namespace marlsim
