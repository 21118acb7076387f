#pragma once

#include <cinttypes>
#include <cstdio>
#include <string>
#include <vector>

#include "marlsim/config.hpp"
#include "marlsim/rng.hpp"
#include "marlsim/rollout.hpp"

namespace marlsim {

// Deterministic query stream. With skew disabled every query walks the static
// DAG; with skew enabled each query carries an explicit chain whose per-turn
// agent draw gives the first (core) agent the configured share of requests.
struct WorkloadTrace {
    std::vector<Query> queries;
    LatencyModel latency;
};

class WorkloadGenerator {
public:
    WorkloadGenerator(const RunConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {}

    // Per-turn probability of revisiting the core agent such that the overall
    // request share (root turn included) meets the target.
    double core_turn_probability() const {
        const double L = static_cast<double>(cfg_.skew_turns);
        double p = (L * cfg_.core_agent_share - 1.0) / (L - 1.0);
        if (p < 0.0) p = 0.0;
        if (p > 1.0) p = 1.0;
        return p;
    }

    Query query(int index) const {
        Query q;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "q%05d", index);
        q.input_id = buf;
        Rng rng(mix_u64(mix_str(mix_u64(seed_, 0x9E77ULL), q.input_id), 1));
        const std::size_t len = 4 + rng.next_below(5);
        const std::size_t vocab = cfg_.dims_for(cfg_.agents.front()).vocab_size;
        for (std::size_t i = 0; i < len; ++i) {
            q.prompt.push_back(static_cast<Token>(1 + rng.next_below(vocab - 1)));
        }
        if (cfg_.skew_enabled) {
            const double p = core_turn_probability();
            q.path.push_back(cfg_.agents.front());
            for (int t = 1; t < cfg_.skew_turns; ++t) {
                if (rng.next_unit() < p || cfg_.agents.size() == 1) {
                    q.path.push_back(cfg_.agents.front());
                } else {
                    const std::size_t aux = 1 + rng.next_below(cfg_.agents.size() - 1);
                    q.path.push_back(cfg_.agents[aux]);
                }
            }
        }
        return q;
    }

    WorkloadTrace trace(int query_count) const {
        WorkloadTrace t;
        t.latency = cfg_.latency;
        for (int i = 0; i < query_count; ++i) t.queries.push_back(query(i));
        return t;
    }

private:
    const RunConfig& cfg_;
    std::uint64_t seed_;
};

}  // namespace marlsim
