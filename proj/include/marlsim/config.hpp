#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "marlsim/cluster.hpp"
#include "marlsim/errors.hpp"
#include "marlsim/policy.hpp"
#include "marlsim/rollout.hpp"

namespace marlsim {

enum class PipelineMode { ColocatedSync, DisaggSync, OneStepAsync, MicroBatchAsync };

inline const char* pipeline_mode_name(PipelineMode m) {
    switch (m) {
        case PipelineMode::ColocatedSync: return "colocated-sync";
        case PipelineMode::DisaggSync: return "disagg-sync";
        case PipelineMode::OneStepAsync: return "one-step-async";
        case PipelineMode::MicroBatchAsync: return "micro-batch-async";
    }
    return "?";
}

inline const std::vector<std::string>& pipeline_mode_names() {
    static const std::vector<std::string> names = {"colocated-sync", "disagg-sync",
                                                   "one-step-async", "micro-batch-async"};
    return names;
}

inline PipelineMode parse_pipeline_mode(const std::string& s) {
    if (s == "colocated-sync") return PipelineMode::ColocatedSync;
    if (s == "disagg-sync") return PipelineMode::DisaggSync;
    if (s == "one-step-async") return PipelineMode::OneStepAsync;
    if (s == "micro-batch-async") return PipelineMode::MicroBatchAsync;
    std::string valid;
    for (const std::string& n : pipeline_mode_names()) valid += " " + n;
    raise(ErrorCode::ConfigError, "unknown mode '" + s + "'; valid modes:" + valid);
}

struct ModelDims {
    std::size_t vocab_size = 32;
    std::size_t feature_dim = 16;
};

// Everything one run needs; a single JSON file drives it all.
struct RunConfig {
    // cluster
    int nodes = 2;
    int devices_per_node = 8;
    std::uint64_t mem_bytes = 64ULL << 30;
    std::uint64_t host_mem_bytes = 256ULL << 30;
    LinkCostModel links;

    // workflow
    std::vector<std::string> agents = {"planner", "executor", "critic"};
    std::vector<std::pair<std::string, std::string>> edges = {{"planner", "executor"},
                                                              {"executor", "critic"}};

    // skew
    double core_agent_share = 0.76;
    bool skew_enabled = false;
    int skew_turns = 3;

    // latency
    LatencyModel latency = LatencyModel::lognormal(1.0, 1.0);

    // pipeline
    PipelineMode mode = PipelineMode::MicroBatchAsync;
    std::int64_t global_batch = 64;
    std::int64_t micro_batch = 16;
    int delta = 5;
    int inter_query = 4;
    int intra_query = 16;
    std::size_t max_tokens = 8192;
    double lr = 1e-6;
    std::uint64_t seed = 2048;

    int steps = 2;

    // simulation knobs
    int instances_per_agent = 2;
    int devices_per_group = 1;
    int training_slots = 2;
    bool static_allocation = false;
    double train_seconds_per_sample = 0.5;
    double control_plane_s = 0.05;
    double onload_offload_s = 5.0;
    double rebalance_interval_s = 1.0;
    double timeout_factor = 10.0;
    int retry_limit = 3;
    double stall_budget_s = 1000.0;
    double sync_timeout_s = 1000.0;
    ModelDims model;
    std::map<std::string, ModelDims> model_overrides;
    std::vector<Token> reward_pattern = {3, 1, 4};
    bool greedy = false;
    bool rebalance_enabled = true;
    bool allow_stale_carryover = false;

    ModelDims dims_for(const std::string& agent) const {
        auto it = model_overrides.find(agent);
        return it == model_overrides.end() ? model : it->second;
    }

    int queries_per_step() const {
        return static_cast<int>((global_batch + intra_query - 1) / intra_query);
    }

    void validate() const {
        if (agents.empty()) raise(ErrorCode::ConfigError, "no agents configured");
        if (global_batch % micro_batch != 0) {
            raise(ErrorCode::ConfigError, "global_batch must be divisible by micro_batch");
        }
        if (static_cast<std::int64_t>(queries_per_step()) * intra_query < global_batch) {
            raise(ErrorCode::ConfigError, "queries x k must cover the global batch");
        }
        if (core_agent_share <= 0.0 || core_agent_share >= 1.0) {
            raise(ErrorCode::ConfigError, "core_agent_share must be in (0,1)");
        }
        if (steps < 1) raise(ErrorCode::ConfigError, "steps must be >= 1");
        const int total = nodes * devices_per_node;
        const int rollout_devs = static_cast<int>(agents.size()) * instances_per_agent;
        const int training_devs =
            (static_allocation ? static_cast<int>(agents.size()) : training_slots) *
            devices_per_group;
        if (mode == PipelineMode::ColocatedSync) {
            if (std::max(rollout_devs, training_devs) > total) {
                raise(ErrorCode::ConfigError, "cluster too small for colocated pools");
            }
        } else if (rollout_devs + training_devs > total) {
            raise(ErrorCode::ConfigError, "cluster too small for disaggregated pools");
        }
        if (devices_per_group > devices_per_node) {
            raise(ErrorCode::ConfigError, "a process group must fit on one node");
        }
    }

    static RunConfig from_json(const Json& j);
    static RunConfig from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) raise(ErrorCode::ConfigError, "cannot open config file " + path);
        Json j;
        try {
            f >> j;
        } catch (const std::exception& e) {
            raise(ErrorCode::ConfigError, std::string("config parse failure: ") + e.what());
        }
        return from_json(j);
    }
};

inline RunConfig RunConfig::from_json(const Json& j) {
    RunConfig c;
    if (j.contains("cluster")) {
        const Json& cl = j["cluster"];
        if (cl.contains("nodes")) c.nodes = cl["nodes"].get<int>();
        if (cl.contains("devices_per_node")) c.devices_per_node = cl["devices_per_node"].get<int>();
        if (cl.contains("mem_bytes")) c.mem_bytes = cl["mem_bytes"].get<std::uint64_t>();
        if (cl.contains("host_mem_bytes"))
            c.host_mem_bytes = cl["host_mem_bytes"].get<std::uint64_t>();
        if (cl.contains("bandwidths")) {
            const Json& bw = cl["bandwidths"];
            if (bw.contains("d2d_bytes_per_s"))
                c.links.d2d_bytes_per_s = bw["d2d_bytes_per_s"].get<double>();
            if (bw.contains("h2d_bytes_per_s"))
                c.links.h2d_bytes_per_s = bw["h2d_bytes_per_s"].get<double>();
            if (bw.contains("rdma_bytes_per_s"))
                c.links.rdma_bytes_per_s = bw["rdma_bytes_per_s"].get<double>();
            if (bw.contains("d2d_latency_s")) c.links.d2d_latency_s = bw["d2d_latency_s"].get<double>();
            if (bw.contains("h2d_latency_s")) c.links.h2d_latency_s = bw["h2d_latency_s"].get<double>();
            if (bw.contains("rdma_latency_s"))
                c.links.rdma_latency_s = bw["rdma_latency_s"].get<double>();
        }
    }
    if (j.contains("workflow")) {
        const Json& wf = j["workflow"];
        if (wf.contains("agents")) c.agents = wf["agents"].get<std::vector<std::string>>();
        if (wf.contains("edges")) {
            c.edges.clear();
            for (const Json& e : wf["edges"]) {
                if (!e.is_array() || e.size() != 2) {
                    raise(ErrorCode::ConfigError, "workflow edge must be a [from, to] pair");
                }
                c.edges.emplace_back(e[0].get<std::string>(), e[1].get<std::string>());
            }
        }
        if (wf.contains("k")) c.intra_query = wf["k"].get<int>();
    }
    if (j.contains("skew")) {
        const Json& sk = j["skew"];
        if (sk.contains("core_agent_share"))
            c.core_agent_share = sk["core_agent_share"].get<double>();
        if (sk.contains("enabled")) c.skew_enabled = sk["enabled"].get<bool>();
        if (sk.contains("turns")) c.skew_turns = sk["turns"].get<int>();
    }
    if (j.contains("latency")) {
        const Json& lt = j["latency"];
        const std::string dist = lt.value("distribution", std::string("lognormal"));
        const Json params = lt.value("params", Json::object());
        if (dist == "lognormal") {
            c.latency = LatencyModel::lognormal(params.value("median_s", 1.0),
                                                params.value("sigma", 1.0));
        } else if (dist == "pareto") {
            c.latency = LatencyModel::pareto(params.value("xm", 0.5), params.value("alpha", 1.5));
        } else if (dist == "fixed") {
            c.latency = LatencyModel::fixed(params.value("c", 1.0));
        } else {
            raise(ErrorCode::ConfigError, "unknown latency distribution '" + dist + "'");
        }
    }
    if (j.contains("pipeline")) {
        const Json& p = j["pipeline"];
        if (p.contains("mode")) c.mode = parse_pipeline_mode(p["mode"].get<std::string>());
        if (p.contains("global_batch")) c.global_batch = p["global_batch"].get<std::int64_t>();
        if (p.contains("micro_batch")) c.micro_batch = p["micro_batch"].get<std::int64_t>();
        if (p.contains("delta")) c.delta = p["delta"].get<int>();
        if (p.contains("inter_query")) c.inter_query = p["inter_query"].get<int>();
        if (p.contains("intra_query")) c.intra_query = p["intra_query"].get<int>();
        if (p.contains("max_tokens")) c.max_tokens = p["max_tokens"].get<std::size_t>();
        if (p.contains("lr")) c.lr = p["lr"].get<double>();
        if (p.contains("seed")) c.seed = p["seed"].get<std::uint64_t>();
    }
    if (j.contains("steps")) c.steps = j["steps"].get<int>();
    if (j.contains("sim")) {
        const Json& s = j["sim"];
        if (s.contains("instances_per_agent"))
            c.instances_per_agent = s["instances_per_agent"].get<int>();
        if (s.contains("devices_per_group")) c.devices_per_group = s["devices_per_group"].get<int>();
        if (s.contains("training_slots")) c.training_slots = s["training_slots"].get<int>();
        if (s.contains("static_allocation")) c.static_allocation = s["static_allocation"].get<bool>();
        if (s.contains("train_seconds_per_sample"))
            c.train_seconds_per_sample = s["train_seconds_per_sample"].get<double>();
        if (s.contains("control_plane_s")) c.control_plane_s = s["control_plane_s"].get<double>();
        if (s.contains("onload_offload_s"))
            c.onload_offload_s = s["onload_offload_s"].get<double>();
        if (s.contains("rebalance_interval_s"))
            c.rebalance_interval_s = s["rebalance_interval_s"].get<double>();
        if (s.contains("timeout_factor")) c.timeout_factor = s["timeout_factor"].get<double>();
        if (s.contains("retry_limit")) c.retry_limit = s["retry_limit"].get<int>();
        if (s.contains("stall_budget_s")) c.stall_budget_s = s["stall_budget_s"].get<double>();
        if (s.contains("sync_timeout_s")) c.sync_timeout_s = s["sync_timeout_s"].get<double>();
        if (s.contains("vocab_size")) c.model.vocab_size = s["vocab_size"].get<std::size_t>();
        if (s.contains("feature_dim")) c.model.feature_dim = s["feature_dim"].get<std::size_t>();
        if (s.contains("model_overrides")) {
            for (auto it = s["model_overrides"].begin(); it != s["model_overrides"].end(); ++it) {
                ModelDims d = c.model;
                if (it.value().contains("vocab_size"))
                    d.vocab_size = it.value()["vocab_size"].get<std::size_t>();
                if (it.value().contains("feature_dim"))
                    d.feature_dim = it.value()["feature_dim"].get<std::size_t>();
                c.model_overrides[it.key()] = d;
            }
        }
        if (s.contains("reward_pattern"))
            c.reward_pattern = s["reward_pattern"].get<std::vector<Token>>();
        if (s.contains("greedy")) c.greedy = s["greedy"].get<bool>();
        if (s.contains("rebalance_enabled")) c.rebalance_enabled = s["rebalance_enabled"].get<bool>();
        if (s.contains("allow_stale_carryover"))
            c.allow_stale_carryover = s["allow_stale_carryover"].get<bool>();
    }
    c.validate();
    return c;
}

}  // namespace marlsim
