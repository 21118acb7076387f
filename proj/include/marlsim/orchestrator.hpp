#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "marlsim/cluster.hpp"
#include "marlsim/codec.hpp"
#include "marlsim/config.hpp"
#include "marlsim/errors.hpp"
#include "marlsim/event_log.hpp"
#include "marlsim/experience_store.hpp"
#include "marlsim/object_store.hpp"
#include "marlsim/rollout.hpp"
#include "marlsim/sim.hpp"
#include "marlsim/training.hpp"
#include "marlsim/workload.hpp"

namespace marlsim {

// Shortest round-trip decimal rendering; keeps every emitted file byte-stable.
inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

struct StepMetrics {
    double e2e_s = 0.0;
    double rollout_s = 0.0;
    double train_s = 0.0;
    double other_s = 0.0;
    std::uint64_t tokens = 0;
    double throughput_tps = 0.0;
};

struct VersionLedgerEntry {
    std::string agent;
    std::int64_t version = 0;
    double update_t = 0.0;
    double sync_t = 0.0;
};

struct MetricsReport {
    std::string mode;
    std::vector<StepMetrics> steps;
    std::map<std::string, std::vector<std::pair<double, std::size_t>>> queue_traces;
    std::vector<std::pair<double, double>> utilization;
    std::vector<VersionLedgerEntry> version_ledger;

    double total_e2e_s() const {
        double s = 0.0;
        for (const StepMetrics& m : steps) s += m.e2e_s;
        return s;
    }
    std::uint64_t total_tokens() const {
        std::uint64_t t = 0;
        for (const StepMetrics& m : steps) t += m.tokens;
        return t;
    }
    double throughput_tps() const {
        const double e2e = total_e2e_s();
        return e2e > 0 ? static_cast<double>(total_tokens()) / e2e : 0.0;
    }

    Json to_json() const {
        Json j;
        j["mode"] = mode;
        j["steps"] = Json::array();
        for (const StepMetrics& m : steps) {
            j["steps"].push_back(Json{{"e2e_s", m.e2e_s},
                                      {"rollout_s", m.rollout_s},
                                      {"train_s", m.train_s},
                                      {"other_s", m.other_s},
                                      {"tokens", m.tokens},
                                      {"throughput_tps", m.throughput_tps}});
        }
        Json traces = Json::object();
        for (const auto& [agent, series] : queue_traces) {
            Json arr = Json::array();
            for (const auto& [t, len] : series) arr.push_back(Json::array({t, len}));
            traces[agent] = arr;
        }
        j["queue_traces"] = traces;
        Json util = Json::array();
        for (const auto& [t, frac] : utilization) util.push_back(Json::array({t, frac}));
        j["utilization"] = util;
        Json ledger = Json::array();
        for (const VersionLedgerEntry& e : version_ledger) {
            ledger.push_back(Json{{"agent", e.agent},
                                  {"version", e.version},
                                  {"update_t", e.update_t},
                                  {"sync_t", e.sync_t}});
        }
        j["version_ledger"] = ledger;
        return j;
    }
};

// Drives the rollout <-> training loop in one of four pipeline modes, owns the
// global per-agent version counters, dispatches micro batches, and performs
// the unified weight synchronization.
class Orchestrator {
public:
    explicit Orchestrator(RunConfig cfg)
        : cfg_(std::move(cfg)),
          loop_(ClockMode::Virtual),
          cluster_(cfg_.nodes, cfg_.devices_per_node, cfg_.mem_bytes, cfg_.host_mem_bytes,
                   cfg_.links),
          objects_(loop_, cluster_, log_),
          exp_(objects_),
          workload_(cfg_, cfg_.seed) {
        cfg_.validate();
        build_pools();
        trainer_ = std::make_unique<TrainingEngine>(
            loop_, cluster_, objects_, log_, train_pool_,
            TrainingConfig{AdamParams{cfg_.lr, 0.9, 0.999, 1e-8}, cfg_.global_batch, 1e-8,
                           cfg_.devices_per_group, cfg_.train_seconds_per_sample,
                           cfg_.control_plane_s, cfg_.mode == PipelineMode::OneStepAsync ? 1 : 0,
                           cfg_.seed});
        AgentWorkflow wf;
        wf.agents = cfg_.agents;
        wf.edges = cfg_.edges;
        wf.k = cfg_.intra_query;
        RolloutConfig rc;
        rc.seed = cfg_.seed;
        rc.max_tokens = cfg_.max_tokens;
        rc.greedy = cfg_.greedy;
        rc.timeout_s = cfg_.timeout_factor * cfg_.latency.median();
        rc.retry_limit = cfg_.retry_limit;
        rc.rebalance_delta = cfg_.delta;
        rc.rebalance_interval_s = cfg_.rebalance_interval_s;
        rc.reward_pattern = cfg_.reward_pattern;
        rollout_ = std::make_unique<RolloutEngine>(loop_, cluster_, objects_, exp_, log_, wf,
                                                   cfg_.latency, rc);
        rollout_->rebalance_enabled = cfg_.rebalance_enabled;
        setup();
    }

    MetricsReport run() {
        for (int s = 0; s < cfg_.steps; ++s) run_step(s);
        report_.mode = pipeline_mode_name(cfg_.mode);
        return report_;
    }

    // test access
    EventLoop& loop() { return loop_; }
    EventLog& log() { return log_; }
    Cluster& cluster() { return cluster_; }
    ObjectStore& objects() { return objects_; }
    ExperienceStore& experience() { return exp_; }
    TrainingEngine& trainer() { return *trainer_; }
    RolloutEngine& rollout() { return *rollout_; }
    const ResourcePool& training_pool() const { return train_pool_; }
    const ResourcePool& rollout_pool() const { return rollout_pool_; }
    const RunConfig& config() const { return cfg_; }

    // Final weights per agent, read from the live group or its checkpoint.
    Matrix final_weights(const std::string& agent) {
        return trainer_->peek_state(agent).model.weights();
    }

private:
    void build_pools() {
        const int agents_n = static_cast<int>(cfg_.agents.size());
        const int rollout_n = agents_n * cfg_.instances_per_agent;
        const int train_n =
            (cfg_.static_allocation ? agents_n : cfg_.training_slots) * cfg_.devices_per_group;
        train_pool_.kind = PoolKind::Training;
        rollout_pool_.kind = PoolKind::Rollout;
        if (cfg_.mode == PipelineMode::ColocatedSync) {
            for (std::size_t d = 0; d < cluster_.device_count(); ++d) {
                train_pool_.devices.push_back(static_cast<DeviceId>(d));
                rollout_pool_.devices.push_back(static_cast<DeviceId>(d));
            }
            return;
        }
        for (int d = 0; d < train_n; ++d) train_pool_.devices.push_back(d);
        for (int d = train_n; d < train_n + rollout_n; ++d) rollout_pool_.devices.push_back(d);
    }

    void setup() {
        for (const std::string& agent : cfg_.agents) {
            TableSchema schema;
            schema.agent_id = agent;
            schema.columns = {{"prompt", ColumnType::List},
                              {"response", ColumnType::List},
                              {"logprobs", ColumnType::Tensor},
                              {"reward", ColumnType::Float},
                              {"advantage", ColumnType::Float}};
            exp_.create_table(schema);
            const ModelDims dims = cfg_.dims_for(agent);
            trainer_->add_agent(agent, dims.vocab_size, dims.feature_dim);
            rollout_->register_agent_model(agent, dims.vocab_size, dims.feature_dim);
        }
        // Instances live on the rollout pool, in agent-major order.
        std::size_t next_dev = 0;
        for (const std::string& agent : cfg_.agents) {
            for (int i = 0; i < cfg_.instances_per_agent; ++i) {
                rollout_->create_instance(agent, rollout_pool_.devices.at(next_dev++));
            }
        }
        // Version-0 weights come up on the host tier of node 0; instances pull
        // them through the regular sync path.
        for (const std::string& agent : cfg_.agents) {
            trainer_->publish_weights(agent, trainer_->initial_model(agent), 0, Placement::host(0));
            rollout_->sync_agent(agent, 0, nullptr);
        }
        if (cfg_.static_allocation) {
            for (const std::string& agent : cfg_.agents) trainer_->activate(agent, nullptr);
        }
        rollout_->on_progress = [this]() { on_rollout_progress(); };
        rollout_->on_chain_dropped = [this](const std::string& input) { on_chain_dropped(input); };
        rollout_->on_group_released = [this](const std::string& input) { on_group_released(input); };
        rollout_->queue_poll = [this]() { sample_queue_gauges(); };
        loop_.run();
    }

    struct StepCtx {
        int step = 0;
        SimTime t0 = 0.0;
        std::int64_t gen_version = 0;
        std::int64_t data_version = 0;
        bool has_training = true;
        bool train_enabled = false;
        bool rollout_done = false;
        bool syncing = false;
        bool done = false;
        int committed = 0;
        std::set<std::string> pending_queries;
        std::set<std::string> admitted_inputs;
        std::map<std::string, int> trained_batches;
        std::map<std::string, bool> updated;
        std::map<std::string, bool> synced;
        std::map<std::string, bool> action_pending;
        SimTime t_roll_end = 0.0;
        SimTime t_train_end = 0.0;
        std::uint64_t tokens_at_start = 0;
    };

    void run_step(int step) {
        ctx_ = StepCtx{};
        ctx_.step = step;
        ctx_.t0 = loop_.now();
        ctx_.t_roll_end = ctx_.t0;
        ctx_.t_train_end = ctx_.t0;
        ctx_.tokens_at_start = rollout_->generated_tokens();
        ctx_.gen_version = rollout_->announced_version(cfg_.agents.front());
        ctx_.data_version =
            cfg_.mode == PipelineMode::OneStepAsync ? prev_gen_version_ : ctx_.gen_version;
        ctx_.has_training = !(cfg_.mode == PipelineMode::OneStepAsync && step == 0);
        ctx_.train_enabled = cfg_.mode == PipelineMode::MicroBatchAsync ||
                             (cfg_.mode == PipelineMode::OneStepAsync && step > 0);
        for (const std::string& a : cfg_.agents) {
            ctx_.trained_batches[a] = 0;
            ctx_.updated[a] = false;
            ctx_.synced[a] = false;
            ctx_.action_pending[a] = false;
        }
        step_active_ = true;
        last_progress_ = loop_.now();
        log_.append(loop_.now(), "step_start",
                    Json{{"step", step}, {"gen_version", ctx_.gen_version}});
        admit_queries();
        schedule_watchdog();
        pump_all();
        loop_.run();
        if (!ctx_.done) {
            raise(ErrorCode::StallDetected,
                  "step " + std::to_string(step) + " incomplete with an idle event queue");
        }
        prev_gen_version_ = ctx_.gen_version;
        finalize_step_metrics();
    }

    // --- admission -------------------------------------------------------------

    void admit_queries() {
        while (static_cast<int>(ctx_.pending_queries.size()) < cfg_.inter_query &&
               ctx_.committed < cfg_.global_batch) {
            const Query q = workload_.query(query_counter_++);
            ctx_.pending_queries.insert(q.input_id);
            ctx_.committed += cfg_.intra_query;
            rollout_->submit_query(q);
        }
    }

    void on_chain_dropped(const std::string&) {
        ctx_.committed -= 1;
        last_progress_ = loop_.now();
        if (!ctx_.done) admit_queries();
    }

    void on_group_released(const std::string& input) {
        ctx_.pending_queries.erase(input);
        last_progress_ = loop_.now();
        if (ctx_.done) return;
        admit_queries();
        check_rollout_done();
        pump_all();
    }

    void on_rollout_progress() {
        last_progress_ = loop_.now();
        if (ctx_.done) return;
        check_rollout_done();
        if (ctx_.train_enabled) pump_all();
    }

    void check_rollout_done() {
        if (ctx_.rollout_done) return;
        if (!ctx_.pending_queries.empty() || ctx_.committed < cfg_.global_batch) return;
        ctx_.rollout_done = true;
        ctx_.t_roll_end = rollout_->last_completion_time();
        if (!ctx_.has_training) {
            finish_step();
            return;
        }
        switch (cfg_.mode) {
            case PipelineMode::DisaggSync:
                ctx_.train_enabled = true;
                pump_all();
                break;
            case PipelineMode::ColocatedSync:
                log_.append(loop_.now(), "offload", Json{{"step", ctx_.step}});
                loop_.schedule_after(cfg_.onload_offload_s, [this]() {
                    ctx_.train_enabled = true;
                    pump_all();
                });
                break;
            case PipelineMode::OneStepAsync:
                check_barrier();
                break;
            case PipelineMode::MicroBatchAsync:
                check_barrier();
                break;
        }
    }

    // --- training pump -----------------------------------------------------------

    int batches_per_step() const {
        return static_cast<int>(cfg_.global_batch / cfg_.micro_batch);
    }

    void pump_all() {
        if (!ctx_.train_enabled || ctx_.syncing || ctx_.done) return;
        for (const std::string& agent : cfg_.agents) pump_agent(agent);
    }

    void pump_agent(const std::string& agent) {
        if (!ctx_.train_enabled || ctx_.syncing || ctx_.done) return;
        if (ctx_.updated[agent] || ctx_.action_pending[agent]) return;
        if (trainer_->is_active(agent) && trainer_->in_flight(agent)) return;

        if (ctx_.trained_batches[agent] == batches_per_step()) {
            do_update(agent);
            return;
        }
        if (exp_.ready_count(agent, ctx_.data_version) <
            static_cast<std::size_t>(cfg_.micro_batch)) {
            return;
        }
        if (!trainer_->is_active(agent)) {
            ensure_active(agent);
            return;
        }
        auto batch = exp_.poll_micro_batch(agent, ctx_.data_version,
                                           static_cast<std::size_t>(cfg_.micro_batch));
        if (!batch) return;
        trainer_->train_micro_batch(
            agent, *batch, exp_.schema(agent),
            [this, agent, batch = *batch](const GradReport& report) {
                (void)report;
                exp_.complete(agent, batch.samples);
                ctx_.trained_batches[agent] += 1;
                last_progress_ = loop_.now();
                pump_all();
            });
    }

    void ensure_active(const std::string& agent) {
        if (trainer_->can_activate(agent)) {
            ctx_.action_pending[agent] = true;
            trainer_->activate(agent, [this, agent]() {
                ctx_.action_pending[agent] = false;
                last_progress_ = loop_.now();
                pump_all();
            });
            return;
        }
        // Work-conserving victim: an Active group that is idle and either
        // already updated or has nothing ready to train right now.
        for (const std::string& victim : cfg_.agents) {
            if (victim == agent || !trainer_->is_active(victim)) continue;
            if (trainer_->in_flight(victim) || ctx_.action_pending[victim]) continue;
            const bool idle =
                ctx_.updated[victim] ||
                (exp_.ready_count(victim, ctx_.data_version) <
                     static_cast<std::size_t>(cfg_.micro_batch) &&
                 ctx_.trained_batches[victim] < batches_per_step());
            if (!idle) continue;
            ctx_.action_pending[victim] = true;
            trainer_->suspend(victim, [this, victim]() {
                ctx_.action_pending[victim] = false;
                last_progress_ = loop_.now();
                pump_all();
            });
            return;
        }
    }

    void do_update(const std::string& agent) {
        const std::int64_t version = trainer_->apply_global_update(agent);
        // One-step mode keeps rolling the next generation under the old
        // weights; every other mode holds dispatch until this agent syncs.
        if (cfg_.mode != PipelineMode::OneStepAsync) rollout_->pause(agent);
        ctx_.updated[agent] = true;
        ctx_.t_train_end = loop_.now();
        last_progress_ = loop_.now();
        VersionLedgerEntry entry;
        entry.agent = agent;
        entry.version = version;
        entry.update_t = loop_.now();
        pending_ledger_[agent] = entry;
        check_barrier();
    }

    void check_barrier() {
        if (ctx_.syncing || ctx_.done) return;
        if (!ctx_.rollout_done) return;
        for (const std::string& a : cfg_.agents)
            if (!ctx_.updated[a]) return;
        start_sync();
    }

    // --- weight sync --------------------------------------------------------------

    void start_sync() {
        ctx_.syncing = true;
        const auto begin_syncs = [this]() {
            for (const std::string& agent : cfg_.agents) {
                const std::int64_t version = pending_ledger_.at(agent).version;
                rollout_->sync_agent(agent, version, [this, agent]() {
                    ctx_.synced[agent] = true;
                    pending_ledger_[agent].sync_t = loop_.now();
                    last_progress_ = loop_.now();
                    for (const std::string& a : cfg_.agents)
                        if (!ctx_.synced[a]) return;
                    finish_step();
                });
            }
        };
        if (cfg_.mode == PipelineMode::ColocatedSync) {
            log_.append(loop_.now(), "onload", Json{{"step", ctx_.step}});
            loop_.schedule_after(cfg_.onload_offload_s, begin_syncs);
        } else {
            begin_syncs();
        }
    }

    void finish_step() {
        // Retire the previous weight generation and stale samples.
        for (const std::string& agent : cfg_.agents) {
            if (ctx_.has_training) {
                const std::int64_t old_version = pending_ledger_.at(agent).version - 1;
                const std::string old_key = TrainingEngine::weights_key(agent, old_version);
                if (old_version >= 0 && objects_.contains(old_key)) objects_.del(old_key);
            }
            if (!cfg_.allow_stale_carryover) {
                const std::int64_t purge_below = cfg_.mode == PipelineMode::OneStepAsync
                                                     ? rollout_->announced_version(agent) - 1
                                                     : rollout_->announced_version(agent);
                const std::size_t purged = exp_.purge_stale(agent, purge_below);
                if (purged) {
                    log_.append(loop_.now(), "purge",
                                Json{{"agent", agent}, {"count", purged}});
                }
            }
            if (ctx_.has_training) report_.version_ledger.push_back(pending_ledger_.at(agent));
        }
        report_.utilization.emplace_back(loop_.now(),
                                         cluster_.utilization(train_pool_, ctx_.t0, loop_.now()));
        log_.append(loop_.now(), "step_end", Json{{"step", ctx_.step}});
        ctx_.done = true;
        step_active_ = false;
    }

    void finalize_step_metrics() {
        StepMetrics m;
        m.e2e_s = loop_.now() - ctx_.t0;
        m.rollout_s = ctx_.t_roll_end - ctx_.t0;
        m.train_s = std::max(0.0, ctx_.t_train_end - ctx_.t_roll_end);
        m.other_s = m.e2e_s - m.rollout_s - m.train_s;
        m.tokens = rollout_->generated_tokens() - ctx_.tokens_at_start;
        m.throughput_tps = m.e2e_s > 0 ? static_cast<double>(m.tokens) / m.e2e_s : 0.0;
        report_.steps.push_back(m);
    }

    // --- guards and traces ----------------------------------------------------------

    void schedule_watchdog() {
        loop_.schedule_after(cfg_.stall_budget_s, [this]() {
            if (!step_active_) return;
            if (loop_.now() - last_progress_ >= cfg_.stall_budget_s) {
                raise(ErrorCode::StallDetected,
                      "no progress for " + format_double(cfg_.stall_budget_s) + "s of virtual time");
            }
            schedule_watchdog();
        });
    }

    void sample_queue_gauges() {
        for (const std::string& agent : cfg_.agents) {
            report_.queue_traces[agent].emplace_back(loop_.now(), rollout_->queue_length(agent));
        }
    }

    RunConfig cfg_;
    EventLoop loop_;
    EventLog log_;
    Cluster cluster_;
    ObjectStore objects_;
    ExperienceStore exp_;
    ResourcePool train_pool_;
    ResourcePool rollout_pool_;
    std::unique_ptr<TrainingEngine> trainer_;
    std::unique_ptr<RolloutEngine> rollout_;
    WorkloadGenerator workload_;

    StepCtx ctx_;
    MetricsReport report_;
    std::map<std::string, VersionLedgerEntry> pending_ledger_;
    int query_counter_ = 0;
    std::int64_t prev_gen_version_ = 0;
    SimTime last_progress_ = 0.0;
    bool step_active_ = false;
};

inline MetricsReport run_pipeline(const RunConfig& cfg) {
    Orchestrator orch(cfg);
    return orch.run();
}

// Runs all four modes on the identical seed and workload; rows ordered as the
// mode enum. speedup_vs_colocated is colocated mean step time over the mode's.
struct CompareResult {
    std::vector<std::pair<std::string, MetricsReport>> reports;

    std::string summary_csv() const {
        double colocated_e2e = 0.0;
        for (const auto& [mode, rep] : reports) {
            if (mode == "colocated-sync") {
                colocated_e2e = rep.total_e2e_s() / static_cast<double>(rep.steps.size());
            }
        }
        std::string csv = "mode,e2e_s,speedup_vs_colocated,throughput_tps\n";
        for (const auto& [mode, rep] : reports) {
            const double e2e = rep.total_e2e_s() / static_cast<double>(rep.steps.size());
            const double speedup = e2e > 0 ? colocated_e2e / e2e : 0.0;
            csv += mode + "," + format_double(e2e) + "," + format_double(speedup) + "," +
                   format_double(rep.throughput_tps()) + "\n";
        }
        return csv;
    }
};

inline CompareResult run_compare(RunConfig cfg) {
    CompareResult out;
    for (PipelineMode mode : {PipelineMode::ColocatedSync, PipelineMode::DisaggSync,
                              PipelineMode::OneStepAsync, PipelineMode::MicroBatchAsync}) {
        RunConfig c = cfg;
        c.mode = mode;
        c.validate();
        out.reports.emplace_back(pipeline_mode_name(mode), run_pipeline(c));
    }
    return out;
}

// Plot-ready CSV traces emitted next to every report.
inline std::string queues_csv(const MetricsReport& rep) {
    std::string csv = "t,agent,queue_len\n";
    for (const auto& [agent, series] : rep.queue_traces) {
        for (const auto& [t, len] : series) {
            csv += format_double(t) + "," + agent + "," + std::to_string(len) + "\n";
        }
    }
    return csv;
}

inline std::string utilization_csv(const MetricsReport& rep) {
    std::string csv = "t,utilization\n";
    for (const auto& [t, frac] : rep.utilization) {
        csv += format_double(t) + "," + format_double(frac) + "\n";
    }
    return csv;
}

}  // namespace marlsim
