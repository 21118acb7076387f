#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "marlsim/cluster.hpp"
#include "marlsim/codec.hpp"
#include "marlsim/errors.hpp"
#include "marlsim/event_log.hpp"
#include "marlsim/experience_store.hpp"
#include "marlsim/object_store.hpp"
#include "marlsim/policy.hpp"
#include "marlsim/rng.hpp"
#include "marlsim/sample.hpp"
#include "marlsim/sim.hpp"
#include "marlsim/training.hpp"

namespace marlsim {

// Per-request service-time model. Draws are seeded per request identity so a
// trajectory's timing is independent of scheduling order.
struct LatencyModel {
    enum class Kind { Lognormal, Pareto, Fixed } kind = Kind::Fixed;
    double mu = 0.0;     // lognormal location; median = exp(mu)
    double sigma = 1.0;  // lognormal scale
    double xm = 1.0;     // pareto minimum
    double alpha = 2.0;  // pareto shape
    double c = 1.0;      // fixed value

    static LatencyModel lognormal(double median, double sigma) {
        LatencyModel m;
        m.kind = Kind::Lognormal;
        m.mu = std::log(median);
        m.sigma = sigma;
        return m;
    }
    static LatencyModel pareto(double xm, double alpha) {
        LatencyModel m;
        m.kind = Kind::Pareto;
        m.xm = xm;
        m.alpha = alpha;
        return m;
    }
    static LatencyModel fixed(double c) {
        LatencyModel m;
        m.kind = Kind::Fixed;
        m.c = c;
        return m;
    }

    double draw(std::uint64_t seed) const {
        Rng rng(seed);
        switch (kind) {
            case Kind::Lognormal: return std::exp(mu + sigma * rng.next_normal());
            case Kind::Pareto: return xm * std::pow(rng.next_unit(), -1.0 / alpha);
            case Kind::Fixed: return c;
        }
        return c;
    }

    double quantile(double p) const {
        switch (kind) {
            case Kind::Lognormal: return std::exp(mu + sigma * normal_quantile(p));
            case Kind::Pareto: return xm * std::pow(1.0 - p, -1.0 / alpha);
            case Kind::Fixed: return c;
        }
        return c;
    }

    double median() const { return quantile(0.5); }

    // Acklam's rational approximation; plenty for calibration checks.
    static double normal_quantile(double p) {
        static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
        static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
        static const double c_[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                    -2.400758277161838e+00, -2.549732539343734e+00,
                                    4.374664141464968e+00, 2.938163982698783e+00};
        static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                   2.445134137142996e+00, 3.754408661907416e+00};
        const double plow = 0.02425;
        if (p < plow) {
            const double q = std::sqrt(-2 * std::log(p));
            return (((((c_[0] * q + c_[1]) * q + c_[2]) * q + c_[3]) * q + c_[4]) * q + c_[5]) /
                   ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
        }
        if (p > 1 - plow) {
            const double q = std::sqrt(-2 * std::log(1 - p));
            return -(((((c_[0] * q + c_[1]) * q + c_[2]) * q + c_[3]) * q + c_[4]) * q + c_[5]) /
                   ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
        }
        const double q = p - 0.5;
        const double r = q * q;
        return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
               (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    }
};

// Indexed binary min-heap keyed by (load, instance_id). Supports the rekey
// and erase operations the dispatcher needs; coherence is checkable by full
// scan.
class LoadHeap {
public:
    bool empty() const { return heap_.empty(); }
    std::size_t size() const { return heap_.size(); }
    bool contains(int id) const { return pos_.count(id) != 0; }

    void insert(int id, int load) {
        heap_.push_back(Item{load, id});
        pos_[id] = heap_.size() - 1;
        sift_up(heap_.size() - 1);
    }

    void update(int id, int load) {
        const std::size_t i = pos_.at(id);
        const int old = heap_[i].load;
        heap_[i].load = load;
        if (load < old) {
            sift_up(i);
        } else {
            sift_down(i);
        }
    }

    void erase(int id) {
        const std::size_t i = pos_.at(id);
        swap_items(i, heap_.size() - 1);
        pos_.erase(heap_.back().id);
        heap_.pop_back();
        if (i < heap_.size()) {
            sift_up(i);
            sift_down(i);
        }
    }

    int top() const { return heap_.front().id; }

    std::vector<std::pair<int, int>> items() const {
        std::vector<std::pair<int, int>> out;
        for (const Item& it : heap_) out.emplace_back(it.id, it.load);
        return out;
    }

private:
    struct Item {
        int load;
        int id;
        bool operator<(const Item& o) const {
            if (load != o.load) return load < o.load;
            return id < o.id;
        }
    };

    void swap_items(std::size_t i, std::size_t j) {
        std::swap(heap_[i], heap_[j]);
        pos_[heap_[i].id] = i;
        pos_[heap_[j].id] = j;
    }

    void sift_up(std::size_t i) {
        while (i > 0) {
            const std::size_t parent = (i - 1) / 2;
            if (heap_[i] < heap_[parent]) {
                swap_items(i, parent);
                i = parent;
            } else {
                break;
            }
        }
    }

    void sift_down(std::size_t i) {
        while (true) {
            const std::size_t l = 2 * i + 1;
            const std::size_t r = 2 * i + 2;
            std::size_t best = i;
            if (l < heap_.size() && heap_[l] < heap_[best]) best = l;
            if (r < heap_.size() && heap_[r] < heap_[best]) best = r;
            if (best == i) break;
            swap_items(i, best);
            i = best;
        }
    }

    std::vector<Item> heap_;
    std::map<int, std::size_t> pos_;
};

// Static agent DAG: single source fed by user queries, single sink whose
// responses are scored. An agent's turn number is its depth in the DAG.
struct AgentWorkflow {
    std::vector<std::string> agents;
    std::vector<std::pair<std::string, std::string>> edges;
    int k = 16;  // candidate trajectories per prompt

    int agent_index(const std::string& id) const {
        for (std::size_t i = 0; i < agents.size(); ++i)
            if (agents[i] == id) return static_cast<int>(i);
        return -1;
    }

    std::vector<std::string> downstream(const std::string& id) const {
        std::vector<std::string> out;
        for (const auto& [from, to] : edges)
            if (from == id) out.push_back(to);
        return out;
    }

    std::vector<std::string> upstream(const std::string& id) const {
        std::vector<std::string> out;
        for (const auto& [from, to] : edges)
            if (to == id) out.push_back(from);
        return out;
    }

    const std::string& source() const { return agents.front(); }

    std::string sink() const {
        for (const std::string& a : agents)
            if (downstream(a).empty()) return a;
        return agents.back();
    }

    // Longest path from the source; used as number_of_turns.
    int depth(const std::string& id) const {
        if (id == source()) return 0;
        int best = 0;
        for (const std::string& up : upstream(id)) best = std::max(best, depth(up) + 1);
        return best;
    }

    void validate() const {
        if (agents.empty()) raise(ErrorCode::ConfigError, "workflow needs at least one agent");
        for (const auto& [from, to] : edges) {
            if (agent_index(from) < 0 || agent_index(to) < 0) {
                raise(ErrorCode::ConfigError, "edge references unknown agent");
            }
        }
        // Cycle check by repeated sink elimination.
        std::map<std::string, int> outdeg;
        for (const std::string& a : agents) outdeg[a] = 0;
        for (const auto& [from, to] : edges) outdeg[from] += 1;
        std::set<std::string> removed;
        bool progressed = true;
        while (progressed) {
            progressed = false;
            for (const std::string& a : agents) {
                if (removed.count(a) || outdeg[a] != 0) continue;
                removed.insert(a);
                progressed = true;
                for (const auto& [from, to] : edges)
                    if (to == a && !removed.count(from)) outdeg[from] -= 1;
            }
        }
        if (removed.size() != agents.size()) raise(ErrorCode::ConfigError, "workflow DAG has a cycle");
        int sinks = 0;
        for (const std::string& a : agents)
            if (downstream(a).empty()) ++sinks;
        if (sinks != 1) raise(ErrorCode::ConfigError, "workflow must have exactly one sink");
        for (std::size_t i = 1; i < agents.size(); ++i) {
            if (upstream(agents[i]).empty()) {
                raise(ErrorCode::ConfigError, "workflow must have exactly one source, listed first");
            }
        }
        if (!upstream(agents.front()).empty()) {
            raise(ErrorCode::ConfigError, "the first agent must be the source");
        }
        if (k < 1) raise(ErrorCode::ConfigError, "k must be >= 1");
    }
};

// One user query. An explicit `path` overrides the DAG with a linear agent
// chain (used by the skewed workload generator); it must start at the source.
struct Query {
    std::string input_id;
    std::vector<Token> prompt;
    std::vector<std::string> path;
};

struct RolloutConfig {
    std::uint64_t seed = 2048;
    std::size_t max_tokens = 8192;
    bool greedy = false;
    double timeout_s = 0.0;  // 0: derive as 10 x latency median
    int retry_limit = 3;
    int rebalance_delta = 5;
    double rebalance_interval_s = 1.0;
    double eps_adv = 1e-8;
    std::vector<Token> reward_pattern = {3, 1, 4};
};

struct Migration {
    int instance_id = 0;
    std::string from_agent;
    std::string to_agent;
};

struct RolloutRequest {
    SampleId sample_id;
    std::string agent_id;
    std::vector<Token> prompt;
    SimTime enqueue_time = 0.0;
    int attempt = 0;
    std::int64_t version = 0;
};

// One mock inference backend bound to a device. Requests queue per instance
// and are served strictly in order; `pending` counts queued plus in-service.
struct InferenceInstance {
    int instance_id = 0;
    std::string owner_agent;
    std::string pending_owner;  // target agent while detached
    std::int64_t weight_version = -1;
    std::shared_ptr<const PolicyModel> policy;
    int pending = 0;
    DeviceId device = 0;
    Reservation weights_reservation;
    std::deque<RolloutRequest> queue;
    bool serving = false;
    bool detached = false;  // mid-migration
    SimTime next_free = 0.0;
};

// Dependency-driven parallel trajectory generation with least-loaded dispatch
// inside each agent and threshold-triggered instance migration across agents.
class RolloutEngine {
public:
    RolloutEngine(EventLoop& loop, Cluster& cluster, ObjectStore& objects, ExperienceStore& exp,
                  EventLog& log, AgentWorkflow workflow, LatencyModel latency, RolloutConfig cfg)
        : loop_(loop), cluster_(cluster), objects_(objects), exp_(exp), log_(log),
          workflow_(std::move(workflow)), latency_(latency), cfg_(cfg) {
        workflow_.validate();
        if (cfg_.timeout_s <= 0.0) cfg_.timeout_s = 10.0 * latency_.median();
        for (const std::string& a : workflow_.agents) agents_[a];
    }

    // Progress hooks wired by the orchestrator.
    std::function<void()> on_progress;
    std::function<void(const std::string&)> on_chain_dropped;
    std::function<void(const std::string&)> on_group_released;
    std::function<void()> queue_poll;  // periodic gauge sampling
    bool rebalance_enabled = true;

    const AgentWorkflow& workflow() const { return workflow_; }
    const RolloutConfig& config() const { return cfg_; }
    const LatencyModel& latency() const { return latency_; }
    double timeout_s() const { return cfg_.timeout_s; }

    void register_agent_model(const std::string& agent, std::size_t vocab, std::size_t feat) {
        agent_state(agent).vocab = vocab;
        agent_state(agent).feat = feat;
    }

    int create_instance(const std::string& agent, DeviceId device) {
        AgentState& st = agent_state(agent);
        if (st.vocab == 0) raise(ErrorCode::ConfigError, "register_agent_model first for " + agent);
        const int id = static_cast<int>(instances_.size());
        auto inst = std::make_unique<InferenceInstance>();
        inst->instance_id = id;
        inst->owner_agent = agent;
        inst->device = device;
        inst->weights_reservation =
            cluster_.reserve_device_mem(device, static_cast<std::uint64_t>(st.vocab) * st.feat * 4);
        instances_.push_back(std::move(inst));
        st.heap.insert(id, 0);
        return id;
    }

    // --- queries ------------------------------------------------------------

    std::vector<SampleId> submit_query(const Query& query) {
        const std::vector<std::string> chain_agents = resolve_path(query);
        const std::string source =
            chain_agents.empty() ? workflow_.source() : chain_agents.front();
        std::vector<SampleId> roots;
        GroupBook& group = groups_[query.input_id];
        group.expected = workflow_.k;
        for (int traj = 0; traj < workflow_.k; ++traj) {
            auto chain = std::make_shared<Chain>();
            chain->input_id = query.input_id;
            chain->traj = traj;
            chain->agents = chain_agents;
            chain->version = agent_state(source).announced_version;
            chains_[chain_key(query.input_id, traj)] = chain;
            group.chains.push_back(chain);

            RolloutRequest req;
            req.sample_id = SampleId{query.input_id, 0, traj};
            req.agent_id = source;
            req.prompt = query.prompt;
            req.enqueue_time = loop_.now();
            req.version = chain->version;
            insert_record(*chain, source, req.sample_id, req.prompt, 0);
            roots.push_back(req.sample_id);
            enqueue(std::move(req));
        }
        log_.append(loop_.now(), "query_admitted",
                    Json{{"input_id", query.input_id}, {"k", workflow_.k}});
        ensure_poll_scheduled();
        return roots;
    }

    // --- dispatch and completion --------------------------------------------

    void enqueue(RolloutRequest req) {
        AgentState& st = agent_state(req.agent_id);
        if (st.paused || st.heap.empty()) {
            st.fifo.push_back(std::move(req));
            return;
        }
        dispatch(std::move(req));
    }

    // Assigns the request to the least-loaded live instance of its agent.
    int dispatch(RolloutRequest req) {
        AgentState& st = agent_state(req.agent_id);
        if (st.heap.empty()) raise(ErrorCode::NoInstance, req.agent_id);
        const int id = st.heap.top();
        InferenceInstance& inst = *instances_[static_cast<std::size_t>(id)];
        inst.pending += 1;
        st.heap.update(id, inst.pending);
        log_.append(loop_.now(), "dispatch",
                    Json{{"agent", req.agent_id},
                         {"sample", req.sample_id.render()},
                         {"instance", id},
                         {"attempt", req.attempt}});
        inst.queue.push_back(std::move(req));
        if (!inst.serving) begin_service(inst);
        return id;
    }

    // Mock generation: autoregressive sampling from a weight snapshot, seeded
    // by the sample identity and version (never by scheduling order).
    PolicyModel::Generation generate(const InferenceInstance& inst,
                                     const RolloutRequest& req) const {
        return generate_with(*inst.policy, inst.weight_version, req);
    }

    // --- load balancing ------------------------------------------------------

    std::size_t queue_length(const std::string& agent) const {
        const AgentState& st = agent_const(agent);
        std::size_t n = st.fifo.size();
        for (const auto& [id, load] : st.heap.items()) n += static_cast<std::size_t>(load);
        return n;
    }

    std::size_t live_instances(const std::string& agent) const {
        return agent_const(agent).heap.size();
    }

    // One donor/recipient pair per poll: migrate from the least- to the
    // most-loaded agent when the queue disparity exceeds the threshold,
    // keeping at least one instance on the donor.
    std::vector<Migration> rebalance() {
        std::vector<Migration> out;
        if (workflow_.agents.size() < 2) return out;
        std::string hi = workflow_.agents.front();
        std::string lo = workflow_.agents.front();
        for (const std::string& a : workflow_.agents) {
            if (queue_length(a) > queue_length(hi)) hi = a;
            if (queue_length(a) < queue_length(lo)) lo = a;
        }
        if (hi == lo) return out;
        const std::size_t disparity = queue_length(hi) - queue_length(lo);
        if (disparity <= static_cast<std::size_t>(cfg_.rebalance_delta)) return out;
        const std::size_t donor_live = live_instances(lo);
        if (donor_live <= 1) return out;
        const std::size_t m = std::min(disparity, donor_live - 1);

        AgentState& donor = agent_state(lo);
        for (std::size_t i = 0; i < m; ++i) {
            const int id = donor.heap.top();  // least-loaded donor instance first
            detach_instance(id, hi);
            out.push_back(Migration{id, lo, hi});
        }
        log_.append(loop_.now(), "rebalance",
                    Json{{"from", lo}, {"to", hi}, {"migrations", out.size()}, {"disparity", disparity}});
        return out;
    }

    // --- weight synchronization ----------------------------------------------

    void pause(const std::string& agent) { agent_state(agent).paused = true; }

    void resume(const std::string& agent) {
        AgentState& st = agent_state(agent);
        st.paused = false;
        drain_fifo(st);
    }

    bool paused(const std::string& agent) const { return agent_const(agent).paused; }

    // Re-points every live instance of the agent at the published weights of
    // `version` (one Get per instance, size-independent call count), then
    // resumes dispatch.
    void sync_agent(const std::string& agent, std::int64_t version, std::function<void()> on_done) {
        AgentState& st = agent_state(agent);
        st.announced_version = version;
        std::vector<int> ids;
        for (const auto& [id, load] : st.heap.items()) ids.push_back(id);
        std::sort(ids.begin(), ids.end());
        if (ids.empty()) {
            resume(agent);
            if (on_done) loop_.schedule_after(0.0, std::move(on_done));
            return;
        }
        auto remaining = std::make_shared<std::size_t>(ids.size());
        const SimTime start = loop_.now();
        for (int id : ids) {
            InferenceInstance& inst = *instances_[static_cast<std::size_t>(id)];
            GetResult r = objects_.get(TrainingEngine::weights_key(agent, version),
                                       Placement::device(inst.device));
            loop_.schedule(r.done, [this, agent, version, id, remaining, start, on_done, r]() {
                InferenceInstance& i = *instances_[static_cast<std::size_t>(id)];
                install_weights(i, agent, version, r.object);
                if (--*remaining == 0) {
                    log_.append(loop_.now(), "sync",
                                Json{{"agent", agent},
                                     {"version", version},
                                     {"instances", instances_of(agent).size()},
                                     {"duration", loop_.now() - start}});
                    resume(agent);
                    if (on_done) on_done();
                }
            });
        }
    }

    std::int64_t announced_version(const std::string& agent) const {
        return agent_const(agent).announced_version;
    }

    // --- introspection --------------------------------------------------------

    const InferenceInstance* instance(int id) const {
        return instances_.at(static_cast<std::size_t>(id)).get();
    }

    std::vector<int> instances_of(const std::string& agent) const {
        std::vector<int> out;
        for (const auto& inst : instances_)
            if (inst->owner_agent == agent && !inst->detached) out.push_back(inst->instance_id);
        return out;
    }

    // Heap keys must equal instance pending counts at all times.
    bool heaps_coherent() const {
        for (const auto& [name, st] : agents_) {
            for (const auto& [id, load] : st.heap.items()) {
                const InferenceInstance& inst = *instances_.at(static_cast<std::size_t>(id));
                if (inst.pending != load) return false;
                if (inst.owner_agent != name || inst.detached) return false;
            }
        }
        return true;
    }

    std::size_t unresolved_chains() const {
        std::size_t n = 0;
        for (const auto& [key, chain] : chains_)
            if (!chain->resolved) ++n;
        return n;
    }

    std::size_t dropped_chains() const { return dropped_chains_; }
    std::uint64_t generated_tokens() const { return generated_tokens_; }
    SimTime last_completion_time() const { return last_completion_; }

private:
    struct Chain {
        std::string input_id;
        int traj = 0;
        std::int64_t version = 0;
        std::vector<std::string> agents;          // linear path; empty = DAG mode
        std::map<std::string, int> join_waiting;  // DAG: remaining upstream parts
        std::map<std::string, std::map<int, std::vector<Token>>> join_parts;
        bool dropped = false;
        bool resolved = false;
        std::vector<Token> terminal_response;
        std::vector<std::pair<std::string, SampleId>> records;
    };

    struct GroupBook {
        int expected = 0;
        int resolved = 0;
        std::vector<std::shared_ptr<Chain>> chains;
        bool released = false;
    };

    struct AgentState {
        LoadHeap heap;
        std::deque<RolloutRequest> fifo;
        bool paused = false;
        std::int64_t announced_version = 0;
        std::size_t vocab = 0;
        std::size_t feat = 0;
    };

    static std::string chain_key(const std::string& input, int traj) {
        return input + "#" + std::to_string(traj);
    }

    AgentState& agent_state(const std::string& agent) {
        auto it = agents_.find(agent);
        if (it == agents_.end()) raise(ErrorCode::UnknownWorkflow, agent);
        return it->second;
    }
    const AgentState& agent_const(const std::string& agent) const {
        auto it = agents_.find(agent);
        if (it == agents_.end()) raise(ErrorCode::UnknownWorkflow, agent);
        return it->second;
    }

    std::vector<std::string> resolve_path(const Query& query) const {
        if (query.path.empty()) return {};
        for (const std::string& a : query.path)
            if (workflow_.agent_index(a) < 0) raise(ErrorCode::UnknownWorkflow, a);
        if (query.path.front() != workflow_.source()) {
            raise(ErrorCode::ConfigError, "query path must start at the source agent");
        }
        return query.path;
    }

    PolicyModel::Generation generate_with(const PolicyModel& policy, std::int64_t version,
                                          const RolloutRequest& req) const {
        const std::uint64_t tok_seed = mix_u64(
            mix_str(mix_str(mix_u64(cfg_.seed, 0x70CEULL), req.agent_id), req.sample_id.render()),
            static_cast<std::uint64_t>(version));
        Rng rng(tok_seed);
        return policy.generate(req.prompt, cfg_.max_tokens, cfg_.greedy ? nullptr : &rng);
    }

    void insert_record(Chain& chain, const std::string& agent, const SampleId& sid,
                       const std::vector<Token>& prompt, NodeId producer_node) {
        exp_.insert(agent, chain.version, sid);
        exp_.set_cell_payload(agent, sid, chain.version, "prompt", encode_tokens(prompt),
                              producer_node);
        chain.records.emplace_back(agent, sid);
    }

    void drain_fifo(AgentState& st) {
        while (!st.fifo.empty() && !st.paused && !st.heap.empty()) {
            RolloutRequest req = std::move(st.fifo.front());
            st.fifo.pop_front();
            dispatch(std::move(req));
        }
    }

    void begin_service(InferenceInstance& inst) {
        if (inst.queue.empty()) {
            inst.serving = false;
            if (inst.detached) start_weight_fetch(inst);
            return;
        }
        inst.serving = true;
        RolloutRequest req = std::move(inst.queue.front());
        inst.queue.pop_front();
        const std::uint64_t lat_seed = mix_u64(
            mix_str(mix_str(mix_u64(cfg_.seed, 0x1A7ULL), req.agent_id), req.sample_id.render()),
            static_cast<std::uint64_t>(req.attempt));
        const double svc = latency_.draw(lat_seed);
        const bool timed_out = svc > cfg_.timeout_s;
        const double run = timed_out ? cfg_.timeout_s : svc;
        const SimTime start = std::max(loop_.now(), inst.next_free);
        inst.next_free = start + run;
        cluster_.charge_busy(inst.device, start, run, &log_);
        const int id = inst.instance_id;
        // Weight snapshot at service start keeps one generation on one version.
        auto policy = inst.policy;
        const std::int64_t version = inst.weight_version;
        loop_.schedule(start + run, [this, id, req = std::move(req), timed_out, policy, version]() {
            complete_service(id, req, timed_out, policy, version);
        });
    }

    void complete_service(int instance_id, const RolloutRequest& req, bool timed_out,
                          const std::shared_ptr<const PolicyModel>& policy, std::int64_t version) {
        InferenceInstance& inst = *instances_[static_cast<std::size_t>(instance_id)];
        inst.pending -= 1;
        if (!inst.detached) agent_state(inst.owner_agent).heap.update(instance_id, inst.pending);

        if (timed_out) {
            log_.append(loop_.now(), "cancelled",
                        Json{{"agent", req.agent_id},
                             {"sample", req.sample_id.render()},
                             {"attempt", req.attempt}});
            if (req.attempt + 1 < cfg_.retry_limit) {
                RolloutRequest retry = req;
                retry.attempt += 1;
                retry.enqueue_time = loop_.now();
                enqueue(std::move(retry));
            } else {
                drop_chain(req.sample_id.input_id, req.sample_id.trajectory_id);
            }
            begin_service(inst);
            if (on_progress) on_progress();
            return;
        }

        PolicyModel::Generation gen = generate_with(*policy, version, req);
        generated_tokens_ += gen.tokens.size();
        last_completion_ = loop_.now();
        log_.append(loop_.now(), "gen_complete",
                    Json{{"agent", req.agent_id},
                         {"sample", req.sample_id.render()},
                         {"instance", instance_id},
                         {"tokens", gen.tokens.size()},
                         {"version", version}});

        auto chain_it = chains_.find(chain_key(req.sample_id.input_id, req.sample_id.trajectory_id));
        if (chain_it != chains_.end() && !chain_it->second->dropped) {
            Chain& chain = *chain_it->second;
            const NodeId node = cluster_.node_of_device(inst.device);
            exp_.set_cell_payload(req.agent_id, req.sample_id, chain.version, "response",
                                  encode_tokens(gen.tokens), node);
            exp_.set_cell_payload(req.agent_id, req.sample_id, chain.version, "logprobs",
                                  encode_f64_list(gen.log_probs), node);
            propagate(chain, req, gen.tokens, node);
        }

        begin_service(inst);
        if (on_progress) on_progress();
    }

    void propagate(Chain& chain, const RolloutRequest& req, const std::vector<Token>& response,
                   NodeId producer_node) {
        std::vector<std::string> next_agents;
        if (!chain.agents.empty()) {
            const auto turn = static_cast<std::size_t>(req.sample_id.number_of_turns);
            if (turn + 1 < chain.agents.size()) next_agents.push_back(chain.agents[turn + 1]);
        } else {
            next_agents = workflow_.downstream(req.agent_id);
        }

        if (next_agents.empty()) {
            chain.terminal_response = response;
            resolve_chain(chain);
            return;
        }

        for (const std::string& next : next_agents) {
            int turn;
            std::vector<Token> prompt;
            bool ready;
            if (!chain.agents.empty()) {
                turn = req.sample_id.number_of_turns + 1;
                prompt = response;
                ready = true;
            } else {
                turn = workflow_.depth(next);
                if (!chain.join_waiting.count(next)) {
                    chain.join_waiting[next] = static_cast<int>(workflow_.upstream(next).size());
                }
                chain.join_parts[next][workflow_.agent_index(req.agent_id)] = response;
                chain.join_waiting[next] -= 1;
                ready = chain.join_waiting[next] == 0;
                if (ready) {
                    for (const auto& [idx, part] : chain.join_parts[next])
                        prompt.insert(prompt.end(), part.begin(), part.end());
                }
            }
            if (!ready) continue;
            RolloutRequest down;
            down.sample_id = SampleId{chain.input_id, turn, chain.traj};
            down.agent_id = next;
            down.prompt = prompt;
            down.enqueue_time = loop_.now();
            down.version = chain.version;
            insert_record(chain, next, down.sample_id, down.prompt, producer_node);
            enqueue(std::move(down));
        }
    }

    void drop_chain(const std::string& input_id, int traj) {
        auto it = chains_.find(chain_key(input_id, traj));
        if (it == chains_.end() || it->second->dropped || it->second->resolved) return;
        Chain& chain = *it->second;
        chain.dropped = true;
        ++dropped_chains_;
        for (const auto& [agent, sid] : chain.records) exp_.drop_record(agent, sid, chain.version);
        log_.append(loop_.now(), "drop", Json{{"input_id", input_id}, {"traj", traj}});
        resolve_chain(chain);
        if (on_chain_dropped) on_chain_dropped(input_id);
    }

    void resolve_chain(Chain& chain) {
        if (chain.resolved) return;
        chain.resolved = true;
        GroupBook& group = groups_.at(chain.input_id);
        group.resolved += 1;
        if (group.resolved == group.expected && !group.released) release_group(chain.input_id);
    }

    // Credit assignment for the whole prompt group: rewards scored on the sink
    // responses, advantages normalized within the group, both cells written to
    // every record of every surviving chain. Doing this once per group keeps
    // the per-sample contributions independent of micro-batch partitioning.
    void release_group(const std::string& input_id) {
        GroupBook& group = groups_.at(input_id);
        group.released = true;
        std::vector<std::shared_ptr<Chain>> survivors;
        std::vector<double> rewards;
        for (const auto& chain : group.chains) {
            if (chain->dropped) continue;
            survivors.push_back(chain);
            rewards.push_back(rule_reward(chain->terminal_response, cfg_.reward_pattern));
        }
        const std::vector<double> advantages = group_advantages(rewards, cfg_.eps_adv);
        for (std::size_t i = 0; i < survivors.size(); ++i) {
            Chain& chain = *survivors[i];
            for (const auto& [agent, sid] : chain.records) {
                exp_.set_cell(agent, sid, chain.version, "reward", CellValue::of_float(rewards[i]));
                exp_.set_cell(agent, sid, chain.version, "advantage",
                              CellValue::of_float(advantages[i]));
            }
        }
        log_.append(loop_.now(), "group_release",
                    Json{{"input_id", input_id}, {"survivors", survivors.size()}});
        if (on_group_released) on_group_released(input_id);
    }

    // --- migration ------------------------------------------------------------

    void detach_instance(int id, const std::string& new_owner) {
        InferenceInstance& inst = *instances_[static_cast<std::size_t>(id)];
        AgentState& donor = agent_state(inst.owner_agent);
        donor.heap.erase(id);
        inst.detached = true;
        inst.pending_owner = new_owner;
        // Re-queue assigned-but-unserved requests onto the donor's remaining
        // instances; the in-flight one (if any) drains first.
        std::deque<RolloutRequest> requeue = std::move(inst.queue);
        inst.queue.clear();
        inst.pending = inst.serving ? 1 : 0;
        for (RolloutRequest& r : requeue) enqueue(std::move(r));
        if (!inst.serving) start_weight_fetch(inst);
    }

    void start_weight_fetch(InferenceInstance& inst) {
        const std::string target = inst.pending_owner;
        AgentState& st = agent_state(target);
        const std::int64_t version = st.announced_version;
        const std::string key = TrainingEngine::weights_key(target, version);
        if (!objects_.contains(key)) {
            // Publish from a live instance of the recipient; later migrations
            // at this version reuse the buffer.
            const std::vector<int> ids = instances_of(target);
            if (!ids.empty()) {
                const InferenceInstance& ref = *instances_[static_cast<std::size_t>(ids.front())];
                F64Tensor t;
                t.shape = {ref.policy->vocab_size(), ref.policy->feature_dim()};
                t.data = ref.policy->weights().a;
                auto [buf, layout] = ObjectStore::pack_weights({t});
                (void)layout;
                objects_.set(key, std::move(buf), Placement::device(ref.device));
            }
        }
        GetResult r = objects_.get(key, Placement::device(inst.device));
        const int id = inst.instance_id;
        loop_.schedule(r.done, [this, id, target, version, r]() {
            InferenceInstance& i = *instances_[static_cast<std::size_t>(id)];
            AgentState& st = agent_state(target);
            if (st.announced_version != version) {
                start_weight_fetch(i);  // recipient synced mid-migration
                return;
            }
            install_weights(i, target, version, r.object);
            i.detached = false;
            i.owner_agent = target;
            st.heap.insert(id, i.pending);
            log_.append(loop_.now(), "migration",
                        Json{{"instance", id},
                             {"to", target},
                             {"version", version},
                             {"transfer_s", r.record.sim_duration},
                             {"bytes", r.record.bytes}});
            rebalance_backlog(target);
            drain_fifo(st);
            if (on_progress) on_progress();
        });
    }

    // Pull assigned-but-unserved requests back through the heap so a newly
    // registered instance shares the backlog.
    void rebalance_backlog(const std::string& agent) {
        AgentState& st = agent_state(agent);
        std::vector<RolloutRequest> pulled;
        for (const auto& [id, load] : st.heap.items()) {
            InferenceInstance& inst = *instances_[static_cast<std::size_t>(id)];
            while (!inst.queue.empty()) {
                pulled.push_back(std::move(inst.queue.back()));
                inst.queue.pop_back();
                inst.pending -= 1;
            }
        }
        for (const auto& [id, load] : st.heap.items()) {
            st.heap.update(id, instances_[static_cast<std::size_t>(id)]->pending);
        }
        std::sort(pulled.begin(), pulled.end(),
                  [](const RolloutRequest& a, const RolloutRequest& b) {
                      if (a.enqueue_time != b.enqueue_time) return a.enqueue_time < b.enqueue_time;
                      return a.sample_id.tie() < b.sample_id.tie();
                  });
        for (RolloutRequest& r : pulled) dispatch(std::move(r));
    }

    void install_weights(InferenceInstance& inst, const std::string& agent, std::int64_t version,
                         const HeterogeneousObject& payload) {
        AgentState& st = agent_state(agent);
        auto model = std::make_shared<PolicyModel>(st.vocab, st.feat);
        std::memcpy(model->weights().a.data(), payload.payload.data(), payload.payload.size());
        inst.policy = std::move(model);
        inst.weight_version = version;
    }

    void ensure_poll_scheduled() {
        if (poll_scheduled_) return;
        poll_scheduled_ = true;
        schedule_poll();
    }

    void schedule_poll() {
        loop_.schedule_after(cfg_.rebalance_interval_s, [this]() {
            if (rebalance_enabled) rebalance();
            if (queue_poll) queue_poll();
            if (unresolved_chains() > 0) {
                schedule_poll();
            } else {
                poll_scheduled_ = false;
            }
        });
    }

    EventLoop& loop_;
    Cluster& cluster_;
    ObjectStore& objects_;
    ExperienceStore& exp_;
    EventLog& log_;
    AgentWorkflow workflow_;
    LatencyModel latency_;
    RolloutConfig cfg_;

    std::map<std::string, AgentState> agents_;
    std::vector<std::unique_ptr<InferenceInstance>> instances_;
    std::map<std::string, std::shared_ptr<Chain>> chains_;
    std::map<std::string, GroupBook> groups_;
    std::size_t dropped_chains_ = 0;
    std::uint64_t generated_tokens_ = 0;
    SimTime last_completion_ = 0.0;
    bool poll_scheduled_ = false;
};

}  // namespace marlsim
