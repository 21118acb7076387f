#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "marlsim/cluster.hpp"
#include "marlsim/codec.hpp"
#include "marlsim/errors.hpp"
#include "marlsim/event_log.hpp"
#include "marlsim/experience_store.hpp"
#include "marlsim/object_store.hpp"
#include "marlsim/policy.hpp"
#include "marlsim/sample.hpp"
#include "marlsim/sim.hpp"

namespace marlsim {

struct AdamParams {
    double lr = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    Matrix m;
    Matrix v;
    std::int64_t step_count = 0;
};

inline void adam_step(Matrix& w, OptimizerState& opt, const AdamParams& p, const Matrix& grad) {
    if (opt.m.size() == 0) opt.m = Matrix(w.rows, w.cols);
    if (opt.v.size() == 0) opt.v = Matrix(w.rows, w.cols);
    opt.step_count += 1;
    const double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(opt.step_count));
    const double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(opt.step_count));
    for (std::size_t i = 0; i < w.a.size(); ++i) {
        const double g = grad.a[i];
        opt.m.a[i] = p.beta1 * opt.m.a[i] + (1.0 - p.beta1) * g;
        opt.v.a[i] = p.beta2 * opt.v.a[i] + (1.0 - p.beta2) * g * g;
        const double mhat = opt.m.a[i] / bc1;
        const double vhat = opt.v.a[i] / bc2;
        w.a[i] -= p.lr * mhat / (std::sqrt(vhat) + p.eps);
    }
}

// Group-relative advantages: A_i = (r_i - mean) / (population std + eps).
inline std::vector<double> group_advantages(const std::vector<double>& rewards,
                                            double eps_adv = 1e-8) {
    std::vector<double> out(rewards.size(), 0.0);
    if (rewards.empty()) return out;
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(rewards.size());
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(rewards.size());
    const double std_dev = std::sqrt(var);
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / (std_dev + eps_adv);
    return out;
}

// Rule-based trajectory score in [0, 1]: the longest prefix of `pattern`
// occurring contiguously in `response`, normalized by the pattern length.
inline double rule_reward(const std::vector<Token>& response, const std::vector<Token>& pattern) {
    if (response.empty() || pattern.empty()) return 0.0;
    std::size_t best = 0;
    for (std::size_t start = 0; start < response.size(); ++start) {
        std::size_t len = 0;
        while (len < pattern.size() && start + len < response.size() &&
               response[start + len] == pattern[len]) {
            ++len;
        }
        best = std::max(best, len);
    }
    return static_cast<double>(best) / static_cast<double>(pattern.size());
}

// Key of one cached per-sample gradient: canonical sample order first, then
// the policy version the sample was generated under.
using GradKey = std::tuple<std::string, int, int, std::int64_t>;

inline GradKey grad_key(const SampleId& id, std::int64_t version) {
    return {id.input_id, id.number_of_turns, id.trajectory_id, version};
}

// Weights, optimizer moments, and the gradient cache for one agent.
//
// The cache keeps one contribution per sample rather than a single running
// sum: micro batches arrive in completion order, which differs between
// pipeline modes, and only a canonical-order reduction at update time makes
// the accumulated gradient independent of how the global batch was split.
struct PolicyState {
    std::string agent_id;
    std::int64_t version = 0;
    PolicyModel model;
    OptimizerState opt;
    std::map<GradKey, Matrix> grad_cache;
    std::int64_t samples_accumulated = 0;

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out;
        append_u64(out, static_cast<std::uint64_t>(version));
        append_u64(out, static_cast<std::uint64_t>(opt.step_count));
        append_u64(out, static_cast<std::uint64_t>(samples_accumulated));
        append_u64(out, model.vocab_size());
        append_u64(out, model.feature_dim());
        auto put_matrix = [&out](const Matrix& m) {
            append_u64(out, m.rows);
            append_u64(out, m.cols);
            for (double x : m.a) append_f64(out, x);
        };
        put_matrix(model.weights());
        put_matrix(opt.m.size() ? opt.m : Matrix(model.vocab_size(), model.feature_dim()));
        put_matrix(opt.v.size() ? opt.v : Matrix(model.vocab_size(), model.feature_dim()));
        append_u64(out, grad_cache.size());
        for (const auto& [key, grad] : grad_cache) {
            const auto& [input, turns, traj, ver] = key;
            append_u64(out, input.size());
            append_bytes(out, input.data(), input.size());
            append_u64(out, static_cast<std::uint64_t>(turns));
            append_u64(out, static_cast<std::uint64_t>(traj));
            append_u64(out, static_cast<std::uint64_t>(ver));
            put_matrix(grad);
        }
        return out;
    }

    static PolicyState deserialize(const std::string& agent_id,
                                   const std::vector<std::uint8_t>& bytes) {
        PolicyState st;
        st.agent_id = agent_id;
        ByteReader r(bytes);
        st.version = static_cast<std::int64_t>(r.read_u64());
        st.opt.step_count = static_cast<std::int64_t>(r.read_u64());
        st.samples_accumulated = static_cast<std::int64_t>(r.read_u64());
        const std::uint64_t vocab = r.read_u64();
        const std::uint64_t feat = r.read_u64();
        auto get_matrix = [&r]() {
            Matrix m(r.read_u64(), r.read_u64());
            for (double& x : m.a) x = r.read_f64();
            return m;
        };
        st.model = PolicyModel(vocab, feat);
        st.model.weights() = get_matrix();
        st.opt.m = get_matrix();
        st.opt.v = get_matrix();
        const std::uint64_t cache_n = r.read_u64();
        for (std::uint64_t i = 0; i < cache_n; ++i) {
            std::string input(r.read_u64(), '\0');
            r.read_into(input.data(), input.size());
            const int turns = static_cast<int>(r.read_u64());
            const int traj = static_cast<int>(r.read_u64());
            const auto ver = static_cast<std::int64_t>(r.read_u64());
            st.grad_cache.emplace(GradKey{std::move(input), turns, traj, ver}, get_matrix());
        }
        return st;
    }
};

enum class GroupState { Active, Destroyed };

struct GradReport {
    std::string agent_id;
    std::int64_t batch_version = 0;
    std::int64_t engine_version = 0;  // state version when the gradient was computed
    std::size_t batch_size = 0;
    double grad_norm = 0.0;
    SimTime t_start = 0.0;
    SimTime t_end = 0.0;
};

struct TrainingConfig {
    AdamParams adam;
    std::int64_t global_batch = 64;
    double eps_adv = 1e-8;
    int devices_per_group = 1;
    double train_seconds_per_sample = 0.5;
    double control_plane_s = 0.05;
    int allowed_staleness = 0;  // 1 for the one-step pipeline
    std::uint64_t seed = 2048;
};

// Agent-centric trainer: gang-bound process groups with a suspend-to-destroy
// lifecycle, per-sample gradient caching, and unified versioned updates.
class TrainingEngine {
public:
    TrainingEngine(EventLoop& loop, Cluster& cluster, ObjectStore& objects, EventLog& log,
                   ResourcePool pool, TrainingConfig cfg)
        : loop_(loop), cluster_(cluster), objects_(objects), log_(log), pool_(std::move(pool)),
          cfg_(std::move(cfg)) {}

    void add_agent(const std::string& agent_id, std::size_t vocab, std::size_t feat) {
        Group g;
        g.vocab = vocab;
        g.feat = feat;
        groups_.emplace(agent_id, std::move(g));
    }

    const ResourcePool& pool() const { return pool_; }
    const TrainingConfig& config() const { return cfg_; }
    TrainingConfig& config() { return cfg_; }

    bool is_active(const std::string& agent) const { return group(agent).state == GroupState::Active; }
    bool in_flight(const std::string& agent) const { return group(agent).in_flight; }

    const std::vector<DeviceId>& bound_devices(const std::string& agent) const {
        return group(agent).devices;
    }
    NodeId last_node(const std::string& agent) const { return group(agent).last_node; }

    PolicyState& state(const std::string& agent) {
        Group& g = group(agent);
        if (g.state != GroupState::Active) raise(ErrorCode::InactiveGroup, agent);
        return *g.policy;
    }

    // Snapshot of the policy state whether the group is live or checkpointed.
    PolicyState peek_state(const std::string& agent) const {
        const Group& g = group(agent);
        if (g.state == GroupState::Active) return *g.policy;
        if (g.latest_checkpoint.empty()) raise(ErrorCode::InactiveGroup, agent + " never ran");
        const HeterogeneousObject* blob = objects_.peek(g.latest_checkpoint);
        if (!blob) raise(ErrorCode::KeyNotFound, g.latest_checkpoint);
        return PolicyState::deserialize(agent, blob->payload);
    }

    std::uint64_t param_count(const std::string& agent) const {
        const Group& g = group(agent);
        return static_cast<std::uint64_t>(g.vocab) * g.feat;
    }

    // Model footprint in device memory: 4 bytes per parameter, three tensors
    // resident while training (weights + both Adam moments).
    std::uint64_t training_footprint_bytes(const std::string& agent) const {
        return param_count(agent) * 4 * 3;
    }

    PolicyModel initial_model(const std::string& agent) const {
        const Group& g = group(agent);
        return PolicyModel::seeded(g.vocab, g.feat, mix_str(mix_u64(cfg_.seed, 0x1217), agent));
    }

    // Whether a node in the training pool currently has enough unbound
    // devices for one gang.
    bool can_activate(const std::string& agent) const {
        return !pick_devices(agent).empty();
    }

    // Gang-binds the agent's process group, restoring state from its latest
    // checkpoint (or seeding a fresh one), and reports completion through the
    // event loop once the restore transfer lands.
    void activate(const std::string& agent, std::function<void()> on_done) {
        if (!on_done) on_done = []() {};
        Group& g = group(agent);
        if (g.state == GroupState::Active) raise(ErrorCode::ConfigError, agent + " already active");
        std::vector<DeviceId> devs = pick_devices(agent);
        if (devs.empty()) {
            raise(ErrorCode::InsufficientResources,
                  "no node has " + std::to_string(cfg_.devices_per_group) +
                      " free training devices for " + agent);
        }
        // All-or-nothing binding.
        const std::uint64_t per_dev =
            (training_footprint_bytes(agent) + devs.size() - 1) / devs.size();
        std::vector<Reservation> held;
        try {
            for (DeviceId d : devs) held.push_back(cluster_.reserve_device_mem(d, per_dev));
        } catch (const Error&) {
            for (const Reservation& r : held) cluster_.release_device_mem(r);
            throw;
        }
        g.devices = devs;
        g.reservations = std::move(held);
        g.state = GroupState::Active;
        const NodeId node = cluster_.node_of_device(devs.front());

        if (g.latest_checkpoint.empty()) {
            g.policy = PolicyState{};
            g.policy->agent_id = agent;
            g.policy->model = initial_model(agent);
            g.last_node = node;
            log_.append(loop_.now(), "activate",
                        Json{{"agent", agent},
                             {"node", node},
                             {"devices", devs},
                             {"control_s", cfg_.control_plane_s},
                             {"restore_s", 0.0},
                             {"restore_path", Json::array()},
                             {"fresh", true}});
            loop_.schedule_after(cfg_.control_plane_s, std::move(on_done));
            return;
        }

        GetResult r = objects_.get(g.latest_checkpoint, Placement::device(devs.front()));
        g.policy = PolicyState::deserialize(agent, r.object.payload);
        g.last_node = node;
        std::vector<std::string> path;
        for (HopKind h : r.record.path) path.emplace_back(hop_name(h));
        log_.append(loop_.now(), "activate",
                    Json{{"agent", agent},
                         {"node", node},
                         {"devices", devs},
                         {"control_s", cfg_.control_plane_s},
                         {"restore_s", r.record.sim_duration},
                         {"restore_path", path},
                         {"fresh", false}});
        objects_.del(g.latest_checkpoint);
        g.latest_checkpoint.clear();
        loop_.schedule(r.done + cfg_.control_plane_s, std::move(on_done));
    }

    // Checkpoints the full policy state to the local host tier, releases all
    // device memory, and destroys the process group.
    void suspend(const std::string& agent, std::function<void()> on_done) {
        if (!on_done) on_done = []() {};
        Group& g = group(agent);
        if (g.state != GroupState::Active) raise(ErrorCode::InactiveGroup, agent);
        if (g.in_flight) raise(ErrorCode::BusyGroup, agent + " has a micro batch in flight");

        const NodeId node = cluster_.node_of_device(g.devices.front());
        const std::string key = "optstate:" + agent + ":v" + std::to_string(g.policy->version) +
                                ":c" + std::to_string(g.checkpoint_counter++);
        std::vector<std::uint8_t> bytes = g.policy->serialize();
        const std::uint64_t len = bytes.size();
        HeterogeneousObject obj;
        obj.payload = std::move(bytes);
        obj.dtype = DType::Bytes;
        ObjectRef ref = objects_.set(key, std::move(obj), Placement::host(node));
        g.latest_checkpoint = key;
        g.last_node = node;
        for (const Reservation& r : g.reservations) cluster_.release_device_mem(r);
        g.reservations.clear();
        g.devices.clear();
        g.policy.reset();
        g.state = GroupState::Destroyed;
        log_.append(loop_.now(), "suspend",
                    Json{{"agent", agent},
                         {"node", node},
                         {"control_s", cfg_.control_plane_s},
                         {"offload_s", ref.ready_at - loop_.now()},
                         {"bytes", len}});
        loop_.schedule_after(cfg_.control_plane_s, std::move(on_done));
    }

    // Computes this micro batch's per-sample gradient contributions into the
    // cache without touching the weights. Compute time is charged to the
    // gang's devices; completion is reported through the event loop.
    void train_micro_batch(const std::string& agent, const MicroBatch& batch,
                           const TableSchema& schema,
                           std::function<void(GradReport)> on_done) {
        Group& g = group(agent);
        if (g.state != GroupState::Active) raise(ErrorCode::InactiveGroup, agent);
        if (g.in_flight) raise(ErrorCode::BusyGroup, agent);
        PolicyState& st = *g.policy;
        const std::int64_t staleness = st.version - batch.policy_version;
        if (staleness < 0 || staleness > cfg_.allowed_staleness) {
            raise(ErrorCode::VersionMismatch,
                  agent + ": batch v" + std::to_string(batch.policy_version) + " vs state v" +
                      std::to_string(st.version));
        }

        const int prompt_col = schema.column_index("prompt");
        const int response_col = schema.column_index("response");
        const int adv_col = schema.column_index("advantage");
        if (prompt_col < 0 || response_col < 0 || adv_col < 0) {
            raise(ErrorCode::UnknownColumn, "trainer needs prompt/response/advantage columns");
        }

        SimTime data_ready = loop_.now();
        Matrix micro_sum(st.model.vocab_size(), st.model.feature_dim());
        for (const SampleRecord& rec : batch.samples) {
            GetResult pr = objects_.get(rec.data[static_cast<std::size_t>(prompt_col)].ref_key(),
                                        Placement::device(g.devices.front()));
            GetResult rr = objects_.get(rec.data[static_cast<std::size_t>(response_col)].ref_key(),
                                        Placement::device(g.devices.front()));
            data_ready = std::max({data_ready, pr.done, rr.done});
            const std::vector<Token> prompt = decode_tokens(pr.object);
            const std::vector<Token> response = decode_tokens(rr.object);
            const double advantage = rec.data[static_cast<std::size_t>(adv_col)].as_float();

            Matrix term(st.model.vocab_size(), st.model.feature_dim());
            std::vector<Token> context = prompt;
            for (Token action : response) {
                st.model.accumulate_grad_log_prob(context, action, 1.0, term);
                context.push_back(action);
            }
            term.scale(advantage);
            micro_sum.add(term);
            const GradKey key = grad_key(rec.sample_id, rec.policy_version);
            if (st.grad_cache.count(key)) {
                raise(ErrorCode::DuplicateSample, "gradient already cached for " +
                                                      rec.sample_id.render());
            }
            st.grad_cache.emplace(key, std::move(term));
        }
        st.samples_accumulated += static_cast<std::int64_t>(batch.samples.size());

        const double duration = static_cast<double>(batch.samples.size()) *
                                cfg_.train_seconds_per_sample /
                                static_cast<double>(g.devices.size());
        const SimTime start = data_ready;
        for (DeviceId d : g.devices) cluster_.charge_busy(d, start, duration, &log_);
        g.in_flight = true;

        GradReport report;
        report.agent_id = agent;
        report.batch_version = batch.policy_version;
        report.engine_version = st.version;
        report.batch_size = batch.samples.size();
        report.grad_norm = micro_sum.frobenius_norm() / static_cast<double>(cfg_.global_batch);
        report.t_start = start;
        report.t_end = start + duration;
        loop_.schedule(report.t_end, [this, agent, report, on_done = std::move(on_done)]() {
            group(agent).in_flight = false;
            log_.append(report.t_end, "micro_grad",
                        Json{{"agent", agent},
                             {"version", report.batch_version},
                             {"engine_version", report.engine_version},
                             {"samples", report.batch_size},
                             {"grad_norm", report.grad_norm}});
            if (on_done) on_done(report);
        });
    }

    // Unified update: canonical-order reduction of the cache, one Adam step,
    // version bump, and publication of the packed weights on the gang's lead
    // device.
    std::int64_t apply_global_update(const std::string& agent) {
        Group& g = group(agent);
        if (g.state != GroupState::Active) raise(ErrorCode::InactiveGroup, agent);
        PolicyState& st = *g.policy;
        if (st.samples_accumulated != cfg_.global_batch) {
            raise(ErrorCode::IncompleteBatch,
                  agent + " accumulated " + std::to_string(st.samples_accumulated) + " of " +
                      std::to_string(cfg_.global_batch));
        }
        Matrix grad(st.model.vocab_size(), st.model.feature_dim());
        for (const auto& [key, term] : st.grad_cache) grad.add(term);  // canonical order
        grad.scale(-1.0 / static_cast<double>(cfg_.global_batch));
        adam_step(st.model.weights(), st.opt, cfg_.adam, grad);
        st.grad_cache.clear();
        st.samples_accumulated = 0;
        st.version += 1;

        publish_weights(agent, st.model, st.version, Placement::device(g.devices.front()));
        log_.append(loop_.now(), "update",
                    Json{{"agent", agent}, {"version", st.version}, {"grad_norm", grad.frobenius_norm()}});
        return st.version;
    }

    // Registers the packed weight buffer under the versioned key.
    void publish_weights(const std::string& agent, const PolicyModel& model, std::int64_t version,
                         const Placement& where) {
        F64Tensor t;
        t.shape = {model.vocab_size(), model.feature_dim()};
        t.data = model.weights().a;
        auto [buf, layout] = ObjectStore::pack_weights({t});
        (void)layout;  // single-tensor layout is implicit: offset 0, shape V x D
        objects_.set(weights_key(agent, version), std::move(buf), where);
    }

    static std::string weights_key(const std::string& agent, std::int64_t version) {
        return "weights:" + agent + ":v" + std::to_string(version);
    }

private:
    struct Group {
        GroupState state = GroupState::Destroyed;
        std::size_t vocab = 0;
        std::size_t feat = 0;
        std::vector<DeviceId> devices;
        std::vector<Reservation> reservations;
        NodeId last_node = -1;
        bool in_flight = false;
        std::string latest_checkpoint;
        std::uint64_t checkpoint_counter = 0;
        std::optional<PolicyState> policy;
    };

    Group& group(const std::string& agent) {
        auto it = groups_.find(agent);
        if (it == groups_.end()) raise(ErrorCode::ConfigError, "unknown agent " + agent);
        return it->second;
    }
    const Group& group(const std::string& agent) const {
        auto it = groups_.find(agent);
        if (it == groups_.end()) raise(ErrorCode::ConfigError, "unknown agent " + agent);
        return it->second;
    }

    // STRICT_PACK placement: all gang devices on one node, preferring the
    // node the agent last ran on. Returns empty when no node fits.
    std::vector<DeviceId> pick_devices(const std::string& agent) const {
        const Group& g = group(agent);
        std::map<NodeId, std::vector<DeviceId>> free_by_node;
        for (DeviceId d : pool_.devices) {
            bool bound = false;
            for (const auto& [name, grp] : groups_) {
                for (DeviceId b : grp.devices)
                    if (b == d) bound = true;
            }
            if (!bound) free_by_node[cluster_.node_of_device(d)].push_back(d);
        }
        const auto want = static_cast<std::size_t>(cfg_.devices_per_group);
        auto fits = [&](NodeId n) {
            auto it = free_by_node.find(n);
            return it != free_by_node.end() && it->second.size() >= want;
        };
        NodeId chosen = -1;
        if (g.last_node >= 0 && fits(g.last_node)) {
            chosen = g.last_node;
        } else {
            for (const auto& [n, devs] : free_by_node) {
                if (devs.size() >= want) {
                    chosen = n;
                    break;
                }
            }
        }
        if (chosen < 0) return {};
        std::vector<DeviceId> out(free_by_node[chosen].begin(),
                                  free_by_node[chosen].begin() + static_cast<long>(want));
        return out;
    }

    EventLoop& loop_;
    Cluster& cluster_;
    ObjectStore& objects_;
    EventLog& log_;
    ResourcePool pool_;
    TrainingConfig cfg_;
    std::map<std::string, Group> groups_;
};

}  // namespace marlsim
