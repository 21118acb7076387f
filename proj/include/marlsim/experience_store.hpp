#pragma once

#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "marlsim/errors.hpp"
#include "marlsim/object_store.hpp"
#include "marlsim/sample.hpp"

namespace marlsim {

// Multi-table sample storage: one table per agent with meta, data, and status
// columns. Complex cells live in the object store; the table keeps only keys.
class ExperienceStore {
public:
    explicit ExperienceStore(ObjectStore& objects) : objects_(objects) {}

    void create_table(const TableSchema& schema) {
        std::lock_guard<std::mutex> guard(mu_);
        if (tables_.count(schema.agent_id)) raise(ErrorCode::TableExists, schema.agent_id);
        for (const ColumnSpec& col : schema.columns) {
            if (col.name == "policy_version" || col.name == "sample_id" || col.name == "processing") {
                raise(ErrorCode::ReservedColumnName, col.name);
            }
        }
        for (std::size_t i = 0; i < schema.columns.size(); ++i)
            for (std::size_t j = i + 1; j < schema.columns.size(); ++j)
                if (schema.columns[i].name == schema.columns[j].name)
                    raise(ErrorCode::ConfigError, "duplicate column " + schema.columns[i].name);
        tables_[schema.agent_id].schema = schema;
    }

    bool has_table(const std::string& agent_id) const { return tables_.count(agent_id) != 0; }

    const TableSchema& schema(const std::string& agent_id) const {
        return table_or_raise(agent_id).schema;
    }

    void insert(const std::string& agent_id, std::int64_t policy_version, const SampleId& id) {
        Table& t = table_or_raise(agent_id);
        if (id.input_id.find('_') != std::string::npos || id.input_id.empty()) {
            raise(ErrorCode::BadSampleId, "input_id may not be empty or contain '_': " + id.input_id);
        }
        std::lock_guard<std::mutex> guard(t.mu);
        const RecordKey key = make_key(id, policy_version);
        if (t.records.count(key)) {
            raise(ErrorCode::DuplicateSample, id.render() + " v" + std::to_string(policy_version));
        }
        SampleRecord rec;
        rec.policy_version = policy_version;
        rec.sample_id = id;
        rec.data.assign(t.schema.columns.size(), CellValue::unset());
        rec.status.assign(t.schema.columns.size(), false);
        t.records.emplace(key, std::move(rec));
    }

    void set_cell(const std::string& agent_id, const SampleId& id, std::int64_t version,
                  const std::string& column, CellValue value) {
        Table& t = table_or_raise(agent_id);
        std::lock_guard<std::mutex> guard(t.mu);
        const int col = t.schema.column_index(column);
        if (col < 0) raise(ErrorCode::UnknownColumn, column);
        auto it = t.records.find(make_key(id, version));
        if (it == t.records.end()) raise(ErrorCode::RecordNotFound, id.render());
        SampleRecord& rec = it->second;
        if (rec.status[static_cast<std::size_t>(col)]) raise(ErrorCode::CellAlreadySet, column);
        const ColumnType ctype = t.schema.columns[static_cast<std::size_t>(col)].type;
        if (column_stored_by_value(ctype) == value.is_ref()) {
            raise(ErrorCode::ConfigError, "cell storage class mismatch for column " + column);
        }
        rec.data[static_cast<std::size_t>(col)] = std::move(value);
        rec.status[static_cast<std::size_t>(col)] = true;
    }

    // Complex-typed convenience: materializes the payload in the object store
    // on the producing node's host tier and records only the key.
    void set_cell_payload(const std::string& agent_id, const SampleId& id, std::int64_t version,
                          const std::string& column, HeterogeneousObject payload,
                          NodeId producer_node) {
        const std::string key = sample_field_key(agent_id, version, id, column);
        objects_.set(key, std::move(payload), Placement::host(producer_node));
        set_cell(agent_id, id, version, column, CellValue::of_ref(key));
    }

    // Returns the canonically-first `micro_batch_size` ready records matching
    // `current_version`, marking them processing; or nothing if fewer exist.
    std::optional<MicroBatch> poll_micro_batch(const std::string& agent_id,
                                               std::int64_t current_version,
                                               std::size_t micro_batch_size) {
        Table& t = table_or_raise(agent_id);
        if (micro_batch_size < 1) raise(ErrorCode::ConfigError, "micro_batch_size must be >= 1");
        std::lock_guard<std::mutex> guard(t.mu);
        std::vector<RecordKey> chosen;
        for (auto& [key, rec] : t.records) {
            if (rec.processing || rec.policy_version != current_version || !rec.ready()) continue;
            chosen.push_back(key);
            if (chosen.size() == micro_batch_size) break;
        }
        if (chosen.size() < micro_batch_size) return std::nullopt;
        MicroBatch batch;
        batch.agent_id = agent_id;
        batch.policy_version = current_version;
        for (const RecordKey& key : chosen) {
            SampleRecord& rec = t.records.at(key);
            rec.processing = true;
            batch.samples.push_back(rec);
        }
        return batch;
    }

    // Drops all non-processing records older than `current_version` and
    // deletes their referenced objects.
    std::size_t purge_stale(const std::string& agent_id, std::int64_t current_version) {
        Table& t = table_or_raise(agent_id);
        std::lock_guard<std::mutex> guard(t.mu);
        std::size_t purged = 0;
        for (auto it = t.records.begin(); it != t.records.end();) {
            if (!it->second.processing && it->second.policy_version < current_version) {
                delete_refs(it->second);
                it = t.records.erase(it);
                ++purged;
            } else {
                ++it;
            }
        }
        return purged;
    }

    void complete(const std::string& agent_id, const std::vector<SampleRecord>& samples) {
        Table& t = table_or_raise(agent_id);
        std::lock_guard<std::mutex> guard(t.mu);
        for (const SampleRecord& s : samples) {
            auto it = t.records.find(make_key(s.sample_id, s.policy_version));
            if (it == t.records.end() || !it->second.processing) {
                raise(ErrorCode::NotProcessing, s.sample_id.render());
            }
        }
        for (const SampleRecord& s : samples) {
            auto it = t.records.find(make_key(s.sample_id, s.policy_version));
            delete_refs(it->second);
            t.records.erase(it);
        }
    }

    // Removes all non-processing records whose input_id is in `inputs`,
    // regardless of version; used to retire a consumed rollout generation in
    // the one-step pipeline where adjacent generations share a version.
    std::size_t purge_inputs(const std::string& agent_id, const std::set<std::string>& inputs) {
        Table& t = table_or_raise(agent_id);
        std::lock_guard<std::mutex> guard(t.mu);
        std::size_t purged = 0;
        for (auto it = t.records.begin(); it != t.records.end();) {
            if (!it->second.processing && inputs.count(it->second.sample_id.input_id)) {
                delete_refs(it->second);
                it = t.records.erase(it);
                ++purged;
            } else {
                ++it;
            }
        }
        return purged;
    }

    // Removes one record outright (dropped trajectories). Processing records
    // are left alone.
    bool drop_record(const std::string& agent_id, const SampleId& id, std::int64_t version) {
        Table& t = table_or_raise(agent_id);
        std::lock_guard<std::mutex> guard(t.mu);
        auto it = t.records.find(make_key(id, version));
        if (it == t.records.end() || it->second.processing) return false;
        delete_refs(it->second);
        t.records.erase(it);
        return true;
    }

    std::size_t ready_count(const std::string& agent_id, std::int64_t version) const {
        const Table& t = table_or_raise(agent_id);
        std::size_t n = 0;
        for (const auto& [key, rec] : t.records)
            if (!rec.processing && rec.policy_version == version && rec.ready()) ++n;
        return n;
    }

    std::size_t record_count(const std::string& agent_id) const {
        return table_or_raise(agent_id).records.size();
    }

    const SampleRecord* find(const std::string& agent_id, const SampleId& id,
                             std::int64_t version) const {
        const Table& t = table_or_raise(agent_id);
        auto it = t.records.find(make_key(id, version));
        return it == t.records.end() ? nullptr : &it->second;
    }

    static std::string sample_field_key(const std::string& agent_id, std::int64_t version,
                                        const SampleId& id, const std::string& column) {
        return "sample-field:" + agent_id + ":v" + std::to_string(version) + ":" + id.render() +
               ":" + column;
    }

    // Debug snapshot, one JSON record per line, refs rendered as keys.
    std::string dump_table(const std::string& agent_id) const {
        const Table& t = table_or_raise(agent_id);
        std::string out;
        for (const auto& [key, rec] : t.records) {
            Json line;
            line["policy_version"] = rec.policy_version;
            line["sample_id"] = rec.sample_id.render();
            line["processing"] = rec.processing;
            Json data = Json::object();
            Json status = Json::object();
            for (std::size_t i = 0; i < t.schema.columns.size(); ++i) {
                const std::string& name = t.schema.columns[i].name;
                const CellValue& cell = rec.data[i];
                if (!cell.is_set()) {
                    data[name] = nullptr;
                } else if (cell.is_ref()) {
                    data[name] = cell.ref_key();
                } else if (std::holds_alternative<double>(cell.value)) {
                    data[name] = cell.as_float();
                } else if (std::holds_alternative<std::int64_t>(cell.value)) {
                    data[name] = cell.as_int();
                } else {
                    data[name] = cell.as_bool();
                }
                status[name] = static_cast<bool>(rec.status[i]);
            }
            line["data"] = data;
            line["status"] = status;
            out += line.dump();
            out += '\n';
        }
        return out;
    }

private:
    using RecordKey = std::tuple<std::string, int, int, std::int64_t>;

    struct Table {
        TableSchema schema;
        std::map<RecordKey, SampleRecord> records;  // canonical iteration order
        mutable std::mutex mu;
    };

    static RecordKey make_key(const SampleId& id, std::int64_t version) {
        return {id.input_id, id.number_of_turns, id.trajectory_id, version};
    }

    Table& table_or_raise(const std::string& agent_id) {
        auto it = tables_.find(agent_id);
        if (it == tables_.end()) raise(ErrorCode::UnknownTable, agent_id);
        return it->second;
    }
    const Table& table_or_raise(const std::string& agent_id) const {
        auto it = tables_.find(agent_id);
        if (it == tables_.end()) raise(ErrorCode::UnknownTable, agent_id);
        return it->second;
    }

    void delete_refs(const SampleRecord& rec) {
        for (const CellValue& cell : rec.data) {
            if (cell.is_set() && cell.is_ref() && objects_.contains(cell.ref_key())) {
                objects_.del(cell.ref_key());
            }
        }
    }

    ObjectStore& objects_;
    std::map<std::string, Table> tables_;
    std::mutex mu_;
};

}  // namespace marlsim
