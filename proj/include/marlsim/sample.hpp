#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "marlsim/errors.hpp"

namespace marlsim {

// Identifier triple of one trajectory sample. The rendered form is
// "{input_id}_{number_of_turns}_{trajectory_id}"; input_id may not contain
// '_' so the rendering parses back unambiguously.
struct SampleId {
    std::string input_id;
    int number_of_turns = 0;
    int trajectory_id = 0;

    std::string render() const {
        return input_id + "_" + std::to_string(number_of_turns) + "_" +
               std::to_string(trajectory_id);
    }

    static SampleId parse(const std::string& text) {
        const auto last = text.rfind('_');
        if (last == std::string::npos || last == 0) raise(ErrorCode::BadSampleId, text);
        const auto mid = text.rfind('_', last - 1);
        if (mid == std::string::npos || mid == 0) raise(ErrorCode::BadSampleId, text);
        SampleId id;
        id.input_id = text.substr(0, mid);
        if (id.input_id.find('_') != std::string::npos) raise(ErrorCode::BadSampleId, text);
        try {
            id.number_of_turns = std::stoi(text.substr(mid + 1, last - mid - 1));
            id.trajectory_id = std::stoi(text.substr(last + 1));
        } catch (const std::exception&) {
            raise(ErrorCode::BadSampleId, text);
        }
        if (id.number_of_turns < 0 || id.trajectory_id < 0) raise(ErrorCode::BadSampleId, text);
        return id;
    }

    // Canonical sample order: lexicographic over the id triple.
    auto tie() const { return std::tie(input_id, number_of_turns, trajectory_id); }
    bool operator<(const SampleId& o) const { return tie() < o.tie(); }
    bool operator==(const SampleId& o) const { return tie() == o.tie(); }
};

// A table cell: simple types inline, complex types as a key into the object
// store. Unset cells are monostate until their status flag flips.
struct CellValue {
    std::variant<std::monostate, std::int64_t, double, bool, std::string> value;

    static CellValue unset() { return CellValue{}; }
    static CellValue of_int(std::int64_t v) { return CellValue{v}; }
    static CellValue of_float(double v) { return CellValue{v}; }
    static CellValue of_bool(bool v) { return CellValue{v}; }
    static CellValue of_ref(std::string key) { return CellValue{std::move(key)}; }

    bool is_set() const { return !std::holds_alternative<std::monostate>(value); }
    bool is_ref() const { return std::holds_alternative<std::string>(value); }
    const std::string& ref_key() const { return std::get<std::string>(value); }
    double as_float() const { return std::get<double>(value); }
    std::int64_t as_int() const { return std::get<std::int64_t>(value); }
    bool as_bool() const { return std::get<bool>(value); }
};

enum class ColumnType { Int, Float, Bool, String, List, Tensor };

inline bool column_stored_by_value(ColumnType t) {
    return t == ColumnType::Int || t == ColumnType::Float || t == ColumnType::Bool;
}

struct ColumnSpec {
    std::string name;
    ColumnType type;
};

struct TableSchema {
    std::string agent_id;
    std::vector<ColumnSpec> columns;

    int column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i].name == name) return static_cast<int>(i);
        return -1;
    }
};

struct SampleRecord {
    std::int64_t policy_version = 0;
    SampleId sample_id;
    bool processing = false;
    std::vector<CellValue> data;   // aligned with the table schema
    std::vector<bool> status;      // one flag per data column

    bool ready() const {
        for (bool s : status)
            if (!s) return false;
        return true;
    }
};

struct MicroBatch {
    std::string agent_id;
    std::int64_t policy_version = 0;
    std::vector<SampleRecord> samples;  // canonical order

    std::size_t size() const { return samples.size(); }
};

}  // namespace marlsim
