#pragma once

#include <stdexcept>
#include <string>

namespace marlsim {

// Every recoverable failure in the library carries one of these codes so
// callers can branch on the condition instead of parsing message text.
enum class ErrorCode {
    SchedulingInPast,
    DeviceOom,
    HostOom,
    EmptyPool,
    DuplicateKey,
    KeyNotFound,
    GetTimeout,
    LayoutOutOfBounds,
    EmptyList,
    TableExists,
    ReservedColumnName,
    DuplicateSample,
    UnknownColumn,
    RecordNotFound,
    CellAlreadySet,
    UnknownTable,
    NotProcessing,
    BadSampleId,
    UnknownWorkflow,
    NoInstance,
    InsufficientResources,
    BusyGroup,
    VersionMismatch,
    InactiveGroup,
    IncompleteBatch,
    ConfigError,
    StallDetected,
    SyncTimeout,
};

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::SchedulingInPast: return "SchedulingInPast";
        case ErrorCode::DeviceOom: return "DeviceOom";
        case ErrorCode::HostOom: return "HostOom";
        case ErrorCode::EmptyPool: return "EmptyPool";
        case ErrorCode::DuplicateKey: return "DuplicateKey";
        case ErrorCode::KeyNotFound: return "KeyNotFound";
        case ErrorCode::GetTimeout: return "GetTimeout";
        case ErrorCode::LayoutOutOfBounds: return "LayoutOutOfBounds";
        case ErrorCode::EmptyList: return "EmptyList";
        case ErrorCode::TableExists: return "TableExists";
        case ErrorCode::ReservedColumnName: return "ReservedColumnName";
        case ErrorCode::DuplicateSample: return "DuplicateSample";
        case ErrorCode::UnknownColumn: return "UnknownColumn";
        case ErrorCode::RecordNotFound: return "RecordNotFound";
        case ErrorCode::CellAlreadySet: return "CellAlreadySet";
        case ErrorCode::UnknownTable: return "UnknownTable";
        case ErrorCode::NotProcessing: return "NotProcessing";
        case ErrorCode::BadSampleId: return "BadSampleId";
        case ErrorCode::UnknownWorkflow: return "UnknownWorkflow";
        case ErrorCode::NoInstance: return "NoInstance";
        case ErrorCode::InsufficientResources: return "InsufficientResources";
        case ErrorCode::BusyGroup: return "BusyGroup";
        case ErrorCode::VersionMismatch: return "VersionMismatch";
        case ErrorCode::InactiveGroup: return "InactiveGroup";
        case ErrorCode::IncompleteBatch: return "IncompleteBatch";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::StallDetected: return "StallDetected";
        case ErrorCode::SyncTimeout: return "SyncTimeout";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

}  // namespace marlsim
