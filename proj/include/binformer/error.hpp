#pragma once

#include <stdexcept>
#include <string>

namespace binformer {

// Error categories used across the library. The CLI maps each category to a
// one-line diagnostic and a nonzero exit status.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& msg)
        : std::runtime_error(msg), category_(std::move(category)) {}
    const std::string& category() const { return category_; }

private:
    std::string category_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error("dimension", msg) {}
};

struct ArgumentError : Error {
    explicit ArgumentError(const std::string& msg) : Error("argument", msg) {}
};

struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error("contract", msg) {}
};

struct ParameterError : Error {
    explicit ParameterError(const std::string& msg) : Error("parameter", msg) {}
};

struct TrainingError : Error {
    explicit TrainingError(const std::string& msg) : Error("training", msg) {}
};

struct EncodingError : Error {
    explicit EncodingError(const std::string& msg) : Error("encoding", msg) {}
};

struct ScheduleError : Error {
    explicit ScheduleError(const std::string& msg) : Error("schedule", msg) {}
};

struct SchemaError : Error {
    explicit SchemaError(const std::string& msg) : Error("schema", msg) {}
};

struct RowError : Error {
    explicit RowError(const std::string& msg) : Error("row", msg) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error("format", msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

struct InputError : Error {
    explicit InputError(const std::string& msg) : Error("input", msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io", msg) {}
};

}  // namespace binformer
