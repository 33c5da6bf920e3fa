#pragma once

#include <stdexcept>
#include <string>

namespace caat {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration values (ranges, enums, empty inputs).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

// Tensor dimension mismatches; message names the offending operands.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

// API contract violations (non-scalar loss, undeclared tracked variable).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error("contract violation: " + msg) {}
};

struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error("index error: " + msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("i/o error: " + msg) {}
};

// Training diverged (NaN loss); carries the step index in the message.
struct TrainError : Error {
    explicit TrainError(const std::string& msg) : Error("training error: " + msg) {}
};

struct AttackError : Error {
    explicit AttackError(const std::string& msg) : Error("attack failure: " + msg) {}
};

struct VocabError : Error {
    explicit VocabError(const std::string& msg) : Error("vocabulary error: " + msg) {}
};

struct MetricError : Error {
    explicit MetricError(const std::string& msg) : Error("metric error: " + msg) {}
};

}  // namespace caat
