#pragma once

#include <stdexcept>
#include <string>

namespace attnmerge {

/// Error taxonomy mirrored by the CLI exit codes: usage/config errors exit 2,
/// evaluator failures exit 3, checkpoint/data problems exit 4.
enum class ErrorKind { usage, data, evaluator, internal };

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

inline Error usage_error(const std::string& msg) { return Error(ErrorKind::usage, msg); }
inline Error data_error(const std::string& msg) { return Error(ErrorKind::data, msg); }
inline Error evaluator_error(const std::string& msg) { return Error(ErrorKind::evaluator, msg); }

/// Thrown by the budgeted objective when one more evaluator call would exceed
/// the evaluation cap. The search loop treats this as a normal stop signal.
class BudgetExhausted : public std::runtime_error {
  public:
    explicit BudgetExhausted(long cap)
        : std::runtime_error("evaluation budget exhausted (cap " + std::to_string(cap) + ")") {}
};

}  // namespace attnmerge
