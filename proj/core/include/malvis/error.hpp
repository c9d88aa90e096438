#pragma once

#include <stdexcept>
#include <string>

namespace malvis {

// Validation errors are caller mistakes (bad input, bad config); runtime
// errors are failures while doing the work. The CLI maps them to exit codes
// 1 and 2.
enum class ErrorClass { validation, runtime };

class Error : public std::runtime_error {
 public:
  Error(std::string name, const std::string& detail,
        ErrorClass cls = ErrorClass::validation)
      : std::runtime_error(name + ": " + detail), name_(std::move(name)), cls_(cls) {}

  /// Module-level error name, e.g. "TruncatedInput".
  const std::string& name() const noexcept { return name_; }
  ErrorClass error_class() const noexcept { return cls_; }

 private:
  std::string name_;
  ErrorClass cls_;
};

inline Error validation_error(std::string name, const std::string& detail) {
  return Error(std::move(name), detail, ErrorClass::validation);
}

inline Error runtime_error(std::string name, const std::string& detail) {
  return Error(std::move(name), detail, ErrorClass::runtime);
}

}  // namespace malvis
