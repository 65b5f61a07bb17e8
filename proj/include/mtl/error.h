#pragma once

#include <stdexcept>
#include <string>

namespace mtl {

// Invalid user-facing configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

// Model construction / shape errors.
struct ModelError : std::runtime_error {
  explicit ModelError(const std::string& m) : std::runtime_error(m) {}
};

// Prompt/tokenizer errors (overlong sequences, missing placeholder).
struct PromptError : std::runtime_error {
  explicit PromptError(const std::string& m) : std::runtime_error(m) {}
};

// Corrupt or inconsistent checkpoint files.
struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& m) : std::runtime_error(m) {}
};

// Non-finite loss during training.
struct TrainingAbort : std::runtime_error {
  explicit TrainingAbort(const std::string& m) : std::runtime_error(m) {}
};

// A stated invariant was violated at runtime (CLI exit code 3).
struct InvariantViolation : std::runtime_error {
  explicit InvariantViolation(const std::string& m) : std::runtime_error(m) {}
};

inline void check_model(bool cond, const std::string& msg) {
  if (!cond) throw ModelError(msg);
}

inline void check_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

inline void check_invariant(bool cond, const std::string& msg) {
  if (!cond) throw InvariantViolation(msg);
}

}  // namespace mtl
