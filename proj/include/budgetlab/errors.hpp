#pragma once

#include <stdexcept>
#include <string>

namespace budgetlab {

// Invalid specs, budgets, groups and arguments raise std::invalid_argument
// with a message naming the offending field. The errors below get their own
// types because callers branch on them (CLI exit codes, trainer aborts).

// Sequence would not fit the model's context window.
struct ContextOverflowError : std::runtime_error {
  explicit ContextOverflowError(const std::string& what)
      : std::runtime_error(what) {}
};

// Non-finite loss/gradients/parameters during training.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what)
      : std::runtime_error(what) {}
};

// Bad magic, version, shape or checksum while loading a checkpoint.
struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what)
      : std::runtime_error(what) {}
};

// Models with mismatched vocabularies composed together.
struct IncompatibleModelsError : std::runtime_error {
  explicit IncompatibleModelsError(const std::string& what)
      : std::runtime_error(what) {}
};

// Required input file absent or missing a required field.
struct MissingDataError : std::runtime_error {
  explicit MissingDataError(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace budgetlab
