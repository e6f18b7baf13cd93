#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dra/tape.hpp"

namespace dra {

struct GradCheckOptions {
  double epsilon = 1e-5;
  // 0 checks every entry; otherwise an evenly strided subset of this size.
  std::size_t max_entries_per_input = 0;
  // Entries whose gradient is tiny relative to the rest of their tensor are
  // compared against this fraction of the tensor's largest analytic gradient
  // instead of their own magnitude.
  double relative_floor = 1e-3;
};

struct InputError {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<InputError> per_input;
};

// The function must build its graph on the given tape, reading every input
// through Tape::parameter, and return a scalar.
using ScalarTapeFunction = std::function<Var(Tape&)>;

// Compares reverse-mode gradients of f against central differences.
//
// Inputs are temporarily marked trainable and perturbed in place; their
// values and flags are restored before returning. Always runs on a
// double-precision tape.
GradCheckResult grad_check(const ScalarTapeFunction& f, std::span<Parameter* const> inputs,
                           const GradCheckOptions& options = {});

}  // namespace dra
