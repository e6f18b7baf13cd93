#include "dra/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace dra {

namespace {

double evaluate(const ScalarTapeFunction& f) {
  Tape tape(Precision::kDouble);
  Var out = f(tape);
  const Tensor& v = tape.value(out);
  if (v.size() != 1) throw ContractError("grad_check: function output must be scalar, got " + to_string(v.shape()));
  return v[0];
}

}  // namespace

GradCheckResult grad_check(const ScalarTapeFunction& f, std::span<Parameter* const> inputs,
                           const GradCheckOptions& options) {
  std::vector<bool> saved_flags;
  saved_flags.reserve(inputs.size());
  for (Parameter* p : inputs) {
    saved_flags.push_back(p->trainable);
    p->trainable = true;
  }

  std::vector<Tensor> analytic;
  {
    Tape tape(Precision::kDouble);
    Var out = f(tape);
    if (tape.value(out).size() != 1) {
      for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i]->trainable = saved_flags[i];
      throw ContractError("grad_check: function output must be scalar, got " + to_string(out.shape()));
    }
    tape.backward(out);
    for (Parameter* p : inputs) {
      Var leaf = tape.parameter(*p);
      const Tensor* g = tape.grad(leaf);
      analytic.push_back(g ? *g : Tensor(p->value.shape()));
    }
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Parameter& p = *inputs[k];
    const Tensor& ga = analytic[k];
    double scale = 0.0;
    for (double g : ga.data()) scale = std::max(scale, std::abs(g));
    const double floor = std::max(options.relative_floor * scale, 1e-12);

    const std::size_t n = p.value.size();
    const std::size_t stride =
        options.max_entries_per_input == 0 || n <= options.max_entries_per_input
            ? 1
            : (n + options.max_entries_per_input - 1) / options.max_entries_per_input;

    InputError err;
    err.name = p.name;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p.value[i];
      p.value[i] = orig + options.epsilon;
      const double fp = evaluate(f);
      p.value[i] = orig - options.epsilon;
      const double fm = evaluate(f);
      p.value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * options.epsilon);
      const double denom = std::max({std::abs(ga[i]), std::abs(numeric), floor});
      const double rel = std::abs(ga[i] - numeric) / denom;
      if (i == 0 || rel > err.max_relative_error) {
        err.max_relative_error = rel;
        err.worst_index = i;
        err.analytic = ga[i];
        err.numeric = numeric;
      }
    }
    result.max_relative_error = std::max(result.max_relative_error, err.max_relative_error);
    result.per_input.push_back(std::move(err));
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i]->trainable = saved_flags[i];
  return result;
}

}  // namespace dra
