#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <vector>

#include "dra/tensor.hpp"

namespace dra {

enum class Precision { kDouble, kSingle };

const char* to_string(Precision p) noexcept;
Precision parse_precision(const std::string& s);

// A named, persistent weight. Parameters live outside any tape; a tape only
// references them for the duration of one forward/backward pass.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad();
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Backward rule: receives the tape and the gradient flowing into the node's
// output, and accumulates into its inputs through Tape::grad_slot.
using BackwardFn = std::function<void(Tape&, const Tensor&)>;

// Reverse-mode recording of one computation.
//
// Nodes are appended in evaluation order, so reverse insertion order is a
// valid topological order for backward. A node requires a gradient when it
// is a trainable leaf or when any of its inputs requires one; nodes that do
// not are never visited by backward.
//
// A tape is single-threaded. Independent tapes can run concurrently, which is
// how batches are processed: one tape per sequence, with parameter gradients
// exported serially in a fixed order afterwards.
class Tape {
 public:
  explicit Tape(Precision precision = Precision::kDouble) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  // Leaf aliasing p.value (not copied). Requires grad iff p.trainable.
  // Repeated calls with the same parameter return the same node.
  Var parameter(Parameter& p);

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  // Gradient of the last backward pass, or null if none reached v.
  const Tensor* grad(Var v) const;
  // Zero-initialized on first access. Only valid for nodes requiring grad.
  Tensor& grad_slot(Var v);

  void backward(Var output);
  void backward(Var output, const Tensor& seed);

  // p.grad += d(output)/d(p) for every parameter leaf touched by backward.
  void export_parameter_grads() const;

  Precision precision() const noexcept { return precision_; }
  void round(Tensor& t) const noexcept;
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t backward_visits() const noexcept { return backward_visits_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;

    const Tensor& value() const { return external ? *external : owned; }
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  Precision precision_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  std::size_t backward_visits_ = 0;
};

}  // namespace dra
