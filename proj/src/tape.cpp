#include "dra/tape.hpp"

#include <algorithm>

namespace dra {

const char* to_string(Precision p) noexcept {
  return p == Precision::kDouble ? "double" : "single";
}

Precision parse_precision(const std::string& s) {
  if (s == "double") return Precision::kDouble;
  if (s == "single") return Precision::kSingle;
  throw ConfigError("precision must be 'double' or 'single', got '" + s + "'");
}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    std::fill(grad.storage().begin(), grad.storage().end(), 0.0);
  }
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(*this);
}

Tape::Node& Tape::node(Var v) {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ContractError("Var does not belong to this tape");
  return nodes_[v.id_];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ContractError("Var does not belong to this tape");
  return nodes_[v.id_];
}

void Tape::round(Tensor& t) const noexcept {
  if (precision_ != Precision::kSingle) return;
  for (double& x : t.storage()) x = static_cast<double>(static_cast<float>(x));
}

Var Tape::constant(Tensor value) {
  round(value);
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  round(value);
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  if (precision_ == Precision::kSingle) {
    n.owned = p.value;
    round(n.owned);
  } else {
    n.external = &p.value;
  }
  n.requires_grad = p.trainable;
  n.param = &p;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  round(value);
  bool needs = false;
  for (Var in : inputs) needs = needs || node(in).requires_grad;
  Node n;
  n.owned = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const { return node(v).value(); }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

const Tensor* Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.has_grad ? &n.grad : nullptr;
}

Tensor& Tape::grad_slot(Var v) {
  Node& n = node(v);
  if (!n.requires_grad) throw ContractError("grad_slot on a node that does not require grad");
  if (!n.has_grad) {
    n.grad = Tensor(n.value().shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var output) {
  const Tensor& out = value(output);
  if (out.size() != 1) {
    throw ContractError("backward without a seed needs a scalar output, got shape " + to_string(out.shape()));
  }
  backward(output, Tensor(out.shape(), 1.0));
}

void Tape::backward(Var output, const Tensor& seed) {
  Node& out = node(output);
  if (seed.size() != out.value().size()) {
    throw DimensionError("backward seed " + to_string(seed.shape()) + " vs output " +
                         to_string(out.value().shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  backward_visits_ = 0;
  if (!out.requires_grad) return;
  Tensor& g = grad_slot(output);
  std::copy(seed.data().begin(), seed.data().end(), g.data().begin());
  for (std::size_t i = output.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    ++backward_visits_;
    n.backward(*this, n.grad);
  }
}

void Tape::export_parameter_grads() const {
  for (const Node& n : nodes_) {
    if (!n.param || !n.has_grad) continue;
    Tensor& dst = n.param->grad;
    if (dst.shape() != n.grad.shape()) dst = Tensor(n.grad.shape());
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
  }
}

}  // namespace dra
