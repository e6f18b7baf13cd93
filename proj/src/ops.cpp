#include "dra/ops.hpp"

#include <algorithm>
#include <cmath>

#include "dra/kernels.hpp"

namespace dra {

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ContractError("operands recorded on different tapes");
  return t;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

Tensor like(const Tensor& t) { return Tensor(t.shape()); }

}  // namespace

void validate_permutation(std::span<const std::size_t> perm, std::size_t n) {
  if (perm.size() != n) {
    throw PermutationError("permutation length " + std::to_string(perm.size()) + " does not match " +
                           std::to_string(n) + " rows");
  }
  std::vector<char> seen(n, 0);
  for (std::size_t p : perm) {
    if (p >= n || seen[p]) throw PermutationError("index list is not a bijection on 0.." + std::to_string(n - 1));
    seen[p] = 1;
  }
}

Permutation inverse(std::span<const std::size_t> perm) {
  validate_permutation(perm, perm.size());
  Permutation inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

Permutation identity_permutation(std::size_t n) {
  Permutation p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  return p;
}

// ---------------------------------------------------------------- value level

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  kernels::matmul(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

Tensor transpose(const Tensor& a) {
  Tensor t = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor softmax_rows(const Tensor& a) {
  if (!a.all_finite()) throw NumericError("softmax_rows: non-finite input");
  Tensor y = like(a);
  kernels::softmax_rows(a.data(), y.data(), a.rows(), a.cols());
  return y;
}

Tensor variance_cols(const Tensor& a) {
  const std::size_t n = a.rows();
  const std::size_t r = a.cols();
  if (n < 2) throw DegenerateInputError("variance_cols needs at least 2 rows, got " + std::to_string(n));
  Tensor v({r});
  for (std::size_t j = 0; j < r; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += a.at(i, j);
    mu /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dv = a.at(i, j) - mu;
      ss += dv * dv;
    }
    v[j] = ss / static_cast<double>(n - 1);
  }
  return v;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> perm) {
  validate_permutation(perm, a.rows());
  Tensor out = like(a);
  const std::size_t c = a.cols();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(perm[i] * c), c,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

// ---------------------------------------------------------------- tape level

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor c = matmul(t.value(a), t.value(b));
  return t.record(std::move(c), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (tp.requires_grad(a)) kernels::matmul_a_bt_acc(g.data(), bv.data(), tp.grad_slot(a).data(), m, k, n);
    if (tp.requires_grad(b)) kernels::matmul_at_b_acc(av.data(), g.data(), tp.grad_slot(b).data(), m, k, n);
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape("add", av, bv);
  Tensor c = av;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += bv[i];
  return t.record(std::move(c), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    for (Var v : {a, b}) {
      if (!tp.requires_grad(v)) continue;
      Tensor& gv = tp.grad_slot(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape("sub", av, bv);
  Tensor c = av;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= bv[i];
  return t.record(std::move(c), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_slot(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape("mul", av, bv);
  Tensor c = av;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= bv[i];
  return t.record(std::move(c), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_slot(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tape& t = tape_of(a);
  Tensor c = t.value(a);
  for (double& x : c.storage()) x *= factor;
  return t.record(std::move(c), {a}, [a, factor](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Var scale_by(Var a, Var s) {
  Tape& t = tape_of(a, s);
  if (t.value(s).size() != 1) throw DimensionError("scale_by: factor must have one element, got " + to_string(s.shape()));
  const double sv = t.value(s)[0];
  Tensor c = t.value(a);
  for (double& x : c.storage()) x *= sv;
  return t.record(std::move(c), {a, s}, [a, s](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const double sv = tp.value(s)[0];
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
    }
    if (tp.requires_grad(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      tp.grad_slot(s)[0] += acc;
    }
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  return t.record(transpose(t.value(a)), {a}, [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    const std::size_t m = ga.rows(), n = ga.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g.at(j, i);
  });
}

Var relu(Var a, double kink_slope) {
  Tape& t = tape_of(a);
  Tensor c = t.value(a);
  for (double& x : c.storage()) x = x > 0.0 ? x : 0.0;
  return t.record(std::move(c), {a}, [a, kink_slope](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) {
        ga[i] += g[i];
      } else if (av[i] == 0.0 && kink_slope != 0.0) {
        ga[i] += kink_slope * g[i];
      }
    }
  });
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  Tensor c = t.value(a);
  for (double& x : c.storage()) x = std::exp(x);
  return t.record(std::move(c), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * std::exp(av[i]);
  });
}

Var log(Var a) {
  Tape& t = tape_of(a);
  Tensor c = t.value(a);
  for (double& x : c.storage()) {
    if (!(x > 0.0)) throw NumericError("log of a non-positive value");
    x = std::log(x);
  }
  return t.record(std::move(c), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
  });
}

Var abs(Var a) {
  Tape& t = tape_of(a);
  Tensor c = t.value(a);
  for (double& x : c.storage()) x = std::abs(x);
  return t.record(std::move(c), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g[i];
      else if (av[i] < 0.0) ga[i] -= g[i];
    }
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double acc = 0.0;
  for (double x : t.value(a).data()) acc += x;
  return t.record(Tensor({1}, acc), {a}, [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    for (double& x : ga.storage()) x += g[0];
  });
}

Var mean_rows(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const std::size_t m = av.rows(), n = av.cols();
  Tensor c = Tensor::matrix(m, 1);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += av.at(i, j);
    c[i] = acc / static_cast<double>(n);
  }
  return t.record(std::move(c), {a}, [a, n](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i / n] / static_cast<double>(n);
  });
}

Var mean_cols(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const std::size_t m = av.rows(), n = av.cols();
  Tensor c({n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[j] += av.at(i, j);
  for (double& x : c.storage()) x /= static_cast<double>(m);
  return t.record(std::move(c), {a}, [a, m, n](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] / static_cast<double>(m);
  });
}

Var variance_cols(Var a) {
  Tape& t = tape_of(a);
  return t.record(variance_cols(t.value(a)), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    Tensor& ga = tp.grad_slot(a);
    const std::size_t n = av.rows(), r = av.cols();
    const double denom = static_cast<double>(n - 1);
    for (std::size_t j = 0; j < r; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < n; ++i) mu += av.at(i, j);
      mu /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) ga[i * r + j] += g[j] * 2.0 * (av.at(i, j) - mu) / denom;
    }
  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  Tensor y = softmax_rows(t.value(a));
  Tensor ycopy = y;
  return t.record(std::move(y), {a}, [a, y = std::move(ycopy)](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    const std::size_t m = y.rows(), n = y.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Var l2_normalize_rows(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const std::size_t m = av.rows(), n = av.cols();
  Tensor y = av;
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += av.at(i, j) * av.at(i, j);
    if (!(ss > 0.0) || !std::isfinite(ss)) throw NumericError("l2_normalize_rows: zero or non-finite row norm");
    norms[i] = std::sqrt(ss);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= norms[i];
  }
  Tensor ycopy = y;
  return t.record(std::move(y), {a}, [a, norms = std::move(norms), ycopy = std::move(ycopy)](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    const std::size_t m = ycopy.rows(), n = ycopy.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += ycopy[i * n + j] * g[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (g[i * n + j] - ycopy[i * n + j] * dot) / norms[i];
    }
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  if (beta.tape() != &t) throw ContractError("operands recorded on different tapes");
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gv.size() != n || bv.size() != n) {
    throw DimensionError("layer_norm_rows: affine params " + to_string(gv.shape()) + "/" + to_string(bv.shape()) +
                         " vs width " + std::to_string(n));
  }
  Tensor xhat = xv;
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv.at(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv.at(i, j) - mu) * (xv.at(i, j) - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat[i * n + j] = (xv.at(i, j) - mu) * inv_std[i];
  }
  Tensor y = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
  return t.record(std::move(y), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Tensor& g) {
                    const Tensor& gv = tp.value(gamma);
                    const std::size_t m = xhat.rows(), n = xhat.cols();
                    if (tp.requires_grad(gamma)) {
                      Tensor& gg = tp.grad_slot(gamma);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                    if (tp.requires_grad(beta)) {
                      Tensor& gb = tp.grad_slot(beta);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                    }
                    if (tp.requires_grad(x)) {
                      Tensor& gx = tp.grad_slot(x);
                      std::vector<double> dxhat(n);
                      for (std::size_t i = 0; i < m; ++i) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                          dxhat[j] = g[i * n + j] * gv[j];
                          mean_d += dxhat[j];
                          mean_dx += dxhat[j] * xhat[i * n + j];
                        }
                        mean_d /= static_cast<double>(n);
                        mean_dx /= static_cast<double>(n);
                        for (std::size_t j = 0; j < n; ++j)
                          gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                      }
                    }
                  });
}

Var gather_rows(Var a, std::span<const std::size_t> perm) {
  Tape& t = tape_of(a);
  Permutation p(perm.begin(), perm.end());
  Tensor out = gather_rows(t.value(a), p);
  return t.record(std::move(out), {a}, [a, p = std::move(p)](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    const std::size_t c = ga.cols();
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[p[i] * c + j] += g[i * c + j];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows of zero parts");
  Tape& t = tape_of(parts.front());
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (Var v : parts) {
    if (v.tape() != &t) throw ContractError("operands recorded on different tapes");
    if (v.cols() != c) throw DimensionError("concat_rows: column mismatch " + to_string(v.shape()));
    total += v.rows();
  }
  Tensor out = Tensor::matrix(total, c);
  std::size_t off = 0;
  for (Var v : parts) {
    const Tensor& pv = t.value(v);
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off * c));
    off += pv.rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  bool needs = false;
  for (Var v : ins) needs = needs || t.requires_grad(v);
  BackwardFn fn = [ins, c](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (Var v : ins) {
      const std::size_t r = tp.value(v).rows();
      if (tp.requires_grad(v)) {
        Tensor& gv = tp.grad_slot(v);
        for (std::size_t i = 0; i < r * c; ++i) gv[i] += g[off * c + i];
      }
      off += r;
    }
  };
  if (!needs) return t.constant(std::move(out));
  Var anchor = ins.front();
  for (Var v : ins) {
    if (t.requires_grad(v)) {
      anchor = v;
      break;
    }
  }
  return t.record(std::move(out), {anchor}, std::move(fn));
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  if (count == 0 || begin + count > av.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") out of " +
                         to_string(av.shape()));
  }
  const std::size_t c = av.cols();
  Tensor out = Tensor::matrix(count, c);
  std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(begin * c), count * c, out.data().begin());
  return t.record(std::move(out), {a}, [a, begin, c](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Tape& t = tape_of(logits);
  const Tensor& z = t.value(logits);
  const std::size_t b = z.rows(), n = z.cols();
  if (labels.size() != b) throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                               std::to_string(b) + " rows");
  if (b == 0) throw ContractError("cross_entropy of an empty batch");
  Tensor p = softmax_rows(z);
  double loss = 0.0;
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  for (std::size_t i = 0; i < b; ++i) {
    if (lab[i] >= n) throw DimensionError("cross_entropy: label out of range");
    double mx = z.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z.at(i, j));
    double se = 0.0;
    for (std::size_t j = 0; j < n; ++j) se += std::exp(z.at(i, j) - mx);
    loss += mx + std::log(se) - z.at(i, lab[i]);
  }
  loss /= static_cast<double>(b);
  return t.record(Tensor({1}, loss), {logits}, [logits, p = std::move(p), lab = std::move(lab)](Tape& tp, const Tensor& g) {
    Tensor& gz = tp.grad_slot(logits);
    const std::size_t b = p.rows(), n = p.cols();
    const double w = g[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < n; ++j) gz[i * n + j] += w * (p[i * n + j] - (j == lab[i] ? 1.0 : 0.0));
  });
}

}  // namespace dra
