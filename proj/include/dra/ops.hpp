#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dra/tape.hpp"

// Differentiable operations over Tape variables. Shapes are explicit: binary
// elementwise ops require identical shapes, and the only broadcasts are the
// ones named in an op (row/column reductions, per-column affine in
// layer_norm_rows). Rank-1 inputs are treated as a single row.

namespace dra {

using Permutation = std::vector<std::size_t>;

void validate_permutation(std::span<const std::size_t> perm, std::size_t n);
Permutation inverse(std::span<const std::size_t> perm);
Permutation identity_permutation(std::size_t n);

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// a * s for a scalar variable s (shape [1]).
Var scale_by(Var a, Var s);
Var transpose(Var a);

// Subgradient at exactly zero is kink_slope (0 by default). Adapter outputs use
// 1 so a zero-initialized up-projection still receives gradient.
Var relu(Var a, double kink_slope = 0.0);
Var exp(Var a);
Var log(Var a);
Var abs(Var a);

Var sum(Var a);
Var mean_rows(Var a);  // [m x n] -> [m x 1], mean over each row
Var mean_cols(Var a);  // [m x n] -> [n], mean over each column
Var variance_cols(Var a);  // [N x r] -> [r], unbiased

Var softmax_rows(Var a);
Var l2_normalize_rows(Var a);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

Var gather_rows(Var a, std::span<const std::size_t> perm);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);

// Mean cross-entropy of softmax(logits[i]) against labels[i].
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

// Value-level helpers for code that only needs forward results.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor variance_cols(const Tensor& a);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> perm);

}  // namespace dra
