#pragma once

#include <cstddef>
#include <span>

// Dense kernels behind the tensor engine.
//
// Two implementations are kept side by side:
//   reference::  plain loops, single threaded. The ground truth for tests.
//   omp::        row-parallel loops using OpenMP worksharing.
//
// Every omp kernel partitions work over output rows only, and each output
// element is accumulated in the same index order as the reference kernel. The
// two are therefore bitwise identical for any thread count, which is what lets
// training stay reproducible while still running the parallel path.
//
// The unqualified entry points dispatch to omp:: when OpenMP is compiled in
// and the problem is large enough to amortize a parallel region, otherwise to
// the reference kernel.

namespace dra::kernels {

namespace reference {

// c[m x n] = a[m x k] * b[k x n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n);
// c[k x n] += a[m x k]^T * g[m x n]
void matmul_at_b_acc(std::span<const double> a, std::span<const double> g, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
// c[m x k] += g[m x n] * b[k x n]^T
void matmul_a_bt_acc(std::span<const double> g, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t rows, std::size_t cols);

}  // namespace reference

namespace omp {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n);
void matmul_at_b_acc(std::span<const double> a, std::span<const double> g, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
void matmul_a_bt_acc(std::span<const double> g, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t rows, std::size_t cols);

}  // namespace omp

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n);
void matmul_at_b_acc(std::span<const double> a, std::span<const double> g, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
void matmul_a_bt_acc(std::span<const double> g, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t rows, std::size_t cols);

bool openmp_available() noexcept;
int max_threads() noexcept;
void set_threads(int n) noexcept;

// Multiply-add count above which dispatch uses the parallel kernels.
inline constexpr std::size_t kParallelWorkThreshold = 1u << 16;

}  // namespace dra::kernels
