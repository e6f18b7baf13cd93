#include "dra/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef DRA_HAVE_OPENMP
#include <omp.h>
#endif

namespace dra::kernels {

namespace reference {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> g, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = c[i * n + j];
      for (std::size_t p = 0; p < m; ++p) acc += a[p * k + i] * g[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

void matmul_a_bt_acc(std::span<const double> g, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double acc = c[i * k + j];
      for (std::size_t p = 0; p < n; ++p) acc += g[i * n + p] * b[j * n + p];
      c[i * k + j] = acc;
    }
  }
}

void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* x = in.data() + i * cols;
    double* y = out.data() + i * cols;
    double mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= total;
  }
}

}  // namespace reference

namespace {

// Row loops shared by the parallel and serial-fast paths. Each output entry is
// accumulated over p ascending, the same order as the reference dot products,
// so all three agree bit for bit.
void matmul_rows(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t n, bool parallel) {
  const auto rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (parallel)
  for (long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* ci = c.data() + i * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void at_b_rows(std::span<const double> a, std::span<const double> g, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool parallel) {
  if (!parallel) {
    for (std::size_t p = 0; p < m; ++p) {
      const double* ap = a.data() + p * k;
      const double* gp = g.data() + p * n;
      for (std::size_t i = 0; i < k; ++i) {
        const double av = ap[i];
        double* ci = c.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * gp[j];
      }
    }
    return;
  }
  const auto rows = static_cast<long>(k);
#pragma omp parallel for schedule(static)
  for (long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < m; ++p) {
      const double av = a[p * k + i];
      const double* gp = g.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * gp[j];
    }
  }
}

void a_bt_rows(std::span<const double> g, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool parallel) {
  // Transpose b once so the inner loop runs over contiguous memory.
  std::vector<double> bt(n * k);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t p = 0; p < n; ++p) bt[p * k + j] = b[j * n + p];
  const auto rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (parallel)
  for (long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* gi = g.data() + i * n;
    double* ci = c.data() + i * k;
    for (std::size_t p = 0; p < n; ++p) {
      const double gv = gi[p];
      const double* bp = bt.data() + p * k;
      for (std::size_t j = 0; j < k; ++j) ci[j] += gv * bp[j];
    }
  }
}

}  // namespace

namespace omp {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n) {
  matmul_rows(a, b, c, m, k, n, true);
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> g, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  at_b_rows(a, g, c, m, k, n, true);
}

void matmul_a_bt_acc(std::span<const double> g, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  a_bt_rows(g, b, c, m, k, n, true);
}

void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t rows, std::size_t cols) {
  const auto nrows = static_cast<long>(rows);
#pragma omp parallel for schedule(static)
  for (long ii = 0; ii < nrows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    reference::softmax_rows(in.subspan(i * cols, cols), out.subspan(i * cols, cols), 1, cols);
  }
}

}  // namespace omp

namespace {

bool use_parallel(std::size_t work) noexcept {
#ifdef DRA_HAVE_OPENMP
  return work >= kParallelWorkThreshold && !omp_in_parallel() && omp_get_max_threads() > 1;
#else
  (void)work;
  return false;
#endif
}

}  // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n) {
  matmul_rows(a, b, c, m, k, n, use_parallel(m * k * n));
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> g, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  at_b_rows(a, g, c, m, k, n, use_parallel(m * k * n));
}

void matmul_a_bt_acc(std::span<const double> g, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  a_bt_rows(g, b, c, m, k, n, use_parallel(m * k * n));
}

void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t rows, std::size_t cols) {
  if (use_parallel(rows * cols * 16)) {
    omp::softmax_rows(in, out, rows, cols);
  } else {
    reference::softmax_rows(in, out, rows, cols);
  }
}

bool openmp_available() noexcept {
#ifdef DRA_HAVE_OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() noexcept {
#ifdef DRA_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) noexcept {
#ifdef DRA_HAVE_OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace dra::kernels
