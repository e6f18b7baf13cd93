#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "dra/grad_check.hpp"
#include "dra/kernels.hpp"
#include "dra/ops.hpp"
#include "dra/rng.hpp"

using namespace dra;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-2.0, 2.0);
  return v;
}

// Textbook triple loop, written independently of the library kernels.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

}  // namespace

TEST_CASE("matmul closed-form examples") {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(matmul(a, Tensor::identity(2)) == a);
  const Tensor z = matmul(Tensor::matrix({{1, 0}}), Tensor::matrix({{0}, {5}}));
  CHECK(z.rows() == 1);
  CHECK(z.cols() == 1);
  CHECK(z[0] == 0.0);
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  try {
    matmul(Tensor::matrix(2, 3), Tensor::matrix(2, 3));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("kernels: reference, omp and dispatch agree bitwise") {
  Rng rng(5);
  // Second shape crosses the parallel work threshold.
  for (auto [m, k, n] : std::vector<std::array<std::size_t, 3>>{{3, 4, 5}, {70, 40, 30}, {1, 64, 1}}) {
    const auto a = random_vec(m * k, rng), b = random_vec(k * n, rng), g = random_vec(m * n, rng);
    const auto oracle = naive_matmul(a, b, m, k, n);
    std::vector<double> c1(m * n), c2(m * n), c3(m * n);
    kernels::reference::matmul(a, b, c1, m, k, n);
    kernels::omp::matmul(a, b, c2, m, k, n);
    kernels::matmul(a, b, c3, m, k, n);
    CHECK(c1 == oracle);
    CHECK(c1 == c2);
    CHECK(c1 == c3);

    std::vector<double> d1(k * n, 0.5), d2(k * n, 0.5), d3(k * n, 0.5);
    kernels::reference::matmul_at_b_acc(a, g, d1, m, k, n);
    kernels::omp::matmul_at_b_acc(a, g, d2, m, k, n);
    kernels::matmul_at_b_acc(a, g, d3, m, k, n);
    CHECK(d1 == d2);
    CHECK(d1 == d3);

    std::vector<double> e1(m * k, -0.25), e2(m * k, -0.25), e3(m * k, -0.25);
    kernels::reference::matmul_a_bt_acc(g, b, e1, m, k, n);
    kernels::omp::matmul_a_bt_acc(g, b, e2, m, k, n);
    kernels::matmul_a_bt_acc(g, b, e3, m, k, n);
    CHECK(e1 == e2);
    CHECK(e1 == e3);

    std::vector<double> s1(m * n), s2(m * n);
    kernels::reference::softmax_rows(g, s1, m, n);
    kernels::omp::softmax_rows(g, s2, m, n);
    CHECK(s1 == s2);
  }
}

TEST_CASE("softmax_rows") {
  const Tensor u = softmax_rows(Tensor::matrix({{2, 2, 2, 2}}));
  for (std::size_t j = 0; j < 4; ++j) CHECK(u[j] == doctest::Approx(0.25).epsilon(1e-15));
  const Tensor c = softmax_rows(Tensor::matrix({{0.0, std::log(3.0)}}));
  CHECK(c[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(c[1] == doctest::Approx(0.75).epsilon(1e-12));
  const Tensor big = softmax_rows(Tensor::matrix({{1000.0, 0.0}}));
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);

  SUBCASE("rows sum to one for magnitudes up to 1e3") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
      const double mag = trial < 100 ? 1.0 : 1e3;
      const Tensor s = softmax_rows(random_tensor({5, 9}, rng, -mag, mag));
      for (std::size_t i = 0; i < 5; ++i) {
        double total = 0.0;
        for (double v : s.row(i)) {
          CHECK(v >= 0.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-9);
      }
    }
  }
  SUBCASE("NaN input is a numeric error") {
    Tensor t = Tensor::matrix({{0.0, std::numeric_limits<double>::quiet_NaN()}});
    CHECK_THROWS_AS(softmax_rows(t), NumericError);
    Tape tape;
    CHECK_THROWS_AS(softmax_rows(tape.constant(t)), NumericError);
  }
}

TEST_CASE("relu forward and kink") {
  Tape tape;
  Var x = tape.variable(Tensor::vector({-1, 0, 2}));
  Var y = relu(x);
  CHECK(tape.value(y) == Tensor::vector({0, 0, 2}));
  tape.backward(sum(y));
  CHECK(*tape.grad(x) == Tensor::vector({0, 0, 1}));

  Tape t2;
  Var x2 = t2.variable(Tensor::vector({-1, 0, 2}));
  t2.backward(sum(relu(x2, 1.0)));
  CHECK(*t2.grad(x2) == Tensor::vector({0, 1, 1}));

  Tape t3;
  const Tensor neg = Tensor::vector({-3, -0.5, -1e-9});
  CHECK(t3.value(relu(t3.constant(neg))) == Tensor::vector({0, 0, 0}));
}

TEST_CASE("variance_cols") {
  CHECK(variance_cols(Tensor::matrix({{4, 1}, {4, 3}}))[0] == 0.0);
  CHECK(variance_cols(Tensor::matrix({{4, 1}, {4, 3}}))[1] == doctest::Approx(2.0).epsilon(1e-15));
  Rng rng(9);
  const Tensor a = random_tensor({8, 4}, rng);
  const Tensor v = variance_cols(a);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 8; ++i) mean += a.at(i, j);
    mean /= 8.0;
    double ss = 0.0;
    for (std::size_t i = 0; i < 8; ++i) ss += (a.at(i, j) - mean) * (a.at(i, j) - mean);
    CHECK(std::abs(v[j] - ss / 7.0) < 1e-12);
    CHECK(v[j] >= 0.0);
  }
  CHECK_THROWS_AS(variance_cols(Tensor::matrix(1, 3)), DegenerateInputError);
}

TEST_CASE("gather_rows and permutations") {
  const Tensor x = Tensor::matrix({{1, 1}, {2, 2}, {3, 3}});
  CHECK(gather_rows(x, identity_permutation(3)) == x);
  const Permutation p{2, 0, 1};
  CHECK(gather_rows(x, p) == Tensor::matrix({{3, 3}, {1, 1}, {2, 2}}));
  Rng rng(3);
  const Tensor r = random_tensor({6, 3}, rng);
  std::vector<std::size_t> q = identity_permutation(6);
  rng.shuffle(std::span<std::size_t>(q));
  CHECK(gather_rows(gather_rows(r, q), inverse(q)) == r);
  const std::vector<std::size_t> dup{0, 0, 1};
  CHECK_THROWS_AS(gather_rows(x, dup), PermutationError);
  const std::vector<std::size_t> out_of_range{0, 1, 3};
  CHECK_THROWS_AS(validate_permutation(out_of_range, 3), PermutationError);
  const std::vector<std::size_t> short_perm{0, 1};
  CHECK_THROWS(gather_rows(x, short_perm));

  SUBCASE("gradient scatters through the inverse") {
    Tape tape;
    Var v = tape.variable(x);
    Var g = gather_rows(v, p);
    tape.backward(sum(mul(g, tape.constant(Tensor::matrix({{10, 10}, {20, 20}, {30, 30}})))));
    CHECK(*tape.grad(v) == Tensor::matrix({{20, 20}, {30, 30}, {10, 10}}));
  }
}

TEST_CASE("elementwise shape contracts") {
  Tape tape;
  Var a = tape.variable(Tensor::matrix(2, 3));
  Var b = tape.variable(Tensor::matrix(3, 2));
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(mul(a, b), DimensionError);
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("grad_check contract examples") {
  Rng rng(21);
  Parameter a("a", random_tensor({3, 4}, rng));
  Parameter b("b", random_tensor({3, 4}, rng));
  std::vector<Parameter*> inputs{&a};
  const auto r = grad_check([&](Tape& t) { return sum(t.parameter(a)); }, inputs);
  CHECK(r.max_relative_error < 1e-10);

  // L1 distance with entries kept at least 1e-2 apart.
  for (std::size_t i = 0; i < a.value.size(); ++i)
    if (std::abs(a.value[i] - b.value[i]) < 1e-2) b.value[i] = a.value[i] + 0.05;
  std::vector<Parameter*> both{&a, &b};
  const auto l1 =
      grad_check([&](Tape& t) { return sum(abs(sub(t.parameter(a), t.parameter(b)))); }, both);
  CHECK(l1.max_relative_error < 1e-6);

  CHECK_THROWS_AS(grad_check([&](Tape& t) { return t.parameter(a); }, inputs), ContractError);

  const bool before = b.trainable = false;
  grad_check([&](Tape& t) { return sum(mul(t.parameter(a), t.parameter(b))); }, both);
  CHECK(b.trainable == before);
}

TEST_CASE("three-op compositions pass grad_check") {
  Rng rng(22);
  Parameter x("x", random_tensor({4, 5}, rng));
  Parameter w("w", random_tensor({5, 3}, rng));
  Parameter g("g", random_tensor({3}, rng, 0.5, 1.5));
  Parameter bt("b", random_tensor({3}, rng));
  std::vector<Parameter*> in{&x, &w, &g, &bt};
  // Rows of a softmax sum to one, so weight them or the gradient vanishes.
  const Tensor weights = random_tensor({4, 3}, rng);
  const auto r1 = grad_check(
      [&](Tape& t) {
        Var h = layer_norm_rows(matmul(t.parameter(x), t.parameter(w)), t.parameter(g), t.parameter(bt));
        return sum(mul(softmax_rows(h), t.constant(weights)));
      },
      in);
  CHECK(r1.max_relative_error < 1e-6);
  std::vector<Parameter*> in2{&x, &w};
  const auto r2 = grad_check(
      [&](Tape& t) {
        Var h = matmul(t.parameter(x), t.parameter(w));
        return sum(mul(variance_cols(h), mean_cols(exp(scale(h, 0.3)))));
      },
      in2);
  CHECK(r2.max_relative_error < 1e-6);
  const auto r3 = grad_check(
      [&](Tape& t) {
        Var h = l2_normalize_rows(matmul(t.parameter(x), t.parameter(w)));
        return sum(mul(mean_rows(h), mean_rows(log(add(exp(h), exp(h))))));
      },
      in2);
  CHECK(r3.max_relative_error < 1e-6);
}

TEST_CASE("backward visits each recorded op once and skips constants") {
  Tape tape;
  Var c = tape.constant(Tensor::matrix({{1, 2}}));
  Var v = tape.variable(Tensor::matrix({{3, 4}}));
  Var unused = exp(c);
  (void)unused;
  Var y = sum(mul(v, c));
  tape.backward(y);
  // mul and sum require grad, exp(c) does not.
  CHECK(tape.backward_visits() == 2);
  CHECK(*tape.grad(v) == Tensor::matrix({{1, 2}}));
  CHECK(tape.grad(c) == nullptr);
}

TEST_CASE("gradients have the shape of their tensors") {
  Rng rng(2);
  Parameter w("w", random_tensor({3, 2}, rng));
  Tape tape;
  Var x = tape.constant(random_tensor({4, 3}, rng));
  tape.backward(sum(relu(matmul(x, tape.parameter(w)))));
  tape.export_parameter_grads();
  CHECK(w.grad.shape() == w.value.shape());
}

TEST_CASE("single precision rounds every produced value") {
  Tape tape(Precision::kSingle);
  Var a = tape.variable(Tensor::vector({0.1, 1.0 / 3.0}));
  Var b = scale(a, 3.0);
  for (double v : tape.value(b).data()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
  for (double v : tape.value(a).data()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
  CHECK(parse_precision("single") == Precision::kSingle);
  CHECK_THROWS_AS(parse_precision("half"), ConfigError);
}

TEST_CASE("concat and slice rows round trip") {
  Tape tape;
  const Tensor x = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  Var v = tape.variable(x);
  const Var parts[] = {slice_rows(v, 0, 1), slice_rows(v, 1, 2)};
  CHECK(tape.value(concat_rows(parts)) == x);
  CHECK_THROWS_AS(slice_rows(v, 2, 2), DimensionError);
}

TEST_CASE("cross entropy closed form") {
  Tape tape;
  Var z = tape.constant(Tensor::matrix({{0, 0, 0}, {5, 5, 5}}));
  const std::vector<std::size_t> labels{0, 2};
  CHECK(tape.value(cross_entropy(z, labels))[0] == doctest::Approx(std::log(3.0)).epsilon(1e-14));
}
