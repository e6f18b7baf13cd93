#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "dra/dra_core.hpp"
#include "dra/grad_check.hpp"
#include "oracles.hpp"

using namespace dra;
using oracle::random_tensor;

namespace {

DraConfig small_config(std::size_t r = 8, std::size_t k = 4, std::vector<double> ratios = {1.0, 0.8, 0.6, 0.4}) {
  DraConfig c;
  c.rank = r;
  c.groups = k;
  c.ratios = std::move(ratios);
  c.scale = 0.5;
  return c;
}

void randomize_up(DraAdapter& a, Rng& rng) {
  for (double& v : a.up.value.storage()) v = rng.uniform(-0.5, 0.5);
}

}  // namespace

TEST_CASE("config validation") {
  DraConfig c;
  CHECK_NOTHROW(c.validate());
  c.ratios = {1.0, 0.8, 0.6};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.ratios = {1.0, 0.9, 0.95, 0.4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.ratios = {1.2, 0.8, 0.6, 0.4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.ratios = {1.0, 0.8, 0.6, 0.0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(4, 2, {1.0, 0.2});  // floor(0.8) = 0
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("retained channels with the default ratios") {
  DraConfig c;
  c.rank = 32;
  CHECK(c.retained_channels() == std::vector<std::size_t>{32, 25, 19, 12});
  c.rank = 100;
  c.ratios = {1.0, 0.29, 0.29, 0.29};
  CHECK(c.retained_channels()[1] == 29);
}

TEST_CASE("down_project") {
  Rng rng(1);
  DraAdapter a = DraAdapter::create("a", 6, small_config(), rng);
  CHECK(down_project(a, Tensor::matrix(5, 6)) == Tensor::matrix(5, 8));
  CHECK_THROWS_AS(down_project(a, Tensor::matrix(5, 7)), DimensionError);
  a.down.value = Tensor::matrix(6, 8);
  CHECK(down_project(a, random_tensor({5, 6}, rng)) == Tensor::matrix(5, 8));
}

TEST_CASE("token importance") {
  Rng rng(2);
  DraConfig c = small_config(1, 1, {1.0});
  DraAdapter a = DraAdapter::create("a", 3, c, rng);
  a.token.value = Tensor::matrix({{1}});
  const Tensor s = token_importance(a, Tensor::matrix({{1}, {0}}));
  // Hand evaluation: rows softmax([1,0]) and softmax([0,0]), averaged.
  const double p = std::exp(1.0) / (std::exp(1.0) + 1.0);
  CHECK(s[0] == doctest::Approx((p + 0.5) / 2).epsilon(1e-12));
  CHECK(s[0] == doctest::Approx(0.6155).epsilon(1e-4));
  CHECK(s[1] == doctest::Approx(0.3845).epsilon(1e-4));

  DraAdapter b = DraAdapter::create("b", 6, small_config(), rng);
  Tensor same = Tensor::matrix(5, 8);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) same.at(i, j) = 0.1 * static_cast<double>(j);
  const Tensor uniform = token_importance(b, same);
  for (double v : uniform.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));

  SUBCASE("matches an independent evaluation and sums to one") {
    for (int trial = 0; trial < 50; ++trial) {
      const double mag = trial % 2 ? 1e3 : 1.0;
      const Tensor xp = random_tensor({9, 8}, rng, -mag, mag);
      const Tensor got = token_importance(b, xp);
      const auto want = oracle::token_scores(xp, b.token.value, 8.0);
      double total = 0.0;
      for (std::size_t i = 0; i < 9; ++i) {
        CHECK(std::abs(got[i] - want[i]) < 1e-9);
        total += got[i];
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
  SUBCASE("attention dimension is configurable") {
    DraConfig cd = small_config();
    cd.attention_scale_dim = 64;
    DraAdapter d = DraAdapter::create("d", 6, cd, rng);
    d.token.value = b.token.value;
    const Tensor xp = random_tensor({4, 8}, rng);
    const auto want = oracle::token_scores(xp, d.token.value, 64.0);
    const Tensor got = token_importance(d, xp);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
  }
}

TEST_CASE("gumbel") {
  CHECK(gumbel_from_uniform(0.5) == doctest::Approx(-std::log(std::log(2.0))).epsilon(1e-15));
  CHECK(std::abs(gumbel_from_uniform(0.5) - 0.36651) < 1e-5);
  CHECK(std::abs(gumbel_from_uniform(std::exp(-1.0))) < 1e-15);
  Rng rng(3);
  const Tensor g = gumbel_sample(rng, 200000);
  double mean = 0.0;
  for (double v : g.data()) {
    CHECK(std::isfinite(v));
    mean += v;
  }
  mean /= static_cast<double>(g.size());
  CHECK(std::abs(mean - 0.5772156649) < 0.01);
}

TEST_CASE("orders") {
  const Tensor a = Tensor::vector({0.1, 0.7, 0.2});
  CHECK(importance_order(a) == Permutation{1, 2, 0});
  CHECK(importance_order(Tensor::vector({0.3, 0.3, 0.3, 0.3})) == Permutation{0, 1, 2, 3});
  const Tensor zero = Tensor::vector({0, 0, 0});
  CHECK(importance_order(a, &zero) == Permutation{1, 2, 0});
  const Tensor flip = Tensor::vector({1.0, 0, 0});
  CHECK(importance_order(a, &flip) == Permutation{0, 1, 2});
  CHECK(channel_order(Tensor::vector({2, 0})) == Permutation{0, 1});
  CHECK(channel_order(Tensor::vector({1, 5, 3})) == Permutation{1, 2, 0});
  CHECK(channel_order(Tensor::vector({1, 1, 0, 1})) == Permutation{0, 1, 3, 2});
  const Tensor shortn = Tensor::vector({0, 0});
  CHECK_THROWS_AS(importance_order(a, &shortn), DimensionError);
}

TEST_CASE("channel response") {
  Rng rng(4);
  DraAdapter a = DraAdapter::create("a", 4, small_config(2, 1, {1.0}), rng);
  a.channel.value = Tensor::identity(2);
  const Tensor ac = channel_response(a, Tensor::matrix({{1, 0}, {3, 0}}));
  CHECK(ac == Tensor::vector({2, 0}));
  a.channel.value = Tensor::matrix({{0, 0}, {0, 0}});
  CHECK(channel_response(a, random_tensor({5, 2}, rng)) == Tensor::vector({0, 0}));
  CHECK_THROWS_AS(channel_response(a, Tensor::matrix(1, 2)), DegenerateInputError);
}

TEST_CASE("group tokens") {
  const Permutation t8{7, 6, 5, 4, 3, 2, 1, 0};
  const TokenGroups g = group_tokens(t8, 8, 4);
  CHECK(g.sizes == std::vector<std::size_t>{2, 2, 2, 2});
  CHECK(g.members[0] == std::vector<std::size_t>{7, 6});
  const TokenGroups g77 = group_tokens(identity_permutation(77), 77, 4);
  CHECK(g77.sizes == std::vector<std::size_t>{20, 19, 19, 19});
  CHECK(group_tokens(t8, 8, 1).members[0].size() == 8);
  CHECK_THROWS_AS(group_tokens(identity_permutation(3), 3, 4), ConfigError);

  SUBCASE("sizes differ by at most one and cover every token") {
    for (std::size_t n = 1; n < 40; ++n)
      for (std::size_t k = 1; k <= n; ++k) {
        const TokenGroups gg = group_tokens(identity_permutation(n), n, k);
        CHECK(std::accumulate(gg.sizes.begin(), gg.sizes.end(), std::size_t{0}) == n);
        CHECK(gg.sizes.front() - gg.sizes.back() <= 1);
        CHECK(std::is_sorted(gg.sizes.rbegin(), gg.sizes.rend()));
      }
  }
}

TEST_CASE("build mask") {
  const DraConfig c = small_config(4, 2, {1.0, 0.5});
  const Permutation order{2, 0, 3, 1};
  const std::vector<std::size_t> sizes{2, 1};
  const ChannelMask m = build_mask(c, order, sizes);
  CHECK(m.group_mask == Tensor::matrix({{1, 1, 1, 1}, {2, 0, 2, 0}}));
  CHECK(m.token_mask == Tensor::matrix({{1, 1, 1, 1}, {1, 1, 1, 1}, {2, 0, 2, 0}}));

  const DraConfig ones = small_config(6, 3, {1.0, 1.0, 1.0});
  const std::vector<std::size_t> s3{1, 1, 1};
  const ChannelMask all = build_mask(ones, Permutation{5, 1, 3, 0, 2, 4}, s3);
  for (double v : all.group_mask.data()) CHECK(v == 1.0);

  SUBCASE("mask mass equals retained / ratio") {
    DraConfig c32;
    c32.rank = 32;
    const std::vector<std::size_t> s4{2, 2, 2, 2};
    Rng rng(5);
    Permutation p = identity_permutation(32);
    rng.shuffle(std::span<std::size_t>(p));
    const ChannelMask mm = build_mask(c32, p, s4);
    const std::vector<double> rescale{1.0, 1.25, 1.0 / 0.6, 2.5};
    for (std::size_t g = 0; g < 4; ++g) {
      double mass = 0.0;
      std::size_t nonzero = 0;
      for (double v : mm.group_mask.row(g)) {
        mass += v;
        if (v != 0.0) {
          ++nonzero;
          CHECK(v == doctest::Approx(rescale[g]).epsilon(1e-12));
        }
      }
      CHECK(nonzero == c32.retained_channels()[g]);
      CHECK(mass == doctest::Approx(static_cast<double>(nonzero) / c32.ratios[g]).epsilon(1e-12));
    }
  }
}

TEST_CASE("rank adapt") {
  Rng rng(6);
  Tape tape;
  const Tensor xp = random_tensor({5, 3}, rng);
  Var v = tape.constant(xp);
  Permutation p = identity_permutation(5);
  for (int trial = 0; trial < 10; ++trial) {
    rng.shuffle(std::span<std::size_t>(p));
    CHECK(tape.value(rank_adapt(v, p, Tensor::matrix(5, 3, 1.0))) == xp);
  }
  Tape t1;
  const Permutation single{0};
  const Tensor out = t1.value(rank_adapt(t1.constant(Tensor::matrix({{3, 5}})), single, Tensor::matrix({{2, 0}})));
  CHECK(out == Tensor::matrix({{6, 0}}));
}

TEST_CASE("routing report is consistent") {
  Rng rng(7);
  DraConfig c = small_config(8, 3, {1.0, 0.5, 0.25});
  DraAdapter a = DraAdapter::create("a", 6, c, rng);
  const Tensor x = random_tensor({10, 6}, rng);
  const Tensor xp = down_project(a, x);
  Rng n1(11), n2(11);
  const RankReport r1 = compute_routing(a, xp, &n1);
  const RankReport r2 = compute_routing(a, xp, &n2);
  CHECK(r1.token_order == r2.token_order);
  CHECK(r1.channel_order == r2.channel_order);
  CHECK(r1.token_mask == r2.token_mask);
  CHECK(r1.group_sizes == std::vector<std::size_t>{4, 3, 3});
  CHECK(r1.channels_retained_per_group == std::vector<std::size_t>{8, 4, 2});
  for (std::size_t i = 0; i < 10; ++i) {
    const std::size_t g = r1.group_of_token[i];
    CHECK(g >= 1);
    CHECK(g <= 3);
  }
  const auto bits = r1.channel_retention_bits();
  CHECK(bits.size() == 8);
  std::size_t in_last = 0;
  for (auto b : bits) {
    CHECK((b & 1u) == 1u);
    in_last += (b >> 2) & 1u;
  }
  CHECK(in_last == 2);

  SUBCASE("channel response off keeps index order") {
    DraAdapter b = a;
    b.config.channel_response = false;
    const RankReport r = compute_routing(b, xp, &n1);
    CHECK(r.channel_order == identity_permutation(8));
    for (std::size_t j = 0; j < 2; ++j) CHECK(r.group_mask.at(2, j) == 4.0);
    for (std::size_t j = 2; j < 8; ++j) CHECK(r.group_mask.at(2, j) == 0.0);
  }
  SUBCASE("null rng is noise-free") {
    const RankReport r = compute_routing(a, xp, nullptr);
    CHECK(r.token_order == importance_order(r.token_scores));
  }
}

TEST_CASE("rank bound on the masked features") {
  Rng rng(8);
  std::size_t violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    DraConfig c = trial % 2 ? small_config(8, 4) : small_config(8, 2, {1.0, 0.25});
    DraAdapter a = DraAdapter::create("a", 12, c, rng);
    Tape tape;
    Var x = tape.constant(random_tensor({16, 12}, rng));
    Var xp = down_project(tape, a, x);
    const RankReport rep = compute_routing(a, tape.value(xp), &rng);
    const Tensor xs = tape.value(rank_adapt(xp, rep.token_order, rep.token_mask));
    for (std::size_t g = 0; g < c.groups; ++g) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < 16; ++i)
        if (rep.group_of_token[i] == g + 1) rows.push_back(i);
      if (oracle::numerical_rank(xs, rows) > c.retained_channels()[g]) ++violations;
    }
    // Multiplying by W_p can only lose rank.
    CHECK(oracle::numerical_rank(matmul(xs, a.proj.value)) <= oracle::numerical_rank(xs));
  }
  CHECK(violations == 0);
}

TEST_CASE("fresh adapter is a no-op on both paths") {
  Rng rng(9);
  DraAdapter a = DraAdapter::create("a", 6, small_config(), rng);
  CHECK(a.up.value == Tensor::matrix(8, 6));
  Tape tape;
  const Tensor op = random_tensor({7, 6}, rng);
  Var x = tape.constant(random_tensor({7, 6}, rng));
  Var o = tape.constant(op);
  CHECK(tape.value(forward_train(tape, a, x, o, rng).output) == op);
  CHECK(tape.value(forward_infer(tape, a, x, o)) == op);

  randomize_up(a, rng);
  a.config.scale = 0.0;
  Tape t2;
  Var x2 = t2.constant(random_tensor({7, 6}, rng));
  CHECK(t2.value(forward_train(t2, a, x2, t2.constant(op), rng).output) == op);
}

TEST_CASE("all-ones ratios make both paths identical") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    DraAdapter a = DraAdapter::create("a", 6, small_config(8, 4, {1.0, 1.0, 1.0, 1.0}), rng);
    randomize_up(a, rng);
    Tape tape;
    Var x = tape.constant(random_tensor({9, 6}, rng));
    Var o = tape.constant(random_tensor({9, 6}, rng));
    Var tr = forward_train(tape, a, x, o, rng).output;
    Var in = forward_infer(tape, a, x, o);
    CHECK(tape.value(tr) == tape.value(in));
    CHECK(tape.value(reg_loss(tr, in))[0] == 0.0);
  }
}

TEST_CASE("reg loss") {
  Tape tape;
  Var a = tape.constant(Tensor::matrix({{1, 2}}));
  Var z = tape.constant(Tensor::matrix({{0, 0}}));
  CHECK(tape.value(reg_loss(a, z))[0] == 3.0);
  CHECK(tape.value(reg_loss(a, a))[0] == 0.0);
  CHECK_THROWS_AS(reg_loss(a, tape.constant(Tensor::matrix(2, 1))), DimensionError);
}

TEST_CASE("training path gradients with frozen routing") {
  Rng rng(12);
  DraAdapter a = DraAdapter::create("a", 6, small_config(), rng);
  randomize_up(a, rng);
  Parameter x("X", random_tensor({10, 6}, rng));
  const Tensor op = random_tensor({10, 6}, rng);
  const RankReport routing = compute_routing(a, down_project(a, x.value), &rng);
  std::vector<Parameter*> inputs{&a.down, &a.token, &a.channel, &a.proj, &a.up, &x};
  const auto res = grad_check(
      [&](Tape& t) { return sum(forward_train(t, a, t.parameter(x), t.constant(op), routing)); }, inputs);
  CHECK(res.max_relative_error < 1e-4);
}

TEST_CASE("rank report csv") {
  Rng rng(13);
  DraAdapter a = DraAdapter::create("a", 6, small_config(4, 2, {1.0, 0.5}), rng);
  const RankReport r = compute_routing(a, down_project(a, random_tensor({3, 6}, rng)), nullptr);
  std::ostringstream os;
  write_rank_report_header(os, "sample");
  write_rank_report_rows(os, r, "0");
  std::string line;
  std::istringstream in(os.str());
  std::getline(in, line);
  CHECK(line == "sample,kind,index,value,group,retained_mask");
  std::size_t tokens = 0, channels = 0;
  while (std::getline(in, line)) {
    if (line.rfind("0,token,", 0) == 0) ++tokens;
    if (line.rfind("0,channel,", 0) == 0) ++channels;
  }
  CHECK(tokens == 3);
  CHECK(channels == 4);
}

TEST_CASE("gumbel noise spreads equal scores evenly over groups") {
  Rng rng(14);
  const std::size_t n = 8, k = 4, trials = 10000;
  const Tensor equal = Tensor::vector(std::vector<double>(n, 0.125));
  std::vector<std::size_t> first(n, 0);
  for (std::size_t t = 0; t < trials; ++t) {
    const Tensor g = gumbel_sample(rng, n);
    const TokenGroups groups = group_tokens(importance_order(equal, &g), n, k);
    for (std::size_t tok : groups.members[0]) ++first[tok];
  }
  const double p = 1.0 / static_cast<double>(k);
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(trials));
  for (std::size_t tok = 0; tok < n; ++tok)
    CHECK(std::abs(static_cast<double>(first[tok]) / trials - p) < 5 * sigma);
}
