#include "dra/dra_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace dra {

std::size_t retained_count(double ratio, std::size_t rank) noexcept {
  // The small slack absorbs representation error such as 0.29 * 100.
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(rank) + 1e-9));
}

void DraConfig::validate() const {
  if (rank < 1) throw ConfigError("dra.r: must be >= 1");
  if (groups < 1) throw ConfigError("dra.K: must be >= 1");
  if (ratios.size() != groups) {
    throw ConfigError("dra.ratios: expected " + std::to_string(groups) + " entries (dra.K), got " +
                      std::to_string(ratios.size()));
  }
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double e = ratios[i];
    if (!(e > 0.0 && e <= 1.0)) {
      throw ConfigError("dra.ratios[" + std::to_string(i) + "]: " + std::to_string(e) + " is outside (0, 1]");
    }
    if (i > 0 && e > ratios[i - 1]) throw ConfigError("dra.ratios: must be non-increasing");
  }
  if (retained_count(ratios.back(), rank) < 1) {
    throw ConfigError("dra.ratios: floor(e_K * r) is 0, the last group would keep no channels");
  }
  if (!(scale >= 0.0) || !std::isfinite(scale)) throw ConfigError("dra.s: must be a finite non-negative number");
}

std::vector<std::size_t> DraConfig::retained_channels() const {
  std::vector<std::size_t> out;
  out.reserve(ratios.size());
  for (double e : ratios) out.push_back(retained_count(e, rank));
  return out;
}

namespace {

Tensor uniform_init(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor w = Tensor::matrix(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  for (double& x : w.storage()) x = rng.uniform(-bound, bound);
  return w;
}

}  // namespace

DraAdapter DraAdapter::create(const std::string& prefix, std::size_t model_dim, const DraConfig& config, Rng& rng) {
  config.validate();
  const std::size_t r = config.rank;
  DraAdapter a;
  a.config = config;
  a.down = Parameter(prefix + ".W_d", uniform_init(rng, model_dim, r));
  a.token = Parameter(prefix + ".W_t", uniform_init(rng, r, r));
  a.channel = Parameter(prefix + ".W_c", uniform_init(rng, r, r));
  a.proj = Parameter(prefix + ".W_p", uniform_init(rng, r, r));
  a.up = Parameter(prefix + ".W_u", Tensor::matrix(r, model_dim));
  return a;
}

std::vector<Parameter*> DraAdapter::parameters() { return {&down, &token, &channel, &proj, &up}; }

std::vector<const Parameter*> DraAdapter::parameters() const { return {&down, &token, &channel, &proj, &up}; }

FixedAdapter FixedAdapter::create(const std::string& prefix, std::size_t model_dim, std::size_t rank, double scale,
                                  Rng& rng) {
  if (rank < 1) throw ConfigError("adapter rank must be >= 1");
  FixedAdapter a;
  a.down = Parameter(prefix + ".W_d", uniform_init(rng, model_dim, rank));
  a.up = Parameter(prefix + ".W_u", Tensor::matrix(rank, model_dim));
  a.scale = scale;
  return a;
}

std::vector<Parameter*> FixedAdapter::parameters() { return {&down, &up}; }

Var forward(Tape& tape, FixedAdapter& adapter, Var x, Var op_out) {
  Var h = relu(matmul(x, tape.parameter(adapter.down)));
  Var y = relu(matmul(h, tape.parameter(adapter.up)), 1.0);
  return add(op_out, scale(y, adapter.scale));
}

std::vector<std::uint32_t> RankReport::channel_retention_bits() const {
  const std::size_t r = group_mask.cols();
  std::vector<std::uint32_t> bits(r, 0);
  for (std::size_t g = 0; g < group_mask.rows(); ++g)
    for (std::size_t j = 0; j < r; ++j)
      if (group_mask.at(g, j) != 0.0) bits[j] |= (1u << g);
  return bits;
}

// ---------------------------------------------------------------- scoring

Tensor down_project(const DraAdapter& adapter, const Tensor& x) {
  if (x.cols() != adapter.model_dim()) {
    throw DimensionError("down_project: input " + to_string(x.shape()) + " vs adapter width " +
                         std::to_string(adapter.model_dim()));
  }
  Tensor h = matmul(x, adapter.down.value);
  for (double& v : h.storage()) v = v > 0.0 ? v : 0.0;
  return h;
}

Tensor token_importance(const DraAdapter& adapter, const Tensor& projected) {
  const Tensor q = matmul(projected, adapter.token.value);
  Tensor logits = matmul(q, transpose(q));
  const double inv = 1.0 / std::sqrt(static_cast<double>(adapter.config.attention_dim()));
  for (double& v : logits.storage()) v *= inv;
  const Tensor attn = softmax_rows(logits);
  const std::size_t n = attn.rows();
  Tensor scores({n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) scores[j] += attn.at(i, j);
  for (double& v : scores.storage()) v /= static_cast<double>(n);
  return scores;
}

Tensor channel_response(const DraAdapter& adapter, const Tensor& projected) {
  return variance_cols(matmul(projected, adapter.channel.value));
}

double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

Tensor gumbel_sample(Rng& rng, std::size_t n) {
  Tensor g({n});
  for (double& v : g.storage()) v = gumbel_from_uniform(rng.uniform_open());
  return g;
}

Permutation importance_order(const Tensor& scores, const Tensor* noise) {
  const std::size_t n = scores.size();
  if (noise && noise->size() != n) {
    throw DimensionError("importance_order: " + std::to_string(n) + " scores but " + std::to_string(noise->size()) +
                         " noise values");
  }
  std::vector<double> key(scores.data().begin(), scores.data().end());
  if (noise)
    for (std::size_t i = 0; i < n; ++i) key[i] += (*noise)[i];
  Permutation order = identity_permutation(n);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
  return order;
}

Permutation channel_order(const Tensor& scores, const Tensor* noise) { return importance_order(scores, noise); }

TokenGroups group_tokens(std::span<const std::size_t> order, std::size_t n_tokens, std::size_t n_groups) {
  if (n_groups == 0) throw ConfigError("group_tokens: K must be >= 1");
  if (n_groups > n_tokens) {
    throw ConfigError("group_tokens: K = " + std::to_string(n_groups) + " exceeds sequence length " +
                      std::to_string(n_tokens));
  }
  validate_permutation(order, n_tokens);
  TokenGroups groups;
  const std::size_t base = n_tokens / n_groups;
  const std::size_t extra = n_tokens % n_groups;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::size_t size = base + (g < extra ? 1 : 0);
    groups.sizes.push_back(size);
    groups.members.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  return groups;
}

ChannelMask build_mask(const DraConfig& config, std::span<const std::size_t> channel_order,
                       std::span<const std::size_t> group_sizes) {
  const std::size_t r = config.rank;
  const std::size_t k = config.groups;
  if (channel_order.size() != r) throw DimensionError("build_mask: channel order length differs from r");
  if (group_sizes.size() != k) throw DimensionError("build_mask: group count differs from K");
  validate_permutation(channel_order, r);

  ChannelMask mask;
  mask.group_mask = Tensor::matrix(k, r);
  for (std::size_t g = 0; g < k; ++g) {
    const std::size_t keep = retained_count(config.ratios[g], r);
    if (keep == 0) throw ConfigError("build_mask: group " + std::to_string(g + 1) + " retains no channels");
    const double value = 1.0 / config.ratios[g];
    for (std::size_t j = 0; j < keep; ++j) mask.group_mask.at(g, channel_order[j]) = value;
  }
  const std::size_t n = std::accumulate(group_sizes.begin(), group_sizes.end(), std::size_t{0});
  mask.token_mask = Tensor::matrix(n, r);
  std::size_t row = 0;
  for (std::size_t g = 0; g < k; ++g) {
    for (std::size_t i = 0; i < group_sizes[g]; ++i, ++row) {
      std::copy(mask.group_mask.row(g).begin(), mask.group_mask.row(g).end(), mask.token_mask.row(row).begin());
    }
  }
  return mask;
}

RankReport compute_routing(const DraAdapter& adapter, const Tensor& projected, Rng* rng) {
  const DraConfig& cfg = adapter.config;
  const std::size_t n = projected.rows();
  const std::size_t r = cfg.rank;
  if (projected.cols() != r) throw DimensionError("compute_routing: features are not r wide");

  RankReport rep;
  rep.token_scores = token_importance(adapter, projected);
  if (rng && cfg.gumbel) {
    const Tensor g = gumbel_sample(*rng, n);
    rep.token_order = importance_order(rep.token_scores, &g);
  } else {
    rep.token_order = importance_order(rep.token_scores);
  }

  if (cfg.channel_response) {
    rep.channel_scores = channel_response(adapter, projected);
    if (rng && cfg.gumbel) {
      const Tensor g = gumbel_sample(*rng, r);
      rep.channel_order = channel_order(rep.channel_scores, &g);
    } else {
      rep.channel_order = channel_order(rep.channel_scores);
    }
  } else {
    rep.channel_scores = Tensor({r});
    rep.channel_order = identity_permutation(r);
  }

  const TokenGroups groups = group_tokens(rep.token_order, n, cfg.groups);
  rep.group_sizes = groups.sizes;
  rep.group_of_token.assign(n, 0);
  for (std::size_t g = 0; g < groups.members.size(); ++g)
    for (std::size_t tok : groups.members[g]) rep.group_of_token[tok] = g + 1;

  ChannelMask mask = build_mask(cfg, rep.channel_order, rep.group_sizes);
  rep.group_mask = std::move(mask.group_mask);
  rep.token_mask = std::move(mask.token_mask);
  rep.channels_retained_per_group = cfg.retained_channels();
  return rep;
}

// ---------------------------------------------------------------- tape paths

Var down_project(Tape& tape, DraAdapter& adapter, Var x) {
  if (x.cols() != adapter.model_dim()) {
    throw DimensionError("down_project: input " + to_string(x.shape()) + " vs adapter width " +
                         std::to_string(adapter.model_dim()));
  }
  return relu(matmul(x, tape.parameter(adapter.down)));
}

Var rank_adapt(Var projected, std::span<const std::size_t> token_order, const Tensor& token_mask) {
  Tape& tape = *projected.tape();
  Var sorted = gather_rows(projected, token_order);
  Var masked = mul(sorted, tape.constant(token_mask));
  const Permutation restore = inverse(token_order);
  return gather_rows(masked, restore);
}

namespace {

Var up_path(Tape& tape, DraAdapter& adapter, Var features, Var op_out) {
  Var h = relu(matmul(features, tape.parameter(adapter.proj)));
  Var y = relu(matmul(h, tape.parameter(adapter.up)), 1.0);
  return add(op_out, scale(y, adapter.config.scale));
}

}  // namespace

TrainForward forward_train(Tape& tape, DraAdapter& adapter, Var x, Var op_out, Rng& rng) {
  Var projected = down_project(tape, adapter, x);
  TrainForward out;
  out.report = compute_routing(adapter, tape.value(projected), &rng);
  Var adapted = rank_adapt(projected, out.report.token_order, out.report.token_mask);
  out.output = up_path(tape, adapter, adapted, op_out);
  return out;
}

Var forward_train(Tape& tape, DraAdapter& adapter, Var x, Var op_out, const RankReport& routing) {
  Var projected = down_project(tape, adapter, x);
  if (routing.token_mask.rows() != projected.rows() || routing.token_mask.cols() != projected.cols()) {
    throw DimensionError("forward_train: routing mask " + to_string(routing.token_mask.shape()) +
                         " does not match features " + to_string(projected.shape()));
  }
  Var adapted = rank_adapt(projected, routing.token_order, routing.token_mask);
  return up_path(tape, adapter, adapted, op_out);
}

Var forward_infer(Tape& tape, DraAdapter& adapter, Var x, Var op_out) {
  return up_path(tape, adapter, down_project(tape, adapter, x), op_out);
}

Var reg_loss(Var train_out, Var infer_out) { return sum(abs(sub(train_out, infer_out))); }

// ---------------------------------------------------------------- csv

void write_rank_report_header(std::ostream& os, std::string_view context_columns) {
  os << context_columns;
  if (!context_columns.empty()) os << ',';
  os << "kind,index,value,group,retained_mask\n";
}

void write_rank_report_rows(std::ostream& os, const RankReport& report, std::string_view context) {
  const std::string lead = context.empty() ? std::string() : std::string(context) + ",";
  const auto old_precision = os.precision(17);
  for (std::size_t i = 0; i < report.token_scores.size(); ++i) {
    os << lead << "token," << i << ',' << report.token_scores[i] << ',' << report.group_of_token[i] << ",\n";
  }
  const auto bits = report.channel_retention_bits();
  for (std::size_t j = 0; j < bits.size(); ++j) {
    os << lead << "channel," << j << ',' << report.channel_scores[j] << ",," << bits[j] << '\n';
  }
  os.precision(old_precision);
}

}  // namespace dra
