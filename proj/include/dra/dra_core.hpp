#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "dra/ops.hpp"
#include "dra/rng.hpp"
#include "dra/tape.hpp"

namespace dra {

// Configuration of one dynamic rank adapter.
struct DraConfig {
  std::size_t rank = 32;                              // intermediate width r
  std::size_t groups = 4;                             // K
  std::vector<double> ratios{1.0, 0.8, 0.6, 0.4};     // e_1..e_K, non-increasing
  double scale = 0.001;                               // residual scale s
  std::size_t attention_scale_dim = 0;                // 0 means "use rank"
  bool gumbel = true;                                 // perturb sort keys while training
  bool channel_response = true;                       // false: keep channels in index order

  // Throws ConfigError naming the offending field.
  void validate() const;
  std::size_t attention_dim() const noexcept { return attention_scale_dim ? attention_scale_dim : rank; }
  // floor(e_i * r) for every group.
  std::vector<std::size_t> retained_channels() const;
};

std::size_t retained_count(double ratio, std::size_t rank) noexcept;

// Learnable weights of one adapter. W_u starts at zero, so a fresh adapter
// adds nothing to the wrapped module's output on either path.
struct DraAdapter {
  Parameter down;     // W_d [d x r]
  Parameter token;    // W_t [r x r]
  Parameter channel;  // W_c [r x r]
  Parameter proj;     // W_p [r x r]
  Parameter up;       // W_u [r x d]
  DraConfig config;

  static DraAdapter create(const std::string& prefix, std::size_t model_dim, const DraConfig& config, Rng& rng);

  std::size_t model_dim() const noexcept { return down.value.rows(); }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
};

// The fixed-rank residual adapter used as the comparison baseline:
// OP(X) + s * relu(relu(X W_d) W_u).
struct FixedAdapter {
  Parameter down;  // [d x r]
  Parameter up;    // [r x d]
  double scale = 0.001;

  static FixedAdapter create(const std::string& prefix, std::size_t model_dim, std::size_t rank, double scale,
                             Rng& rng);
  std::vector<Parameter*> parameters();
};

Var forward(Tape& tape, FixedAdapter& adapter, Var x, Var op_out);

// Everything the routing step decided for one sequence.
struct RankReport {
  Tensor token_scores;                  // a_t [N]
  Permutation token_order;              // t, most important first
  std::vector<std::size_t> group_of_token;  // 1..K, indexed by original token position
  std::vector<std::size_t> group_sizes;
  Tensor channel_scores;                // a_c [r]
  Permutation channel_order;            // c, highest response first
  std::vector<std::size_t> channels_retained_per_group;
  Tensor group_mask;                    // M  [K x r]
  Tensor token_mask;                    // M' [N x r], rows in sorted-token order

  // Bit i set when the channel survives in group i+1.
  std::vector<std::uint32_t> channel_retention_bits() const;
};

// --- scoring, ordering and grouping (non-differentiable) ---------------------

Tensor token_importance(const DraAdapter& adapter, const Tensor& projected);
Tensor channel_response(const DraAdapter& adapter, const Tensor& projected);

double gumbel_from_uniform(double u);
Tensor gumbel_sample(Rng& rng, std::size_t n);

// Indices sorted by score + noise, descending; ties keep ascending index.
Permutation importance_order(const Tensor& scores, const Tensor* noise = nullptr);
Permutation channel_order(const Tensor& scores, const Tensor* noise = nullptr);

struct TokenGroups {
  std::vector<std::size_t> sizes;
  std::vector<std::vector<std::size_t>> members;
};
// Contiguous slices of the order; the first N mod K groups get one extra.
TokenGroups group_tokens(std::span<const std::size_t> order, std::size_t n_tokens, std::size_t n_groups);

struct ChannelMask {
  Tensor group_mask;  // [K x r]
  Tensor token_mask;  // [N x r]
};
ChannelMask build_mask(const DraConfig& config, std::span<const std::size_t> channel_order,
                       std::span<const std::size_t> group_sizes);

// Full routing decision from the projected features X'. Pass a null rng for
// deterministic (noise-free) routing.
RankReport compute_routing(const DraAdapter& adapter, const Tensor& projected, Rng* rng);

// --- differentiable pieces ---------------------------------------------------

Var down_project(Tape& tape, DraAdapter& adapter, Var x);
Tensor down_project(const DraAdapter& adapter, const Tensor& x);

// Sort rows by t, apply M', restore the original row order.
Var rank_adapt(Var projected, std::span<const std::size_t> token_order, const Tensor& token_mask);

struct TrainForward {
  Var output;
  RankReport report;
};

// Training path. Routing noise is drawn from rng when config.gumbel is set.
TrainForward forward_train(Tape& tape, DraAdapter& adapter, Var x, Var op_out, Rng& rng);
// Training path with a precomputed routing, treated as constant.
Var forward_train(Tape& tape, DraAdapter& adapter, Var x, Var op_out, const RankReport& routing);
// Inference path: plain projections, no routing.
Var forward_infer(Tape& tape, DraAdapter& adapter, Var x, Var op_out);

// Sum of absolute differences over all entries.
Var reg_loss(Var train_out, Var infer_out);

// --- serialization -----------------------------------------------------------

void write_rank_report_header(std::ostream& os, std::string_view context_columns);
// One row per token (kind=token) then one per channel (kind=channel). The
// context string is emitted verbatim as the leading columns of every row.
void write_rank_report_rows(std::ostream& os, const RankReport& report, std::string_view context);

}  // namespace dra
