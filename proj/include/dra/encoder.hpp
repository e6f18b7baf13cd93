#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dra/dra_core.hpp"

namespace dra {

enum class AdapterKind { kNone, kFixed, kDra };

const char* to_string(AdapterKind k) noexcept;
AdapterKind parse_adapter_kind(const std::string& s);

struct EncoderConfig {
  std::size_t input_dim = 32;  // token feature width, set from the task
  std::size_t d = 64;
  std::size_t n_heads = 4;
  std::size_t layers = 6;
  std::size_t first_dra_layer = 3;  // 1-based; layers + 1 disables adapters
  std::size_t image_tokens = 16;
  std::size_t text_tokens = 16;
  std::size_t embed_dim = 0;  // 0 means d
  DraConfig dra = toy_dra();
  double temperature_init = 0.07;
  AdapterKind image_adapter = AdapterKind::kDra;
  AdapterKind text_adapter = AdapterKind::kDra;

  static DraConfig toy_dra() {
    DraConfig c;
    c.rank = 8;
    return c;
  }
  std::size_t output_dim() const noexcept { return embed_dim ? embed_dim : d; }
  void validate() const;
};

struct AttentionHead {
  Parameter query, key, value, output;  // [d x dh] x3, [dh x d]
};

struct TransformerBlock {
  Parameter ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  std::vector<AttentionHead> heads;
  Parameter ff_in;   // [d x 4d]
  Parameter ff_out;  // [4d x d]
  std::optional<DraAdapter> dra;
  std::optional<FixedAdapter> fixed;

  std::vector<Parameter*> backbone_parameters();
  std::vector<Parameter*> adapter_parameters();
};

struct Branch {
  Parameter embed;     // [input_dim x d]
  Parameter position;  // [seq x d]
  std::optional<Parameter> cls;  // [1 x d], image branch only
  std::vector<TransformerBlock> blocks;
  Parameter ln_gamma, ln_beta;
  Parameter proj;  // [d x embed_dim]
};

enum class Mode { kTrain, kInfer };

// Image/text dual encoder of pre-norm transformer blocks. Adapters wrap each
// attention sublayer from first_dra_layer on; the kind per branch is fixed at
// construction.
class ToyClipModel {
 public:
  static ToyClipModel create(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const noexcept { return config_; }
  Branch& image() noexcept { return image_; }
  Branch& text() noexcept { return text_; }
  Parameter& logit_scale() noexcept { return logit_scale_; }
  const Parameter& logit_scale() const noexcept { return logit_scale_; }
  double temperature() const;
  // Keeps the temperature at or above 0.01.
  void clamp_temperature();

  std::vector<Parameter*> parameters();
  std::vector<Parameter*> backbone_parameters();
  std::vector<Parameter*> adapter_parameters();
  Parameter* find(const std::string& name);

  // Only adapter weights train; everything else is frozen.
  void freeze_backbone();
  void set_all_trainable(bool trainable);
  void zero_grad();

 private:
  EncoderConfig config_;
  Branch image_;
  Branch text_;
  Parameter logit_scale_;
};

// Copies every backbone weight from src into dst; shapes must agree.
void copy_backbone(ToyClipModel& src, ToyClipModel& dst);

struct LayerReport {
  std::size_t layer = 0;  // 1-based
  RankReport report;
};

struct BlockResult {
  Var output;
  std::optional<Var> reg;
  std::optional<RankReport> report;
};

// rng is required in train mode when the block carries a DRA adapter with
// gumbel enabled. collect_report computes noise-free routing in infer mode.
BlockResult block_forward(Tape& tape, TransformerBlock& block, Var x, Mode mode, Rng* rng,
                          bool collect_report = false);

struct EncodeOptions {
  Mode mode = Mode::kInfer;
  Rng* rng = nullptr;
  bool collect_reports = false;
};

struct Encoded {
  Var embedding;           // [1 x embed_dim], unit norm
  std::optional<Var> reg;  // sum of reg losses over adapted layers (train mode)
  std::vector<LayerReport> reports;
};

Encoded encode_image(Tape& tape, ToyClipModel& model, const Tensor& tokens, const EncodeOptions& options = {});
Encoded encode_text(Tape& tape, ToyClipModel& model, const Tensor& tokens, const EncodeOptions& options = {});

// Inference-mode embeddings as plain values.
Tensor embed_image(ToyClipModel& model, const Tensor& tokens);
Tensor embed_text(ToyClipModel& model, const Tensor& tokens);

// Class probabilities from cosine similarity over temperature.
Tensor class_probabilities(const Tensor& image_embedding, const Tensor& class_embeddings, double temperature);
Tensor logits(const ToyClipModel& model, const Tensor& image_embedding, const Tensor& class_embeddings);

struct Batch {
  std::vector<const Tensor*> images;
  std::vector<std::size_t> labels;  // index into prompts
  std::vector<const Tensor*> prompts;
};

struct LossOptions {
  double lambda_text = 1.0;
  double lambda_image = 1.0;
  Mode mode = Mode::kTrain;
  std::uint64_t noise_seed = 0;
  bool backward = true;
  Precision precision = Precision::kDouble;
};

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double reg_text = 0.0;   // mean over prompts of the per-sequence sum
  double reg_image = 0.0;  // mean over images of the per-sequence sum
};

// Cross-entropy plus weighted reg terms for one batch. With backward set,
// parameter gradients are accumulated into Parameter::grad.
//
// Each sequence runs on its own tape (in parallel when OpenMP is enabled);
// gradients are merged in a fixed order, so results do not depend on the
// thread count.
LossBreakdown total_loss(ToyClipModel& model, const Batch& batch, const LossOptions& options);

}  // namespace dra
