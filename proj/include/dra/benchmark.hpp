#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "dra/encoder.hpp"

namespace dra {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- task

// Parameters of the synthetic base/new task.
//
// Every class is a latent vector z. Image foreground tokens are
// z plus noise, background tokens are pure noise. A prompt is a fixed
// template, then one keyword token (a fixed rotation of z), then padding.
struct SyntheticTaskSpec {
  std::size_t n_classes = 20;
  double base_fraction = 0.5;
  std::size_t shots = 16;
  std::size_t test_per_class = 20;
  std::size_t image_tokens = 16;
  std::size_t n_foreground = 4;
  std::size_t text_tokens = 16;
  std::size_t template_length = 4;  // keyword sits right after the template
  std::size_t feature_dim = 32;
  double noise = 0.3;             // foreground jitter
  double background_scale = 1.0;  // std of background tokens
  double shift = 0.0;             // downstream images only: offset along world.style
  std::uint64_t world_seed = 7;   // template, padding and text rotation
  std::uint64_t seed = 1;         // classes, split and samples

  void validate() const;
  std::size_t keyword_position() const noexcept { return template_length; }
  std::size_t n_base() const;
};

// Fixed ingredients shared by all classes of one task seed.
struct TaskWorld {
  Tensor text_rotation;  // [F x F] orthogonal
  Tensor template_tokens;  // [template_length x F]
  Tensor pad_token;        // [F]
  Tensor style;            // [F] unit vector
};

struct ImageSample {
  Tensor tokens;  // [M x F]
  std::size_t label = 0;  // global class id
  std::vector<std::size_t> foreground;  // token positions, ascending
};

struct SyntheticDataset {
  SyntheticTaskSpec spec;
  TaskWorld world;
  std::vector<Tensor> concepts;  // per class [F]
  std::vector<Tensor> prompts;   // per class [N_text x F]
  std::vector<std::size_t> base_classes;
  std::vector<std::size_t> new_classes;
  std::vector<ImageSample> train;
  std::vector<ImageSample> test_base;
  std::vector<ImageSample> test_new;
};

TaskWorld make_world(const SyntheticTaskSpec& spec);
Tensor sample_concept(const SyntheticTaskSpec& spec, Rng& rng);
ImageSample sample_image(const SyntheticTaskSpec& spec, const Tensor& latent, std::size_t label, Rng& rng);
Tensor make_prompt(const SyntheticTaskSpec& spec, const TaskWorld& world, const Tensor& latent);

SyntheticDataset generate(const SyntheticTaskSpec& spec);

// ---------------------------------------------------------------- training

// Fine-tuning schedule: plain SGD, cosine-annealed to zero.
struct TrainPlan {
  double learning_rate = 0.0015;
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  double lambda_text = 1.0;
  double lambda_image = 1.0;

  void validate() const;
  std::size_t steps_per_epoch(std::size_t n_train) const noexcept {
    return (n_train + batch_size - 1) / batch_size;
  }
  // lr * 0.5 * (1 + cos(pi * step / total)); ends at 0 when step == total.
  double learning_rate_at(std::size_t step, std::size_t total) const noexcept;
};

// Contrastive stand-in for large-scale pretraining: the backbone sees fresh
// concepts each step (never the task's classes) and learns to align the two
// branches. Optimizer is Adam.
struct PretrainPlan {
  std::size_t steps = 300;
  double learning_rate = 2e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;  // backbone init and pretraining stream, shared by all run seeds
};

struct MetricsRecord {
  std::uint64_t seed = 0;
  std::string config;
  std::string fingerprint;
  std::size_t epoch = 0;
  std::string split = "test";
  double base_acc = 0.0;
  double new_acc = 0.0;
  double hm = 0.0;
  double loss_ce = 0.0;
  double loss_reg_text = 0.0;
  double loss_reg_image = 0.0;
};

struct RunLabel {
  std::uint64_t seed = 0;
  std::string config = "run";
  std::string fingerprint;
};

struct TrainResult {
  std::vector<MetricsRecord> history;  // epoch 0 is the pre-fine-tuning state
  std::size_t steps = 0;
};

void pretrain(ToyClipModel& model, const SyntheticTaskSpec& spec, const PretrainPlan& plan, std::uint64_t seed,
              Precision precision = Precision::kDouble);

TrainResult train(ToyClipModel& model, const SyntheticDataset& data, const TrainPlan& plan, const RunLabel& label,
                  Precision precision = Precision::kDouble);

// ---------------------------------------------------------------- evaluation

enum class Split { kBase, kNew };

double evaluate(ToyClipModel& model, const SyntheticDataset& data, Split split);
// Accuracy of argmax class probability against labels indexing into prompts.
double evaluate(ToyClipModel& model, const std::vector<const Tensor*>& images, const std::vector<std::size_t>& labels,
                const std::vector<const Tensor*>& prompts);

double harmonic_mean(double base, double novel);

struct ForegroundRanks {
  double foreground = 0.0;  // mean position in the importance order, 0 = most important
  double background = 0.0;
  std::size_t sequences = 0;
  // Same means per adapted layer, first adapted layer first.
  std::vector<double> layer_foreground;
  std::vector<double> layer_background;
};
// Noise-free routing over the image-branch DRA layers on held-out base samples.
ForegroundRanks foreground_ranks(ToyClipModel& model, const SyntheticDataset& data);

// ---------------------------------------------------------------- experiments

struct Experiment {
  SyntheticTaskSpec task;
  EncoderConfig encoder;
  TrainPlan plan;
  PretrainPlan pretrain;
  Precision precision = Precision::kDouble;

  // Encoder config with the task's dimensions filled in.
  EncoderConfig resolved_encoder() const;
};

// Pretrained model without adapters. Depends only on the encoder, the task's
// world and the pretrain plan, so one backbone serves every run seed.
ToyClipModel pretrained_backbone(const Experiment& exp);

struct RunResult {
  ToyClipModel model;
  TrainResult result;
};
RunResult run_experiment(const Experiment& exp, const RunLabel& label, ToyClipModel* backbone = nullptr);

struct AblationVariant {
  std::string name;
  AdapterKind image = AdapterKind::kDra;
  AdapterKind text = AdapterKind::kDra;
  bool channel_response = true;
  bool reg = true;
};
// Component ablation grid: no adapter, the fixed-rank baseline, DRA in one
// branch, and DRA in both branches with CR and reg toggled.
std::vector<AblationVariant> component_variants();
AblationVariant find_variant(const std::string& name);

struct SweepEntry {
  std::size_t groups = 4;
  std::vector<double> ratios{1.0, 0.8, 0.6, 0.4};
};

struct AblationCell {
  std::string variant;
  SweepEntry sweep;
  std::vector<MetricsRecord> finals;  // one per seed
  double base_mean = 0, base_std = 0, new_mean = 0, new_std = 0, hm_mean = 0, hm_std = 0;
};

Experiment apply_variant(const Experiment& exp, const AblationVariant& variant, const SweepEntry& sweep);

std::vector<AblationCell> ablation_matrix(const Experiment& exp, const std::vector<AblationVariant>& variants,
                                          const std::vector<SweepEntry>& sweep,
                                          const std::vector<std::uint64_t>& seeds, const std::string& fingerprint = {});

// ---------------------------------------------------------------- output

std::string format_double(double v);
void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const MetricsRecord& r);
void write_ablation_csv(std::ostream& os, const std::vector<AblationCell>& cells, const std::string& fingerprint);

}  // namespace dra
