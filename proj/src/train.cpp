#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>

#include "dra/benchmark.hpp"
#include "dra/parallel.hpp"

namespace dra {

void TrainPlan::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.lr: must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch: must be >= 1");
  if (!(lambda_text >= 0.0)) throw ConfigError("train.lambda_T: must be >= 0");
  if (!(lambda_image >= 0.0)) throw ConfigError("train.lambda_V: must be >= 0");
}

double TrainPlan::learning_rate_at(std::size_t step, std::size_t total) const noexcept {
  if (total == 0) return learning_rate;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {

class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, double lr) : params_(std::move(params)), lr_(lr) {
    for (Parameter* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m_[k][i] = kBeta1 * m_[k][i] + (1.0 - kBeta1) * g;
        v_[k][i] = kBeta2 * v_[k][i] + (1.0 - kBeta2) * g * g;
        p.value[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + 1e-8);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  double lr_;
  std::size_t t_ = 0;
};

double safe_hm(double base, double novel) { return base + novel > 0.0 ? harmonic_mean(base, novel) : 0.0; }

void check_finite(const LossBreakdown& loss, std::size_t step) {
  if (!std::isfinite(loss.total) || !std::isfinite(loss.ce)) {
    throw DivergenceError("non-finite loss at step " + std::to_string(step) + " (ce=" + std::to_string(loss.ce) +
                          ", reg_T=" + std::to_string(loss.reg_text) + ", reg_V=" + std::to_string(loss.reg_image) +
                          ")");
  }
}

// Non-finite activations surface as NumericError deep inside an op; during
// training both that and a non-finite loss mean the run diverged.
LossBreakdown checked_loss(ToyClipModel& model, const Batch& batch, const LossOptions& lo, std::size_t step) {
  LossBreakdown l;
  try {
    l = total_loss(model, batch, lo);
  } catch (const NumericError& e) {
    throw DivergenceError("non-finite values at step " + std::to_string(step) + ": " + e.what());
  }
  check_finite(l, step);
  return l;
}

}  // namespace

void pretrain(ToyClipModel& model, const SyntheticTaskSpec& spec, const PretrainPlan& plan, std::uint64_t seed,
              Precision precision) {
  if (plan.steps == 0) return;
  if (plan.batch_size < 2) throw ConfigError("pretrain.batch: must be >= 2");
  model.set_all_trainable(false);
  std::vector<Parameter*> params = model.backbone_parameters();
  for (Parameter* p : params) p->trainable = true;
  Adam opt(params, plan.learning_rate);
  const TaskWorld world = make_world(spec);

  for (std::size_t step = 0; step < plan.steps; ++step) {
    Rng rng(mix_seed(seed, step));
    std::vector<Tensor> prompts, images;
    Batch batch;
    for (std::size_t i = 0; i < plan.batch_size; ++i) {
      const Tensor z = sample_concept(spec, rng);
      prompts.push_back(make_prompt(spec, world, z));
      images.push_back(sample_image(spec, z, i, rng).tokens);
    }
    for (std::size_t i = 0; i < plan.batch_size; ++i) {
      batch.prompts.push_back(&prompts[i]);
      batch.images.push_back(&images[i]);
      batch.labels.push_back(i);
    }
    model.zero_grad();
    LossOptions lo;
    lo.mode = Mode::kInfer;
    lo.lambda_text = lo.lambda_image = 0.0;
    lo.precision = precision;
    checked_loss(model, batch, lo, step);
    opt.step();
    model.clamp_temperature();
  }
  model.set_all_trainable(false);
}

TrainResult train(ToyClipModel& model, const SyntheticDataset& data, const TrainPlan& plan, const RunLabel& label,
                  Precision precision) {
  plan.validate();
  if (data.train.empty()) throw ContractError("train: dataset has no training samples");
  model.freeze_backbone();

  std::unordered_map<std::size_t, std::size_t> local;
  std::vector<const Tensor*> prompts;
  for (std::size_t i = 0; i < data.base_classes.size(); ++i) {
    local[data.base_classes[i]] = i;
    prompts.push_back(&data.prompts[data.base_classes[i]]);
  }

  const std::size_t n_train = data.train.size();
  const std::size_t per_epoch = plan.steps_per_epoch(n_train);
  const std::size_t total_steps = plan.epochs * per_epoch;
  std::vector<Parameter*> trainable;
  for (Parameter* p : model.parameters())
    if (p->trainable) trainable.push_back(p);

  auto make_batch = [&](const std::vector<std::size_t>& order, std::size_t b) {
    Batch batch;
    batch.prompts = prompts;
    const std::size_t end = std::min(n_train, (b + 1) * plan.batch_size);
    for (std::size_t i = b * plan.batch_size; i < end; ++i) {
      const ImageSample& s = data.train[order[i]];
      batch.images.push_back(&s.tokens);
      batch.labels.push_back(local.at(s.label));
    }
    return batch;
  };

  auto record = [&](std::size_t epoch, double ce, double rt, double rv) {
    MetricsRecord m;
    m.seed = label.seed;
    m.config = label.config;
    m.fingerprint = label.fingerprint;
    m.epoch = epoch;
    m.base_acc = evaluate(model, data, Split::kBase);
    m.new_acc = evaluate(model, data, Split::kNew);
    m.hm = safe_hm(m.base_acc, m.new_acc);
    m.loss_ce = ce;
    m.loss_reg_text = rt;
    m.loss_reg_image = rv;
    return m;
  };

  TrainResult result;
  LossOptions lo;
  lo.lambda_text = plan.lambda_text;
  lo.lambda_image = plan.lambda_image;
  lo.mode = Mode::kTrain;
  lo.precision = precision;

  {
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    double ce = 0, rt = 0, rv = 0;
    lo.backward = false;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      lo.noise_seed = mix_seed(label.seed, 299);
      const LossBreakdown l = checked_loss(model, make_batch(order, b), lo, 0);
      ce += l.ce;
      rt += l.reg_text;
      rv += l.reg_image;
    }
    const double n = static_cast<double>(per_epoch);
    result.history.push_back(record(0, ce / n, rt / n, rv / n));
  }

  lo.backward = true;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(mix_seed(label.seed, 200), epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double ce = 0, rt = 0, rv = 0;
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      model.zero_grad();
      lo.noise_seed = mix_seed(mix_seed(label.seed, 300), step);
      const LossBreakdown l = checked_loss(model, make_batch(order, b), lo, step);
      const double lr = plan.learning_rate_at(step, total_steps);
      for (Parameter* p : trainable)
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];
      for (const Parameter* p : trainable)
        if (!p->value.all_finite())
          throw DivergenceError("non-finite weights in " + p->name + " after step " + std::to_string(step));
      ce += l.ce;
      rt += l.reg_text;
      rv += l.reg_image;
    }
    const double n = static_cast<double>(per_epoch);
    result.history.push_back(record(epoch, ce / n, rt / n, rv / n));
  }
  result.steps = step;
  return result;
}

double evaluate(ToyClipModel& model, const std::vector<const Tensor*>& images, const std::vector<std::size_t>& labels,
                const std::vector<const Tensor*>& prompts) {
  if (images.empty()) throw ContractError("evaluate: empty split");
  if (images.size() != labels.size()) throw DimensionError("evaluate: one label per image required");
  if (prompts.empty()) throw ContractError("evaluate: no class prompts");
  const std::size_t e = model.config().output_dim();
  Tensor classes = Tensor::matrix(prompts.size(), e);
  parallel_for(prompts.size(), [&](std::size_t c) {
    const Tensor w = embed_text(model, *prompts[c]);
    std::copy(w.data().begin(), w.data().end(), classes.row(c).begin());
  });
  std::vector<char> correct(images.size(), 0);
  const double tau = model.temperature();
  parallel_for(images.size(), [&](std::size_t i) {
    const Tensor x = embed_image(model, *images[i]);
    const Tensor p = class_probabilities(x, classes, tau);
    std::size_t best = 0;
    for (std::size_t c = 1; c < p.size(); ++c)
      if (p[c] > p[best]) best = c;
    correct[i] = best == labels[i];
  });
  std::size_t hits = 0;
  for (char c : correct) hits += static_cast<std::size_t>(c);
  return static_cast<double>(hits) / static_cast<double>(images.size());
}

double evaluate(ToyClipModel& model, const SyntheticDataset& data, Split split) {
  const auto& classes = split == Split::kBase ? data.base_classes : data.new_classes;
  const auto& samples = split == Split::kBase ? data.test_base : data.test_new;
  std::unordered_map<std::size_t, std::size_t> local;
  std::vector<const Tensor*> prompts;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    local[classes[i]] = i;
    prompts.push_back(&data.prompts[classes[i]]);
  }
  std::vector<const Tensor*> images;
  std::vector<std::size_t> labels;
  for (const auto& s : samples) {
    images.push_back(&s.tokens);
    labels.push_back(local.at(s.label));
  }
  return evaluate(model, images, labels, prompts);
}

double harmonic_mean(double base, double novel) {
  if (base < 0.0 || novel < 0.0) throw ContractError("harmonic_mean: accuracies must be non-negative");
  if (base == 0.0 && novel == 0.0) throw NumericError("harmonic_mean: undefined when both inputs are 0");
  return 2.0 * base * novel / (base + novel);
}

ForegroundRanks foreground_ranks(ToyClipModel& model, const SyntheticDataset& data) {
  ForegroundRanks out;
  if (model.config().image_adapter != AdapterKind::kDra) return out;
  const std::size_t n = data.test_base.size();
  // Per sequence, per adapted layer: mean foreground and background position.
  std::vector<std::vector<std::pair<double, double>>> per(n);
  parallel_for(n, [&](std::size_t i) {
    const ImageSample& s = data.test_base[i];
    Tape tape;
    EncodeOptions eo;
    eo.collect_reports = true;
    const Encoded enc = encode_image(tape, model, s.tokens, eo);
    const std::size_t seq = s.tokens.rows() + 1;
    std::vector<char> is_fg(seq, 0);
    for (auto p : s.foreground) is_fg[p + 1] = 1;  // position 0 is the class token
    for (const auto& lr : enc.reports) {
      std::vector<std::size_t> rank(seq);
      for (std::size_t pos = 0; pos < seq; ++pos) rank[lr.report.token_order[pos]] = pos;
      double f = 0, b = 0;
      std::size_t nf = 0, nb = 0;
      for (std::size_t tok = 1; tok < seq; ++tok) {
        if (is_fg[tok]) {
          f += static_cast<double>(rank[tok]);
          ++nf;
        } else {
          b += static_cast<double>(rank[tok]);
          ++nb;
        }
      }
      per[i].emplace_back(nf ? f / static_cast<double>(nf) : 0.0, nb ? b / static_cast<double>(nb) : 0.0);
    }
  });
  if (n == 0 || per[0].empty()) return out;
  const std::size_t layers = per[0].size();
  out.layer_foreground.assign(layers, 0.0);
  out.layer_background.assign(layers, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < layers; ++l) {
      out.layer_foreground[l] += per[i][l].first / static_cast<double>(n);
      out.layer_background[l] += per[i][l].second / static_cast<double>(n);
    }
  for (std::size_t l = 0; l < layers; ++l) {
    out.foreground += out.layer_foreground[l] / static_cast<double>(layers);
    out.background += out.layer_background[l] / static_cast<double>(layers);
  }
  out.sequences = n;
  return out;
}

// ---------------------------------------------------------------- experiments

EncoderConfig Experiment::resolved_encoder() const {
  EncoderConfig e = encoder;
  e.input_dim = task.feature_dim;
  e.image_tokens = task.image_tokens;
  e.text_tokens = task.text_tokens;
  return e;
}

ToyClipModel pretrained_backbone(const Experiment& exp) {
  EncoderConfig enc = exp.resolved_encoder();
  enc.image_adapter = AdapterKind::kNone;
  enc.text_adapter = AdapterKind::kNone;
  ToyClipModel model = ToyClipModel::create(enc, exp.pretrain.seed);
  pretrain(model, exp.task, exp.pretrain, mix_seed(exp.pretrain.seed, 400), exp.precision);
  return model;
}

RunResult run_experiment(const Experiment& exp, const RunLabel& label, ToyClipModel* backbone) {
  SyntheticTaskSpec spec = exp.task;
  spec.seed = label.seed;
  const SyntheticDataset data = generate(spec);
  ToyClipModel model = ToyClipModel::create(exp.resolved_encoder(), label.seed);
  if (backbone) {
    copy_backbone(*backbone, model);
  } else {
    ToyClipModel pre = pretrained_backbone(exp);
    copy_backbone(pre, model);
  }
  TrainResult result = train(model, data, exp.plan, label, exp.precision);
  return RunResult{std::move(model), std::move(result)};
}

std::vector<AblationVariant> component_variants() {
  using K = AdapterKind;
  return {
      {"zero_shot", K::kNone, K::kNone, false, false},
      {"baseline", K::kFixed, K::kFixed, false, false},
      {"dra_t", K::kFixed, K::kDra, true, true},
      {"dra_v", K::kDra, K::kFixed, true, true},
      {"dra_tv", K::kDra, K::kDra, false, false},
      {"dra_tv_cr", K::kDra, K::kDra, true, false},
      {"dra_tv_reg", K::kDra, K::kDra, false, true},
      {"dra_tv_cr_reg", K::kDra, K::kDra, true, true},
  };
}

AblationVariant find_variant(const std::string& name) {
  for (const auto& v : component_variants())
    if (v.name == name) return v;
  throw ConfigError("unknown ablation variant '" + name + "'");
}

Experiment apply_variant(const Experiment& exp, const AblationVariant& variant, const SweepEntry& sweep) {
  Experiment out = exp;
  out.encoder.image_adapter = variant.image;
  out.encoder.text_adapter = variant.text;
  out.encoder.dra.channel_response = variant.channel_response;
  out.encoder.dra.groups = sweep.groups;
  out.encoder.dra.ratios = sweep.ratios;
  if (!variant.reg) {
    out.plan.lambda_text = 0.0;
    out.plan.lambda_image = 0.0;
  }
  return out;
}

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& stddev) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  stddev = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
}

}  // namespace

std::vector<AblationCell> ablation_matrix(const Experiment& exp, const std::vector<AblationVariant>& variants,
                                          const std::vector<SweepEntry>& sweep,
                                          const std::vector<std::uint64_t>& seeds, const std::string& fingerprint) {
  if (seeds.empty()) throw ConfigError("ablate.seeds: at least one seed required");
  if (variants.empty() || sweep.empty()) throw ConfigError("ablate: empty variant or sweep list");
  std::vector<AblationCell> cells;
  for (const auto& v : variants) {
    for (const auto& s : sweep) {
      AblationCell cell;
      cell.variant = v.name;
      cell.sweep = s;
      cells.push_back(std::move(cell));
    }
  }
  ToyClipModel backbone = pretrained_backbone(exp);
  for (std::uint64_t seed : seeds) {
    std::size_t k = 0;
    for (const auto& v : variants) {
      for (const auto& s : sweep) {
        const Experiment e = apply_variant(exp, v, s);
        RunLabel label{seed, v.name, fingerprint};
        RunResult run = run_experiment(e, label, &backbone);
        cells[k++].finals.push_back(run.result.history.back());
      }
    }
  }
  for (auto& cell : cells) {
    std::vector<double> b, n, h;
    for (const auto& m : cell.finals) {
      b.push_back(m.base_acc);
      n.push_back(m.new_acc);
      h.push_back(m.hm);
    }
    mean_std(b, cell.base_mean, cell.base_std);
    mean_std(n, cell.new_mean, cell.new_std);
    mean_std(h, cell.hm_mean, cell.hm_std);
  }
  return cells;
}

}  // namespace dra
