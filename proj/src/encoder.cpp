#include "dra/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <memory>
#include <mutex>

#include "dra/parallel.hpp"

namespace dra {

const char* to_string(AdapterKind k) noexcept {
  switch (k) {
    case AdapterKind::kNone: return "none";
    case AdapterKind::kFixed: return "fixed";
    case AdapterKind::kDra: return "dra";
  }
  return "?";
}

AdapterKind parse_adapter_kind(const std::string& s) {
  if (s == "none") return AdapterKind::kNone;
  if (s == "fixed") return AdapterKind::kFixed;
  if (s == "dra") return AdapterKind::kDra;
  throw ConfigError("adapter kind must be none, fixed or dra, got '" + s + "'");
}

void EncoderConfig::validate() const {
  if (input_dim < 1) throw ConfigError("encoder.input_dim: must be >= 1");
  if (d < 1) throw ConfigError("encoder.d: must be >= 1");
  if (n_heads < 1 || d % n_heads != 0) throw ConfigError("encoder.n_heads: must divide encoder.d");
  if (layers < 1) throw ConfigError("encoder.L: must be >= 1");
  if (first_dra_layer < 1 || first_dra_layer > layers + 1) {
    throw ConfigError("encoder.h: must be in [1, L + 1]");
  }
  if (image_tokens < 1) throw ConfigError("task.image_tokens: must be >= 1");
  if (text_tokens < 1) throw ConfigError("task.text_tokens: must be >= 1");
  if (!(temperature_init >= 0.01)) throw ConfigError("encoder.temperature_init: must be >= 0.01");
  dra.validate();
  if (image_adapter == AdapterKind::kDra && dra.groups > image_tokens + 1) {
    throw ConfigError("dra.K: exceeds the image sequence length");
  }
  if (text_adapter == AdapterKind::kDra && dra.groups > text_tokens) {
    throw ConfigError("dra.K: exceeds the text sequence length");
  }
  if (dra.channel_response && (text_tokens < 2 || image_tokens + 1 < 2)) {
    throw ConfigError("channel response needs sequences of at least 2 tokens");
  }
}

// ---------------------------------------------------------------- parameters

std::vector<Parameter*> TransformerBlock::backbone_parameters() {
  std::vector<Parameter*> out{&ln1_gamma, &ln1_beta, &ln2_gamma, &ln2_beta};
  for (auto& h : heads) {
    out.push_back(&h.query);
    out.push_back(&h.key);
    out.push_back(&h.value);
    out.push_back(&h.output);
  }
  out.push_back(&ff_in);
  out.push_back(&ff_out);
  return out;
}

std::vector<Parameter*> TransformerBlock::adapter_parameters() {
  if (dra) return dra->parameters();
  if (fixed) return fixed->parameters();
  return {};
}

namespace {

Tensor uniform_init(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor w = Tensor::matrix(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  for (double& x : w.storage()) x = rng.uniform(-bound, bound);
  return w;
}

Tensor normal_init(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor w = Tensor::matrix(rows, cols);
  for (double& x : w.storage()) x = stddev * rng.normal();
  return w;
}

Branch make_branch(const std::string& name, const EncoderConfig& cfg, std::size_t seq, bool with_cls,
                   AdapterKind kind, Rng& rng, std::uint64_t adapter_seed) {
  const std::size_t d = cfg.d;
  const std::size_t dh = d / cfg.n_heads;
  Branch b;
  b.embed = Parameter(name + ".embed", uniform_init(rng, cfg.input_dim, d));
  b.position = Parameter(name + ".pos", normal_init(rng, with_cls ? seq + 1 : seq, d, 0.02));
  if (with_cls) b.cls = Parameter(name + ".cls", normal_init(rng, 1, d, 0.02));
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    const std::string p = name + ".block" + std::to_string(l);
    TransformerBlock blk;
    blk.ln1_gamma = Parameter(p + ".ln1.gamma", Tensor({d}, 1.0));
    blk.ln1_beta = Parameter(p + ".ln1.beta", Tensor({d}, 0.0));
    blk.ln2_gamma = Parameter(p + ".ln2.gamma", Tensor({d}, 1.0));
    blk.ln2_beta = Parameter(p + ".ln2.beta", Tensor({d}, 0.0));
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::string hp = p + ".head" + std::to_string(h);
      AttentionHead head;
      head.query = Parameter(hp + ".W_q", uniform_init(rng, d, dh));
      head.key = Parameter(hp + ".W_k", uniform_init(rng, d, dh));
      head.value = Parameter(hp + ".W_v", uniform_init(rng, d, dh));
      head.output = Parameter(hp + ".W_o", uniform_init(rng, dh, d));
      blk.heads.push_back(std::move(head));
    }
    blk.ff_in = Parameter(p + ".ff.W_in", uniform_init(rng, d, 4 * d));
    blk.ff_out = Parameter(p + ".ff.W_out", uniform_init(rng, 4 * d, d));
    if (l >= cfg.first_dra_layer && kind != AdapterKind::kNone) {
      // Adapter weights come from their own stream so the backbone is the same
      // whichever adapter kind is attached.
      Rng arng(mix_seed(adapter_seed, l));
      if (kind == AdapterKind::kDra) {
        blk.dra = DraAdapter::create(p + ".dra", d, cfg.dra, arng);
      } else {
        blk.fixed = FixedAdapter::create(p + ".adapter", d, cfg.dra.rank, cfg.dra.scale, arng);
      }
    }
    b.blocks.push_back(std::move(blk));
  }
  b.ln_gamma = Parameter(name + ".ln.gamma", Tensor({d}, 1.0));
  b.ln_beta = Parameter(name + ".ln.beta", Tensor({d}, 0.0));
  b.proj = Parameter(name + ".proj", uniform_init(rng, d, cfg.output_dim()));
  return b;
}

void collect_backbone(Branch& b, std::vector<Parameter*>& out) {
  out.push_back(&b.embed);
  out.push_back(&b.position);
  if (b.cls) out.push_back(&*b.cls);
  for (auto& blk : b.blocks) {
    auto ps = blk.backbone_parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  out.push_back(&b.ln_gamma);
  out.push_back(&b.ln_beta);
  out.push_back(&b.proj);
}

void collect_adapters(Branch& b, std::vector<Parameter*>& out) {
  for (auto& blk : b.blocks) {
    auto ps = blk.adapter_parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
}

}  // namespace

ToyClipModel ToyClipModel::create(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  ToyClipModel m;
  m.config_ = config;
  Rng backbone(mix_seed(seed, 1));
  const std::uint64_t adapters = mix_seed(seed, 2);
  m.image_ = make_branch("image", config, config.image_tokens, true, config.image_adapter, backbone,
                         mix_seed(adapters, 1));
  m.text_ = make_branch("text", config, config.text_tokens, false, config.text_adapter, backbone,
                        mix_seed(adapters, 2));
  m.logit_scale_ = Parameter("logit_scale", Tensor({1}, std::log(1.0 / config.temperature_init)));
  return m;
}

double ToyClipModel::temperature() const { return std::exp(-logit_scale_.value[0]); }

void ToyClipModel::clamp_temperature() {
  const double max_scale = std::log(100.0);
  if (logit_scale_.value[0] > max_scale) logit_scale_.value[0] = max_scale;
}

std::vector<Parameter*> ToyClipModel::backbone_parameters() {
  std::vector<Parameter*> out;
  collect_backbone(image_, out);
  collect_backbone(text_, out);
  out.push_back(&logit_scale_);
  return out;
}

std::vector<Parameter*> ToyClipModel::adapter_parameters() {
  std::vector<Parameter*> out;
  collect_adapters(image_, out);
  collect_adapters(text_, out);
  return out;
}

std::vector<Parameter*> ToyClipModel::parameters() {
  auto out = backbone_parameters();
  auto ad = adapter_parameters();
  out.insert(out.end(), ad.begin(), ad.end());
  return out;
}

Parameter* ToyClipModel::find(const std::string& name) {
  for (Parameter* p : parameters())
    if (p->name == name) return p;
  return nullptr;
}

void ToyClipModel::freeze_backbone() {
  for (Parameter* p : backbone_parameters()) p->trainable = false;
  for (Parameter* p : adapter_parameters()) p->trainable = true;
}

void ToyClipModel::set_all_trainable(bool trainable) {
  for (Parameter* p : parameters()) p->trainable = trainable;
}

void ToyClipModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

void copy_backbone(ToyClipModel& src, ToyClipModel& dst) {
  auto from = src.backbone_parameters();
  auto to = dst.backbone_parameters();
  if (from.size() != to.size()) throw DimensionError("copy_backbone: models have different layouts");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i]->name != to[i]->name || from[i]->value.shape() != to[i]->value.shape()) {
      throw DimensionError("copy_backbone: parameter " + from[i]->name + " does not match " + to[i]->name);
    }
    to[i]->value = from[i]->value;
  }
}

// ---------------------------------------------------------------- forward

namespace {

Var attention(Tape& tape, TransformerBlock& block, Var z) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(block.heads.front().query.value.cols()));
  std::optional<Var> acc;
  for (auto& head : block.heads) {
    Var q = matmul(z, tape.parameter(head.query));
    Var k = matmul(z, tape.parameter(head.key));
    Var v = matmul(z, tape.parameter(head.value));
    Var a = softmax_rows(scale(matmul(q, transpose(k)), inv));
    Var o = matmul(matmul(a, v), tape.parameter(head.output));
    acc = acc ? add(*acc, o) : o;
  }
  return *acc;
}

}  // namespace

BlockResult block_forward(Tape& tape, TransformerBlock& block, Var x, Mode mode, Rng* rng, bool collect_report) {
  BlockResult res;
  Var z = layer_norm_rows(x, tape.parameter(block.ln1_gamma), tape.parameter(block.ln1_beta));
  Var op_out = attention(tape, block, z);
  Var sublayer = op_out;
  if (block.dra) {
    if (mode == Mode::kTrain) {
      RankReport routing = compute_routing(*block.dra, tape.value(down_project(tape, *block.dra, z)), rng);
      Var trained = forward_train(tape, *block.dra, z, op_out, routing);
      Var inferred = forward_infer(tape, *block.dra, z, op_out);
      res.reg = reg_loss(trained, inferred);
      res.report = std::move(routing);
      sublayer = trained;
    } else {
      sublayer = forward_infer(tape, *block.dra, z, op_out);
      if (collect_report) res.report = compute_routing(*block.dra, down_project(*block.dra, tape.value(z)), nullptr);
    }
  } else if (block.fixed) {
    sublayer = forward(tape, *block.fixed, z, op_out);
  }
  Var x1 = add(x, sublayer);
  Var z2 = layer_norm_rows(x1, tape.parameter(block.ln2_gamma), tape.parameter(block.ln2_beta));
  Var ff = matmul(relu(matmul(z2, tape.parameter(block.ff_in))), tape.parameter(block.ff_out));
  res.output = add(x1, ff);
  return res;
}

namespace {

Encoded run_branch(Tape& tape, Branch& branch, Var x, std::size_t readout_row, const EncodeOptions& opt) {
  Encoded enc;
  for (std::size_t l = 0; l < branch.blocks.size(); ++l) {
    BlockResult r = block_forward(tape, branch.blocks[l], x, opt.mode, opt.rng, opt.collect_reports);
    x = r.output;
    if (r.reg) enc.reg = enc.reg ? add(*enc.reg, *r.reg) : *r.reg;
    if (r.report && (opt.collect_reports || opt.mode == Mode::kTrain)) {
      enc.reports.push_back({l + 1, std::move(*r.report)});
    }
  }
  Var h = layer_norm_rows(x, tape.parameter(branch.ln_gamma), tape.parameter(branch.ln_beta));
  Var pooled = slice_rows(h, readout_row, 1);
  enc.embedding = l2_normalize_rows(matmul(pooled, tape.parameter(branch.proj)));
  return enc;
}

void check_tokens(const char* what, const Tensor& tokens, std::size_t seq, std::size_t width) {
  if (tokens.rows() != seq || tokens.cols() != width) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(seq) + "x" + std::to_string(width) +
                         " tokens, got " + to_string(tokens.shape()));
  }
}

}  // namespace

Encoded encode_image(Tape& tape, ToyClipModel& model, const Tensor& tokens, const EncodeOptions& options) {
  const auto& cfg = model.config();
  check_tokens("encode_image", tokens, cfg.image_tokens, cfg.input_dim);
  Branch& b = model.image();
  Var patches = matmul(tape.constant(tokens), tape.parameter(b.embed));
  Var parts[2] = {tape.parameter(*b.cls), patches};
  Var x = add(concat_rows(parts), tape.parameter(b.position));
  return run_branch(tape, b, x, 0, options);
}

Encoded encode_text(Tape& tape, ToyClipModel& model, const Tensor& tokens, const EncodeOptions& options) {
  const auto& cfg = model.config();
  check_tokens("encode_text", tokens, cfg.text_tokens, cfg.input_dim);
  Branch& b = model.text();
  Var x = add(matmul(tape.constant(tokens), tape.parameter(b.embed)), tape.parameter(b.position));
  return run_branch(tape, b, x, cfg.text_tokens - 1, options);
}

Tensor embed_image(ToyClipModel& model, const Tensor& tokens) {
  Tape tape;
  return tape.value(encode_image(tape, model, tokens).embedding);
}

Tensor embed_text(ToyClipModel& model, const Tensor& tokens) {
  Tape tape;
  return tape.value(encode_text(tape, model, tokens).embedding);
}

Tensor logits(const ToyClipModel& model, const Tensor& image_embedding, const Tensor& class_embeddings) {
  const std::size_t c = class_embeddings.rows();
  const std::size_t e = class_embeddings.cols();
  if (image_embedding.size() != e) throw DimensionError("logits: embedding widths differ");
  double xn = 0.0;
  for (double v : image_embedding.data()) xn += v * v;
  if (!(xn > 0.0)) throw NumericError("logits: zero-norm image embedding");
  xn = std::sqrt(xn);
  const double inv_tau = 1.0 / model.temperature();
  Tensor out({c});
  for (std::size_t i = 0; i < c; ++i) {
    double dot = 0.0, wn = 0.0;
    for (std::size_t j = 0; j < e; ++j) {
      dot += image_embedding[j] * class_embeddings.at(i, j);
      wn += class_embeddings.at(i, j) * class_embeddings.at(i, j);
    }
    if (!(wn > 0.0)) throw NumericError("logits: zero-norm class embedding");
    out[i] = dot / (xn * std::sqrt(wn)) * inv_tau;
  }
  return out;
}

Tensor class_probabilities(const Tensor& image_embedding, const Tensor& class_embeddings, double temperature) {
  const std::size_t c = class_embeddings.rows();
  const std::size_t e = class_embeddings.cols();
  if (image_embedding.size() != e) throw DimensionError("class_probabilities: embedding widths differ");
  double xn = 0.0;
  for (double v : image_embedding.data()) xn += v * v;
  if (!(xn > 0.0)) throw NumericError("class_probabilities: zero-norm image embedding");
  xn = std::sqrt(xn);
  Tensor z = Tensor::matrix(1, c);
  for (std::size_t i = 0; i < c; ++i) {
    double dot = 0.0, wn = 0.0;
    for (std::size_t j = 0; j < e; ++j) {
      dot += image_embedding[j] * class_embeddings.at(i, j);
      wn += class_embeddings.at(i, j) * class_embeddings.at(i, j);
    }
    if (!(wn > 0.0)) throw NumericError("class_probabilities: zero-norm class embedding");
    z[i] = dot / (xn * std::sqrt(wn)) / temperature;
  }
  return softmax_rows(z).reshaped({c});
}

// ---------------------------------------------------------------- loss

LossBreakdown total_loss(ToyClipModel& model, const Batch& batch, const LossOptions& options) {
  const std::size_t n_prompts = batch.prompts.size();
  const std::size_t n_images = batch.images.size();
  if (n_images == 0 || n_prompts == 0) throw ContractError("total_loss: empty batch");
  if (batch.labels.size() != n_images) throw DimensionError("total_loss: one label per image required");

  const std::size_t total_seq = n_prompts + n_images;
  std::vector<std::unique_ptr<Tape>> tapes(total_seq);
  std::vector<Encoded> encoded(total_seq);
  const std::uint64_t text_stream = mix_seed(options.noise_seed, 11);
  const std::uint64_t image_stream = mix_seed(options.noise_seed, 12);

  parallel_for(total_seq, [&](std::size_t i) {
    tapes[i] = std::make_unique<Tape>(options.precision);
    const bool is_text = i < n_prompts;
    const std::size_t idx = is_text ? i : i - n_prompts;
    Rng rng(mix_seed(is_text ? text_stream : image_stream, idx));
    EncodeOptions eo{options.mode, &rng, false};
    encoded[i] = is_text ? encode_text(*tapes[i], model, *batch.prompts[idx], eo)
                         : encode_image(*tapes[i], model, *batch.images[idx], eo);
  });

  const std::size_t e = model.config().output_dim();
  Tensor text_emb = Tensor::matrix(n_prompts, e);
  Tensor image_emb = Tensor::matrix(n_images, e);
  double reg_text = 0.0, reg_image = 0.0;
  for (std::size_t i = 0; i < total_seq; ++i) {
    const Tensor& v = tapes[i]->value(encoded[i].embedding);
    const bool is_text = i < n_prompts;
    Tensor& dst = is_text ? text_emb : image_emb;
    const std::size_t row = is_text ? i : i - n_prompts;
    std::copy(v.data().begin(), v.data().end(), dst.row(row).begin());
    if (encoded[i].reg) (is_text ? reg_text : reg_image) += tapes[i]->value(*encoded[i].reg)[0];
  }
  reg_text /= static_cast<double>(n_prompts);
  reg_image /= static_cast<double>(n_images);

  Tape head(options.precision);
  Var txt = head.variable(text_emb);
  Var img = head.variable(image_emb);
  Var scale_factor = exp(head.parameter(model.logit_scale()));
  Var z = scale_by(matmul(img, transpose(txt)), scale_factor);
  Var ce = cross_entropy(z, batch.labels);

  LossBreakdown out;
  out.ce = head.value(ce)[0];
  out.reg_text = reg_text;
  out.reg_image = reg_image;
  out.total = out.ce + options.lambda_text * reg_text + options.lambda_image * reg_image;
  if (!options.backward) return out;

  head.backward(ce);
  const Tensor* g_txt = head.grad(txt);
  const Tensor* g_img = head.grad(img);

  parallel_for(total_seq, [&](std::size_t i) {
    Tape& tp = *tapes[i];
    const bool is_text = i < n_prompts;
    const std::size_t row = is_text ? i : i - n_prompts;
    const Tensor* g = is_text ? g_txt : g_img;
    Tensor seed = Tensor::matrix(1, e);
    if (g) std::copy(g->row(row).begin(), g->row(row).end(), seed.data().begin());
    Var obj = sum(mul(encoded[i].embedding, tp.constant(std::move(seed))));
    const double lambda = is_text ? options.lambda_text : options.lambda_image;
    const double count = static_cast<double>(is_text ? n_prompts : n_images);
    if (encoded[i].reg && lambda != 0.0) obj = add(obj, scale(*encoded[i].reg, lambda / count));
    if (tp.requires_grad(obj)) tp.backward(obj);
  });

  for (std::size_t i = 0; i < total_seq; ++i) tapes[i]->export_parameter_grads();
  head.export_parameter_grads();
  return out;
}

}  // namespace dra
