#include "dra/commands.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "dra/checkpoint.hpp"
#include "dra/grad_check.hpp"
#include "dra/kernels.hpp"
#include "json.hpp"

namespace dra {

namespace fs = std::filesystem;
using nlohmann::json;

RunConfig resolve_config(const CommandOptions& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig::defaults() : load_run_config(o.config_path);
  for (const auto& s : o.sets) apply_override(cfg, s);
  if (o.seed) apply_override(cfg, "seed=" + std::to_string(*o.seed));
  if (o.precision) apply_override(cfg, "precision=\"" + *o.precision + "\"");
  if (cfg.threads > 0) kernels::set_threads(cfg.threads);
  return cfg;
}

namespace {

fs::path ensure_out(const CommandOptions& o, const char* fallback) {
  fs::path dir = o.out_dir.empty() ? fs::path(fallback) : fs::path(o.out_dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

json metrics_json(const MetricsRecord& m) {
  return {{"epoch", m.epoch}, {"base_acc", m.base_acc}, {"new_acc", m.new_acc}, {"hm", m.hm},
          {"loss_ce", m.loss_ce}, {"loss_reg_T", m.loss_reg_text}, {"loss_reg_V", m.loss_reg_image}};
}

SyntheticDataset dataset_for(const RunConfig& cfg) {
  SyntheticTaskSpec spec = cfg.experiment.task;
  spec.seed = cfg.seed;
  return generate(spec);
}

// Config for eval/analyze: an explicit --config wins, otherwise the
// config.json written next to the checkpoint by `train`.
RunConfig config_for_checkpoint(const CommandOptions& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  CommandOptions copy = o;
  if (copy.config_path.empty()) {
    const fs::path side = fs::path(o.checkpoint).parent_path() / "config.json";
    if (fs::exists(side)) copy.config_path = side.string();
  }
  return resolve_config(copy);
}

ToyClipModel load_model(const RunConfig& cfg, const std::string& checkpoint) {
  ToyClipModel model = ToyClipModel::create(cfg.experiment.resolved_encoder(), cfg.seed);
  load_checkpoint(checkpoint, model);
  return model;
}

template <class Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
}

}  // namespace

int cmd_train(const CommandOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(o);
    const std::string fp = fingerprint(cfg);
    const fs::path dir = ensure_out(o, "runs/train");
    const auto t0 = std::chrono::steady_clock::now();

    // The config column carries the fingerprint so rows stay attributable once merged.
    RunResult run = run_experiment(cfg.experiment, RunLabel{cfg.seed, fp, fp});

    write_text(dir / "config.json", to_json(cfg) + "\n");
    {
      std::ofstream csv(dir / "metrics.csv", std::ios::binary);
      write_metrics_header(csv);
      for (const auto& m : run.result.history) write_metrics_row(csv, m);
    }
    save_checkpoint((dir / "checkpoint.bin").string(), run.model, cfg.experiment.precision);

    const MetricsRecord& last = run.result.history.back();
    json history = json::array();
    for (const auto& m : run.result.history) history.push_back(metrics_json(m));
    json summary = {{"command", "train"},
                    {"fingerprint", fp},
                    {"seed", cfg.seed},
                    {"precision", to_string(cfg.experiment.precision)},
                    {"steps", run.result.steps},
                    {"final", metrics_json(last)},
                    {"history", history}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << "fingerprint " << fp << "\n"
        << "base_acc " << format_double(last.base_acc) << "\nnew_acc " << format_double(last.new_acc) << "\nhm "
        << format_double(last.hm) << "\n"
        << "wrote " << dir.string() << " in " << std::fixed << std::setprecision(1) << secs << "s\n";
    return kExitOk;
  });
}

int cmd_eval(const CommandOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = config_for_checkpoint(o);
    ToyClipModel model = load_model(cfg, o.checkpoint);
    const SyntheticDataset data = dataset_for(cfg);
    const double base = evaluate(model, data, Split::kBase);
    const double novel = evaluate(model, data, Split::kNew);
    const double hm = base + novel > 0.0 ? harmonic_mean(base, novel) : 0.0;
    out << "base_acc " << format_double(base) << "\nnew_acc " << format_double(novel) << "\nhm "
        << format_double(hm) << "\n";
    if (!o.out_dir.empty()) {
      const fs::path dir = ensure_out(o, "");
      json j = {{"command", "eval"}, {"fingerprint", fingerprint(cfg)}, {"checkpoint", o.checkpoint},
                {"base_acc", base},  {"new_acc", novel},                  {"hm", hm}};
      write_text(dir / "eval.json", j.dump(2) + "\n");
    }
    return kExitOk;
  });
}

int cmd_analyze(const CommandOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = config_for_checkpoint(o);
    if (o.branch != "image" && o.branch != "text") throw ConfigError("--branch must be image or text");
    ToyClipModel model = load_model(cfg, o.checkpoint);
    const SyntheticDataset data = dataset_for(cfg);
    if (o.sample >= data.test_base.size()) {
      throw ConfigError("--sample " + std::to_string(o.sample) + " is out of range (held-out base split has " +
                        std::to_string(data.test_base.size()) + " samples)");
    }
    const ImageSample& s = data.test_base[o.sample];
    const bool image = o.branch == "image";
    const AdapterKind kind = image ? cfg.experiment.encoder.image_adapter : cfg.experiment.encoder.text_adapter;
    if (kind != AdapterKind::kDra) throw ConfigError("the " + o.branch + " branch carries no DRA adapters");

    Tape tape;
    EncodeOptions eo;
    eo.collect_reports = true;
    const Encoded enc = image ? encode_image(tape, model, s.tokens, eo)
                              : encode_text(tape, model, data.prompts[s.label], eo);

    const fs::path dir = ensure_out(o, "runs/analyze");
    std::ofstream csv(dir / "rank_report.csv", std::ios::binary);
    write_rank_report_header(csv, "sample,branch,layer");
    json layers = json::array();
    // Ground truth positions in sequence coordinates (image: after the class token).
    std::vector<std::size_t> planted;
    if (image) {
      for (auto p : s.foreground) planted.push_back(p + 1);
    } else {
      planted.push_back(cfg.experiment.task.keyword_position());
    }
    for (const auto& lr : enc.reports) {
      const std::string ctx = std::to_string(o.sample) + "," + o.branch + "," + std::to_string(lr.layer);
      write_rank_report_rows(csv, lr.report, ctx);
      std::vector<std::size_t> rank(lr.report.token_order.size());
      for (std::size_t pos = 0; pos < rank.size(); ++pos) rank[lr.report.token_order[pos]] = pos;
      json ranks = json::array();
      for (auto p : planted) ranks.push_back(rank[p]);
      layers.push_back({{"layer", lr.layer}, {"planted_positions", planted}, {"planted_ranks", ranks}});
      out << "layer " << lr.layer << " planted ranks";
      for (auto p : planted) out << ' ' << rank[p];
      out << " of " << rank.size() << "\n";
    }
    json j = {{"command", "analyze"}, {"fingerprint", fingerprint(cfg)}, {"sample", o.sample},
              {"branch", o.branch},   {"label", s.label},                  {"layers", layers}};
    write_text(dir / "analyze.json", j.dump(2) + "\n");
    out << "wrote " << (dir / "rank_report.csv").string() << "\n";
    return kExitOk;
  });
}

int cmd_gradcheck(const CommandOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(o);
    GradSuiteOptions so;
    so.seed = cfg.seed;
    so.inject_fault = o.inject_fault;
    const auto t0 = std::chrono::steady_clock::now();
    const auto entries = run_gradcheck_suite(so);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool ok = true;
    json rows = json::array();
    for (const auto& e : entries) {
      ok = ok && e.passed();
      out << (e.passed() ? "ok   " : "FAIL ") << std::left << std::setw(28) << e.name << " max_rel_err "
          << std::scientific << std::setprecision(3) << e.max_relative_error << " < " << e.threshold << "\n";
      rows.push_back({{"name", e.name}, {"max_relative_error", e.max_relative_error}, {"threshold", e.threshold},
                      {"passed", e.passed()}});
    }
    out << std::defaultfloat << entries.size() << " checks, " << (ok ? "all passed" : "FAILURES") << ", "
        << std::fixed << std::setprecision(2) << secs << "s\n";
    if (!o.out_dir.empty()) {
      const fs::path dir = ensure_out(o, "");
      write_text(dir / "gradcheck.json", json{{"checks", rows}, {"passed", ok}}.dump(2) + "\n");
    }
    return ok ? kExitOk : kExitCheckFailed;
  });
}

int cmd_ablate(const CommandOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(o);
    const std::string fp = fingerprint(cfg);
    const fs::path dir = ensure_out(o, "runs/ablate");
    std::vector<AblationVariant> variants;
    if (cfg.ablate.variants.empty()) {
      variants = component_variants();
    } else {
      for (const auto& name : cfg.ablate.variants) variants.push_back(find_variant(name));
    }
    const auto cells = ablation_matrix(cfg.experiment, variants, cfg.ablate.sweep, cfg.ablate.seeds, fp);
    {
      std::ofstream csv(dir / "ablation.csv", std::ios::binary);
      write_ablation_csv(csv, cells, fp);
    }
    {
      std::ofstream csv(dir / "metrics.csv", std::ios::binary);
      write_metrics_header(csv);
      for (const auto& c : cells)
        for (const auto& m : c.finals) write_metrics_row(csv, m);
    }
    json rows = json::array();
    for (const auto& c : cells) {
      rows.push_back({{"variant", c.variant},
                      {"K", c.sweep.groups},
                      {"ratios", c.sweep.ratios},
                      {"hm_mean", c.hm_mean},
                      {"hm_std", c.hm_std},
                      {"base_mean", c.base_mean},
                      {"new_mean", c.new_mean}});
      out << std::left << std::setw(16) << c.variant << " K=" << c.sweep.groups << " hm " << std::fixed
          << std::setprecision(4) << c.hm_mean << " +- " << c.hm_std << "\n";
    }
    write_text(dir / "summary.json", json{{"command", "ablate"}, {"fingerprint", fp}, {"cells", rows}}.dump(2) + "\n");
    return kExitOk;
  });
}

// ---------------------------------------------------------------- gradcheck suite

namespace {

Parameter random_param(const std::string& name, Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return Parameter(name, std::move(t));
}

// Values with |x| in [0.2, 1] so kinks at zero stay out of reach of the probe.
Parameter away_from_zero(const std::string& name, Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = (rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
  return Parameter(name, std::move(t));
}

// sum(y * W) with a fixed random W, so every output entry gets its own weight.
Var weighted(Tape& t, Var y, std::uint64_t salt) {
  Rng r(mix_seed(0x9e37, salt));
  Tensor w(y.shape());
  for (double& v : w.storage()) v = r.normal();
  return sum(mul(y, t.constant(std::move(w))));
}

struct Suite {
  std::vector<GradCheckEntry> entries;
  GradCheckOptions opts;

  void check(const std::string& name, double threshold, const ScalarTapeFunction& f,
             std::vector<Parameter*> inputs, std::size_t max_entries = 0) {
    GradCheckOptions o = opts;
    o.max_entries_per_input = max_entries;
    const GradCheckResult r = grad_check(f, inputs, o);
    entries.push_back({name, r.max_relative_error, threshold});
  }
};

// total_loss merges gradients from many tapes, so it is checked by perturbing
// parameters directly and re-running the loss.
double loss_gradient_error(ToyClipModel& model, const Batch& batch, std::size_t per_param) {
  LossOptions lo;
  lo.noise_seed = 11;
  model.set_all_trainable(true);
  model.zero_grad();
  total_loss(model, batch, lo);
  LossOptions fwd = lo;
  fwd.backward = false;
  double worst = 0.0;
  const double eps = 1e-5;
  for (Parameter* p : model.parameters()) {
    double peak = 0.0;
    for (std::size_t i = 0; i < p->grad.size(); ++i) peak = std::max(peak, std::abs(p->grad[i]));
    const std::size_t n = p->value.size();
    const std::size_t stride = std::max<std::size_t>(1, n / per_param);
    for (std::size_t i = 0; i < n; i += stride) {
      const double keep = p->value[i];
      p->value[i] = keep + eps;
      const double up = total_loss(model, batch, fwd).total;
      p->value[i] = keep - eps;
      const double down = total_loss(model, batch, fwd).total;
      p->value[i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3 * peak, 1e-12});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  model.set_all_trainable(false);
  return worst;
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(const GradSuiteOptions& options) {
  Suite s;
  Rng rng(mix_seed(options.seed, 0x6c));
  constexpr double kOp = 1e-6;
  constexpr double kPath = 1e-4;

  {
    Parameter a = random_param("a", {4, 5}, rng), b = random_param("b", {5, 3}, rng);
    s.check("op.matmul", kOp, [&](Tape& t) { return weighted(t, matmul(t.parameter(a), t.parameter(b)), 1); },
            {&a, &b});
  }
  {
    Parameter a = random_param("a", {4, 5}, rng), b = random_param("b", {4, 5}, rng);
    s.check("op.add", kOp, [&](Tape& t) { return weighted(t, add(t.parameter(a), t.parameter(b)), 2); }, {&a, &b});
    s.check("op.sub", kOp, [&](Tape& t) { return weighted(t, sub(t.parameter(a), t.parameter(b)), 3); }, {&a, &b});
    s.check("op.mul", kOp, [&](Tape& t) { return weighted(t, mul(t.parameter(a), t.parameter(b)), 4); }, {&a, &b});
    s.check("op.scale", kOp, [&](Tape& t) { return weighted(t, scale(t.parameter(a), 1.7), 5); }, {&a});
    s.check("op.transpose", kOp, [&](Tape& t) { return weighted(t, transpose(t.parameter(a)), 6); }, {&a});
    s.check("op.exp", kOp, [&](Tape& t) { return weighted(t, exp(t.parameter(a)), 7); }, {&a});
    s.check("op.sum", kOp, [&](Tape& t) { return scale(sum(t.parameter(a)), 0.3); }, {&a});
    s.check("op.softmax_rows", kOp, [&](Tape& t) { return weighted(t, softmax_rows(t.parameter(a)), 8); }, {&a});
    s.check("op.l2_normalize_rows", kOp, [&](Tape& t) { return weighted(t, l2_normalize_rows(t.parameter(a)), 9); },
            {&a});
    s.check("op.mean_rows", kOp, [&](Tape& t) { return weighted(t, mean_rows(t.parameter(a)), 10); }, {&a});
    s.check("op.mean_cols", kOp, [&](Tape& t) { return weighted(t, mean_cols(t.parameter(a)), 11); }, {&a});
    s.check("op.variance_cols", kOp, [&](Tape& t) { return weighted(t, variance_cols(t.parameter(a)), 12); }, {&a});
    Parameter k = random_param("s", {1}, rng);
    s.check("op.scale_by", kOp, [&](Tape& t) { return weighted(t, scale_by(t.parameter(a), t.parameter(k)), 13); },
            {&a, &k});
    const Permutation perm{2, 0, 3, 1};
    s.check("op.gather_rows", kOp, [&](Tape& t) { return weighted(t, gather_rows(t.parameter(a), perm), 14); },
            {&a});
    s.check("op.slice_rows", kOp, [&](Tape& t) { return weighted(t, slice_rows(t.parameter(a), 1, 2), 15); }, {&a});
    const std::vector<std::size_t> labels{0, 4, 2, 2};
    s.check("op.cross_entropy", kOp, [&](Tape& t) { return cross_entropy(t.parameter(a), labels); }, {&a});
  }
  {
    Parameter a = away_from_zero("a", {4, 5}, rng);
    s.check("op.relu", kOp, [&](Tape& t) { return weighted(t, relu(t.parameter(a)), 16); }, {&a});
    s.check("op.abs", kOp, [&](Tape& t) { return weighted(t, abs(t.parameter(a)), 17); }, {&a});
    Parameter p = random_param("p", {4, 5}, rng, 0.5, 2.0);
    s.check("op.log", kOp, [&](Tape& t) { return weighted(t, log(t.parameter(p)), 18); }, {&p});
  }
  {
    Parameter a = random_param("a", {2, 3}, rng), b = random_param("b", {3, 3}, rng);
    s.check("op.concat_rows", kOp,
            [&](Tape& t) {
              const Var parts[] = {t.parameter(a), t.parameter(b)};
              return weighted(t, concat_rows(parts), 19);
            },
            {&a, &b});
  }
  {
    Parameter x = random_param("x", {5, 6}, rng), g = random_param("gamma", {6}, rng, 0.5, 1.5),
              b = random_param("beta", {6}, rng);
    s.check("op.layer_norm_rows", kOp,
            [&](Tape& t) { return weighted(t, layer_norm_rows(t.parameter(x), t.parameter(g), t.parameter(b)), 20); },
            {&x, &g, &b});
  }

  // DRA training path with the routing decision (permutations, Gumbel draws)
  // computed once and then held fixed.
  {
    DraConfig cfg;
    cfg.rank = 8;
    cfg.scale = 0.5;
    DraAdapter ad = DraAdapter::create("dra", 12, cfg, rng);
    for (double& v : ad.up.value.storage()) v = rng.uniform(-0.5, 0.5);
    Parameter x = random_param("X", {16, 12}, rng);
    Tensor op_out = random_param("op", {16, 12}, rng).value;
    Rng noise(mix_seed(options.seed, 0x6d));
    const RankReport routing = compute_routing(ad, down_project(ad, x.value), &noise);
    std::vector<Parameter*> inputs{&ad.down, &ad.token, &ad.channel, &ad.proj, &ad.up, &x};
    s.check("dra.forward_train", kPath,
            [&](Tape& t) { return sum(forward_train(t, ad, t.parameter(x), t.constant(op_out), routing)); }, inputs);
    s.check("dra.forward_infer", kPath,
            [&](Tape& t) { return sum(forward_infer(t, ad, t.parameter(x), t.constant(op_out))); }, inputs);
  }

  // Encoder pieces on a small model.
  {
    EncoderConfig ec;
    ec.input_dim = 6;
    ec.d = 8;
    ec.n_heads = 2;
    ec.layers = 2;
    ec.first_dra_layer = 1;
    ec.image_tokens = 5;
    ec.text_tokens = 6;
    ec.dra.rank = 4;
    ec.dra.groups = 2;
    ec.dra.ratios = {1.0, 0.5};
    ec.dra.scale = 0.5;
    ToyClipModel model = ToyClipModel::create(ec, options.seed);
    for (Parameter* p : model.adapter_parameters())
      if (p->name.ends_with("W_u"))
        for (double& v : p->value.storage()) v = rng.uniform(-0.5, 0.5);
    TransformerBlock& block = model.image().blocks.front();
    Parameter x = random_param("X", {6, 8}, rng);
    std::vector<Parameter*> inputs = block.backbone_parameters();
    for (Parameter* p : block.adapter_parameters()) inputs.push_back(p);
    inputs.push_back(&x);
    s.check("encoder.block_train", kPath,
            [&](Tape& t) {
              Rng r(mix_seed(options.seed, 0x6e));
              BlockResult br = block_forward(t, block, t.parameter(x), Mode::kTrain, &r);
              return add(weighted(t, br.output, 21), *br.reg);
            },
            inputs, 12);
    s.check("encoder.block_infer", kPath,
            [&](Tape& t) {
              return weighted(t, block_forward(t, block, t.parameter(x), Mode::kInfer, nullptr).output, 22);
            },
            inputs, 12);

    std::vector<Tensor> images, prompts;
    Batch batch;
    for (std::size_t i = 0; i < 3; ++i) {
      images.push_back(random_param("img", {5, 6}, rng).value);
      prompts.push_back(random_param("txt", {6, 6}, rng).value);
    }
    for (std::size_t i = 0; i < 3; ++i) {
      batch.images.push_back(&images[i]);
      batch.prompts.push_back(&prompts[i]);
      batch.labels.push_back((i + 1) % 3);
    }
    s.entries.push_back({"encoder.total_loss", loss_gradient_error(model, batch, 3), kPath});
  }

  if (options.inject_fault) {
    // x^2 with a backward of 3x: the check has to catch it.
    Parameter a = random_param("a", {3, 3}, rng);
    s.check("fault_injection", kOp,
            [&](Tape& t) {
              Var in = t.parameter(a);
              Tensor y = t.value(in);
              for (double& v : y.storage()) v *= v;
              Var out = t.record(std::move(y), {in}, [in](Tape& tp, const Tensor& g) {
                const Tensor& xv = tp.value(in);
                Tensor& gx = tp.grad_slot(in);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 3.0 * xv[i] * g[i];
              });
              return weighted(t, out, 23);
            },
            {&a});
  }
  return s.entries;
}

}  // namespace dra
