#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "doctest.h"
#include "dra/benchmark.hpp"

using namespace dra;

namespace {

Experiment tiny_experiment() {
  Experiment e;
  e.task.n_classes = 6;
  e.task.shots = 4;
  e.task.test_per_class = 3;
  e.task.image_tokens = 6;
  e.task.n_foreground = 2;
  e.task.text_tokens = 5;
  e.task.template_length = 2;
  e.task.feature_dim = 8;
  e.encoder.d = 16;
  e.encoder.n_heads = 2;
  e.encoder.layers = 2;
  e.encoder.first_dra_layer = 1;
  e.encoder.dra.rank = 4;
  e.encoder.dra.groups = 2;
  e.encoder.dra.ratios = {1.0, 0.5};
  e.encoder.dra.scale = 1.0;
  e.plan.epochs = 2;
  e.plan.batch_size = 8;
  e.plan.learning_rate = 0.5;
  e.plan.lambda_text = e.plan.lambda_image = 1e-3;
  e.pretrain.steps = 4;
  e.pretrain.batch_size = 4;
  return e;
}

std::vector<Tensor> snapshot(ToyClipModel& m) {
  std::vector<Tensor> out;
  for (Parameter* p : m.parameters()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_CASE("generate") {
  SyntheticTaskSpec spec;
  const SyntheticDataset a = generate(spec), b = generate(spec);
  CHECK(a.base_classes.size() == 10);
  CHECK(a.new_classes.size() == 10);
  std::set<std::size_t> base(a.base_classes.begin(), a.base_classes.end());
  for (std::size_t c : a.new_classes) CHECK(base.count(c) == 0);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].tokens == b.train[i].tokens);
    CHECK(a.train[i].foreground == b.train[i].foreground);
  }
  for (std::size_t i = 0; i < a.test_new.size(); ++i) CHECK(a.test_new[i].tokens == b.test_new[i].tokens);

  // Exactly `shots` training samples per base class, none for new classes.
  std::map<std::size_t, std::size_t> per_class;
  for (const auto& s : a.train) ++per_class[s.label];
  CHECK(per_class.size() == 10);
  for (auto [c, n] : per_class) {
    CHECK(base.count(c) == 1);
    CHECK(n == 16);
  }
  for (const auto& s : a.train) CHECK(s.foreground.size() == 4);

  spec.seed = 2;
  CHECK(generate(spec).train[0].tokens != a.train[0].tokens);
}

TEST_CASE("zero noise gives identical foreground tokens") {
  SyntheticTaskSpec spec;
  spec.noise = 0.0;
  const SyntheticDataset d = generate(spec);
  const std::size_t c = d.base_classes[0];
  std::optional<Tensor> ref;
  for (const auto& s : d.train) {
    if (s.label != c) continue;
    for (std::size_t p : s.foreground) {
      const Tensor row = Tensor::vector(std::vector<double>(s.tokens.row(p).begin(), s.tokens.row(p).end()));
      if (!ref) ref = row;
      CHECK(row == *ref);
    }
  }
}

TEST_CASE("task validation") {
  SyntheticTaskSpec s;
  s.n_foreground = 17;
  CHECK_THROWS_AS(generate(s), ConfigError);
  s = {};
  s.base_fraction = 1.0;
  CHECK_THROWS_AS(generate(s), ConfigError);
  s = {};
  s.template_length = 16;
  CHECK_THROWS_AS(generate(s), ConfigError);
}

TEST_CASE("learning rate schedule") {
  TrainPlan p;
  CHECK(p.learning_rate_at(0, 50) == 0.0015);
  CHECK(p.learning_rate_at(25, 50) == doctest::Approx(0.00075).epsilon(1e-12));
  CHECK(p.learning_rate_at(50, 50) < 1e-6 * 0.0015);
  for (std::size_t k = 0; k <= 50; ++k)
    CHECK(p.learning_rate_at(k, 50) == doctest::Approx(0.0015 * 0.5 * (1 + std::cos(M_PI * k / 50.0))).epsilon(1e-12));
  CHECK(p.steps_per_epoch(160) == 10);
  CHECK(p.steps_per_epoch(161) == 11);
}

TEST_CASE("harmonic mean") {
  CHECK(std::abs(harmonic_mean(83.06, 77.75) - 80.32) < 0.01);
  CHECK(harmonic_mean(0.4, 0.4) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(harmonic_mean(100, 0) == 0.0);
  CHECK_THROWS_AS(harmonic_mean(0, 0), NumericError);
  CHECK_THROWS_AS(harmonic_mean(-1, 0.5), ContractError);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform_open(), b = rng.uniform_open();
    const double h = harmonic_mean(a, b);
    CHECK(h >= std::min(a, b) - 1e-15);
    CHECK(h <= (a + b) / 2 + 1e-15);
    CHECK(h <= 1.0);
  }
}

TEST_CASE("evaluate") {
  const Experiment e = tiny_experiment();
  SyntheticTaskSpec spec = e.task;
  const SyntheticDataset d = generate(spec);
  ToyClipModel m = ToyClipModel::create(e.resolved_encoder(), 3);
  const double base = evaluate(m, d, Split::kBase);
  CHECK(base >= 0.0);
  CHECK(base <= 1.0);

  std::vector<const Tensor*> images, prompts;
  std::vector<std::size_t> labels;
  for (std::size_t c : d.base_classes) prompts.push_back(&d.prompts[c]);
  for (const auto& s : d.test_base) {
    images.push_back(&s.tokens);
    labels.push_back(static_cast<std::size_t>(
        std::find(d.base_classes.begin(), d.base_classes.end(), s.label) - d.base_classes.begin()));
  }
  CHECK(evaluate(m, images, labels, prompts) == base);

  SUBCASE("relabeling prompts and labels consistently changes nothing") {
    const std::vector<std::size_t> perm{2, 0, 1};
    std::vector<const Tensor*> shuffled(prompts.size());
    std::vector<std::size_t> where(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      shuffled[perm[i]] = prompts[i];
      where[i] = perm[i];
    }
    std::vector<std::size_t> relabeled;
    for (std::size_t l : labels) relabeled.push_back(where[l]);
    CHECK(evaluate(m, images, relabeled, shuffled) == base);
  }
  SUBCASE("a single correctly classified sample scores 1") {
    const Tensor probs = class_probabilities(embed_image(m, *images[0]),
                                             [&] {
                                               Tensor w = Tensor::matrix(prompts.size(), m.config().output_dim());
                                               for (std::size_t c = 0; c < prompts.size(); ++c) {
                                                 const Tensor t = embed_text(m, *prompts[c]);
                                                 std::copy(t.data().begin(), t.data().end(), w.row(c).begin());
                                               }
                                               return w;
                                             }(),
                                             m.temperature());
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.size(); ++c)
      if (probs[c] > probs[best]) best = c;
    CHECK(evaluate(m, {images[0]}, {best}, prompts) == 1.0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(evaluate(m, {}, {}, prompts), ContractError);
    CHECK_THROWS_AS(evaluate(m, images, {0}, prompts), DimensionError);
  }
  SUBCASE("identical prompts tie and fall back to the first class") {
    std::vector<const Tensor*> same(prompts.size(), prompts[0]);
    std::vector<std::size_t> zeros(images.size(), 0);
    CHECK(evaluate(m, images, zeros, same) == 1.0);
  }
}

TEST_CASE("training") {
  Experiment e = tiny_experiment();
  ToyClipModel backbone = pretrained_backbone(e);

  SUBCASE("zero epochs and zero learning rate leave the model unchanged") {
    for (int which = 0; which < 2; ++which) {
      Experiment z = e;
      if (which == 0) z.plan.epochs = 0;
      else z.plan.learning_rate = 0.0;
      SyntheticTaskSpec spec = z.task;
      const SyntheticDataset d = generate(spec);
      ToyClipModel m = ToyClipModel::create(z.resolved_encoder(), 1);
      copy_backbone(backbone, m);
      const auto before = snapshot(m);
      const TrainResult r = train(m, d, z.plan, RunLabel{1, "t", ""});
      CHECK(snapshot(m) == before);
      CHECK(r.history.size() == z.plan.epochs + 1);
    }
  }
  SUBCASE("step count and records") {
    const RunResult r = run_experiment(e, RunLabel{1, "dra", "fp"}, &backbone);
    // 12 base samples in batches of 8: two steps per epoch.
    CHECK(r.result.steps == 4);
    REQUIRE(r.result.history.size() == 3);
    for (const auto& m : r.result.history) {
      CHECK(m.fingerprint == "fp");
      CHECK(m.base_acc >= 0.0);
      CHECK(m.new_acc <= 1.0);
      if (m.base_acc + m.new_acc > 0) CHECK(m.hm == harmonic_mean(m.base_acc, m.new_acc));
      CHECK(std::isfinite(m.loss_ce));
    }
    CHECK(r.result.history[1].epoch == 1);
  }
  SUBCASE("same seed twice is bitwise identical") {
    const RunResult a = run_experiment(e, RunLabel{3, "dra", ""}, &backbone);
    const RunResult b = run_experiment(e, RunLabel{3, "dra", ""}, &backbone);
    std::ostringstream sa, sb;
    for (const auto& m : a.result.history) write_metrics_row(sa, m);
    for (const auto& m : b.result.history) write_metrics_row(sb, m);
    CHECK(sa.str() == sb.str());
    ToyClipModel ma = a.model, mb = b.model;
    CHECK(snapshot(ma) == snapshot(mb));
  }
  SUBCASE("only adapters move") {
    RunResult r = run_experiment(e, RunLabel{2, "dra", ""}, &backbone);
    for (Parameter* p : r.model.backbone_parameters()) CHECK(p->value == backbone.find(p->name)->value);
    bool moved = false;
    ToyClipModel fresh = ToyClipModel::create(e.resolved_encoder(), 2);
    for (Parameter* p : r.model.adapter_parameters()) moved |= p->value != fresh.find(p->name)->value;
    CHECK(moved);
  }
  SUBCASE("non-finite loss aborts with a diagnostic") {
    Experiment bad = e;
    bad.plan.learning_rate = 1e250;
    CHECK_THROWS_AS(run_experiment(bad, RunLabel{1, "x", ""}, &backbone), DivergenceError);
  }
}

TEST_CASE("ablation grid") {
  const auto vs = component_variants();
  CHECK(vs.size() == 8);
  const AblationVariant b = find_variant("baseline");
  CHECK(b.image == AdapterKind::kFixed);
  CHECK(b.text == AdapterKind::kFixed);
  CHECK_FALSE(b.channel_response);
  CHECK_FALSE(b.reg);
  CHECK_THROWS_AS(find_variant("nope"), ConfigError);

  const Experiment e = tiny_experiment();
  const Experiment cr_off = apply_variant(e, find_variant("dra_tv_reg"), SweepEntry{2, {1.0, 0.5}});
  CHECK_FALSE(cr_off.encoder.dra.channel_response);
  CHECK(cr_off.plan.lambda_text == e.plan.lambda_text);
  const Experiment no_reg = apply_variant(e, find_variant("dra_tv_cr"), SweepEntry{2, {1.0, 0.5}});
  CHECK(no_reg.plan.lambda_text == 0.0);
  CHECK(no_reg.plan.lambda_image == 0.0);

  SUBCASE("one seed, one variant, one sweep entry gives one row") {
    Experiment fast = e;
    fast.plan.epochs = 1;
    const auto cells = ablation_matrix(fast, {find_variant("dra_tv_cr_reg")}, {SweepEntry{2, {1.0, 0.5}}}, {1});
    REQUIRE(cells.size() == 1);
    CHECK(cells[0].finals.size() == 1);
    CHECK(cells[0].hm_std == 0.0);
    CHECK(cells[0].hm_mean == cells[0].finals[0].hm);
  }
  SUBCASE("rows = variants x sweep") {
    Experiment fast = e;
    fast.plan.epochs = 0;
    const std::vector<SweepEntry> sweep{{2, {1.0, 0.5}}, {1, {1.0}}, {2, {1.0, 1.0}}};
    const auto cells = ablation_matrix(fast, {find_variant("zero_shot"), find_variant("dra_tv")}, sweep, {1, 2});
    CHECK(cells.size() == 6);
    for (const auto& c : cells) CHECK(c.finals.size() == 2);
    std::ostringstream os;
    write_ablation_csv(os, cells, "abc");
    std::size_t lines = 0;
    for (char ch : os.str()) lines += ch == '\n';
    CHECK(lines == 7);
  }
  CHECK_THROWS_AS(ablation_matrix(e, vs, {SweepEntry{}}, {}), ConfigError);
}

TEST_CASE("metrics csv") {
  std::ostringstream os;
  write_metrics_header(os);
  CHECK(os.str() == "seed,config,epoch,split,base_acc,new_acc,hm,loss_ce,loss_reg_T,loss_reg_V\n");
  MetricsRecord r;
  r.seed = 4;
  r.config = "abc";
  r.epoch = 2;
  r.base_acc = 0.1;
  write_metrics_row(os, r);
  CHECK(os.str().find("4,abc,2,test,0.10000000000000001,") != std::string::npos);
  CHECK(format_double(0.5) == "0.5");
}
