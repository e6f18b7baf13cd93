#include <algorithm>
#include <cmath>

#include "dra/benchmark.hpp"

namespace dra {

void SyntheticTaskSpec::validate() const {
  if (n_classes < 2) throw ConfigError("task.n_classes: must be >= 2");
  if (!(base_fraction > 0.0 && base_fraction < 1.0)) throw ConfigError("task.base_fraction: must be in (0, 1)");
  const std::size_t nb = n_base();
  if (nb < 1 || nb >= n_classes) throw ConfigError("task.base_fraction: leaves an empty base or new split");
  if (shots < 1) throw ConfigError("task.shots: must be >= 1");
  if (test_per_class < 1) throw ConfigError("task.test_per_class: must be >= 1");
  if (image_tokens < 1) throw ConfigError("task.image_tokens: must be >= 1");
  if (n_foreground > image_tokens) throw ConfigError("task.n_foreground: exceeds task.image_tokens");
  if (template_length + 1 > text_tokens) throw ConfigError("task.template_length: keyword does not fit in text_tokens");
  if (feature_dim < 1) throw ConfigError("task.feature_dim: must be >= 1");
  if (!(noise >= 0.0)) throw ConfigError("task.noise: must be >= 0");
  if (!(background_scale >= 0.0)) throw ConfigError("task.background_scale: must be >= 0");
  if (!std::isfinite(shift)) throw ConfigError("task.shift: must be finite");
}

std::size_t SyntheticTaskSpec::n_base() const {
  return static_cast<std::size_t>(std::llround(base_fraction * static_cast<double>(n_classes)));
}

namespace {

Tensor normal_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.storage()) v = rng.normal();
  return t;
}

// Gram-Schmidt on the rows of a Gaussian matrix.
Tensor random_orthogonal(Rng& rng, std::size_t n) {
  Tensor q = normal_matrix(rng, n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += q.at(i, j) * q.at(k, j);
      for (std::size_t j = 0; j < n; ++j) q.at(i, j) -= dot * q.at(k, j);
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < n; ++j) norm += q.at(i, j) * q.at(i, j);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < n; ++j) q.at(i, j) /= norm;
  }
  return q;
}

}  // namespace

TaskWorld make_world(const SyntheticTaskSpec& spec) {
  Rng rng(mix_seed(spec.world_seed, 100));
  TaskWorld w;
  w.text_rotation = random_orthogonal(rng, spec.feature_dim);
  w.template_tokens = normal_matrix(rng, spec.template_length == 0 ? 1 : spec.template_length, spec.feature_dim);
  w.pad_token = Tensor({spec.feature_dim});
  for (double& v : w.pad_token.storage()) v = rng.normal();
  w.style = Tensor({spec.feature_dim});
  double norm = 0.0;
  for (double& v : w.style.storage()) {
    v = rng.normal();
    norm += v * v;
  }
  for (double& v : w.style.storage()) v /= std::sqrt(norm);
  return w;
}

Tensor sample_concept(const SyntheticTaskSpec& spec, Rng& rng) {
  Tensor z({spec.feature_dim});
  for (double& v : z.storage()) v = rng.normal();
  return z;
}

ImageSample sample_image(const SyntheticTaskSpec& spec, const Tensor& latent, std::size_t label, Rng& rng) {
  ImageSample s;
  s.label = label;
  std::vector<std::size_t> positions(spec.image_tokens);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  rng.shuffle(std::span<std::size_t>(positions));
  s.foreground.assign(positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(spec.n_foreground));
  std::sort(s.foreground.begin(), s.foreground.end());

  s.tokens = Tensor::matrix(spec.image_tokens, spec.feature_dim);
  std::vector<char> is_fg(spec.image_tokens, 0);
  for (auto p : s.foreground) is_fg[p] = 1;
  for (std::size_t i = 0; i < spec.image_tokens; ++i) {
    for (std::size_t j = 0; j < spec.feature_dim; ++j) {
      const double eps = rng.normal();
      s.tokens.at(i, j) = is_fg[i] ? latent[j] + spec.noise * eps : spec.background_scale * eps;
    }
  }
  return s;
}

Tensor make_prompt(const SyntheticTaskSpec& spec, const TaskWorld& world, const Tensor& latent) {
  const std::size_t f = spec.feature_dim;
  Tensor p = Tensor::matrix(spec.text_tokens, f);
  for (std::size_t i = 0; i < spec.template_length; ++i)
    for (std::size_t j = 0; j < f; ++j) p.at(i, j) = world.template_tokens.at(i, j);
  const std::size_t kw = spec.keyword_position();
  for (std::size_t j = 0; j < f; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < f; ++k) acc += world.text_rotation.at(j, k) * latent[k];
    p.at(kw, j) = acc;
  }
  for (std::size_t i = kw + 1; i < spec.text_tokens; ++i)
    for (std::size_t j = 0; j < f; ++j) p.at(i, j) = world.pad_token[j];
  return p;
}

SyntheticDataset generate(const SyntheticTaskSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.spec = spec;
  ds.world = make_world(spec);

  Rng concept_rng(mix_seed(spec.seed, 101));
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    ds.concepts.push_back(sample_concept(spec, concept_rng));
    ds.prompts.push_back(make_prompt(spec, ds.world, ds.concepts.back()));
  }

  std::vector<std::size_t> classes(spec.n_classes);
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  Rng split_rng(mix_seed(spec.seed, 102));
  split_rng.shuffle(std::span<std::size_t>(classes));
  const std::size_t nb = spec.n_base();
  ds.base_classes.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(nb));
  ds.new_classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(nb), classes.end());

  const std::uint64_t sample_stream = mix_seed(spec.seed, 103);
  for (std::size_t c : ds.base_classes) {
    Rng rng(mix_seed(sample_stream, c));
    for (std::size_t s = 0; s < spec.shots; ++s) ds.train.push_back(sample_image(spec, ds.concepts[c], c, rng));
    for (std::size_t s = 0; s < spec.test_per_class; ++s)
      ds.test_base.push_back(sample_image(spec, ds.concepts[c], c, rng));
  }
  for (std::size_t c : ds.new_classes) {
    Rng rng(mix_seed(sample_stream, c));
    for (std::size_t s = 0; s < spec.test_per_class; ++s)
      ds.test_new.push_back(sample_image(spec, ds.concepts[c], c, rng));
  }
  // The downstream domain differs from pretraining by a fixed offset.
  if (spec.shift != 0.0) {
    for (auto* split : {&ds.train, &ds.test_base, &ds.test_new})
      for (ImageSample& s : *split)
        for (std::size_t i = 0; i < s.tokens.rows(); ++i)
          for (std::size_t j = 0; j < s.tokens.cols(); ++j) s.tokens.at(i, j) += spec.shift * ds.world.style[j];
  }
  return ds;
}

}  // namespace dra
