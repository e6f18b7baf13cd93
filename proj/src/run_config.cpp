#include "dra/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace dra {

using nlohmann::json;

// Toy-scale defaults. The struct defaults keep the full-scale values; at this
// size those leave the adapters frozen in place, so the toy task trains hotter.
RunConfig RunConfig::defaults() {
  RunConfig c;
  Experiment& e = c.experiment;
  e.encoder.first_dra_layer = 1;
  e.encoder.dra.scale = 1.0;
  e.task.noise = 1.0;
  e.task.shift = 1.0;
  e.plan.learning_rate = 1.0;
  e.plan.lambda_text = e.plan.lambda_image = 1e-4;
  e.pretrain.steps = 200;
  return c;
}

namespace {

json tree_of(const RunConfig& c) {
  const Experiment& e = c.experiment;
  const DraConfig& d = e.encoder.dra;
  json sweep = json::array();
  for (const auto& s : c.ablate.sweep) sweep.push_back({{"K", s.groups}, {"ratios", s.ratios}});
  return {
      {"seed", c.seed},
      {"precision", to_string(e.precision)},
      {"threads", c.threads},
      {"dra",
       {{"r", d.rank},
        {"K", d.groups},
        {"ratios", d.ratios},
        {"s", d.scale},
        {"attention_dim", d.attention_scale_dim},
        {"gumbel", d.gumbel},
        {"channel_response", d.channel_response}}},
      {"encoder",
       {{"d", e.encoder.d},
        {"n_heads", e.encoder.n_heads},
        {"L", e.encoder.layers},
        {"h", e.encoder.first_dra_layer},
        {"embed_dim", e.encoder.embed_dim},
        {"temperature_init", e.encoder.temperature_init},
        {"image_adapter", to_string(e.encoder.image_adapter)},
        {"text_adapter", to_string(e.encoder.text_adapter)}}},
      {"task",
       {{"n_classes", e.task.n_classes},
        {"base_fraction", e.task.base_fraction},
        {"shots", e.task.shots},
        {"test_per_class", e.task.test_per_class},
        {"image_tokens", e.task.image_tokens},
        {"n_foreground", e.task.n_foreground},
        {"text_tokens", e.task.text_tokens},
        {"template_length", e.task.template_length},
        {"feature_dim", e.task.feature_dim},
        {"noise", e.task.noise},
        {"background_scale", e.task.background_scale},
        {"shift", e.task.shift},
        {"world_seed", e.task.world_seed}}},
      {"train",
       {{"lr", e.plan.learning_rate},
        {"epochs", e.plan.epochs},
        {"batch", e.plan.batch_size},
        {"lambda_T", e.plan.lambda_text},
        {"lambda_V", e.plan.lambda_image}}},
      {"pretrain",
       {{"steps", e.pretrain.steps},
        {"lr", e.pretrain.learning_rate},
        {"batch", e.pretrain.batch_size},
        {"seed", e.pretrain.seed}}},
      {"ablate", {{"seeds", c.ablate.seeds}, {"variants", c.ablate.variants}, {"sweep", sweep}}},
  };
}

const json& at(const json& t, const std::string& path) {
  const json* node = &t;
  std::size_t start = 0;
  while (start <= path.size()) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) throw ConfigError(path + ": missing");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return *node;
}

std::uint64_t get_u(const json& t, const std::string& path) {
  const json& v = at(t, path);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw ConfigError(path + ": expected a non-negative integer, got " + v.dump());
}

double get_d(const json& t, const std::string& path) {
  const json& v = at(t, path);
  if (!v.is_number()) throw ConfigError(path + ": expected a number, got " + v.dump());
  return v.get<double>();
}

bool get_b(const json& t, const std::string& path) {
  const json& v = at(t, path);
  if (!v.is_boolean()) throw ConfigError(path + ": expected true or false, got " + v.dump());
  return v.get<bool>();
}

std::string get_s(const json& t, const std::string& path) {
  const json& v = at(t, path);
  if (!v.is_string()) throw ConfigError(path + ": expected a string, got " + v.dump());
  return v.get<std::string>();
}

std::vector<double> get_dv(const json& t, const std::string& path) {
  const json& v = at(t, path);
  if (!v.is_array()) throw ConfigError(path + ": expected an array of numbers, got " + v.dump());
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError(path + "[" + std::to_string(i) + "]: expected a number");
    out.push_back(v[i].get<double>());
  }
  return out;
}

RunConfig from_tree(const json& t) {
  RunConfig c;
  Experiment& e = c.experiment;
  c.seed = get_u(t, "seed");
  e.precision = parse_precision(get_s(t, "precision"));
  {
    const json& v = at(t, "threads");
    if (!v.is_number_integer()) throw ConfigError("threads: expected an integer");
    c.threads = v.get<int>();
  }

  DraConfig& d = e.encoder.dra;
  d.rank = get_u(t, "dra.r");
  d.groups = get_u(t, "dra.K");
  d.ratios = get_dv(t, "dra.ratios");
  d.scale = get_d(t, "dra.s");
  d.attention_scale_dim = get_u(t, "dra.attention_dim");
  d.gumbel = get_b(t, "dra.gumbel");
  d.channel_response = get_b(t, "dra.channel_response");

  e.encoder.d = get_u(t, "encoder.d");
  e.encoder.n_heads = get_u(t, "encoder.n_heads");
  e.encoder.layers = get_u(t, "encoder.L");
  e.encoder.first_dra_layer = get_u(t, "encoder.h");
  e.encoder.embed_dim = get_u(t, "encoder.embed_dim");
  e.encoder.temperature_init = get_d(t, "encoder.temperature_init");
  e.encoder.image_adapter = parse_adapter_kind(get_s(t, "encoder.image_adapter"));
  e.encoder.text_adapter = parse_adapter_kind(get_s(t, "encoder.text_adapter"));

  SyntheticTaskSpec& k = e.task;
  k.n_classes = get_u(t, "task.n_classes");
  k.base_fraction = get_d(t, "task.base_fraction");
  k.shots = get_u(t, "task.shots");
  k.test_per_class = get_u(t, "task.test_per_class");
  k.image_tokens = get_u(t, "task.image_tokens");
  k.n_foreground = get_u(t, "task.n_foreground");
  k.text_tokens = get_u(t, "task.text_tokens");
  k.template_length = get_u(t, "task.template_length");
  k.feature_dim = get_u(t, "task.feature_dim");
  k.noise = get_d(t, "task.noise");
  k.background_scale = get_d(t, "task.background_scale");
  k.shift = get_d(t, "task.shift");
  k.world_seed = get_u(t, "task.world_seed");
  k.seed = c.seed;

  e.plan.learning_rate = get_d(t, "train.lr");
  e.plan.epochs = get_u(t, "train.epochs");
  e.plan.batch_size = get_u(t, "train.batch");
  e.plan.lambda_text = get_d(t, "train.lambda_T");
  e.plan.lambda_image = get_d(t, "train.lambda_V");

  e.pretrain.steps = get_u(t, "pretrain.steps");
  e.pretrain.learning_rate = get_d(t, "pretrain.lr");
  e.pretrain.batch_size = get_u(t, "pretrain.batch");
  e.pretrain.seed = get_u(t, "pretrain.seed");

  const json& seeds = at(t, "ablate.seeds");
  if (!seeds.is_array()) throw ConfigError("ablate.seeds: expected an array");
  c.ablate.seeds.clear();
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!seeds[i].is_number_integer() || seeds[i].get<std::int64_t>() < 0)
      throw ConfigError("ablate.seeds[" + std::to_string(i) + "]: expected a non-negative integer");
    c.ablate.seeds.push_back(seeds[i].get<std::uint64_t>());
  }
  const json& variants = at(t, "ablate.variants");
  if (!variants.is_array()) throw ConfigError("ablate.variants: expected an array");
  c.ablate.variants.clear();
  for (std::size_t i = 0; i < variants.size(); ++i) {
    if (!variants[i].is_string()) throw ConfigError("ablate.variants[" + std::to_string(i) + "]: expected a string");
    c.ablate.variants.push_back(variants[i].get<std::string>());
    find_variant(c.ablate.variants.back());
  }
  const json& sweep = at(t, "ablate.sweep");
  if (!sweep.is_array()) throw ConfigError("ablate.sweep: expected an array");
  c.ablate.sweep.clear();
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    const std::string p = "ablate.sweep[" + std::to_string(i) + "]";
    if (!sweep[i].is_object()) throw ConfigError(p + ": expected an object with K and ratios");
    for (const auto& [key, _] : sweep[i].items())
      if (key != "K" && key != "ratios") throw ConfigError(p + "." + key + ": unknown key");
    SweepEntry s;
    s.groups = get_u(sweep[i], "K");
    s.ratios = get_dv(sweep[i], "ratios");
    DraConfig check = d;
    check.groups = s.groups;
    check.ratios = s.ratios;
    try {
      check.validate();
    } catch (const ConfigError& err) {
      throw ConfigError(p + ": " + err.what());
    }
    c.ablate.sweep.push_back(std::move(s));
  }

  e.encoder.validate();
  e.task.validate();
  e.plan.validate();
  if (e.pretrain.steps > 0 && e.pretrain.batch_size < 2) throw ConfigError("pretrain.batch: must be >= 2");
  return c;
}

// Copies user values over the defaults tree. Only keys that exist in the
// defaults are accepted; arrays and leaves are replaced wholesale.
void merge(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError((prefix.empty() ? "config" : prefix) + ": expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError(path + ": unknown key");
    if (base[key].is_object()) {
      merge(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace

std::string to_json(const RunConfig& cfg, int indent) { return tree_of(cfg).dump(indent); }

RunConfig parse_run_config(const std::string& json_text) {
  json user;
  try {
    user = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json tree = tree_of(RunConfig::defaults());
  merge(tree, user, "");
  return from_tree(tree);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json tree = tree_of(cfg);
  json* node = &tree;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError(key + ": unknown key");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) {
    json patched = *node;
    merge(patched, value, key);
    *node = patched;
  } else {
    *node = value;
  }
  cfg = from_tree(tree);
}

std::string fingerprint(const RunConfig& cfg) {
  const std::string canon = tree_of(cfg).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dra
