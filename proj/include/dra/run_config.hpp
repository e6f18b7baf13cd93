#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dra/benchmark.hpp"

namespace dra {

struct AblationPlan {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<std::string> variants;  // empty means all component variants
  std::vector<SweepEntry> sweep{SweepEntry{}};
};

// Everything a CLI run needs, resolved from defaults, an optional JSON file
// and --set overrides (applied in that order).
struct RunConfig {
  Experiment experiment;
  AblationPlan ablate;
  std::uint64_t seed = 1;
  int threads = 0;  // 0 leaves the OpenMP default

  static RunConfig defaults();
};

// Full settings tree with every key present.
std::string to_json(const RunConfig& cfg, int indent = 2);

// Unknown keys and wrongly typed values throw ConfigError naming the path.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// KEY=VALUE with a dotted KEY. VALUE is parsed as JSON and falls back to a
// plain string, so `--set encoder.image_adapter=fixed` works unquoted.
void apply_override(RunConfig& cfg, const std::string& assignment);

// 16 hex digits of FNV-1a over the canonical settings dump.
std::string fingerprint(const RunConfig& cfg);

}  // namespace dra
