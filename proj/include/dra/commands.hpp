#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dra/run_config.hpp"

namespace dra {

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2, kExitDiverged = 3 };

struct CommandOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  std::string out_dir;
  std::vector<std::string> sets;

  std::string checkpoint;  // eval, analyze
  std::size_t sample = 0;  // analyze: index into the held-out base split
  std::string branch = "image";
  bool inject_fault = false;  // gradcheck
};

// Defaults, then the config file, then --set, then --seed / --precision.
RunConfig resolve_config(const CommandOptions& options);

int cmd_train(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_eval(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_analyze(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_ablate(const CommandOptions& options, std::ostream& out, std::ostream& err);

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  double threshold = 0.0;
  bool passed() const noexcept { return max_relative_error < threshold; }
};

struct GradSuiteOptions {
  std::uint64_t seed = 1;
  bool inject_fault = false;  // adds a deliberately wrong backward that must fail
};

// Per-op checks (threshold 1e-6), DRA training path with frozen routing and
// the encoder block / loss paths (threshold 1e-4).
std::vector<GradCheckEntry> run_gradcheck_suite(const GradSuiteOptions& options);

}  // namespace dra
