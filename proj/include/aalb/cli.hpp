#pragma once

// The `aalb` command line: one subcommand per experiment, a JSON config file
// whose fields can be overridden by flags, and a one-line JSON summary on
// stdout listing every file written.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aalb/equivalence.hpp"
#include "aalb/eval.hpp"
#include "json.hpp"

namespace aalb {

enum class Experiment { Verify, Saliency, Curves, Fidelity, Ascent, Counterexample };

std::string_view experiment_name(Experiment e);
std::optional<Experiment> parse_experiment(std::string_view name);

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitVerificationFailed = 2;

struct RunConfig {
  Experiment experiment = Experiment::Verify;
  ModelConfig model;
  Method method = Method::AttentionEclip;
  Encoder encoder = Encoder::Image;
  std::vector<SurgerySite> surgery;  // empty: the experiment's default sites
  std::filesystem::path output_dir;
  std::vector<std::uint64_t> seeds;  // empty: 0..49

  int trials = 100;
  EquivalenceTolerances tolerances;
  int steps = 10;
  int text_k = 5;
  int grid_size = 4;
  int layer = -1;
  AscentOptions ascent;
  double k2_scale = 1.0;

  std::optional<std::filesystem::path> weights_in;
  std::optional<std::filesystem::path> weights_out;
  // Set when any model field was given explicitly, so a weights file can
  // refuse to be combined with them.
  std::optional<std::string> model_field_set;
};

/// "0-49", "3,5,8" or a mix ("0-9,20"). Ranges are inclusive.
std::vector<std::uint64_t> parse_seeds(std::string_view text);

/// "image:-1,text:-1": encoder:layer pairs.
std::vector<SurgerySite> parse_surgery(std::string_view text);

/// Overlays the fields of a config document onto `base`. Unknown fields and
/// type mismatches throw aalb::UsageError naming the field.
RunConfig apply_config_json(const nlohmann::json& doc, RunConfig base);

/// Checks experiment-specific requirements before anything is computed.
void validate_run_config(const RunConfig& config);

/// Runs the experiment and writes its artifacts. Returns the summary that
/// run() prints; "pass" decides the exit code for verification experiments.
nlohmann::json execute(const RunConfig& config);

/// args excludes the program name.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace aalb
