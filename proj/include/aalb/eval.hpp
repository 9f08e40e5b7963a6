#pragma once

// Faithfulness and fidelity protocols at token granularity.
//
// Deletion replaces image rows with seeded random feature rows and text
// tokens with kMaskToken, in descending score order. Insertion starts from an
// all-zero image (or all-mask text) and restores tokens in the same order.
// With `steps` requested, each step moves ceil(T / steps) tokens.

#include <cstdint>
#include <span>
#include <vector>

#include "aalb/model.hpp"
#include "aalb/saliency.hpp"

namespace aalb {

enum class Direction { Deletion, Insertion };
enum class Policy { MethodRanked, Random };

std::string_view direction_name(Direction d);
std::string_view policy_name(Policy p);

struct CurvePoint {
  std::size_t step = 0;
  double fraction = 0.0;
  double output = 0.0;
};

struct EvalCurve {
  std::vector<CurvePoint> points;
  Policy policy = Policy::MethodRanked;
  Direction direction = Direction::Deletion;
  Encoder encoder = Encoder::Image;
};

/// Trapezoid rule over (fraction, output).
double area_under_curve(const EvalCurve& curve);

/// Per-position replacement rows used when image tokens are deleted.
Tensor image_filler(const ModelConfig& config, std::uint64_t seed);

/// Copy of `sample` with the given positions of one encoder removed.
Sample delete_tokens(const Sample& sample, Encoder encoder, std::span<const std::size_t> positions,
                     const Tensor& filler);

EvalCurve deletion_curve(const Weights& weights, const Sample& sample, const SaliencyMap& map,
                         int steps = 10, std::uint64_t filler_seed = 0);
EvalCurve insertion_curve(const Weights& weights, const Sample& sample, const SaliencyMap& map,
                          int steps = 10);
/// Masks one text token per step, k steps in total.
EvalCurve text_deletion_curve(const Weights& weights, const Sample& sample, const SaliencyMap& map,
                              int k = 5);

/// Occlusion scores: the output drop caused by deleting each token alone.
/// Ranking by these is the best possible first deletion step.
SaliencyMap occlusion_map(const Weights& weights, const Sample& sample, Encoder encoder,
                          std::uint64_t filler_seed = 0);

struct SurgerySite {
  Encoder encoder = Encoder::Image;
  int layer = -1;
};

Weights apply_surgery(const Weights& weights, std::span<const SurgerySite> sites);

struct FidelityGrid {
  Tensor original;  // images x texts
  Tensor surgered;
  Tensor delta;     // surgered - original
  double diagonal_dominance_original = 0.0;
  double diagonal_dominance_surgered = 0.0;
};

/// Fraction of rows i < min(rows, cols) whose matched cell (i, i) strictly
/// beats every other cell in the row.
double diagonal_dominance(const Tensor& grid);

FidelityGrid fidelity_grid(std::span<const Tensor> images, std::span<const std::vector<int>> texts,
                           const Weights& weights, std::span<const SurgerySite> surgery);

struct AscentOptions {
  double step_size = 0.01;
  int n_steps = 100;
  // Clamp at zero and renormalize rows after every step. Off means raw
  // gradient steps on A.
  bool project = true;
};

struct AscentStep {
  int step = 0;
  double output = 0.0;
  Tensor attention;             // N x N
  Tensor grad_times_attention;  // N x N
};

struct AscentLog {
  std::vector<AscentStep> steps;
  double step_size = 0.0;
  int n_steps = 0;
  bool projected = true;
  bool diverged = false;
  Encoder encoder = Encoder::Image;
  int layer = 0;
};

/// Gradient ascent on the attention map of one single-head layer, all other
/// parameters frozen. Stops early with diverged = true if the output stops
/// being finite.
AscentLog ascent_experiment(const Weights& weights, const Sample& sample, Encoder encoder,
                            int layer_index, const AscentOptions& options = {});

/// Index of the largest non-cls entry in the cls row.
std::size_t cls_row_top1(const Tensor& square);

/// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
double sign_test_p_value(int wins, int losses);

// ---------------------------------------------------------------------------
// Seed-ensemble studies. Each seed builds its own model (config.seed = seed),
// samples with make_sample, and surgers the last layer of both encoders
// whenever a method needs it.

struct FaithfulnessTrial {
  std::uint64_t seed = 0;
  double deletion_auc_method = 0.0, deletion_auc_random = 0.0;
  double insertion_auc_method = 0.0, insertion_auc_random = 0.0;
  EvalCurve deletion_method, deletion_random, insertion_method, insertion_random;
};

struct FaithfulnessSummary {
  Method method = Method::AttentionEclip;
  Encoder encoder = Encoder::Image;
  std::vector<FaithfulnessTrial> trials;
  int deletion_wins = 0, deletion_losses = 0;
  int insertion_wins = 0, insertion_losses = 0;
  double deletion_p = 1.0, insertion_p = 1.0;
};

/// Resolved, sorted, de-duplicated layers of `encoder` named in `sites`.
std::vector<int> surgered_layers(const ModelConfig& config, std::span<const SurgerySite> sites,
                                 Encoder encoder);

/// Saliency map for `method` on the model that method interprets (surgered
/// for the ECLIP variants, original for GAE). The ECLIP variants sum over
/// `layers`, or use the last layer when it is empty.
SaliencyMap compute_map(const Weights& original, const Weights& surgered, const Sample& sample,
                        Method method, Encoder encoder, std::span<const int> layers = {});

/// An empty `surgery` means the last layer of both encoders.
FaithfulnessSummary faithfulness_study(const ModelConfig& base, std::span<const std::uint64_t> seeds,
                                       Method method, Encoder encoder, int steps = 10,
                                       std::span<const SurgerySite> surgery = {});

struct TextDeletionSummary {
  std::vector<double> mean_method;  // per step
  std::vector<double> mean_random;
  int n_seeds = 0;
};

TextDeletionSummary text_deletion_study(const ModelConfig& base, std::span<const std::uint64_t> seeds,
                                        Method method, int k = 5,
                                        std::span<const SurgerySite> surgery = {});

struct FidelitySummary {
  std::vector<FidelityGrid> grids;  // one per seed
  double fraction_changed = 0.0;    // seeds where any cell moved
  double mean_dominance_original = 0.0;
  double mean_dominance_surgered = 0.0;
};

/// `grid_size` samples per seed. An empty `surgery` means the last image
/// layer.
FidelitySummary fidelity_study(const ModelConfig& base, std::span<const std::uint64_t> seeds,
                               int grid_size = 4, std::span<const SurgerySite> surgery = {});

struct AscentTrial {
  std::uint64_t seed = 0;
  AscentLog log;
  bool monotone_first_10 = false;
  bool top1_aligned = false;
};

struct AscentSummary {
  std::vector<AscentTrial> trials;
  int monotone = 0;
  int aligned = 0;
};

AscentSummary ascent_study(const ModelConfig& base, std::span<const std::uint64_t> seeds,
                           const AscentOptions& options);

}  // namespace aalb
