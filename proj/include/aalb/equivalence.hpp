#pragma once

// Numerical check that the gradient of the output with respect to the cls
// row of a single-head attention map equals the feature-gradient sum
// sum_dim(dOut/dV_after[cls] * V_i), and that the two attribution pipelines
// therefore produce the same maps.

#include <cstdint>
#include <vector>

#include "aalb/model.hpp"

namespace aalb {

/// |a - b| / max(|a|, |b|, 1e-10)
double relative_error(double a, double b);

/// Per-token relative error between dOut/dA[cls, 1:] and the feature-gradient
/// sum for one single-head layer.
std::vector<double> verify_grad_identity(const ModelOutput& output, Encoder encoder, int layer_index);

struct ConfigSpace {
  std::vector<int> d_models{8, 16, 32};
  std::vector<int> heads{1, 2, 4};
  std::vector<int> tokens{4, 8, 16};
  int n_layers = 4;
  std::uint64_t base_seed = 0;

  /// Config for trial i: the sweep is walked cyclically, seed = base_seed + i.
  ModelConfig config_for_trial(int trial) const;
};

struct EquivalenceTolerances {
  double stage1 = 1e-10;
  double full = 1e-6;
};

struct TrialRecord {
  std::uint64_t seed = 0;
  ModelConfig config;
  double stage1_error = 0.0;
  double full_error = 0.0;
};

struct EquivalenceReport {
  int n_trials = 0;
  double max_rel_error_stage1 = 0.0;
  double max_rel_error_full = 0.0;
  EquivalenceTolerances tolerances;
  std::vector<TrialRecord> trials;
  bool pass = false;
};

/// Each trial surgers the last layer of both encoders, then compares the
/// identity and the grad-eclip / attention-eclip maps on image and text.
EquivalenceReport verify_full_equivalence(int trials, const ConfigSpace& space = {},
                                          const EquivalenceTolerances& tolerances = {});

struct CounterexampleVerdict {
  Tensor q_cls;       // 1 x 2
  Tensor keys;        // 2 x 2
  Tensor raw_scores;  // q k^T, 1 x 2
  Tensor softmax;     // softmax of raw scores
  Tensor cosines;     // cos(q, k_i)
  Tensor weights;     // min-max of the cosines
  bool softmax_prefers_second = false;  // A_1 < A_2
  bool weights_prefer_first = false;    // w_1 > w_2
  bool second_weight_zero = false;
  bool pass = false;
};

/// q_cls = [1, 0], k_1 = [0.8, 0.6], k_2 = k2_scale * [1.414, 1.414].
CounterexampleVerdict two_key_counterexample(double k2_scale = 1.0);

}  // namespace aalb
