#include "aalb/equivalence.hpp"

#include <algorithm>
#include <cmath>

#include "aalb/ops.hpp"
#include "aalb/saliency.hpp"

namespace aalb {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-10});
}

std::vector<double> verify_grad_identity(const ModelOutput& output, Encoder encoder,
                                         int layer_index) {
  const AttentionTrace& tr = output.trace(encoder, layer_index);
  const LayerGradients g = output_gradients(output, encoder, layer_index);
  const Tensor features = grad_eclip_stage1(ops::slice(g.d_v_after, 0, 1, 0, tr.v.cols()), tr.v);
  std::vector<double> errors(features.numel());
  for (std::size_t i = 0; i < features.numel(); ++i) {
    // Row 0 of head 0 is the cls row; column i + 1 skips the cls column.
    errors[i] = relative_error(g.d_attention[i + 1], features[i]);
  }
  return errors;
}

ModelConfig ConfigSpace::config_for_trial(int trial) const {
  const auto t = static_cast<std::size_t>(trial);
  ModelConfig c;
  c.d_model = d_models[t % d_models.size()];
  c.n_heads = heads[(t / d_models.size()) % heads.size()];
  const int n_tok = tokens[(t / (d_models.size() * heads.size())) % tokens.size()];
  c.n_img_tokens = n_tok;
  c.n_txt_tokens = n_tok;
  c.n_layers_img = n_layers;
  c.n_layers_txt = n_layers;
  c.seed = base_seed + t;
  return c;
}

namespace {

double max_map_error(const SaliencyMap& a, const SaliencyMap& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a.scores[i], b.scores[i]));
  return worst;
}

}  // namespace

EquivalenceReport verify_full_equivalence(int trials, const ConfigSpace& space,
                                          const EquivalenceTolerances& tolerances) {
  if (trials < 1) throw UsageError("verify_full_equivalence: trials must be >= 1");
  EquivalenceReport report;
  report.n_trials = trials;
  report.tolerances = tolerances;
  for (int t = 0; t < trials; ++t) {
    TrialRecord rec;
    rec.config = space.config_for_trial(t);
    rec.seed = rec.config.seed;
    Weights w = init_model(rec.config);
    w = to_single_head(w, Encoder::Image, -1);
    w = to_single_head(w, Encoder::Text, -1);
    const Sample sample = make_sample(w, rec.seed);
    const ModelOutput out = forward_pair(w, sample);
    const GradientMap grads = backward(*out.record, out.root);
    for (Encoder e : {Encoder::Image, Encoder::Text}) {
      for (double err : verify_grad_identity(out, e, -1)) rec.stage1_error = std::max(rec.stage1_error, err);
      const int layers[] = {-1};
      const SaliencyMap g = grad_eclip(out, grads, e, layers);
      const SaliencyMap a = attention_eclip(out, grads, e, layers);
      rec.full_error = std::max(rec.full_error, max_map_error(g, a));
    }
    report.max_rel_error_stage1 = std::max(report.max_rel_error_stage1, rec.stage1_error);
    report.max_rel_error_full = std::max(report.max_rel_error_full, rec.full_error);
    report.trials.push_back(rec);
  }
  report.pass = report.max_rel_error_stage1 <= tolerances.stage1 &&
                report.max_rel_error_full <= tolerances.full;
  return report;
}

CounterexampleVerdict two_key_counterexample(double k2_scale) {
  CounterexampleVerdict v;
  v.q_cls = Tensor::row({1.0, 0.0});
  v.keys = Tensor::matrix({{0.8, 0.6}, {1.414 * k2_scale, 1.414 * k2_scale}});
  v.raw_scores = ops::matmul_transposed(v.q_cls, v.keys);
  v.softmax = ops::softmax_rows(v.raw_scores);
  v.cosines = ops::matmul_transposed(ops::l2_normalize(v.q_cls).values, ops::l2_normalize(v.keys).values);
  v.weights = qk_weight_map(v.q_cls, v.keys);
  v.softmax_prefers_second = v.softmax[0] < v.softmax[1];
  v.weights_prefer_first = v.weights[0] > v.weights[1];
  v.second_weight_zero = v.weights[1] == 0.0;
  v.pass = v.softmax_prefers_second && v.weights_prefer_first && v.second_weight_zero;
  return v;
}

}  // namespace aalb
