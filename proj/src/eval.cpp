#include "aalb/eval.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "aalb/ops.hpp"
#include "aalb/rng.hpp"

namespace aalb {

std::string_view direction_name(Direction d) {
  return d == Direction::Deletion ? "deletion" : "insertion";
}

std::string_view policy_name(Policy p) {
  return p == Policy::Random ? "random" : "method-ranked";
}

double area_under_curve(const EvalCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += 0.5 * (b.fraction - a.fraction) * (a.output + b.output);
  }
  return area;
}

Tensor image_filler(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xf111));
  return rng.normal_tensor({static_cast<std::size_t>(config.n_img_tokens),
                            static_cast<std::size_t>(config.d_model)},
                           1.0);
}

Sample delete_tokens(const Sample& sample, Encoder encoder, std::span<const std::size_t> positions,
                     const Tensor& filler) {
  Sample out = sample;
  for (std::size_t p : positions) {
    if (encoder == Encoder::Image) {
      auto src = filler.row_span(p);
      std::copy(src.begin(), src.end(), out.image_tokens.row_span(p).begin());
    } else {
      out.text_tokens.at(p) = kMaskToken;
    }
  }
  return out;
}

namespace {

Policy policy_for(const SaliencyMap& map) {
  return map.method == Method::Random ? Policy::Random : Policy::MethodRanked;
}

std::size_t checked_tokens(const Weights& weights, const SaliencyMap& map) {
  const auto expected = static_cast<std::size_t>(weights.config.tokens(map.encoder));
  if (map.size() != expected) {
    throw DimensionError("saliency map has " + std::to_string(map.size()) + " scores but the " +
                         std::string(encoder_name(map.encoder)) + " encoder has " +
                         std::to_string(expected) + " tokens");
  }
  return expected;
}

Sample blank_sample(const Sample& sample, Encoder encoder) {
  Sample out = sample;
  if (encoder == Encoder::Image) {
    out.image_tokens = Tensor::zeros(sample.image_tokens.shape());
  } else {
    std::fill(out.text_tokens.begin(), out.text_tokens.end(), kMaskToken);
  }
  return out;
}

void restore_tokens(Sample& target, const Sample& source, Encoder encoder,
                    std::span<const std::size_t> positions) {
  for (std::size_t p : positions) {
    if (encoder == Encoder::Image) {
      auto src = source.image_tokens.row_span(p);
      std::copy(src.begin(), src.end(), target.image_tokens.row_span(p).begin());
    } else {
      target.text_tokens[p] = source.text_tokens[p];
    }
  }
}

std::vector<std::size_t> step_counts(std::size_t n_tokens, int steps) {
  if (steps < 1) throw UsageError("curve steps must be >= 1");
  const std::size_t chunk = (n_tokens + static_cast<std::size_t>(steps) - 1) / static_cast<std::size_t>(steps);
  std::vector<std::size_t> counts;
  for (std::size_t n = 0;; n += chunk) {
    counts.push_back(std::min(n, n_tokens));
    if (counts.back() == n_tokens) break;
  }
  return counts;
}

}  // namespace

EvalCurve deletion_curve(const Weights& weights, const Sample& sample, const SaliencyMap& map,
                         int steps, std::uint64_t filler_seed) {
  const std::size_t n_tokens = checked_tokens(weights, map);
  const auto order = ranking(map);
  const Tensor filler = image_filler(weights.config, filler_seed);
  EvalCurve curve{{}, policy_for(map), Direction::Deletion, map.encoder};
  const auto counts = step_counts(n_tokens, steps);
  for (std::size_t k = 0; k < counts.size(); ++k) {
    const Sample s = delete_tokens(sample, map.encoder, std::span(order).first(counts[k]), filler);
    curve.points.push_back({k, static_cast<double>(counts[k]) / static_cast<double>(n_tokens),
                            forward_pair(weights, s).similarity});
  }
  return curve;
}

EvalCurve insertion_curve(const Weights& weights, const Sample& sample, const SaliencyMap& map,
                          int steps) {
  const std::size_t n_tokens = checked_tokens(weights, map);
  const auto order = ranking(map);
  EvalCurve curve{{}, policy_for(map), Direction::Insertion, map.encoder};
  const auto counts = step_counts(n_tokens, steps);
  for (std::size_t k = 0; k < counts.size(); ++k) {
    Sample s = blank_sample(sample, map.encoder);
    restore_tokens(s, sample, map.encoder, std::span(order).first(counts[k]));
    curve.points.push_back({k, static_cast<double>(counts[k]) / static_cast<double>(n_tokens),
                            forward_pair(weights, s).similarity});
  }
  return curve;
}

EvalCurve text_deletion_curve(const Weights& weights, const Sample& sample, const SaliencyMap& map,
                              int k) {
  if (map.encoder != Encoder::Text) throw UsageError("text_deletion_curve needs a text saliency map");
  const std::size_t n_tokens = checked_tokens(weights, map);
  if (k < 0 || static_cast<std::size_t>(k) > n_tokens) {
    throw UsageError("text_deletion_curve: k=" + std::to_string(k) + " but the text has " +
                     std::to_string(n_tokens) + " tokens");
  }
  const auto order = ranking(map);
  const Tensor unused;
  EvalCurve curve{{}, policy_for(map), Direction::Deletion, Encoder::Text};
  for (std::size_t step = 0; step <= static_cast<std::size_t>(k); ++step) {
    const Sample s = delete_tokens(sample, Encoder::Text, std::span(order).first(step), unused);
    curve.points.push_back({step, static_cast<double>(step) / static_cast<double>(n_tokens),
                            forward_pair(weights, s).similarity});
  }
  return curve;
}

SaliencyMap occlusion_map(const Weights& weights, const Sample& sample, Encoder encoder,
                          std::uint64_t filler_seed) {
  const double base = forward_pair(weights, sample).similarity;
  const Tensor filler = image_filler(weights.config, filler_seed);
  const auto n = static_cast<std::size_t>(weights.config.tokens(encoder));
  SaliencyMap map;
  map.encoder = encoder;
  map.method = Method::Occlusion;
  map.scores = Tensor({n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t one[] = {i};
    map.scores[i] = base - forward_pair(weights, delete_tokens(sample, encoder, one, filler)).similarity;
  }
  return map;
}

Weights apply_surgery(const Weights& weights, std::span<const SurgerySite> sites) {
  Weights out = weights;
  for (const auto& site : sites) out = to_single_head(out, site.encoder, site.layer);
  return out;
}

double diagonal_dominance(const Tensor& grid) {
  require_rank2(grid, "diagonal_dominance");
  const std::size_t n = std::min(grid.rows(), grid.cols());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool best = true;
    for (std::size_t j = 0; j < grid.cols(); ++j) {
      if (j != i && grid.at(i, j) >= grid.at(i, i)) best = false;
    }
    hits += best ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

FidelityGrid fidelity_grid(std::span<const Tensor> images, std::span<const std::vector<int>> texts,
                           const Weights& weights, std::span<const SurgerySite> surgery) {
  if (images.empty() || texts.empty()) throw UsageError("fidelity_grid needs images and texts");
  const Weights modified = apply_surgery(weights, surgery);
  FidelityGrid g;
  g.original = Tensor({images.size(), texts.size()});
  g.surgered = Tensor({images.size(), texts.size()});
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j = 0; j < texts.size(); ++j) {
      g.original.at(i, j) = forward_pair(weights, images[i], texts[j]).similarity;
      g.surgered.at(i, j) = forward_pair(modified, images[i], texts[j]).similarity;
    }
  }
  g.delta = ops::add(g.surgered, ops::scale(g.original, -1.0));
  g.diagonal_dominance_original = diagonal_dominance(g.original);
  g.diagonal_dominance_surgered = diagonal_dominance(g.surgered);
  return g;
}

namespace {

void project_rows(Tensor& a, std::size_t n) {
  for (std::size_t r = 0; r < a.numel() / n; ++r) {
    double* row = a.data().data() + r * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::max(row[j], 0.0);
      s += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] = s > 0.0 ? row[j] / s : 1.0 / static_cast<double>(n);
  }
}

}  // namespace

AscentLog ascent_experiment(const Weights& weights, const Sample& sample, Encoder encoder,
                            int layer_index, const AscentOptions& options) {
  const int layer = resolve_layer(weights.config, encoder, layer_index);
  if (weights.encoder(encoder).layers[static_cast<std::size_t>(layer)].head_mode != HeadMode::Single) {
    throw UsageError("ascent_experiment: " + std::string(encoder_name(encoder)) + " layer " +
                     std::to_string(layer) + " must be single-head");
  }
  if (!(options.step_size >= 0.0) || options.n_steps < 0) {
    throw UsageError("ascent_experiment: step_size must be >= 0 and n_steps >= 0");
  }
  AscentLog log;
  log.step_size = options.step_size;
  log.n_steps = options.n_steps;
  log.projected = options.project;
  log.encoder = encoder;
  log.layer = layer;

  Tensor a = forward_pair(weights, sample).trace(encoder, layer).attention;
  const std::size_t n = a.dim(1);
  for (int step = 0; step <= options.n_steps; ++step) {
    ForwardOptions fo;
    fo.attention_override = AttentionOverride{encoder, layer, a};
    const ModelOutput out = forward_pair(weights, sample, fo);
    if (!std::isfinite(out.similarity) || !a.all_finite()) {
      log.diverged = true;
      break;
    }
    const Tensor g = output_gradients(out, encoder, layer).d_attention;
    log.steps.push_back({step, out.similarity, a.reshaped({n, n}), ops::hadamard(g, a).reshaped({n, n})});
    if (step == options.n_steps) break;
    a = ops::add(a, ops::scale(g, options.step_size));
    if (options.project) project_rows(a, n);
  }
  return log;
}

std::size_t cls_row_top1(const Tensor& square) {
  std::size_t best = 1;
  for (std::size_t j = 2; j < square.cols(); ++j) {
    if (square.at(0, j) > square.at(0, best)) best = j;
  }
  return best - 1;
}

double sign_test_p_value(int wins, int losses) {
  const int n = wins + losses;
  if (n == 0) return 1.0;
  double p = 0.0;
  for (int i = wins; i <= n; ++i) {
    const double log_c = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0);
    p += std::exp(log_c - n * std::log(2.0));
  }
  return std::min(p, 1.0);
}

// ---------------------------------------------------------------------------

namespace {

const SurgerySite kLastLayers[] = {{Encoder::Image, -1}, {Encoder::Text, -1}};

bool needs_surgery(Method m) { return m == Method::GradEclip || m == Method::AttentionEclip; }

struct SeedModel {
  Weights original;
  Weights surgered;
  Sample sample;
};

std::span<const SurgerySite> or_default(std::span<const SurgerySite> sites,
                                        std::span<const SurgerySite> fallback) {
  return sites.empty() ? fallback : sites;
}

SeedModel seed_model(const ModelConfig& base, std::uint64_t seed, std::span<const SurgerySite> surgery) {
  ModelConfig c = base;
  c.seed = seed;
  SeedModel m{init_model(c), {}, {}};
  m.surgered = apply_surgery(m.original, surgery);
  m.sample = make_sample(m.original, seed);
  return m;
}

}  // namespace

std::vector<int> surgered_layers(const ModelConfig& config, std::span<const SurgerySite> sites,
                                 Encoder encoder) {
  std::vector<int> layers;
  for (const auto& s : sites) {
    if (s.encoder == encoder) layers.push_back(resolve_layer(config, encoder, s.layer));
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

SaliencyMap compute_map(const Weights& original, const Weights& surgered, const Sample& sample,
                        Method method, Encoder encoder, std::span<const int> layers) {
  const int last[] = {-1};
  if (layers.empty()) layers = last;
  switch (method) {
    case Method::GradEclip:
    case Method::AttentionEclip: {
      const ModelOutput out = forward_pair(surgered, sample);
      const GradientMap grads = backward(*out.record, out.root);
      return method == Method::GradEclip ? grad_eclip(out, grads, encoder, layers)
                                         : attention_eclip(out, grads, encoder, layers);
    }
    case Method::Gae: return gae(forward_pair(original, sample), encoder);
    case Method::Occlusion: return occlusion_map(original, sample, encoder);
    case Method::Random:
      return random_map(encoder, static_cast<std::size_t>(original.config.tokens(encoder)),
                        original.config.seed);
  }
  throw UsageError("unknown method");
}

FaithfulnessSummary faithfulness_study(const ModelConfig& base, std::span<const std::uint64_t> seeds,
                                       Method method, Encoder encoder, int steps,
                                       std::span<const SurgerySite> surgery) {
  surgery = or_default(surgery, kLastLayers);
  FaithfulnessSummary summary;
  summary.method = method;
  summary.encoder = encoder;
  for (std::uint64_t seed : seeds) {
    const SeedModel m = seed_model(base, seed, surgery);
    const Weights& model = needs_surgery(method) ? m.surgered : m.original;
    const SaliencyMap map = compute_map(m.original, m.surgered, m.sample, method, encoder,
                                        surgered_layers(m.original.config, surgery, encoder));
    const SaliencyMap rnd = random_map(encoder, map.size(), seed);
    FaithfulnessTrial t;
    t.seed = seed;
    t.deletion_method = deletion_curve(model, m.sample, map, steps, seed);
    t.deletion_random = deletion_curve(model, m.sample, rnd, steps, seed);
    t.insertion_method = insertion_curve(model, m.sample, map, steps);
    t.insertion_random = insertion_curve(model, m.sample, rnd, steps);
    t.deletion_auc_method = area_under_curve(t.deletion_method);
    t.deletion_auc_random = area_under_curve(t.deletion_random);
    t.insertion_auc_method = area_under_curve(t.insertion_method);
    t.insertion_auc_random = area_under_curve(t.insertion_random);
    if (t.deletion_auc_method < t.deletion_auc_random) ++summary.deletion_wins;
    if (t.deletion_auc_method > t.deletion_auc_random) ++summary.deletion_losses;
    if (t.insertion_auc_method > t.insertion_auc_random) ++summary.insertion_wins;
    if (t.insertion_auc_method < t.insertion_auc_random) ++summary.insertion_losses;
    summary.trials.push_back(std::move(t));
  }
  summary.deletion_p = sign_test_p_value(summary.deletion_wins, summary.deletion_losses);
  summary.insertion_p = sign_test_p_value(summary.insertion_wins, summary.insertion_losses);
  return summary;
}

TextDeletionSummary text_deletion_study(const ModelConfig& base, std::span<const std::uint64_t> seeds,
                                        Method method, int k, std::span<const SurgerySite> surgery) {
  surgery = or_default(surgery, kLastLayers);
  TextDeletionSummary s;
  s.mean_method.assign(static_cast<std::size_t>(k) + 1, 0.0);
  s.mean_random.assign(static_cast<std::size_t>(k) + 1, 0.0);
  for (std::uint64_t seed : seeds) {
    const SeedModel m = seed_model(base, seed, surgery);
    const Weights& model = needs_surgery(method) ? m.surgered : m.original;
    const SaliencyMap map = compute_map(m.original, m.surgered, m.sample, method, Encoder::Text,
                                        surgered_layers(m.original.config, surgery, Encoder::Text));
    const SaliencyMap rnd = random_map(Encoder::Text, map.size(), seed);
    const EvalCurve cm = text_deletion_curve(model, m.sample, map, k);
    const EvalCurve cr = text_deletion_curve(model, m.sample, rnd, k);
    for (std::size_t i = 0; i <= static_cast<std::size_t>(k); ++i) {
      s.mean_method[i] += cm.points[i].output;
      s.mean_random[i] += cr.points[i].output;
    }
    ++s.n_seeds;
  }
  for (std::size_t i = 0; i < s.mean_method.size(); ++i) {
    s.mean_method[i] /= static_cast<double>(s.n_seeds);
    s.mean_random[i] /= static_cast<double>(s.n_seeds);
  }
  return s;
}

FidelitySummary fidelity_study(const ModelConfig& base, std::span<const std::uint64_t> seeds,
                               int grid_size, std::span<const SurgerySite> surgery) {
  const SurgerySite image_last[] = {{Encoder::Image, -1}};
  surgery = or_default(surgery, image_last);
  FidelitySummary s;
  int changed = 0;
  for (std::uint64_t seed : seeds) {
    ModelConfig c = base;
    c.seed = seed;
    const Weights w = init_model(c);
    std::vector<Tensor> images;
    std::vector<std::vector<int>> texts;
    for (int i = 0; i < grid_size; ++i) {
      Sample smp = make_sample(w, mix_seed(seed, static_cast<std::uint64_t>(i)));
      images.push_back(std::move(smp.image_tokens));
      texts.push_back(std::move(smp.text_tokens));
    }
    FidelityGrid g = fidelity_grid(images, texts, w, surgery);
    bool any = false;
    for (double v : g.delta.data()) any = any || v != 0.0;
    changed += any ? 1 : 0;
    s.mean_dominance_original += g.diagonal_dominance_original;
    s.mean_dominance_surgered += g.diagonal_dominance_surgered;
    s.grids.push_back(std::move(g));
  }
  const double n = static_cast<double>(seeds.size());
  s.fraction_changed = changed / n;
  s.mean_dominance_original /= n;
  s.mean_dominance_surgered /= n;
  return s;
}

AscentSummary ascent_study(const ModelConfig& base, std::span<const std::uint64_t> seeds,
                           const AscentOptions& options) {
  AscentSummary s;
  const SurgerySite image_last[] = {{Encoder::Image, -1}};
  for (std::uint64_t seed : seeds) {
    ModelConfig c = base;
    c.seed = seed;
    const Weights w = apply_surgery(init_model(c), image_last);
    const Sample smp = make_sample(w, seed);
    AscentTrial t;
    t.seed = seed;
    t.log = ascent_experiment(w, smp, Encoder::Image, -1, options);
    const auto& st = t.log.steps;
    t.monotone_first_10 = st.size() >= 11;
    for (std::size_t i = 1; i < std::min<std::size_t>(st.size(), 11); ++i) {
      if (st[i].output < st[i - 1].output) t.monotone_first_10 = false;
    }
    if (!st.empty()) {
      t.top1_aligned = cls_row_top1(st.back().grad_times_attention) == cls_row_top1(st.back().attention);
    }
    s.monotone += t.monotone_first_10 ? 1 : 0;
    s.aligned += t.top1_aligned ? 1 : 0;
    s.trials.push_back(std::move(t));
  }
  return s;
}

}  // namespace aalb
