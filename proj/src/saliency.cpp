#include "aalb/saliency.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "aalb/ops.hpp"
#include "aalb/rng.hpp"

namespace aalb {

std::string_view method_name(Method m) {
  switch (m) {
    case Method::GradEclip: return "grad-eclip";
    case Method::AttentionEclip: return "attention-eclip";
    case Method::Gae: return "gae";
    case Method::Random: return "random";
    case Method::Occlusion: return "occlusion";
  }
  return "unknown";
}

std::optional<Method> parse_method(std::string_view name) {
  for (auto m : {Method::GradEclip, Method::AttentionEclip, Method::Gae, Method::Random,
                 Method::Occlusion}) {
    if (method_name(m) == name) return m;
  }
  return std::nullopt;
}

Tensor grad_eclip_stage1(const Tensor& d_v_after_cls, const Tensor& v) {
  require_rank2(v, "grad_eclip_stage1");
  const std::size_t d = v.cols();
  if (d_v_after_cls.numel() != d) {
    throw DimensionError("grad_eclip_stage1: gradient has " + std::to_string(d_v_after_cls.numel()) +
                         " entries but V is " + shape_to_string(v.shape()));
  }
  if (v.rows() < 2) throw DimensionError("grad_eclip_stage1: V needs a cls row and tokens");
  const Tensor g = d_v_after_cls.reshaped({1, d});
  Tensor scores({v.rows() - 1});
  for (std::size_t i = 1; i < v.rows(); ++i) {
    const Tensor prod = ops::hadamard(g, ops::slice(v, i, i + 1, 0, d));
    scores[i - 1] = ops::sum(prod);
  }
  return scores;
}

Tensor qk_weight_map(const Tensor& q_cls, const Tensor& k_tokens) {
  require_rank2(k_tokens, "qk_weight_map");
  const std::size_t d = k_tokens.cols();
  if (q_cls.numel() != d) {
    throw DimensionError("qk_weight_map: q_cls has " + std::to_string(q_cls.numel()) +
                         " entries but keys are " + shape_to_string(k_tokens.shape()));
  }
  if (k_tokens.rows() < 2) throw InputError("qk_weight_map: min-max needs at least two tokens");
  const Tensor q = ops::l2_normalize(q_cls.reshaped({1, d})).values;
  const Tensor k = ops::l2_normalize(k_tokens).values;
  const Tensor cos = ops::matmul_transposed(q, k);
  return ops::min_max(cos.reshaped({k_tokens.rows()}));
}

namespace {

const AttentionTrace& single_head_trace(const ModelOutput& output, Encoder encoder, int layer,
                                        const char* method) {
  const AttentionTrace& tr = output.trace(encoder, layer);
  if (tr.head_mode != HeadMode::Single) {
    throw UsageError(std::string(method) + ": " + std::string(encoder_name(encoder)) + " layer " +
                     std::to_string(tr.layer) +
                     " is multi-head; apply to_single_head before attributing it");
  }
  return tr;
}

Tensor eclip_weights(const AttentionTrace& tr) {
  const std::size_t n = tr.q.rows();
  const std::size_t d = tr.q.cols();
  return qk_weight_map(ops::slice(tr.q, 0, 1, 0, d), ops::slice(tr.k, 1, n, 0, d));
}

enum class Stage1 { Features, Attention };

SaliencyMap eclip(const ModelOutput& output, const GradientMap& grads, Encoder encoder,
                  std::span<const int> layers, Aggregation aggregation, Stage1 route) {
  if (layers.empty()) throw UsageError("no layers given to attribute");
  const char* name = route == Stage1::Features ? "grad_eclip" : "attention_eclip";
  SaliencyMap map;
  map.encoder = encoder;
  map.method = route == Stage1::Features ? Method::GradEclip : Method::AttentionEclip;
  for (int layer : layers) {
    const AttentionTrace& tr = single_head_trace(output, encoder, layer, name);
    const LayerGradients g = output_gradients(output, grads, encoder, tr.layer);
    const std::size_t n = tr.v.rows();
    Tensor stage1;
    if (route == Stage1::Features) {
      stage1 = grad_eclip_stage1(ops::slice(g.d_v_after, 0, 1, 0, tr.v.cols()), tr.v);
    } else {
      stage1 = Tensor({n - 1});
      for (std::size_t i = 1; i < n; ++i) stage1[i - 1] = g.d_attention[i];
    }
    const Tensor layer_scores = ops::hadamard(stage1, eclip_weights(tr));
    if (map.scores.numel() == 0) {
      map.scores = layer_scores;
    } else {
      map.scores = ops::add(map.scores, layer_scores);
    }
    map.layer_indices.push_back(tr.layer);
  }
  if (aggregation == Aggregation::Mean && layers.size() > 1) {
    map.scores = ops::scale(map.scores, 1.0 / static_cast<double>(layers.size()));
  }
  return map;
}

}  // namespace

SaliencyMap grad_eclip(const ModelOutput& output, const GradientMap& grads, Encoder encoder,
                       std::span<const int> layer_indices, Aggregation aggregation) {
  return eclip(output, grads, encoder, layer_indices, aggregation, Stage1::Features);
}

SaliencyMap grad_eclip(const ModelOutput& output, Encoder encoder, int layer_index) {
  single_head_trace(output, encoder, layer_index, "grad_eclip");
  const int layers[] = {layer_index};
  return grad_eclip(output, backward(*output.record, output.root), encoder, layers);
}

SaliencyMap attention_eclip(const ModelOutput& output, const GradientMap& grads, Encoder encoder,
                            std::span<const int> layer_indices, Aggregation aggregation) {
  return eclip(output, grads, encoder, layer_indices, aggregation, Stage1::Attention);
}

SaliencyMap attention_eclip(const ModelOutput& output, Encoder encoder, int layer_index) {
  single_head_trace(output, encoder, layer_index, "attention_eclip");
  const int layers[] = {layer_index};
  return attention_eclip(output, backward(*output.record, output.root), encoder, layers);
}

Tensor gae_layer_update(const Tensor& attention, const Tensor& d_attention, bool normalize_rows) {
  require_same_shape(attention, d_attention, "gae_layer_update");
  if (attention.rank() != 3 || attention.dim(1) != attention.dim(2)) {
    throw DimensionError("gae_layer_update: expected H x N x N, got " +
                         shape_to_string(attention.shape()));
  }
  const std::size_t heads = attention.dim(0);
  const std::size_t n = attention.dim(1);
  Tensor out = Tensor::identity(n);
  const double inv_h = 1.0 / static_cast<double>(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n * n; ++i) {
      const double g = d_attention[h * n * n + i];
      if (g > 0.0) out[i] += inv_h * g * attention[h * n * n + i];
    }
  }
  if (normalize_rows) {
    for (std::size_t r = 0; r < n; ++r) {
      auto row = out.row_span(r);
      double s = 0.0;
      for (double v : row) s += v;
      for (auto& v : row) v /= s;
    }
  }
  return out;
}

SaliencyMap gae_rollout(std::span<const Tensor> updates, Encoder encoder) {
  if (updates.empty()) throw DimensionError("gae_rollout: no layers");
  const Shape want = updates.front().shape();
  if (want.size() != 2 || want[0] != want[1] || want[0] < 2) {
    throw DimensionError("gae_rollout: updates must be square N x N with N >= 2, got " +
                         shape_to_string(want));
  }
  Tensor rollout = updates.front();
  for (std::size_t l = 1; l < updates.size(); ++l) {
    if (updates[l].shape() != want) {
      throw DimensionError("gae_rollout: layer " + std::to_string(l) + " is " +
                           shape_to_string(updates[l].shape()) + ", expected " +
                           shape_to_string(want));
    }
    rollout = ops::matmul(updates[l], rollout);
  }
  SaliencyMap map;
  map.encoder = encoder;
  map.method = Method::Gae;
  const std::size_t n = want[0];
  map.scores = Tensor({n - 1});
  for (std::size_t j = 1; j < n; ++j) map.scores[j - 1] = rollout.at(0, j);
  for (std::size_t l = 0; l < updates.size(); ++l) map.layer_indices.push_back(static_cast<int>(l));
  return map;
}

SaliencyMap gae(const ModelOutput& output, const GradientMap& grads, Encoder encoder,
                bool normalize_rows) {
  std::vector<Tensor> updates;
  for (const AttentionTrace& tr : output.traces(encoder)) {
    const LayerGradients g = output_gradients(output, grads, encoder, tr.layer);
    updates.push_back(gae_layer_update(tr.attention, g.d_attention, normalize_rows));
  }
  return gae_rollout(updates, encoder);
}

SaliencyMap gae(const ModelOutput& output, Encoder encoder, bool normalize_rows) {
  return gae(output, backward(*output.record, output.root), encoder, normalize_rows);
}

SaliencyMap random_map(Encoder encoder, std::size_t n_tokens, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7a4d));
  SaliencyMap map;
  map.encoder = encoder;
  map.method = Method::Random;
  map.scores = rng.uniform_tensor({n_tokens}, 0.0, 1.0);
  return map;
}

std::vector<std::size_t> ranking(const SaliencyMap& map) {
  std::vector<std::size_t> idx(map.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return map.scores[a] > map.scores[b]; });
  return idx;
}

}  // namespace aalb
