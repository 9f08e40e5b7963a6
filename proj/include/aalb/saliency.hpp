#pragma once

// Token attributions read off a traced forward pass.
//
//   grad-eclip       score_i = <dOut/dV_after[cls], V_i> * w_i
//   attention-eclip  score_i = dOut/dA[cls, i] * w_i
//   gae              cls row of prod_l (I + mean_h relu(dA_l) * A_l)
//
// w is the min-max rescaled cosine between q_cls and each k_i. The two ECLIP
// variants need the attributed layer in single-head mode; GAE reads the
// original multi-head layers.

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "aalb/model.hpp"

namespace aalb {

enum class Method { GradEclip, AttentionEclip, Gae, Random, Occlusion };

std::string_view method_name(Method m);
std::optional<Method> parse_method(std::string_view name);

enum class Aggregation { Sum, Mean };

struct SaliencyMap {
  Encoder encoder = Encoder::Image;
  Tensor scores;  // one entry per non-cls token, shape {T}
  Method method = Method::GradEclip;
  std::vector<int> layer_indices;

  std::size_t size() const { return scores.numel(); }
};

/// sum_dim(g * V_i) for every non-cls row i of V. g has d entries, V is (T+1) x d.
Tensor grad_eclip_stage1(const Tensor& d_v_after_cls, const Tensor& v);

/// min-max of cos(q_cls, k_i) over the T non-cls keys. Needs T >= 2. When all
/// cosines are equal every weight is 0.
Tensor qk_weight_map(const Tensor& q_cls, const Tensor& k_tokens);

SaliencyMap grad_eclip(const ModelOutput& output, Encoder encoder, int layer_index);
SaliencyMap grad_eclip(const ModelOutput& output, const GradientMap& grads, Encoder encoder,
                       std::span<const int> layer_indices, Aggregation aggregation = Aggregation::Sum);

SaliencyMap attention_eclip(const ModelOutput& output, Encoder encoder, int layer_index);
SaliencyMap attention_eclip(const ModelOutput& output, const GradientMap& grads, Encoder encoder,
                            std::span<const int> layer_indices,
                            Aggregation aggregation = Aggregation::Sum);

/// I + mean over heads of relu(dA) * A. With normalize_rows each row is
/// divided by its sum afterwards.
Tensor gae_layer_update(const Tensor& attention, const Tensor& d_attention,
                        bool normalize_rows = false);
/// Multiplies the updates last-to-first and returns the cls row without the
/// cls column.
SaliencyMap gae_rollout(std::span<const Tensor> updates, Encoder encoder);
/// GAE over every layer of one encoder.
SaliencyMap gae(const ModelOutput& output, Encoder encoder, bool normalize_rows = false);
SaliencyMap gae(const ModelOutput& output, const GradientMap& grads, Encoder encoder,
                bool normalize_rows = false);

/// Seeded uniform scores; the ranking baseline for the faithfulness curves.
SaliencyMap random_map(Encoder encoder, std::size_t n_tokens, std::uint64_t seed);

/// Token indices by descending score; ties keep the lower index first.
std::vector<std::size_t> ranking(const SaliencyMap& map);

}  // namespace aalb
