#pragma once

// Miniature CLIP-style dual encoder. Both towers are pre-layer-norm
// transformers over a cls token plus T input tokens; the similarity head is
// logit_scale times the cosine of the projected cls embeddings. Every
// attention layer is traced so that the attribution methods can read
// Q, K, V, A and A*V and pull gradients for them out of the record.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "aalb/autodiff.hpp"
#include "aalb/tensor.hpp"

namespace aalb {

enum class Encoder { Image, Text };

std::string_view encoder_name(Encoder e);
std::optional<Encoder> parse_encoder(std::string_view name);

enum class HeadMode { Multi, Single };

/// Token id reserved for masked text positions. Its embedding row is zero.
inline constexpr int kMaskToken = 0;

struct ModelConfig {
  int d_model = 32;
  int n_heads = 4;
  int n_layers_img = 4;
  int n_layers_txt = 4;
  int n_img_tokens = 16;
  int n_txt_tokens = 8;
  int vocab_size = 64;
  std::uint64_t seed = 0;
  double logit_scale = 100.0;
  // Both towers start from the same transformer weights. This is what gives
  // an untrained model matched image/text pairs that score above mismatched
  // ones; see make_sample().
  bool tie_towers = true;

  /// Throws aalb::ConfigError naming the offending field.
  void validate() const;
  int layers(Encoder e) const { return e == Encoder::Image ? n_layers_img : n_layers_txt; }
  int tokens(Encoder e) const { return e == Encoder::Image ? n_img_tokens : n_txt_tokens; }
  int d_head() const { return d_model / n_heads; }
  int d_hidden() const { return 4 * d_model; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, w_k, w_v, w_o;
  Tensor ln2_gain, ln2_bias;
  Tensor w_hidden, w_out;
  HeadMode head_mode = HeadMode::Multi;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct EncoderWeights {
  Tensor cls_embedding;  // 1 x d
  Tensor positional;     // (T+1) x d
  std::vector<LayerWeights> layers;
  Tensor ln_post_gain, ln_post_bias;
  Tensor projection;  // d x d

  friend bool operator==(const EncoderWeights&, const EncoderWeights&) = default;
};

struct Weights {
  ModelConfig config;
  Tensor token_embedding;  // vocab x d, row kMaskToken is zero
  EncoderWeights image;
  EncoderWeights text;

  const EncoderWeights& encoder(Encoder e) const { return e == Encoder::Image ? image : text; }
  EncoderWeights& encoder(Encoder e) { return e == Encoder::Image ? image : text; }

  friend bool operator==(const Weights&, const Weights&) = default;
};

/// Seeded, deterministic weights; matrices are N(0,1) / sqrt(d_model).
Weights init_model(const ModelConfig& config);

/// Returns weights whose designated layer attends with a single full-width
/// head (scale 1/sqrt(d_model)). Projection matrices are reused unchanged.
Weights to_single_head(const Weights& weights, Encoder encoder, int layer_index);

/// Maps negative layer indices onto the end of the encoder (-1 is the last
/// layer). Throws aalb::RangeError when out of range.
int resolve_layer(const ModelConfig& config, Encoder encoder, int layer_index);

struct AttentionTrace {
  int layer = 0;
  HeadMode head_mode = HeadMode::Multi;
  Tensor q, k, v;     // (T+1) x d
  Tensor attention;   // H x (T+1) x (T+1), post-softmax
  Tensor v_after;     // (T+1) x d, A*V per head concatenated, before W_O
  NodeId q_node, k_node, v_node, v_after_node;
  std::vector<NodeId> attention_nodes;  // one per head

  std::size_t heads() const { return attention_nodes.size(); }
};

struct ModelOutput {
  double similarity = 0.0;
  std::vector<AttentionTrace> image_traces;
  std::vector<AttentionTrace> text_traces;
  std::shared_ptr<const ComputationRecord> record;
  NodeId root;
  NodeId image_tokens_node;
  NodeId text_tokens_node;

  const std::vector<AttentionTrace>& traces(Encoder e) const {
    return e == Encoder::Image ? image_traces : text_traces;
  }
  const AttentionTrace& trace(Encoder e, int layer) const;
};

/// Replaces the post-softmax attention of one layer with a fixed tensor of
/// shape H x (T+1) x (T+1). The replacement enters the record as a leaf.
struct AttentionOverride {
  Encoder encoder = Encoder::Image;
  int layer = -1;
  Tensor attention;
};

struct ForwardOptions {
  std::optional<AttentionOverride> attention_override;
};

/// One synthetic image/text pair: image feature rows on a sqrt(n) x sqrt(n)
/// grid and text token ids.
struct Sample {
  Tensor image_tokens;  // n_img_tokens x d_model
  std::vector<int> text_tokens;
};

ModelOutput forward_pair(const Weights& weights, const Tensor& image_tokens,
                         std::span<const int> text_tokens, const ForwardOptions& options = {});
inline ModelOutput forward_pair(const Weights& weights, const Sample& sample,
                                const ForwardOptions& options = {}) {
  return forward_pair(weights, sample.image_tokens, sample.text_tokens, options);
}

struct LayerGradients {
  Tensor d_v_after;    // (T+1) x d
  Tensor d_attention;  // H x (T+1) x (T+1)
};

/// Gradients of the similarity with respect to one layer's V_after and A.
LayerGradients output_gradients(const ModelOutput& output, Encoder encoder, int layer_index);
/// Same, reusing an already computed gradient map of output.root.
LayerGradients output_gradients(const ModelOutput& output, const GradientMap& grads,
                                Encoder encoder, int layer_index);

/// Text tokens are drawn from the non-mask vocabulary. Image row j is the
/// embedding of text token j mod T plus Gaussian noise, so the image
/// "depicts" its caption.
Sample make_sample(const Weights& weights, std::uint64_t seed, double noise = 0.25);

/// Image rows are laid out on a side x side grid when n is a perfect
/// square; otherwise the grid is a single row.
std::pair<std::size_t, std::size_t> image_grid(int n_img_tokens);

}  // namespace aalb
