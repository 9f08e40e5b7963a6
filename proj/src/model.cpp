#include "aalb/model.hpp"

#include <cmath>
#include <string>

#include "aalb/ops.hpp"
#include "aalb/rng.hpp"

namespace aalb {

std::string_view encoder_name(Encoder e) { return e == Encoder::Image ? "image" : "text"; }

std::optional<Encoder> parse_encoder(std::string_view name) {
  if (name == "image") return Encoder::Image;
  if (name == "text") return Encoder::Text;
  return std::nullopt;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v < 1) throw ConfigError(std::string(field) + " must be >= 1, got " + std::to_string(v));
  };
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_layers_img, "n_layers_img");
  positive(n_layers_txt, "n_layers_txt");
  positive(n_img_tokens, "n_img_tokens");
  positive(n_txt_tokens, "n_txt_tokens");
  positive(vocab_size, "vocab_size");
  if (d_model % n_heads != 0) {
    throw ConfigError("n_heads must divide d_model, got d_model=" + std::to_string(d_model) +
                      " n_heads=" + std::to_string(n_heads));
  }
  if (vocab_size < 2) throw ConfigError("vocab_size must leave room for the mask token");
  if (!(std::isfinite(logit_scale) && logit_scale > 0.0)) {
    throw ConfigError("logit_scale must be positive and finite");
  }
  if (tie_towers && n_layers_img != n_layers_txt) {
    throw ConfigError("tie_towers needs n_layers_img == n_layers_txt");
  }
}

int resolve_layer(const ModelConfig& config, Encoder encoder, int layer_index) {
  const int n = config.layers(encoder);
  const int resolved = layer_index < 0 ? n + layer_index : layer_index;
  if (resolved < 0 || resolved >= n) {
    throw RangeError(std::string(encoder_name(encoder)) + " layer " + std::to_string(layer_index) +
                     " out of range, encoder has " + std::to_string(n) + " layers");
  }
  return resolved;
}

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

EncoderWeights init_encoder(const ModelConfig& c, Rng& rng, int n_layers, int n_tokens) {
  const std::size_t d = sz(c.d_model);
  const double s = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  EncoderWeights e;
  e.cls_embedding = rng.normal_tensor({1, d}, 1.0);
  e.positional = rng.normal_tensor({sz(n_tokens) + 1, d}, 0.5);
  for (int l = 0; l < n_layers; ++l) {
    LayerWeights w;
    w.ln1_gain = rng.normal_tensor({1, d}, 0.1);
    for (auto& v : w.ln1_gain.data()) v += 1.0;
    w.ln1_bias = rng.normal_tensor({1, d}, 0.1);
    w.w_q = rng.normal_tensor({d, d}, s);
    w.w_k = rng.normal_tensor({d, d}, s);
    w.w_v = rng.normal_tensor({d, d}, s);
    w.w_o = rng.normal_tensor({d, d}, s);
    w.ln2_gain = rng.normal_tensor({1, d}, 0.1);
    for (auto& v : w.ln2_gain.data()) v += 1.0;
    w.ln2_bias = rng.normal_tensor({1, d}, 0.1);
    w.w_hidden = rng.normal_tensor({d, sz(c.d_hidden())}, s);
    w.w_out = rng.normal_tensor({sz(c.d_hidden()), d}, s);
    e.layers.push_back(std::move(w));
  }
  e.ln_post_gain = rng.normal_tensor({1, d}, 0.1);
  for (auto& v : e.ln_post_gain.data()) v += 1.0;
  e.ln_post_bias = rng.normal_tensor({1, d}, 0.1);
  e.projection = rng.normal_tensor({d, d}, s);
  return e;
}

}  // namespace

Weights init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  Weights w;
  w.config = config;
  const std::size_t d = sz(config.d_model);
  w.token_embedding = rng.normal_tensor({sz(config.vocab_size), d}, 1.0);
  for (auto& v : w.token_embedding.row_span(kMaskToken)) v = 0.0;
  w.text = init_encoder(config, rng, config.n_layers_txt, config.n_txt_tokens);
  if (config.tie_towers) {
    w.image = w.text;
    w.image.positional = rng.normal_tensor({sz(config.n_img_tokens) + 1, d}, 0.5);
  } else {
    w.image = init_encoder(config, rng, config.n_layers_img, config.n_img_tokens);
  }
  return w;
}

Weights to_single_head(const Weights& weights, Encoder encoder, int layer_index) {
  const int l = resolve_layer(weights.config, encoder, layer_index);
  Weights out = weights;
  out.encoder(encoder).layers[sz(l)].head_mode = HeadMode::Single;
  return out;
}

const AttentionTrace& ModelOutput::trace(Encoder e, int layer) const {
  const auto& t = traces(e);
  const int n = static_cast<int>(t.size());
  const int resolved = layer < 0 ? n + layer : layer;
  if (resolved < 0 || resolved >= n) {
    throw RangeError(std::string(encoder_name(e)) + " layer " + std::to_string(layer) +
                     " not found in record");
  }
  return t[sz(resolved)];
}

namespace {

struct EncoderResult {
  NodeId tokens;
  NodeId unit_embedding;
  std::vector<AttentionTrace> traces;
};

Tensor stack_heads(const ComputationRecord& rec, const std::vector<NodeId>& heads) {
  const Tensor& first = rec.value(heads.front());
  const std::size_t n = first.rows();
  Tensor out({heads.size(), n, n});
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const auto src = rec.value(heads[h]).data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(h * n * n));
  }
  return out;
}

EncoderResult run_encoder(ComputationRecord& rec, const ModelConfig& c, const EncoderWeights& e,
                          Encoder which, Tensor token_rows, const AttentionOverride* override_a) {
  EncoderResult r;
  const std::size_t d = sz(c.d_model);
  const std::size_t n = token_rows.rows() + 1;
  r.tokens = rec.input(std::move(token_rows));
  const NodeId cls = rec.input(e.cls_embedding);
  const NodeId pos = rec.input(e.positional);
  const NodeId parts[] = {cls, r.tokens};
  NodeId x = rec.add(rec.concat(parts, 0), pos);

  for (std::size_t l = 0; l < e.layers.size(); ++l) {
    const LayerWeights& lw = e.layers[l];
    const NodeId h =
        rec.layer_norm(x, rec.input(lw.ln1_gain), rec.input(lw.ln1_bias));
    AttentionTrace tr;
    tr.layer = static_cast<int>(l);
    tr.head_mode = lw.head_mode;
    tr.q_node = rec.matmul(h, rec.input(lw.w_q));
    tr.k_node = rec.matmul(h, rec.input(lw.w_k));
    tr.v_node = rec.matmul(h, rec.input(lw.w_v));

    const std::size_t heads = lw.head_mode == HeadMode::Single ? 1 : sz(c.n_heads);
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool overridden = override_a && sz(resolve_layer(c, which, override_a->layer)) == l;
    if (overridden) {
      const Shape want{heads, n, n};
      if (override_a->attention.shape() != want) {
        throw DimensionError("attention override for " + std::string(encoder_name(which)) +
                             " layer " + std::to_string(l) + " must be " + shape_to_string(want) +
                             ", got " + shape_to_string(override_a->attention.shape()));
      }
    }

    std::vector<NodeId> outs;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      NodeId qh = tr.q_node, kh = tr.k_node, vh = tr.v_node;
      if (heads > 1) {
        qh = rec.slice(tr.q_node, 0, n, hd * dh, (hd + 1) * dh);
        kh = rec.slice(tr.k_node, 0, n, hd * dh, (hd + 1) * dh);
        vh = rec.slice(tr.v_node, 0, n, hd * dh, (hd + 1) * dh);
      }
      NodeId a;
      if (overridden) {
        const auto src = override_a->attention.data().subspan(hd * n * n, n * n);
        a = rec.input(Tensor({n, n}, std::vector<double>(src.begin(), src.end())));
      } else {
        a = rec.softmax_rows(rec.scale(rec.matmul(qh, rec.transpose(kh)), inv_sqrt));
      }
      tr.attention_nodes.push_back(a);
      outs.push_back(rec.matmul(a, vh));
    }
    tr.v_after_node = heads > 1 ? rec.concat(outs, 1) : outs.front();
    x = rec.add(x, rec.matmul(tr.v_after_node, rec.input(lw.w_o)));

    const NodeId h2 = rec.layer_norm(x, rec.input(lw.ln2_gain), rec.input(lw.ln2_bias));
    const NodeId mlp =
        rec.matmul(rec.relu(rec.matmul(h2, rec.input(lw.w_hidden))), rec.input(lw.w_out));
    x = rec.add(x, mlp);

    tr.q = rec.value(tr.q_node);
    tr.k = rec.value(tr.k_node);
    tr.v = rec.value(tr.v_node);
    tr.v_after = rec.value(tr.v_after_node);
    tr.attention = stack_heads(rec, tr.attention_nodes);
    r.traces.push_back(std::move(tr));
  }

  const NodeId cls_out = rec.slice(x, 0, 1, 0, d);
  const NodeId z =
      rec.layer_norm(cls_out, rec.input(e.ln_post_gain), rec.input(e.ln_post_bias));
  r.unit_embedding = rec.l2_normalize(rec.matmul(z, rec.input(e.projection)));
  return r;
}

Tensor embed_text(const Weights& w, std::span<const int> ids) {
  const std::size_t d = sz(w.config.d_model);
  Tensor rows({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= w.config.vocab_size) {
      throw InputError("text token " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of size " +
                       std::to_string(w.config.vocab_size));
    }
    auto src = w.token_embedding.row_span(sz(ids[i]));
    std::copy(src.begin(), src.end(), rows.row_span(i).begin());
  }
  return rows;
}

}  // namespace

ModelOutput forward_pair(const Weights& weights, const Tensor& image_tokens,
                         std::span<const int> text_tokens, const ForwardOptions& options) {
  const ModelConfig& c = weights.config;
  if (image_tokens.rank() != 2 || image_tokens.rows() != sz(c.n_img_tokens) ||
      image_tokens.cols() != sz(c.d_model)) {
    throw InputError("image tokens must be " + std::to_string(c.n_img_tokens) + "x" +
                     std::to_string(c.d_model) + ", got " + shape_to_string(image_tokens.shape()));
  }
  if (text_tokens.size() != sz(c.n_txt_tokens)) {
    throw InputError("expected " + std::to_string(c.n_txt_tokens) + " text tokens, got " +
                     std::to_string(text_tokens.size()));
  }
  Tensor text_rows = embed_text(weights, text_tokens);

  const AttentionOverride* ov = nullptr;
  const AttentionOverride* img_ov = nullptr;
  const AttentionOverride* txt_ov = nullptr;
  if (options.attention_override) {
    ov = &*options.attention_override;
    resolve_layer(c, ov->encoder, ov->layer);
    (ov->encoder == Encoder::Image ? img_ov : txt_ov) = ov;
  }

  auto rec = std::make_shared<ComputationRecord>();
  EncoderResult img = run_encoder(*rec, c, weights.image, Encoder::Image, image_tokens, img_ov);
  EncoderResult txt = run_encoder(*rec, c, weights.text, Encoder::Text, std::move(text_rows), txt_ov);

  ModelOutput out;
  out.root = rec->scale(rec->matmul(img.unit_embedding, rec->transpose(txt.unit_embedding)),
                        c.logit_scale);
  out.similarity = rec->value(out.root).item();
  out.image_traces = std::move(img.traces);
  out.text_traces = std::move(txt.traces);
  out.image_tokens_node = img.tokens;
  out.text_tokens_node = txt.tokens;
  out.record = std::move(rec);
  return out;
}

LayerGradients output_gradients(const ModelOutput& output, const GradientMap& grads,
                                Encoder encoder, int layer_index) {
  const AttentionTrace& tr = output.trace(encoder, layer_index);
  const ComputationRecord& rec = *output.record;
  LayerGradients g;
  g.d_v_after = grads.at_or_zero(rec, tr.v_after_node);
  const std::size_t n = tr.attention.dim(1);
  g.d_attention = Tensor({tr.heads(), n, n});
  for (std::size_t h = 0; h < tr.heads(); ++h) {
    Tensor gh = grads.at_or_zero(rec, tr.attention_nodes[h]);
    std::copy(gh.data().begin(), gh.data().end(),
              g.d_attention.data().begin() + static_cast<std::ptrdiff_t>(h * n * n));
  }
  return g;
}

LayerGradients output_gradients(const ModelOutput& output, Encoder encoder, int layer_index) {
  if (!output.record) throw UsageError("output_gradients: model output has no record");
  output.trace(encoder, layer_index);
  return output_gradients(output, backward(*output.record, output.root), encoder, layer_index);
}

Sample make_sample(const Weights& weights, std::uint64_t seed, double noise) {
  const ModelConfig& c = weights.config;
  Rng rng(mix_seed(seed, 0x5a3d));
  Sample s;
  s.text_tokens.resize(sz(c.n_txt_tokens));
  for (auto& t : s.text_tokens) t = 1 + static_cast<int>(rng.below(sz(c.vocab_size - 1)));
  s.image_tokens = Tensor({sz(c.n_img_tokens), sz(c.d_model)});
  for (std::size_t j = 0; j < sz(c.n_img_tokens); ++j) {
    auto src = weights.token_embedding.row_span(sz(s.text_tokens[j % s.text_tokens.size()]));
    auto dst = s.image_tokens.row_span(j);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = src[k] + noise * rng.normal();
  }
  return s;
}

std::pair<std::size_t, std::size_t> image_grid(int n_img_tokens) {
  const auto n = sz(n_img_tokens);
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side == n) return {side, side};
  return {1, n};
}

}  // namespace aalb
