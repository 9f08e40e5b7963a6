#include "aalb/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace aalb {
namespace {

constexpr char kMagic[5] = {'A', 'A', 'L', 'B', '1'};

class Writer {
 public:
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void tensor(const Tensor& t) {
    for (double v : t.data()) f64(v);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes(b) {}
  std::uint64_t u64() {
    if (pos + 8 > bytes.size()) throw InputError("weights file truncated at byte " + std::to_string(pos));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  int small_int(const char* field) {
    const std::int64_t v = i64();
    if (v < -(1 << 30) || v > (1 << 30)) {
      throw InputError(std::string("weights file: implausible ") + field + " " + std::to_string(v));
    }
    return static_cast<int>(v);
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void fill(Tensor& t) {
    for (auto& v : t.data()) v = f64();
  }
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
};

template <typename E, typename Fn>
void for_each_tensor(E& e, Fn&& fn) {
  fn(e.cls_embedding);
  fn(e.positional);
  for (auto& l : e.layers) {
    fn(l.ln1_gain);
    fn(l.ln1_bias);
    fn(l.w_q);
    fn(l.w_k);
    fn(l.w_v);
    fn(l.w_o);
    fn(l.ln2_gain);
    fn(l.ln2_bias);
    fn(l.w_hidden);
    fn(l.w_out);
  }
  fn(e.ln_post_gain);
  fn(e.ln_post_bias);
  fn(e.projection);
}

}  // namespace

std::vector<std::uint8_t> serialize_weights(const Weights& weights) {
  Writer w;
  w.out.insert(w.out.end(), std::begin(kMagic), std::end(kMagic));
  const ModelConfig& c = weights.config;
  w.i64(c.d_model);
  w.i64(c.n_heads);
  w.i64(c.n_layers_img);
  w.i64(c.n_layers_txt);
  w.i64(c.n_img_tokens);
  w.i64(c.n_txt_tokens);
  w.i64(c.vocab_size);
  w.u64(c.seed);
  w.u64(std::bit_cast<std::uint64_t>(c.logit_scale));
  w.i64(c.tie_towers ? 1 : 0);
  for (const auto* e : {&weights.image, &weights.text}) {
    for (const auto& l : e->layers) w.i64(l.head_mode == HeadMode::Single ? 1 : 0);
  }
  w.tensor(weights.token_embedding);
  for_each_tensor(weights.image, [&](const Tensor& t) { w.tensor(t); });
  for_each_tensor(weights.text, [&](const Tensor& t) { w.tensor(t); });
  return std::move(w.out);
}

Weights deserialize_weights(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw InputError("weights file: bad magic, expected AALB1");
  }
  Reader r(bytes);
  r.pos = sizeof(kMagic);
  ModelConfig c;
  c.d_model = r.small_int("d_model");
  c.n_heads = r.small_int("n_heads");
  c.n_layers_img = r.small_int("n_layers_img");
  c.n_layers_txt = r.small_int("n_layers_txt");
  c.n_img_tokens = r.small_int("n_img_tokens");
  c.n_txt_tokens = r.small_int("n_txt_tokens");
  c.vocab_size = r.small_int("vocab_size");
  c.seed = r.u64();
  c.logit_scale = std::bit_cast<double>(r.u64());
  c.tie_towers = r.i64() != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw InputError(std::string("weights file: ") + e.what());
  }
  // Shapes come from a fresh init; the payload then overwrites every value.
  Weights w = init_model(c);
  for (auto* e : {&w.image, &w.text}) {
    for (auto& l : e->layers) l.head_mode = r.i64() != 0 ? HeadMode::Single : HeadMode::Multi;
  }
  r.fill(w.token_embedding);
  for_each_tensor(w.image, [&](Tensor& t) { r.fill(t); });
  for_each_tensor(w.text, [&](Tensor& t) { r.fill(t); });
  if (r.pos != bytes.size()) {
    throw InputError("weights file: " + std::to_string(bytes.size() - r.pos) + " trailing bytes");
  }
  return w;
}

void save_weights(const Weights& weights, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(weights);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Weights load_weights(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open weights file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

}  // namespace aalb
