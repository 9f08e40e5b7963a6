#include "aalb/report_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace aalb {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open " + path.string() + " for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw InputError("failed writing " + path.string());
}

std::string saliency_csv(const SaliencyMap& map) {
  std::string out = "token_index,score\n";
  for (std::size_t i = 0; i < map.size(); ++i) {
    out += std::to_string(i) + "," + format_double(map.scores[i]) + "\n";
  }
  return out;
}

std::string curve_csv(const EvalCurve& curve) {
  std::string out = "step,fraction,output\n";
  for (const auto& p : curve.points) {
    out += std::to_string(p.step) + "," + format_double(p.fraction) + "," + format_double(p.output) + "\n";
  }
  return out;
}

std::string matrix_csv(const Tensor& m) {
  std::string out;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out += ",";
      out += format_double(m.at(i, j));
    }
    out += "\n";
  }
  return out;
}

std::string pgm_ascii(std::span<const double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) {
    throw DimensionError("pgm: " + std::to_string(values.size()) + " values for a " +
                         std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  std::string out = "P2\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = values[r * cols + c];
      const long level = range > 0.0 ? std::lround(255.0 * (v - *lo) / range) : 0;
      if (c) out += " ";
      out += std::to_string(level);
    }
    out += "\n";
  }
  return out;
}

std::string saliency_pgm(const SaliencyMap& map, int n_img_tokens) {
  auto [rows, cols] = map.encoder == Encoder::Image ? image_grid(n_img_tokens)
                                                    : std::pair<std::size_t, std::size_t>{1, map.size()};
  return pgm_ascii(map.scores.data(), rows, cols);
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"n_layers_img", c.n_layers_img},
          {"n_layers_txt", c.n_layers_txt},
          {"n_img_tokens", c.n_img_tokens},
          {"n_txt_tokens", c.n_txt_tokens},
          {"vocab_size", c.vocab_size},
          {"seed", c.seed},
          {"logit_scale", c.logit_scale},
          {"tie_towers", c.tie_towers}};
}

nlohmann::json to_json(const EquivalenceReport& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : r.trials) {
    trials.push_back({{"seed", t.seed},
                      {"d_model", t.config.d_model},
                      {"n_heads", t.config.n_heads},
                      {"n_tokens", t.config.n_img_tokens},
                      {"stage1_error", t.stage1_error},
                      {"full_error", t.full_error}});
  }
  return {{"n_trials", r.n_trials},
          {"max_rel_error_stage1", r.max_rel_error_stage1},
          {"max_rel_error_full", r.max_rel_error_full},
          {"tolerance_stage1", r.tolerances.stage1},
          {"tolerance_full", r.tolerances.full},
          {"pass", r.pass},
          {"trials", trials}};
}

namespace {
nlohmann::json values(const Tensor& t) { return nlohmann::json(t.values()); }
}  // namespace

nlohmann::json to_json(const CounterexampleVerdict& v) {
  return {{"q_cls", values(v.q_cls)},
          {"k_1", {v.keys.at(0, 0), v.keys.at(0, 1)}},
          {"k_2", {v.keys.at(1, 0), v.keys.at(1, 1)}},
          {"raw_scores", values(v.raw_scores)},
          {"softmax", values(v.softmax)},
          {"cosines", values(v.cosines)},
          {"w", values(v.weights)},
          {"softmax_prefers_second", v.softmax_prefers_second},
          {"weights_prefer_first", v.weights_prefer_first},
          {"second_weight_zero", v.second_weight_zero},
          {"pass", v.pass}};
}

nlohmann::json to_json(const FidelitySummary& s) {
  return {{"n_seeds", s.grids.size()},
          {"fraction_changed", s.fraction_changed},
          {"mean_diagonal_dominance_original", s.mean_dominance_original},
          {"mean_diagonal_dominance_surgered", s.mean_dominance_surgered}};
}

nlohmann::json ascent_step_json(const AscentStep& step) {
  const std::size_t n = step.attention.cols();
  std::vector<double> a(n - 1), ga(n - 1);
  for (std::size_t j = 1; j < n; ++j) {
    a[j - 1] = step.attention.at(0, j);
    ga[j - 1] = step.grad_times_attention.at(0, j);
  }
  return {{"step", step.step},
          {"output", step.output},
          {"attention_cls", a},
          {"grad_times_attention_cls", ga}};
}

}  // namespace aalb
