#pragma once

// Text artifacts: CSV tables, P2 (ASCII) PGM heatmaps and JSON documents.
// Numbers are written with 17 significant digits so files round-trip and
// repeated runs are byte-identical.

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "aalb/equivalence.hpp"
#include "aalb/eval.hpp"
#include "aalb/saliency.hpp"
#include "json.hpp"

namespace aalb {

std::string format_double(double v);

/// Writes `content` to `path`, creating parent directories.
void write_text_file(const std::filesystem::path& path, std::string_view content);

/// token_index,score
std::string saliency_csv(const SaliencyMap& map);
/// step,fraction,output
std::string curve_csv(const EvalCurve& curve);
/// Plain comma-separated matrix, one row per line.
std::string matrix_csv(const Tensor& m);

/// Min-max scaled to 0..255 and rounded; constant input maps to all zeros.
std::string pgm_ascii(std::span<const double> values, std::size_t rows, std::size_t cols);
/// Image maps on their token grid, text maps as a single row.
std::string saliency_pgm(const SaliencyMap& map, int n_img_tokens);

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const EquivalenceReport& r);
nlohmann::json to_json(const CounterexampleVerdict& v);
nlohmann::json to_json(const FidelitySummary& s);
/// One JSON-lines record for an ascent step (cls rows only).
nlohmann::json ascent_step_json(const AscentStep& step);

}  // namespace aalb
