#include "aalb/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "aalb/equivalence.hpp"
#include "aalb/report_io.hpp"
#include "aalb/weights_io.hpp"

namespace aalb {

namespace {

using nlohmann::json;

constexpr std::pair<Experiment, std::string_view> kExperiments[] = {
    {Experiment::Verify, "verify-equivalence"}, {Experiment::Saliency, "saliency"},
    {Experiment::Curves, "curves"},             {Experiment::Fidelity, "fidelity"},
    {Experiment::Ascent, "ascent"},             {Experiment::Counterexample, "counterexample"},
};

constexpr std::string_view kDefaultOutputDir = "aalb-output";

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

template <typename T>
T parse_number(std::string_view text, std::string_view field) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end || text.empty()) {
    throw UsageError(std::string(field) + ": cannot parse '" + std::string(text) + "'");
  }
  return value;
}

// --- JSON field readers -----------------------------------------------------

std::string joined(std::string_view prefix, std::string_view key) {
  return prefix.empty() ? std::string(key) : std::string(prefix) + "." + std::string(key);
}

int json_int(const json& v, const std::string& field) {
  if (!v.is_number_integer()) throw UsageError("config: field '" + field + "' must be an integer");
  const auto x = v.get<std::int64_t>();
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    throw UsageError("config: field '" + field + "' is out of range");
  }
  return static_cast<int>(x);
}

std::uint64_t json_u64(const json& v, const std::string& field) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
  throw UsageError("config: field '" + field + "' must be a non-negative integer");
}

double json_double(const json& v, const std::string& field) {
  if (!v.is_number()) throw UsageError("config: field '" + field + "' must be a number");
  return v.get<double>();
}

bool json_bool(const json& v, const std::string& field) {
  if (!v.is_boolean()) throw UsageError("config: field '" + field + "' must be true or false");
  return v.get<bool>();
}

std::string json_string(const json& v, const std::string& field) {
  if (!v.is_string()) throw UsageError("config: field '" + field + "' must be a string");
  return v.get<std::string>();
}

Method method_or_throw(std::string_view name, std::string_view field) {
  const auto m = parse_method(name);
  if (!m) {
    throw UsageError(std::string(field) + ": unknown method '" + std::string(name) +
                     "' (grad-eclip, attention-eclip, gae, random, occlusion)");
  }
  return *m;
}

Encoder encoder_or_throw(std::string_view name, std::string_view field) {
  const auto e = parse_encoder(name);
  if (!e) throw UsageError(std::string(field) + ": unknown encoder '" + std::string(name) + "' (image, text)");
  return *e;
}

void apply_model_json(const json& doc, RunConfig& rc) {
  if (!doc.is_object()) throw UsageError("config: field 'model' must be an object");
  ModelConfig& m = rc.model;
  for (const auto& [key, v] : doc.items()) {
    const std::string field = joined("model", key);
    if (key == "d_model") m.d_model = json_int(v, field);
    else if (key == "n_heads") m.n_heads = json_int(v, field);
    else if (key == "n_layers_img") m.n_layers_img = json_int(v, field);
    else if (key == "n_layers_txt") m.n_layers_txt = json_int(v, field);
    else if (key == "n_img_tokens") m.n_img_tokens = json_int(v, field);
    else if (key == "n_txt_tokens") m.n_txt_tokens = json_int(v, field);
    else if (key == "vocab_size") m.vocab_size = json_int(v, field);
    else if (key == "seed") m.seed = json_u64(v, field);
    else if (key == "logit_scale") m.logit_scale = json_double(v, field);
    else if (key == "tie_towers") m.tie_towers = json_bool(v, field);
    else throw UsageError("config: unknown field '" + field + "'");
    rc.model_field_set = field;
  }
}

std::vector<SurgerySite> surgery_from_json(const json& v) {
  if (v.is_string()) return parse_surgery(v.get<std::string>());
  if (!v.is_array()) throw UsageError("config: field 'surgery' must be an array or a string");
  std::vector<SurgerySite> sites;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string field = "surgery[" + std::to_string(i) + "]";
    const json& e = v[i];
    if (!e.is_object()) throw UsageError("config: field '" + field + "' must be an object");
    SurgerySite s;
    bool have_encoder = false;
    for (const auto& [key, x] : e.items()) {
      if (key == "encoder") {
        s.encoder = encoder_or_throw(json_string(x, joined(field, key)), "config: " + joined(field, key));
        have_encoder = true;
      } else if (key == "layer") {
        s.layer = json_int(x, joined(field, key));
      } else {
        throw UsageError("config: unknown field '" + joined(field, key) + "'");
      }
    }
    if (!have_encoder) throw UsageError("config: field '" + joined(field, "encoder") + "' is required");
    sites.push_back(s);
  }
  return sites;
}

std::vector<std::uint64_t> seeds_from_json(const json& v) {
  if (v.is_string()) return parse_seeds(v.get<std::string>());
  if (!v.is_array()) throw UsageError("config: field 'seeds' must be an array or a string");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < v.size(); ++i) seeds.push_back(json_u64(v[i], "seeds[" + std::to_string(i) + "]"));
  return seeds;
}

// --- artifacts ----------------------------------------------------------------

class Artifacts {
 public:
  explicit Artifacts(std::filesystem::path dir) : dir_(std::move(dir)) {}

  void write(const std::string& name, std::string_view content) {
    const auto path = dir_ / name;
    write_text_file(path, content);
    files_.push_back(path.generic_string());
  }
  void write_json(const std::string& name, const json& doc) { write(name, doc.dump(2) + "\n"); }
  void record(const std::filesystem::path& path) { files_.push_back(path.generic_string()); }

  const std::vector<std::string>& files() const { return files_; }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> files_;
};

std::vector<std::uint64_t> seeds_or_default(const RunConfig& rc) {
  if (!rc.seeds.empty()) return rc.seeds;
  std::vector<std::uint64_t> s(50);
  std::iota(s.begin(), s.end(), std::uint64_t{0});
  return s;
}

json surgery_json(std::span<const SurgerySite> sites) {
  json a = json::array();
  for (const auto& s : sites) a.push_back({{"encoder", encoder_name(s.encoder)}, {"layer", s.layer}});
  return a;
}

bool needs_surgery(Method m) { return m == Method::GradEclip || m == Method::AttentionEclip; }

std::vector<SurgerySite> default_surgery(const RunConfig& rc) {
  if (!rc.surgery.empty()) return rc.surgery;
  switch (rc.experiment) {
    case Experiment::Fidelity: return {{Encoder::Image, -1}};
    case Experiment::Ascent: return {{rc.encoder, rc.layer}};
    default: return {{Encoder::Image, -1}, {Encoder::Text, -1}};
  }
}

Weights single_model(const RunConfig& rc) {
  return rc.weights_in ? load_weights(*rc.weights_in) : init_model(rc.model);
}

std::string curves_rows(std::uint64_t seed, const EvalCurve& c) {
  std::string out;
  for (const auto& p : c.points) {
    out += std::to_string(seed) + "," + std::string(policy_name(c.policy)) + "," +
           std::string(direction_name(c.direction)) + "," + std::to_string(p.step) + "," +
           format_double(p.fraction) + "," + format_double(p.output) + "\n";
  }
  return out;
}

// --- experiments --------------------------------------------------------------

json run_verify(const RunConfig& rc, Artifacts& art) {
  ConfigSpace space;
  space.base_seed = rc.model.seed;
  const EquivalenceReport r = verify_full_equivalence(rc.trials, space, rc.tolerances);
  art.write_json("equivalence.json", to_json(r));
  std::string csv = "trial,seed,d_model,n_heads,n_tokens,stage1_error,full_error\n";
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    const auto& t = r.trials[i];
    csv += std::to_string(i) + "," + std::to_string(t.seed) + "," + std::to_string(t.config.d_model) + "," +
           std::to_string(t.config.n_heads) + "," + std::to_string(t.config.n_img_tokens) + "," +
           format_double(t.stage1_error) + "," + format_double(t.full_error) + "\n";
  }
  art.write("equivalence_trials.csv", csv);
  return {{"pass", r.pass},
          {"n_trials", r.n_trials},
          {"max_rel_error_stage1", r.max_rel_error_stage1},
          {"max_rel_error_full", r.max_rel_error_full}};
}

json run_saliency(const RunConfig& rc, Artifacts& art) {
  const Weights original = single_model(rc);
  const auto sites = default_surgery(rc);
  const Weights surgered = apply_surgery(original, sites);
  const Sample sample = make_sample(original, original.config.seed);
  const auto layers = surgered_layers(original.config, sites, rc.encoder);
  const SaliencyMap map = compute_map(original, surgered, sample, rc.method, rc.encoder, layers);

  const std::string stem = "saliency_" + std::string(method_name(rc.method)) + "_" +
                           std::string(encoder_name(rc.encoder));
  art.write(stem + ".csv", saliency_csv(map));
  art.write(stem + ".pgm", saliency_pgm(map, original.config.n_img_tokens));
  std::string tokens = "position,token_id\n";
  for (std::size_t i = 0; i < sample.text_tokens.size(); ++i) {
    tokens += std::to_string(i) + "," + std::to_string(sample.text_tokens[i]) + "\n";
  }
  art.write("text_tokens.csv", tokens);
  if (rc.weights_out) {
    save_weights(original, *rc.weights_out);
    art.record(*rc.weights_out);
  }
  const auto order = ranking(map);
  return {{"method", method_name(rc.method)},
          {"encoder", encoder_name(rc.encoder)},
          {"surgery", surgery_json(sites)},
          {"similarity_original", forward_pair(original, sample).similarity},
          {"similarity_surgered", forward_pair(surgered, sample).similarity},
          {"top_token", order.empty() ? 0 : order.front()}};
}

json run_curves(const RunConfig& rc, Artifacts& art) {
  const auto seeds = seeds_or_default(rc);
  const auto sites = default_surgery(rc);
  const FaithfulnessSummary f = faithfulness_study(rc.model, seeds, rc.method, rc.encoder, rc.steps, sites);

  std::string curves = "seed,policy,direction,step,fraction,output\n";
  std::string auc = "seed,deletion_auc_method,deletion_auc_random,insertion_auc_method,insertion_auc_random\n";
  for (const auto& t : f.trials) {
    curves += curves_rows(t.seed, t.deletion_method) + curves_rows(t.seed, t.deletion_random) +
              curves_rows(t.seed, t.insertion_method) + curves_rows(t.seed, t.insertion_random);
    auc += std::to_string(t.seed) + "," + format_double(t.deletion_auc_method) + "," +
           format_double(t.deletion_auc_random) + "," + format_double(t.insertion_auc_method) + "," +
           format_double(t.insertion_auc_random) + "\n";
  }
  art.write("curves.csv", curves);
  art.write("auc.csv", auc);

  json summary = {{"method", method_name(rc.method)},
                  {"encoder", encoder_name(rc.encoder)},
                  {"surgery", surgery_json(sites)},
                  {"n_seeds", seeds.size()},
                  {"deletion_wins", f.deletion_wins},
                  {"deletion_losses", f.deletion_losses},
                  {"deletion_p", f.deletion_p},
                  {"insertion_wins", f.insertion_wins},
                  {"insertion_losses", f.insertion_losses},
                  {"insertion_p", f.insertion_p}};
  if (rc.encoder == Encoder::Text) {
    const TextDeletionSummary td = text_deletion_study(rc.model, seeds, rc.method, rc.text_k, sites);
    std::string csv = "step,mean_output_method,mean_output_random\n";
    for (std::size_t i = 0; i < td.mean_method.size(); ++i) {
      csv += std::to_string(i) + "," + format_double(td.mean_method[i]) + "," + format_double(td.mean_random[i]) + "\n";
    }
    art.write("text_deletion.csv", csv);
    summary["text_deletion_mean_method"] = td.mean_method;
    summary["text_deletion_mean_random"] = td.mean_random;
  }
  art.write_json("curves_summary.json", summary);
  return summary;
}

json run_fidelity(const RunConfig& rc, Artifacts& art) {
  const auto seeds = seeds_or_default(rc);
  const auto sites = default_surgery(rc);
  const FidelitySummary s = fidelity_study(rc.model, seeds, rc.grid_size, sites);
  std::string csv = "seed,image,text,original,surgered,delta\n";
  json per_seed = json::array();
  for (std::size_t k = 0; k < s.grids.size(); ++k) {
    const FidelityGrid& g = s.grids[k];
    for (std::size_t i = 0; i < g.original.rows(); ++i) {
      for (std::size_t j = 0; j < g.original.cols(); ++j) {
        csv += std::to_string(seeds[k]) + "," + std::to_string(i) + "," + std::to_string(j) + "," +
               format_double(g.original.at(i, j)) + "," + format_double(g.surgered.at(i, j)) + "," +
               format_double(g.delta.at(i, j)) + "\n";
      }
    }
    per_seed.push_back({{"seed", seeds[k]},
                        {"diagonal_dominance_original", g.diagonal_dominance_original},
                        {"diagonal_dominance_surgered", g.diagonal_dominance_surgered}});
  }
  art.write("fidelity_grid.csv", csv);
  json doc = to_json(s);
  doc["grid_size"] = rc.grid_size;
  doc["surgery"] = surgery_json(sites);
  doc["per_seed"] = per_seed;
  art.write_json("fidelity.json", doc);
  json summary = to_json(s);
  summary["surgery"] = surgery_json(sites);
  return summary;
}

json run_ascent(const RunConfig& rc, Artifacts& art) {
  const Weights original = single_model(rc);
  auto sites = default_surgery(rc);
  sites.push_back({rc.encoder, rc.layer});
  const Weights w = apply_surgery(original, sites);
  const Sample sample = make_sample(original, original.config.seed);
  const AscentLog log = ascent_experiment(w, sample, rc.encoder, rc.layer, rc.ascent);

  std::string jsonl;
  std::string csv = "step,output\n";
  for (const auto& s : log.steps) {
    jsonl += ascent_step_json(s).dump() + "\n";
    csv += std::to_string(s.step) + "," + format_double(s.output) + "\n";
  }
  art.write("ascent.jsonl", jsonl);
  art.write("ascent_output.csv", csv);

  json summary = {{"encoder", encoder_name(rc.encoder)},
                  {"layer", log.layer},
                  {"step_size", log.step_size},
                  {"n_steps", log.n_steps},
                  {"projected", log.projected},
                  {"diverged", log.diverged},
                  {"steps_recorded", log.steps.size()}};
  if (!log.steps.empty()) {
    const AscentStep& last = log.steps.back();
    const std::size_t n = last.attention.cols();
    SaliencyMap a{rc.encoder, Tensor({n - 1}), Method::Random, {log.layer}};
    SaliencyMap ga = a;
    for (std::size_t j = 1; j < n; ++j) {
      a.scores[j - 1] = last.attention.at(0, j);
      ga.scores[j - 1] = last.grad_times_attention.at(0, j);
    }
    art.write("ascent_final_attention.pgm", saliency_pgm(a, original.config.n_img_tokens));
    art.write("ascent_final_grad_attention.pgm", saliency_pgm(ga, original.config.n_img_tokens));
    summary["output_first"] = log.steps.front().output;
    summary["output_last"] = last.output;
    summary["top1_attention"] = cls_row_top1(last.attention);
    summary["top1_grad_attention"] = cls_row_top1(last.grad_times_attention);
  }
  if (rc.weights_out) {
    save_weights(original, *rc.weights_out);
    art.record(*rc.weights_out);
  }
  return summary;
}

json run_counterexample(const RunConfig& rc, Artifacts& art) {
  const CounterexampleVerdict v = two_key_counterexample(rc.k2_scale);
  const json doc = to_json(v);
  art.write_json("counterexample.json", doc);
  return {{"pass", v.pass},
          {"raw_scores", doc["raw_scores"]},
          {"softmax", doc["softmax"]},
          {"w", doc["w"]}};
}

// --- command line ---------------------------------------------------------------

struct Flags {
  std::string config_file;
  std::string output_dir;
  std::string seeds;
  std::string surgery;
  std::string method;
  std::string encoder;
  std::string weights_in, weights_out;
  ModelConfig model;
  bool untie = false;
  RunConfig scratch;  // flag storage for experiment parameters
  bool no_project = false;
};

constexpr std::string_view kCommonHelp =
    "All subcommands print a one-line JSON summary on stdout whose \"files\" array lists every "
    "file written.\nExit status: 0 success, 1 usage error, 2 verification failure.\n"
    "Flags override fields of the --config JSON file; the output directory defaults to "
    "$AALB_OUTPUT_DIR, then ./aalb-output.";

void add_model_flags(CLI::App* sub, Flags& f, std::vector<std::pair<CLI::Option*, std::string>>& model_opts) {
  auto add = [&](const char* name, auto& target, const char* field, const char* help) {
    model_opts.emplace_back(sub->add_option(name, target, help), field);
  };
  add("--d-model", f.model.d_model, "d_model", "model width");
  add("--n-heads", f.model.n_heads, "n_heads", "attention heads per layer");
  add("--n-layers-img", f.model.n_layers_img, "n_layers_img", "image encoder layers");
  add("--n-layers-txt", f.model.n_layers_txt, "n_layers_txt", "text encoder layers");
  add("--n-img-tokens", f.model.n_img_tokens, "n_img_tokens", "image tokens, cls excluded");
  add("--n-txt-tokens", f.model.n_txt_tokens, "n_txt_tokens", "text tokens, cls excluded");
  add("--vocab-size", f.model.vocab_size, "vocab_size", "text vocabulary, mask id 0 included");
  add("--seed", f.model.seed, "seed", "model seed (base seed for verify-equivalence)");
  add("--logit-scale", f.model.logit_scale, "logit_scale", "similarity scale");
  model_opts.emplace_back(sub->add_flag("--untie-towers", f.untie, "independent image and text weights"),
                          "tie_towers");
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view experiment_name(Experiment e) {
  for (const auto& [k, name] : kExperiments) {
    if (k == e) return name;
  }
  return "unknown";
}

std::optional<Experiment> parse_experiment(std::string_view name) {
  for (const auto& [k, n] : kExperiments) {
    if (n == name) return k;
  }
  return std::nullopt;
}

std::vector<std::uint64_t> parse_seeds(std::string_view text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& part : split(text, ',')) {
    if (part.empty()) throw UsageError("seeds: empty entry in '" + std::string(text) + "'");
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      seeds.push_back(parse_number<std::uint64_t>(part, "seeds"));
      continue;
    }
    const auto lo = parse_number<std::uint64_t>(trim(part.substr(0, dash)), "seeds");
    const auto hi = parse_number<std::uint64_t>(trim(part.substr(dash + 1)), "seeds");
    if (hi < lo) throw UsageError("seeds: range '" + part + "' is descending");
    if (hi - lo >= 1000000) throw UsageError("seeds: range '" + part + "' is too large");
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  }
  return seeds;
}

std::vector<SurgerySite> parse_surgery(std::string_view text) {
  std::vector<SurgerySite> sites;
  for (const auto& part : split(text, ',')) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) {
      throw UsageError("surgery: expected encoder:layer, got '" + part + "'");
    }
    SurgerySite s;
    s.encoder = encoder_or_throw(trim(part.substr(0, colon)), "surgery");
    s.layer = parse_number<int>(trim(part.substr(colon + 1)), "surgery");
    sites.push_back(s);
  }
  return sites;
}

RunConfig apply_config_json(const json& doc, RunConfig rc) {
  if (!doc.is_object()) throw UsageError("config: top level must be a JSON object");
  for (const auto& [key, v] : doc.items()) {
    if (key == "experiment") {
      const auto name = json_string(v, key);
      const auto e = parse_experiment(name);
      if (!e) throw UsageError("config: field 'experiment' has unknown value '" + name + "'");
      if (*e != rc.experiment) {
        throw UsageError("config: field 'experiment' is '" + name + "' but the subcommand is '" +
                         std::string(experiment_name(rc.experiment)) + "'");
      }
    } else if (key == "model") {
      apply_model_json(v, rc);
    } else if (key == "method") {
      rc.method = method_or_throw(json_string(v, key), "config: method");
    } else if (key == "encoder") {
      rc.encoder = encoder_or_throw(json_string(v, key), "config: encoder");
    } else if (key == "surgery") {
      rc.surgery = surgery_from_json(v);
    } else if (key == "output_dir") {
      rc.output_dir = json_string(v, key);
    } else if (key == "seeds") {
      rc.seeds = seeds_from_json(v);
    } else if (key == "trials") {
      rc.trials = json_int(v, key);
    } else if (key == "tolerance_stage1") {
      rc.tolerances.stage1 = json_double(v, key);
    } else if (key == "tolerance_full") {
      rc.tolerances.full = json_double(v, key);
    } else if (key == "steps") {
      rc.steps = json_int(v, key);
    } else if (key == "k") {
      rc.text_k = json_int(v, key);
    } else if (key == "grid_size") {
      rc.grid_size = json_int(v, key);
    } else if (key == "layer") {
      rc.layer = json_int(v, key);
    } else if (key == "step_size") {
      rc.ascent.step_size = json_double(v, key);
    } else if (key == "n_steps") {
      rc.ascent.n_steps = json_int(v, key);
    } else if (key == "project") {
      rc.ascent.project = json_bool(v, key);
    } else if (key == "k2_scale") {
      rc.k2_scale = json_double(v, key);
    } else if (key == "weights") {
      rc.weights_in = json_string(v, key);
    } else if (key == "save_weights") {
      rc.weights_out = json_string(v, key);
    } else {
      throw UsageError("config: unknown field '" + key + "'");
    }
  }
  return rc;
}

void validate_run_config(const RunConfig& rc) {
  const bool single = rc.experiment == Experiment::Saliency || rc.experiment == Experiment::Ascent;
  if (rc.weights_in && !single) {
    throw UsageError("weights: only saliency and ascent run on a single stored model");
  }
  if (rc.weights_out && !single) {
    throw UsageError("save_weights: only saliency and ascent build a single model");
  }
  if (rc.weights_in && rc.model_field_set) {
    throw UsageError(*rc.model_field_set + ": cannot be combined with a weights file");
  }
  if (rc.output_dir.empty()) throw UsageError("output_dir: must not be empty");

  const ModelConfig model = rc.weights_in ? load_weights(*rc.weights_in).config : rc.model;
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw UsageError(std::string("model.") + e.what());
  }
  auto check_sites = [&](std::span<const SurgerySite> sites) {
    for (const auto& s : sites) {
      try {
        resolve_layer(model, s.encoder, s.layer);
      } catch (const RangeError& e) {
        throw UsageError(std::string("surgery: ") + e.what());
      }
    }
  };
  check_sites(rc.surgery);

  switch (rc.experiment) {
    case Experiment::Verify:
      if (rc.trials < 1) throw UsageError("trials: must be >= 1");
      if (!(rc.tolerances.stage1 >= 0.0)) throw UsageError("tolerance_stage1: must be >= 0");
      if (!(rc.tolerances.full >= 0.0)) throw UsageError("tolerance_full: must be >= 0");
      break;
    case Experiment::Saliency:
    case Experiment::Curves: {
      if (rc.steps < 1) throw UsageError("steps: must be >= 1");
      if (rc.text_k < 0 || rc.text_k > model.n_txt_tokens) {
        throw UsageError("k: must be between 0 and n_txt_tokens");
      }
      if (needs_surgery(rc.method)) {
        const auto sites = default_surgery(rc);
        if (surgered_layers(model, sites, rc.encoder).empty()) {
          throw UsageError("surgery: method " + std::string(method_name(rc.method)) +
                           " needs at least one surgered " + std::string(encoder_name(rc.encoder)) + " layer");
        }
      }
      if ((rc.method == Method::GradEclip || rc.method == Method::AttentionEclip) &&
          model.tokens(rc.encoder) < 2) {
        throw UsageError("model: the cls/key weight map needs at least 2 tokens");
      }
      break;
    }
    case Experiment::Fidelity:
      if (rc.grid_size < 1) throw UsageError("grid_size: must be >= 1");
      break;
    case Experiment::Ascent:
      try {
        resolve_layer(model, rc.encoder, rc.layer);
      } catch (const RangeError& e) {
        throw UsageError(std::string("layer: ") + e.what());
      }
      if (!(rc.ascent.step_size > 0.0) || !std::isfinite(rc.ascent.step_size)) {
        throw UsageError("step_size: must be a positive number");
      }
      if (rc.ascent.n_steps < 0) throw UsageError("n_steps: must be >= 0");
      break;
    case Experiment::Counterexample:
      if (!std::isfinite(rc.k2_scale)) throw UsageError("k2_scale: must be finite");
      break;
  }
}

json execute(const RunConfig& rc) {
  Artifacts art(rc.output_dir);
  json summary;
  switch (rc.experiment) {
    case Experiment::Verify: summary = run_verify(rc, art); break;
    case Experiment::Saliency: summary = run_saliency(rc, art); break;
    case Experiment::Curves: summary = run_curves(rc, art); break;
    case Experiment::Fidelity: summary = run_fidelity(rc, art); break;
    case Experiment::Ascent: summary = run_ascent(rc, art); break;
    case Experiment::Counterexample: summary = run_counterexample(rc, art); break;
  }
  summary["experiment"] = experiment_name(rc.experiment);
  summary["files"] = art.files();
  return summary;
}

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention attribution experiments on a seeded miniature dual encoder.", "aalb"};
  app.footer(std::string(kCommonHelp));
  app.require_subcommand(1);

  Flags f;
  struct Sub {
    Experiment experiment;
    CLI::App* app;
    std::vector<std::pair<CLI::Option*, std::string>> model_opts;
    std::vector<CLI::Option*> opts;  // every option, to find the ones given
  };
  std::vector<Sub> subs;

  auto make = [&](Experiment e, const char* help, const char* footer) -> Sub& {
    Sub s{e, app.add_subcommand(std::string(experiment_name(e)), help), {}, {}};
    s.app->footer(std::string(footer) + "\n" + std::string(kCommonHelp));
    s.app->add_option("--config", f.config_file, "JSON run configuration")->check(CLI::ExistingFile);
    s.app->add_option("--output-dir", f.output_dir, "directory for artifacts");
    add_model_flags(s.app, f, s.model_opts);
    subs.push_back(std::move(s));
    return subs.back();
  };

  {
    Sub& s = make(Experiment::Verify, "Check dA[cls] against the feature-gradient sum and compare the two ECLIP maps",
                  "Writes equivalence.json and equivalence_trials.csv with columns\n"
                  "  trial,seed,d_model,n_heads,n_tokens,stage1_error,full_error\n"
                  "Trials sweep d_model {8,16,32} x heads {1,2,4} x tokens {4,8,16}; trial i uses seed --seed + i.\n"
                  "Exits 2 when a tolerance is exceeded.");
    s.opts.push_back(s.app->add_option("--trials", f.scratch.trials, "number of seeded models"));
    s.opts.push_back(s.app->add_option("--tol-stage1", f.scratch.tolerances.stage1, "relative tolerance, stage 1"));
    s.opts.push_back(s.app->add_option("--tol-full", f.scratch.tolerances.full, "relative tolerance, full maps"));
  }
  {
    Sub& s = make(Experiment::Saliency, "Saliency map of one sample",
                  "Writes saliency_<method>_<encoder>.csv with columns token_index,score, the same map as a\n"
                  "P2 PGM heatmap (image maps on their sqrt(T) x sqrt(T) grid), and text_tokens.csv with\n"
                  "columns position,token_id. The sample is drawn from the model seed.");
    s.opts.push_back(s.app->add_option("--method", f.method, "grad-eclip | attention-eclip | gae | random | occlusion"));
    s.opts.push_back(s.app->add_option("--encoder", f.encoder, "image | text"));
    s.opts.push_back(s.app->add_option("--surgery", f.surgery, "single-head sites, e.g. image:-1,text:-1"));
    s.opts.push_back(s.app->add_option("--weights", f.weights_in, "load weights instead of building them"));
    s.opts.push_back(s.app->add_option("--save-weights", f.weights_out, "write the model weights"));
  }
  {
    Sub& s = make(Experiment::Curves, "Deletion and insertion curves against a random ranking",
                  "Writes curves.csv with columns seed,policy,direction,step,fraction,output,\n"
                  "auc.csv with columns seed,deletion_auc_method,deletion_auc_random,insertion_auc_method,insertion_auc_random\n"
                  "and curves_summary.json with one-sided sign tests. For --encoder text it also writes\n"
                  "text_deletion.csv with columns step,mean_output_method,mean_output_random.");
    s.opts.push_back(s.app->add_option("--method", f.method, "grad-eclip | attention-eclip | gae | random | occlusion"));
    s.opts.push_back(s.app->add_option("--encoder", f.encoder, "image | text"));
    s.opts.push_back(s.app->add_option("--surgery", f.surgery, "single-head sites, e.g. image:-1,text:-1"));
    s.opts.push_back(s.app->add_option("--seeds", f.seeds, "seed list or range, e.g. 0-49"));
    s.opts.push_back(s.app->add_option("--steps", f.scratch.steps, "curve steps; ceil(T/steps) tokens per step"));
    s.opts.push_back(s.app->add_option("--k", f.scratch.text_k, "text deletion steps"));
  }
  {
    Sub& s = make(Experiment::Fidelity, "Original versus surgered similarity grids",
                  "Writes fidelity_grid.csv with columns seed,image,text,original,surgered,delta and\n"
                  "fidelity.json with diagonal dominance per seed and on average. Default surgery: image:-1.");
    s.opts.push_back(s.app->add_option("--surgery", f.surgery, "single-head sites, e.g. image:-1"));
    s.opts.push_back(s.app->add_option("--seeds", f.seeds, "seed list or range, e.g. 0-49"));
    s.opts.push_back(s.app->add_option("--grid-size", f.scratch.grid_size, "samples per seed"));
  }
  {
    Sub& s = make(Experiment::Ascent, "Gradient ascent on one attention map",
                  "Writes ascent.jsonl (one record per step: step, output, attention_cls,\n"
                  "grad_times_attention_cls), ascent_output.csv with columns step,output, and PGM heatmaps\n"
                  "of the final cls rows. The target layer is made single-head.");
    s.opts.push_back(s.app->add_option("--encoder", f.encoder, "image | text"));
    s.opts.push_back(s.app->add_option("--layer", f.scratch.layer, "target layer, negative counts from the end"));
    s.opts.push_back(s.app->add_option("--surgery", f.surgery, "additional single-head sites"));
    s.opts.push_back(s.app->add_option("--step-size", f.scratch.ascent.step_size, "ascent step"));
    s.opts.push_back(s.app->add_option("--n-steps", f.scratch.ascent.n_steps, "ascent steps"));
    s.opts.push_back(s.app->add_flag("--no-project", f.no_project, "skip clamping and row renormalization"));
    s.opts.push_back(s.app->add_option("--weights", f.weights_in, "load weights instead of building them"));
    s.opts.push_back(s.app->add_option("--save-weights", f.weights_out, "write the model weights"));
  }
  {
    Sub& s = make(Experiment::Counterexample, "Two-key example where the cls/key weights reverse the softmax order",
                  "Writes counterexample.json with q_cls, k_1, k_2, raw_scores, softmax, cosines, w and the\n"
                  "ordering verdicts. Exits 2 if the reversal does not occur.");
    s.opts.push_back(s.app->add_option("--k2-scale", f.scratch.k2_scale, "multiplier applied to k_2"));
  }

  if (args.empty()) {
    out << app.help();
    return kExitUsage;
  }
  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    const Sub* chosen = nullptr;
    for (const auto& s : subs) {
      if (s.app->parsed()) chosen = &s;
    }
    if (chosen == nullptr) throw UsageError("missing subcommand");

    RunConfig rc;
    rc.experiment = chosen->experiment;
    if (const char* env = std::getenv("AALB_OUTPUT_DIR"); env != nullptr && *env != '\0') {
      rc.output_dir = env;
    } else {
      rc.output_dir = std::string(kDefaultOutputDir);
    }
    if (!f.config_file.empty()) {
      std::ifstream in(f.config_file);
      std::stringstream buf;
      buf << in.rdbuf();
      json doc;
      try {
        doc = json::parse(buf.str());
      } catch (const json::parse_error& e) {
        throw UsageError("config: malformed JSON in " + f.config_file + " (byte " + std::to_string(e.byte) + ")");
      }
      rc = apply_config_json(doc, rc);
    }

    auto given = [&](const char* name) {
      for (auto* o : chosen->opts) {
        if (o->check_lname(std::string(name).substr(2)) && o->count() > 0) return true;
      }
      return false;
    };
    for (const auto& [opt, field] : chosen->model_opts) {
      if (opt->count() == 0) continue;
      ModelConfig& m = rc.model;
      if (field == "d_model") m.d_model = f.model.d_model;
      else if (field == "n_heads") m.n_heads = f.model.n_heads;
      else if (field == "n_layers_img") m.n_layers_img = f.model.n_layers_img;
      else if (field == "n_layers_txt") m.n_layers_txt = f.model.n_layers_txt;
      else if (field == "n_img_tokens") m.n_img_tokens = f.model.n_img_tokens;
      else if (field == "n_txt_tokens") m.n_txt_tokens = f.model.n_txt_tokens;
      else if (field == "vocab_size") m.vocab_size = f.model.vocab_size;
      else if (field == "seed") m.seed = f.model.seed;
      else if (field == "logit_scale") m.logit_scale = f.model.logit_scale;
      else if (field == "tie_towers") m.tie_towers = !f.untie;
      rc.model_field_set = "model." + field;
    }
    if (!f.output_dir.empty()) rc.output_dir = f.output_dir;
    if (given("--method")) rc.method = method_or_throw(f.method, "--method");
    if (given("--encoder")) rc.encoder = encoder_or_throw(f.encoder, "--encoder");
    if (given("--surgery")) rc.surgery = parse_surgery(f.surgery);
    if (given("--seeds")) rc.seeds = parse_seeds(f.seeds);
    if (given("--trials")) rc.trials = f.scratch.trials;
    if (given("--tol-stage1")) rc.tolerances.stage1 = f.scratch.tolerances.stage1;
    if (given("--tol-full")) rc.tolerances.full = f.scratch.tolerances.full;
    if (given("--steps")) rc.steps = f.scratch.steps;
    if (given("--k")) rc.text_k = f.scratch.text_k;
    if (given("--grid-size")) rc.grid_size = f.scratch.grid_size;
    if (given("--layer")) rc.layer = f.scratch.layer;
    if (given("--step-size")) rc.ascent.step_size = f.scratch.ascent.step_size;
    if (given("--n-steps")) rc.ascent.n_steps = f.scratch.ascent.n_steps;
    if (given("--no-project")) rc.ascent.project = false;
    if (given("--k2-scale")) rc.k2_scale = f.scratch.k2_scale;
    if (given("--weights")) rc.weights_in = f.weights_in;
    if (given("--save-weights")) rc.weights_out = f.weights_out;

    validate_run_config(rc);
    const json summary = execute(rc);
    out << summary.dump() << "\n";
    const bool verification = rc.experiment == Experiment::Verify || rc.experiment == Experiment::Counterexample;
    if (verification && !summary.value("pass", false)) return kExitVerificationFailed;
    return kExitOk;
  } catch (const UsageError& e) {
    err << "aalb: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InputError& e) {
    err << "aalb: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "aalb: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace aalb
