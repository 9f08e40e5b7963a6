#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "aalb/cli.hpp"
#include "doctest.h"

using namespace aalb;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("aalb_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return files;
}

}  // namespace

TEST_CASE("experiment names round-trip") {
  for (auto e : {Experiment::Verify, Experiment::Saliency, Experiment::Curves, Experiment::Fidelity,
                 Experiment::Ascent, Experiment::Counterexample}) {
    CHECK(parse_experiment(experiment_name(e)) == e);
  }
  CHECK(parse_experiment("verify-equivalence") == Experiment::Verify);
  CHECK_FALSE(parse_experiment("train").has_value());
}

TEST_CASE("parse_seeds") {
  CHECK(parse_seeds("0-3") == std::vector<std::uint64_t>{0, 1, 2, 3});
  CHECK(parse_seeds("3,5,8") == std::vector<std::uint64_t>{3, 5, 8});
  CHECK(parse_seeds("0-1, 7") == std::vector<std::uint64_t>{0, 1, 7});
  CHECK_THROWS_AS(parse_seeds("5-2"), UsageError);
  CHECK_THROWS_AS(parse_seeds("x"), UsageError);
  CHECK_THROWS_AS(parse_seeds(""), UsageError);
}

TEST_CASE("parse_surgery") {
  const auto s = parse_surgery("image:-1,text:2");
  REQUIRE(s.size() == 2);
  CHECK(s[0].encoder == Encoder::Image);
  CHECK(s[0].layer == -1);
  CHECK(s[1].encoder == Encoder::Text);
  CHECK(s[1].layer == 2);
  CHECK_THROWS_AS(parse_surgery("audio:1"), UsageError);
  CHECK_THROWS_AS(parse_surgery("image"), UsageError);
}

TEST_CASE("config documents") {
  RunConfig base;
  base.experiment = Experiment::Curves;
  const auto doc = nlohmann::json::parse(R"({"model": {"d_model": 16, "n_heads": 2}, "steps": 4,
                                              "seeds": "0-2", "method": "gae"})");
  const RunConfig rc = apply_config_json(doc, base);
  CHECK(rc.model.d_model == 16);
  CHECK(rc.model.n_heads == 2);
  CHECK(rc.steps == 4);
  CHECK(rc.seeds == std::vector<std::uint64_t>{0, 1, 2});
  CHECK(rc.method == Method::Gae);

  auto error_for = [&](const char* text) {
    try {
      apply_config_json(nlohmann::json::parse(text), base);
    } catch (const UsageError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(error_for(R"({"stepz": 3})").find("stepz") != std::string::npos);
  CHECK(error_for(R"({"steps": "ten"})").find("steps") != std::string::npos);
  CHECK(error_for(R"({"model": {"depth": 3}})").find("depth") != std::string::npos);
  CHECK(error_for(R"({"experiment": "fidelity"})").find("experiment") != std::string::npos);
  CHECK(error_for("[1, 2]").find("object") != std::string::npos);
}

TEST_CASE("no arguments prints help and fails") {
  const Result r = invoke({});
  CHECK(r.code == kExitUsage);
  CHECK(r.out.find("counterexample") != std::string::npos);
}

TEST_CASE("unknown flags and subcommands are usage errors") {
  CHECK(invoke({"counterexample", "--bogus"}).code == kExitUsage);
  CHECK(invoke({"train"}).code == kExitUsage);
  CHECK(invoke({"curves", "--method", "lrp", "--output-dir", scratch("bad").string()}).code == kExitUsage);
}

TEST_CASE("subcommand help documents the CSV columns") {
  const Result r = invoke({"fidelity", "--help"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("seed,image,text,original,surgered,delta") != std::string::npos);
}

TEST_CASE("counterexample") {
  const fs::path dir = scratch("counterexample");
  const Result r = invoke({"counterexample", "--output-dir", dir.string()});
  CHECK(r.code == kExitOk);
  const auto summary = nlohmann::json::parse(r.out);
  CHECK(summary["experiment"] == "counterexample");
  CHECK(summary["raw_scores"] == nlohmann::json({0.8, 1.414}));
  CHECK(summary["w"] == nlohmann::json({1.0, 0.0}));
  REQUIRE(fs::exists(dir / "counterexample.json"));
  const auto doc = nlohmann::json::parse(slurp(dir / "counterexample.json"));
  CHECK(doc["pass"] == true);
  CHECK(r.out.find('\n') == r.out.size() - 1);

  // A short second key no longer outranks the first.
  CHECK(invoke({"counterexample", "--k2-scale", "0.5", "--output-dir", dir.string()}).code ==
        kExitVerificationFailed);
  fs::remove_all(dir);
}

TEST_CASE("verify-equivalence exit codes") {
  const fs::path dir = scratch("verify");
  const Result ok = invoke({"verify-equivalence", "--trials", "3", "--output-dir", dir.string()});
  CHECK(ok.code == kExitOk);
  CHECK(fs::exists(dir / "equivalence.json"));
  CHECK(slurp(dir / "equivalence_trials.csv").rfind("trial,seed,d_model,n_heads,n_tokens,stage1_error,full_error\n", 0) == 0);
  const Result strict = invoke({"verify-equivalence", "--trials", "3", "--tol-stage1", "0", "--tol-full",
                                "0", "--output-dir", dir.string()});
  CHECK(strict.code == kExitVerificationFailed);
  fs::remove_all(dir);
}

TEST_CASE("flags override the config file") {
  const fs::path dir = scratch("override");
  fs::create_directories(dir);
  const fs::path cfg = dir / "cfg.json";
  std::ofstream(cfg) << R"({"seeds": "0-1", "grid_size": 3, "output_dir": ")" << (dir / "from_config").string()
                     << R"("})";
  Result r = invoke({"fidelity", "--config", cfg.string(), "--grid-size", "2"});
  CHECK(r.code == kExitOk);
  const auto doc = nlohmann::json::parse(slurp(dir / "from_config" / "fidelity.json"));
  CHECK(doc["n_seeds"] == 2);
  // 2 seeds x 2 x 2 cells plus a header.
  const std::string grid = slurp(dir / "from_config" / "fidelity_grid.csv");
  CHECK(std::count(grid.begin(), grid.end(), '\n') == 9);

  std::ofstream(cfg) << R"({"seedz": 1})";
  r = invoke({"fidelity", "--config", cfg.string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("seedz") != std::string::npos);

  std::ofstream(cfg) << R"({"seeds": )";
  r = invoke({"fidelity", "--config", cfg.string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("malformed") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("output directory falls back to the environment") {
  const fs::path dir = scratch("env");
  ::setenv("AALB_OUTPUT_DIR", dir.string().c_str(), 1);
  const Result r = invoke({"counterexample"});
  ::unsetenv("AALB_OUTPUT_DIR");
  CHECK(r.code == kExitOk);
  CHECK(fs::exists(dir / "counterexample.json"));
  fs::remove_all(dir);
}

TEST_CASE("weights files") {
  const fs::path dir = scratch("weights");
  const std::string w = (dir / "w.bin").string();
  Result r = invoke({"saliency", "--d-model", "16", "--n-heads", "2", "--save-weights", w, "--output-dir",
                     (dir / "a").string()});
  CHECK(r.code == kExitOk);
  r = invoke({"saliency", "--weights", w, "--output-dir", (dir / "b").string()});
  CHECK(r.code == kExitOk);
  CHECK(tree(dir / "a") == tree(dir / "b"));

  r = invoke({"saliency", "--weights", w, "--d-model", "8", "--output-dir", (dir / "c").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("model.d_model") != std::string::npos);
  r = invoke({"curves", "--weights", w, "--output-dir", (dir / "c").string()});
  CHECK(r.code == kExitUsage);
  r = invoke({"saliency", "--weights", (dir / "missing.bin").string(), "--output-dir", (dir / "c").string()});
  CHECK(r.code == kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("bad model configurations are usage errors") {
  const fs::path dir = scratch("badmodel");
  const Result r = invoke({"saliency", "--d-model", "30", "--n-heads", "4", "--output-dir", dir.string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("d_model") != std::string::npos);
  CHECK(invoke({"ascent", "--step-size", "0", "--output-dir", dir.string()}).code == kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("the installed binary produces identical files on repeated runs") {
  const fs::path dir = scratch("binary");
  const std::string bin = AALB_CLI_BINARY;
  const std::vector<std::string> cmds = {
      "saliency --method grad-eclip --encoder text",
      "curves --seeds 0-2 --steps 4",
      "fidelity --seeds 0-1 --grid-size 2",
      "ascent --n-steps 3",
  };
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    for (const char* run_name : {"1", "2"}) {
      const fs::path out = dir / std::to_string(i) / run_name;
      const std::string cmd = "\"" + bin + "\" " + cmds[i] + " --output-dir \"" + out.string() + "\" > \"" +
                              out.string() + ".stdout\"";
      fs::create_directories(out.parent_path());
      CHECK(std::system(cmd.c_str()) == 0);
    }
    CAPTURE(cmds[i]);
    const auto a = tree(dir / std::to_string(i) / "1");
    CHECK_FALSE(a.empty());
    CHECK(a == tree(dir / std::to_string(i) / "2"));
  }
  fs::remove_all(dir);
}
