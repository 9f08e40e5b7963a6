// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "aalb/equivalence.hpp"
#include "aalb/eval.hpp"
#include "aalb/kernels.hpp"
#include "test_support.hpp"

using namespace aalb;
using aalb::testing::Build;
using aalb::testing::check_against_fd;
using aalb::testing::uniform;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("%s criterion %d %s: %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::vector<std::uint64_t> seed_range(std::uint64_t n) {
  std::vector<std::uint64_t> s(n);
  std::iota(s.begin(), s.end(), std::uint64_t{0});
  return s;
}

void equivalence_identity() {
  const Timer t;
  const EquivalenceReport r = verify_full_equivalence(100);
  const double secs = t.seconds();
  const bool pass = r.n_trials == 100 && r.max_rel_error_stage1 <= 1e-10 && secs < 30.0;
  report(1, "equivalence identity", pass,
         "100 trials, max rel error " + fmt("%.3e", r.max_rel_error_stage1) + " (limit 1e-10), " +
             fmt("%.1f", secs) + " s (limit 30 s)");
}

void full_equivalence() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ModelConfig c;
    c.seed = seed;
    const Weights original = init_model(c);
    const SurgerySite sites[] = {{Encoder::Image, -1}, {Encoder::Text, -1}};
    const Weights surgered = apply_surgery(original, sites);
    const Sample s = make_sample(original, seed);
    for (Encoder e : {Encoder::Image, Encoder::Text}) {
      const SaliencyMap g = compute_map(original, surgered, s, Method::GradEclip, e);
      const SaliencyMap a = compute_map(original, surgered, s, Method::AttentionEclip, e);
      for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, relative_error(g.scores[i], a.scores[i]));
    }
  }
  report(2, "full-method equivalence", worst <= 1e-6,
         "100 seeds, image and text, max rel error " + fmt("%.3e", worst) + " (limit 1e-6)");
}

void gradient_soundness() {
  constexpr std::size_t d = 8, n = 5;  // T = 4 plus cls
  int bad = 0;
  double worst = 0.0;
  auto tally = [&](const testing::FdCheck& r) {
    bad += r.mismatches;
    worst = std::max(worst, r.max_rel_error);
  };
  auto away_from_zero = [](Tensor t) {
    for (auto& v : t.data()) {
      if (std::abs(v) < 1e-3) v = 0.5;
    }
    return t;
  };
  using In = const std::vector<NodeId>&;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor x = uniform({n, d}, s), w = uniform({d, d}, s + 100), y = uniform({n, d}, s + 200);
    const Tensor gamma = uniform({1, d}, s + 300), beta = uniform({1, d}, s + 400);
    tally(check_against_fd({x, w}, [](ComputationRecord& r, In i) { return r.matmul(i[0], i[1]); }, s));
    tally(check_against_fd({x}, [](ComputationRecord& r, In i) { return r.softmax_rows(i[0]); }, s));
    tally(check_against_fd({x}, [](ComputationRecord& r, In i) { return r.l2_normalize(i[0]); }, s));
    tally(check_against_fd({x, gamma, beta},
                           [](ComputationRecord& r, In i) { return r.layer_norm(i[0], i[1], i[2]); }, s));
    tally(check_against_fd({away_from_zero(x)}, [](ComputationRecord& r, In i) { return r.relu(i[0]); }, s));
    tally(check_against_fd({x, y}, [](ComputationRecord& r, In i) { return r.add(i[0], i[1]); }, s));
    tally(check_against_fd({x}, [](ComputationRecord& r, In i) { return r.scale(i[0], -0.7); }, s));
    tally(check_against_fd({x, y}, [](ComputationRecord& r, In i) { return r.hadamard(i[0], i[1]); }, s));
    tally(check_against_fd({x}, [](ComputationRecord& r, In i) { return r.transpose(i[0]); }, s));
    tally(check_against_fd({x}, [](ComputationRecord& r, In i) { return r.slice(i[0], 1, n, 2, d); }, s));
    tally(check_against_fd({x, y}, [](ComputationRecord& r, In i) {
      return r.concat(std::vector<NodeId>{i[0], i[1]}, 0);
    }, s));
    tally(check_against_fd({x}, [](ComputationRecord& r, In i) { return r.mean(i[0]); }, s));
    tally(check_against_fd({x}, [](ComputationRecord& r, In i) { return r.sum(i[0]); }, s));
    tally(check_against_fd({uniform({1, d}, s + 500), uniform({1, d}, s + 600)},
                           [](ComputationRecord& r, In i) { return r.cosine_similarity(i[0], i[1]); }, s));
  }

  // End to end: dOut/dA of every layer of both encoders.
  int e2e_bad = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_img_tokens = 4;
    c.n_txt_tokens = 4;
    c.seed = seed;
    const Weights w = init_model(c);
    const Sample smp = make_sample(w, seed);
    const ModelOutput out = forward_pair(w, smp);
    const GradientMap grads = backward(*out.record, out.root);
    for (Encoder e : {Encoder::Image, Encoder::Text}) {
      for (const AttentionTrace& tr : out.traces(e)) {
        const Tensor g = output_gradients(out, grads, e, tr.layer).d_attention;
        const Tensor fd = finite_diff_grad(
            [&](const Tensor& a) {
              ForwardOptions o;
              o.attention_override = AttentionOverride{e, tr.layer, a};
              return forward_pair(w, smp, o).similarity;
            },
            tr.attention);
        for (std::size_t i = 0; i < fd.numel(); ++i) {
          const double gap = std::abs(g[i] - fd[i]);
          if (gap <= 1e-8) continue;
          const double rel = gap / std::max(std::abs(g[i]), std::abs(fd[i]));
          worst = std::max(worst, rel);
          if (rel > 1e-4) ++e2e_bad;
        }
      }
    }
  }
  report(3, "gradient soundness", bad == 0 && e2e_bad == 0,
         "14 ops and end-to-end dOut/dA, d_model=8, T=4, 20 seeds; " + std::to_string(bad + e2e_bad) +
             " entries beyond 1e-4 rel (abs floor 1e-8), max rel " + fmt("%.3e", worst));
}

void counterexample() {
  const CounterexampleVerdict v = two_key_counterexample();
  const bool exact = v.raw_scores[0] == 0.8 && v.raw_scores[1] == 1.414;
  const bool pass = exact && v.softmax[0] < v.softmax[1] && v.weights[0] > v.weights[1] && v.weights[1] == 0.0;
  report(4, "weight-map inversion", pass,
         "raw " + fmt("%.17g", v.raw_scores[0]) + " / " + fmt("%.17g", v.raw_scores[1]) + ", softmax " +
             fmt("%.6f", v.softmax[0]) + " < " + fmt("%.6f", v.softmax[1]) + ", w " + fmt("%g", v.weights[0]) +
             " > " + fmt("%g", v.weights[1]));
}

void fidelity() {
  const auto seeds50 = seed_range(50);
  ModelConfig one;
  one.n_heads = 1;
  const FidelitySummary s1 = fidelity_study(one, seeds50);
  bool exact = s1.fraction_changed == 0.0;
  for (const auto& g : s1.grids) exact = exact && g.original == g.surgered;

  const FidelitySummary s4 = fidelity_study(ModelConfig{}, seeds50);
  const Timer t;
  const FidelitySummary big = fidelity_study(ModelConfig{}, seed_range(1000));
  const bool dominance = big.mean_dominance_original >= big.mean_dominance_surgered;
  report(5, "fidelity", exact && s4.fraction_changed >= 0.95 && dominance,
         std::string("heads=1 exact over 50 seeds: ") + (exact ? "yes" : "no") + "; heads=4 changed on " +
             fmt("%.0f%%", 100.0 * s4.fraction_changed) + " of 50 seeds (limit 95%); diagonal dominance " +
             fmt("%.4f", big.mean_dominance_original) + " original vs " + fmt("%.4f", big.mean_dominance_surgered) +
             " surgered over 1000 seeds, " + fmt("%.1f", t.seconds()) + " s");
}

void faithfulness() {
  const Timer t;
  const FaithfulnessSummary s =
      faithfulness_study(ModelConfig{}, seed_range(1000), Method::AttentionEclip, Encoder::Image);
  const double secs = t.seconds();
  const bool pass = s.deletion_p < 0.05 && s.insertion_p < 0.05 && secs < 120.0;
  report(6, "faithfulness curves", pass,
         "1000 seeds, deletion " + std::to_string(s.deletion_wins) + "/" +
             std::to_string(s.deletion_wins + s.deletion_losses) + " p=" + fmt("%.3g", s.deletion_p) +
             ", insertion " + std::to_string(s.insertion_wins) + "/" +
             std::to_string(s.insertion_wins + s.insertion_losses) + " p=" + fmt("%.3g", s.insertion_p) +
             " (limit 0.05), " + fmt("%.1f", secs) + " s (limit 120 s)");
}

void ascent() {
  AscentOptions o;
  o.step_size = 1e-3;
  const AscentSummary s = ascent_study(ModelConfig{}, seed_range(20), o);
  report(7, "attention ascent", s.monotone >= 18 && s.aligned > 10,
         "step 1e-3, 20 seeds: monotone over 10 steps on " + std::to_string(s.monotone) +
             " (limit 18), top-1 aligned on " + std::to_string(s.aligned) + " (limit > 10)");
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return files;
}

void determinism() {
  const std::string bin = AALB_CLI_BINARY;
  const fs::path root = fs::temp_directory_path() / "aalb_acceptance_determinism";
  const std::vector<std::string> cmds = {
      "verify-equivalence --trials 5",
      "saliency --method grad-eclip --encoder image --save-weights OUT/w.bin",
      "saliency --method gae --encoder text",
      "curves --seeds 0-4 --steps 5",
      "curves --encoder text --method grad-eclip --seeds 0-4 --k 3",
      "fidelity --seeds 0-4",
      "ascent --n-steps 5",
      "counterexample",
  };
  int differing = 0, broken = 0;
  std::size_t files = 0;
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    const fs::path out = root / std::to_string(i);
    std::string args = cmds[i];
    if (const auto p = args.find("OUT"); p != std::string::npos) args.replace(p, 3, out.string());
    std::map<std::string, std::string> runs[2];
    for (auto& run : runs) {
      fs::remove_all(root / "stdout");
      fs::remove_all(out);
      fs::create_directories(out);
      const std::string cmd = "\"" + bin + "\" " + args + " --output-dir \"" + out.string() + "\" > \"" +
                              (root / "stdout").string() + "\"";
      if (std::system(cmd.c_str()) != 0) ++broken;
      run = snapshot(out);
      run["<stdout>"] = slurp(root / "stdout");
    }
    files += runs[0].size();
    if (runs[0] != runs[1] || runs[0].size() < 2) {
      ++differing;
      std::printf("  not reproducible: aalb %s\n", cmds[i].c_str());
    }
  }
  fs::remove_all(root);
  report(8, "determinism", differing == 0 && broken == 0,
         std::to_string(cmds.size()) + " CLI runs repeated, " + std::to_string(files) +
             " outputs compared byte for byte, " + std::to_string(differing) + " differ, " +
             std::to_string(broken) + " failed to run");
}

}  // namespace

int main() {
  std::printf("kernel backend: %s\n", std::string(kernels::backend_name(kernels::active_backend())).c_str());
  equivalence_identity();
  full_equivalence();
  gradient_soundness();
  counterexample();
  fidelity();
  faithfulness();
  ascent();
  determinism();
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
