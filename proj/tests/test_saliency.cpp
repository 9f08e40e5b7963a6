#include <cmath>
#include <vector>

#include "aalb/ops.hpp"
#include "aalb/saliency.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace aalb;
using aalb::testing::close;
using aalb::testing::uniform;

namespace {

Weights surgered_default(std::uint64_t seed) {
  ModelConfig c;
  c.seed = seed;
  Weights w = init_model(c);
  w = to_single_head(w, Encoder::Image, -1);
  return to_single_head(w, Encoder::Text, -1);
}

}  // namespace

TEST_CASE("method names round-trip") {
  for (auto m : {Method::GradEclip, Method::AttentionEclip, Method::Gae, Method::Random,
                 Method::Occlusion}) {
    CHECK(parse_method(method_name(m)) == m);
  }
  CHECK_FALSE(parse_method("lrp").has_value());
}

TEST_CASE("grad_eclip_stage1") {
  const Tensor v = Tensor::matrix({{9, 9}, {1, 2}, {-3, 0.5}});
  SUBCASE("dot product with every token row, cls row skipped") {
    const Tensor s = grad_eclip_stage1(Tensor::row({2, -1}), v);
    CHECK(s == Tensor({2}, std::vector<double>{0.0, -6.5}));
  }
  SUBCASE("zero gradient gives zero scores") {
    CHECK(grad_eclip_stage1(Tensor::row({0, 0}), v) == Tensor({2}, 0.0));
  }
  SUBCASE("gradient orthogonal to a token") {
    CHECK(grad_eclip_stage1(Tensor::row({2, -1}), v)[0] == 0.0);
  }
  CHECK_THROWS_AS(grad_eclip_stage1(Tensor::row({1, 2, 3}), v), DimensionError);
}

TEST_CASE("qk_weight_map") {
  SUBCASE("raw dot product and cosine disagree") {
    const Tensor w = qk_weight_map(Tensor::row({1, 0}), Tensor::matrix({{0.8, 0.6}, {1.414, 1.414}}));
    CHECK(w[0] == 1.0);
    CHECK(w[1] == 0.0);
  }
  SUBCASE("identical keys give all zeros") {
    const Tensor w = qk_weight_map(Tensor::row({0.3, -1}), Tensor::matrix({{1, 2}, {1, 2}, {1, 2}}));
    CHECK(w == Tensor({3}, 0.0));
  }
  SUBCASE("one aligned key among orthogonal ones is one-hot") {
    const Tensor w = qk_weight_map(Tensor::row({0, 1, 0}),
                                   Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
    CHECK(w == Tensor({3}, std::vector<double>{0, 1, 0}));
  }
  SUBCASE("invariant to positive key scaling and bounded") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Tensor q = uniform({1, 6}, seed);
      const Tensor k = uniform({5, 6}, seed + 1000);
      Tensor k2 = k;
      for (std::size_t r = 0; r < 5; ++r) {
        for (auto& x : k2.row_span(r)) x *= 0.1 + static_cast<double>(r) * 3.0;
      }
      const Tensor a = qk_weight_map(q, k);
      const Tensor b = qk_weight_map(q, k2);
      for (std::size_t i = 0; i < 5; ++i) {
        CHECK(a[i] >= 0.0);
        CHECK(a[i] <= 1.0);
        CHECK(close(a[i], b[i], 1e-12, 1e-12));
      }
    }
  }
  CHECK_THROWS_AS(qk_weight_map(Tensor::row({1, 0}), Tensor::row({1, 0})), InputError);
  CHECK_THROWS_AS(qk_weight_map(Tensor::row({1, 0, 0}), Tensor::matrix({{1, 0}, {0, 1}})),
                  DimensionError);
}

TEST_CASE("ECLIP maps need a single-head layer") {
  const Weights w = init_model(ModelConfig{});
  const Sample s = make_sample(w, 1);
  const ModelOutput out = forward_pair(w, s);
  CHECK_THROWS_AS(grad_eclip(out, Encoder::Image, -1), UsageError);
  CHECK_THROWS_AS(attention_eclip(out, Encoder::Text, -1), UsageError);
}

TEST_CASE("grad-eclip and attention-eclip maps agree") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Weights w = surgered_default(seed);
    const Sample s = make_sample(w, seed);
    const ModelOutput out = forward_pair(w, s);
    for (Encoder e : {Encoder::Image, Encoder::Text}) {
      const SaliencyMap g = grad_eclip(out, e, -1);
      const SaliencyMap a = attention_eclip(out, e, -1);
      REQUIRE(g.size() == a.size());
      CHECK(g.method == Method::GradEclip);
      CHECK(a.method == Method::AttentionEclip);
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(close(g.scores[i], a.scores[i], 1e-6, 1e-10));
    }
  }
}

TEST_CASE("attention-eclip is the attention gradient times the weight map") {
  const Weights w = surgered_default(3);
  const Sample s = make_sample(w, 3);
  const ModelOutput out = forward_pair(w, s);
  const int last = resolve_layer(w.config, Encoder::Image, -1);
  const SaliencyMap m = attention_eclip(out, Encoder::Image, last);
  const LayerGradients g = output_gradients(out, Encoder::Image, last);
  const AttentionTrace& tr = out.trace(Encoder::Image, last);
  const std::size_t n = tr.q.rows(), d = tr.q.cols();
  const Tensor wts = qk_weight_map(ops::slice(tr.q, 0, 1, 0, d), ops::slice(tr.k, 1, n, 0, d));
  bool any_negative = false;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    CHECK(m.scores[i] == doctest::Approx(g.d_attention[i + 1] * wts[i]).epsilon(1e-14));
    if (wts[i] == 0.0) CHECK(m.scores[i] == 0.0);
    any_negative = any_negative || m.scores[i] < 0.0;
  }
  CHECK(m.layer_indices == std::vector<int>{last});
  // Scores are signed; nothing clamps negative evidence.
  bool any_negative_grad = false;
  for (std::size_t i = 1; i < n; ++i) any_negative_grad = any_negative_grad || g.d_attention[i] < 0.0;
  if (any_negative_grad) CHECK(any_negative);
}

TEST_CASE("a model with a zero projection attributes nothing") {
  Weights w = surgered_default(5);
  w.image.projection = Tensor::zeros(w.image.projection.shape());
  const Sample s = make_sample(w, 5);
  const ModelOutput out = forward_pair(w, s);
  CHECK(out.similarity == 0.0);
  for (Encoder e : {Encoder::Image, Encoder::Text}) {
    const SaliencyMap m = grad_eclip(out, e, -1);
    CHECK(m.scores == Tensor({m.size()}, 0.0));
  }
}

TEST_CASE("doubling the logit scale doubles the maps") {
  Weights w = surgered_default(7);
  Weights w2 = w;
  w2.config.logit_scale *= 2.0;
  const Sample s = make_sample(w, 7);
  const ModelOutput a = forward_pair(w, s);
  const ModelOutput b = forward_pair(w2, s);
  for (Encoder e : {Encoder::Image, Encoder::Text}) {
    const SaliencyMap ma = attention_eclip(a, e, -1);
    const SaliencyMap mb = attention_eclip(b, e, -1);
    for (std::size_t i = 0; i < ma.size(); ++i) CHECK(mb.scores[i] == 2.0 * ma.scores[i]);
    const SaliencyMap ga = gae(a, e);
    const SaliencyMap gb = gae(b, e);
    CHECK(ga.size() == gb.size());
  }
}

TEST_CASE("multi-layer aggregation") {
  ModelConfig c;
  c.seed = 11;
  Weights w = init_model(c);
  w = to_single_head(w, Encoder::Image, 0);
  w = to_single_head(w, Encoder::Image, 1);
  const Sample s = make_sample(w, 11);
  const ModelOutput out = forward_pair(w, s);
  const GradientMap grads = backward(*out.record, out.root);
  const int layers[] = {0, 1};
  const SaliencyMap sum = attention_eclip(out, grads, Encoder::Image, layers, Aggregation::Sum);
  const SaliencyMap mean = attention_eclip(out, grads, Encoder::Image, layers, Aggregation::Mean);
  const SaliencyMap l0 = attention_eclip(out, Encoder::Image, 0);
  const SaliencyMap l1 = attention_eclip(out, Encoder::Image, 1);
  for (std::size_t i = 0; i < sum.size(); ++i) {
    CHECK(sum.scores[i] == doctest::Approx(l0.scores[i] + l1.scores[i]).epsilon(1e-14));
    CHECK(mean.scores[i] == doctest::Approx(0.5 * sum.scores[i]).epsilon(1e-14));
  }
  CHECK(sum.layer_indices == std::vector<int>{0, 1});
  CHECK_THROWS_AS(attention_eclip(out, grads, Encoder::Image, std::span<const int>{}), UsageError);
}

TEST_CASE("gae_layer_update") {
  const Tensor a = Tensor({1, 2, 2}, std::vector<double>{0.7, 0.3, 0.4, 0.6});
  SUBCASE("mixed-sign gradient") {
    const Tensor da = Tensor({1, 2, 2}, std::vector<double>{1, 2, 0.5, -1});
    const Tensor u = gae_layer_update(a, da);
    const Tensor want = Tensor::matrix({{1.7, 0.6}, {0.2, 1.0}});
    for (std::size_t i = 0; i < 4; ++i) CHECK(u[i] == doctest::Approx(want[i]).epsilon(1e-15));
  }
  SUBCASE("all-negative gradient leaves the identity") {
    const Tensor da = Tensor({1, 2, 2}, -1.0);
    CHECK(gae_layer_update(a, da) == Tensor::identity(2));
  }
  SUBCASE("unit gradient adds the head-mean attention") {
    const Tensor a2 = Tensor({2, 2, 2}, std::vector<double>{0.7, 0.3, 0.4, 0.6, 0.1, 0.9, 0.5, 0.5});
    const Tensor u = gae_layer_update(a2, Tensor({2, 2, 2}, 1.0));
    const Tensor want = Tensor::matrix({{1.4, 0.6}, {0.45, 1.55}});
    for (std::size_t i = 0; i < 4; ++i) CHECK(u[i] == doctest::Approx(want[i]).epsilon(1e-15));
  }
  SUBCASE("row normalization") {
    const Tensor u = gae_layer_update(a, Tensor({1, 2, 2}, 1.0), true);
    for (std::size_t r = 0; r < 2; ++r) CHECK(u.at(r, 0) + u.at(r, 1) == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(gae_layer_update(a, Tensor({1, 2, 3}, 1.0)), DimensionError);
}

TEST_CASE("gae_rollout") {
  const Tensor u = Tensor::matrix({{1.7, 0.6}, {0.2, 1.0}});
  SUBCASE("single layer reads the cls row") {
    const Tensor one[] = {u};
    const SaliencyMap m = gae_rollout(one, Encoder::Text);
    CHECK(m.scores.numel() == 1);
    CHECK(m.scores[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(m.method == Method::Gae);
  }
  SUBCASE("identity updates give zero") {
    const Tensor ids[] = {Tensor::identity(3), Tensor::identity(3)};
    CHECK(gae_rollout(ids, Encoder::Image).scores == Tensor({2}, 0.0));
  }
  SUBCASE("an identity layer is absorbed") {
    const Tensor one[] = {u};
    const Tensor two[] = {u, Tensor::identity(2)};
    const Tensor three[] = {Tensor::identity(2), u};
    CHECK(gae_rollout(two, Encoder::Image).scores == gae_rollout(one, Encoder::Image).scores);
    CHECK(gae_rollout(three, Encoder::Image).scores == gae_rollout(one, Encoder::Image).scores);
  }
  CHECK_THROWS_AS(gae_rollout(std::span<const Tensor>{}, Encoder::Image), DimensionError);
  const Tensor bad[] = {u, Tensor::identity(3)};
  CHECK_THROWS_AS(gae_rollout(bad, Encoder::Image), DimensionError);
}

TEST_CASE("gae runs on the original multi-head model") {
  const Weights w = init_model(ModelConfig{});
  const Sample s = make_sample(w, 2);
  const ModelOutput out = forward_pair(w, s);
  for (Encoder e : {Encoder::Image, Encoder::Text}) {
    const SaliencyMap m = gae(out, e);
    CHECK(m.size() == out.traces(e).front().q.rows() - 1);
    CHECK(m.scores.all_finite());
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(m.scores[i] >= 0.0);
    CHECK(m.layer_indices.size() == out.traces(e).size());
  }
}

TEST_CASE("random_map and ranking") {
  const SaliencyMap a = random_map(Encoder::Image, 16, 4);
  CHECK(a.scores == random_map(Encoder::Image, 16, 4).scores);
  CHECK_FALSE(a.scores == random_map(Encoder::Image, 16, 5).scores);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(a.scores[i] >= 0.0);
    CHECK(a.scores[i] < 1.0);
  }

  SaliencyMap m;
  m.scores = Tensor({5}, std::vector<double>{0.2, 0.9, 0.2, -1.0, 0.9});
  CHECK(ranking(m) == std::vector<std::size_t>{1, 4, 0, 2, 3});
}
