#include <cmath>

#include "aalb/ops.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace aalb;
using aalb::testing::uniform;

TEST_CASE("tensor construction keeps shape and data consistent") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 1.5);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 2}), DimensionError);
  CHECK(Tensor::scalar(3.0).item() == 3.0);
  CHECK_THROWS_AS(Tensor::zeros({2, 1}).item(), DimensionError);
  CHECK(Tensor::identity(2) == Tensor::matrix({{1, 0}, {0, 1}}));
  CHECK(Tensor::row({1, 2}).shape() == Shape{1, 2});
}

TEST_CASE("reshape preserves data and checks the element count") {
  Tensor t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  Tensor r = t.reshaped({3, 2});
  CHECK(r.at(2, 1) == 6.0);
  CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
    CHECK(ops::matmul(Tensor::identity(2), m) == m);
  }
  SUBCASE("cls query times first key") {
    const Tensor out = ops::matmul(Tensor::row({1, 0}), Tensor::matrix({{0.8}, {0.6}}));
    CHECK(out.shape() == Shape{1, 1});
    CHECK(out.item() == 0.8);
  }
  SUBCASE("random 3x4 by 4x2 against a triple loop") {
    const Tensor a = uniform({3, 4}, 11);
    const Tensor b = uniform({4, 2}, 12);
    const Tensor c = ops::matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
        CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-14));
      }
    }
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
      FAIL("expected a DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("2x3") != std::string::npos);
    }
  }
  SUBCASE("transposed product matches explicit transpose") {
    const Tensor a = uniform({5, 3}, 1);
    const Tensor b = uniform({4, 3}, 2);
    const Tensor x = ops::matmul_transposed(a, b);
    const Tensor y = ops::matmul(a, ops::transpose(b));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x[i] == doctest::Approx(y[i]).epsilon(1e-14));
  }
}

TEST_CASE("softmax_rows") {
  CHECK(ops::softmax_rows(Tensor::row({0, 0})) == Tensor::row({0.5, 0.5}));
  const Tensor two_thirds = ops::softmax_rows(Tensor::row({std::log(2.0), 0.0}));
  CHECK(two_thirds[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(two_thirds[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const Tensor big = ops::softmax_rows(Tensor::row({1000, 0}));
  CHECK(std::abs(big[0] - 1.0) <= 1e-12);
  CHECK(std::abs(big[1]) <= 1e-12);
  CHECK(big.all_finite());

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor s = ops::softmax_rows(uniform({4, 7}, seed, -30, 30));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (double v : s.row_span(r)) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("l2_normalize") {
  CHECK(ops::l2_normalize(Tensor::row({3, 4})).values[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(ops::l2_normalize(Tensor::row({3, 4})).values[1] == doctest::Approx(0.8).epsilon(1e-15));
  const auto diag = ops::l2_normalize(Tensor::row({1.414, 1.414}));
  CHECK(std::abs(diag.values[0] - 0.70710678) < 1e-8);
  CHECK(std::abs(diag.values[1] - 0.70710678) < 1e-8);
  CHECK_FALSE(diag.degenerate[0]);

  const auto zero = ops::l2_normalize(Tensor::row({0, 0}));
  CHECK(zero.values == Tensor::row({0, 0}));
  CHECK(zero.degenerate[0]);

  const auto many = ops::l2_normalize(uniform({6, 5}, 3));
  for (std::size_t r = 0; r < 6; ++r) {
    double n = 0.0;
    for (double v : many.values.row_span(r)) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-9);
  }
}

TEST_CASE("layer_norm rows have zero mean and unit variance before the affine part") {
  const Tensor x = uniform({3, 8}, 5);
  const Tensor y = ops::layer_norm(x, Tensor::ones({1, 8}), Tensor::zeros({1, 8}));
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0.0, var = 0.0;
    for (double v : y.row_span(r)) mu += v;
    mu /= 8.0;
    for (double v : y.row_span(r)) var += (v - mu) * (v - mu);
    var /= 8.0;
    CHECK(std::abs(mu) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
  CHECK_THROWS_AS(ops::layer_norm(x, Tensor::ones({1, 7}), Tensor::zeros({1, 8})), DimensionError);
}

TEST_CASE("elementwise ops") {
  const Tensor a = Tensor::matrix({{1, -2}, {0, 3}});
  const Tensor b = Tensor::matrix({{2, 2}, {-1, 0.5}});
  CHECK(ops::relu(a) == Tensor::matrix({{1, 0}, {0, 3}}));
  CHECK(ops::add(a, b) == Tensor::matrix({{3, 0}, {-1, 3.5}}));
  CHECK(ops::scale(a, 2.0) == Tensor::matrix({{2, -4}, {0, 6}}));
  CHECK(ops::hadamard(a, b) == Tensor::matrix({{2, -4}, {0, 1.5}}));
  CHECK(ops::transpose(a) == Tensor::matrix({{1, 0}, {-2, 3}}));
  CHECK(ops::sum(a) == 2.0);
  CHECK(ops::mean(a) == 0.5);
  CHECK_THROWS_AS(ops::add(a, Tensor::zeros({1, 2})), DimensionError);
  CHECK_THROWS_AS(ops::hadamard(a, Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("slice and concat") {
  const Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(ops::slice(m, 1, 2, 1, 3) == Tensor::matrix({{5, 6}}));
  CHECK_THROWS_AS(ops::slice(m, 0, 3, 0, 1), RangeError);
  CHECK_THROWS_AS(ops::slice(m, 1, 1, 0, 1), RangeError);

  const Tensor top = Tensor::matrix({{1, 2}});
  const Tensor bottom = Tensor::matrix({{3, 4}});
  CHECK(ops::concat({&top, &bottom}, 0) == Tensor::matrix({{1, 2}, {3, 4}}));
  CHECK(ops::concat({&top, &bottom}, 1) == Tensor::matrix({{1, 2, 3, 4}}));
  const Tensor wide = Tensor::zeros({1, 3});
  CHECK_THROWS_AS(ops::concat({&top, &wide}, 0), DimensionError);
}

TEST_CASE("cosine similarity and min-max") {
  CHECK(ops::cosine_similarity(Tensor::row({1, 0}), Tensor::row({0.8, 0.6})) == doctest::Approx(0.8));
  CHECK(ops::cosine_similarity(Tensor::row({0, 0}), Tensor::row({1, 1})) == 0.0);
  CHECK(ops::min_max(Tensor::row({2, 4, 3})) == Tensor::row({0, 1, 0.5}));
  CHECK(ops::min_max(Tensor::row({7, 7, 7})) == Tensor::row({0, 0, 0}));
}
