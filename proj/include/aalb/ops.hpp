#pragma once

// Graph-free forward versions of the tensor ops. The autodiff record calls
// these for its forward values; the saliency code uses them directly.

#include <vector>

#include "aalb/tensor.hpp"

namespace aalb::ops {

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kLayerNormEpsilon = 1e-5;

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T without materializing the transpose.
Tensor matmul_transposed(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

/// Row-wise softmax, max-shifted.
Tensor softmax_rows(const Tensor& x);

struct NormalizedRows {
  Tensor values;
  /// Rows whose norm fell under kNormEpsilon and were divided by it instead.
  std::vector<bool> degenerate;
};
/// Divides each last-axis slice by max(||slice||, kNormEpsilon).
NormalizedRows l2_normalize(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = kLayerNormEpsilon);
Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& x, std::size_t row_begin, std::size_t row_end, std::size_t col_begin,
             std::size_t col_end);
Tensor concat(const std::vector<const Tensor*>& parts, std::size_t axis);
double sum(const Tensor& x);
double mean(const Tensor& x);
/// Cosine of two equal-length vectors, each norm floored at kNormEpsilon.
double cosine_similarity(const Tensor& a, const Tensor& b);

/// Affine rescale to [0, 1]. When every entry is equal the result is all
/// zeros rather than a division by zero.
Tensor min_max(const Tensor& x);

}  // namespace aalb::ops
