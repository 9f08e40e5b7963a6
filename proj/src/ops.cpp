#include "aalb/ops.hpp"

#include <algorithm>
#include <cmath>

#include "aalb/kernels.hpp"

namespace aalb::ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " * " +
                         shape_to_string(b.shape()));
  }
  Tensor c({a.rows(), b.cols()});
  kernels::active().matmul_nn(a.rows(), a.cols(), b.cols(), a.data().data(), b.data().data(),
                              c.data().data());
  return c;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_transposed");
  require_rank2(b, "matmul_transposed");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: inner dimensions differ, " +
                         shape_to_string(a.shape()) + " * " + shape_to_string(b.shape()) + "^T");
  }
  Tensor c({a.rows(), b.rows()});
  kernels::active().matmul_nt(a.rows(), a.cols(), b.rows(), a.data().data(), b.data().data(),
                              c.data().data());
  return c;
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  Tensor t({x.cols(), x.rows()});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) t.at(j, i) = x.at(i, j);
  }
  return t;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row_span(i);
    auto out = y.row_span(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      out[j] = std::exp(in[j] - mx);
      z += out[j];
    }
    for (auto& v : out) v /= z;
  }
  return y;
}

NormalizedRows l2_normalize(const Tensor& x) {
  NormalizedRows r{Tensor(x.shape()), std::vector<bool>(x.numel() / x.cols(), false)};
  const std::size_t d = x.cols();
  const auto& kt = kernels::active();
  for (std::size_t i = 0; i < r.degenerate.size(); ++i) {
    const double* src = x.data().data() + i * d;
    double* dst = r.values.data().data() + i * d;
    const double norm = std::sqrt(kt.dot(src, src, d));
    const double denom = std::max(norm, kNormEpsilon);
    r.degenerate[i] = norm < kNormEpsilon;
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[j] / denom;
  }
  return r;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank2(x, "layer_norm");
  if (gamma.numel() != x.cols() || beta.numel() != x.cols()) {
    throw DimensionError("layer_norm: gain/offset must have " + std::to_string(x.cols()) +
                         " entries, got " + shape_to_string(gamma.shape()) + " and " +
                         shape_to_string(beta.shape()));
  }
  const std::size_t d = x.cols();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row_span(i);
    auto out = y.row_span(i);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[j] = (in[j] - mu) * inv * gamma[j] + beta[j];
  }
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y = a;
  kernels::active().axpy(y.numel(), 1.0, b.data().data(), y.data().data());
  return y;
}

Tensor scale(const Tensor& x, double c) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = c * x[i];
  return y;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor y(a.shape());
  kernels::active().hadamard(a.numel(), a.data().data(), b.data().data(), y.data().data());
  return y;
}

Tensor slice(const Tensor& x, std::size_t row_begin, std::size_t row_end, std::size_t col_begin,
             std::size_t col_end) {
  require_rank2(x, "slice");
  if (row_begin >= row_end || row_end > x.rows() || col_begin >= col_end || col_end > x.cols()) {
    throw RangeError("slice: rows [" + std::to_string(row_begin) + "," + std::to_string(row_end) +
                     ") cols [" + std::to_string(col_begin) + "," + std::to_string(col_end) +
                     ") outside " + shape_to_string(x.shape()));
  }
  Tensor y({row_end - row_begin, col_end - col_begin});
  for (std::size_t i = row_begin; i < row_end; ++i) {
    for (std::size_t j = col_begin; j < col_end; ++j) y.at(i - row_begin, j - col_begin) = x.at(i, j);
  }
  return y;
}

Tensor concat(const std::vector<const Tensor*>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
  std::size_t rows = 0, cols = 0;
  for (const Tensor* p : parts) {
    require_rank2(*p, "concat");
    const Tensor& first = *parts.front();
    if (axis == 0 && p->cols() != first.cols()) {
      throw DimensionError("concat rows: column counts differ, " + shape_to_string(first.shape()) +
                           " vs " + shape_to_string(p->shape()));
    }
    if (axis == 1 && p->rows() != first.rows()) {
      throw DimensionError("concat cols: row counts differ, " + shape_to_string(first.shape()) +
                           " vs " + shape_to_string(p->shape()));
    }
    rows = axis == 0 ? rows + p->rows() : p->rows();
    cols = axis == 1 ? cols + p->cols() : p->cols();
  }
  Tensor y({rows, cols});
  std::size_t offset = 0;
  for (const Tensor* p : parts) {
    for (std::size_t i = 0; i < p->rows(); ++i) {
      for (std::size_t j = 0; j < p->cols(); ++j) {
        if (axis == 0) {
          y.at(offset + i, j) = p->at(i, j);
        } else {
          y.at(i, offset + j) = p->at(i, j);
        }
      }
    }
    offset += axis == 0 ? p->rows() : p->cols();
  }
  return y;
}

double sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return s;
}

double mean(const Tensor& x) { return sum(x) / static_cast<double>(x.numel()); }

double cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("cosine_similarity: length mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
  const auto& kt = kernels::active();
  const std::size_t n = a.numel();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  const double na = std::max(std::sqrt(kt.dot(pa, pa, n)), kNormEpsilon);
  const double nb = std::max(std::sqrt(kt.dot(pb, pb, n)), kNormEpsilon);
  return kt.dot(pa, pb, n) / (na * nb);
}

Tensor min_max(const Tensor& x) {
  Tensor y(x.shape());
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return y;
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = (x[i] - *lo) / range;
  return y;
}

}  // namespace aalb::ops
