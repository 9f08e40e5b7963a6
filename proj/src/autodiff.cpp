#include "aalb/autodiff.hpp"

#include <cmath>
#include <string>

#include "aalb/kernels.hpp"
#include "aalb/ops.hpp"

namespace aalb {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::MatMul: return "matmul";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Relu: return "relu";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::Hadamard: return "hadamard";
    case OpKind::Transpose: return "transpose";
    case OpKind::Slice: return "slice";
    case OpKind::Concat: return "concat";
    case OpKind::Mean: return "mean";
    case OpKind::Sum: return "sum";
    case OpKind::CosineSimilarity: return "cosine_similarity";
    case OpKind::Opaque: return "opaque";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Forward recording

NodeId ComputationRecord::push(OpKind kind, std::vector<NodeId> inputs, OpParams params,
                               Tensor value) {
  NodeId id{static_cast<std::uint32_t>(nodes_.size())};
  nodes_.push_back(Node{kind, std::move(inputs), std::move(params), std::move(value)});
  return id;
}

const Node& ComputationRecord::node(NodeId id) const {
  if (!id.valid() || id.index >= nodes_.size()) {
    throw RangeError("node id " + std::to_string(id.index) + " not in record of size " +
                     std::to_string(nodes_.size()));
  }
  return nodes_[id.index];
}

NodeId ComputationRecord::input(Tensor value) {
  return push(OpKind::Input, {}, {}, std::move(value));
}

NodeId ComputationRecord::matmul(NodeId a, NodeId b) {
  return push(OpKind::MatMul, {a, b}, {}, ops::matmul(value(a), value(b)));
}

NodeId ComputationRecord::softmax_rows(NodeId x) {
  return push(OpKind::SoftmaxRows, {x}, {}, ops::softmax_rows(value(x)));
}

NodeId ComputationRecord::l2_normalize(NodeId x) {
  auto r = ops::l2_normalize(value(x));
  OpParams p;
  p.degenerate = std::move(r.degenerate);
  return push(OpKind::L2Normalize, {x}, std::move(p), std::move(r.values));
}

NodeId ComputationRecord::layer_norm(NodeId x, NodeId gamma, NodeId beta) {
  OpParams p;
  p.scalar = ops::kLayerNormEpsilon;
  return push(OpKind::LayerNorm, {x, gamma, beta}, std::move(p),
              ops::layer_norm(value(x), value(gamma), value(beta), ops::kLayerNormEpsilon));
}

NodeId ComputationRecord::relu(NodeId x) {
  return push(OpKind::Relu, {x}, {}, ops::relu(value(x)));
}

NodeId ComputationRecord::add(NodeId a, NodeId b) {
  return push(OpKind::Add, {a, b}, {}, ops::add(value(a), value(b)));
}

NodeId ComputationRecord::scale(NodeId x, double c) {
  OpParams p;
  p.scalar = c;
  return push(OpKind::Scale, {x}, std::move(p), ops::scale(value(x), c));
}

NodeId ComputationRecord::hadamard(NodeId a, NodeId b) {
  return push(OpKind::Hadamard, {a, b}, {}, ops::hadamard(value(a), value(b)));
}

NodeId ComputationRecord::transpose(NodeId x) {
  return push(OpKind::Transpose, {x}, {}, ops::transpose(value(x)));
}

NodeId ComputationRecord::slice(NodeId x, std::size_t row_begin, std::size_t row_end,
                                std::size_t col_begin, std::size_t col_end) {
  OpParams p;
  p.row_begin = row_begin;
  p.row_end = row_end;
  p.col_begin = col_begin;
  p.col_end = col_end;
  return push(OpKind::Slice, {x}, std::move(p),
              ops::slice(value(x), row_begin, row_end, col_begin, col_end));
}

NodeId ComputationRecord::concat(std::span<const NodeId> parts, std::size_t axis) {
  std::vector<const Tensor*> values;
  values.reserve(parts.size());
  for (NodeId id : parts) values.push_back(&value(id));
  OpParams p;
  p.axis = axis;
  Tensor out = ops::concat(values, axis);
  return push(OpKind::Concat, std::vector<NodeId>(parts.begin(), parts.end()), std::move(p),
              std::move(out));
}

NodeId ComputationRecord::mean(NodeId x) {
  return push(OpKind::Mean, {x}, {}, Tensor::scalar(ops::mean(value(x))));
}

NodeId ComputationRecord::sum(NodeId x) {
  return push(OpKind::Sum, {x}, {}, Tensor::scalar(ops::sum(value(x))));
}

NodeId ComputationRecord::cosine_similarity(NodeId a, NodeId b) {
  return push(OpKind::CosineSimilarity, {a, b}, {},
              Tensor::scalar(ops::cosine_similarity(value(a), value(b))));
}

NodeId ComputationRecord::opaque(Tensor value, std::vector<NodeId> inputs) {
  for (NodeId id : inputs) node(id);
  return push(OpKind::Opaque, std::move(inputs), {}, std::move(value));
}

// ---------------------------------------------------------------------------
// Gradients

bool GradientMap::has(NodeId id) const {
  return id.valid() && id.index < grads_.size() && grads_[id.index].has_value();
}

const Tensor& GradientMap::at(NodeId id) const {
  if (!has(id)) throw RangeError("no gradient recorded for node " + std::to_string(id.index));
  return *grads_[id.index];
}

Tensor GradientMap::at_or_zero(const ComputationRecord& record, NodeId id) const {
  if (has(id)) return *grads_[id.index];
  return Tensor::zeros(record.value(id).shape());
}

namespace {

void accumulate(std::vector<std::optional<Tensor>>& grads, NodeId id, Tensor contribution) {
  auto& slot = grads[id.index];
  if (!slot) {
    slot = std::move(contribution);
    return;
  }
  kernels::active().axpy(slot->numel(), 1.0, contribution.data().data(), slot->data().data());
}

Tensor softmax_backward(const Tensor& y, const Tensor& g) {
  // dx = y * (g - <g, y>) per row.
  Tensor dx(y.shape());
  const auto& kt = kernels::active();
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto yr = y.row_span(i);
    auto gr = g.row_span(i);
    auto out = dx.row_span(i);
    const double s = kt.dot(yr.data(), gr.data(), yr.size());
    for (std::size_t j = 0; j < yr.size(); ++j) out[j] = yr[j] * (gr[j] - s);
  }
  return dx;
}

Tensor l2_normalize_backward(const Tensor& x, const Tensor& y, const std::vector<bool>& degenerate,
                             const Tensor& g) {
  Tensor dx(x.shape());
  const std::size_t d = x.cols();
  const auto& kt = kernels::active();
  for (std::size_t i = 0; i < degenerate.size(); ++i) {
    const double* xr = x.data().data() + i * d;
    const double* yr = y.data().data() + i * d;
    const double* gr = g.data().data() + i * d;
    double* out = dx.data().data() + i * d;
    if (degenerate[i]) {
      // The denominator is the constant epsilon floor.
      for (std::size_t j = 0; j < d; ++j) out[j] = gr[j] / ops::kNormEpsilon;
      continue;
    }
    const double norm = std::sqrt(kt.dot(xr, xr, d));
    const double proj = kt.dot(yr, gr, d);
    for (std::size_t j = 0; j < d; ++j) out[j] = (gr[j] - yr[j] * proj) / norm;
  }
  return dx;
}

struct LayerNormGrads {
  Tensor dx, dgamma, dbeta;
};

LayerNormGrads layer_norm_backward(const Tensor& x, const Tensor& gamma, double eps,
                                   const Tensor& g) {
  const std::size_t d = x.cols();
  const double inv_d = 1.0 / static_cast<double>(d);
  LayerNormGrads r{Tensor(x.shape()), Tensor(gamma.shape()), Tensor(gamma.shape())};
  std::vector<double> xhat(d), gxhat(d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row_span(i);
    auto gr = g.row_span(i);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu *= inv_d;
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var *= inv_d;
    const double inv = 1.0 / std::sqrt(var + eps);
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (in[j] - mu) * inv;
      gxhat[j] = gr[j] * gamma[j];
      mean_g += gxhat[j];
      mean_gx += gxhat[j] * xhat[j];
      r.dgamma[j] += gr[j] * xhat[j];
      r.dbeta[j] += gr[j];
    }
    mean_g *= inv_d;
    mean_gx *= inv_d;
    auto out = r.dx.row_span(i);
    for (std::size_t j = 0; j < d; ++j) out[j] = inv * (gxhat[j] - mean_g - xhat[j] * mean_gx);
  }
  return r;
}

}  // namespace

GradientMap backward(const ComputationRecord& record, NodeId root) {
  const Node& root_node = record.node(root);
  if (root_node.value.numel() != 1) {
    throw DimensionError("backward: root must be scalar, got " +
                         shape_to_string(root_node.value.shape()));
  }
  GradientMap map;
  auto& grads = map.grads_;
  grads.assign(root.index + 1, std::nullopt);
  grads[root.index] = Tensor::ones(root_node.value.shape());

  const auto& kt = kernels::active();
  for (std::uint32_t idx = root.index + 1; idx-- > 0;) {
    if (!grads[idx]) continue;
    const Node& n = record.node(NodeId{idx});
    const Tensor& g = *grads[idx];
    const auto& in = n.inputs;
    switch (n.kind) {
      case OpKind::Input:
        break;
      case OpKind::MatMul: {
        const Tensor& a = record.value(in[0]);
        const Tensor& b = record.value(in[1]);
        Tensor da({a.rows(), a.cols()});
        kt.matmul_nt(g.rows(), g.cols(), b.rows(), g.data().data(), b.data().data(),
                     da.data().data());
        Tensor db({b.rows(), b.cols()});
        kt.matmul_tn(a.cols(), a.rows(), g.cols(), a.data().data(), g.data().data(),
                     db.data().data());
        accumulate(grads, in[0], std::move(da));
        accumulate(grads, in[1], std::move(db));
        break;
      }
      case OpKind::SoftmaxRows:
        accumulate(grads, in[0], softmax_backward(n.value, g));
        break;
      case OpKind::L2Normalize:
        accumulate(grads, in[0],
                   l2_normalize_backward(record.value(in[0]), n.value, n.params.degenerate, g));
        break;
      case OpKind::LayerNorm: {
        auto r = layer_norm_backward(record.value(in[0]), record.value(in[1]), n.params.scalar, g);
        accumulate(grads, in[0], std::move(r.dx));
        accumulate(grads, in[1], std::move(r.dgamma));
        accumulate(grads, in[2], std::move(r.dbeta));
        break;
      }
      case OpKind::Relu: {
        const Tensor& x = record.value(in[0]);
        Tensor dx(x.shape());
        // The kink at exactly 0 gets derivative 0.
        for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case OpKind::Add:
        accumulate(grads, in[0], g);
        accumulate(grads, in[1], g);
        break;
      case OpKind::Scale:
        accumulate(grads, in[0], ops::scale(g, n.params.scalar));
        break;
      case OpKind::Hadamard:
        accumulate(grads, in[0], ops::hadamard(g, record.value(in[1])));
        accumulate(grads, in[1], ops::hadamard(g, record.value(in[0])));
        break;
      case OpKind::Transpose:
        accumulate(grads, in[0], ops::transpose(g));
        break;
      case OpKind::Slice: {
        Tensor dx(record.value(in[0]).shape());
        const auto& p = n.params;
        for (std::size_t i = p.row_begin; i < p.row_end; ++i) {
          for (std::size_t j = p.col_begin; j < p.col_end; ++j) {
            dx.at(i, j) = g.at(i - p.row_begin, j - p.col_begin);
          }
        }
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case OpKind::Concat: {
        std::size_t offset = 0;
        for (NodeId part : in) {
          const Tensor& v = record.value(part);
          if (n.params.axis == 0) {
            accumulate(grads, part, ops::slice(g, offset, offset + v.rows(), 0, g.cols()));
            offset += v.rows();
          } else {
            accumulate(grads, part, ops::slice(g, 0, g.rows(), offset, offset + v.cols()));
            offset += v.cols();
          }
        }
        break;
      }
      case OpKind::Mean: {
        const Tensor& x = record.value(in[0]);
        accumulate(grads, in[0], Tensor(x.shape(), g.item() / static_cast<double>(x.numel())));
        break;
      }
      case OpKind::Sum:
        accumulate(grads, in[0], Tensor(record.value(in[0]).shape(), g.item()));
        break;
      case OpKind::CosineSimilarity: {
        const Tensor& a = record.value(in[0]);
        const Tensor& b = record.value(in[1]);
        const std::size_t len = a.numel();
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        const double na_raw = std::sqrt(kt.dot(pa, pa, len));
        const double nb_raw = std::sqrt(kt.dot(pb, pb, len));
        const double na = std::max(na_raw, ops::kNormEpsilon);
        const double nb = std::max(nb_raw, ops::kNormEpsilon);
        const double c = n.value.item();
        const double gs = g.item();
        Tensor da(a.shape()), db(b.shape());
        // A floored norm is constant, so its self term drops out.
        const double ca = na_raw >= ops::kNormEpsilon ? c / (na * na) : 0.0;
        const double cb = nb_raw >= ops::kNormEpsilon ? c / (nb * nb) : 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          da[i] = gs * (pb[i] / (na * nb) - ca * pa[i]);
          db[i] = gs * (pa[i] / (na * nb) - cb * pb[i]);
        }
        accumulate(grads, in[0], std::move(da));
        accumulate(grads, in[1], std::move(db));
        break;
      }
      case OpKind::Opaque:
        if (!in.empty()) {
          throw UnsupportedOpError("backward: op '" + std::string(op_name(n.kind)) + "' at node " +
                                   std::to_string(idx) + " has no derivative rule");
        }
        break;
      default:
        throw UnsupportedOpError("backward: unsupported op kind " +
                                 std::to_string(static_cast<int>(n.kind)));
    }
  }
  return map;
}

Tensor finite_diff_grad(const ScalarFunction& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw InputError("finite_diff_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace aalb
