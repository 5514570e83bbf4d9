#include "mdl/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace mdl::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

constexpr std::array<std::string_view, 21> kNames = {
    "leaf",        "matmul",      "affine",    "add",         "mul",    "broadcast_add",
    "relu",        "sigmoid",     "softmax",   "layer_norm",  "concat", "select_mean",
    "gather",      "sum",         "scale",     "reshape",     "token_linear",
    "token_mix",   "attn_scores", "attn_mix",  "bce"};

[[noreturn]] void shape_error(Primitive kind, const Shape& a, const Shape& b, const std::string& why) {
  throw std::invalid_argument(std::string(primitive_name(kind)) + ": " + why + " (" + shape_str(a) +
                              " vs " + shape_str(b) + ")");
}

void expect_arity(Primitive kind, std::size_t got, std::size_t want) {
  if (got != want) {
    throw std::invalid_argument(std::string(primitive_name(kind)) + ": expected " +
                                std::to_string(want) + " inputs, got " + std::to_string(got));
  }
}

Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s;
  if (out.empty()) out.push_back(last);
  else out.back() = last;
  return out;
}

// For each element of `a`, the flat offset of the broadcast element of `b`.
std::vector<std::size_t> broadcast_map(const Shape& a, const Shape& b) {
  const std::size_t r = a.size();
  Shape bp(r, 1);
  std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  std::vector<std::size_t> bstride(r, 0);
  std::size_t acc = 1;
  for (std::size_t i = r; i-- > 0;) {
    bstride[i] = bp[i] == 1 ? 0 : acc;
    acc *= bp[i];
  }
  const std::size_t n = numel(a);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      ++idx[i];
      off += bstride[i];
      if (idx[i] < a[i]) break;
      off -= bstride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return map;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor forward(Primitive kind, const std::vector<const Tensor*>& in, const Attrs& attrs,
               std::vector<double>& saved) {
  switch (kind) {
    case Primitive::MatMul:
    case Primitive::Affine: {
      expect_arity(kind, in.size(), kind == Primitive::Affine ? 3 : 2);
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      if (w.rank() != 2 || x.rank() < 1 || x.cols() != w.dim(0)) {
        shape_error(kind, x.shape(), w.shape(), "inner dimensions differ");
      }
      const std::size_t m = x.rows(), k = w.dim(0), n = w.dim(1);
      Tensor out = Tensor::zeros(with_last(x.shape(), n));
      MutMap(out.data(), m, n).noalias() = ConstMap(x.data(), m, k) * ConstMap(w.data(), k, n);
      if (kind == Primitive::Affine) {
        const Tensor& b = *in[2];
        if (b.rank() != 1 || b.dim(0) != n) shape_error(kind, w.shape(), b.shape(), "bias length");
        MutMap(out.data(), m, n).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), n);
      }
      return out;
    }
    case Primitive::Add:
    case Primitive::Mul: {
      expect_arity(kind, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.shape() != b.shape()) shape_error(kind, a.shape(), b.shape(), "shapes differ");
      Tensor out = a;
      if (kind == Primitive::Add) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
      } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
      }
      return out;
    }
    case Primitive::BroadcastAdd: {
      expect_arity(kind, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (b.rank() > a.rank()) shape_error(kind, a.shape(), b.shape(), "operand rank too large");
      const std::size_t off = a.rank() - b.rank();
      for (std::size_t i = 0; i < b.rank(); ++i) {
        if (b.dim(i) != 1 && b.dim(i) != a.dim(off + i)) {
          shape_error(kind, a.shape(), b.shape(), "not broadcastable");
        }
      }
      Tensor out = a;
      const auto map = broadcast_map(a.shape(), b.shape());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[map[i]];
      return out;
    }
    case Primitive::Relu: {
      expect_arity(kind, in.size(), 1);
      Tensor out = *in[0];
      for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case Primitive::Sigmoid: {
      expect_arity(kind, in.size(), 1);
      Tensor out = *in[0];
      for (double& v : out.values()) v = stable_sigmoid(v);
      return out;
    }
    case Primitive::Softmax: {
      expect_arity(kind, in.size(), 1);
      Tensor out = *in[0];
      const std::size_t n = out.cols();
      for (std::size_t r = 0; r < out.rows(); ++r) {
        double* row = out.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] /= z;
      }
      return out;
    }
    case Primitive::LayerNorm: {
      expect_arity(kind, in.size(), 3);
      const Tensor& x = *in[0];
      const Tensor& g = *in[1];
      const Tensor& b = *in[2];
      if (g.shape() != b.shape() || g.rank() > x.rank() || g.rank() == 0 ||
          !std::equal(g.shape().begin(), g.shape().end(), x.shape().end() - static_cast<std::ptrdiff_t>(g.rank()))) {
        shape_error(kind, x.shape(), g.shape(), "gain/bias must match trailing axes");
      }
      const std::size_t n = x.cols(), period = g.size();
      Tensor out = Tensor::zeros(x.shape());
      saved.assign(2 * x.rows(), 0.0);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* row = x.data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        saved[2 * r] = mean;
        saved[2 * r + 1] = inv;
        const std::size_t goff = (r * n) % period;
        for (std::size_t j = 0; j < n; ++j) {
          out[r * n + j] = (row[j] - mean) * inv * g[goff + j] + b[goff + j];
        }
      }
      return out;
    }
    case Primitive::Concat: {
      if (in.empty()) throw std::invalid_argument("concat: no inputs");
      const Tensor& first = *in[0];
      std::size_t total = 0;
      for (const Tensor* t : in) {
        if (t->rank() != first.rank() ||
            !std::equal(t->shape().begin(), t->shape().end() - 1, first.shape().begin())) {
          shape_error(kind, first.shape(), t->shape(), "leading axes differ");
        }
        total += t->cols();
      }
      Tensor out = Tensor::zeros(with_last(first.shape(), total));
      const std::size_t rows = first.rows();
      std::size_t col = 0;
      for (const Tensor* t : in) {
        const std::size_t c = t->cols();
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(t->data() + r * c, c, out.data() + r * total + col);
        }
        col += c;
      }
      return out;
    }
    case Primitive::SelectMean: {
      expect_arity(kind, in.size(), 1);
      const Tensor& x = *in[0];
      if (x.rank() != 3) shape_error(kind, x.shape(), {}, "expects [batch, rows, dim]");
      const std::size_t bsz = x.dim(0), s = x.dim(1), d = x.dim(2);
      if (attrs.mask.size() != bsz * s) {
        shape_error(kind, x.shape(), {attrs.mask.size()}, "mask size");
      }
      Tensor out = Tensor::zeros({bsz, d});
      for (std::size_t b = 0; b < bsz; ++b) {
        std::size_t count = 0;
        for (std::size_t r = 0; r < s; ++r) {
          if (!attrs.mask[b * s + r]) continue;
          ++count;
          const double* row = x.data() + (b * s + r) * d;
          for (std::size_t j = 0; j < d; ++j) out[b * d + j] += row[j];
        }
        if (count == 0) {
          throw std::invalid_argument("select_mean: empty selection for batch row " + std::to_string(b));
        }
        for (std::size_t j = 0; j < d; ++j) out[b * d + j] /= static_cast<double>(count);
      }
      return out;
    }
    case Primitive::Gather: {
      expect_arity(kind, in.size(), 1);
      const Tensor& table = *in[0];
      if (table.rank() != 2) shape_error(kind, table.shape(), {}, "table must be rank 2");
      const std::size_t d = table.dim(1);
      if (attrs.index.empty()) throw std::invalid_argument("gather: no rows requested");
      Tensor out = Tensor::zeros({attrs.index.size(), d});
      for (std::size_t i = 0; i < attrs.index.size(); ++i) {
        const std::size_t row = attrs.index[i];
        if (row >= table.dim(0)) {
          throw std::out_of_range("gather: row " + std::to_string(row) + " out of range for table " +
                                  shape_str(table.shape()));
        }
        std::copy_n(table.data() + row * d, d, out.data() + i * d);
      }
      return out;
    }
    case Primitive::Sum: {
      expect_arity(kind, in.size(), 1);
      double total = 0.0;
      for (double v : in[0]->values()) total += v;
      return Tensor::scalar(total);
    }
    case Primitive::Scale: {
      expect_arity(kind, in.size(), 1);
      Tensor out = *in[0];
      for (double& v : out.values()) v *= attrs.scalar;
      return out;
    }
    case Primitive::Reshape: {
      expect_arity(kind, in.size(), 1);
      if (numel(attrs.shape) != in[0]->size()) {
        shape_error(kind, in[0]->shape(), attrs.shape, "element counts differ");
      }
      return in[0]->reshaped(attrs.shape);
    }
    case Primitive::TokenLinear: {
      expect_arity(kind, in.size(), 3);
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      const Tensor& b = *in[2];
      if (w.rank() != 3 || x.rank() < 2 || x.dim(x.rank() - 2) != w.dim(0) || x.cols() != w.dim(1)) {
        shape_error(kind, x.shape(), w.shape(), "per-token weight does not match [tokens, in]");
      }
      const std::size_t ntok = w.dim(0), din = w.dim(1), dout = w.dim(2);
      if (b.rank() != 2 || b.dim(0) != ntok || b.dim(1) != dout) {
        shape_error(kind, w.shape(), b.shape(), "bias must be [tokens, out]");
      }
      const std::size_t lead = x.size() / (ntok * din);
      Tensor out = Tensor::zeros(with_last(x.shape(), dout));
      for (std::size_t t = 0; t < ntok; ++t) {
        ConstStrided xt(x.data() + t * din, lead, din, Eigen::OuterStride<>(ntok * din));
        MutStrided yt(out.data() + t * dout, lead, dout, Eigen::OuterStride<>(ntok * dout));
        yt.noalias() = xt * ConstMap(w.data() + t * din * dout, din, dout);
        yt.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data() + t * dout, dout);
      }
      return out;
    }
    case Primitive::TokenMix: {
      expect_arity(kind, in.size(), 1);
      const Tensor& x = *in[0];
      if (x.rank() < 2) shape_error(kind, x.shape(), {}, "expects [..., tokens, dim]");
      const std::size_t ntok = x.dim(x.rank() - 2), d = x.cols();
      if (d % ntok != 0) {
        shape_error(kind, x.shape(), {ntok}, "token dim not divisible by token count");
      }
      const std::size_t seg = d / ntok, lead = x.size() / (ntok * d);
      Tensor out = Tensor::zeros(x.shape());
      for (std::size_t l = 0; l < lead; ++l) {
        const double* src = x.data() + l * ntok * d;
        double* dst = out.data() + l * ntok * d;
        for (std::size_t h = 0; h < ntok; ++h) {
          for (std::size_t i = 0; i < ntok; ++i) {
            std::copy_n(src + i * d + h * seg, seg, dst + h * d + i * seg);
          }
        }
      }
      return out;
    }
    case Primitive::AttnScores: {
      expect_arity(kind, in.size(), 2);
      const Tensor& q = *in[0];
      const Tensor& k = *in[1];
      if (q.rank() != 3 || k.rank() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
        shape_error(kind, q.shape(), k.shape(), "query/key shapes");
      }
      const std::size_t h = attrs.heads, d = q.dim(2);
      if (h == 0 || d % h != 0) shape_error(kind, q.shape(), {h}, "dim not divisible by heads");
      const std::size_t bsz = q.dim(0), nq = q.dim(1), nk = k.dim(1), dh = d / h;
      const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
      Tensor out = Tensor::zeros({bsz, h, nq, nk});
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t hh = 0; hh < h; ++hh) {
          for (std::size_t i = 0; i < nq; ++i) {
            const double* qi = q.data() + (b * nq + i) * d + hh * dh;
            for (std::size_t j = 0; j < nk; ++j) {
              const double* kj = k.data() + (b * nk + j) * d + hh * dh;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
              out[((b * h + hh) * nq + i) * nk + j] = s * inv;
            }
          }
        }
      }
      return out;
    }
    case Primitive::AttnMix: {
      expect_arity(kind, in.size(), 2);
      const Tensor& p = *in[0];
      const Tensor& v = *in[1];
      if (p.rank() != 4 || v.rank() != 3 || p.dim(0) != v.dim(0) || p.dim(3) != v.dim(1)) {
        shape_error(kind, p.shape(), v.shape(), "weights/value shapes");
      }
      const std::size_t bsz = p.dim(0), h = p.dim(1), nq = p.dim(2), nk = p.dim(3), d = v.dim(2);
      if (h != attrs.heads || d % h != 0) shape_error(kind, p.shape(), v.shape(), "head count");
      const std::size_t dh = d / h;
      Tensor out = Tensor::zeros({bsz, nq, d});
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t hh = 0; hh < h; ++hh) {
          for (std::size_t i = 0; i < nq; ++i) {
            double* oi = out.data() + (b * nq + i) * d + hh * dh;
            const double* pi = p.data() + ((b * h + hh) * nq + i) * nk;
            for (std::size_t j = 0; j < nk; ++j) {
              const double* vj = v.data() + (b * nk + j) * d + hh * dh;
              for (std::size_t c = 0; c < dh; ++c) oi[c] += pi[j] * vj[c];
            }
          }
        }
      }
      return out;
    }
    case Primitive::Bce: {
      expect_arity(kind, in.size(), 2);
      const Tensor& p = *in[0];
      const Tensor& y = *in[1];
      if (p.shape() != y.shape() || p.rank() != 2) shape_error(kind, p.shape(), y.shape(), "probs/labels");
      const std::size_t bsz = p.dim(0), n = p.dim(1);
      if (!attrs.weights.empty() && attrs.weights.size() != n) {
        shape_error(kind, p.shape(), {attrs.weights.size()}, "task weight count");
      }
      double total = 0.0;
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t t = 0; t < n; ++t) {
          const double w = attrs.weights.empty() ? 1.0 : attrs.weights[t];
          if (w == 0.0) continue;
          const double pc = std::clamp(p[b * n + t], kProbClamp, 1.0 - kProbClamp);
          const double yv = y[b * n + t];
          total += w * -(yv * std::log(pc) + (1.0 - yv) * std::log(1.0 - pc));
        }
      }
      return Tensor::scalar(total / static_cast<double>(bsz));
    }
    case Primitive::Leaf:
      break;
  }
  throw std::invalid_argument("unknown primitive id " + std::to_string(static_cast<int>(kind)));
}

}  // namespace

std::string_view primitive_name(Primitive kind) {
  const auto i = static_cast<std::size_t>(kind);
  return i < kNames.size() ? kNames[i] : std::string_view("unknown");
}

Primitive primitive_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return static_cast<Primitive>(i);
  }
  throw std::invalid_argument("unknown primitive '" + std::string(name) + "'");
}

NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

NodeId Tape::param(const std::string& name, const Tensor& value) {
  if (auto it = params_.find(name); it != params_.end()) return it->second;
  Node n;
  n.value = value;
  n.name = name;
  n.requires_grad = true;
  const NodeId id = push(std::move(n));
  params_.emplace(name, id);
  return id;
}

NodeId Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::apply(Primitive kind, std::span<const NodeId> inputs, Attrs attrs) {
  if (kind == Primitive::Leaf) throw std::invalid_argument("apply: leaves are created via param/constant");
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  Node n;
  for (NodeId id : inputs) {
    if (id >= nodes_.size()) throw std::out_of_range("apply: unknown node " + std::to_string(id));
    in.push_back(&nodes_[id].value);
    n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  }
  n.value = forward(kind, in, attrs, n.saved);
  n.op = kind;
  n.inputs.assign(inputs.begin(), inputs.end());
  n.attrs = std::move(attrs);
  return push(std::move(n));
}

Tensor& Tape::grad_of(NodeId id) {
  Node& n = nodes_[id];
  if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

GradientMap Tape::backward(NodeId loss) {
  if (loss >= nodes_.size()) throw std::out_of_range("backward: unknown loss node");
  if (nodes_[loss].value.size() != 1 || nodes_[loss].value.rank() != 0) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(nodes_[loss].value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  visits_.assign(nodes_.size(), 0);
  grad_of(loss)[0] = 1.0;
  for (NodeId id = nodes_.size(); id-- > 0;) {
    ++visits_[id];
    const Node& n = nodes_[id];
    if (n.op == Primitive::Leaf || !n.requires_grad || !n.grad.defined()) continue;
    propagate(id);
  }
  GradientMap out;
  for (const auto& [name, id] : params_) {
    const Node& n = nodes_[id];
    out.emplace(name, n.grad.defined() ? n.grad : Tensor::zeros(n.value.shape()));
  }
  return out;
}

void Tape::propagate(NodeId id) {
  // Inputs' gradient buffers may be allocated below, which never reallocates
  // nodes_, so references into it stay valid.
  const Node& n = nodes_[id];
  const Tensor& g = n.grad;
  auto wants = [&](std::size_t i) { return nodes_[n.inputs[i]].requires_grad; };
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };

  switch (n.op) {
    case Primitive::MatMul:
    case Primitive::Affine: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const std::size_t m = x.rows(), k = w.dim(0), c = w.dim(1);
      ConstMap gm(g.data(), m, c);
      if (wants(0)) MutMap(grad_of(n.inputs[0]).data(), m, k).noalias() += gm * ConstMap(w.data(), k, c).transpose();
      if (wants(1)) MutMap(grad_of(n.inputs[1]).data(), k, c).noalias() += ConstMap(x.data(), m, k).transpose() * gm;
      if (n.op == Primitive::Affine && wants(2)) {
        Tensor& gb = grad_of(n.inputs[2]);
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
      }
      break;
    }
    case Primitive::Add: {
      for (std::size_t i = 0; i < 2; ++i) {
        if (!wants(i)) continue;
        Tensor& gi = grad_of(n.inputs[i]);
        for (std::size_t e = 0; e < g.size(); ++e) gi[e] += g[e];
      }
      break;
    }
    case Primitive::Mul: {
      for (std::size_t i = 0; i < 2; ++i) {
        if (!wants(i)) continue;
        const Tensor& other = in(1 - i);
        Tensor& gi = grad_of(n.inputs[i]);
        for (std::size_t e = 0; e < g.size(); ++e) gi[e] += g[e] * other[e];
      }
      break;
    }
    case Primitive::BroadcastAdd: {
      if (wants(0)) {
        Tensor& ga = grad_of(n.inputs[0]);
        for (std::size_t e = 0; e < g.size(); ++e) ga[e] += g[e];
      }
      if (wants(1)) {
        const auto map = broadcast_map(in(0).shape(), in(1).shape());
        Tensor& gb = grad_of(n.inputs[1]);
        for (std::size_t e = 0; e < g.size(); ++e) gb[map[e]] += g[e];
      }
      break;
    }
    case Primitive::Relu: {
      if (!wants(0)) break;
      Tensor& gx = grad_of(n.inputs[0]);
      for (std::size_t e = 0; e < g.size(); ++e) {
        if (n.value[e] > 0.0) gx[e] += g[e];
      }
      break;
    }
    case Primitive::Sigmoid: {
      if (!wants(0)) break;
      Tensor& gx = grad_of(n.inputs[0]);
      for (std::size_t e = 0; e < g.size(); ++e) {
        const double y = n.value[e];
        gx[e] += g[e] * y * (1.0 - y);
      }
      break;
    }
    case Primitive::Softmax: {
      if (!wants(0)) break;
      Tensor& gx = grad_of(n.inputs[0]);
      const std::size_t c = n.value.cols();
      for (std::size_t r = 0; r < n.value.rows(); ++r) {
        const double* y = n.value.data() + r * c;
        const double* gr = g.data() + r * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += gr[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += y[j] * (gr[j] - dot);
      }
      break;
    }
    case Primitive::LayerNorm: {
      const Tensor& x = in(0);
      const Tensor& gain = in(1);
      const std::size_t c = x.cols(), period = gain.size();
      const double inv_n = 1.0 / static_cast<double>(c);
      std::vector<double> xhat(c), dxhat(c);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const double mean = n.saved[2 * r], inv = n.saved[2 * r + 1];
        const std::size_t goff = (r * c) % period;
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          xhat[j] = (x[r * c + j] - mean) * inv;
          dxhat[j] = g[r * c + j] * gain[goff + j];
          s1 += dxhat[j];
          s2 += dxhat[j] * xhat[j];
        }
        if (wants(0)) {
          Tensor& gx = grad_of(n.inputs[0]);
          for (std::size_t j = 0; j < c; ++j) {
            gx[r * c + j] += inv * (dxhat[j] - s1 * inv_n - xhat[j] * s2 * inv_n);
          }
        }
        if (wants(1)) {
          Tensor& gg = grad_of(n.inputs[1]);
          for (std::size_t j = 0; j < c; ++j) gg[goff + j] += g[r * c + j] * xhat[j];
        }
        if (wants(2)) {
          Tensor& gb = grad_of(n.inputs[2]);
          for (std::size_t j = 0; j < c; ++j) gb[goff + j] += g[r * c + j];
        }
      }
      break;
    }
    case Primitive::Concat: {
      const std::size_t total = n.value.cols(), rows = n.value.rows();
      std::size_t col = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const std::size_t c = in(i).cols();
        if (wants(i)) {
          Tensor& gi = grad_of(n.inputs[i]);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) gi[r * c + j] += g[r * total + col + j];
          }
        }
        col += c;
      }
      break;
    }
    case Primitive::SelectMean: {
      if (!wants(0)) break;
      const Tensor& x = in(0);
      const std::size_t bsz = x.dim(0), s = x.dim(1), d = x.dim(2);
      Tensor& gx = grad_of(n.inputs[0]);
      for (std::size_t b = 0; b < bsz; ++b) {
        std::size_t count = 0;
        for (std::size_t r = 0; r < s; ++r) count += n.attrs.mask[b * s + r] ? 1 : 0;
        const double inv = 1.0 / static_cast<double>(count);
        for (std::size_t r = 0; r < s; ++r) {
          if (!n.attrs.mask[b * s + r]) continue;
          for (std::size_t j = 0; j < d; ++j) gx[(b * s + r) * d + j] += g[b * d + j] * inv;
        }
      }
      break;
    }
    case Primitive::Gather: {
      if (!wants(0)) break;
      Tensor& gt = grad_of(n.inputs[0]);
      const std::size_t d = n.value.cols();
      for (std::size_t i = 0; i < n.attrs.index.size(); ++i) {
        double* dst = gt.data() + n.attrs.index[i] * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
      }
      break;
    }
    case Primitive::Sum: {
      if (!wants(0)) break;
      Tensor& gx = grad_of(n.inputs[0]);
      for (double& v : gx.values()) v += g[0];
      break;
    }
    case Primitive::Scale: {
      if (!wants(0)) break;
      Tensor& gx = grad_of(n.inputs[0]);
      for (std::size_t e = 0; e < g.size(); ++e) gx[e] += g[e] * n.attrs.scalar;
      break;
    }
    case Primitive::Reshape: {
      if (!wants(0)) break;
      Tensor& gx = grad_of(n.inputs[0]);
      for (std::size_t e = 0; e < g.size(); ++e) gx[e] += g[e];
      break;
    }
    case Primitive::TokenLinear: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const std::size_t ntok = w.dim(0), din = w.dim(1), dout = w.dim(2);
      const std::size_t lead = x.size() / (ntok * din);
      for (std::size_t t = 0; t < ntok; ++t) {
        ConstStrided gt(g.data() + t * dout, lead, dout, Eigen::OuterStride<>(ntok * dout));
        ConstMap wt(w.data() + t * din * dout, din, dout);
        if (wants(0)) {
          MutStrided gx(grad_of(n.inputs[0]).data() + t * din, lead, din, Eigen::OuterStride<>(ntok * din));
          gx.noalias() += gt * wt.transpose();
        }
        if (wants(1)) {
          ConstStrided xt(x.data() + t * din, lead, din, Eigen::OuterStride<>(ntok * din));
          MutMap(grad_of(n.inputs[1]).data() + t * din * dout, din, dout).noalias() += xt.transpose() * gt;
        }
        if (wants(2)) {
          double* gb = grad_of(n.inputs[2]).data() + t * dout;
          for (std::size_t r = 0; r < lead; ++r) {
            for (std::size_t j = 0; j < dout; ++j) gb[j] += gt(r, j);
          }
        }
      }
      break;
    }
    case Primitive::TokenMix: {
      if (!wants(0)) break;
      const Tensor& x = in(0);
      const std::size_t ntok = x.dim(x.rank() - 2), d = x.cols();
      const std::size_t seg = d / ntok, lead = x.size() / (ntok * d);
      Tensor& gx = grad_of(n.inputs[0]);
      for (std::size_t l = 0; l < lead; ++l) {
        const double* src = g.data() + l * ntok * d;
        double* dst = gx.data() + l * ntok * d;
        for (std::size_t h = 0; h < ntok; ++h) {
          for (std::size_t i = 0; i < ntok; ++i) {
            for (std::size_t c = 0; c < seg; ++c) dst[i * d + h * seg + c] += src[h * d + i * seg + c];
          }
        }
      }
      break;
    }
    case Primitive::AttnScores: {
      const Tensor& q = in(0);
      const Tensor& k = in(1);
      const std::size_t h = n.attrs.heads, d = q.dim(2);
      const std::size_t bsz = q.dim(0), nq = q.dim(1), nk = k.dim(1), dh = d / h;
      const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
      Tensor* gq = wants(0) ? &grad_of(n.inputs[0]) : nullptr;
      Tensor* gk = wants(1) ? &grad_of(n.inputs[1]) : nullptr;
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t hh = 0; hh < h; ++hh) {
          for (std::size_t i = 0; i < nq; ++i) {
            for (std::size_t j = 0; j < nk; ++j) {
              const double gs = g[((b * h + hh) * nq + i) * nk + j] * inv;
              const std::size_t qo = (b * nq + i) * d + hh * dh;
              const std::size_t ko = (b * nk + j) * d + hh * dh;
              for (std::size_t c = 0; c < dh; ++c) {
                if (gq) (*gq)[qo + c] += gs * k[ko + c];
                if (gk) (*gk)[ko + c] += gs * q[qo + c];
              }
            }
          }
        }
      }
      break;
    }
    case Primitive::AttnMix: {
      const Tensor& p = in(0);
      const Tensor& v = in(1);
      const std::size_t bsz = p.dim(0), h = p.dim(1), nq = p.dim(2), nk = p.dim(3), d = v.dim(2);
      const std::size_t dh = d / h;
      Tensor* gp = wants(0) ? &grad_of(n.inputs[0]) : nullptr;
      Tensor* gv = wants(1) ? &grad_of(n.inputs[1]) : nullptr;
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t hh = 0; hh < h; ++hh) {
          for (std::size_t i = 0; i < nq; ++i) {
            const double* gi = g.data() + (b * nq + i) * d + hh * dh;
            const std::size_t po = ((b * h + hh) * nq + i) * nk;
            for (std::size_t j = 0; j < nk; ++j) {
              const std::size_t vo = (b * nk + j) * d + hh * dh;
              if (gp) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * v[vo + c];
                (*gp)[po + j] += s;
              }
              if (gv) {
                const double pw = p[po + j];
                for (std::size_t c = 0; c < dh; ++c) (*gv)[vo + c] += pw * gi[c];
              }
            }
          }
        }
      }
      break;
    }
    case Primitive::Bce: {
      if (!wants(0)) break;
      const Tensor& p = in(0);
      const Tensor& y = in(1);
      const std::size_t bsz = p.dim(0), nt = p.dim(1);
      Tensor& gp = grad_of(n.inputs[0]);
      const double scale_b = g[0] / static_cast<double>(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t t = 0; t < nt; ++t) {
          const double w = n.attrs.weights.empty() ? 1.0 : n.attrs.weights[t];
          const double pv = p[b * nt + t];
          // Zero-weight tasks and clamped probabilities contribute nothing.
          if (w == 0.0 || pv < kProbClamp || pv > 1.0 - kProbClamp) continue;
          const double yv = y[b * nt + t];
          gp[b * nt + t] += scale_b * w * (-(yv / pv) + (1.0 - yv) / (1.0 - pv));
        }
      }
      break;
    }
    case Primitive::Leaf:
      break;
  }
}

void Tape::clear() {
  nodes_.clear();
  params_.clear();
  visits_.clear();
}

NodeId matmul(Tape& t, NodeId x, NodeId w) { return t.apply(Primitive::MatMul, {x, w}); }
NodeId affine(Tape& t, NodeId x, NodeId w, NodeId b) { return t.apply(Primitive::Affine, {x, w, b}); }
NodeId add(Tape& t, NodeId a, NodeId b) { return t.apply(Primitive::Add, {a, b}); }
NodeId mul(Tape& t, NodeId a, NodeId b) { return t.apply(Primitive::Mul, {a, b}); }
NodeId broadcast_add(Tape& t, NodeId a, NodeId b) { return t.apply(Primitive::BroadcastAdd, {a, b}); }
NodeId relu(Tape& t, NodeId x) { return t.apply(Primitive::Relu, {x}); }
NodeId sigmoid(Tape& t, NodeId x) { return t.apply(Primitive::Sigmoid, {x}); }
NodeId softmax(Tape& t, NodeId x) { return t.apply(Primitive::Softmax, {x}); }
NodeId layer_norm(Tape& t, NodeId x, NodeId gain, NodeId bias) {
  return t.apply(Primitive::LayerNorm, {x, gain, bias});
}
NodeId concat(Tape& t, std::span<const NodeId> parts) { return t.apply(Primitive::Concat, parts); }

NodeId select_mean(Tape& t, NodeId x, std::vector<std::uint8_t> mask) {
  Attrs a;
  a.mask = std::move(mask);
  return t.apply(Primitive::SelectMean, {x}, std::move(a));
}

NodeId gather(Tape& t, NodeId table, std::vector<std::size_t> rows) {
  Attrs a;
  a.index = std::move(rows);
  return t.apply(Primitive::Gather, {table}, std::move(a));
}

NodeId sum(Tape& t, NodeId x) { return t.apply(Primitive::Sum, {x}); }

NodeId scale(Tape& t, NodeId x, double factor) {
  Attrs a;
  a.scalar = factor;
  return t.apply(Primitive::Scale, {x}, std::move(a));
}

NodeId reshape(Tape& t, NodeId x, Shape shape) {
  Attrs a;
  a.shape = std::move(shape);
  return t.apply(Primitive::Reshape, {x}, std::move(a));
}

NodeId token_linear(Tape& t, NodeId x, NodeId w, NodeId b) {
  return t.apply(Primitive::TokenLinear, {x, w, b});
}

NodeId token_mix(Tape& t, NodeId x) { return t.apply(Primitive::TokenMix, {x}); }

NodeId attn_scores(Tape& t, NodeId q, NodeId k, std::size_t heads) {
  Attrs a;
  a.heads = heads;
  return t.apply(Primitive::AttnScores, {q, k}, std::move(a));
}

NodeId attn_mix(Tape& t, NodeId p, NodeId v, std::size_t heads) {
  Attrs a;
  a.heads = heads;
  return t.apply(Primitive::AttnMix, {p, v}, std::move(a));
}

NodeId bce(Tape& t, NodeId probs, NodeId labels, std::vector<double> weights) {
  Attrs a;
  a.weights = std::move(weights);
  return t.apply(Primitive::Bce, {probs, labels}, std::move(a));
}

}  // namespace mdl::ad
