#include "drift/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "drift/errors.hpp"

namespace drift {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;

std::atomic<std::uint64_t> g_next_seq{1};

thread_local int g_no_grad_depth = 0;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (const std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

double* TensorNode::grad_data() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

NodePtr make_node(Shape shape, const char* op) {
  for (const std::int64_t d : shape) {
    if (d <= 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_str(shape));
    }
  }
  auto node = std::make_shared<TensorNode>();
  node->value.resize(static_cast<std::size_t>(numel(shape)));
  node->shape = std::move(shape);
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  node->op = op;
  return node;
}

}  // namespace detail

using detail::NodePtr;
using detail::TensorNode;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto node = detail::make_node(std::move(shape), "leaf");
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node()->value.begin(), t.node()->value.end(), fill);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not fill shape " + shape_str(shape));
  }
  auto node = detail::make_node(std::move(shape), "leaf");
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item() requires a scalar tensor, got shape " +
                        shape_str(shape()));
  }
  return node_->value[0];
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone_leaf() const {
  Tensor t = from_data(node_->shape, node_->value, node_->requires_grad);
  return t;
}

bool Tensor::all_finite() const {
  for (const double v : node_->value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_recording_enabled() { return g_no_grad_depth == 0; }

namespace {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!grad_recording_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Finalizes an op node: wires inputs and the backward rule only when the
// result participates in a recorded graph.
Tensor finish_op(NodePtr out, std::initializer_list<const Tensor*> inputs,
                 std::function<void(TensorNode&)> backward) {
  if (should_record(inputs)) {
    out->requires_grad = true;
    out->inputs.reserve(inputs.size());
    for (const Tensor* t : inputs) out->inputs.push_back(t->node());
    out->backward = std::move(backward);
  }
  return Tensor(std::move(out));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " differ");
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::make_node({m, n}, "matmul");
  MatMap(out->value.data(), m, n).noalias() =
      ConstMatMap(a.values().data(), m, k) * ConstMatMap(b.values().data(), k, n);
  return finish_op(std::move(out), {&a, &b}, [m, k, n](TensorNode& o) {
    ConstMatMap d_out(o.grad.data(), m, n);
    TensorNode& an = *o.inputs[0];
    TensorNode& bn = *o.inputs[1];
    if (an.requires_grad) {
      MatMap(an.grad_data(), m, k).noalias() +=
          d_out * ConstMatMap(bn.value.data(), k, n).transpose();
    }
    if (bn.requires_grad) {
      MatMap(bn.grad_data(), k, n).noalias() +=
          ConstMatMap(an.value.data(), m, k).transpose() * d_out;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1)) {
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) +
                         " x " + shape_str(w.shape()) + "^T");
  }
  const std::int64_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  auto out = detail::make_node({n, out_dim}, "linear");
  MatMap(out->value.data(), n, out_dim).noalias() =
      ConstMatMap(x.values().data(), n, in) *
      ConstMatMap(w.values().data(), out_dim, in).transpose();
  return finish_op(std::move(out), {&x, &w}, [n, in, out_dim](TensorNode& o) {
    ConstMatMap d_out(o.grad.data(), n, out_dim);
    TensorNode& xn = *o.inputs[0];
    TensorNode& wn = *o.inputs[1];
    if (xn.requires_grad) {
      MatMap(xn.grad_data(), n, in).noalias() +=
          d_out * ConstMatMap(wn.value.data(), out_dim, in);
    }
    if (wn.requires_grad) {
      MatMap(wn.grad_data(), out_dim, in).noalias() +=
          d_out.transpose() * ConstMatMap(xn.value.data(), n, in);
    }
  });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b,
                          Fwd fwd, Bwd bwd) {
  check_same_shape(name, a, b);
  auto out = detail::make_node(a.shape(), name);
  const std::size_t n = out->value.size();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = fwd(pa[i], pb[i]);
  return finish_op(std::move(out), {&a, &b}, std::move(bwd));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](TensorNode& o) {
        const std::size_t n = o.value.size();
        for (int side = 0; side < 2; ++side) {
          TensorNode& in = *o.inputs[static_cast<std::size_t>(side)];
          if (!in.requires_grad) continue;
          double* g = in.grad_data();
          for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i];
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](TensorNode& o) {
        const std::size_t n = o.value.size();
        TensorNode& an = *o.inputs[0];
        TensorNode& bn = *o.inputs[1];
        if (an.requires_grad) {
          double* g = an.grad_data();
          for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i];
        }
        if (bn.requires_grad) {
          double* g = bn.grad_data();
          for (std::size_t i = 0; i < n; ++i) g[i] -= o.grad[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](TensorNode& o) {
        const std::size_t n = o.value.size();
        TensorNode& an = *o.inputs[0];
        TensorNode& bn = *o.inputs[1];
        if (an.requires_grad) {
          double* g = an.grad_data();
          for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * bn.value[i];
        }
        if (bn.requires_grad) {
          double* g = bn.grad_data();
          for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * an.value[i];
        }
      });
}

Tensor scale(const Tensor& x, double c) {
  auto out = detail::make_node(x.shape(), "scale");
  const std::size_t n = out->value.size();
  const double* px = x.values().data();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = c * px[i];
  return finish_op(std::move(out), {&x}, [c](TensorNode& o) {
    TensorNode& in = *o.inputs[0];
    if (!in.requires_grad) return;
    double* g = in.grad_data();
    for (std::size_t i = 0; i < o.value.size(); ++i) g[i] += c * o.grad[i];
  });
}

Tensor silu(const Tensor& x) {
  auto out = detail::make_node(x.shape(), "silu");
  const std::size_t n = out->value.size();
  const double* px = x.values().data();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = px[i] * sigmoid(px[i]);
  return finish_op(std::move(out), {&x}, [](TensorNode& o) {
    TensorNode& in = *o.inputs[0];
    if (!in.requires_grad) return;
    double* g = in.grad_data();
    for (std::size_t i = 0; i < o.value.size(); ++i) {
      const double s = sigmoid(in.value[i]);
      g[i] += o.grad[i] * s * (1.0 + in.value[i] * (1.0 - s));
    }
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.ndim() < 1) throw DimensionError("softmax: scalar input");
  const std::int64_t d = x.dim(x.ndim() - 1);
  const std::int64_t rows = x.size() / d;
  auto out = detail::make_node(x.shape(), "softmax");
  const double* px = x.values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double* orow = out->value.data() + r * d;
    const double mx = *std::max_element(row, row + d);
    double total = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      orow[j] = std::exp(row[j] - mx);
      total += orow[j];
    }
    const double inv = 1.0 / total;
    for (std::int64_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  return finish_op(std::move(out), {&x}, [rows, d](TensorNode& o) {
    TensorNode& in = *o.inputs[0];
    if (!in.requires_grad) return;
    double* g = in.grad_data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = o.value.data() + r * d;
      const double* dy = o.grad.data() + r * d;
      double dot = 0.0;
      for (std::int64_t j = 0; j < d; ++j) dot += dy[j] * y[j];
      for (std::int64_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor rmsnorm_lastdim(const Tensor& x, const Tensor& gain) {
  if (x.ndim() < 1 || gain.ndim() != 1 || gain.dim(0) != x.dim(x.ndim() - 1)) {
    throw DimensionError("rmsnorm: gain " + shape_str(gain.shape()) +
                         " does not match last dim of " + shape_str(x.shape()));
  }
  constexpr double kEps = 1e-12;
  const std::int64_t d = x.dim(x.ndim() - 1);
  const std::int64_t rows = x.size() / d;
  auto out = detail::make_node(x.shape(), "rmsnorm");
  const double* px = x.values().data();
  const double* pg = gain.values().data();
  std::vector<double> inv_rms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double ms = 0.0;
    for (std::int64_t j = 0; j < d; ++j) ms += row[j] * row[j];
    ms = ms / static_cast<double>(d) + kEps;
    const double inv = 1.0 / std::sqrt(ms);
    inv_rms[static_cast<std::size_t>(r)] = inv;
    double* orow = out->value.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) orow[j] = row[j] * inv * pg[j];
  }
  return finish_op(
      std::move(out), {&x, &gain},
      [rows, d, inv_rms = std::move(inv_rms)](TensorNode& o) {
        TensorNode& xn = *o.inputs[0];
        TensorNode& gn = *o.inputs[1];
        const double* px = xn.value.data();
        const double* pg = gn.value.data();
        double* gx = xn.requires_grad ? xn.grad_data() : nullptr;
        double* gg = gn.requires_grad ? gn.grad_data() : nullptr;
        for (std::int64_t r = 0; r < rows; ++r) {
          const double inv = inv_rms[static_cast<std::size_t>(r)];
          const double* xr = px + r * d;
          const double* dy = o.grad.data() + r * d;
          if (gg) {
            for (std::int64_t j = 0; j < d; ++j) gg[j] += dy[j] * xr[j] * inv;
          }
          if (gx) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < d; ++j) dot += dy[j] * pg[j] * xr[j];
            const double coef =
                dot * inv * inv * inv / static_cast<double>(d);
            for (std::int64_t j = 0; j < d; ++j) {
              gx[r * d + j] += dy[j] * pg[j] * inv - xr[j] * coef;
            }
          }
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  auto out = detail::make_node(std::move(shape), "reshape");
  out->value = std::vector<double>(x.values().begin(), x.values().end());
  return finish_op(std::move(out), {&x}, [](TensorNode& o) {
    TensorNode& in = *o.inputs[0];
    if (!in.requires_grad) return;
    double* g = in.grad_data();
    for (std::size_t i = 0; i < o.value.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  auto out = detail::make_node({1}, "sum");
  double total = 0.0;
  for (const double v : x.values()) total += v;
  out->value[0] = total;
  return finish_op(std::move(out), {&x}, [](TensorNode& o) {
    TensorNode& in = *o.inputs[0];
    if (!in.requires_grad) return;
    double* g = in.grad_data();
    const double d = o.grad[0];
    for (std::size_t i = 0; i < in.value.size(); ++i) g[i] += d;
  });
}

Tensor embedding_rows(const Tensor& table, std::span<const std::int32_t> ids,
                      Shape out_prefix) {
  if (table.ndim() != 2) {
    throw DimensionError("embedding_rows: table must be 2-D, got " +
                         shape_str(table.shape()));
  }
  if (numel(out_prefix) != static_cast<std::int64_t>(ids.size())) {
    throw DimensionError("embedding_rows: prefix " + shape_str(out_prefix) +
                         " does not hold " + std::to_string(ids.size()) +
                         " ids");
  }
  const std::int64_t n_rows = table.dim(0), d = table.dim(1);
  for (const std::int32_t id : ids) {
    if (id < 0 || id >= n_rows) {
      throw ContractError("embedding_rows: id " + std::to_string(id) +
                          " outside table of " + std::to_string(n_rows) +
                          " rows");
    }
  }
  Shape out_shape = std::move(out_prefix);
  out_shape.push_back(d);
  auto out = detail::make_node(std::move(out_shape), "embedding_rows");
  const double* pt = table.values().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(pt + static_cast<std::int64_t>(ids[i]) * d, d,
                out->value.data() + static_cast<std::int64_t>(i) * d);
  }
  std::vector<std::int32_t> ids_copy(ids.begin(), ids.end());
  return finish_op(std::move(out), {&table},
                   [d, ids_copy = std::move(ids_copy)](TensorNode& o) {
                     TensorNode& tn = *o.inputs[0];
                     if (!tn.requires_grad) return;
                     double* g = tn.grad_data();
                     for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                       const double* src =
                           o.grad.data() + static_cast<std::int64_t>(i) * d;
                       double* dst = g + static_cast<std::int64_t>(ids_copy[i]) * d;
                       for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                     }
                   });
}

Tensor concat_seq(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2)) {
    throw DimensionError("concat_seq: shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " incompatible");
  }
  const std::int64_t batch = a.dim(0), p = a.dim(1), r = b.dim(1), d = a.dim(2);
  auto out = detail::make_node({batch, p + r, d}, "concat_seq");
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (std::int64_t i = 0; i < batch; ++i) {
    std::copy_n(pa + i * p * d, p * d, out->value.data() + i * (p + r) * d);
    std::copy_n(pb + i * r * d, r * d,
                out->value.data() + i * (p + r) * d + p * d);
  }
  return finish_op(std::move(out), {&a, &b}, [batch, p, r, d](TensorNode& o) {
    TensorNode& an = *o.inputs[0];
    TensorNode& bn = *o.inputs[1];
    for (std::int64_t i = 0; i < batch; ++i) {
      const double* src = o.grad.data() + i * (p + r) * d;
      if (an.requires_grad) {
        double* g = an.grad_data() + i * p * d;
        for (std::int64_t j = 0; j < p * d; ++j) g[j] += src[j];
      }
      if (bn.requires_grad) {
        double* g = bn.grad_data() + i * r * d;
        for (std::int64_t j = 0; j < r * d; ++j) g[j] += src[p * d + j];
      }
    }
  });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int n_heads) {
  if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("causal_attention: q/k/v shapes must match, got " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  }
  const std::int64_t batch = q.dim(0), s = q.dim(1), d = q.dim(2);
  if (n_heads < 1 || d % n_heads != 0) {
    throw DimensionError("causal_attention: d=" + std::to_string(d) +
                         " not divisible by n_heads=" + std::to_string(n_heads));
  }
  const std::int64_t h = n_heads, hd = d / h;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
  auto out = detail::make_node(q.shape(), "causal_attention");

  // Row-softmax attention probabilities, kept for the backward pass.
  std::vector<double> probs(static_cast<std::size_t>(batch * h * s * s));
  Eigen::OuterStride<> row_stride(d);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t head = 0; head < h; ++head) {
      const std::int64_t off = b * s * d + head * hd;
      ConstStridedMap qm(q.values().data() + off, s, hd, row_stride);
      ConstStridedMap km(k.values().data() + off, s, hd, row_stride);
      ConstStridedMap vm(v.values().data() + off, s, hd, row_stride);
      MatMap pm(probs.data() + (b * h + head) * s * s, s, s);
      pm.noalias() = qm * km.transpose() * scl;
      for (std::int64_t i = 0; i < s; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j <= i; ++j) mx = std::max(mx, pm(i, j));
        double total = 0.0;
        for (std::int64_t j = 0; j <= i; ++j) {
          pm(i, j) = std::exp(pm(i, j) - mx);
          total += pm(i, j);
        }
        const double inv = 1.0 / total;
        for (std::int64_t j = 0; j <= i; ++j) pm(i, j) *= inv;
        for (std::int64_t j = i + 1; j < s; ++j) pm(i, j) = 0.0;
      }
      StridedMap om(out->value.data() + off, s, hd, row_stride);
      om.noalias() = pm * vm;
    }
  }
  return finish_op(
      std::move(out), {&q, &k, &v},
      [batch, s, d, h, hd, scl, probs = std::move(probs)](TensorNode& o) {
        TensorNode& qn = *o.inputs[0];
        TensorNode& kn = *o.inputs[1];
        TensorNode& vn = *o.inputs[2];
        Eigen::OuterStride<> row_stride(d);
        RowMat d_probs(s, s), d_scores(s, s);
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t head = 0; head < h; ++head) {
            const std::int64_t off = b * s * d + head * hd;
            ConstMatMap pm(probs.data() + (b * h + head) * s * s, s, s);
            ConstStridedMap d_out(o.grad.data() + off, s, hd, row_stride);
            ConstStridedMap qm(qn.value.data() + off, s, hd, row_stride);
            ConstStridedMap km(kn.value.data() + off, s, hd, row_stride);
            ConstStridedMap vm(vn.value.data() + off, s, hd, row_stride);
            if (vn.requires_grad) {
              StridedMap gv(vn.grad_data() + off, s, hd, row_stride);
              gv.noalias() += pm.transpose() * d_out;
            }
            d_probs.noalias() = d_out * vm.transpose();
            // Softmax backward per row; masked cells have prob 0 and drop out.
            for (std::int64_t i = 0; i < s; ++i) {
              double dot = 0.0;
              for (std::int64_t j = 0; j < s; ++j)
                dot += d_probs(i, j) * pm(i, j);
              for (std::int64_t j = 0; j < s; ++j)
                d_scores(i, j) = pm(i, j) * (d_probs(i, j) - dot);
            }
            if (qn.requires_grad) {
              StridedMap gq(qn.grad_data() + off, s, hd, row_stride);
              gq.noalias() += d_scores * km * scl;
            }
            if (kn.requires_grad) {
              StridedMap gk(kn.grad_data() + off, s, hd, row_stride);
              gk.noalias() += d_scores.transpose() * qm * scl;
            }
          }
        }
      });
}

Tensor cross_entropy_loss(const Tensor& logits,
                          std::span<const std::int32_t> targets,
                          std::span<const std::uint8_t> mask) {
  if (logits.ndim() != 3) {
    throw DimensionError("cross_entropy_loss: logits must be [b,s,v], got " +
                         shape_str(logits.shape()));
  }
  const std::int64_t rows = logits.dim(0) * logits.dim(1);
  const std::int64_t vocab = logits.dim(2);
  if (static_cast<std::int64_t>(targets.size()) != rows ||
      static_cast<std::int64_t>(mask.size()) != rows) {
    throw DimensionError("cross_entropy_loss: targets/mask length " +
                         std::to_string(targets.size()) + "/" +
                         std::to_string(mask.size()) + " do not match " +
                         std::to_string(rows) + " positions");
  }
  std::int64_t n_masked = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    ++n_masked;
    const std::int32_t t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= vocab) {
      throw ContractError("cross_entropy_loss: target " + std::to_string(t) +
                          " outside vocab of " + std::to_string(vocab));
    }
  }
  if (n_masked == 0) {
    throw DegenerateInputError("cross_entropy_loss: empty mask");
  }

  auto out = detail::make_node({1}, "cross_entropy_loss");
  const double* pl = logits.values().data();
  std::vector<double> lse(static_cast<std::size_t>(rows), 0.0);
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const double* row = pl + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double acc = 0.0;
    for (std::int64_t j = 0; j < vocab; ++j) acc += std::exp(row[j] - mx);
    const double l = mx + std::log(acc);
    lse[static_cast<std::size_t>(r)] = l;
    total += l - row[targets[static_cast<std::size_t>(r)]];
  }
  out->value[0] = total / static_cast<double>(n_masked);

  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return finish_op(
      std::move(out), {&logits},
      [rows, vocab, n_masked, lse = std::move(lse), tgt = std::move(tgt),
       msk = std::move(msk)](TensorNode& o) {
        TensorNode& ln = *o.inputs[0];
        if (!ln.requires_grad) return;
        const double d = o.grad[0] / static_cast<double>(n_masked);
        double* g = ln.grad_data();
        const double* pl = ln.value.data();
        for (std::int64_t r = 0; r < rows; ++r) {
          if (!msk[static_cast<std::size_t>(r)]) continue;
          const double* row = pl + r * vocab;
          double* grow = g + r * vocab;
          const double l = lse[static_cast<std::size_t>(r)];
          for (std::int64_t j = 0; j < vocab; ++j) {
            grow[j] += d * std::exp(row[j] - l);
          }
          grow[tgt[static_cast<std::size_t>(r)]] -= d;
        }
      });
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  // Collect the subgraph reachable from the loss, then replay records in
  // decreasing creation order (a topological order by construction).
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    TensorNode* node = stack.back();
    stack.pop_back();
    order.push_back(node);
    for (const NodePtr& in : node->inputs) {
      if (seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });
  // Interior grads are scratch space for this sweep; only leaf grads
  // accumulate across repeated backward calls.
  for (TensorNode* node : order) {
    if (node->backward) node->grad.clear();
  }
  loss.node()->grad_data()[0] += 1.0;
  for (TensorNode* node : order) {
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

}  // namespace drift
