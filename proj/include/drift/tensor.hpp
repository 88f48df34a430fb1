#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace drift {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One record of the compute graph. Nodes are created in program order and
// carry a monotone sequence number, so walking records in decreasing order
// is a topological order of the graph (every input precedes its consumer).
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  std::function<void(TensorNode&)> backward;

  // Lazily allocates the gradient buffer (zero-filled).
  double* grad_data();
};

NodePtr make_node(Shape shape, const char* op);

}  // namespace detail

// Dense row-major float64 tensor with an optional gradient buffer.
// Tensor is a cheap handle: copies share the underlying node, which is how
// graph edges are formed. Leaf tensors (parameters, inputs) own their data
// for the lifetime of the model; interior nodes live as long as some handle
// or consumer keeps them alive.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> values() { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Empty span when no gradient has been accumulated yet.
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  // Deep copy of the values into a fresh leaf (no graph history).
  Tensor clone_leaf() const;

  bool all_finite() const;

  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

// Disables graph recording on the current thread while alive. Ops executed
// under the guard produce plain value tensors with no history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_recording_enabled();

// --- ops ---------------------------------------------------------------
// All ops validate shapes, compute the forward value eagerly and, when
// recording is enabled and an input requires grad, register a backward rule.

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// x [n,in] times w [out,in] transposed -> [n,out]. Weight layout follows the
// rows-are-output-features convention used by the model parameters.
Tensor linear(const Tensor& x, const Tensor& w);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor silu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);

// Root-mean-square normalization over the last dimension, then elementwise
// gain. gain has shape [last_dim].
Tensor rmsnorm_lastdim(const Tensor& x, const Tensor& gain);

// Contiguous row-major reinterpretation; element count must match.
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);

// Gathers rows of table [n,d] by ids; result shape = out_prefix + [d] where
// numel(out_prefix) == ids.size(). Backward scatter-adds into the table.
Tensor embedding_rows(const Tensor& table, std::span<const std::int32_t> ids,
                      Shape out_prefix);

// Concatenates [b,p,d] and [b,r,d] along the sequence dimension.
Tensor concat_seq(const Tensor& a, const Tensor& b);

// Multi-head scaled-dot-product attention with a causal mask.
// q, k, v are [b,s,d] with d divisible by n_heads.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int n_heads);

// Mean negative log-likelihood over masked positions. logits is [b,s,v];
// targets and mask are flat [b*s]. exp(result) is the perplexity of the
// masked positions.
Tensor cross_entropy_loss(const Tensor& logits,
                          std::span<const std::int32_t> targets,
                          std::span<const std::uint8_t> mask);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Reverse-mode sweep from a scalar loss. Every reachable requires-grad leaf
// receives its gradient; repeated calls without zero_grad accumulate.
void backward(const Tensor& loss);

}  // namespace drift
