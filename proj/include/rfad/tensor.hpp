#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "rfad/common.hpp"

namespace rfad {

using Shape = std::vector<std::int64_t>;

namespace detail {

// One node of the reverse-mode tape. A node owns its value buffer
// outright: no tensor ever aliases another tensor's storage, so in-place
// parameter updates between iterations cannot corrupt old graphs.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated lazily during backward
  std::uint64_t seq = 0;     // creation order; reverse traversal key
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int axis) const { return node_->shape[axis]; }
  std::int64_t numel() const { return node_->numel(); }

  const double* data() const { return node_->data.data(); }
  const std::vector<double>& values() const { return node_->data; }
  // Leaf-only write access, used by initializers and the optimizer.
  double* mutable_data();
  double value() const;  // single-element tensors
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward_fn; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Deep copy with no graph attached; the stop-gradient primitive.
  Tensor detach() const;

  std::uint64_t id() const { return node_->seq; }

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode sweep from a scalar loss. Zeroes gradients of every node
// reachable from `loss`, then accumulates fresh ones in reverse creation
// order (each node visited exactly once, fixed reduction order). Leaf
// gradients are read back through Tensor::grad().
void backward(const Tensor& loss);

// ---- differentiable ops ----

// 3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);
// Non-overlapping 2x2 mean pooling; trailing odd row/column dropped.
Tensor avgpool2(const Tensor& input);
Tensor relu(const Tensor& input);
Tensor matmul(const Tensor& a, const Tensor& b);
// Solves A X = B for symmetric positive definite A via Cholesky.
Tensor solve_spd(const Tensor& A, const Tensor& B);
// Mean over rows of -sum_c targets * log softmax(logits).
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& targets);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, double c);
Tensor mul_scalar(const Tensor& t, const Tensor& scalar);  // scalar: 1-element tensor
Tensor exp(const Tensor& t);
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);
Tensor transpose(const Tensor& t);  // 2-D
Tensor reshape(const Tensor& t, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);  // 2-D, equal column counts
Tensor add_diag(const Tensor& A, double lambda);
Tensor add_colvec(const Tensor& m, const Tensor& v);  // v indexed by row (bias add)
Tensor add_rowvec(const Tensor& m, const Tensor& v);  // v indexed by column

}  // namespace rfad
