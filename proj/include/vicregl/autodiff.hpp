#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "vicregl/tensor.hpp"

namespace vicregl {
namespace ad {

/// One vertex of the reverse-mode tape. Ops allocate a Node holding the
/// forward value, the parent edges, and a closure that routes the incoming
/// gradient to the parents.
class Node {
 public:
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor(value.shape());
  }
};

/// Value-semantic handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  double item() const {
    VRL_CHECK_ARG(node_ && node_->value.numel() == 1, "item() needs a scalar");
    return node_->value[0];
  }

 private:
  std::shared_ptr<Node> node_;
};

Var leaf(Tensor value);      // trainable: participates in backward
Var constant(Tensor value);  // data: no gradient

/// Runs reverse-mode accumulation from a scalar root. Grads of every node
/// reachable through requires_grad edges are (re)computed from scratch.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var square(const Var& a);
Var sqrt(const Var& a);
Var relu(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var rsub_scalar(double c, const Var& a);  // c - a
Var mul_const(const Var& a, Tensor mask);
Var add_n(const std::vector<Var>& xs);

// ---- reductions / broadcasts on (N, D) matrices ----
Var mean_all(const Var& a);
Var sum_all(const Var& a);
Var col_mean(const Var& a);                    // (N,D) -> (D)
Var col_sum(const Var& a);                     // (N,D) -> (D)
Var sub_rowvec(const Var& m, const Var& v);    // rows minus broadcast (D)
Var add_rowvec(const Var& m, const Var& v);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var linear(const Var& x, const Var& w, const Var& b);  // x(N,K) * w(D,K)^T + b

// ---- structural ----
Var reshape(const Var& a, std::vector<std::size_t> shape);
Var rows_from_map(const Var& map);  // (B,C,H,W) -> (B*H*W, C)
Var map_from_rows(const Var& rows, std::size_t b, std::size_t h, std::size_t w);
Var gather_rows(const Var& m, std::vector<std::size_t> idx);
Var concat_channels(const std::vector<Var>& maps);

// ---- nn ----
Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride,
           std::size_t pad);
Var global_avg_pool(const Var& x);  // (B,C,H,W) -> (B,C)
Var upsample_bilinear(const Var& x, std::size_t out_h, std::size_t out_w);

/// Batch normalization over rows of an (N, D) matrix. In training mode the
/// batch statistics are used and the running buffers updated in place;
/// in eval mode the running buffers are used.
Var batchnorm_rows(const Var& x, const Var& gamma, const Var& beta,
                   Tensor& running_mean, Tensor& running_var, bool training,
                   double momentum = 0.1, double eps = 1e-5);

/// Per-channel batch normalization of a (B,C,H,W) map.
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                Tensor& running_mean, Tensor& running_var, bool training,
                double momentum = 0.1, double eps = 1e-5);

/// Mean softmax cross-entropy over rows; labels are class indices.
Var cross_entropy_rows(const Var& logits, const std::vector<int>& labels);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

}  // namespace ad
}  // namespace vicregl
