#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace advshape::nn {

using Mat = Eigen::MatrixXd;

struct Parameter {
  std::string name;
  Mat value;
};

/// Ordered, named parameter collection. Order is the serialization order.
class ParamStore {
 public:
  /// Adds a parameter initialized uniformly in +-sqrt(6 / (fan_in + fan_out)).
  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols, std::uint64_t seed);
  std::size_t add_zero(const std::string& name, Eigen::Index rows, Eigen::Index cols);

  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] const Parameter& operator[](std::size_t i) const { return params_[i]; }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  [[nodiscard]] std::size_t index_of(const std::string& name) const;
  [[nodiscard]] std::size_t scalar_count() const;
  [[nodiscard]] const std::vector<Parameter>& all() const { return params_; }

  /// Rounds every value to float32 so a float32 checkpoint round-trips exactly.
  void quantize_to_float();

 private:
  std::vector<Parameter> params_;
};

/// One gradient buffer per parameter, aligned with a ParamStore.
using ParamGrads = std::vector<Mat>;
ParamGrads zero_grads(const ParamStore& store);

/// Reverse-mode tape over dense matrices. One Graph per forward pass; it holds
/// no reference to mutable model state, so concurrent graphs over the same
/// ParamStore are safe.
class Graph {
 public:
  struct Var {
    int id = -1;
  };

  /// When `param_grads` is false, parameter leaves are treated as constants.
  explicit Graph(bool param_grads = false) : param_grads_(param_grads) {}

  Var input(Mat value, bool requires_grad = false);
  Var param(const ParamStore& store, std::size_t index);
  Var param(const ParamStore& store, const std::string& name) { return param(store, store.index_of(name)); }

  [[nodiscard]] const Mat& value(Var v) const;
  /// Gradient of the seeded output w.r.t. `v`; zero-sized when `v` is unreachable.
  [[nodiscard]] const Mat& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  /// Accumulates d(seed . out) into every reachable node. May be called more
  /// than once; gradients accumulate.
  void backward(Var out, const Mat& seed);
  void zero_grad();
  /// Adds parameter-leaf gradients into `grads`.
  void collect_param_grads(ParamGrads& grads) const;

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_nt(Var a, Var b);
  Var add_bias(Var a, Var bias);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var relu(Var a);
  Var silu(Var a);
  Var concat_cols(Var a, Var b);
  Var broadcast_rows(Var row, Eigen::Index n);
  Var max_rows(Var a);
  Var mean_rows(Var a);
  Var gather_rows(Var a, std::vector<Eigen::Index> idx);
  /// Rows are split into consecutive groups of `group`; max over each group.
  Var segment_max(Var a, Eigen::Index group);
  Var segment_mean(Var a, Eigen::Index group);
  Var softmax_rows(Var a);

  /// Affine layer: x * W + b, with parameters "<prefix>.w" and "<prefix>.b".
  Var linear(Var x, const ParamStore& store, const std::string& prefix);

 private:
  struct Node {
    Mat value;
    const Mat* ref = nullptr;
    Mat grad;
    bool requires_grad = false;
    int param_index = -1;
    std::function<void(Graph&, const Mat&)> back;
  };

  Var push(Mat value, bool requires_grad, std::function<void(Graph&, const Mat&)> back);
  void accumulate(Var v, const Mat& g);
  template <typename Expr>
  void accumulate_expr(Var v, const Expr& g);
  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  [[nodiscard]] const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }

  bool param_grads_;
  std::vector<Node> nodes_;
};

/// Adam with bias correction.
class Adam {
 public:
  Adam(const ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParamStore& store, const ParamGrads& grads);
  void set_lr(double lr) { lr_ = lr; }
  [[nodiscard]] double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

/// Softmax cross-entropy on a 1 x C logit row; returns loss and dL/dlogits.
struct CrossEntropy {
  double loss;
  Mat dlogits;
};
CrossEntropy softmax_cross_entropy(const Mat& logits, int label, double label_smoothing = 0.0);
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

}  // namespace advshape::nn
