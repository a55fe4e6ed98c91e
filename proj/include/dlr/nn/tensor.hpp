#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "dlr/rng.hpp"

namespace dlr::nn {

using Mat = Eigen::MatrixXd;

// Thread-local gradient mode. With grad disabled, ops compute values only
// and record no graph; evaluation paths wrap themselves in NoGradGuard.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse-mode autodiff over dense double matrices. A Var is a shared
// handle to a graph node; backward() replays the node-local VJPs in
// reverse creation order. Graphs are freed when the root handle dies;
// parameters are long-lived leaf nodes whose gradients accumulate until
// zero_grad().
class Var {
 public:
  struct Node {
    Mat value;
    Mat grad;  // lazily allocated, same shape as value
    bool requires_grad = false;
    bool is_leaf = true;
    uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    Mat& ensure_grad() {
      if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
      return grad;
    }
  };

  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var param(Mat value);     // leaf, requires grad
  static Var constant(Mat value);  // leaf, no grad
  static Var scalar(double v);     // 1x1 constant

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  Mat& value_mut() { return node_->value; }  // in-place init / EMA updates only
  const Mat& grad() const { return node_->ensure_grad(); }
  long rows() const { return node_->value.rows(); }
  long cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  void zero_grad() { node_->grad.setZero(); }
  void backward() const;  // root must be 1x1

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  mutable std::shared_ptr<Node> node_;
};

// Internal op factory: records the graph only when grad mode is on and
// some parent requires grad.
Var make_node(Mat value, std::vector<Var> parents,
              std::function<void(Var::Node&)> backprop);

// ---- elementwise / arithmetic ----
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_const(const Var& a, const Mat& c);
Var mul_const(const Var& a, const Mat& c);  // elementwise by constant
Var relu(const Var& a);
Var log_elem(const Var& a);  // natural log, entries must be positive

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// ---- shape ----
Var cols(const Var& a, long start, long n);
Var concat_cols(const std::vector<Var>& xs);
Var concat_rows(const std::vector<Var>& xs);
Var rows(const Var& table, const std::vector<int>& idx);  // gather rows
Var add_rowvec(const Var& x, const Var& b);               // broadcast 1xC

// ---- reductions / selections ----
Var sum(const Var& a);       // -> 1x1
Var sum_rows(const Var& a);  // -> Rx1
Var pick(const Var& a, const std::vector<std::pair<long, long>>& ij);  // Nx1

// ---- nonlinear rows ----
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta,
                    double eps = 1e-5);

// ---- stochastic / estimator ops ----
// Forward: exact one-hot at argmax(logits + noise) per row (ties -> lowest
// index). Backward: VJP of softmax((logits + noise) / tau), the
// straight-through Gumbel-Softmax surrogate.
Var st_gumbel_onehot(const Var& logits, const Mat& noise, double tau);

// Forward: the given constant value. Backward: gradient copied to x
// unchanged (vector-quantization straight-through).
Var st_passthrough(const Var& x, const Mat& forward_value);

Var detach(const Var& a);
Var dropout(const Var& a, double p, Rng& rng);

}  // namespace dlr::nn
