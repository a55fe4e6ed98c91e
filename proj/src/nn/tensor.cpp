#include "dlr/nn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <unordered_set>

namespace dlr::nn {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_seq{1};

void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

using NodePtr = std::shared_ptr<Var::Node>;

// Accumulate into a parent's gradient, skipping constants.
template <typename E>
void accum(const NodePtr& p, const Eigen::MatrixBase<E>& g) {
  if (p->requires_grad) p->ensure_grad() += g;
}

Mat softmax_rows_value(const Mat& a) {
  Mat s(a.rows(), a.cols());
  for (long r = 0; r < a.rows(); ++r) {
    double mx = a.row(r).maxCoeff();
    Eigen::RowVectorXd e = (a.row(r).array() - mx).exp();
    s.row(r) = e / e.sum();
  }
  return s;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Var Var::param(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->is_leaf = true;
  n->seq = g_seq.fetch_add(1);
  return Var(std::move(n));
}

Var Var::constant(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->seq = g_seq.fetch_add(1);
  return Var(std::move(n));
}

Var Var::scalar(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var make_node(Mat value, std::vector<Var> parents,
              std::function<void(Var::Node&)> backprop) {
  auto n = std::make_shared<Var::Node>();
  n->value = std::move(value);
  n->seq = g_seq.fetch_add(1);
  bool need = grad_enabled();
  if (need) {
    need = false;
    for (const Var& p : parents)
      if (p.requires_grad()) {
        need = true;
        break;
      }
  }
  if (need) {
    n->requires_grad = true;
    n->is_leaf = false;
    n->parents.reserve(parents.size());
    for (const Var& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Var(std::move(n));
}

void Var::backward() const {
  check(defined() && node_->value.size() == 1, "backward: root must be 1x1");
  // Gather the subgraph, then run VJPs in reverse creation order (creation
  // order is a topological order).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->is_leaf) order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });
  node_->ensure_grad()(0, 0) += 1.0;
  for (Node* n : order) n->backprop(*n);
}

Var operator+(const Var& a, const Var& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto pa = a.node(), pb = b.node();
  return make_node(a.value() + b.value(), {a, b}, [pa, pb](Var::Node& n) {
    accum(pa, n.grad);
    accum(pb, n.grad);
  });
}

Var operator-(const Var& a, const Var& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  auto pa = a.node(), pb = b.node();
  return make_node(a.value() - b.value(), {a, b}, [pa, pb](Var::Node& n) {
    accum(pa, n.grad);
    accum(pb, -n.grad);
  });
}

Var operator*(const Var& a, const Var& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  auto pa = a.node(), pb = b.node();
  return make_node(
      a.value().cwiseProduct(b.value()), {a, b}, [pa, pb](Var::Node& n) {
        accum(pa, n.grad.cwiseProduct(pb->value));
        accum(pb, n.grad.cwiseProduct(pa->value));
      });
}

Var scale(const Var& a, double s) {
  auto pa = a.node();
  return make_node(a.value() * s, {a},
                   [pa, s](Var::Node& n) { accum(pa, n.grad * s); });
}

Var add_const(const Var& a, const Mat& c) {
  check(a.rows() == c.rows() && a.cols() == c.cols(),
        "add_const: shape mismatch");
  auto pa = a.node();
  return make_node(a.value() + c, {a},
                   [pa](Var::Node& n) { accum(pa, n.grad); });
}

Var mul_const(const Var& a, const Mat& c) {
  check(a.rows() == c.rows() && a.cols() == c.cols(),
        "mul_const: shape mismatch");
  auto pa = a.node();
  Mat cc = c;
  return make_node(a.value().cwiseProduct(c), {a},
                   [pa, cc = std::move(cc)](Var::Node& n) {
                     accum(pa, n.grad.cwiseProduct(cc));
                   });
}

Var relu(const Var& a) {
  auto pa = a.node();
  return make_node(a.value().cwiseMax(0.0), {a}, [pa](Var::Node& n) {
    accum(pa, n.grad.cwiseProduct(
                  (pa->value.array() > 0.0).cast<double>().matrix()));
  });
}

Var log_elem(const Var& a) {
  check((a.value().array() > 0.0).all(), "log_elem: entries must be positive");
  auto pa = a.node();
  return make_node(a.value().array().log().matrix(), {a}, [pa](Var::Node& n) {
    accum(pa, n.grad.cwiseQuotient(pa->value));
  });
}

Var matmul(const Var& a, const Var& b) {
  check(a.cols() == b.rows(), "matmul: inner dims");
  auto pa = a.node(), pb = b.node();
  return make_node(a.value() * b.value(), {a, b}, [pa, pb](Var::Node& n) {
    accum(pa, n.grad * pb->value.transpose());
    accum(pb, pa->value.transpose() * n.grad);
  });
}

Var transpose(const Var& a) {
  auto pa = a.node();
  return make_node(a.value().transpose(), {a},
                   [pa](Var::Node& n) { accum(pa, n.grad.transpose()); });
}

Var cols(const Var& a, long start, long n) {
  check(start >= 0 && n >= 1 && start + n <= a.cols(), "cols: range");
  auto pa = a.node();
  return make_node(a.value().middleCols(start, n), {a},
                   [pa, start, n](Var::Node& g) {
                     if (pa->requires_grad)
                       pa->ensure_grad().middleCols(start, n) += g.grad;
                   });
}

Var concat_cols(const std::vector<Var>& xs) {
  check(!xs.empty(), "concat_cols: empty");
  long r = xs[0].rows(), c = 0;
  for (const Var& x : xs) {
    check(x.rows() == r, "concat_cols: row mismatch");
    c += x.cols();
  }
  Mat v(r, c);
  long at = 0;
  std::vector<NodePtr> ps;
  std::vector<long> offs;
  for (const Var& x : xs) {
    v.middleCols(at, x.cols()) = x.value();
    ps.push_back(x.node());
    offs.push_back(at);
    at += x.cols();
  }
  return make_node(std::move(v), xs, [ps, offs](Var::Node& n) {
    for (size_t i = 0; i < ps.size(); ++i)
      if (ps[i]->requires_grad)
        ps[i]->ensure_grad() +=
            n.grad.middleCols(offs[i], ps[i]->value.cols());
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  check(!xs.empty(), "concat_rows: empty");
  long c = xs[0].cols(), r = 0;
  for (const Var& x : xs) {
    check(x.cols() == c, "concat_rows: col mismatch");
    r += x.rows();
  }
  Mat v(r, c);
  long at = 0;
  std::vector<NodePtr> ps;
  std::vector<long> offs;
  for (const Var& x : xs) {
    v.middleRows(at, x.rows()) = x.value();
    ps.push_back(x.node());
    offs.push_back(at);
    at += x.rows();
  }
  return make_node(std::move(v), xs, [ps, offs](Var::Node& n) {
    for (size_t i = 0; i < ps.size(); ++i)
      if (ps[i]->requires_grad)
        ps[i]->ensure_grad() +=
            n.grad.middleRows(offs[i], ps[i]->value.rows());
  });
}

Var rows(const Var& table, const std::vector<int>& idx) {
  Mat v(static_cast<long>(idx.size()), table.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] >= 0 && idx[i] < table.rows(), "rows: index out of range");
    v.row(static_cast<long>(i)) = table.value().row(idx[i]);
  }
  auto pt = table.node();
  std::vector<int> ix = idx;
  return make_node(std::move(v), {table},
                   [pt, ix = std::move(ix)](Var::Node& n) {
                     if (!pt->requires_grad) return;
                     Mat& g = pt->ensure_grad();
                     for (size_t i = 0; i < ix.size(); ++i)
                       g.row(ix[i]) += n.grad.row(static_cast<long>(i));
                   });
}

Var add_rowvec(const Var& x, const Var& b) {
  check(b.rows() == 1 && b.cols() == x.cols(), "add_rowvec: shape");
  auto px = x.node(), pb = b.node();
  Mat v = x.value();
  v.rowwise() += Eigen::RowVectorXd(b.value().row(0));
  return make_node(std::move(v), {x, b}, [px, pb](Var::Node& n) {
    accum(px, n.grad);
    accum(pb, n.grad.colwise().sum());
  });
}

Var sum(const Var& a) {
  Mat v(1, 1);
  v(0, 0) = a.value().sum();
  auto pa = a.node();
  return make_node(std::move(v), {a}, [pa](Var::Node& n) {
    if (pa->requires_grad)
      pa->ensure_grad().array() += n.grad(0, 0);
  });
}

Var sum_rows(const Var& a) {
  Mat v = a.value().rowwise().sum();
  auto pa = a.node();
  return make_node(std::move(v), {a}, [pa](Var::Node& n) {
    if (pa->requires_grad)
      pa->ensure_grad().colwise() += Eigen::VectorXd(n.grad.col(0));
  });
}

Var pick(const Var& a, const std::vector<std::pair<long, long>>& ij) {
  Mat v(static_cast<long>(ij.size()), 1);
  for (size_t k = 0; k < ij.size(); ++k) {
    check(ij[k].first >= 0 && ij[k].first < a.rows() && ij[k].second >= 0 &&
              ij[k].second < a.cols(),
          "pick: index out of range");
    v(static_cast<long>(k), 0) = a.value()(ij[k].first, ij[k].second);
  }
  auto pa = a.node();
  auto sel = ij;
  return make_node(std::move(v), {a},
                   [pa, sel = std::move(sel)](Var::Node& n) {
                     if (!pa->requires_grad) return;
                     Mat& g = pa->ensure_grad();
                     for (size_t k = 0; k < sel.size(); ++k)
                       g(sel[k].first, sel[k].second) +=
                           n.grad(static_cast<long>(k), 0);
                   });
}

Var softmax_rows(const Var& a) {
  Mat s = softmax_rows_value(a.value());
  auto pa = a.node();
  Mat sc = s;
  return make_node(std::move(s), {a}, [pa, sc = std::move(sc)](Var::Node& n) {
    if (!pa->requires_grad) return;
    Mat& g = pa->ensure_grad();
    for (long r = 0; r < sc.rows(); ++r) {
      double dot = n.grad.row(r).cwiseProduct(sc.row(r)).sum();
      g.row(r) +=
          sc.row(r).cwiseProduct((n.grad.row(r).array() - dot).matrix());
    }
  });
}

Var log_softmax_rows(const Var& a) {
  Mat v(a.rows(), a.cols());
  for (long r = 0; r < a.rows(); ++r) {
    double mx = a.value().row(r).maxCoeff();
    double lse = mx + std::log((a.value().row(r).array() - mx).exp().sum());
    v.row(r) = a.value().row(r).array() - lse;
  }
  auto pa = a.node();
  Mat p = v.array().exp();
  return make_node(std::move(v), {a}, [pa, p = std::move(p)](Var::Node& n) {
    if (!pa->requires_grad) return;
    Mat& g = pa->ensure_grad();
    for (long r = 0; r < p.rows(); ++r) {
      double tot = n.grad.row(r).sum();
      g.row(r) += n.grad.row(r) - tot * p.row(r);
    }
  });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta,
                    double eps) {
  check(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm: gamma");
  check(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm: beta");
  long R = x.rows(), C = x.cols();
  Mat xhat(R, C);
  Eigen::VectorXd inv_sd(R);
  for (long r = 0; r < R; ++r) {
    double mu = x.value().row(r).mean();
    double var = (x.value().row(r).array() - mu).square().mean();
    double s = 1.0 / std::sqrt(var + eps);
    inv_sd(r) = s;
    xhat.row(r) = (x.value().row(r).array() - mu) * s;
  }
  Mat v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
          beta.value().row(0).array();
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return make_node(
      std::move(v), {x, gamma, beta},
      [px, pg, pb, xhat = std::move(xhat), inv_sd = std::move(inv_sd),
       C](Var::Node& n) {
        accum(pb, n.grad.colwise().sum());
        accum(pg, n.grad.cwiseProduct(xhat).colwise().sum());
        if (!px->requires_grad) return;
        Mat& g = px->ensure_grad();
        for (long r = 0; r < xhat.rows(); ++r) {
          Eigen::RowVectorXd dxh =
              n.grad.row(r).cwiseProduct(pg->value.row(0));
          double m1 = dxh.mean();
          double m2 = dxh.cwiseProduct(xhat.row(r)).mean();
          g.row(r) += inv_sd(r) *
                      (dxh.array() - m1 - xhat.row(r).array() * m2).matrix();
        }
      });
}

Var st_gumbel_onehot(const Var& logits, const Mat& noise, double tau) {
  check(noise.rows() == logits.rows() && noise.cols() == logits.cols(),
        "st_gumbel: noise shape");
  check(tau > 0.0, "st_gumbel: tau must be positive");
  Mat z = logits.value() + noise;
  Mat onehot = Mat::Zero(z.rows(), z.cols());
  for (long r = 0; r < z.rows(); ++r) {
    long best = 0;
    for (long c = 1; c < z.cols(); ++c)
      if (z(r, c) > z(r, best)) best = c;
    onehot(r, best) = 1.0;
  }
  Mat s = softmax_rows_value(z / tau);
  auto pl = logits.node();
  return make_node(std::move(onehot), {logits},
                   [pl, s = std::move(s), tau](Var::Node& n) {
                     if (!pl->requires_grad) return;
                     Mat& g = pl->ensure_grad();
                     for (long r = 0; r < s.rows(); ++r) {
                       double dot =
                           n.grad.row(r).cwiseProduct(s.row(r)).sum();
                       g.row(r) +=
                           s.row(r).cwiseProduct(
                               (n.grad.row(r).array() - dot).matrix()) /
                           tau;
                     }
                   });
}

Var st_passthrough(const Var& x, const Mat& forward_value) {
  check(forward_value.rows() == x.rows() && forward_value.cols() == x.cols(),
        "st_passthrough: shape");
  auto px = x.node();
  return make_node(forward_value, {x},
                   [px](Var::Node& n) { accum(px, n.grad); });
}

Var detach(const Var& a) { return Var::constant(a.value()); }

Var dropout(const Var& a, double p, Rng& rng) {
  check(p >= 0.0 && p < 1.0, "dropout: p in [0,1)");
  if (p == 0.0) return a;
  Mat mask(a.rows(), a.cols());
  double keep = 1.0 - p;
  for (long r = 0; r < mask.rows(); ++r)
    for (long c = 0; c < mask.cols(); ++c)
      mask(r, c) = rng.uniform() < p ? 0.0 : 1.0 / keep;
  return mul_const(a, mask);
}

}  // namespace dlr::nn
