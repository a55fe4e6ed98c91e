#include "dlr/nn/adam.hpp"

#include <algorithm>
#include <cmath>

namespace dlr::nn {

Adam::Adam(std::vector<Var> params, AdamOptions opts)
    : params_(std::move(params)), opts_(opts) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Var& p : params_) {
    m_.push_back(Mat::Zero(p.rows(), p.cols()));
    v_.push_back(Mat::Zero(p.rows(), p.cols()));
  }
}

double Adam::lr_at(int64_t t) const {
  if (!opts_.inverse_sqrt) return opts_.lr;
  double td = static_cast<double>(std::max<int64_t>(t, 1));
  double w = static_cast<double>(opts_.warmup);
  return std::pow(static_cast<double>(opts_.d_model), -0.5) *
         std::min(1.0 / std::sqrt(td), td * std::pow(w, -1.5));
}

void Adam::step() {
  ++t_;
  double lr = lr_at(t_);
  double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    const Mat& g = params_[i].grad();
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g.cwiseProduct(g);
    Mat mhat = m_[i] / bc1;
    Mat vhat = v_[i] / bc2;
    params_[i].value_mut() -=
        lr * mhat.cwiseQuotient(
                 (vhat.cwiseSqrt().array() + opts_.eps).matrix());
  }
}

void Adam::zero_grad() {
  for (Var& p : params_) p.zero_grad();
}

}  // namespace dlr::nn
