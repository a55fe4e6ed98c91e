#pragma once

#include <cstdint>
#include <vector>

#include "dlr/nn/tensor.hpp"

namespace dlr::nn {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Inverse square-root schedule: lr(t) = d_model^-0.5 * min(t^-0.5,
  // t * warmup^-1.5). When off, lr is constant.
  bool inverse_sqrt = false;
  int warmup = 4000;
  int d_model = 64;
};

class Adam {
 public:
  Adam(std::vector<Var> params, AdamOptions opts);

  // One update over this optimizer's parameters only; gradients are
  // consumed as-is (zero grad -> bias-corrected zero update).
  void step();
  void zero_grad();
  int64_t steps() const { return t_; }
  double lr_at(int64_t t) const;

 private:
  std::vector<Var> params_;
  std::vector<Mat> m_, v_;
  AdamOptions opts_;
  int64_t t_ = 0;
};

}  // namespace dlr::nn
