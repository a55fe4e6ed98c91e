#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dlr/errors.hpp"
#include "dlr/nn/tensor.hpp"
#include "dlr/rng.hpp"

namespace dlr::nn {

// Named collection of trainable leaves. Names are stable and used for
// checkpoint serialization.
class ParamStore {
 public:
  Var add(const std::string& name, Mat init) {
    for (const auto& [n, v] : items_)
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    Var v = Var::param(std::move(init));
    items_.emplace_back(name, v);
    return v;
  }

  const std::vector<std::pair<std::string, Var>>& items() const {
    return items_;
  }

  std::vector<Var> vars() const {
    std::vector<Var> out;
    out.reserve(items_.size());
    for (const auto& [n, v] : items_) out.push_back(v);
    return out;
  }

  Var* find(const std::string& name) {
    for (auto& [n, v] : items_)
      if (n == name) return &v;
    return nullptr;
  }

  void zero_grads() {
    for (auto& [n, v] : items_) v.zero_grad();
  }

  std::vector<Mat> snapshot() const {
    std::vector<Mat> out;
    out.reserve(items_.size());
    for (const auto& [n, v] : items_) out.push_back(v.value());
    return out;
  }

  void restore(const std::vector<Mat>& snap) {
    if (snap.size() != items_.size())
      throw ConfigError("parameter snapshot size mismatch");
    for (size_t i = 0; i < snap.size(); ++i)
      items_[i].second.value_mut() = snap[i];
  }

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

inline Mat normal_init(Rng& rng, long rows, long cols, double stddev) {
  Mat m(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = stddev * rng.normal();
  return m;
}

// Glorot uniform for projection matrices used as x @ W (fan_in = rows).
inline Mat xavier_init(Rng& rng, long rows, long cols) {
  double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Mat m(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c)
      m(r, c) = limit * (2.0 * rng.uniform() - 1.0);
  return m;
}

}  // namespace dlr::nn
