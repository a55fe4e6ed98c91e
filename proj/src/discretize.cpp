#include "dlr/discretize.hpp"

#include <cmath>

#include "dlr/errors.hpp"

namespace dlr::discretize {

Codebook::Codebook(const latent::LatentSpec& spec, nn::ParamStore& store,
                   const std::string& prefix, Rng& rng, bool use_ema,
                   double ema_decay, double ema_eps)
    : spec_(spec), ema_(use_ema), decay_(ema_decay), eps_(ema_eps) {
  spec.validate();
  if (ema_ && (decay_ < 0.0 || decay_ > 1.0))
    throw ConfigError("ema decay must lie in [0, 1]");
  int d = spec.code_dim();
  for (int m = 0; m < spec.M; ++m) {
    Mat init = nn::normal_init(rng, spec.K, d, 0.02);
    tables_.push_back(store.add(prefix + ".e" + std::to_string(m), init));
    if (ema_) {
      N_.push_back(Eigen::VectorXd::Ones(spec.K));
      S_.push_back(init);  // keeps e_j = S_j / N_j at initialization
    }
  }
}

void Codebook::set_ema_state(int m, Eigen::VectorXd counts, Mat sums) {
  if (!ema_) throw ConfigError("codebook has no ema state");
  auto mi = static_cast<size_t>(m);
  if (counts.size() != spec_.K || sums.rows() != spec_.K ||
      sums.cols() != spec_.code_dim())
    throw ConfigError("ema state has the wrong shape");
  N_[mi] = std::move(counts);
  S_[mi] = std::move(sums);
}

void Codebook::ema_update(int m, const Mat& encs,
                          const std::vector<int>& assign) {
  if (!ema_) throw ConfigError("codebook was built without ema");
  if (static_cast<size_t>(encs.rows()) != assign.size())
    throw ConfigError("ema batch rows and assignments disagree");
  if (encs.size() > 0 && !encs.allFinite())
    throw NumericalError("ema batch contains non-finite encodings");
  auto mi = static_cast<size_t>(m);
  int K = spec_.K;

  Eigen::VectorXd n = Eigen::VectorXd::Zero(K);
  Mat sum = Mat::Zero(K, spec_.code_dim());
  for (size_t r = 0; r < assign.size(); ++r) {
    int j = assign[r];
    if (j < 0 || j >= K)
      throw ConfigError("ema assignment out of range: " + std::to_string(j));
    n(j) += 1.0;
    sum.row(j) += encs.row(static_cast<long>(r));
  }

  N_[mi] = decay_ * N_[mi] + (1.0 - decay_) * n;
  S_[mi] = decay_ * S_[mi] + (1.0 - decay_) * sum;

  Mat& e = tables_[mi].value_mut();
  if (eps_ > 0.0) {
    double total = N_[mi].sum();
    for (int j = 0; j < K; ++j) {
      double smoothed = (N_[mi](j) + eps_) / (total + K * eps_) * total;
      e.row(j) = S_[mi].row(j) / smoothed;
    }
  } else {
    for (int j = 0; j < K; ++j)
      if (N_[mi](j) > 0.0) e.row(j) = S_[mi].row(j) / N_[mi](j);
  }
}

Var gumbel_max_sample(const Var& probs, double tau, Rng& rng) {
  if (tau <= 0.0) throw ConfigError("gumbel temperature must be positive");
  const Mat& p = probs.value();
  if (!(p.array() > 0.0).all())
    throw NumericalError("categorical sample needs strictly positive rows");
  Mat noise(p.rows(), p.cols());
  for (long r = 0; r < noise.rows(); ++r)
    for (long c = 0; c < noise.cols(); ++c) noise(r, c) = rng.gumbel();
  return nn::st_gumbel_onehot(nn::log_elem(probs), noise, tau);
}

latent::CodeAssignment quantize(const std::vector<Mat>& enc,
                                const Codebook& codebook) {
  const latent::LatentSpec& spec = codebook.spec();
  if (enc.size() != static_cast<size_t>(spec.M))
    throw ConfigError("quantize expects one encoding block per codebook");
  long L = enc.empty() ? 0 : enc[0].rows();
  latent::CodeAssignment out;
  out.spec = spec;
  out.codes.resize(spec.M, L);
  for (int m = 0; m < spec.M; ++m) {
    const Mat& block = enc[static_cast<size_t>(m)];
    if (block.rows() != L || block.cols() != spec.code_dim())
      throw ConfigError("encoding block has the wrong shape");
    if (!block.allFinite())
      throw NumericalError("encoding contains non-finite values");
    const Mat& table = codebook.table(m).value();
    for (long l = 0; l < L; ++l) {
      int best = 0;
      double best_d = (table.row(0) - block.row(l)).squaredNorm();
      for (int j = 1; j < spec.K; ++j) {
        double d = (table.row(j) - block.row(l)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      out.codes(m, l) = best;
    }
  }
  return out;
}

RelaxedAssignment relax(const Var& posterior_probs,
                        const latent::LatentSpec& spec) {
  const Mat& p = posterior_probs.value();
  if (p.rows() % spec.M != 0 || p.cols() != spec.K)
    throw ConfigError("posterior shape does not match the latent spec");
  for (long r = 0; r < p.rows(); ++r)
    if (std::abs(p.row(r).sum() - 1.0) > 1e-8)
      throw NumericalError("posterior row does not sum to 1");
  return RelaxedAssignment{spec, posterior_probs};
}

latent::CodeAssignment harden(const Mat& probs,
                              const latent::LatentSpec& spec) {
  long L = probs.rows() / spec.M;
  latent::CodeAssignment out;
  out.spec = spec;
  out.codes.resize(spec.M, L);
  for (int m = 0; m < spec.M; ++m) {
    for (long l = 0; l < L; ++l) {
      const auto row = probs.row(m * L + l);
      int best = 0;
      double best_p = row(0);
      for (int j = 1; j < spec.K; ++j) {
        if (row(j) > best_p) {
          best_p = row(j);
          best = j;
        }
      }
      out.codes(m, l) = best;
    }
  }
  return out;
}

latent::CodeAssignment harden(const RelaxedAssignment& z) {
  return harden(z.probs.value(), z.spec);
}

}  // namespace dlr::discretize
