#pragma once

#include <string>
#include <vector>

#include "dlr/latent.hpp"
#include "dlr/nn/params.hpp"
#include "dlr/nn/tensor.hpp"
#include "dlr/rng.hpp"

namespace dlr::discretize {

using nn::Mat;
using nn::Var;

// M embedding tables of K rows each, shared across positions. With EMA
// enabled the tables are excluded from gradient training and updated by
// ema_update instead; the accumulators satisfy e_j = S_j / N_j after every
// update (up to Laplace smoothing of the counts).
class Codebook {
 public:
  // Tables are registered in the store as prefix + ".e<m>", entries drawn
  // i.i.d. normal with standard deviation 0.02.
  Codebook(const latent::LatentSpec& spec, nn::ParamStore& store,
           const std::string& prefix, Rng& rng, bool use_ema,
           double ema_decay = 0.99, double ema_eps = 1e-5);

  const latent::LatentSpec& spec() const { return spec_; }
  const Var& table(int m) const { return tables_[static_cast<size_t>(m)]; }
  bool uses_ema() const { return ema_; }
  double ema_decay() const { return decay_; }
  double ema_eps() const { return eps_; }

  // One decay step for table m from a batch of encoder rows and the code
  // each row was assigned to. Rows that receive no assignments keep their
  // value when smoothing is off.
  void ema_update(int m, const Mat& encs, const std::vector<int>& assign);

  // Accumulator access for checkpointing.
  const Eigen::VectorXd& counts(int m) const {
    return N_[static_cast<size_t>(m)];
  }
  const Mat& sums(int m) const { return S_[static_cast<size_t>(m)]; }
  void set_ema_state(int m, Eigen::VectorXd counts, Mat sums);

 private:
  latent::LatentSpec spec_;
  std::vector<Var> tables_;
  bool ema_;
  double decay_, eps_;
  std::vector<Eigen::VectorXd> N_;
  std::vector<Mat> S_;
};

// Hard categorical sample per row of a probability matrix. The forward
// value is exactly one-hot at argmax_j(log p_j + g_j) with fresh Gumbel
// noise; the backward pass is the straight-through surrogate
// softmax((log p + g) / tau) at the same noise.
Var gumbel_max_sample(const Var& probs, double tau, Rng& rng);

// Nearest codebook row by L2 distance, ties to the lowest index.
// enc holds one L x code_dim matrix per codebook.
latent::CodeAssignment quantize(const std::vector<Mat>& enc,
                                const Codebook& codebook);

// Posterior probabilities passed through unchanged, tagged with their
// geometry. Rows are ordered m-major: row index = m * L + l.
struct RelaxedAssignment {
  latent::LatentSpec spec;
  Var probs;  // (M * L) x K

  long L() const { return probs.rows() / spec.M; }
};

RelaxedAssignment relax(const Var& posterior_probs,
                        const latent::LatentSpec& spec);

// Per-row argmax of the relaxed assignment, ties to the lowest index.
latent::CodeAssignment harden(const RelaxedAssignment& z);
latent::CodeAssignment harden(const Mat& probs, const latent::LatentSpec& spec);

}  // namespace dlr::discretize
