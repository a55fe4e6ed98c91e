#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "dlr/corpus.hpp"
#include "dlr/model.hpp"
#include "dlr/nn/adam.hpp"
#include "dlr/rng.hpp"

namespace dlr::objectives {

using nn::Mat;
using nn::Var;

struct TrainingConfig {
  double gamma = 0.0;   // free-bits fraction of the KL cap, catvae only
  double beta = 0.0;    // commitment weight, vqvae only
  double tau = 0.5;     // straight-through Gumbel temperature
  int e_steps = 1;      // inference-side updates per generative update
  bool alternating = false;
  bool resample_e_batch = false;  // draw a fresh batch per inner E update

  double lr = 1e-3;
  bool inverse_sqrt = false;
  int warmup = 4000;
  int batch_size = 32;
  int max_steps = 10000;
  int eval_every = 500;
  int patience = 5;
  std::uint64_t seed = 17;

  // Control mode: the encoder keeps its random initialization and only the
  // generative side trains, so evaluation conditions on random codes.
  bool frozen_encoder = false;

  void validate(model::Method method) const;
};

struct LossBreakdown {
  double reconstruction = 0.0;  // log p(x|z), higher is better
  double kl_raw = 0.0;
  double kl_clamped = 0.0;
  double codebook_term = 0.0;
  double commitment_term = 0.0;
  double total = 0.0;  // the minimized objective
};

struct LossResult {
  Var loss;  // scalar node matching breakdown.total
  LossBreakdown breakdown;
  // vqvae only: hard assignments and detached encoder blocks, so the
  // training loop can feed EMA codebook updates for the same batch.
  latent::CodeAssignment codes;
  std::vector<Mat> encodings;
};

// Reconstruction under one straight-through Gumbel sample plus the
// free-bits KL against the uniform prior: the KL penalty carries no
// gradient while its raw value sits below gamma * M * L * log K.
LossResult catvae_loss(const corpus::Document& doc, model::Model& m,
                       const TrainingConfig& cfg, Rng& rng,
                       Rng* drop_rng = nullptr);

// Straight-through reconstruction plus quadratic codebook and commitment
// terms; with an EMA codebook the codebook term is reported but excluded
// from the minimized total.
LossResult vqvae_loss(const corpus::Document& doc, model::Model& m,
                      const TrainingConfig& cfg, Rng* drop_rng = nullptr);

// Soft-decode objective used for inference-side (E) updates: decodes the
// relaxed posterior directly, no sampling.
LossResult hardem_e_loss(const corpus::Document& doc, model::Model& m,
                         Rng* drop_rng = nullptr);

// Hard-decode objective used for generative-side (M) updates: decodes the
// per-row argmax of the current posterior.
LossResult hardem_m_loss(const corpus::Document& doc, model::Model& m,
                         Rng* drop_rng = nullptr);

struct RoundStats {
  double e_loss_first = 0.0;  // mean batch loss at the first E update
  double e_loss_last = 0.0;   // mean batch loss at the last E update
  double e_loss_mean = 0.0;   // averaged over the round's E updates
  double m_loss = 0.0;
  int e_updates = 0;
};

// One Hard EM round: e_steps gradient updates of the inference parameters
// with the generative side frozen, then one generative update against the
// hardened codes under the fresh posterior.
RoundStats hardem_round(const std::vector<const corpus::Document*>& batch,
                        model::Model& m, const TrainingConfig& cfg,
                        nn::Adam& phi_opt, nn::Adam& theta_opt,
                        Rng* drop_rng = nullptr);

struct PretrainResult {
  double best_dev_perplexity = 0.0;
  int best_step = 0;
  int steps_run = 0;
  int evals_run = 0;
  bool early_stopped = false;
};

// Trains the model with its method's loss, evaluating dev perplexity every
// eval_every steps, keeping the best parameters, and stopping after
// `patience` evaluations without improvement. The best parameters are
// restored into the model before returning. A non-finite loss aborts with
// a diagnostic. When `log` is given, one JSON object per line records
// {step, losses, dev_perplexity}.
PretrainResult pretrain(model::Model& m,
                        const std::vector<corpus::Document>& train,
                        const std::vector<corpus::Document>& dev,
                        const TrainingConfig& cfg, std::ostream* log = nullptr);

}  // namespace dlr::objectives
