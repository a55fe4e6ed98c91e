#include "dlr/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "dlr/discretize.hpp"
#include "dlr/errors.hpp"

namespace dlr::objectives {

using json = nlohmann::json;

void TrainingConfig::validate(model::Method method) const {
  if (gamma != 0.0 && method != model::Method::catvae)
    throw ConfigError("free-bits gamma applies only to catvae");
  if (gamma < 0.0) throw ConfigError("gamma must be non-negative");
  if (beta != 0.0 && method != model::Method::vqvae)
    throw ConfigError("commitment beta applies only to vqvae");
  if (beta < 0.0) throw ConfigError("beta must be non-negative");
  if (tau <= 0.0) throw ConfigError("tau must be positive");
  if (e_steps < 1) throw ConfigError("e_steps must be at least 1");
  if (e_steps != 1 && method != model::Method::hardem && !alternating)
    throw ConfigError("e_steps > 1 requires hardem or alternating training");
  if (alternating && method == model::Method::hardem)
    throw ConfigError("hardem already alternates; the flag applies to "
                      "catvae and vqvae");
  if (lr <= 0.0) throw ConfigError("learning rate must be positive");
  if (warmup < 1) throw ConfigError("warmup must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (max_steps < 1) throw ConfigError("max_steps must be positive");
  if (eval_every < 1) throw ConfigError("eval_every must be positive");
  if (patience < 1) throw ConfigError("patience must be positive");
}

namespace {

Var squared_distance(const Var& a, const Var& b) {
  Var d = a - b;
  return nn::sum(d * d);
}

}  // namespace

LossResult catvae_loss(const corpus::Document& doc, model::Model& m,
                       const TrainingConfig& cfg, Rng& rng, Rng* drop_rng) {
  const auto& spec = m.config().spec;
  Var H = m.enc().encode_tokens(doc.tokens, drop_rng);
  Var logits = m.enc().posterior_logits(H, doc.tokens);
  Var probs = nn::softmax_rows(logits);
  Var logq = nn::log_softmax_rows(logits);

  Var sample = discretize::gumbel_max_sample(probs, cfg.tau, rng);
  Var source = m.dec().embed_relaxed(m.latent_tables(), sample);
  auto score = m.dec().reconstruct(doc.tokens, source, drop_rng);

  // KL(q || uniform) summed over heads and positions equals
  // sum(q log q) + M * L * log K.
  const double rows = static_cast<double>(probs.rows());
  const double log_k = std::log(static_cast<double>(spec.K));
  Var kl = nn::add_const(nn::sum(probs * logq),
                         Mat::Constant(1, 1, rows * log_k));
  const double kl_raw = kl.value()(0, 0);
  const double lambda = cfg.gamma * rows * log_k;

  Var penalty = kl_raw < lambda
                    ? Var::constant(Mat::Constant(1, 1, lambda))
                    : kl;
  LossResult res;
  res.loss = nn::scale(score.total, -1.0) + penalty;
  res.breakdown.reconstruction = score.total.value()(0, 0);
  res.breakdown.kl_raw = kl_raw;
  res.breakdown.kl_clamped = std::max(kl_raw, lambda);
  res.breakdown.total = res.loss.value()(0, 0);
  return res;
}

LossResult vqvae_loss(const corpus::Document& doc, model::Model& m,
                      const TrainingConfig& cfg, Rng* drop_rng) {
  const auto& spec = m.config().spec;
  auto& cb = m.codebook();
  Var H = m.enc().encode_tokens(doc.tokens, drop_rng);
  std::vector<Var> blocks = m.enc().vq_encode(H, doc.tokens);

  LossResult res;
  res.encodings.reserve(blocks.size());
  for (const Var& b : blocks) res.encodings.push_back(b.value());
  res.codes = discretize::quantize(res.encodings, cb);

  std::vector<Var> st_blocks;
  st_blocks.reserve(blocks.size());
  Var cb_term = Var::constant(Mat::Zero(1, 1));
  Var commit = Var::constant(Mat::Zero(1, 1));
  for (int mi = 0; mi < spec.M; ++mi) {
    std::vector<int> idx(static_cast<size_t>(res.codes.codes.cols()));
    for (long l = 0; l < res.codes.codes.cols(); ++l)
      idx[static_cast<size_t>(l)] = res.codes.codes(mi, l);
    Var e_rows = nn::rows(cb.table(mi), idx);
    const Mat& enc_val = res.encodings[static_cast<size_t>(mi)];
    st_blocks.push_back(
        nn::st_passthrough(blocks[static_cast<size_t>(mi)], e_rows.value()));
    cb_term = cb_term + squared_distance(Var::constant(enc_val), e_rows);
    commit = commit + squared_distance(blocks[static_cast<size_t>(mi)],
                                       Var::constant(e_rows.value()));
  }

  Var source = spec.M == 1 ? st_blocks[0]
               : spec.layout == latent::Layout::local
                   ? nn::concat_cols(st_blocks)
                   : nn::concat_rows(st_blocks);
  auto score = m.dec().reconstruct(doc.tokens, source, drop_rng);

  res.loss = nn::scale(score.total, -1.0) + nn::scale(commit, cfg.beta);
  if (!cb.uses_ema()) res.loss = res.loss + cb_term;
  res.breakdown.reconstruction = score.total.value()(0, 0);
  res.breakdown.codebook_term = cb_term.value()(0, 0);
  res.breakdown.commitment_term = commit.value()(0, 0);
  res.breakdown.total = res.loss.value()(0, 0);
  return res;
}

LossResult hardem_e_loss(const corpus::Document& doc, model::Model& m,
                         Rng* drop_rng) {
  Var H = m.enc().encode_tokens(doc.tokens, drop_rng);
  Var probs = m.enc().posterior_probs(H, doc.tokens);
  Var source = m.dec().embed_relaxed(m.latent_tables(), probs);
  auto score = m.dec().reconstruct(doc.tokens, source, drop_rng);
  LossResult res;
  res.loss = nn::scale(score.total, -1.0);
  res.breakdown.reconstruction = score.total.value()(0, 0);
  res.breakdown.total = res.breakdown.reconstruction * -1.0;
  return res;
}

LossResult hardem_m_loss(const corpus::Document& doc, model::Model& m,
                         Rng* drop_rng) {
  latent::CodeAssignment codes;
  {
    nn::NoGradGuard guard;
    Var H = m.enc().encode_tokens(doc.tokens);
    codes = discretize::harden(
        m.enc().posterior_probs(H, doc.tokens).value(), m.config().spec);
  }
  Var source = m.dec().embed_hard(m.latent_tables(), codes);
  auto score = m.dec().reconstruct(doc.tokens, source, drop_rng);
  LossResult res;
  res.loss = nn::scale(score.total, -1.0);
  res.codes = codes;
  res.breakdown.reconstruction = score.total.value()(0, 0);
  res.breakdown.total = res.breakdown.reconstruction * -1.0;
  return res;
}

namespace {

void zero_all(model::Model& m) {
  m.enc_params().zero_grads();
  m.dec_params().zero_grads();
  m.cb_params().zero_grads();
}

void check_finite(double v, int step, const char* what) {
  if (!std::isfinite(v))
    throw NumericalError("training diverged at step " + std::to_string(step) +
                         ": non-finite " + what);
}

// Applies one batched EMA update per codebook from per-document loss
// results.
void apply_ema(model::Model& m, const std::vector<LossResult>& results) {
  auto& cb = m.codebook();
  const auto& spec = m.config().spec;
  for (int mi = 0; mi < spec.M; ++mi) {
    long total_rows = 0;
    for (const auto& r : results)
      total_rows += r.encodings[static_cast<size_t>(mi)].rows();
    Mat stacked(total_rows, spec.code_dim());
    std::vector<int> assign;
    assign.reserve(static_cast<size_t>(total_rows));
    long at = 0;
    for (const auto& r : results) {
      const Mat& e = r.encodings[static_cast<size_t>(mi)];
      stacked.middleRows(at, e.rows()) = e;
      at += e.rows();
      for (long l = 0; l < r.codes.codes.cols(); ++l)
        assign.push_back(r.codes.codes(mi, l));
    }
    cb.ema_update(mi, stacked, assign);
  }
}

}  // namespace

RoundStats hardem_round(const std::vector<const corpus::Document*>& batch,
                        model::Model& m, const TrainingConfig& cfg,
                        nn::Adam& phi_opt, nn::Adam& theta_opt,
                        Rng* drop_rng) {
  if (batch.empty()) throw ConfigError("hardem_round: empty batch");
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  RoundStats stats;

  for (int s = 0; s < cfg.e_steps; ++s) {
    zero_all(m);
    double mean_loss = 0.0;
    for (const auto* doc : batch) {
      auto res = hardem_e_loss(*doc, m, drop_rng);
      nn::scale(res.loss, inv_n).backward();
      mean_loss += res.breakdown.total * inv_n;
    }
    if (s == 0) stats.e_loss_first = mean_loss;
    stats.e_loss_last = mean_loss;
    stats.e_loss_mean += mean_loss / static_cast<double>(cfg.e_steps);
    ++stats.e_updates;
    if (!cfg.frozen_encoder) phi_opt.step();
  }

  zero_all(m);
  double m_loss = 0.0;
  for (const auto* doc : batch) {
    auto res = hardem_m_loss(*doc, m, drop_rng);
    nn::scale(res.loss, inv_n).backward();
    m_loss += res.breakdown.total * inv_n;
  }
  theta_opt.step();
  stats.m_loss = m_loss;
  return stats;
}

namespace {

struct BatchSource {
  const std::vector<corpus::Document>& docs;
  Rng rng;
  std::vector<size_t> order;
  size_t pos = 0;

  BatchSource(const std::vector<corpus::Document>& d, Rng r)
      : docs(d), rng(std::move(r)) {
    order.resize(docs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order);
  }

  std::vector<const corpus::Document*> next(int n) {
    std::vector<const corpus::Document*> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      if (pos == order.size()) {
        rng.shuffle(order);
        pos = 0;
      }
      out.push_back(&docs[order[pos++]]);
    }
    return out;
  }
};

struct BestState {
  double ppl = std::numeric_limits<double>::infinity();
  int step = 0;
  std::vector<Mat> enc_snap, dec_snap, cb_snap;
  std::vector<std::pair<Eigen::VectorXd, Mat>> ema_snap;
};

void capture(model::Model& m, BestState& best, double ppl, int step) {
  best.ppl = ppl;
  best.step = step;
  best.enc_snap = m.enc_params().snapshot();
  best.dec_snap = m.dec_params().snapshot();
  best.cb_snap = m.cb_params().snapshot();
  best.ema_snap.clear();
  if (m.config().method == model::Method::vqvae && m.config().ema)
    for (int mi = 0; mi < m.config().spec.M; ++mi)
      best.ema_snap.emplace_back(m.codebook().counts(mi),
                                 m.codebook().sums(mi));
}

void restore(model::Model& m, const BestState& best) {
  m.enc_params().restore(best.enc_snap);
  m.dec_params().restore(best.dec_snap);
  m.cb_params().restore(best.cb_snap);
  for (size_t mi = 0; mi < best.ema_snap.size(); ++mi)
    m.codebook().set_ema_state(static_cast<int>(mi), best.ema_snap[mi].first,
                               best.ema_snap[mi].second);
}

}  // namespace

PretrainResult pretrain(model::Model& m,
                        const std::vector<corpus::Document>& train,
                        const std::vector<corpus::Document>& dev,
                        const TrainingConfig& cfg, std::ostream* log) {
  const model::Method method = m.config().method;
  cfg.validate(method);
  if (train.empty()) throw ConfigError("pretrain: empty training split");
  if (dev.empty()) throw ConfigError("pretrain: empty dev split");

  nn::AdamOptions opts;
  opts.lr = cfg.lr;
  opts.inverse_sqrt = cfg.inverse_sqrt;
  opts.warmup = cfg.warmup;
  opts.d_model = m.config().spec.d_model;
  nn::Adam phi_opt(m.enc_params().vars(), opts);
  std::vector<Var> theta_vars = m.dec_params().vars();
  if (method == model::Method::vqvae && !m.config().ema)
    for (const Var& v : m.cb_params().vars()) theta_vars.push_back(v);
  nn::Adam theta_opt(std::move(theta_vars), opts);

  BatchSource batches(train, make_rng(cfg.seed, "order"));
  Rng gumbel_rng = make_rng(cfg.seed, "gumbel");
  Rng drop_rng = make_rng(cfg.seed, "dropout");
  const bool use_dropout =
      m.config().enc.dropout > 0.0 || m.config().dec.dropout > 0.0;
  Rng* drop = use_dropout ? &drop_rng : nullptr;
  const double inv_n = 1.0 / static_cast<double>(cfg.batch_size);

  BestState best;
  PretrainResult out;
  int evals_since_best = 0;

  auto joint_or_alternating_step = [&](int step) -> LossBreakdown {
    LossBreakdown mean;
    auto accumulate = [&](const LossBreakdown& b) {
      mean.reconstruction += b.reconstruction * inv_n;
      mean.kl_raw += b.kl_raw * inv_n;
      mean.kl_clamped += b.kl_clamped * inv_n;
      mean.codebook_term += b.codebook_term * inv_n;
      mean.commitment_term += b.commitment_term * inv_n;
      mean.total += b.total * inv_n;
    };
    auto run_batch = [&](const std::vector<const corpus::Document*>& batch,
                         bool record, bool with_ema) {
      zero_all(m);
      std::vector<LossResult> results;
      results.reserve(batch.size());
      for (const auto* doc : batch) {
        LossResult res = method == model::Method::catvae
                             ? catvae_loss(*doc, m, cfg, gumbel_rng, drop)
                             : vqvae_loss(*doc, m, cfg, drop);
        nn::scale(res.loss, inv_n).backward();
        check_finite(res.breakdown.total, step, "loss");
        if (record) accumulate(res.breakdown);
        results.push_back(std::move(res));
      }
      if (with_ema && method == model::Method::vqvae && m.config().ema)
        apply_ema(m, results);
    };

    if (!cfg.alternating) {
      run_batch(batches.next(cfg.batch_size), true, true);
      if (!cfg.frozen_encoder) phi_opt.step();
      theta_opt.step();
      return mean;
    }

    // Alternating schedule: e_steps inference-side updates, then one
    // generative update, mirroring the Hard EM round structure.
    auto batch = batches.next(cfg.batch_size);
    for (int s = 0; s < cfg.e_steps; ++s) {
      if (cfg.resample_e_batch && s > 0) batch = batches.next(cfg.batch_size);
      run_batch(batch, false, false);
      if (!cfg.frozen_encoder) phi_opt.step();
    }
    if (cfg.resample_e_batch) batch = batches.next(cfg.batch_size);
    run_batch(batch, true, true);
    theta_opt.step();
    return mean;
  };

  for (int step = 1; step <= cfg.max_steps; ++step) {
    LossBreakdown b;
    if (method == model::Method::hardem) {
      auto batch = batches.next(cfg.batch_size);
      auto stats = hardem_round(batch, m, cfg, phi_opt, theta_opt, drop);
      check_finite(stats.e_loss_last, step, "E-step loss");
      check_finite(stats.m_loss, step, "M-step loss");
      b.reconstruction = -stats.m_loss;
      b.total = stats.m_loss;
    } else {
      b = joint_or_alternating_step(step);
    }
    out.steps_run = step;

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double ppl = m.corpus_perplexity(dev);
      check_finite(ppl, step, "dev perplexity");
      ++out.evals_run;
      if (log != nullptr) {
        json line = {{"step", step},
                     {"reconstruction", b.reconstruction},
                     {"kl_raw", b.kl_raw},
                     {"kl_clamped", b.kl_clamped},
                     {"codebook_term", b.codebook_term},
                     {"commitment_term", b.commitment_term},
                     {"total", b.total},
                     {"dev_perplexity", ppl}};
        (*log) << line.dump() << '\n';
      }
      if (ppl < best.ppl) {
        capture(m, best, ppl, step);
        evals_since_best = 0;
      } else {
        ++evals_since_best;
        if (evals_since_best >= cfg.patience) {
          out.early_stopped = true;
          break;
        }
      }
    }
  }

  if (out.evals_run == 0) {
    capture(m, best, m.corpus_perplexity(dev), out.steps_run);
    ++out.evals_run;
  }
  restore(m, best);
  out.best_dev_perplexity = best.ppl;
  out.best_step = best.step;
  return out;
}

}  // namespace dlr::objectives
