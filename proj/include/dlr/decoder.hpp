#pragma once

#include <string>
#include <vector>

#include "dlr/corpus.hpp"
#include "dlr/latent.hpp"
#include "dlr/nn/layers.hpp"
#include "dlr/nn/params.hpp"
#include "dlr/nn/tensor.hpp"
#include "dlr/rng.hpp"

namespace dlr::decoder {

using nn::Mat;
using nn::Var;

struct DecoderConfig {
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  double dropout = 0.1;
  int max_len = 512;
};

// Embeds latent codes into a source sequence and scores the token sequence
// autoregressively: embedded codes (plus learned source positions) run
// through a one-layer Transformer encoder into memory; the BOS-prefixed
// targets attend to it through a one-layer Transformer decoder with causal
// self-attention. EOS terminates every document and is scored like any
// other token.
class Decoder {
 public:
  // make_latent_tables controls whether the decoder owns per-codebook
  // embedding tables (K x code_dim). Vector-quantized models pass their
  // codebook tables to the embed calls instead and set this to false.
  Decoder(const latent::LatentSpec& spec, const DecoderConfig& cfg,
          int vocab_size, nn::ParamStore& store, const std::string& prefix,
          Rng& rng, bool make_latent_tables);

  const std::vector<Var>& latent_tables() const;

  // Hard codes -> embedded source: local layouts concatenate the M
  // embedding rows per position (T x d_model), global layouts stack the M
  // rows (M x d_model).
  Var embed_hard(const std::vector<Var>& tables,
                 const latent::CodeAssignment& codes) const;

  // Row-weighted embedding for relaxed or straight-through assignments.
  // weights is (M * L) x K, m-major; at one-hot rows the value matches
  // embed_hard exactly.
  Var embed_relaxed(const std::vector<Var>& tables, const Var& weights) const;

  struct Score {
    Var total;                     // 1x1, sum of per-token log-probs
    std::vector<double> per_token;  // T+1 entries, EOS last
  };

  // Teacher-forced log p(x_t | x_{<t}, z) for every target position plus
  // the terminating EOS. Dropout is applied only when a training rng is
  // supplied.
  Score reconstruct(const std::vector<int>& tokens, const Var& source,
                    Rng* drop_rng = nullptr) const;

  const latent::LatentSpec& spec() const { return spec_; }

 private:
  latent::LatentSpec spec_;
  DecoderConfig cfg_;
  int vocab_size_;
  std::vector<Var> latent_tables_;  // empty when the codebook is reused
  Var src_pos_;  // max_len x d (local) or M x d (global), learned
  Var tok_emb_;  // |V| x d
  Mat tgt_pos_;  // sinusoidal
  nn::EncoderBlock src_block_;
  nn::DecoderBlock tgt_block_;
  Var w_out_, b_out_;
};

// exp(-total_logprob / total_predicted_tokens); the denominator counts the
// EOS slot of every document.
double perplexity(double total_logprob, long long total_predicted);

}  // namespace dlr::decoder
