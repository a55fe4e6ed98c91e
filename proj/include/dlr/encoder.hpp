#pragma once

#include <string>
#include <vector>

#include "dlr/corpus.hpp"
#include "dlr/latent.hpp"
#include "dlr/nn/layers.hpp"
#include "dlr/nn/params.hpp"
#include "dlr/nn/tensor.hpp"
#include "dlr/rng.hpp"

namespace dlr::encoder {

using nn::Mat;
using nn::Var;

struct EncoderConfig {
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  double dropout = 0.1;
  bool sinusoidal = true;  // disable to make the encoder order-agnostic
  int max_len = 512;
};

// Single-layer Transformer over token embeddings plus the per-method
// posterior surfaces: categorical heads softmax(W_m h) for CatVAE and Hard
// EM, and continuous pre-quantization encodings for VQ. One instance
// serves all three methods; the caller picks which surface to use.
class Encoder {
 public:
  Encoder(const latent::LatentSpec& spec, const EncoderConfig& cfg,
          int vocab_size, nn::ParamStore& store, const std::string& prefix,
          Rng& rng);

  // T x d_model contextual states. Pad tokens are masked out of attention
  // and never influence other positions. Dropout is applied only when a
  // training rng is supplied.
  Var encode_tokens(const std::vector<int>& tokens,
                    Rng* drop_rng = nullptr) const;

  // Posterior over codes as (M*L) x K rows, m-major (row = m * L + l).
  // Local layout: one row per token per head. Global: heads applied per
  // token, then mean-pooled over non-pad positions before the softmax.
  Var posterior_logits(const Var& H, const std::vector<int>& tokens) const;
  Var posterior_probs(const Var& H, const std::vector<int>& tokens) const;

  // Pre-quantization encodings, one L x code_dim block per codebook.
  // Local layout slices each state into M subvectors (losslessly, their
  // concatenation is the state). Global layout projects states to
  // R^{M * d_model}, mean-pools over non-pad positions, and splits the
  // result into M blocks.
  std::vector<Var> vq_encode(const Var& H,
                             const std::vector<int>& tokens) const;

  const latent::LatentSpec& spec() const { return spec_; }
  const EncoderConfig& config() const { return cfg_; }

 private:
  Var mean_rows(const Var& x, const std::vector<int>& tokens) const;

  latent::LatentSpec spec_;
  EncoderConfig cfg_;
  int vocab_size_;
  Var tok_emb_;  // |V| x d_model
  Mat pos_table_;
  nn::EncoderBlock block_;
  std::vector<Var> heads_;  // M tables, K x d_model
  Var vq_proj_;             // d_model x (M * d_model), global layout only
};

}  // namespace dlr::encoder
