#pragma once

#include <string>
#include <vector>

#include "dlr/nn/params.hpp"
#include "dlr/nn/tensor.hpp"
#include "dlr/rng.hpp"

namespace dlr::nn {

inline constexpr double kMaskNegInf = -1e30;

// Sinusoidal position table, rows = positions.
Mat sinusoidal_table(long max_len, long d);

// q_len x q_len upper-triangular -inf mask (position t attends to <= t).
Mat causal_mask(long q_len);

// q_len x key-count mask with -inf at masked keys.
Mat key_mask(long q_len, const std::vector<bool>& key_valid);

struct AttentionParams {
  Var wq, wk, wv, wo;  // d x d
};
AttentionParams make_attention(ParamStore& store, const std::string& prefix,
                               long d, Rng& rng);

// Multi-head attention. `mask` may be empty (no masking); otherwise it is
// q_rows x kv_rows, added to the scores before softmax.
Var multihead_attention(const AttentionParams& p, const Var& q_in,
                        const Var& kv_in, const Mat& mask, int n_heads);

struct FeedForwardParams {
  Var w1, b1, w2, b2;
};
FeedForwardParams make_feed_forward(ParamStore& store,
                                    const std::string& prefix, long d,
                                    long d_ff, Rng& rng);
Var feed_forward(const FeedForwardParams& p, const Var& x);

struct LayerNormParams {
  Var gamma, beta;
};
LayerNormParams make_layer_norm(ParamStore& store, const std::string& prefix,
                                long d);

// Post-norm Transformer encoder block: LN(x + Attn(x)), LN(x + FFN(x)).
struct EncoderBlock {
  AttentionParams attn;
  LayerNormParams ln1;
  FeedForwardParams ff;
  LayerNormParams ln2;
  int n_heads = 4;

  static EncoderBlock make(ParamStore& store, const std::string& prefix,
                           long d, long d_ff, int n_heads, Rng& rng);
  Var apply(const Var& x, const Mat& mask, double drop, Rng* drop_rng) const;
};

// Post-norm Transformer decoder block: causal self-attention,
// cross-attention to memory, feed-forward.
struct DecoderBlock {
  AttentionParams self_attn;
  LayerNormParams ln1;
  AttentionParams cross_attn;
  LayerNormParams ln2;
  FeedForwardParams ff;
  LayerNormParams ln3;
  int n_heads = 4;

  static DecoderBlock make(ParamStore& store, const std::string& prefix,
                           long d, long d_ff, int n_heads, Rng& rng);
  Var apply(const Var& x, const Var& memory, const Mat& self_mask,
            const Mat& cross_mask, double drop, Rng* drop_rng) const;
};

}  // namespace dlr::nn
