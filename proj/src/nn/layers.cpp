#include "dlr/nn/layers.hpp"

#include <cmath>

#include "dlr/errors.hpp"

namespace dlr::nn {

Mat sinusoidal_table(long max_len, long d) {
  Mat pe(max_len, d);
  for (long pos = 0; pos < max_len; ++pos) {
    for (long i = 0; i < d; i += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      pe(pos, i) = std::sin(pos * freq);
      if (i + 1 < d) pe(pos, i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

Mat causal_mask(long q_len) {
  Mat m = Mat::Zero(q_len, q_len);
  for (long r = 0; r < q_len; ++r)
    for (long c = r + 1; c < q_len; ++c) m(r, c) = kMaskNegInf;
  return m;
}

Mat key_mask(long q_len, const std::vector<bool>& key_valid) {
  Mat m = Mat::Zero(q_len, static_cast<long>(key_valid.size()));
  for (size_t c = 0; c < key_valid.size(); ++c)
    if (!key_valid[c]) m.col(static_cast<long>(c)).setConstant(kMaskNegInf);
  return m;
}

AttentionParams make_attention(ParamStore& store, const std::string& prefix,
                               long d, Rng& rng) {
  return AttentionParams{
      store.add(prefix + ".wq", xavier_init(rng, d, d)),
      store.add(prefix + ".wk", xavier_init(rng, d, d)),
      store.add(prefix + ".wv", xavier_init(rng, d, d)),
      store.add(prefix + ".wo", xavier_init(rng, d, d)),
  };
}

Var multihead_attention(const AttentionParams& p, const Var& q_in,
                        const Var& kv_in, const Mat& mask, int n_heads) {
  long d = p.wq.cols();
  if (d % n_heads != 0)
    throw ConfigError("attention: heads must divide d_model");
  long dh = d / n_heads;
  Var q = matmul(q_in, p.wq);
  Var k = matmul(kv_in, p.wk);
  Var v = matmul(kv_in, p.wv);
  double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    Var qh = cols(q, h * dh, dh);
    Var kh = cols(k, h * dh, dh);
    Var vh = cols(v, h * dh, dh);
    Var scores = scale(matmul(qh, transpose(kh)), sc);
    if (mask.size() > 0) scores = add_const(scores, mask);
    heads.push_back(matmul(softmax_rows(scores), vh));
  }
  return matmul(concat_cols(heads), p.wo);
}

FeedForwardParams make_feed_forward(ParamStore& store,
                                    const std::string& prefix, long d,
                                    long d_ff, Rng& rng) {
  return FeedForwardParams{
      store.add(prefix + ".w1", xavier_init(rng, d, d_ff)),
      store.add(prefix + ".b1", Mat::Zero(1, d_ff)),
      store.add(prefix + ".w2", xavier_init(rng, d_ff, d)),
      store.add(prefix + ".b2", Mat::Zero(1, d)),
  };
}

Var feed_forward(const FeedForwardParams& p, const Var& x) {
  return add_rowvec(matmul(relu(add_rowvec(matmul(x, p.w1), p.b1)), p.w2),
                    p.b2);
}

LayerNormParams make_layer_norm(ParamStore& store, const std::string& prefix,
                                long d) {
  return LayerNormParams{
      store.add(prefix + ".g", Mat::Ones(1, d)),
      store.add(prefix + ".b", Mat::Zero(1, d)),
  };
}

EncoderBlock EncoderBlock::make(ParamStore& store, const std::string& prefix,
                                long d, long d_ff, int n_heads, Rng& rng) {
  EncoderBlock b;
  b.attn = make_attention(store, prefix + ".attn", d, rng);
  b.ln1 = make_layer_norm(store, prefix + ".ln1", d);
  b.ff = make_feed_forward(store, prefix + ".ff", d, d_ff, rng);
  b.ln2 = make_layer_norm(store, prefix + ".ln2", d);
  b.n_heads = n_heads;
  return b;
}

static Var maybe_drop(const Var& x, double drop, Rng* rng) {
  if (drop <= 0.0 || rng == nullptr) return x;
  return dropout(x, drop, *rng);
}

Var EncoderBlock::apply(const Var& x, const Mat& mask, double drop,
                        Rng* drop_rng) const {
  Var a = multihead_attention(attn, x, x, mask, n_heads);
  Var h = layer_norm_rows(x + maybe_drop(a, drop, drop_rng), ln1.gamma,
                          ln1.beta);
  Var f = feed_forward(ff, h);
  return layer_norm_rows(h + maybe_drop(f, drop, drop_rng), ln2.gamma,
                         ln2.beta);
}

DecoderBlock DecoderBlock::make(ParamStore& store, const std::string& prefix,
                                long d, long d_ff, int n_heads, Rng& rng) {
  DecoderBlock b;
  b.self_attn = make_attention(store, prefix + ".self", d, rng);
  b.ln1 = make_layer_norm(store, prefix + ".ln1", d);
  b.cross_attn = make_attention(store, prefix + ".cross", d, rng);
  b.ln2 = make_layer_norm(store, prefix + ".ln2", d);
  b.ff = make_feed_forward(store, prefix + ".ff", d, d_ff, rng);
  b.ln3 = make_layer_norm(store, prefix + ".ln3", d);
  b.n_heads = n_heads;
  return b;
}

Var DecoderBlock::apply(const Var& x, const Var& memory, const Mat& self_mask,
                        const Mat& cross_mask, double drop,
                        Rng* drop_rng) const {
  Var a = multihead_attention(self_attn, x, x, self_mask, n_heads);
  Var h1 = layer_norm_rows(x + maybe_drop(a, drop, drop_rng), ln1.gamma,
                           ln1.beta);
  Var c = multihead_attention(cross_attn, h1, memory, cross_mask, n_heads);
  Var h2 = layer_norm_rows(h1 + maybe_drop(c, drop, drop_rng), ln2.gamma,
                           ln2.beta);
  Var f = feed_forward(ff, h2);
  return layer_norm_rows(h2 + maybe_drop(f, drop, drop_rng), ln3.gamma,
                         ln3.beta);
}

}  // namespace dlr::nn
