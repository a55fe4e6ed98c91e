#include "dlr/decoder.hpp"

#include <cmath>
#include <numeric>

#include "dlr/errors.hpp"

namespace dlr::decoder {

namespace {

void check_tables(const latent::LatentSpec& spec,
                  const std::vector<Var>& tables) {
  if (static_cast<int>(tables.size()) != spec.M)
    throw ConfigError("decoder: expected " + std::to_string(spec.M) +
                      " embedding tables, got " +
                      std::to_string(tables.size()));
  for (const auto& t : tables)
    if (t.rows() != spec.K || t.cols() != spec.code_dim())
      throw ConfigError("decoder: embedding table must be K x code_dim");
}

}  // namespace

Decoder::Decoder(const latent::LatentSpec& spec, const DecoderConfig& cfg,
                 int vocab_size, nn::ParamStore& store,
                 const std::string& prefix, Rng& rng, bool make_latent_tables)
    : spec_(spec), cfg_(cfg), vocab_size_(vocab_size) {
  spec_.validate();
  if (spec_.d_model != cfg.d_model)
    throw ConfigError("latent spec and decoder config disagree on d_model");
  if (vocab_size_ <= corpus::kNumSpecials)
    throw ConfigError("vocabulary is empty");

  if (make_latent_tables)
    for (int m = 0; m < spec_.M; ++m)
      latent_tables_.push_back(
          store.add(prefix + ".e" + std::to_string(m),
                    nn::normal_init(rng, spec_.K, spec_.code_dim(), 0.02)));

  const long n_src_pos =
      spec_.layout == latent::Layout::local ? cfg_.max_len : spec_.M;
  src_pos_ = store.add(prefix + ".src_pos",
                       nn::normal_init(rng, n_src_pos, cfg_.d_model, 0.02));
  tok_emb_ = store.add(prefix + ".tok_emb",
                       nn::normal_init(rng, vocab_size_, cfg_.d_model, 0.02));
  tgt_pos_ = nn::sinusoidal_table(cfg_.max_len, cfg_.d_model);
  src_block_ = nn::EncoderBlock::make(store, prefix + ".src", cfg_.d_model,
                                      cfg_.d_ff, cfg_.n_heads, rng);
  tgt_block_ = nn::DecoderBlock::make(store, prefix + ".tgt", cfg_.d_model,
                                      cfg_.d_ff, cfg_.n_heads, rng);
  w_out_ = store.add(prefix + ".w_out",
                     nn::xavier_init(rng, cfg_.d_model, vocab_size_));
  b_out_ = store.add(prefix + ".b_out", Mat::Zero(1, vocab_size_));
}

const std::vector<Var>& Decoder::latent_tables() const {
  if (latent_tables_.empty())
    throw ConfigError("decoder: no latent embedding tables were created");
  return latent_tables_;
}

Var Decoder::embed_hard(const std::vector<Var>& tables,
                        const latent::CodeAssignment& codes) const {
  check_tables(spec_, tables);
  if (codes.spec.layout != spec_.layout || codes.spec.M != spec_.M ||
      codes.spec.K != spec_.K)
    throw ConfigError("decoder: code assignment does not match the latent spec");
  const int L = codes.L();
  std::vector<Var> parts;
  parts.reserve(static_cast<size_t>(spec_.M));
  for (int m = 0; m < spec_.M; ++m) {
    std::vector<int> idx(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
      int c = codes.codes(m, l);
      if (c < 0 || c >= spec_.K)
        throw ConfigError("decoder: code symbol out of range");
      idx[static_cast<size_t>(l)] = c;
    }
    parts.push_back(nn::rows(tables[static_cast<size_t>(m)], idx));
  }
  if (spec_.M == 1) return parts[0];
  return spec_.layout == latent::Layout::local ? nn::concat_cols(parts)
                                               : nn::concat_rows(parts);
}

Var Decoder::embed_relaxed(const std::vector<Var>& tables,
                           const Var& weights) const {
  check_tables(spec_, tables);
  if (weights.cols() != spec_.K || weights.rows() == 0 ||
      weights.rows() % spec_.M != 0)
    throw ConfigError("decoder: weight matrix must be (M*L) x K");
  const long L = weights.rows() / spec_.M;
  if (spec_.layout == latent::Layout::global && L != 1)
    throw ConfigError("decoder: global layout expects one row per codebook");
  std::vector<Var> parts;
  parts.reserve(static_cast<size_t>(spec_.M));
  for (int m = 0; m < spec_.M; ++m) {
    std::vector<int> idx(static_cast<size_t>(L));
    std::iota(idx.begin(), idx.end(), static_cast<int>(m * L));
    parts.push_back(
        nn::matmul(nn::rows(weights, idx), tables[static_cast<size_t>(m)]));
  }
  if (spec_.M == 1) return parts[0];
  return spec_.layout == latent::Layout::local ? nn::concat_cols(parts)
                                               : nn::concat_rows(parts);
}

Decoder::Score Decoder::reconstruct(const std::vector<int>& tokens,
                                    const Var& source, Rng* drop_rng) const {
  if (source.cols() != cfg_.d_model)
    throw ConfigError("decoder: source width must equal d_model");
  if (source.rows() > src_pos_.rows())
    throw ConfigError("decoder: source exceeds the learned position table");
  const int T = static_cast<int>(tokens.size());
  if (T + 1 > cfg_.max_len)
    throw ConfigError("decoder: document exceeds max_len");
  for (int t : tokens)
    if (t < 0 || t >= vocab_size_)
      throw ConfigError("decoder: token id out of range");

  const double drop = drop_rng != nullptr ? cfg_.dropout : 0.0;

  // Source side: learned positions, then one encoder layer into memory.
  std::vector<int> pos_idx(static_cast<size_t>(source.rows()));
  std::iota(pos_idx.begin(), pos_idx.end(), 0);
  Var src = source + nn::rows(src_pos_, pos_idx);
  if (drop > 0.0) src = nn::dropout(src, drop, *drop_rng);
  Var memory = src_block_.apply(src, Mat(), drop, drop_rng);

  // Target side: BOS-prefixed inputs; gold is the document plus EOS.
  std::vector<int> in_ids(static_cast<size_t>(T) + 1);
  in_ids[0] = corpus::kBos;
  std::vector<std::pair<long, long>> gold(static_cast<size_t>(T) + 1);
  for (int t = 0; t < T; ++t) {
    in_ids[static_cast<size_t>(t) + 1] = tokens[static_cast<size_t>(t)];
    gold[static_cast<size_t>(t)] = {t, tokens[static_cast<size_t>(t)]};
  }
  gold[static_cast<size_t>(T)] = {T, corpus::kEos};

  Var x = nn::add_const(nn::rows(tok_emb_, in_ids), tgt_pos_.topRows(T + 1));
  if (drop > 0.0) x = nn::dropout(x, drop, *drop_rng);
  Var h = tgt_block_.apply(x, memory, nn::causal_mask(T + 1), Mat(), drop,
                           drop_rng);
  Var logits = nn::add_rowvec(nn::matmul(h, w_out_), b_out_);
  Var picked = nn::pick(nn::log_softmax_rows(logits), gold);

  Score s;
  s.total = nn::sum(picked);
  s.per_token.resize(static_cast<size_t>(T) + 1);
  for (int t = 0; t <= T; ++t)
    s.per_token[static_cast<size_t>(t)] = picked.value()(t, 0);
  return s;
}

double perplexity(double total_logprob, long long total_predicted) {
  if (total_predicted <= 0)
    throw ConfigError("perplexity: no predicted tokens");
  if (!std::isfinite(total_logprob))
    throw NumericalError("perplexity: log-probability is not finite");
  return std::exp(-total_logprob / static_cast<double>(total_predicted));
}

}  // namespace dlr::decoder
