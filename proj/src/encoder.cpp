#include "dlr/encoder.hpp"

#include "dlr/errors.hpp"

namespace dlr::encoder {

Encoder::Encoder(const latent::LatentSpec& spec, const EncoderConfig& cfg,
                 int vocab_size, nn::ParamStore& store,
                 const std::string& prefix, Rng& rng)
    : spec_(spec), cfg_(cfg), vocab_size_(vocab_size) {
  spec_.validate();
  if (spec_.d_model != cfg_.d_model)
    throw ConfigError("latent spec and encoder config disagree on d_model");
  if (vocab_size_ <= corpus::kNumSpecials)
    throw ConfigError("vocabulary is empty");

  tok_emb_ = store.add(prefix + ".tok_emb",
                       nn::normal_init(rng, vocab_size_, cfg_.d_model, 0.02));
  pos_table_ = nn::sinusoidal_table(cfg_.max_len, cfg_.d_model);
  block_ = nn::EncoderBlock::make(store, prefix + ".block", cfg_.d_model,
                                  cfg_.d_ff, cfg_.n_heads, rng);
  for (int m = 0; m < spec_.M; ++m)
    heads_.push_back(store.add(prefix + ".head" + std::to_string(m),
                               nn::xavier_init(rng, spec_.K, cfg_.d_model)));
  if (spec_.layout == latent::Layout::global)
    vq_proj_ = store.add(
        prefix + ".vq_proj",
        nn::xavier_init(rng, cfg_.d_model, spec_.M * cfg_.d_model));
}

Var Encoder::encode_tokens(const std::vector<int>& tokens,
                           Rng* drop_rng) const {
  if (tokens.empty()) throw ConfigError("cannot encode an empty document");
  long T = static_cast<long>(tokens.size());
  if (T > pos_table_.rows())
    throw ConfigError("document longer than the position table");
  std::vector<bool> valid(tokens.size());
  bool any_valid = false;
  for (size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || tokens[t] >= vocab_size_)
      throw ConfigError("token id out of range: " +
                        std::to_string(tokens[t]));
    valid[t] = tokens[t] != corpus::kPad;
    any_valid = any_valid || valid[t];
  }
  if (!any_valid) throw ConfigError("document contains only padding");

  Var x = nn::rows(tok_emb_, tokens);
  if (cfg_.sinusoidal) x = nn::add_const(x, pos_table_.topRows(T));
  if (drop_rng != nullptr && cfg_.dropout > 0.0)
    x = nn::dropout(x, cfg_.dropout, *drop_rng);
  Mat mask = nn::key_mask(T, valid);
  return block_.apply(x, mask, drop_rng ? cfg_.dropout : 0.0, drop_rng);
}

Var Encoder::mean_rows(const Var& x, const std::vector<int>& tokens) const {
  std::vector<int> keep;
  for (size_t t = 0; t < tokens.size(); ++t)
    if (tokens[t] != corpus::kPad) keep.push_back(static_cast<int>(t));
  Var selected = nn::rows(x, keep);
  Mat w = Mat::Constant(1, static_cast<long>(keep.size()),
                        1.0 / static_cast<double>(keep.size()));
  return nn::matmul(Var::constant(w), selected);
}

Var Encoder::posterior_logits(const Var& H,
                              const std::vector<int>& tokens) const {
  std::vector<Var> rows_per_head;
  rows_per_head.reserve(heads_.size());
  for (const Var& w : heads_) {
    Var logits = nn::matmul(H, nn::transpose(w));  // T x K
    if (spec_.layout == latent::Layout::global)
      logits = mean_rows(logits, tokens);
    rows_per_head.push_back(logits);
  }
  return nn::concat_rows(rows_per_head);
}

Var Encoder::posterior_probs(const Var& H,
                             const std::vector<int>& tokens) const {
  return nn::softmax_rows(posterior_logits(H, tokens));
}

std::vector<Var> Encoder::vq_encode(const Var& H,
                                    const std::vector<int>& tokens) const {
  std::vector<Var> blocks;
  blocks.reserve(static_cast<size_t>(spec_.M));
  if (spec_.layout == latent::Layout::local) {
    int dd = spec_.code_dim();
    for (int m = 0; m < spec_.M; ++m)
      blocks.push_back(nn::cols(H, m * dd, dd));
  } else {
    Var pooled = mean_rows(nn::matmul(H, vq_proj_), tokens);  // 1 x M*d
    for (int m = 0; m < spec_.M; ++m)
      blocks.push_back(nn::cols(pooled, m * cfg_.d_model, cfg_.d_model));
  }
  return blocks;
}

}  // namespace dlr::encoder
