#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dlr/corpus.hpp"
#include "dlr/decoder.hpp"
#include "dlr/discretize.hpp"
#include "dlr/encoder.hpp"
#include "dlr/latent.hpp"
#include "dlr/nn/params.hpp"
#include "dlr/rng.hpp"

namespace dlr::model {

using nn::Mat;
using nn::Var;

enum class Method { catvae, vqvae, hardem };

std::string method_name(Method m);
Method parse_method(const std::string& name);

struct ModelConfig {
  Method method = Method::catvae;
  latent::LatentSpec spec;
  encoder::EncoderConfig enc;
  decoder::DecoderConfig dec;
  bool ema = false;          // vqvae only
  double ema_decay = 0.99;
  double ema_eps = 1e-5;
  std::uint64_t seed = 17;

  void validate() const;
  std::uint64_t hash() const;  // over every field above except the seed
};

// One discrete-latent model: a shared Transformer encoder, a per-method
// discretization surface, and a Transformer decoder conditioned on the
// embedded codes. Parameters live in three stores: enc_params (inference
// side), dec_params (generative side), and cb_params (the vector-quantizer
// codebook, gradient-trained only when EMA is off).
class Model {
 public:
  Model(const ModelConfig& cfg, int vocab_size, std::uint64_t vocab_hash);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  int vocab_size() const { return vocab_size_; }
  std::uint64_t vocab_hash() const { return vocab_hash_; }

  const encoder::Encoder& enc() const { return *enc_; }
  const decoder::Decoder& dec() const { return *dec_; }
  discretize::Codebook& codebook();
  const discretize::Codebook& codebook() const;

  nn::ParamStore& enc_params() { return enc_store_; }
  nn::ParamStore& dec_params() { return dec_store_; }
  nn::ParamStore& cb_params() { return cb_store_; }
  const nn::ParamStore& enc_params() const { return enc_store_; }
  const nn::ParamStore& dec_params() const { return dec_store_; }
  const nn::ParamStore& cb_params() const { return cb_store_; }

  // Code embedding tables used by the decoder: the codebook for vqvae,
  // the decoder's own tables otherwise.
  const std::vector<Var>& latent_tables() const;

  // Deterministic MAP encoding: posterior argmax for catvae/hardem,
  // nearest codebook row for vqvae. No dropout, no sampling.
  latent::CodeAssignment encode_map(const std::vector<int>& tokens) const;

  // Teacher-forced evaluation score under hard codes, no dropout.
  decoder::Decoder::Score score(const std::vector<int>& tokens,
                                const latent::CodeAssignment& codes) const;

  // exp(-sum log p / sum (T+1)) over MAP codes; the EOS slot of every
  // document counts toward the denominator.
  double corpus_perplexity(const std::vector<corpus::Document>& docs) const;

 private:
  ModelConfig cfg_;
  int vocab_size_ = 0;
  std::uint64_t vocab_hash_ = 0;
  nn::ParamStore enc_store_, dec_store_, cb_store_;
  std::unique_ptr<encoder::Encoder> enc_;
  std::unique_ptr<discretize::Codebook> cb_;
  std::unique_ptr<decoder::Decoder> dec_;
  std::vector<Var> vq_tables_;
};

// Binary checkpoint: magic "DLM1", a JSON header (config, vocabulary hash
// and size, tensor manifest), then row-major little-endian doubles for
// every parameter and EMA accumulator.
void save_checkpoint(const std::string& path, const Model& m);

// Refuses to load when the stored vocabulary hash or size disagrees with
// the supplied vocabulary.
Model load_checkpoint(const std::string& path, int vocab_size,
                      std::uint64_t vocab_hash);

}  // namespace dlr::model
