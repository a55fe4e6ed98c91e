#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dlr/corpus.hpp"
#include "dlr/latent.hpp"
#include "dlr/model.hpp"
#include "dlr/nn/layers.hpp"
#include "dlr/nn/params.hpp"
#include "dlr/nn/tensor.hpp"
#include "dlr/rng.hpp"

namespace dlr::transfer {

// Downstream classification over frozen discrete codes. The encoder is
// never touched: documents are mapped to codes once, then a small task
// head (embeddings, optional transformer pool, linear layer) is trained
// on labeled subsets.

enum class EmbedMode { reembed, pretrained };
enum class Pool { mean, transformer_mean };

const char* embed_mode_name(EmbedMode mode);
EmbedMode parse_embed_mode(const std::string& name);
const char* pool_name(Pool pool);
Pool parse_pool(const std::string& name);

struct ClassifierConfig {
  EmbedMode embed_mode = EmbedMode::reembed;
  Pool pool = Pool::mean;
  int classes = 2;
  double lr = 0.0003;
  // Width of the fresh task embeddings in reembed mode. Zero derives the
  // pretraining geometry: d_model / M per subvector (local), d_model
  // (global). Ignored in pretrained mode, where the checkpoint's tables
  // fix the width.
  int embed_dim = 0;
  int max_epochs = 50;
  int patience = 10;
  int batch_size = 32;
  std::uint64_t seed = 17;

  void validate() const;
};

struct Example {
  const latent::CodeAssignment* codes = nullptr;
  int label = -1;
};

// Deterministic MAP encoding of every document under a frozen model.
std::vector<latent::CodeAssignment> encode_corpus(
    const model::Model& m, const std::vector<corpus::Document>& docs);

// Task head over frozen codes. In pretrained mode the embedding tables are
// captured as constants (values copied from the checkpoint's latent tables)
// and receive no gradient; in reembed mode fresh tables are trained from
// scratch. Local layouts concatenate the M subvector embeddings per token;
// global layouts stack the M embedded vectors as a short sequence. The
// pooled vector feeds a linear layer and softmax.
class Classifier {
 public:
  // pretrained_tables must hold M matrices of K rows each in pretrained
  // mode and must be empty in reembed mode.
  Classifier(const latent::LatentSpec& spec, const ClassifierConfig& cfg,
             const std::vector<nn::Mat>& pretrained_tables, Rng& rng);

  nn::Var logits(const latent::CodeAssignment& codes);

  // Softmax class distribution, computed without touching gradients.
  nn::Mat class_distribution(const latent::CodeAssignment& codes);

  int predict(const latent::CodeAssignment& codes);

  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  int feature_width() const { return feat_width_; }
  const ClassifierConfig& config() const { return cfg_; }

 private:
  nn::Var embed(const latent::CodeAssignment& codes) const;

  latent::LatentSpec spec_;
  ClassifierConfig cfg_;
  nn::ParamStore store_;
  std::vector<nn::Var> tables_;  // task-owned or frozen constants
  bool frozen_tables_ = false;
  int feat_width_ = 0;
  nn::EncoderBlock pool_block_;  // transformer_mean only
  nn::Var w_out_;
  nn::Var b_out_;
};

struct TrainResult {
  double dev_accuracy = 0.0;
  int epochs_run = 0;
  bool early_stopped = false;
};

double accuracy(Classifier& clf, const std::vector<Example>& examples);

// Minimizes cross-entropy with Adam at the configured learning rate.
// Evaluates dev accuracy once per epoch, keeps the best snapshot, and
// stops after `patience` epochs without improvement. A training subset
// smaller than one batch shrinks the batch to the subset size.
TrainResult train_classifier(Classifier& clf, std::vector<Example> train,
                             const std::vector<Example>& dev);

struct EvalCell {
  std::string mode;
  std::string pool;
  int n = 0;  // labeled examples used; 0 means the full training pool
  std::vector<double> accuracies;  // one per seed
  double mean = 0.0;
  double sd = 0.0;
};

struct EvalReport {
  std::vector<EvalCell> cells;

  std::string to_text() const;   // aligned table, rows = n, columns = configs
  nlohmann::json to_json() const;
};

// Full evaluation grid: for every config and every subset size, train on
// 5 seeded subsamples of the labeled pool (early-stopped on dev) and
// report test accuracy mean and standard deviation. Subset size 0 uses
// the whole pool.
EvalReport evaluate_matrix(const model::Model& m,
                           const std::vector<corpus::Document>& train_pool,
                           const std::vector<corpus::Document>& dev,
                           const std::vector<corpus::Document>& test,
                           const std::vector<int>& subset_sizes,
                           const std::vector<ClassifierConfig>& configs);

}  // namespace dlr::transfer
