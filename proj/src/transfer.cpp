#include "dlr/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "dlr/errors.hpp"
#include "dlr/nn/adam.hpp"

namespace dlr::transfer {

using nn::Mat;
using nn::Var;

const char* embed_mode_name(EmbedMode mode) {
  return mode == EmbedMode::reembed ? "reembed" : "pretrained";
}

EmbedMode parse_embed_mode(const std::string& name) {
  if (name == "reembed") return EmbedMode::reembed;
  if (name == "pretrained") return EmbedMode::pretrained;
  throw ConfigError("unknown embed mode: " + name);
}

const char* pool_name(Pool pool) {
  return pool == Pool::mean ? "mean" : "transformer_mean";
}

Pool parse_pool(const std::string& name) {
  if (name == "mean") return Pool::mean;
  if (name == "transformer_mean") return Pool::transformer_mean;
  throw ConfigError("unknown pool: " + name);
}

void ClassifierConfig::validate() const {
  if (classes < 2) throw ConfigError("classifier needs at least 2 classes");
  if (lr <= 0.0) throw ConfigError("classifier lr must be positive");
  if (embed_dim < 0) throw ConfigError("embed_dim must be non-negative");
  if (max_epochs <= 0 || patience <= 0 || batch_size <= 0)
    throw ConfigError("classifier schedule fields must be positive");
}

std::vector<latent::CodeAssignment> encode_corpus(
    const model::Model& m, const std::vector<corpus::Document>& docs) {
  std::vector<latent::CodeAssignment> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(m.encode_map(d.tokens));
  return out;
}

namespace {

int heads_for(int width) {
  for (int h : {4, 2})
    if (width % h == 0) return h;
  return 1;
}

}  // namespace

Classifier::Classifier(const latent::LatentSpec& spec,
                       const ClassifierConfig& cfg,
                       const std::vector<Mat>& pretrained_tables, Rng& rng)
    : spec_(spec), cfg_(cfg) {
  spec_.validate();
  cfg_.validate();

  int width = 0;
  if (cfg.embed_mode == EmbedMode::pretrained) {
    if (pretrained_tables.size() != static_cast<size_t>(spec.M))
      throw ConfigError("pretrained mode needs one embedding table per "
                        "codebook");
    for (const auto& t : pretrained_tables) {
      if (t.rows() != spec.K)
        throw ConfigError("pretrained table row count does not match K");
      if (width == 0)
        width = static_cast<int>(t.cols());
      else if (t.cols() != width)
        throw ConfigError("pretrained tables disagree on width");
      tables_.push_back(Var::constant(t));
    }
    frozen_tables_ = true;
  } else {
    if (!pretrained_tables.empty())
      throw ConfigError("reembed mode does not take pretrained tables");
    width = cfg.embed_dim > 0 ? cfg.embed_dim : spec.code_dim();
    for (int m = 0; m < spec.M; ++m)
      tables_.push_back(store_.add(
          "task.e" + std::to_string(m),
          nn::normal_init(rng, spec.K, width, 0.02)));
  }

  feat_width_ = spec.layout == latent::Layout::local ? spec.M * width : width;

  if (cfg.pool == Pool::transformer_mean)
    pool_block_ = nn::EncoderBlock::make(store_, "task.pool", feat_width_,
                                         4 * feat_width_,
                                         heads_for(feat_width_), rng);

  w_out_ = store_.add("task.w", nn::xavier_init(rng, feat_width_, cfg.classes));
  b_out_ = store_.add("task.b", Mat::Zero(1, cfg.classes));
}

Var Classifier::embed(const latent::CodeAssignment& codes) const {
  if (codes.spec.layout != spec_.layout || codes.M() != spec_.M)
    throw ConfigError("code assignment does not match the classifier spec");
  std::vector<Var> parts;
  parts.reserve(tables_.size());
  for (int m = 0; m < spec_.M; ++m) {
    std::vector<int> idx(static_cast<size_t>(codes.L()));
    for (long l = 0; l < codes.L(); ++l)
      idx[static_cast<size_t>(l)] = codes.codes(m, l);
    parts.push_back(nn::rows(tables_[static_cast<size_t>(m)], idx));
  }
  if (parts.size() == 1) return parts[0];
  return spec_.layout == latent::Layout::local ? nn::concat_cols(parts)
                                               : nn::concat_rows(parts);
}

Var Classifier::logits(const latent::CodeAssignment& codes) {
  Var feats = embed(codes);
  if (cfg_.pool == Pool::transformer_mean)
    feats = pool_block_.apply(feats, Mat(), 0.0, nullptr);
  const long rows = feats.value().rows();
  Mat w = Mat::Constant(1, rows, 1.0 / static_cast<double>(rows));
  Var pooled = nn::matmul(Var::constant(w), feats);
  return nn::add_rowvec(nn::matmul(pooled, w_out_), b_out_);
}

Mat Classifier::class_distribution(const latent::CodeAssignment& codes) {
  nn::NoGradGuard guard;
  return nn::softmax_rows(logits(codes)).value();
}

int Classifier::predict(const latent::CodeAssignment& codes) {
  Mat p = class_distribution(codes);
  Eigen::Index best = 0;
  p.row(0).maxCoeff(&best);
  return static_cast<int>(best);
}

double accuracy(Classifier& clf, const std::vector<Example>& examples) {
  if (examples.empty()) throw ConfigError("accuracy over an empty set");
  long hits = 0;
  for (const auto& ex : examples)
    if (clf.predict(*ex.codes) == ex.label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

TrainResult train_classifier(Classifier& clf, std::vector<Example> train,
                             const std::vector<Example>& dev) {
  const auto& cfg = clf.config();
  if (train.empty()) throw ConfigError("classifier training set is empty");
  for (const auto& ex : train)
    if (ex.label < 0 || ex.label >= cfg.classes)
      throw ConfigError("training label out of range");

  const int batch =
      std::min<int>(cfg.batch_size, static_cast<int>(train.size()));
  nn::AdamOptions opts;
  opts.lr = cfg.lr;
  nn::Adam opt(clf.params().vars(), opts);
  Rng order = make_rng(cfg.seed, "classifier-order");

  TrainResult result;
  double best = -1.0;
  std::vector<Mat> best_snap;
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    order.shuffle(train);
    for (size_t start = 0; start < train.size();
         start += static_cast<size_t>(batch)) {
      const size_t end =
          std::min(train.size(), start + static_cast<size_t>(batch));
      clf.params().zero_grads();
      for (size_t i = start; i < end; ++i) {
        Var lp = nn::log_softmax_rows(clf.logits(*train[i].codes));
        Var nll = nn::scale(nn::pick(lp, {{0, train[i].label}}),
                            -1.0 / static_cast<double>(end - start));
        nll.backward();
      }
      opt.step();
    }

    const double acc = accuracy(clf, dev);
    result.epochs_run = epoch;
    if (acc > best) {
      best = acc;
      best_snap = clf.params().snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }

  clf.params().restore(best_snap);
  result.dev_accuracy = best;
  return result;
}

namespace {

std::vector<Example> label_examples(
    const std::vector<latent::CodeAssignment>& codes,
    const std::vector<corpus::Document>& docs) {
  std::vector<Example> out;
  out.reserve(docs.size());
  for (size_t i = 0; i < docs.size(); ++i) {
    if (!docs[i].label)
      throw ConfigError("document " + docs[i].raw_id + " has no label");
    out.push_back({&codes[i], *docs[i].label});
  }
  return out;
}

}  // namespace

EvalReport evaluate_matrix(const model::Model& m,
                           const std::vector<corpus::Document>& train_pool,
                           const std::vector<corpus::Document>& dev,
                           const std::vector<corpus::Document>& test,
                           const std::vector<int>& subset_sizes,
                           const std::vector<ClassifierConfig>& configs) {
  if (train_pool.empty() || dev.empty() || test.empty())
    throw ConfigError("evaluation needs non-empty train, dev, and test sets");

  const auto train_codes = encode_corpus(m, train_pool);
  const auto dev_codes = encode_corpus(m, dev);
  const auto test_codes = encode_corpus(m, test);
  const auto train_all = label_examples(train_codes, train_pool);
  const auto dev_ex = label_examples(dev_codes, dev);
  const auto test_ex = label_examples(test_codes, test);

  std::vector<Mat> pretrained;
  for (const auto& t : m.latent_tables()) pretrained.push_back(t.value());

  EvalReport report;
  for (const auto& cfg : configs) {
    for (int n : subset_sizes) {
      if (n > static_cast<int>(train_all.size()))
        throw ConfigError("subset size exceeds the labeled pool");
      EvalCell cell;
      cell.mode = embed_mode_name(cfg.embed_mode);
      cell.pool = pool_name(cfg.pool);
      cell.n = n;
      for (int s = 0; s < 5; ++s) {
        std::vector<Example> subset;
        if (n == 0) {
          subset = train_all;
        } else {
          Rng pick = make_rng(cfg.seed + static_cast<std::uint64_t>(s),
                              "subset");
          for (size_t i :
               pick.sample_without_replacement(train_all.size(),
                                               static_cast<size_t>(n)))
            subset.push_back(train_all[i]);
        }
        auto run_cfg = cfg;
        run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(s);
        Rng init = make_rng(run_cfg.seed, "classifier-init");
        Classifier clf(m.config().spec, run_cfg,
                       cfg.embed_mode == EmbedMode::pretrained
                           ? pretrained
                           : std::vector<Mat>{},
                       init);
        train_classifier(clf, subset, dev_ex);
        cell.accuracies.push_back(accuracy(clf, test_ex));
      }
      double mean = 0.0;
      for (double a : cell.accuracies) mean += a;
      mean /= static_cast<double>(cell.accuracies.size());
      double ss = 0.0;
      for (double a : cell.accuracies) ss += (a - mean) * (a - mean);
      cell.mean = mean;
      cell.sd = std::sqrt(ss / static_cast<double>(cell.accuracies.size() - 1));
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

std::string EvalReport::to_text() const {
  std::vector<std::string> col_keys;
  std::vector<int> row_keys;
  for (const auto& c : cells) {
    std::string key = c.mode + "/" + c.pool;
    if (std::find(col_keys.begin(), col_keys.end(), key) == col_keys.end())
      col_keys.push_back(key);
    if (std::find(row_keys.begin(), row_keys.end(), c.n) == row_keys.end())
      row_keys.push_back(c.n);
  }
  std::ostringstream out;
  out << std::left << std::setw(8) << "n";
  for (const auto& k : col_keys) out << std::setw(26) << k;
  out << "\n";
  for (int n : row_keys) {
    out << std::left << std::setw(8) << (n == 0 ? std::string("full")
                                                : std::to_string(n));
    for (const auto& k : col_keys) {
      for (const auto& c : cells) {
        if (c.n != n || c.mode + "/" + c.pool != k) continue;
        std::ostringstream cellt;
        cellt << std::fixed << std::setprecision(1) << 100.0 * c.mean << " ("
              << std::setprecision(1) << 100.0 * c.sd << ")";
        out << std::setw(26) << cellt.str();
      }
    }
    out << "\n";
  }
  return out.str();
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : cells) {
    rows.push_back({{"mode", c.mode},
                    {"pool", c.pool},
                    {"n", c.n},
                    {"accuracies", c.accuracies},
                    {"mean", c.mean},
                    {"sd", c.sd}});
  }
  return {{"cells", rows}};
}

}  // namespace dlr::transfer
