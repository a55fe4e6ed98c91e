#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dlr/rng.hpp"

namespace dlr::corpus {

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kBos = 2;
inline constexpr int kEos = 3;
inline constexpr int kNumSpecials = 4;

inline const char* special_token(int id) {
  static const char* names[] = {"<pad>", "<unk>", "<bos>", "<eos>"};
  return names[id];
}

// Normalizes and splits raw text into tokens. Rule list, applied in order:
//   1. curly single quotes (U+2018/U+2019) become ASCII apostrophes
//   2. lowercase; any character outside a-z 0-9 ( ) , ! ? ' ` becomes a space
//      (multi-byte UTF-8 sequences fall under this rule byte by byte)
//   3. clitics 's 've n't 're 'd 'll are split off as their own tokens
//   4. ( ) , ! ? are split into their own tokens
//   5. whitespace runs collapse; leading/trailing whitespace is dropped
// Input that is empty after cleaning yields a single <unk> token and a
// warning on stderr.
std::vector<std::string> clean_and_tokenize(const std::string& raw);

// Token <-> id map over the most frequent corpus types, ids 0-3 reserved
// for the special symbols above. Immutable once built.
class Vocabulary {
 public:
  // Ranks tokens by frequency, ties broken lexicographically, and keeps at
  // most max_size non-special types. Literal special-token strings in the
  // input are ignored so the reserved ids stay unique.
  static Vocabulary build(const std::vector<std::vector<std::string>>& docs,
                          size_t max_size = 30000);

  int id(const std::string& token) const;  // out-of-vocabulary -> kUnk
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }
  bool contains(const std::string& token) const {
    return token_to_id_.count(token) > 0;
  }

  // Order-sensitive content hash; checkpoints refuse to load when it
  // differs from the vocabulary they were trained with.
  uint64_t hash() const;

  // One non-special token per line, rank order.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  Vocabulary();
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

struct Document {
  std::vector<int> tokens;  // 1 <= size <= max_len, every id < vocab size
  std::optional<int> label;
  std::string raw_id;
};

Document encode_document(const std::string& raw, const Vocabulary& vocab,
                         std::optional<int> label = std::nullopt,
                         std::string raw_id = "", size_t max_len = 400);

struct RawDoc {
  std::string text;
  std::optional<int> label;
  std::string raw_id;
};

struct LoadedCorpus {
  std::vector<RawDoc> docs;
  // Class names in first-appearance order when labels are strings; empty
  // when labels are integers or absent.
  std::vector<std::string> label_names;
};

// JSON-lines reader, one {"text": ..., "label": ...} object per line.
// "label" and "id" are optional; string labels are mapped to dense ints in
// first-appearance order.
LoadedCorpus load_jsonl(const std::string& path);

struct SplitPlan {
  std::vector<Document> train;
  std::vector<Document> dev;
  std::vector<Document> test;
  // subset size n -> one sorted index list (into train) per seed. The full
  // training set appears under n = train.size() when requested.
  std::map<size_t, std::vector<std::vector<size_t>>> labeled_subsets;
  std::vector<uint64_t> seeds;

  void save_manifest(const std::string& path) const;
};

// Samples dev_n development documents out of the training pool (they are
// removed from train so the two are disjoint), then draws the labeled
// subsets from the remaining train set uniformly without replacement, one
// draw per (size, seed).
SplitPlan make_splits(std::vector<Document> train_pool,
                      std::vector<Document> test, size_t dev_n,
                      const std::vector<size_t>& subset_sizes,
                      const std::vector<uint64_t>& seeds,
                      bool include_full = true, uint64_t dev_seed = 13);

}  // namespace dlr::corpus
