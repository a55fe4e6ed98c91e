#include "dlr/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "dlr/errors.hpp"

namespace dlr::corpus {

namespace {

// Non-overlapping left-to-right replacement; the cursor skips past each
// replacement so patterns contained in their own replacement terminate.
void replace_all(std::string& s, std::string_view pat, std::string_view rep) {
  size_t pos = 0;
  while ((pos = s.find(pat, pos)) != std::string::npos) {
    s.replace(pos, pat.size(), rep);
    pos += rep.size();
  }
}

bool kept_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '(' ||
         c == ')' || c == ',' || c == '!' || c == '?' || c == '\'' ||
         c == '`';
}

}  // namespace

std::vector<std::string> clean_and_tokenize(const std::string& raw) {
  std::string s = raw;
  replace_all(s, "\xe2\x80\x98", "'");
  replace_all(s, "\xe2\x80\x99", "'");

  std::string filtered;
  filtered.reserve(s.size());
  for (unsigned char c : s) {
    char lc = static_cast<char>(std::tolower(c));
    filtered.push_back(kept_char(lc) ? lc : ' ');
  }

  for (const char* clitic : {"'s", "'ve", "n't", "'re", "'d", "'ll"}) {
    std::string rep = std::string(" ") + clitic + " ";
    replace_all(filtered, clitic, rep);
  }
  for (const char* punct : {"(", ")", ",", "!", "?"}) {
    std::string rep = std::string(" ") + punct + " ";
    replace_all(filtered, punct, rep);
  }

  std::vector<std::string> tokens;
  std::istringstream in(filtered);
  std::string tok;
  while (in >> tok) tokens.push_back(tok);

  if (tokens.empty()) {
    std::cerr << "warning: document is empty after cleaning, emitting "
              << special_token(kUnk) << "\n";
    tokens.push_back(special_token(kUnk));
  }
  return tokens;
}

Vocabulary::Vocabulary() {
  for (int i = 0; i < kNumSpecials; ++i) {
    id_to_token_.push_back(special_token(i));
    token_to_id_[special_token(i)] = i;
  }
}

Vocabulary Vocabulary::build(
    const std::vector<std::vector<std::string>>& docs, size_t max_size) {
  std::unordered_map<std::string, int64_t> counts;
  for (const auto& doc : docs)
    for (const auto& tok : doc) counts[tok]++;
  for (int i = 0; i < kNumSpecials; ++i) counts.erase(special_token(i));

  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(),
                                                      counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > max_size) ranked.resize(max_size);

  Vocabulary v;
  for (const auto& [tok, cnt] : ranked) {
    v.token_to_id_[tok] = static_cast<int>(v.id_to_token_.size());
    v.id_to_token_.push_back(tok);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw std::runtime_error("vocabulary id out of range: " +
                             std::to_string(id));
  return id_to_token_[static_cast<size_t>(id)];
}

uint64_t Vocabulary::hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& tok : id_to_token_) {
    h = fnv1a64(tok, h);
    h = fnv1a64("\n", h);
  }
  return h;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifact("cannot write vocabulary file: " + path);
  for (size_t i = kNumSpecials; i < id_to_token_.size(); ++i)
    out << id_to_token_[i] << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open vocabulary file: " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (v.token_to_id_.count(line))
      throw ParseError("duplicate token in vocabulary file: " + line);
    v.token_to_id_[line] = static_cast<int>(v.id_to_token_.size());
    v.id_to_token_.push_back(line);
  }
  return v;
}

Document encode_document(const std::string& raw, const Vocabulary& vocab,
                         std::optional<int> label, std::string raw_id,
                         size_t max_len) {
  std::vector<std::string> toks = clean_and_tokenize(raw);
  if (toks.size() > max_len) toks.resize(max_len);
  Document doc;
  doc.tokens.reserve(toks.size());
  for (const auto& t : toks) doc.tokens.push_back(vocab.id(t));
  doc.label = label;
  doc.raw_id = std::move(raw_id);
  return doc;
}

LoadedCorpus load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open corpus file: " + path);
  std::string base = std::filesystem::path(path).filename().string();

  LoadedCorpus out;
  std::unordered_map<std::string, int> label_ids;
  bool saw_int_label = false, saw_str_label = false;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": expected an object with a \"text\" string");
    RawDoc doc;
    doc.text = j["text"].get<std::string>();
    if (j.contains("id"))
      doc.raw_id = j["id"].is_string() ? j["id"].get<std::string>()
                                       : j["id"].dump();
    else
      doc.raw_id = base + ":" + std::to_string(lineno);
    if (j.contains("label") && !j["label"].is_null()) {
      const auto& lab = j["label"];
      if (lab.is_number_integer()) {
        saw_int_label = true;
        doc.label = lab.get<int>();
      } else if (lab.is_string()) {
        saw_str_label = true;
        auto [it, inserted] = label_ids.try_emplace(
            lab.get<std::string>(), static_cast<int>(out.label_names.size()));
        if (inserted) out.label_names.push_back(lab.get<std::string>());
        doc.label = it->second;
      } else {
        throw ParseError(path + ":" + std::to_string(lineno) +
                         ": label must be an integer or a string");
      }
      if (saw_int_label && saw_str_label)
        throw ParseError(path + ": mixed integer and string labels");
    }
    out.docs.push_back(std::move(doc));
  }
  return out;
}

void SplitPlan::save_manifest(const std::string& path) const {
  nlohmann::json j;
  auto ids = [](const std::vector<Document>& docs) {
    std::vector<std::string> out;
    out.reserve(docs.size());
    for (const auto& d : docs) out.push_back(d.raw_id);
    return out;
  };
  j["train"] = ids(train);
  j["dev"] = ids(dev);
  j["test"] = ids(test);
  j["seeds"] = seeds;
  nlohmann::json subsets = nlohmann::json::object();
  for (const auto& [n, per_seed] : labeled_subsets) {
    nlohmann::json by_seed = nlohmann::json::object();
    for (size_t s = 0; s < per_seed.size(); ++s) {
      std::vector<std::string> raw_ids;
      raw_ids.reserve(per_seed[s].size());
      for (size_t idx : per_seed[s]) raw_ids.push_back(train[idx].raw_id);
      by_seed[std::to_string(seeds[s])] = raw_ids;
    }
    subsets[std::to_string(n)] = by_seed;
  }
  j["labeled_subsets"] = subsets;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifact("cannot write split manifest: " + path);
  out << j.dump(2) << "\n";
}

SplitPlan make_splits(std::vector<Document> train_pool,
                      std::vector<Document> test, size_t dev_n,
                      const std::vector<size_t>& subset_sizes,
                      const std::vector<uint64_t>& seeds, bool include_full,
                      uint64_t dev_seed) {
  if (seeds.empty()) throw ConfigError("make_splits needs at least one seed");
  for (size_t i = 0; i < seeds.size(); ++i)
    for (size_t k = i + 1; k < seeds.size(); ++k)
      if (seeds[i] == seeds[k])
        throw ConfigError("subset seeds must be distinct");
  if (dev_n > train_pool.size())
    throw ConfigError("dev size " + std::to_string(dev_n) +
                      " exceeds training pool size " +
                      std::to_string(train_pool.size()));

  SplitPlan plan;
  plan.seeds = seeds;
  plan.test = std::move(test);

  Rng dev_rng = make_rng(dev_seed, "dev");
  std::vector<size_t> dev_idx =
      dev_rng.sample_without_replacement(train_pool.size(), dev_n);
  std::vector<bool> in_dev(train_pool.size(), false);
  for (size_t i : dev_idx) in_dev[i] = true;
  for (size_t i = 0; i < train_pool.size(); ++i) {
    if (in_dev[i])
      plan.dev.push_back(std::move(train_pool[i]));
    else
      plan.train.push_back(std::move(train_pool[i]));
  }

  std::vector<size_t> sizes = subset_sizes;
  if (include_full) sizes.push_back(plan.train.size());
  for (size_t n : sizes) {
    if (n > plan.train.size())
      throw ConfigError("labeled subset size " + std::to_string(n) +
                        " exceeds train size " +
                        std::to_string(plan.train.size()));
    std::vector<std::vector<size_t>> per_seed;
    for (uint64_t seed : seeds) {
      Rng rng = make_rng(seed, "subset-" + std::to_string(n));
      std::vector<size_t> idx =
          rng.sample_without_replacement(plan.train.size(), n);
      std::sort(idx.begin(), idx.end());
      per_seed.push_back(std::move(idx));
    }
    plan.labeled_subsets[n] = std::move(per_seed);
  }
  return plan;
}

}  // namespace dlr::corpus
