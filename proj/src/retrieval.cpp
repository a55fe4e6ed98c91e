#include "dlr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dlr/errors.hpp"

namespace dlr::retrieval {

CodeIndex::CodeIndex(int M, int K) : M_(M), K_(K) {
  if (M < 1 || K < 2) throw ConfigError("index needs M >= 1 and K >= 2");
}

void CodeIndex::add(const latent::CodeAssignment& codes, std::string doc_id,
                    int label) {
  if (codes.spec.layout != latent::Layout::global)
    throw ConfigError("the retrieval index holds global codes only");
  if (codes.M() != M_ || codes.spec.K != K_)
    throw ConfigError("record (M, K) does not match the index header");
  if (codes.L() != 1)
    throw ConfigError("global codes must have exactly one column");
  for (int m = 0; m < M_; ++m) symbols_.push_back(codes.codes(m, 0));
  records_.push_back({codes, std::move(doc_id), label});
}

void CodeIndex::check_query(const latent::CodeAssignment& q) const {
  if (q.spec.layout != latent::Layout::global || q.M() != M_ ||
      q.spec.K != K_ || q.L() != 1)
    throw ConfigError("query does not match the index (M, K) header");
}

KnnResult CodeIndex::knn(const latent::CodeAssignment& query, int k) const {
  check_query(query);
  if (k < 0) throw ConfigError("k must be non-negative");

  KnnResult result;
  if (k == 0) return result;
  if (static_cast<std::size_t>(k) > records_.size()) {
    result.truncated = true;
    k = static_cast<int>(records_.size());
  }

  std::vector<Neighbor> all(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    int d = 0;
    const int* rec = symbols_.data() + i * static_cast<std::size_t>(M_);
    for (int m = 0; m < M_; ++m) d += rec[m] != query.codes(m, 0);
    all[i] = {i, d};
  }
  // stable: equal distances keep insertion order
  std::stable_sort(all.begin(), all.end(),
                   [](const Neighbor& a, const Neighbor& b) {
                     return a.distance < b.distance;
                   });
  all.resize(static_cast<std::size_t>(k));
  result.neighbors = std::move(all);
  return result;
}

std::vector<Neighbor> CodeIndex::radius_query(
    const latent::CodeAssignment& query, int D) const {
  check_query(query);
  if (D < 0 || D > M_)
    throw ConfigError("radius must lie in [0, M]");
  std::vector<Neighbor> out;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    int d = 0;
    const int* rec = symbols_.data() + i * static_cast<std::size_t>(M_);
    for (int m = 0; m < M_; ++m) d += rec[m] != query.codes(m, 0);
    if (d <= D) out.push_back({i, d});
  }
  return out;
}

void CodeIndex::save(const std::string& path) const {
  latent::LatentSpec spec;
  spec.layout = latent::Layout::global;
  spec.M = M_;
  spec.K = K_;
  spec.d_model = M_;  // placeholder; the codes file stores only (M, K)
  std::vector<latent::CodeAssignment> codes;
  codes.reserve(records_.size());
  for (const auto& r : records_) codes.push_back(r.codes);
  latent::write_codes_file(path, spec, codes);

  std::ofstream side(path + ".labels");
  if (!side) throw MissingArtifact("cannot write label sidecar: " + path);
  for (const auto& r : records_) side << r.doc_id << "\t" << r.label << "\n";
}

CodeIndex CodeIndex::load(const std::string& path) {
  auto codes = latent::read_codes_file(path);
  if (codes.empty()) throw ParseError("index file holds no records: " + path);

  std::ifstream side(path + ".labels");
  if (!side)
    throw MissingArtifact("index label sidecar is missing: " + path +
                          ".labels");
  std::vector<std::pair<std::string, int>> labels;
  std::string line;
  while (std::getline(side, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError("label sidecar line lacks a tab separator");
    labels.emplace_back(line.substr(0, tab),
                        std::stoi(line.substr(tab + 1)));
  }
  if (labels.size() != codes.size())
    throw ParseError("label sidecar count does not match the codes file");

  CodeIndex index(static_cast<int>(codes[0].M()), codes[0].spec.K);
  for (std::size_t i = 0; i < codes.size(); ++i)
    index.add(codes[i], labels[i].first, labels[i].second);
  return index;
}

namespace {

double list_precision(const CodeIndex& index,
                      const std::vector<Neighbor>& neighbors, int label) {
  long hits = 0;
  for (const auto& n : neighbors)
    if (index.record(n.index).label == label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(neighbors.size());
}

void require_labeled(const CodeIndex& index,
                     const std::vector<Record>& queries) {
  for (std::size_t i = 0; i < index.size(); ++i)
    if (index.record(i).label < 0)
      throw ConfigError("label precision needs a fully labeled index");
  for (const auto& q : queries)
    if (q.label < 0) throw ConfigError("every query needs a label");
}

}  // namespace

RetrievalReport label_precision(const CodeIndex& index,
                                const std::vector<Record>& queries, int k) {
  if (queries.empty()) throw ConfigError("no retrieval queries given");
  require_labeled(index, queries);
  RetrievalReport report;
  report.queries = queries.size();
  double sum = 0.0;
  std::size_t counted = 0;
  for (const auto& q : queries) {
    auto res = index.knn(q.codes, k);
    if (res.neighbors.empty()) {
      ++report.empty;
    } else {
      sum += list_precision(index, res.neighbors, q.label);
      ++counted;
    }
    report.neighbor_lists.push_back(std::move(res.neighbors));
  }
  report.precision = counted == 0 ? 0.0 : sum / static_cast<double>(counted);
  return report;
}

RetrievalReport label_precision_radius(const CodeIndex& index,
                                       const std::vector<Record>& queries,
                                       int D) {
  if (queries.empty()) throw ConfigError("no retrieval queries given");
  require_labeled(index, queries);
  RetrievalReport report;
  report.queries = queries.size();
  double sum = 0.0;
  std::size_t counted = 0;
  for (const auto& q : queries) {
    auto neighbors = index.radius_query(q.codes, D);
    if (neighbors.empty()) {
      ++report.empty;
    } else {
      sum += list_precision(index, neighbors, q.label);
      ++counted;
    }
    report.neighbor_lists.push_back(std::move(neighbors));
  }
  report.precision = counted == 0 ? 0.0 : sum / static_cast<double>(counted);
  return report;
}

std::vector<SweepRow> radius_sweep(const CodeIndex& index,
                                   const std::vector<Record>& queries) {
  std::vector<SweepRow> rows;
  for (int D = 0; D <= index.M(); ++D) {
    auto report = label_precision_radius(index, queries, D);
    SweepRow row;
    row.D = D;
    row.precision = report.precision;
    row.empty = report.empty;
    std::size_t total = 0;
    for (const auto& list : report.neighbor_lists) total += list.size();
    row.mean_cluster_size =
        static_cast<double>(total) / static_cast<double>(queries.size());
    rows.push_back(row);
  }
  return rows;
}

WordVectors WordVectors::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifact("cannot open word-vector file: " + path);
  WordVectors wv;
  std::string line;
  long line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string token;
    in >> token;
    std::vector<double> vals;
    double v;
    while (in >> v) vals.push_back(v);
    if (token.empty() || vals.empty())
      throw ParseError("word-vector line " + std::to_string(line_no) +
                       " is malformed");
    if (wv.dim_ == 0)
      wv.dim_ = static_cast<int>(vals.size());
    else if (static_cast<int>(vals.size()) != wv.dim_)
      throw ParseError("word-vector line " + std::to_string(line_no) +
                       " has " + std::to_string(vals.size()) +
                       " values, expected " + std::to_string(wv.dim_));
    wv.vectors_[token] =
        Eigen::Map<Eigen::VectorXd>(vals.data(),
                                    static_cast<long>(vals.size()));
  }
  if (wv.vectors_.empty())
    throw ParseError("word-vector file is empty: " + path);
  return wv;
}

const Eigen::VectorXd* WordVectors::find(const std::string& token) const {
  auto it = vectors_.find(token);
  return it == vectors_.end() ? nullptr : &it->second;
}

const char* metric_name(Metric metric) {
  return metric == Metric::cosine ? "cosine" : "l2";
}

Metric parse_metric(const std::string& name) {
  if (name == "cosine") return Metric::cosine;
  if (name == "l2") return Metric::l2;
  throw ConfigError("unknown metric: " + name);
}

std::optional<Eigen::VectorXd> doc_vector(
    const WordVectors& wv, const std::vector<std::string>& tokens) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(wv.dim());
  long hits = 0;
  for (const auto& t : tokens) {
    if (const Eigen::VectorXd* v = wv.find(t)) {
      sum += *v;
      ++hits;
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

RetrievalReport baseline_precision(const WordVectors& wv,
                                   const std::vector<TextDoc>& index_docs,
                                   const std::vector<TextDoc>& queries,
                                   Metric metric, int k,
                                   std::ostream* warnings) {
  if (index_docs.empty() || queries.empty())
    throw ConfigError("baseline retrieval needs index docs and queries");
  if (k <= 0) throw ConfigError("baseline retrieval needs k >= 1");

  RetrievalReport report;

  std::vector<Eigen::VectorXd> vecs;
  std::vector<int> labels;
  std::vector<std::size_t> original;  // positions in index_docs
  for (std::size_t d = 0; d < index_docs.size(); ++d) {
    auto v = doc_vector(wv, index_docs[d].tokens);
    if (!v) {
      ++report.skipped;
      if (warnings)
        *warnings << "skipping document " << index_docs[d].doc_id
                  << ": no token has a word vector\n";
      continue;
    }
    vecs.push_back(std::move(*v));
    labels.push_back(index_docs[d].label);
    original.push_back(d);
  }
  if (vecs.empty())
    throw ConfigError("no index document has any known token");

  auto distance = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (metric == Metric::l2) return (a - b).norm();
    const double denom = a.norm() * b.norm();
    if (denom == 0.0) return 1.0;  // maximal cosine distance for zero vectors
    return 1.0 - a.dot(b) / denom;
  };

  double sum = 0.0;
  std::size_t counted = 0;
  report.queries = queries.size();
  for (const auto& q : queries) {
    auto qv = doc_vector(wv, q.tokens);
    if (!qv) {
      ++report.skipped;
      if (warnings)
        *warnings << "skipping query " << q.doc_id
                  << ": no token has a word vector\n";
      report.neighbor_lists.emplace_back();
      continue;
    }
    std::vector<std::pair<double, std::size_t>> scored(vecs.size());
    for (std::size_t i = 0; i < vecs.size(); ++i)
      scored[i] = {distance(*qv, vecs[i]), i};
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) {
                       return a.first < b.first;
                     });
    const std::size_t take =
        std::min(scored.size(), static_cast<std::size_t>(k));
    std::vector<Neighbor> list;
    long hits = 0;
    for (std::size_t i = 0; i < take; ++i) {
      list.push_back({original[scored[i].second], 0});
      if (labels[scored[i].second] == q.label) ++hits;
    }
    sum += static_cast<double>(hits) / static_cast<double>(take);
    ++counted;
    report.neighbor_lists.push_back(std::move(list));
  }
  if (counted == 0) throw ConfigError("every query was skipped");
  report.precision = sum / static_cast<double>(counted);
  return report;
}

}  // namespace dlr::retrieval
