#pragma once

#include <Eigen/Dense>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dlr/latent.hpp"

namespace dlr::retrieval {

// Exact nearest-neighbor retrieval over global discrete codes. Distance is
// the number of codebooks whose symbols differ; every query is a full
// linear scan, so results are exact by construction.

struct Record {
  latent::CodeAssignment codes;
  std::string doc_id;
  int label = -1;  // -1 means unlabeled
};

struct Neighbor {
  std::size_t index = 0;  // position in the index
  int distance = 0;
};

struct KnnResult {
  std::vector<Neighbor> neighbors;  // sorted by (distance, insertion order)
  bool truncated = false;           // k exceeded the index size
};

class CodeIndex {
 public:
  CodeIndex(int M, int K);

  // Rejects non-global layouts and (M, K) mismatches.
  void add(const latent::CodeAssignment& codes, std::string doc_id,
           int label = -1);

  std::size_t size() const { return records_.size(); }
  const Record& record(std::size_t i) const { return records_[i]; }
  int M() const { return M_; }
  int K() const { return K_; }

  KnnResult knn(const latent::CodeAssignment& query, int k = 100) const;

  // All records within Hamming distance D, insertion order. 0 <= D <= M.
  std::vector<Neighbor> radius_query(const latent::CodeAssignment& query,
                                     int D) const;

  // Index file pair: codes in the packed codes format, labels and ids in a
  // text sidecar at <path>.labels with one "doc_id<TAB>label" line per
  // record.
  void save(const std::string& path) const;
  static CodeIndex load(const std::string& path);

 private:
  void check_query(const latent::CodeAssignment& q) const;

  int M_;
  int K_;
  std::vector<Record> records_;
  std::vector<int> symbols_;  // flat M_ entries per record, scan order
};

struct RetrievalReport {
  double precision = 0.0;       // mean over contributing queries
  std::size_t queries = 0;      // queries issued
  std::size_t empty = 0;        // queries with nothing retrieved (excluded)
  std::size_t skipped = 0;      // baseline docs with no known tokens
  std::vector<std::vector<Neighbor>> neighbor_lists;  // one per query
};

// Mean fraction of retrieved neighbors sharing each query's label, k
// nearest neighbors per query. Queries and records must be labeled.
RetrievalReport label_precision(const CodeIndex& index,
                                const std::vector<Record>& queries, int k);

// Same protocol with radius-D retrieval. Queries that retrieve nothing are
// excluded from the mean but reported in `empty`.
RetrievalReport label_precision_radius(const CodeIndex& index,
                                       const std::vector<Record>& queries,
                                       int D);

struct SweepRow {
  int D = 0;
  double precision = 0.0;        // over queries with non-empty results
  double mean_cluster_size = 0.0;  // retrieved count averaged over all queries
  std::size_t empty = 0;
};

// (distance bound, precision, neighborhood size) for every D in [0, M].
std::vector<SweepRow> radius_sweep(const CodeIndex& index,
                                   const std::vector<Record>& queries);

// Continuous baseline over externally trained word vectors in the text
// format "token v1 v2 ... vD" per line.
class WordVectors {
 public:
  static WordVectors load(const std::string& path);

  const Eigen::VectorXd* find(const std::string& token) const;
  int dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }

 private:
  int dim_ = 0;
  std::unordered_map<std::string, Eigen::VectorXd> vectors_;
};

enum class Metric { cosine, l2 };

const char* metric_name(Metric metric);
Metric parse_metric(const std::string& name);

struct TextDoc {
  std::vector<std::string> tokens;
  std::string doc_id;
  int label = -1;
};

// Unweighted mean of the in-vocabulary token vectors; empty when no token
// is covered.
std::optional<Eigen::VectorXd> doc_vector(const WordVectors& wv,
                                          const std::vector<std::string>& tokens);

// The discrete protocol run over averaged word vectors: embed both sides,
// rank index docs by the metric, score label precision at k. Documents
// without any in-vocabulary token are skipped with a warning line.
// Neighbor indices refer to positions in index_docs; the integer distance
// field is left at zero because the metric here is continuous.
RetrievalReport baseline_precision(const WordVectors& wv,
                                   const std::vector<TextDoc>& index_docs,
                                   const std::vector<TextDoc>& queries,
                                   Metric metric, int k = 100,
                                   std::ostream* warnings = nullptr);

}  // namespace dlr::retrieval
