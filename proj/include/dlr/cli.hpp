#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dlr/corpus.hpp"

namespace dlr::cli {

// Pipeline plumbing shared by the command-line driver: run manifests with
// content-hashed inputs and outputs, a per-run-directory lock file, and the
// tokenized-document interchange format the stages pass to each other.

// 64-bit content hash of a file's bytes. Missing file -> MissingArtifact.
std::uint64_t file_hash(const std::string& path);
std::string hash_hex(std::uint64_t h);

// One manifest per executed stage, written into the run directory. The
// manifest hash covers the command, the effective config, the seed, and
// the content hashes of inputs and outputs; timing and informational
// results are excluded so reruns of deterministic stages hash identically.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;         // path -> content hash
  std::map<std::string, std::string> outputs;        // name -> path
  std::map<std::string, std::string> output_hashes;  // name -> content hash
  nlohmann::json results = nlohmann::json::object();  // informational
  double timing_seconds = 0.0;

  std::string hash() const;
  void save(const std::string& path) const;
  static RunManifest load(const std::string& path);
};

// Exclusive lock file (<dir>/.lock) held for the duration of a writing
// command. A second writer fails with ConfigError naming the lock path.
class RunLock {
 public:
  explicit RunLock(const std::string& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
  bool held_ = false;
};

// Tokenized documents as JSON lines {"id", "label", "tokens"}.
void write_docs(const std::string& path,
                const std::vector<corpus::Document>& docs);
std::vector<corpus::Document> read_docs(const std::string& path);

// Throws MissingArtifact with a message naming the producing command when
// the path does not exist.
void require_artifact(const std::string& path, const std::string& producer);

// Run directories resolve against --runs-root, then $DLR_RUNS_ROOT, then
// the working directory; absolute paths pass through.
std::string resolve_run_dir(const std::string& dir,
                            const std::string& root_flag = "");

// Full command-line driver. argv excludes the program name. Returns the
// process exit code: 0 success, 2 config error, 3 missing or unusable
// artifact, 4 numerical failure.
int run(const std::vector<std::string>& argv);

}  // namespace dlr::cli
