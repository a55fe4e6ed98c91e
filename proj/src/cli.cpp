#include "dlr/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "dlr/errors.hpp"
#include "dlr/latent.hpp"
#include "dlr/model.hpp"
#include "dlr/objectives.hpp"
#include "dlr/retrieval.hpp"
#include "dlr/rng.hpp"
#include "dlr/transfer.hpp"

namespace dlr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact("cannot open file for hashing: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return fnv1a64(bytes);
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

std::string RunManifest::hash() const {
  json j;
  j["command"] = command;
  j["config"] = config;
  j["seed"] = seed;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["output_hashes"] = output_hashes;
  return hash_hex(fnv1a64(j.dump()));
}

void RunManifest::save(const std::string& path) const {
  json j;
  j["command"] = command;
  j["config"] = config;
  j["seed"] = seed;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["output_hashes"] = output_hashes;
  j["results"] = results;
  j["timing_seconds"] = timing_seconds;
  j["manifest_hash"] = hash();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifact("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

RunManifest RunManifest::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open manifest: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("manifest " + path + " is not valid JSON: " + e.what());
  }
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.output_hashes =
        j.at("output_hashes").get<std::map<std::string, std::string>>();
    m.results = j.value("results", json::object());
    m.timing_seconds = j.value("timing_seconds", 0.0);
  } catch (const json::exception& e) {
    throw ParseError("manifest " + path + " is missing fields: " + e.what());
  }
  return m;
}

RunLock::RunLock(const std::string& dir) : path_(dir + "/.lock") {
  int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST)
      throw ConfigError("run directory is locked by another command (" +
                        path_ + "); remove the file if its owner crashed");
    throw ConfigError("cannot create lock file " + path_ + ": " +
                      std::strerror(errno));
  }
  std::string pid = std::to_string(::getpid()) + "\n";
  ssize_t n = ::write(fd, pid.data(), pid.size());
  (void)n;
  ::close(fd);
  held_ = true;
}

RunLock::~RunLock() {
  if (held_) ::unlink(path_.c_str());
}

void write_docs(const std::string& path,
                const std::vector<corpus::Document>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifact("cannot write documents file: " + path);
  for (const auto& d : docs) {
    json j;
    j["id"] = d.raw_id;
    if (d.label)
      j["label"] = *d.label;
    else
      j["label"] = nullptr;
    j["tokens"] = d.tokens;
    out << j.dump() << "\n";
  }
}

std::vector<corpus::Document> read_docs(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open documents file: " + path);
  std::vector<corpus::Document> docs;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      corpus::Document d;
      d.raw_id = j.at("id").get<std::string>();
      if (!j.at("label").is_null()) d.label = j.at("label").get<int>();
      d.tokens = j.at("tokens").get<std::vector<int>>();
      docs.push_back(std::move(d));
    } catch (const json::exception& e) {
      throw ParseError("documents file " + path + " line " +
                       std::to_string(line_no) + ": " + e.what());
    }
  }
  if (docs.empty())
    throw ParseError("documents file holds no documents: " + path);
  return docs;
}

void require_artifact(const std::string& path, const std::string& producer) {
  if (!fs::exists(path))
    throw MissingArtifact("missing artifact " + path +
                          "; produce it with `dlr " + producer + "`");
}

std::string resolve_run_dir(const std::string& dir,
                            const std::string& root_flag) {
  if (fs::path(dir).is_absolute()) return dir;
  std::string root = root_flag;
  if (root.empty()) {
    const char* env = std::getenv("DLR_RUNS_ROOT");
    root = env != nullptr ? env : ".";
  }
  return (fs::path(root) / dir).string();
}

namespace {

struct StageWriter {
  RunManifest m;
  std::chrono::steady_clock::time_point t0 =
      std::chrono::steady_clock::now();

  void input(const std::string& path) {
    m.inputs[path] = hash_hex(file_hash(path));
  }
  void output(const std::string& name, const std::string& path) {
    m.outputs[name] = path;
    m.output_hashes[name] = hash_hex(file_hash(path));
  }
  std::string finish(const std::string& run_dir,
                     const std::string& stem = "") {
    m.timing_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    std::string path = run_dir + "/" + (stem.empty() ? m.command : stem) +
                       "-manifest.json";
    m.save(path);
    return path;
  }
};

std::string docs_path(const std::string& dir, const std::string& split) {
  return dir + "/" + split + ".docs.jsonl";
}

corpus::Vocabulary load_run_vocab(const std::string& dir) {
  require_artifact(dir + "/vocab.txt", "preprocess");
  return corpus::Vocabulary::load(dir + "/vocab.txt");
}

std::vector<corpus::Document> load_run_docs(const std::string& dir,
                                            const std::string& split) {
  require_artifact(docs_path(dir, split), "preprocess");
  return read_docs(docs_path(dir, split));
}

model::Model load_run_model(const std::string& ckpt,
                            const corpus::Vocabulary& vocab) {
  require_artifact(ckpt, "pretrain");
  return model::load_checkpoint(
      ckpt, vocab.size(), vocab.hash());
}

std::string tuple_string(const Eigen::VectorXi& col) {
  std::ostringstream out;
  out << "(";
  for (long m = 0; m < col.size(); ++m) {
    if (m > 0) out << ", ";
    out << col(m);
  }
  out << ")";
  return out.str();
}

// ---------------------------------------------------------------- preprocess

struct PreprocessArgs {
  std::string train_file;
  std::string test_file;
  std::string run_dir;
  std::string runs_root;
  int vocab_size = 30000;
  int max_len = 400;
  int dev_n = 500;
  std::vector<std::size_t> subset_sizes = {200, 500, 2500};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  bool no_full = false;
  std::uint64_t dev_seed = 13;
};

void run_preprocess(const PreprocessArgs& a) {
  const std::string dir = resolve_run_dir(a.run_dir, a.runs_root);
  fs::create_directories(dir);
  RunLock lock(dir);

  StageWriter st;
  st.m.command = "preprocess";
  st.m.seed = a.dev_seed;
  st.m.config = {{"train", a.train_file},
                 {"test", a.test_file},
                 {"vocab_size", a.vocab_size},
                 {"max_len", a.max_len},
                 {"dev_n", a.dev_n},
                 {"subset_sizes", a.subset_sizes},
                 {"seeds", a.seeds},
                 {"include_full", !a.no_full},
                 {"dev_seed", a.dev_seed}};
  st.input(a.train_file);
  if (!a.test_file.empty()) st.input(a.test_file);

  auto train_raw = corpus::load_jsonl(a.train_file);
  corpus::LoadedCorpus test_raw;
  if (!a.test_file.empty()) test_raw = corpus::load_jsonl(a.test_file);

  // String labels are mapped per file on load; remap the test side onto the
  // training name order so label ids agree across splits.
  std::vector<std::string> label_names = train_raw.label_names;
  if (!test_raw.label_names.empty()) {
    std::map<std::string, int> by_name;
    for (std::size_t i = 0; i < label_names.size(); ++i)
      by_name[label_names[i]] = static_cast<int>(i);
    for (auto& doc : test_raw.docs) {
      if (!doc.label) continue;
      const std::string& name =
          test_raw.label_names[static_cast<std::size_t>(*doc.label)];
      auto it = by_name.find(name);
      if (it == by_name.end()) {
        by_name[name] = static_cast<int>(label_names.size());
        label_names.push_back(name);
        it = by_name.find(name);
      }
      doc.label = it->second;
    }
  }

  std::vector<std::vector<std::string>> tokenized;
  tokenized.reserve(train_raw.docs.size());
  for (const auto& d : train_raw.docs)
    tokenized.push_back(corpus::clean_and_tokenize(d.text));
  auto vocab = corpus::Vocabulary::build(
      tokenized, static_cast<std::size_t>(a.vocab_size));

  auto encode_all = [&](const std::vector<corpus::RawDoc>& raw,
                        const std::string& prefix) {
    std::vector<corpus::Document> docs;
    docs.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      std::string id = raw[i].raw_id.empty()
                           ? prefix + ":" + std::to_string(i)
                           : raw[i].raw_id;
      docs.push_back(corpus::encode_document(
          raw[i].text, vocab, raw[i].label, std::move(id),
          static_cast<std::size_t>(a.max_len)));
    }
    return docs;
  };
  auto train_docs = encode_all(train_raw.docs, "train");
  auto test_docs = encode_all(test_raw.docs, "test");

  auto splits = corpus::make_splits(
      std::move(train_docs), std::move(test_docs),
      static_cast<std::size_t>(a.dev_n), a.subset_sizes, a.seeds,
      !a.no_full, a.dev_seed);

  vocab.save(dir + "/vocab.txt");
  write_docs(docs_path(dir, "train"), splits.train);
  write_docs(docs_path(dir, "dev"), splits.dev);
  if (!splits.test.empty()) write_docs(docs_path(dir, "test"), splits.test);
  splits.save_manifest(dir + "/splits.json");
  {
    std::ofstream lf(dir + "/labels.json", std::ios::binary);
    lf << json{{"label_names", label_names}}.dump(2) << "\n";
  }

  st.output("vocab", dir + "/vocab.txt");
  st.output("train_docs", docs_path(dir, "train"));
  st.output("dev_docs", docs_path(dir, "dev"));
  if (!splits.test.empty())
    st.output("test_docs", docs_path(dir, "test"));
  st.output("splits", dir + "/splits.json");
  st.output("labels", dir + "/labels.json");
  st.m.results = {{"vocab_size", vocab.size()},
                  {"train_docs", splits.train.size()},
                  {"dev_docs", splits.dev.size()},
                  {"test_docs", splits.test.size()}};
  std::string mpath = st.finish(dir);
  std::cout << "preprocess: vocab " << vocab.size() << " types, "
            << splits.train.size() << " train / " << splits.dev.size()
            << " dev / " << splits.test.size() << " test docs\n"
            << "manifest " << mpath << "\n";
}

// ------------------------------------------------------------------ pretrain

struct PretrainArgs {
  std::string run_dir;
  std::string runs_root;
  std::string method = "catvae";
  std::string layout = "global";
  int M = 1;
  int K = 2;
  int d_model = 64;
  int heads = 4;
  int ff = 256;
  double dropout = 0.1;
  int max_len = 512;
  bool ema = false;
  double ema_decay = 0.99;
  double ema_eps = 1e-5;
  double gamma = 0.0;
  double beta = 0.0;
  double tau = 0.5;
  int e_steps = 1;
  bool alternating = false;
  bool resample_e_batch = false;
  double lr = 1e-3;
  bool inverse_sqrt = false;
  int warmup = 4000;
  int batch_size = 32;
  int max_steps = 10000;
  int eval_every = 500;
  int patience = 5;
  std::uint64_t seed = 17;
  bool frozen_encoder = false;
};

void run_pretrain(const PretrainArgs& a) {
  const std::string dir = resolve_run_dir(a.run_dir, a.runs_root);
  require_artifact(dir, "preprocess");
  RunLock lock(dir);

  StageWriter st;
  st.m.command = "pretrain";
  st.m.seed = a.seed;
  st.m.config = {{"method", a.method},
                 {"layout", a.layout},
                 {"M", a.M},
                 {"K", a.K},
                 {"d_model", a.d_model},
                 {"heads", a.heads},
                 {"ff", a.ff},
                 {"dropout", a.dropout},
                 {"max_len", a.max_len},
                 {"ema", a.ema},
                 {"ema_decay", a.ema_decay},
                 {"ema_eps", a.ema_eps},
                 {"gamma", a.gamma},
                 {"beta", a.beta},
                 {"tau", a.tau},
                 {"e_steps", a.e_steps},
                 {"alternating", a.alternating},
                 {"resample_e_batch", a.resample_e_batch},
                 {"lr", a.lr},
                 {"inverse_sqrt", a.inverse_sqrt},
                 {"warmup", a.warmup},
                 {"batch_size", a.batch_size},
                 {"max_steps", a.max_steps},
                 {"eval_every", a.eval_every},
                 {"patience", a.patience},
                 {"frozen_encoder", a.frozen_encoder}};

  auto vocab = load_run_vocab(dir);
  auto train = load_run_docs(dir, "train");
  auto dev = load_run_docs(dir, "dev");
  st.input(dir + "/vocab.txt");
  st.input(docs_path(dir, "train"));
  st.input(docs_path(dir, "dev"));

  model::ModelConfig mc;
  mc.method = model::parse_method(a.method);
  mc.spec.layout = latent::parse_layout(a.layout);
  mc.spec.M = a.M;
  mc.spec.K = a.K;
  mc.spec.d_model = a.d_model;
  mc.enc.d_model = mc.dec.d_model = a.d_model;
  mc.enc.n_heads = mc.dec.n_heads = a.heads;
  mc.enc.d_ff = mc.dec.d_ff = a.ff;
  mc.enc.dropout = mc.dec.dropout = a.dropout;
  mc.enc.max_len = mc.dec.max_len = a.max_len;
  mc.ema = a.ema;
  mc.ema_decay = a.ema_decay;
  mc.ema_eps = a.ema_eps;
  mc.seed = a.seed;
  mc.validate();

  objectives::TrainingConfig tc;
  tc.gamma = a.gamma;
  tc.beta = a.beta;
  tc.tau = a.tau;
  tc.e_steps = a.e_steps;
  tc.alternating = a.alternating;
  tc.resample_e_batch = a.resample_e_batch;
  tc.lr = a.lr;
  tc.inverse_sqrt = a.inverse_sqrt;
  tc.warmup = a.warmup;
  tc.batch_size = a.batch_size;
  tc.max_steps = a.max_steps;
  tc.eval_every = a.eval_every;
  tc.patience = a.patience;
  tc.seed = a.seed;
  tc.frozen_encoder = a.frozen_encoder;
  tc.validate(mc.method);

  model::Model m(mc, vocab.size(), vocab.hash());
  objectives::PretrainResult res;
  {
    std::ofstream log(dir + "/train_log.jsonl", std::ios::binary);
    if (!log)
      throw MissingArtifact("cannot write training log in " + dir);
    res = objectives::pretrain(m, train, dev, tc, &log);
  }
  model::save_checkpoint(dir + "/model.ckpt", m);

  st.output("checkpoint", dir + "/model.ckpt");
  st.output("train_log", dir + "/train_log.jsonl");
  st.m.results = {{"best_dev_perplexity", res.best_dev_perplexity},
                  {"best_step", res.best_step},
                  {"steps_run", res.steps_run},
                  {"evals_run", res.evals_run},
                  {"early_stopped", res.early_stopped}};
  std::string mpath = st.finish(dir);
  std::cout << "pretrain: best dev perplexity " << res.best_dev_perplexity
            << " at step " << res.best_step << " (" << res.steps_run
            << " steps)\nmanifest " << mpath << "\n";
}

// -------------------------------------------------------------------- encode

struct EncodeArgs {
  std::string run_dir;
  std::string runs_root;
  std::string checkpoint;
  std::string split = "train";
  std::string out;
};

void write_label_sidecar(const std::string& path,
                         const std::vector<corpus::Document>& docs) {
  std::ofstream side(path, std::ios::binary);
  if (!side) throw MissingArtifact("cannot write label sidecar: " + path);
  for (const auto& d : docs)
    side << d.raw_id << "\t" << (d.label ? *d.label : -1) << "\n";
}

void run_encode(const EncodeArgs& a) {
  const std::string dir = resolve_run_dir(a.run_dir, a.runs_root);
  require_artifact(dir, "preprocess");
  RunLock lock(dir);

  const std::string ckpt =
      a.checkpoint.empty() ? dir + "/model.ckpt" : a.checkpoint;
  const std::string out =
      a.out.empty() ? dir + "/codes-" + a.split + ".bin" : a.out;

  StageWriter st;
  st.m.command = "encode";
  st.m.config = {{"split", a.split}, {"checkpoint", ckpt}, {"out", out}};

  auto vocab = load_run_vocab(dir);
  auto docs = load_run_docs(dir, a.split);
  auto m = load_run_model(ckpt, vocab);
  st.input(dir + "/vocab.txt");
  st.input(docs_path(dir, a.split));
  st.input(ckpt);
  st.m.seed = m.config().seed;

  auto codes = transfer::encode_corpus(m, docs);
  latent::write_codes_file(out, m.config().spec, codes);
  write_label_sidecar(out + ".labels", docs);

  st.output("codes", out);
  st.output("labels", out + ".labels");
  st.m.results = {{"documents", codes.size()}};
  std::string mpath = st.finish(dir, "encode-" + a.split);
  std::cout << "encode: wrote " << codes.size() << " code records to " << out
            << "\nmanifest " << mpath << "\n";
}

// ------------------------------------------------------------------ classify

struct ClassifyArgs {
  std::string run_dir;
  std::string runs_root;
  std::string checkpoint;
  std::vector<int> subset_sizes = {200, 500, 2500};
  bool no_full = false;
  std::string embed_mode = "both";
  std::string pool = "mean";
  int classes = 0;  // 0 = infer from labels
  double lr = 0.0003;
  int embed_dim = 0;
  int epochs = 50;
  int patience = 10;
  int batch_size = 32;
  std::uint64_t seed = 17;
  std::string out;
};

void run_classify(const ClassifyArgs& a) {
  const std::string dir = resolve_run_dir(a.run_dir, a.runs_root);
  require_artifact(dir, "preprocess");
  RunLock lock(dir);

  const std::string ckpt =
      a.checkpoint.empty() ? dir + "/model.ckpt" : a.checkpoint;
  const std::string out =
      a.out.empty() ? dir + "/eval_report.json" : a.out;

  StageWriter st;
  st.m.command = "classify";
  st.m.seed = a.seed;
  st.m.config = {{"checkpoint", ckpt},
                 {"subset_sizes", a.subset_sizes},
                 {"include_full", !a.no_full},
                 {"embed_mode", a.embed_mode},
                 {"pool", a.pool},
                 {"classes", a.classes},
                 {"lr", a.lr},
                 {"embed_dim", a.embed_dim},
                 {"epochs", a.epochs},
                 {"patience", a.patience},
                 {"batch_size", a.batch_size},
                 {"out", out}};

  auto vocab = load_run_vocab(dir);
  auto train = load_run_docs(dir, "train");
  auto dev = load_run_docs(dir, "dev");
  auto test = load_run_docs(dir, "test");
  auto m = load_run_model(ckpt, vocab);
  st.input(dir + "/vocab.txt");
  st.input(docs_path(dir, "train"));
  st.input(docs_path(dir, "dev"));
  st.input(docs_path(dir, "test"));
  st.input(ckpt);

  int classes = a.classes;
  if (classes == 0) {
    for (const auto* split : {&train, &dev, &test})
      for (const auto& d : *split)
        if (d.label) classes = std::max(classes, *d.label + 1);
    if (classes < 2)
      throw ConfigError("cannot infer classes: the corpus has no labels");
  }

  std::vector<transfer::ClassifierConfig> configs;
  auto base = transfer::ClassifierConfig{};
  base.pool = transfer::parse_pool(a.pool);
  base.classes = classes;
  base.lr = a.lr;
  base.embed_dim = a.embed_dim;
  base.max_epochs = a.epochs;
  base.patience = a.patience;
  base.batch_size = a.batch_size;
  base.seed = a.seed;
  if (a.embed_mode == "both") {
    auto re = base;
    re.embed_mode = transfer::EmbedMode::reembed;
    auto pre = base;
    pre.embed_mode = transfer::EmbedMode::pretrained;
    configs = {re, pre};
  } else {
    base.embed_mode = transfer::parse_embed_mode(a.embed_mode);
    configs = {base};
  }

  std::vector<int> sizes = a.subset_sizes;
  if (!a.no_full) sizes.push_back(0);

  auto report = transfer::evaluate_matrix(m, train, dev, test, sizes,
                                          configs);
  {
    std::ofstream jf(out, std::ios::binary);
    if (!jf) throw MissingArtifact("cannot write report: " + out);
    jf << report.to_json().dump(2) << "\n";
  }
  const std::string text_path = dir + "/eval_report.txt";
  {
    std::ofstream tf(text_path, std::ios::binary);
    tf << report.to_text();
  }

  st.output("report_json", out);
  st.output("report_text", text_path);
  st.m.results = {{"cells", report.cells.size()},
                  {"classes", classes}};
  std::string mpath = st.finish(dir);
  std::cout << report.to_text() << "manifest " << mpath << "\n";
}

// ------------------------------------------------------------------ retrieve

struct RetrieveArgs {
  std::string run_dir;
  std::string runs_root;
  std::string checkpoint;
  int k = 100;
  bool sweep = false;
  std::string baseline;  // word-vector file; empty disables the baseline
  std::string metric = "cosine";
  std::string out;
};

void run_retrieve(const RetrieveArgs& a) {
  const std::string dir = resolve_run_dir(a.run_dir, a.runs_root);
  require_artifact(dir, "preprocess");
  RunLock lock(dir);

  const std::string ckpt =
      a.checkpoint.empty() ? dir + "/model.ckpt" : a.checkpoint;
  const std::string out =
      a.out.empty() ? dir + "/retrieval_report.json" : a.out;

  StageWriter st;
  st.m.command = "retrieve";
  st.m.config = {{"checkpoint", ckpt},
                 {"k", a.k},
                 {"sweep", a.sweep},
                 {"baseline", a.baseline},
                 {"metric", a.metric},
                 {"out", out}};

  auto vocab = load_run_vocab(dir);
  auto train = load_run_docs(dir, "train");
  auto test = load_run_docs(dir, "test");
  auto m = load_run_model(ckpt, vocab);
  st.input(dir + "/vocab.txt");
  st.input(docs_path(dir, "train"));
  st.input(docs_path(dir, "test"));
  st.input(ckpt);
  st.m.seed = m.config().seed;

  if (m.config().spec.layout != latent::Layout::global)
    throw ConfigError(
        "retrieval indexes global codes only; this checkpoint is local");

  for (const auto* split : {&train, &test})
    for (const auto& d : *split)
      if (!d.label)
        throw ConfigError("document " + d.raw_id +
                          " has no label; retrieval scoring needs labels");

  auto train_codes = transfer::encode_corpus(m, train);
  retrieval::CodeIndex index(m.config().spec.M, m.config().spec.K);
  for (std::size_t i = 0; i < train.size(); ++i)
    index.add(train_codes[i], train[i].raw_id, *train[i].label);
  const std::string index_path = dir + "/index-train.bin";
  index.save(index_path);

  auto test_codes = transfer::encode_corpus(m, test);
  std::vector<retrieval::Record> queries;
  for (std::size_t i = 0; i < test.size(); ++i)
    queries.push_back({test_codes[i], test[i].raw_id, *test[i].label});

  json report;
  auto knn = retrieval::label_precision(index, queries, a.k);
  report["knn"] = {{"k", a.k},
                   {"precision", knn.precision},
                   {"queries", knn.queries},
                   {"empty", knn.empty}};

  std::string sweep_path;
  if (a.sweep) {
    auto rows = retrieval::radius_sweep(index, queries);
    sweep_path = dir + "/radius_sweep.csv";
    std::ofstream csv(sweep_path, std::ios::binary);
    csv << "D,precision,mean_cluster_size,empty\n";
    json jr = json::array();
    for (const auto& r : rows) {
      csv << r.D << "," << r.precision << "," << r.mean_cluster_size << ","
          << r.empty << "\n";
      jr.push_back({{"D", r.D},
                    {"precision", r.precision},
                    {"mean_cluster_size", r.mean_cluster_size},
                    {"empty", r.empty}});
    }
    report["sweep"] = jr;
  }

  if (!a.baseline.empty()) {
    require_artifact(a.baseline, "an external word-vector exporter");
    auto wv = retrieval::WordVectors::load(a.baseline);
    auto to_text = [&](const std::vector<corpus::Document>& docs) {
      std::vector<retrieval::TextDoc> out_docs;
      for (const auto& d : docs) {
        retrieval::TextDoc t;
        for (int id : d.tokens)
          if (id >= corpus::kNumSpecials) t.tokens.push_back(vocab.token(id));
        t.doc_id = d.raw_id;
        t.label = *d.label;
        out_docs.push_back(std::move(t));
      }
      return out_docs;
    };
    auto base = retrieval::baseline_precision(
        wv, to_text(train), to_text(test),
        retrieval::parse_metric(a.metric), a.k, &std::cerr);
    report["baseline"] = {{"metric", a.metric},
                          {"precision", base.precision},
                          {"queries", base.queries},
                          {"skipped", base.skipped}};
  }

  {
    std::ofstream jf(out, std::ios::binary);
    if (!jf) throw MissingArtifact("cannot write report: " + out);
    jf << report.dump(2) << "\n";
  }

  st.output("report_json", out);
  st.output("index", index_path);
  st.output("index_labels", index_path + ".labels");
  if (!sweep_path.empty()) st.output("sweep_csv", sweep_path);
  st.m.results = {{"knn_precision", knn.precision}};
  std::string mpath = st.finish(dir);
  std::cout << "retrieve: label precision " << knn.precision << " at k="
            << a.k << " over " << knn.queries << " queries\nmanifest "
            << mpath << "\n";
}

// ---------------------------------------------------------- inspect-clusters

struct InspectArgs {
  std::string run_dir;
  std::string runs_root;
  std::string checkpoint;
  std::string split = "train";
  int top = 10;
  int examples = 5;
  bool words = false;
  std::string out;
};

void run_inspect(const InspectArgs& a) {
  const std::string dir = resolve_run_dir(a.run_dir, a.runs_root);
  require_artifact(dir, "preprocess");
  RunLock lock(dir);

  const std::string ckpt =
      a.checkpoint.empty() ? dir + "/model.ckpt" : a.checkpoint;
  const std::string out = a.out.empty() ? dir + "/clusters.json" : a.out;

  StageWriter st;
  st.m.command = "inspect-clusters";
  st.m.config = {{"checkpoint", ckpt},
                 {"split", a.split},
                 {"top", a.top},
                 {"examples", a.examples},
                 {"words", a.words},
                 {"out", out}};

  auto vocab = load_run_vocab(dir);
  auto docs = load_run_docs(dir, a.split);
  auto m = load_run_model(ckpt, vocab);
  st.input(dir + "/vocab.txt");
  st.input(docs_path(dir, a.split));
  st.input(ckpt);
  st.m.seed = m.config().seed;

  const bool local = m.config().spec.layout == latent::Layout::local;
  if (local && !a.words)
    throw ConfigError(
        "local codes have one tuple per token; use --words to group word "
        "types by their majority cluster");

  auto codes = transfer::encode_corpus(m, docs);

  // cluster key -> member list (doc ids, or word types with counts)
  std::map<std::string, std::vector<std::string>> groups;
  if (!a.words) {
    for (std::size_t i = 0; i < docs.size(); ++i)
      groups[tuple_string(codes[i].codes.col(0))].push_back(docs[i].raw_id);
  } else {
    // majority cluster per word type
    std::map<int, std::map<std::string, int>> word_tuples;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      for (std::size_t t = 0; t < docs[i].tokens.size(); ++t) {
        const int id = docs[i].tokens[t];
        if (id < corpus::kNumSpecials) continue;
        const std::string key = tuple_string(
            codes[i].codes.col(local ? static_cast<long>(t) : 0));
        ++word_tuples[id][key];
      }
    }
    for (const auto& [id, tuples] : word_tuples) {
      const std::string* best = nullptr;
      int best_count = -1;
      for (const auto& [key, count] : tuples)
        if (count > best_count) {
          best = &key;
          best_count = count;
        }
      groups[*best].push_back(vocab.token(id));
    }
  }

  std::vector<std::pair<std::string, std::vector<std::string>>> ranked(
      groups.begin(), groups.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& x, const auto& y) {
                     return x.second.size() > y.second.size();
                   });
  if (static_cast<int>(ranked.size()) > a.top)
    ranked.resize(static_cast<std::size_t>(a.top));

  json clusters = json::array();
  std::ostringstream text;
  for (const auto& [key, members] : ranked) {
    json c;
    c["cluster"] = key;
    c["size"] = members.size();
    std::vector<std::string> ex(
        members.begin(),
        members.begin() +
            std::min<std::size_t>(members.size(),
                                  static_cast<std::size_t>(a.examples)));
    c["members"] = ex;
    clusters.push_back(c);
    text << key << "  size " << members.size() << "\n";
    for (const auto& e : ex) text << "    " << e << "\n";
  }
  {
    std::ofstream jf(out, std::ios::binary);
    if (!jf) throw MissingArtifact("cannot write clusters: " + out);
    jf << json{{"mode", a.words ? "words" : "documents"},
               {"clusters", clusters}}
              .dump(2)
       << "\n";
  }

  st.output("clusters", out);
  st.m.results = {{"clusters", groups.size()}};
  std::string mpath = st.finish(dir);
  std::cout << text.str() << "manifest " << mpath << "\n";
}

// -------------------------------------------------------------------- report

struct ReportArgs {
  std::string runs_root;
  std::string out_dir;
};

void run_report(const ReportArgs& a) {
  std::string root = a.runs_root;
  if (root.empty()) {
    const char* env = std::getenv("DLR_RUNS_ROOT");
    root = env != nullptr ? env : ".";
  }
  if (!fs::exists(root))
    throw MissingArtifact("runs root does not exist: " + root);

  std::vector<std::pair<std::string, std::string>> found;  // dir, manifest
  auto scan_dir = [&](const fs::path& d) {
    for (const auto& entry : fs::directory_iterator(d)) {
      if (!entry.is_regular_file()) continue;
      const std::string name = entry.path().filename().string();
      if (name.size() > 14 &&
          name.substr(name.size() - 14) == "-manifest.json")
        found.emplace_back(d.string(), entry.path().string());
    }
  };
  scan_dir(root);
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) scan_dir(entry.path());
  std::sort(found.begin(), found.end(),
            [](const auto& x, const auto& y) { return x.second < y.second; });

  if (found.empty()) {
    std::cout << "no run manifests found under " << root << "\n";
    return;
  }

  const std::string out_dir =
      a.out_dir.empty() ? (fs::path(root) / "report").string() : a.out_dir;
  fs::create_directories(out_dir);

  std::ostringstream summary;
  for (const auto& [run_dir, mpath] : found) {
    auto m = RunManifest::load(mpath);
    const std::string run =
        fs::path(run_dir).filename().string().empty()
            ? "root"
            : fs::path(run_dir).filename().string();
    summary << run << "  " << m.command << "  hash=" << m.hash()
            << "  seed=" << m.seed << "\n";
    for (const auto& [k, v] : m.results.items())
      summary << "    " << k << ": " << v.dump() << "\n";

    if (m.command == "pretrain" && m.outputs.count("train_log") &&
        fs::exists(m.outputs.at("train_log"))) {
      std::ifstream log(m.outputs.at("train_log"));
      std::ofstream csv(out_dir + "/" + run + "-training.csv",
                        std::ios::binary);
      csv << "step,reconstruction,kl_raw,kl_clamped,codebook_term,"
             "commitment_term,total,dev_perplexity\n";
      std::string line;
      while (std::getline(log, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;
        csv << j.value("step", 0) << "," << j.value("reconstruction", 0.0)
            << "," << j.value("kl_raw", 0.0) << ","
            << j.value("kl_clamped", 0.0) << ","
            << j.value("codebook_term", 0.0) << ","
            << j.value("commitment_term", 0.0) << ","
            << j.value("total", 0.0) << ","
            << j.value("dev_perplexity", 0.0) << "\n";
      }
    }
    if (m.command == "classify" && m.outputs.count("report_json") &&
        fs::exists(m.outputs.at("report_json"))) {
      std::ifstream jf(m.outputs.at("report_json"));
      json j;
      jf >> j;
      std::ofstream csv(out_dir + "/" + run + "-transfer.csv",
                        std::ios::binary);
      csv << "mode,pool,n,mean,sd\n";
      for (const auto& c : j.at("cells"))
        csv << c.at("mode").get<std::string>() << ","
            << c.at("pool").get<std::string>() << "," << c.at("n").get<int>()
            << "," << c.at("mean").get<double>() << ","
            << c.at("sd").get<double>() << "\n";
    }
    if (m.command == "retrieve" && m.outputs.count("sweep_csv") &&
        fs::exists(m.outputs.at("sweep_csv"))) {
      fs::copy_file(m.outputs.at("sweep_csv"),
                    out_dir + "/" + run + "-radius.csv",
                    fs::copy_options::overwrite_existing);
    }
  }

  {
    std::ofstream sf(out_dir + "/summary.txt", std::ios::binary);
    sf << summary.str();
  }
  std::cout << summary.str() << "report written to " << out_dir << "\n";
}

}  // namespace

int run(const std::vector<std::string>& argv) {
  CLI::App app{"discrete latent representations for text"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value config file; flags override");

  PreprocessArgs pre;
  auto* sp = app.add_subcommand(
      "preprocess", "tokenize a corpus, build the vocabulary, make splits");
  sp->add_option("--train", pre.train_file, "training JSONL file")
      ->required();
  sp->add_option("--test", pre.test_file, "test JSONL file");
  sp->add_option("--run-dir", pre.run_dir, "run directory")->required();
  sp->add_option("--runs-root", pre.runs_root,
                 "root for relative run directories");
  sp->add_option("--vocab-size", pre.vocab_size, "maximum vocabulary types");
  sp->add_option("--max-len", pre.max_len, "token truncation length");
  sp->add_option("--dev-n", pre.dev_n, "development documents held out");
  sp->add_option("--subset-sizes", pre.subset_sizes,
                 "labeled subset sizes")
      ->delimiter(',');
  sp->add_option("--seeds", pre.seeds, "subset sampling seeds")
      ->delimiter(',');
  sp->add_flag("--no-full", pre.no_full, "skip the full-size subset");
  sp->add_option("--dev-seed", pre.dev_seed, "dev split sampling seed");
  sp->callback([&pre] { run_preprocess(pre); });

  PretrainArgs pt;
  auto* st = app.add_subcommand("pretrain",
                                "train an encoder-decoder on a run's corpus");
  st->add_option("--run-dir", pt.run_dir, "run directory")->required();
  st->add_option("--runs-root", pt.runs_root,
                 "root for relative run directories");
  st->add_option("--method", pt.method, "catvae | vqvae | hardem");
  st->add_option("--layout", pt.layout, "local | global");
  st->add_option("-M,--codebooks", pt.M, "number of codebooks");
  st->add_option("-K,--symbols", pt.K, "symbols per codebook");
  st->add_option("--d-model", pt.d_model, "model width");
  st->add_option("--heads", pt.heads, "attention heads");
  st->add_option("--ff", pt.ff, "feed-forward width");
  st->add_option("--dropout", pt.dropout, "dropout probability");
  st->add_option("--max-len", pt.max_len, "maximum sequence length");
  st->add_flag("--ema", pt.ema, "EMA codebook updates (vqvae)");
  st->add_option("--ema-decay", pt.ema_decay, "EMA decay");
  st->add_option("--ema-eps", pt.ema_eps, "EMA Laplace epsilon");
  st->add_option("--gamma", pt.gamma, "free-bits fraction (catvae)");
  st->add_option("--beta", pt.beta, "commitment weight (vqvae)");
  st->add_option("--tau", pt.tau, "relaxation temperature");
  st->add_option("--e-steps", pt.e_steps, "inference updates per round");
  st->add_flag("--alternating", pt.alternating,
               "alternate phi and theta phases (catvae)");
  st->add_flag("--resample-e-batch", pt.resample_e_batch,
               "draw a fresh batch for each inference phase");
  st->add_option("--lr", pt.lr, "learning rate");
  st->add_flag("--inverse-sqrt", pt.inverse_sqrt,
               "inverse-sqrt schedule with warmup");
  st->add_option("--warmup", pt.warmup, "warmup steps");
  st->add_option("--batch", pt.batch_size, "documents per step");
  st->add_option("--max-steps", pt.max_steps, "training step budget");
  st->add_option("--eval-every", pt.eval_every, "steps between evals");
  st->add_option("--patience", pt.patience, "evals without improvement");
  st->add_option("--seed", pt.seed, "run seed");
  st->add_flag("--frozen-encoder", pt.frozen_encoder,
               "skip inference-side updates (control runs)");
  st->callback([&pt] { run_pretrain(pt); });

  EncodeArgs en;
  auto* se = app.add_subcommand("encode",
                                "write discrete codes for a split");
  se->add_option("--run-dir", en.run_dir, "run directory")->required();
  se->add_option("--runs-root", en.runs_root,
                 "root for relative run directories");
  se->add_option("--checkpoint", en.checkpoint,
                 "checkpoint path (default <run>/model.ckpt)");
  se->add_option("--split", en.split, "train | dev | test");
  se->add_option("--out", en.out, "output codes file");
  se->callback([&en] { run_encode(en); });

  ClassifyArgs cl;
  auto* sc = app.add_subcommand(
      "classify", "train classifiers over frozen codes and report accuracy");
  sc->add_option("--run-dir", cl.run_dir, "run directory")->required();
  sc->add_option("--runs-root", cl.runs_root,
                 "root for relative run directories");
  sc->add_option("--checkpoint", cl.checkpoint,
                 "checkpoint path (default <run>/model.ckpt)");
  sc->add_option("--subset-sizes", cl.subset_sizes, "labeled subset sizes")
      ->delimiter(',');
  sc->add_flag("--no-full", cl.no_full, "skip the full-pool row");
  sc->add_option("--embed-mode", cl.embed_mode,
                 "reembed | pretrained | both");
  sc->add_option("--pool", cl.pool, "mean | transformer_mean");
  sc->add_option("--classes", cl.classes, "class count (0 = infer)");
  sc->add_option("--lr", cl.lr, "classifier learning rate");
  sc->add_option("--embed-dim", cl.embed_dim,
                 "task embedding width (0 = match pretraining)");
  sc->add_option("--epochs", cl.epochs, "maximum epochs");
  sc->add_option("--patience", cl.patience, "epochs without improvement");
  sc->add_option("--batch", cl.batch_size, "examples per step");
  sc->add_option("--seed", cl.seed, "base seed for the five subsamples");
  sc->add_option("--out", cl.out, "output report JSON");
  sc->callback([&cl] { run_classify(cl); });

  RetrieveArgs re;
  auto* sr = app.add_subcommand(
      "retrieve", "nearest-neighbor retrieval over global codes");
  sr->add_option("--run-dir", re.run_dir, "run directory")->required();
  sr->add_option("--runs-root", re.runs_root,
                 "root for relative run directories");
  sr->add_option("--checkpoint", re.checkpoint,
                 "checkpoint path (default <run>/model.ckpt)");
  sr->add_option("-k", re.k, "neighbors per query");
  sr->add_flag("--sweep", re.sweep, "emit a radius sweep CSV");
  sr->add_option("--baseline", re.baseline,
                 "word-vector file for the continuous baseline");
  sr->add_option("--metric", re.metric, "cosine | l2 (baseline)");
  sr->add_option("--out", re.out, "output report JSON");
  sr->callback([&re] { run_retrieve(re); });

  InspectArgs in;
  auto* si = app.add_subcommand(
      "inspect-clusters", "group documents or words by their code tuples");
  si->add_option("--run-dir", in.run_dir, "run directory")->required();
  si->add_option("--runs-root", in.runs_root,
                 "root for relative run directories");
  si->add_option("--checkpoint", in.checkpoint,
                 "checkpoint path (default <run>/model.ckpt)");
  si->add_option("--split", in.split, "train | dev | test");
  si->add_option("--top", in.top, "clusters to show");
  si->add_option("--examples", in.examples, "members listed per cluster");
  si->add_flag("--words", in.words,
               "group word types by majority cluster");
  si->add_option("--out", in.out, "output clusters JSON");
  si->callback([&in] { run_inspect(in); });

  ReportArgs rp;
  auto* sR = app.add_subcommand(
      "report", "summarize every run manifest under the runs root");
  sR->add_option("--runs-root", rp.runs_root,
                 "directory scanned for run manifests");
  sR->add_option("--out-dir", rp.out_dir,
                 "report output directory (default <root>/report)");
  sR->callback([&rp] { run_report(rp); });

  try {
    std::vector<std::string> args(argv.rbegin(), argv.rend());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "unusable artifact: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  }
  return 0;
}

}  // namespace dlr::cli
