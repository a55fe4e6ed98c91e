#include "dlr/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dlr/errors.hpp"

namespace dlr::model {

using json = nlohmann::json;

std::string method_name(Method m) {
  switch (m) {
    case Method::catvae: return "catvae";
    case Method::vqvae: return "vqvae";
    case Method::hardem: return "hardem";
  }
  throw ConfigError("unknown method");
}

Method parse_method(const std::string& name) {
  if (name == "catvae") return Method::catvae;
  if (name == "vqvae") return Method::vqvae;
  if (name == "hardem") return Method::hardem;
  throw ConfigError("unknown method: " + name);
}

void ModelConfig::validate() const {
  spec.validate();
  if (enc.d_model != spec.d_model || dec.d_model != spec.d_model)
    throw ConfigError("encoder, decoder, and latent spec disagree on d_model");
  if (ema && method != Method::vqvae)
    throw ConfigError("EMA codebook updates apply only to vqvae");
  if (ema_decay <= 0.0 || ema_decay > 1.0)
    throw ConfigError("ema_decay must lie in (0, 1]");
  if (ema_eps < 0.0) throw ConfigError("ema_eps must be non-negative");
}

std::uint64_t ModelConfig::hash() const {
  std::ostringstream os;
  os << method_name(method) << '|' << latent::layout_name(spec.layout) << '|'
     << spec.M << '|' << spec.K << '|' << spec.d_model << '|' << enc.n_heads
     << '|' << enc.d_ff << '|' << enc.dropout << '|' << enc.sinusoidal << '|'
     << enc.max_len << '|' << dec.n_heads << '|' << dec.d_ff << '|'
     << dec.dropout << '|' << dec.max_len << '|' << ema << '|' << ema_decay
     << '|' << ema_eps;
  return fnv1a64(os.str());
}

Model::Model(const ModelConfig& cfg, int vocab_size, std::uint64_t vocab_hash)
    : cfg_(cfg), vocab_size_(vocab_size), vocab_hash_(vocab_hash) {
  cfg_.validate();
  Rng rng = make_rng(cfg_.seed, "init");
  enc_ = std::make_unique<encoder::Encoder>(cfg_.spec, cfg_.enc, vocab_size_,
                                            enc_store_, "enc", rng);
  if (cfg_.method == Method::vqvae) {
    cb_ = std::make_unique<discretize::Codebook>(cfg_.spec, cb_store_, "cb",
                                                 rng, cfg_.ema, cfg_.ema_decay,
                                                 cfg_.ema_eps);
    for (int m = 0; m < cfg_.spec.M; ++m) vq_tables_.push_back(cb_->table(m));
  }
  dec_ = std::make_unique<decoder::Decoder>(
      cfg_.spec, cfg_.dec, vocab_size_, dec_store_, "dec", rng,
      /*make_latent_tables=*/cfg_.method != Method::vqvae);
}

discretize::Codebook& Model::codebook() {
  if (!cb_) throw ConfigError("model has no codebook (method is not vqvae)");
  return *cb_;
}

const discretize::Codebook& Model::codebook() const {
  if (!cb_) throw ConfigError("model has no codebook (method is not vqvae)");
  return *cb_;
}

const std::vector<Var>& Model::latent_tables() const {
  return cfg_.method == Method::vqvae ? vq_tables_ : dec_->latent_tables();
}

latent::CodeAssignment Model::encode_map(const std::vector<int>& tokens) const {
  nn::NoGradGuard guard;
  Var H = enc_->encode_tokens(tokens);
  if (cfg_.method == Method::vqvae) {
    std::vector<Mat> blocks;
    for (const Var& b : enc_->vq_encode(H, tokens)) blocks.push_back(b.value());
    return discretize::quantize(blocks, *cb_);
  }
  return discretize::harden(enc_->posterior_probs(H, tokens).value(),
                            cfg_.spec);
}

decoder::Decoder::Score Model::score(
    const std::vector<int>& tokens, const latent::CodeAssignment& codes) const {
  Var source = dec_->embed_hard(latent_tables(), codes);
  return dec_->reconstruct(tokens, source);
}

double Model::corpus_perplexity(
    const std::vector<corpus::Document>& docs) const {
  if (docs.empty()) throw ConfigError("perplexity over an empty corpus");
  nn::NoGradGuard guard;
  double total = 0.0;
  long long count = 0;
  for (const auto& doc : docs) {
    auto s = score(doc.tokens, encode_map(doc.tokens));
    total += s.total.value()(0, 0);
    count += static_cast<long long>(doc.tokens.size()) + 1;
  }
  return decoder::perplexity(total, count);
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ParseError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void write_mat(std::ostream& os, const Mat& m) {
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) {
      double d = m(r, c);
      std::uint64_t bits;
      std::memcpy(&bits, &d, 8);
      unsigned char b[8];
      for (int i = 0; i < 8; ++i)
        b[i] = static_cast<unsigned char>(bits >> (8 * i));
      os.write(reinterpret_cast<const char*>(b), 8);
    }
}

Mat read_mat(std::istream& is, long rows, long cols) {
  Mat m(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      unsigned char b[8];
      is.read(reinterpret_cast<char*>(b), 8);
      if (!is) throw ParseError("checkpoint truncated");
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
      double d;
      std::memcpy(&d, &bits, 8);
      m(r, c) = d;
    }
  return m;
}

struct TensorRef {
  std::string name;
  const Mat* mat;
};

std::vector<TensorRef> manifest(const Model& m) {
  std::vector<TensorRef> out;
  for (const auto& [name, v] : m.enc_params().items())
    out.push_back({"enc:" + name, &v.value()});
  for (const auto& [name, v] : m.dec_params().items())
    out.push_back({"dec:" + name, &v.value()});
  for (const auto& [name, v] : m.cb_params().items())
    out.push_back({"cb:" + name, &v.value()});
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw MissingArtifact("cannot open checkpoint for writing: " + path);

  const ModelConfig& cfg = m.config();
  json header;
  header["version"] = 1;
  header["method"] = method_name(cfg.method);
  header["layout"] = latent::layout_name(cfg.spec.layout);
  header["M"] = cfg.spec.M;
  header["K"] = cfg.spec.K;
  header["d_model"] = cfg.spec.d_model;
  header["enc"] = {{"n_heads", cfg.enc.n_heads},
                   {"d_ff", cfg.enc.d_ff},
                   {"dropout", cfg.enc.dropout},
                   {"sinusoidal", cfg.enc.sinusoidal},
                   {"max_len", cfg.enc.max_len}};
  header["dec"] = {{"n_heads", cfg.dec.n_heads},
                   {"d_ff", cfg.dec.d_ff},
                   {"dropout", cfg.dec.dropout},
                   {"max_len", cfg.dec.max_len}};
  header["ema"] = cfg.ema;
  header["ema_decay"] = cfg.ema_decay;
  header["ema_eps"] = cfg.ema_eps;
  header["seed"] = cfg.seed;
  header["vocab_size"] = m.vocab_size();
  header["vocab_hash"] = m.vocab_hash();
  header["config_hash"] = cfg.hash();

  std::vector<std::pair<std::string, Mat>> ema_state;
  if (cfg.method == Method::vqvae && cfg.ema) {
    const auto& cb = m.codebook();
    for (int i = 0; i < cfg.spec.M; ++i) {
      ema_state.emplace_back("ema_n:" + std::to_string(i),
                             Mat(cb.counts(i).transpose()));
      ema_state.emplace_back("ema_s:" + std::to_string(i), cb.sums(i));
    }
  }

  json tensors = json::array();
  for (const auto& t : manifest(m))
    tensors.push_back(
        {{"name", t.name}, {"rows", t.mat->rows()}, {"cols", t.mat->cols()}});
  for (const auto& [name, mat] : ema_state)
    tensors.push_back({{"name", name}, {"rows", mat.rows()}, {"cols", mat.cols()}});
  header["tensors"] = tensors;

  std::string header_str = header.dump();
  os.write("DLM1", 4);
  write_u32(os, static_cast<std::uint32_t>(header_str.size()));
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& t : manifest(m)) write_mat(os, *t.mat);
  for (const auto& [name, mat] : ema_state) write_mat(os, mat);
  if (!os) throw MissingArtifact("failed while writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path, int vocab_size,
                      std::uint64_t vocab_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("checkpoint not found: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "DLM1")
    throw ParseError("not a model checkpoint: " + path);
  std::uint32_t hlen = read_u32(is);
  std::string header_str(hlen, '\0');
  is.read(header_str.data(), hlen);
  if (!is) throw ParseError("checkpoint truncated");

  json header;
  try {
    header = json::parse(header_str);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad checkpoint header: ") + e.what());
  }

  ModelConfig cfg;
  try {
    if (header.at("version").get<int>() != 1)
      throw ParseError("unsupported checkpoint version");
    cfg.method = parse_method(header.at("method").get<std::string>());
    cfg.spec.layout =
        latent::parse_layout(header.at("layout").get<std::string>());
    cfg.spec.M = header.at("M").get<int>();
    cfg.spec.K = header.at("K").get<int>();
    cfg.spec.d_model = header.at("d_model").get<int>();
    cfg.enc.d_model = cfg.spec.d_model;
    cfg.enc.n_heads = header.at("enc").at("n_heads").get<int>();
    cfg.enc.d_ff = header.at("enc").at("d_ff").get<int>();
    cfg.enc.dropout = header.at("enc").at("dropout").get<double>();
    cfg.enc.sinusoidal = header.at("enc").at("sinusoidal").get<bool>();
    cfg.enc.max_len = header.at("enc").at("max_len").get<int>();
    cfg.dec.d_model = cfg.spec.d_model;
    cfg.dec.n_heads = header.at("dec").at("n_heads").get<int>();
    cfg.dec.d_ff = header.at("dec").at("d_ff").get<int>();
    cfg.dec.dropout = header.at("dec").at("dropout").get<double>();
    cfg.dec.max_len = header.at("dec").at("max_len").get<int>();
    cfg.ema = header.at("ema").get<bool>();
    cfg.ema_decay = header.at("ema_decay").get<double>();
    cfg.ema_eps = header.at("ema_eps").get<double>();
    cfg.seed = header.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad checkpoint header: ") + e.what());
  }

  const int stored_vocab = header.at("vocab_size").get<int>();
  const std::uint64_t stored_hash =
      header.at("vocab_hash").get<std::uint64_t>();
  if (stored_vocab != vocab_size || stored_hash != vocab_hash)
    throw ConfigError(
        "checkpoint was built against a different vocabulary; refusing to "
        "load");

  Model m(cfg, vocab_size, vocab_hash);
  if (cfg.hash() != header.at("config_hash").get<std::uint64_t>())
    throw ParseError("checkpoint config hash mismatch");

  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const long rows = t.at("rows").get<long>();
    const long cols = t.at("cols").get<long>();
    Mat mat = read_mat(is, rows, cols);
    auto colon = name.find(':');
    if (colon == std::string::npos)
      throw ParseError("malformed tensor name: " + name);
    const std::string bucket = name.substr(0, colon);
    const std::string local = name.substr(colon + 1);
    if (bucket == "ema_n" || bucket == "ema_s") {
      if (cfg.method != Method::vqvae || !cfg.ema)
        throw ParseError("unexpected EMA state in checkpoint");
      int mi = std::stoi(local);
      auto& cb = m.codebook();
      if (bucket == "ema_n")
        cb.set_ema_state(mi, Eigen::VectorXd(mat.transpose()), cb.sums(mi));
      else
        cb.set_ema_state(mi, cb.counts(mi), mat);
      continue;
    }
    nn::ParamStore* store = bucket == "enc"   ? &m.enc_params()
                            : bucket == "dec" ? &m.dec_params()
                            : bucket == "cb"  ? &m.cb_params()
                                              : nullptr;
    if (store == nullptr) throw ParseError("unknown tensor bucket: " + bucket);
    Var* v = store->find(local);
    if (v == nullptr) throw ParseError("unknown tensor in checkpoint: " + name);
    if (v->rows() != rows || v->cols() != cols)
      throw ParseError("tensor shape mismatch for " + name);
    v->value_mut() = mat;
  }
  return m;
}

}  // namespace dlr::model
