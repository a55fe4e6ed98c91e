#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <vector>

#include "dlr/errors.hpp"
#include "dlr/model.hpp"

using namespace dlr;
using nn::Mat;

namespace {

model::ModelConfig tiny_config(model::Method method, latent::Layout layout,
                               int M, int K) {
  model::ModelConfig cfg;
  cfg.method = method;
  cfg.spec.layout = layout;
  cfg.spec.M = M;
  cfg.spec.K = K;
  cfg.spec.d_model = 16;
  cfg.enc.d_model = 16;
  cfg.enc.n_heads = 2;
  cfg.enc.d_ff = 32;
  cfg.enc.dropout = 0.0;
  cfg.enc.max_len = 64;
  cfg.dec.d_model = 16;
  cfg.dec.n_heads = 2;
  cfg.dec.d_ff = 32;
  cfg.dec.dropout = 0.0;
  cfg.dec.max_len = 64;
  cfg.seed = 99;
  return cfg;
}

std::vector<corpus::Document> tiny_docs() {
  std::vector<corpus::Document> docs;
  for (int i = 0; i < 4; ++i) {
    corpus::Document d;
    for (int t = 0; t < 5 + i; ++t) d.tokens.push_back(4 + (t * 3 + i) % 16);
    docs.push_back(d);
  }
  return docs;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("MAP encoding is deterministic and well-shaped for every method") {
  const int V = 20;
  std::vector<int> doc = {4, 9, 12, 7};

  for (auto method :
       {model::Method::catvae, model::Method::vqvae, model::Method::hardem}) {
    auto cfg = tiny_config(method, latent::Layout::local, 2, 6);
    model::Model m(cfg, V, 123);
    auto codes = m.encode_map(doc);
    CHECK(codes.codes.rows() == 2);
    CHECK(codes.codes.cols() == 4);
    CHECK((codes.codes.array() >= 0).all());
    CHECK((codes.codes.array() < 6).all());
    auto again = m.encode_map(doc);
    CHECK((codes.codes - again.codes).cwiseAbs().maxCoeff() == 0);
  }

  auto gcfg = tiny_config(model::Method::catvae, latent::Layout::global, 3, 5);
  model::Model gm(gcfg, V, 123);
  auto gcodes = gm.encode_map(doc);
  CHECK(gcodes.codes.rows() == 3);
  CHECK(gcodes.codes.cols() == 1);
}

TEST_CASE("vqvae MAP codes agree with direct nearest-row quantization") {
  auto cfg = tiny_config(model::Method::vqvae, latent::Layout::local, 2, 6);
  model::Model m(cfg, 20, 123);
  std::vector<int> doc = {4, 9, 12, 7, 15};

  nn::NoGradGuard guard;
  auto H = m.enc().encode_tokens(doc);
  std::vector<Mat> blocks;
  for (const auto& b : m.enc().vq_encode(H, doc)) blocks.push_back(b.value());
  auto expect = discretize::quantize(blocks, m.codebook());
  auto got = m.encode_map(doc);
  CHECK((expect.codes - got.codes).cwiseAbs().maxCoeff() == 0);
}

TEST_CASE("latent tables come from the codebook only for vqvae") {
  auto vq = tiny_config(model::Method::vqvae, latent::Layout::local, 2, 6);
  model::Model mv(vq, 20, 123);
  CHECK(&mv.latent_tables()[0].value() == &mv.codebook().table(0).value());
  CHECK(mv.dec_params().find("dec.e0") == nullptr);

  auto cat = tiny_config(model::Method::catvae, latent::Layout::local, 2, 6);
  model::Model mc(cat, 20, 123);
  CHECK(mc.dec_params().find("dec.e0") != nullptr);
  CHECK_THROWS_AS(mc.codebook(), ConfigError);
}

TEST_CASE("corpus perplexity is deterministic and at least one") {
  auto cfg = tiny_config(model::Method::hardem, latent::Layout::global, 2, 4);
  model::Model m(cfg, 20, 123);
  auto docs = tiny_docs();
  double p1 = m.corpus_perplexity(docs);
  double p2 = m.corpus_perplexity(docs);
  CHECK(p1 == p2);
  CHECK(p1 >= 1.0);
  CHECK_THROWS_AS(m.corpus_perplexity({}), ConfigError);
}

TEST_CASE("model config validation") {
  auto cfg = tiny_config(model::Method::catvae, latent::Layout::local, 2, 6);
  cfg.ema = true;
  CHECK_THROWS_AS(model::Model(cfg, 20, 1), ConfigError);

  auto cfg2 = tiny_config(model::Method::catvae, latent::Layout::local, 2, 6);
  cfg2.enc.d_model = 32;
  CHECK_THROWS_AS(model::Model(cfg2, 20, 1), ConfigError);

  auto a = tiny_config(model::Method::catvae, latent::Layout::local, 2, 6);
  auto b = tiny_config(model::Method::catvae, latent::Layout::local, 2, 6);
  CHECK(a.hash() == b.hash());
  b.spec.K = 7;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("checkpoint round trip preserves parameters and eval exactly") {
  auto cfg = tiny_config(model::Method::catvae, latent::Layout::local, 2, 6);
  model::Model m(cfg, 20, 555);
  auto docs = tiny_docs();
  double before = m.corpus_perplexity(docs);

  TempFile f("dlr_ckpt_roundtrip.bin");
  model::save_checkpoint(f.path, m);
  auto loaded = model::load_checkpoint(f.path, 20, 555);

  for (const auto& [name, v] : m.enc_params().items()) {
    auto* lv = loaded.enc_params().find(name);
    REQUIRE(lv != nullptr);
    CHECK((v.value() - lv->value()).cwiseAbs().maxCoeff() == 0.0);
  }
  for (const auto& [name, v] : m.dec_params().items()) {
    auto* lv = loaded.dec_params().find(name);
    REQUIRE(lv != nullptr);
    CHECK((v.value() - lv->value()).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(loaded.corpus_perplexity(docs) == before);
}

TEST_CASE("checkpoint round trip preserves EMA accumulators") {
  auto cfg = tiny_config(model::Method::vqvae, latent::Layout::local, 2, 6);
  cfg.ema = true;
  model::Model m(cfg, 20, 555);

  Mat encs(3, m.config().spec.code_dim());
  encs.setConstant(0.25);
  m.codebook().ema_update(0, encs, {1, 1, 4});

  TempFile f("dlr_ckpt_ema.bin");
  model::save_checkpoint(f.path, m);
  auto loaded = model::load_checkpoint(f.path, 20, 555);

  for (int mi = 0; mi < 2; ++mi) {
    CHECK((m.codebook().counts(mi) - loaded.codebook().counts(mi))
              .cwiseAbs()
              .maxCoeff() == 0.0);
    CHECK((m.codebook().sums(mi) - loaded.codebook().sums(mi))
              .cwiseAbs()
              .maxCoeff() == 0.0);
    CHECK((m.codebook().table(mi).value() -
           loaded.codebook().table(mi).value())
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("checkpoint loading refuses mismatches and corruption") {
  auto cfg = tiny_config(model::Method::catvae, latent::Layout::local, 2, 6);
  model::Model m(cfg, 20, 555);
  TempFile f("dlr_ckpt_guard.bin");
  model::save_checkpoint(f.path, m);

  CHECK_THROWS_AS(model::load_checkpoint(f.path, 20, 556), ConfigError);
  CHECK_THROWS_AS(model::load_checkpoint(f.path, 21, 555), ConfigError);
  CHECK_THROWS_AS(model::load_checkpoint("/tmp/no_such_ckpt.bin", 20, 555),
                  MissingArtifact);

  {
    std::ofstream os("/tmp/dlr_ckpt_badmagic.bin", std::ios::binary);
    os << "NOPE0000";
  }
  TempFile bad("dlr_ckpt_badmagic.bin");
  CHECK_THROWS_AS(model::load_checkpoint(bad.path, 20, 555), ParseError);

  // Truncate the tensor payload.
  std::ifstream is(f.path, std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(is)),
                  std::istreambuf_iterator<char>());
  is.close();
  {
    std::ofstream os("/tmp/dlr_ckpt_trunc.bin", std::ios::binary);
    os.write(all.data(), static_cast<std::streamsize>(all.size() - 64));
  }
  TempFile trunc("dlr_ckpt_trunc.bin");
  CHECK_THROWS_AS(model::load_checkpoint(trunc.path, 20, 555), ParseError);
}
