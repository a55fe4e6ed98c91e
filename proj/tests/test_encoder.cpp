#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "dlr/corpus.hpp"
#include "dlr/encoder.hpp"
#include "dlr/errors.hpp"
#include "support/gradcheck.hpp"

using namespace dlr;
using namespace dlr::encoder;
using dlr::latent::LatentSpec;
using dlr::latent::Layout;
using nn::Mat;
using nn::Var;
using testsupport::max_grad_err;

namespace {

LatentSpec make_spec(Layout layout, int M, int K, int d) {
  LatentSpec s;
  s.layout = layout;
  s.M = M;
  s.K = K;
  s.d_model = d;
  s.validate();
  return s;
}

EncoderConfig small_cfg(int d = 8, bool sinusoidal = true) {
  EncoderConfig cfg;
  cfg.d_model = d;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.dropout = 0.0;
  cfg.sinusoidal = sinusoidal;
  cfg.max_len = 64;
  return cfg;
}

}  // namespace

TEST_CASE("encoder states have one row per token and are deterministic") {
  nn::ParamStore store;
  Rng rng(21);
  Encoder enc(make_spec(Layout::global, 2, 5, 64), EncoderConfig{}, 50, store,
              "enc", rng);
  std::vector<int> doc = {4, 9, 17, 4, 33};
  nn::NoGradGuard guard;
  Var h1 = enc.encode_tokens(doc);
  CHECK(h1.rows() == 5);
  CHECK(h1.cols() == 64);
  CHECK(h1.value().allFinite());
  Var h2 = enc.encode_tokens(doc);
  CHECK(h1.value() == h2.value());
}

TEST_CASE("position encodings make the encoder order-sensitive") {
  nn::ParamStore store;
  Rng rng(22);
  Encoder enc(make_spec(Layout::global, 2, 5, 64), EncoderConfig{}, 50, store,
              "enc", rng);
  nn::NoGradGuard guard;
  Mat a = enc.encode_tokens({4, 9, 17}).value();
  Mat b = enc.encode_tokens({17, 4, 9}).value();
  CHECK((a - b).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("padding positions never influence the other states") {
  nn::ParamStore store;
  Rng rng(23);
  Encoder enc(make_spec(Layout::global, 2, 5, 64), EncoderConfig{}, 50, store,
              "enc", rng);
  nn::NoGradGuard guard;
  std::vector<int> plain = {5, 6, 7};
  std::vector<int> padded = {5, 6, 7, corpus::kPad, corpus::kPad};
  Mat h_plain = enc.encode_tokens(plain).value();
  Mat h_padded = enc.encode_tokens(padded).value();
  // Identical up to matmul reassociation noise: padded keys carry exactly
  // zero attention weight, but the larger matrix can take a different
  // accumulation path.
  CHECK((h_plain - h_padded.topRows(3)).cwiseAbs().maxCoeff() < 1e-12);

  // Pooled posteriors exclude padding, so they agree as well.
  Var probs_plain = enc.posterior_probs(enc.encode_tokens(plain), plain);
  Var probs_padded = enc.posterior_probs(enc.encode_tokens(padded), padded);
  CHECK((probs_plain.value() - probs_padded.value()).cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("zeroed heads give uniform posteriors and rows always normalize") {
  nn::ParamStore store;
  Rng rng(24);
  auto spec = make_spec(Layout::local, 2, 5, 8);
  Encoder enc(spec, small_cfg(), 20, store, "enc", rng);
  std::vector<int> doc = {4, 5, 6};
  nn::NoGradGuard guard;
  Var H = enc.encode_tokens(doc);

  Var probs = enc.posterior_probs(H, doc);
  CHECK(probs.rows() == 2 * 3);  // M * L rows, m-major
  CHECK(probs.cols() == 5);
  for (long r = 0; r < probs.rows(); ++r) {
    CHECK(probs.value().row(r).sum() == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(probs.value().row(r).minCoeff() > 0.0);
  }

  for (int m = 0; m < 2; ++m) {
    Var head = *store.find("enc.head" + std::to_string(m));
    head.value_mut().setZero();
  }
  Var uniform = enc.posterior_probs(enc.encode_tokens(doc), doc);
  CHECK((uniform.value().array() - 0.2).abs().maxCoeff() < 1e-12);
}

TEST_CASE("global posteriors mean-pool per head") {
  nn::ParamStore store;
  Rng rng(25);
  auto spec = make_spec(Layout::global, 3, 4, 8);
  Encoder enc(spec, small_cfg(), 20, store, "enc", rng);
  std::vector<int> doc = {4, 5, 6, 7};
  nn::NoGradGuard guard;
  Var H = enc.encode_tokens(doc);
  Var probs = enc.posterior_probs(H, doc);
  CHECK(probs.rows() == 3);
  CHECK(probs.cols() == 4);

  // Independent oracle: softmax of the average of W_m h_t over tokens.
  for (int m = 0; m < 3; ++m) {
    Mat w = store.find("enc.head" + std::to_string(m))->value();
    Mat logits = H.value() * w.transpose();
    Eigen::RowVectorXd mean = logits.colwise().mean();
    Eigen::ArrayXd e = (mean.array() - mean.maxCoeff()).exp();
    Eigen::ArrayXd sm = e / e.sum();
    for (int k = 0; k < 4; ++k)
      CHECK(probs.value()(m, k) == doctest::Approx(sm(k)).epsilon(1e-12));
  }
}

TEST_CASE("without position encodings global posteriors ignore token order") {
  nn::ParamStore store;
  Rng rng(26);
  auto spec = make_spec(Layout::global, 2, 4, 8);
  Encoder enc(spec, small_cfg(8, false), 20, store, "enc", rng);
  nn::NoGradGuard guard;
  std::vector<int> doc = {4, 5, 6};
  std::vector<int> perm = {6, 4, 5};
  Mat a = enc.posterior_probs(enc.encode_tokens(doc), doc).value();
  Mat b = enc.posterior_probs(enc.encode_tokens(perm), perm).value();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("local vq slices are lossless and global vq projects then pools") {
  nn::ParamStore store;
  Rng rng(27);
  auto local = make_spec(Layout::local, 2, 4, 8);
  Encoder enc(local, small_cfg(), 20, store, "enc", rng);
  std::vector<int> doc = {4, 5, 6};
  nn::NoGradGuard guard;
  Var H = enc.encode_tokens(doc);
  auto blocks = enc.vq_encode(H, doc);
  REQUIRE(blocks.size() == 2);
  CHECK(blocks[0].rows() == 3);
  CHECK(blocks[0].cols() == 4);
  Mat recon(3, 8);
  recon << blocks[0].value(), blocks[1].value();
  CHECK((recon - H.value()).cwiseAbs().maxCoeff() == 0.0);

  nn::ParamStore store1;
  Rng rng1(28);
  Encoder id_enc(make_spec(Layout::local, 1, 4, 8), small_cfg(), 20, store1,
                 "enc", rng1);
  Var H1 = id_enc.encode_tokens(doc);
  auto one = id_enc.vq_encode(H1, doc);
  REQUIRE(one.size() == 1);
  CHECK(one[0].value() == H1.value());

  nn::ParamStore store2;
  Rng rng2(29);
  auto global = make_spec(Layout::global, 4, 4, 8);
  Encoder genc(global, small_cfg(), 20, store2, "enc", rng2);
  Var Hg = genc.encode_tokens(doc);
  auto gblocks = genc.vq_encode(Hg, doc);
  REQUIRE(gblocks.size() == 4);
  for (const auto& b : gblocks) {
    CHECK(b.rows() == 1);
    CHECK(b.cols() == 8);
  }

  // Every token matters to the pooled encoding.
  std::vector<int> changed = {4, 5, 7};
  Var Hc = genc.encode_tokens(changed);
  auto cblocks = genc.vq_encode(Hc, changed);
  CHECK((gblocks[0].value() - cblocks[0].value()).cwiseAbs().maxCoeff() >
        1e-8);
}

TEST_CASE("encoder rejects malformed documents") {
  nn::ParamStore store;
  Rng rng(30);
  Encoder enc(make_spec(Layout::global, 2, 4, 8), small_cfg(), 20, store,
              "enc", rng);
  CHECK_THROWS_AS(enc.encode_tokens({}), ConfigError);
  CHECK_THROWS_AS(enc.encode_tokens({4, 99}), ConfigError);
  CHECK_THROWS_AS(enc.encode_tokens({corpus::kPad, corpus::kPad}),
                  ConfigError);
}

TEST_CASE("posterior gradients reach every encoder parameter") {
  nn::ParamStore store;
  Rng rng(31);
  auto spec = make_spec(Layout::global, 2, 3, 8);
  Encoder enc(spec, small_cfg(), 12, store, "enc", rng);
  std::vector<int> doc = {4, 5, 6};
  Rng crng(99);
  Mat c = nn::normal_init(crng, 2, 3, 1.0);
  auto loss = [&] {
    return nn::sum(
        nn::mul_const(enc.posterior_probs(enc.encode_tokens(doc), doc), c));
  };
  for (const auto& [name, p] : store.items()) {
    INFO(name);
    if (name == "enc.vq_proj") continue;  // not on the posterior path
    CHECK(max_grad_err(loss, p, 1e-5) < 2e-5);
  }

  Mat c2 = nn::normal_init(crng, 1, 8, 1.0);
  auto vq_loss = [&] {
    auto blocks = enc.vq_encode(enc.encode_tokens(doc), doc);
    return nn::sum(nn::mul_const(blocks[1], c2));
  };
  CHECK(max_grad_err(vq_loss, *store.find("enc.vq_proj"), 1e-5) < 2e-5);
  CHECK(max_grad_err(vq_loss, *store.find("enc.tok_emb"), 1e-5) < 2e-5);
}
