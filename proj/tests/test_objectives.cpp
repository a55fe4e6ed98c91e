#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "dlr/errors.hpp"
#include "dlr/objectives.hpp"
#include "support/synthetic.hpp"

using namespace dlr;
using nn::Mat;
using nn::Var;

namespace {

model::ModelConfig tiny_config(model::Method method, latent::Layout layout,
                               int M, int K, std::uint64_t seed = 7) {
  model::ModelConfig cfg;
  cfg.method = method;
  cfg.spec.layout = layout;
  cfg.spec.M = M;
  cfg.spec.K = K;
  cfg.spec.d_model = 16;
  cfg.enc.d_model = cfg.dec.d_model = 16;
  cfg.enc.n_heads = cfg.dec.n_heads = 2;
  cfg.enc.d_ff = cfg.dec.d_ff = 32;
  cfg.enc.dropout = cfg.dec.dropout = 0.0;
  cfg.enc.max_len = cfg.dec.max_len = 64;
  cfg.seed = seed;
  return cfg;
}

corpus::Document doc_of(std::vector<int> tokens) {
  corpus::Document d;
  d.tokens = std::move(tokens);
  return d;
}

Mat store_grad(model::Model& m, const std::string& name) {
  Var* v = m.enc_params().find(name);
  if (v == nullptr) v = m.dec_params().find(name);
  if (v == nullptr) v = m.cb_params().find(name);
  REQUIRE(v != nullptr);
  return v->grad();
}

}  // namespace

TEST_CASE("training config validation enforces method-specific fields") {
  objectives::TrainingConfig cfg;
  cfg.gamma = 0.4;
  CHECK_THROWS_AS(cfg.validate(model::Method::vqvae), ConfigError);
  CHECK_NOTHROW(cfg.validate(model::Method::catvae));

  objectives::TrainingConfig cfg2;
  cfg2.beta = 0.01;
  CHECK_THROWS_AS(cfg2.validate(model::Method::catvae), ConfigError);
  CHECK_NOTHROW(cfg2.validate(model::Method::vqvae));

  objectives::TrainingConfig cfg3;
  cfg3.e_steps = 3;
  CHECK_THROWS_AS(cfg3.validate(model::Method::catvae), ConfigError);
  CHECK_NOTHROW(cfg3.validate(model::Method::hardem));
  cfg3.alternating = true;
  CHECK_NOTHROW(cfg3.validate(model::Method::catvae));
  CHECK_THROWS_AS(cfg3.validate(model::Method::hardem), ConfigError);

  objectives::TrainingConfig cfg4;
  cfg4.tau = 0.0;
  CHECK_THROWS_AS(cfg4.validate(model::Method::catvae), ConfigError);
}

TEST_CASE("categorical KL matches the direct divergence against uniform") {
  auto mc = tiny_config(model::Method::catvae, latent::Layout::local, 2, 5);
  model::Model m(mc, 24, 1);
  objectives::TrainingConfig cfg;
  cfg.gamma = 0.0;
  Rng rng(11);

  for (int trial = 0; trial < 4; ++trial) {
    auto doc = doc_of({4 + trial, 9, 14, 7 + trial});
    auto res = objectives::catvae_loss(doc, m, cfg, rng);

    Mat q;
    {
      nn::NoGradGuard guard;
      Var H = m.enc().encode_tokens(doc.tokens);
      q = m.enc().posterior_probs(H, doc.tokens).value();
    }
    double direct = 0.0;
    for (long r = 0; r < q.rows(); ++r)
      for (long k = 0; k < q.cols(); ++k)
        direct += q(r, k) * std::log(q(r, k) * static_cast<double>(q.cols()));
    CHECK(res.breakdown.kl_raw == doctest::Approx(direct).epsilon(1e-6));
    CHECK(res.breakdown.kl_raw >= -1e-9);
    const double bound =
        static_cast<double>(q.rows()) * std::log(static_cast<double>(q.cols()));
    CHECK(res.breakdown.kl_raw <= bound + 1e-9);
  }
}

TEST_CASE("free-bits clamp freezes the KL penalty below the floor") {
  auto mc = tiny_config(model::Method::catvae, latent::Layout::local, 2, 5);
  model::Model m(mc, 24, 1);
  for (int h = 0; h < 2; ++h)
    m.enc_params().find("enc.head" + std::to_string(h))->value_mut().setZero();
  auto doc = doc_of({4, 9, 14, 7});
  const double bound = 2.0 * 4.0 * std::log(5.0);

  objectives::TrainingConfig half;
  half.gamma = 0.5;
  Rng r1(77);
  auto res = objectives::catvae_loss(doc, m, half, r1);
  CHECK(std::abs(res.breakdown.kl_raw) < 1e-9);  // uniform posterior
  CHECK(res.breakdown.kl_clamped == doctest::Approx(0.5 * bound));

  // With the clamp active the penalty is a constant, so two different
  // floors must produce bit-identical gradients under the same sample.
  auto grads_for = [&](double gamma) {
    objectives::TrainingConfig c;
    c.gamma = gamma;
    Rng rng(123);
    m.enc_params().zero_grads();
    m.dec_params().zero_grads();
    auto r = objectives::catvae_loss(doc, m, c, rng);
    r.loss.backward();
    return store_grad(m, "enc.head0");
  };
  Mat g_half = grads_for(0.5);
  Mat g_high = grads_for(0.9);
  CHECK((g_half - g_high).cwiseAbs().maxCoeff() == 0.0);

  // A live KL path (floor at zero) must differ once the posterior is not
  // exactly uniform.
  m.enc_params().find("enc.head0")->value_mut().setRandom();
  Mat g_live = grads_for(0.0);
  Mat g_clamped = grads_for(5.0);
  CHECK((g_live - g_clamped).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("saturated posteriors approach the KL upper bound") {
  auto mc = tiny_config(model::Method::catvae, latent::Layout::local, 2, 5);
  model::Model m(mc, 24, 1);
  for (int h = 0; h < 2; ++h) {
    Var* w = m.enc_params().find("enc.head" + std::to_string(h));
    w->value_mut() *= 40.0;
  }
  objectives::TrainingConfig cfg;
  Rng rng(5);
  auto doc = doc_of({4, 9, 14, 7});
  auto res = objectives::catvae_loss(doc, m, cfg, rng);
  const double bound = 2.0 * 4.0 * std::log(5.0);
  CHECK(res.breakdown.kl_raw > 0.9 * bound);
  CHECK(res.breakdown.kl_raw <= bound + 1e-9);
}

TEST_CASE("gamma of one turns the objective into reconstruction only") {
  auto mc = tiny_config(model::Method::catvae, latent::Layout::global, 3, 4);
  model::Model m(mc, 24, 1);
  objectives::TrainingConfig cfg;
  cfg.gamma = 1.0;
  Rng rng(9);
  auto doc = doc_of({4, 9, 14, 7, 12});
  auto res = objectives::catvae_loss(doc, m, cfg, rng);
  const double bound = 3.0 * std::log(4.0);
  CHECK(res.breakdown.kl_clamped == doctest::Approx(bound).epsilon(1e-12));
  CHECK(res.breakdown.total ==
        doctest::Approx(-res.breakdown.reconstruction + bound).epsilon(1e-12));
}

TEST_CASE("vq loss terms match independent recomputation") {
  auto mc = tiny_config(model::Method::vqvae, latent::Layout::local, 2, 6);
  model::Model m(mc, 24, 1);
  objectives::TrainingConfig cfg;
  cfg.beta = 0.01;
  auto doc = doc_of({4, 9, 14, 7, 12});
  auto res = objectives::vqvae_loss(doc, m, cfg);

  double cb_term = 0.0;
  for (int mi = 0; mi < 2; ++mi) {
    const Mat& table = m.codebook().table(mi).value();
    const Mat& enc = res.encodings[static_cast<size_t>(mi)];
    for (long l = 0; l < enc.rows(); ++l) {
      Eigen::RowVectorXd diff =
          enc.row(l) - table.row(res.codes.codes(mi, static_cast<int>(l)));
      cb_term += diff.squaredNorm();
    }
  }
  CHECK(res.breakdown.codebook_term ==
        doctest::Approx(cb_term).epsilon(1e-12));
  CHECK(res.breakdown.commitment_term ==
        doctest::Approx(cb_term).epsilon(1e-12));  // same distances
  CHECK(res.breakdown.total ==
        doctest::Approx(-res.breakdown.reconstruction + cb_term +
                        0.01 * cb_term)
            .epsilon(1e-12));
}

TEST_CASE("vq terms vanish when the encoding sits on a codebook row") {
  auto mc = tiny_config(model::Method::vqvae, latent::Layout::local, 1, 6);
  model::Model m(mc, 24, 1);
  objectives::TrainingConfig cfg;
  cfg.beta = 0.01;
  auto doc = doc_of({9});

  auto first = objectives::vqvae_loss(doc, m, cfg);
  m.cb_params().find("cb.e0")->value_mut().row(3) = first.encodings[0].row(0);
  auto res = objectives::vqvae_loss(doc, m, cfg);
  CHECK(res.codes.codes(0, 0) == 3);
  CHECK(res.breakdown.codebook_term == 0.0);
  CHECK(res.breakdown.commitment_term == 0.0);
}

TEST_CASE("vq codebook gradient equals the assignment-sum closed form") {
  auto mc = tiny_config(model::Method::vqvae, latent::Layout::local, 2, 6);
  model::Model m(mc, 24, 1);
  objectives::TrainingConfig cfg;
  cfg.beta = 0.3;
  auto doc = doc_of({4, 9, 14, 7, 12});

  m.enc_params().zero_grads();
  m.dec_params().zero_grads();
  m.cb_params().zero_grads();
  auto res = objectives::vqvae_loss(doc, m, cfg);
  res.loss.backward();

  for (int mi = 0; mi < 2; ++mi) {
    const Mat& table = m.codebook().table(mi).value();
    const Mat& enc = res.encodings[static_cast<size_t>(mi)];
    Mat expect = Mat::Zero(table.rows(), table.cols());
    for (long l = 0; l < enc.rows(); ++l) {
      const int j = res.codes.codes(mi, static_cast<int>(l));
      expect.row(j) += 2.0 * (table.row(j) - enc.row(l));
    }
    Mat got = store_grad(m, "cb.e" + std::to_string(mi));
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-10);
  }

  // The straight-through estimator must carry reconstruction gradient back
  // into the encoder even though the decoder saw only codebook rows.
  CHECK(store_grad(m, "enc.tok_emb").cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("ema codebooks receive no gradient and drop the codebook term") {
  auto mc = tiny_config(model::Method::vqvae, latent::Layout::local, 2, 6);
  mc.ema = true;
  model::Model m(mc, 24, 1);
  objectives::TrainingConfig cfg;
  cfg.beta = 0.01;
  auto doc = doc_of({4, 9, 14, 7});

  m.cb_params().zero_grads();
  auto res = objectives::vqvae_loss(doc, m, cfg);
  res.loss.backward();
  CHECK(store_grad(m, "cb.e0").cwiseAbs().maxCoeff() == 0.0);
  CHECK(store_grad(m, "cb.e1").cwiseAbs().maxCoeff() == 0.0);
  CHECK(res.breakdown.codebook_term > 0.0);
  CHECK(res.breakdown.total ==
        doctest::Approx(-res.breakdown.reconstruction +
                        0.01 * res.breakdown.commitment_term)
            .epsilon(1e-12));
}

TEST_CASE("hard EM keeps the parameter partition strict") {
  auto mc = tiny_config(model::Method::hardem, latent::Layout::local, 2, 5);
  model::Model m(mc, 24, 1);
  objectives::TrainingConfig cfg;
  cfg.e_steps = 3;
  cfg.lr = 1e-3;

  nn::AdamOptions opts;
  opts.lr = cfg.lr;
  nn::Adam phi(m.enc_params().vars(), opts);
  nn::Adam theta(m.dec_params().vars(), opts);

  auto d1 = doc_of({4, 9, 14});
  auto d2 = doc_of({7, 12, 5, 20});
  std::vector<const corpus::Document*> batch = {&d1, &d2};

  // E phase: inference side moves, generative side bit-identical.
  auto theta_before = m.dec_params().snapshot();
  auto phi_before = m.enc_params().snapshot();
  {
    m.enc_params().zero_grads();
    m.dec_params().zero_grads();
    for (const auto* d : batch) {
      auto res = objectives::hardem_e_loss(*d, m);
      nn::scale(res.loss, 0.5).backward();
    }
    phi.step();
  }
  auto theta_mid = m.dec_params().snapshot();
  for (size_t i = 0; i < theta_before.size(); ++i)
    CHECK((theta_before[i] - theta_mid[i]).cwiseAbs().maxCoeff() == 0.0);
  bool phi_moved = false;
  auto phi_mid = m.enc_params().snapshot();
  for (size_t i = 0; i < phi_before.size(); ++i)
    phi_moved = phi_moved ||
                (phi_before[i] - phi_mid[i]).cwiseAbs().maxCoeff() > 0.0;
  CHECK(phi_moved);

  // M phase: generative side moves, inference side bit-identical.
  {
    m.enc_params().zero_grads();
    m.dec_params().zero_grads();
    for (const auto* d : batch) {
      auto res = objectives::hardem_m_loss(*d, m);
      nn::scale(res.loss, 0.5).backward();
    }
    theta.step();
  }
  auto phi_after = m.enc_params().snapshot();
  for (size_t i = 0; i < phi_mid.size(); ++i)
    CHECK((phi_mid[i] - phi_after[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("hardem_round matches a manual unrolling of its phases") {
  auto make = [] {
    auto mc = tiny_config(model::Method::hardem, latent::Layout::global, 2, 5);
    return model::Model(mc, 24, 1);
  };
  model::Model a = make();
  model::Model b = make();

  objectives::TrainingConfig cfg;
  cfg.e_steps = 3;
  nn::AdamOptions opts;
  opts.lr = cfg.lr;

  auto d1 = doc_of({4, 9, 14});
  auto d2 = doc_of({7, 12, 5, 20});
  std::vector<const corpus::Document*> batch = {&d1, &d2};

  nn::Adam phi_a(a.enc_params().vars(), opts);
  nn::Adam theta_a(a.dec_params().vars(), opts);
  auto stats = objectives::hardem_round(batch, a, cfg, phi_a, theta_a);
  CHECK(stats.e_updates == 3);

  nn::Adam phi_b(b.enc_params().vars(), opts);
  nn::Adam theta_b(b.dec_params().vars(), opts);
  for (int s = 0; s < 3; ++s) {
    b.enc_params().zero_grads();
    b.dec_params().zero_grads();
    for (const auto* d : batch)
      nn::scale(objectives::hardem_e_loss(*d, b).loss, 0.5).backward();
    phi_b.step();
  }
  b.enc_params().zero_grads();
  b.dec_params().zero_grads();
  for (const auto* d : batch)
    nn::scale(objectives::hardem_m_loss(*d, b).loss, 0.5).backward();
  theta_b.step();

  for (size_t i = 0; i < a.enc_params().items().size(); ++i)
    CHECK((a.enc_params().items()[i].second.value() -
           b.enc_params().items()[i].second.value())
              .cwiseAbs()
              .maxCoeff() == 0.0);
  for (size_t i = 0; i < a.dec_params().items().size(); ++i)
    CHECK((a.dec_params().items()[i].second.value() -
           b.dec_params().items()[i].second.value())
              .cwiseAbs()
              .maxCoeff() == 0.0);

  objectives::TrainingConfig one;
  one.e_steps = 1;
  auto s1 = objectives::hardem_round(batch, a, one, phi_a, theta_a);
  CHECK(s1.e_updates == 1);
}

TEST_CASE("E updates make progress on their own objective") {
  auto mc = tiny_config(model::Method::hardem, latent::Layout::global, 1, 4);
  model::Model m(mc, 24, 1);
  objectives::TrainingConfig cfg;
  cfg.e_steps = 3;
  cfg.lr = 1e-3;
  nn::AdamOptions opts;
  opts.lr = cfg.lr;
  nn::Adam phi(m.enc_params().vars(), opts);
  nn::Adam theta(m.dec_params().vars(), opts);

  auto corpus = testsupport::make_topic_corpus(8, 2, 8, 4, 7, 3);
  std::vector<const corpus::Document*> batch;
  for (const auto& d : corpus.docs) batch.push_back(&d);

  std::vector<double> round_means;
  for (int r = 0; r < 50; ++r) {
    auto stats = objectives::hardem_round(batch, m, cfg, phi, theta);
    round_means.push_back(stats.e_loss_mean);
  }
  int non_increasing = 0;
  for (size_t r = 1; r < round_means.size(); ++r)
    if (round_means[r] <= round_means[r - 1] + 1e-9) ++non_increasing;
  CHECK(non_increasing >= 44);  // 90% of 49 transitions
}

TEST_CASE("pretraining stops on patience and restores the best parameters") {
  auto corpus = testsupport::make_topic_corpus(60, 2, 8, 4, 7, 21);
  std::vector<corpus::Document> train(corpus.docs.begin(),
                                      corpus.docs.begin() + 48);
  std::vector<corpus::Document> dev(corpus.docs.begin() + 48,
                                    corpus.docs.end());

  auto mc = tiny_config(model::Method::catvae, latent::Layout::global, 1, 4);
  model::Model m(mc, corpus.vocab_size, 1);

  objectives::TrainingConfig cfg;
  cfg.lr = 0.3;  // deliberately unstable so dev perplexity degrades
  cfg.batch_size = 8;
  cfg.max_steps = 60;
  cfg.eval_every = 5;
  cfg.patience = 2;
  cfg.seed = 5;

  std::ostringstream log;
  auto res = objectives::pretrain(m, train, dev, cfg, &log);

  std::vector<double> ppls;
  std::vector<int> steps;
  std::istringstream lines(log.str());
  std::string line;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    ppls.push_back(j.at("dev_perplexity").get<double>());
    steps.push_back(j.at("step").get<int>());
    CHECK(j.contains("reconstruction"));
    CHECK(j.contains("kl_clamped"));
  }
  REQUIRE(!ppls.empty());
  CHECK(static_cast<int>(ppls.size()) == res.evals_run);

  size_t best = 0;
  for (size_t i = 1; i < ppls.size(); ++i)
    if (ppls[i] < ppls[best]) best = i;
  CHECK(res.best_dev_perplexity == ppls[best]);
  CHECK(res.best_step == steps[best]);
  if (res.early_stopped)
    CHECK(ppls.size() == best + 1 + static_cast<size_t>(cfg.patience));

  // The restored model must reproduce the best recorded perplexity.
  CHECK(m.corpus_perplexity(dev) == doctest::Approx(ppls[best]).epsilon(1e-12));
}

TEST_CASE("training beats a frozen-random-encoder control on topic data") {
  auto corpus = testsupport::make_topic_corpus(240, 2, 10, 5, 9, 33);
  std::vector<corpus::Document> train(corpus.docs.begin(),
                                      corpus.docs.begin() + 200);
  std::vector<corpus::Document> dev(corpus.docs.begin() + 200,
                                    corpus.docs.end());

  objectives::TrainingConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_size = 8;
  cfg.max_steps = 150;
  cfg.eval_every = 50;
  cfg.patience = 5;
  cfg.seed = 2;

  auto mc = tiny_config(model::Method::catvae, latent::Layout::global, 1, 4,
                        /*seed=*/40);
  model::Model trained(mc, corpus.vocab_size, 1);
  auto r_trained = objectives::pretrain(trained, train, dev, cfg);

  model::Model control(mc, corpus.vocab_size, 1);
  auto ctrl_cfg = cfg;
  ctrl_cfg.frozen_encoder = true;
  auto r_control = objectives::pretrain(control, train, dev, ctrl_cfg);

  CHECK(r_trained.best_dev_perplexity < r_control.best_dev_perplexity);
}

TEST_CASE("a poisoned parameter aborts training with a numerical error") {
  auto corpus = testsupport::make_topic_corpus(24, 2, 8, 4, 7, 8);
  std::vector<corpus::Document> train(corpus.docs.begin(),
                                      corpus.docs.begin() + 16);
  std::vector<corpus::Document> dev(corpus.docs.begin() + 16,
                                    corpus.docs.end());

  auto mc = tiny_config(model::Method::catvae, latent::Layout::global, 1, 4);
  model::Model m(mc, corpus.vocab_size, 1);
  m.enc_params().find("enc.tok_emb")->value_mut().setConstant(
      std::numeric_limits<double>::quiet_NaN());

  objectives::TrainingConfig cfg;
  cfg.max_steps = 10;
  cfg.eval_every = 5;
  cfg.batch_size = 4;
  CHECK_THROWS_AS(objectives::pretrain(m, train, dev, cfg), NumericalError);
}
