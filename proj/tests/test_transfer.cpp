#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dlr/errors.hpp"
#include "dlr/transfer.hpp"
#include "support/synthetic.hpp"

using namespace dlr;
using nn::Mat;

namespace {

latent::LatentSpec global_spec(int M, int K, int d = 16) {
  latent::LatentSpec s;
  s.layout = latent::Layout::global;
  s.M = M;
  s.K = K;
  s.d_model = d;
  return s;
}

// Codes whose first symbol determines the class; the remaining symbols are
// noise. Linearly separable once the symbol is embedded.
struct CodedTask {
  std::vector<latent::CodeAssignment> codes;
  std::vector<transfer::Example> examples;
};

CodedTask make_separable_task(const latent::LatentSpec& spec, int classes,
                              int n, std::uint64_t seed) {
  CodedTask task;
  Rng rng(seed);
  task.codes.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    latent::CodeAssignment a;
    a.spec = spec;
    a.codes.resize(spec.M, 1);
    for (int m = 0; m < spec.M; ++m)
      a.codes(m, 0) = static_cast<int>(rng.bounded(
          static_cast<std::uint64_t>(spec.K)));
    task.codes.push_back(std::move(a));
  }
  for (int i = 0; i < n; ++i)
    task.examples.push_back(
        {&task.codes[static_cast<size_t>(i)],
         task.codes[static_cast<size_t>(i)].codes(0, 0) % classes});
  return task;
}

model::ModelConfig tiny_model_config(latent::Layout layout, int M, int K) {
  model::ModelConfig cfg;
  cfg.method = model::Method::catvae;
  cfg.spec.layout = layout;
  cfg.spec.M = M;
  cfg.spec.K = K;
  cfg.spec.d_model = 16;
  cfg.enc.d_model = cfg.dec.d_model = 16;
  cfg.enc.n_heads = cfg.dec.n_heads = 2;
  cfg.enc.d_ff = cfg.dec.d_ff = 32;
  cfg.enc.dropout = cfg.dec.dropout = 0.0;
  cfg.enc.max_len = cfg.dec.max_len = 64;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("encode_corpus is deterministic and layout-shaped") {
  auto corpus = testsupport::make_topic_corpus(6, 2, 8, 4, 7, 13);

  auto mc = tiny_model_config(latent::Layout::global, 4, 5);
  model::Model m(mc, corpus.vocab_size, 1);
  auto c1 = transfer::encode_corpus(m, corpus.docs);
  auto c2 = transfer::encode_corpus(m, corpus.docs);
  REQUIRE(c1.size() == corpus.docs.size());
  for (size_t i = 0; i < c1.size(); ++i) {
    CHECK(c1[i].M() == 4);
    CHECK(c1[i].L() == 1);
    CHECK(c1[i].codes == c2[i].codes);
  }

  auto lc = tiny_model_config(latent::Layout::local, 2, 5);
  model::Model lm(lc, corpus.vocab_size, 1);
  auto codes = transfer::encode_corpus(lm, corpus.docs);
  for (size_t i = 0; i < codes.size(); ++i) {
    CHECK(codes[i].M() == 2);
    CHECK(codes[i].L() ==
          static_cast<long>(corpus.docs[i].tokens.size()));
  }
}

TEST_CASE("class distribution is a distribution and zero head is uniform") {
  auto spec = global_spec(2, 6);
  transfer::ClassifierConfig cfg;
  cfg.classes = 4;
  Rng rng(5);
  transfer::Classifier clf(spec, cfg, {}, rng);

  auto task = make_separable_task(spec, 4, 10, 2);
  for (const auto& ex : task.examples) {
    Mat p = clf.class_distribution(*ex.codes);
    CHECK(p.rows() == 1);
    CHECK(p.cols() == 4);
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.minCoeff() >= 0.0);
  }

  clf.params().find("task.w")->value_mut().setZero();
  clf.params().find("task.b")->value_mut().setZero();
  Mat p = clf.class_distribution(*task.examples[0].codes);
  for (long k = 0; k < 4; ++k)
    CHECK(p(0, k) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("mean pooling ignores the order of positions") {
  latent::LatentSpec spec;
  spec.layout = latent::Layout::local;
  spec.M = 2;
  spec.K = 6;
  spec.d_model = 16;

  transfer::ClassifierConfig cfg;
  cfg.classes = 3;
  Rng rng(8);
  transfer::Classifier clf(spec, cfg, {}, rng);

  latent::CodeAssignment a;
  a.spec = spec;
  a.codes.resize(2, 5);
  a.codes << 0, 1, 2, 3, 4, 5, 4, 3, 2, 1;
  latent::CodeAssignment b = a;
  b.codes.col(0).swap(b.codes.col(4));
  b.codes.col(1).swap(b.codes.col(3));

  Mat pa = clf.class_distribution(a);
  Mat pb = clf.class_distribution(b);
  CHECK((pa - pb).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("separable codes reach high dev accuracy from 200 labels") {
  auto spec = global_spec(2, 8);
  auto train = make_separable_task(spec, 4, 200, 11);
  auto dev = make_separable_task(spec, 4, 80, 12);

  transfer::ClassifierConfig cfg;
  cfg.classes = 4;
  cfg.seed = 1;
  Rng rng(1);
  transfer::Classifier clf(spec, cfg, {}, rng);
  auto res = transfer::train_classifier(clf, train.examples, dev.examples);
  CHECK(res.dev_accuracy >= 0.95);
  CHECK(transfer::accuracy(clf, dev.examples) == res.dev_accuracy);
}

TEST_CASE("shuffled labels fall to the chance floor") {
  auto spec = global_spec(2, 8);
  auto train = make_separable_task(spec, 4, 400, 21);
  auto test = make_separable_task(spec, 4, 400, 22);

  // Reassign labels uniformly at random, severing any code-label link.
  Rng shuffle_rng(77);
  for (auto& ex : train.examples)
    ex.label = static_cast<int>(shuffle_rng.bounded(4));
  for (auto& ex : test.examples)
    ex.label = static_cast<int>(shuffle_rng.bounded(4));
  std::vector<transfer::Example> dev(train.examples.begin(),
                                     train.examples.begin() + 80);
  std::vector<transfer::Example> tr(train.examples.begin() + 80,
                                    train.examples.end());

  transfer::ClassifierConfig cfg;
  cfg.classes = 4;
  cfg.seed = 9;
  Rng rng(9);
  transfer::Classifier clf(spec, cfg, {}, rng);
  transfer::train_classifier(clf, tr, dev);
  double acc = transfer::accuracy(clf, test.examples);
  CHECK(acc > 0.25 - 0.05);
  CHECK(acc < 0.25 + 0.05);
}

TEST_CASE("pretrained mode keeps the embedding tables frozen") {
  auto spec = global_spec(1, 8);
  std::vector<Mat> tables;
  Rng trng(3);
  tables.push_back(nn::normal_init(trng, 8, 16, 1.0));
  std::vector<Mat> before = tables;

  auto train = make_separable_task(spec, 4, 200, 31);
  auto dev = make_separable_task(spec, 4, 80, 32);

  transfer::ClassifierConfig cfg;
  cfg.embed_mode = transfer::EmbedMode::pretrained;
  cfg.classes = 4;
  cfg.max_epochs = 300;  // fixed tables learn slowly at the pinned lr
  cfg.patience = 50;
  Rng rng(4);
  transfer::Classifier clf(spec, cfg, tables, rng);
  auto res = transfer::train_classifier(clf, train.examples, dev.examples);
  CHECK(res.dev_accuracy >= 0.9);  // random-but-distinct rows are separable

  CHECK((tables[0] - before[0]).cwiseAbs().maxCoeff() == 0.0);
  CHECK(clf.params().find("task.e0") == nullptr);
}

TEST_CASE("classifier training leaves a real model untouched") {
  auto corpus = testsupport::make_topic_corpus(80, 2, 8, 4, 7, 41);
  auto mc = tiny_model_config(latent::Layout::global, 2, 6);
  model::Model m(mc, corpus.vocab_size, 1);

  auto enc_before = m.enc_params().snapshot();
  auto dec_before = m.dec_params().snapshot();

  auto codes = transfer::encode_corpus(m, corpus.docs);
  std::vector<transfer::Example> ex;
  for (size_t i = 0; i < codes.size(); ++i)
    ex.push_back({&codes[i], *corpus.docs[i].label});
  std::vector<transfer::Example> dev(ex.begin(), ex.begin() + 20);
  std::vector<transfer::Example> tr(ex.begin() + 20, ex.end());

  std::vector<Mat> pretrained;
  for (const auto& t : m.latent_tables()) pretrained.push_back(t.value());
  transfer::ClassifierConfig cfg;
  cfg.embed_mode = transfer::EmbedMode::pretrained;
  cfg.classes = 2;
  Rng rng(6);
  transfer::Classifier clf(m.config().spec, cfg, pretrained, rng);
  transfer::train_classifier(clf, tr, dev);

  auto enc_after = m.enc_params().snapshot();
  auto dec_after = m.dec_params().snapshot();
  for (size_t i = 0; i < enc_before.size(); ++i)
    CHECK((enc_before[i] - enc_after[i]).cwiseAbs().maxCoeff() == 0.0);
  for (size_t i = 0; i < dec_before.size(); ++i)
    CHECK((dec_before[i] - dec_after[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("reembed accuracy is stable under a global code relabeling") {
  auto spec = global_spec(1, 8);
  auto train = make_separable_task(spec, 4, 300, 51);
  auto dev = make_separable_task(spec, 4, 100, 52);
  auto test = make_separable_task(spec, 4, 200, 53);

  auto run = [&](const std::vector<int>& perm) {
    auto remap = [&](const CodedTask& src) {
      CodedTask out;
      out.codes = src.codes;
      for (auto& a : out.codes)
        for (long m = 0; m < a.codes.rows(); ++m)
          for (long l = 0; l < a.codes.cols(); ++l)
            a.codes(m, l) = perm[static_cast<size_t>(a.codes(m, l))];
      for (size_t i = 0; i < src.examples.size(); ++i)
        out.examples.push_back({&out.codes[i], src.examples[i].label});
      return out;
    };
    CodedTask tr = remap(train);
    CodedTask dv = remap(dev);
    CodedTask te = remap(test);
    transfer::ClassifierConfig cfg;
    cfg.classes = 4;
    cfg.seed = 14;
    Rng rng(14);
    transfer::Classifier clf(spec, cfg, {}, rng);
    transfer::train_classifier(clf, tr.examples, dv.examples);
    return transfer::accuracy(clf, te.examples);
  };

  std::vector<int> identity = {0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<int> rotated = {5, 2, 7, 0, 3, 6, 1, 4};
  double a0 = run(identity);
  double a1 = run(rotated);
  CHECK(std::abs(a0 - a1) <= 0.02);
}

TEST_CASE("transformer pooling trains and differs from mean pooling") {
  auto spec = global_spec(3, 6);
  auto train = make_separable_task(spec, 3, 150, 61);
  auto dev = make_separable_task(spec, 3, 60, 62);

  transfer::ClassifierConfig cfg;
  cfg.classes = 3;
  cfg.pool = transfer::Pool::transformer_mean;
  cfg.max_epochs = 30;
  Rng rng(7);
  transfer::Classifier clf(spec, cfg, {}, rng);
  CHECK(clf.params().find("task.pool.attn.wq") != nullptr);
  auto res = transfer::train_classifier(clf, train.examples, dev.examples);
  CHECK(res.dev_accuracy >= 0.9);

  Mat p = clf.class_distribution(*train.examples[0].codes);
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("training shrinks the batch to a tiny subset") {
  auto spec = global_spec(1, 4);
  auto train = make_separable_task(spec, 2, 6, 71);
  auto dev = make_separable_task(spec, 2, 6, 72);
  for (auto& ex : train.examples) ex.label = ex.codes->codes(0, 0) % 2;
  for (auto& ex : dev.examples) ex.label = ex.codes->codes(0, 0) % 2;

  transfer::ClassifierConfig cfg;
  cfg.classes = 2;
  cfg.batch_size = 32;  // larger than the 6-example subset
  Rng rng(2);
  transfer::Classifier clf(spec, cfg, {}, rng);
  auto res = transfer::train_classifier(clf, train.examples, dev.examples);
  CHECK(res.epochs_run >= 1);
  CHECK(res.dev_accuracy > 0.0);
}

TEST_CASE("config and argument validation") {
  auto spec = global_spec(2, 4);
  Rng rng(1);

  transfer::ClassifierConfig bad;
  bad.classes = 1;
  CHECK_THROWS_AS(transfer::Classifier(spec, bad, {}, rng), ConfigError);

  transfer::ClassifierConfig cfg;
  cfg.classes = 2;
  std::vector<Mat> one_table = {Mat::Zero(4, 8)};
  cfg.embed_mode = transfer::EmbedMode::pretrained;
  CHECK_THROWS_AS(transfer::Classifier(spec, cfg, one_table, rng),
                  ConfigError);
  std::vector<Mat> wrong_rows = {Mat::Zero(3, 8), Mat::Zero(3, 8)};
  CHECK_THROWS_AS(transfer::Classifier(spec, cfg, wrong_rows, rng),
                  ConfigError);

  cfg.embed_mode = transfer::EmbedMode::reembed;
  CHECK_THROWS_AS(transfer::Classifier(spec, cfg, one_table, rng),
                  ConfigError);

  CHECK(transfer::parse_embed_mode("reembed") ==
        transfer::EmbedMode::reembed);
  CHECK(transfer::parse_pool("transformer_mean") ==
        transfer::Pool::transformer_mean);
  CHECK_THROWS_AS(transfer::parse_embed_mode("both"), ConfigError);
  CHECK_THROWS_AS(transfer::parse_pool("max"), ConfigError);
}

TEST_CASE("evaluation grid covers sizes, modes, and five seeds") {
  auto corpus = testsupport::make_topic_corpus(120, 2, 8, 4, 7, 81);
  std::vector<corpus::Document> train(corpus.docs.begin(),
                                      corpus.docs.begin() + 80);
  std::vector<corpus::Document> dev(corpus.docs.begin() + 80,
                                    corpus.docs.begin() + 100);
  std::vector<corpus::Document> test(corpus.docs.begin() + 100,
                                     corpus.docs.end());

  auto mc = tiny_model_config(latent::Layout::global, 2, 6);
  model::Model m(mc, corpus.vocab_size, 1);

  transfer::ClassifierConfig re;
  re.classes = 2;
  re.max_epochs = 5;
  transfer::ClassifierConfig pre = re;
  pre.embed_mode = transfer::EmbedMode::pretrained;

  auto report =
      transfer::evaluate_matrix(m, train, dev, test, {20, 0}, {re, pre});
  REQUIRE(report.cells.size() == 4);
  for (const auto& c : report.cells) {
    CHECK(c.accuracies.size() == 5);
    for (double a : c.accuracies) {
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
    }
    CHECK(c.mean >= 0.0);
    CHECK(c.sd >= 0.0);
  }

  auto text = report.to_text();
  CHECK(text.find("full") != std::string::npos);
  CHECK(text.find("reembed/mean") != std::string::npos);
  CHECK(text.find("pretrained/mean") != std::string::npos);

  auto j = report.to_json();
  CHECK(j.at("cells").size() == 4);

  CHECK_THROWS_AS(
      transfer::evaluate_matrix(m, train, dev, test, {5000}, {re}),
      ConfigError);
}
