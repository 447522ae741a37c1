#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "co3/error.hpp"
#include "co3/lm.hpp"

using namespace co3;
using ad::Matrix;

namespace {

using Vec = Eigen::RowVectorXd;

// Independent chain-rule evaluation of a one-cell LSTM language model.
double oracle(const LanguageModel& lm, const std::vector<int>& ids) {
  const int n = lm.cell.hidden();
  Vec h = Vec::Zero(n), c = Vec::Zero(n);
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    Vec z = lm.embedding.value.row(ids[t]) * lm.cell.U.value.transpose() + h * lm.cell.W.value.transpose() + lm.cell.b.value;
    auto sg = [](const Vec& v) { return Vec((1.0 / (1.0 + (-v.array()).exp())).matrix()); };
    Vec i = sg(z.segment(0, n)), f = sg(z.segment(n, n)), o = sg(z.segment(2 * n, n));
    Vec g = z.segment(3 * n, n).array().tanh().matrix();
    c = (f.array() * c.array() + i.array() * g.array()).matrix();
    h = (o.array() * c.array().tanh()).matrix();
    Vec logits = h * lm.out_W.value.transpose() + lm.out_b.value;
    double norm = 0.0;
    for (Eigen::Index k = 0; k < logits.size(); ++k) norm += std::exp(logits(k));
    total += std::log(std::exp(logits(ids[t + 1])) / norm);
  }
  return total;
}

std::vector<std::vector<int>> toy_corpus() {
  std::vector<std::vector<int>> out;
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    std::vector<int> s{kBosId};
    const int len = 2 + static_cast<int>(rng.uniform_index(5));
    int tok = 4 + static_cast<int>(rng.uniform_index(3));
    for (int k = 0; k < len; ++k) {
      s.push_back(tok);
      tok = 4 + (tok - 4 + 1) % 6;  // mostly predictable successor
    }
    s.push_back(kEosId);
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("uniform-output language model") {
  LanguageModel lm(Side::query, {10, 4, 3});
  Rng rng(1);
  lm.initialize(rng, 0.5);
  lm.out_W.value.setZero();
  lm.out_b.value.setZero();
  const std::vector<int> seq{2, 5, 6, 3};
  CHECK(sequence_log_marginal(lm, seq) == doctest::Approx(3 * std::log(0.1)).epsilon(1e-12));
  std::vector<std::vector<int>> corpus{seq, {2, 7, 3}};
  CHECK(perplexity(lm, corpus) == doctest::Approx(10.0).epsilon(1e-12));
}

TEST_CASE("chain-rule oracle and bitwise determinism") {
  LanguageModel lm(Side::code, {7, 3, 2});
  Rng rng(5);
  lm.initialize(rng, 0.8);
  lm.out_b.value << 0.1, -0.2, 0.3, 0.0, 0.05, -0.1, 0.2;
  lm.cell.b.value.setConstant(0.15);
  const std::vector<int> seq{2, 4, 6, 3};
  CHECK(sequence_log_marginal(lm, seq) == doctest::Approx(oracle(lm, seq)).epsilon(1e-13));
  const double a = sequence_log_marginal(lm, seq), b = sequence_log_marginal(lm, seq);
  CHECK(std::memcmp(&a, &b, sizeof a) == 0);

  std::vector<int> grow{2};
  double prev = 0.0;
  for (int k = 0; k < 6; ++k) {
    grow.push_back(4 + k % 3);
    const double v = sequence_log_marginal(lm, grow);
    CHECK(v < prev);
    CHECK(std::isfinite(v));
    prev = v;
  }
  CHECK_THROWS_AS(sequence_log_marginal(lm, std::vector<int>{2}), Error);
  CHECK_THROWS_AS(sequence_log_marginal(lm, std::vector<int>{2, 40}), Error);
}

TEST_CASE("training lowers NLL and fits short sequences") {
  const auto corpus = toy_corpus();
  LmTrainOptions opt;
  opt.epochs = 5;
  opt.batch_size = 4;
  opt.lr = 0.01;
  LmTrainReport report;
  LanguageModel lm = pretrain_lm(Side::code, corpus, {10, 16, 8}, opt, &report);
  REQUIRE(report.epoch_nll.size() == 5);
  for (std::size_t e = 1; e < 5; ++e) CHECK(report.epoch_nll[e] < report.epoch_nll[e - 1]);
  for (const auto& s : corpus) CHECK(sequence_log_marginal(lm, s) <= 0.0);

  std::vector<std::vector<int>> ab{{2, 4, 5, 3}};
  LmTrainOptions two;
  two.epochs = 2;
  two.batch_size = 1;
  two.lr = 0.01;
  LanguageModel tiny = pretrain_lm(Side::query, ab, {6, 8, 4}, two);
  CHECK(sequence_log_marginal(tiny, ab[0]) > sequence_log_marginal(tiny, std::vector<int>{2, 5, 4, 3}));

  LmTrainOptions many = two;
  many.epochs = 300;
  LanguageModel memo = pretrain_lm(Side::query, ab, {6, 8, 4}, many);
  CHECK(perplexity(memo, ab) < 1.05);
  CHECK(perplexity(memo, ab) >= 1.0);

  CHECK_THROWS_AS(pretrain_lm(Side::code, std::vector<std::vector<int>>{}, {10, 4, 4}, opt), Error);
}

TEST_CASE("held-out perplexity is not below training perplexity after convergence") {
  auto corpus = toy_corpus();
  std::vector<std::vector<int>> train(corpus.begin(), corpus.begin() + 14), held(corpus.begin() + 14, corpus.end());
  // Held-out rows get a twist the model never saw.
  for (auto& s : held) std::swap(s[1], s[2]);
  LmTrainOptions opt;
  opt.epochs = 60;
  opt.batch_size = 4;
  opt.lr = 0.01;
  LanguageModel lm = pretrain_lm(Side::code, train, {10, 16, 8}, opt);
  CHECK(perplexity(lm, held) >= perplexity(lm, train));
}

TEST_CASE("language model file round trip") {
  LanguageModel lm(Side::query, {9, 5, 3});
  Rng rng(2);
  lm.initialize(rng, 0.4);
  const auto path = std::filesystem::temp_directory_path() / "co3_lm_test.co3k";
  save_language_model(lm, path);
  LanguageModel back = load_language_model(path);
  CHECK(back.side() == Side::query);
  const std::vector<int> seq{2, 4, 8, 3};
  CHECK(sequence_log_marginal(back, seq) == sequence_log_marginal(lm, seq));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_language_model(path), Error);
}
