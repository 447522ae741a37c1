#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "co3/error.hpp"
#include "co3/eval.hpp"

using namespace co3;

namespace {

Tokens words(const std::string& s) { return tokenize(s, Side::query); }

ModelParams small_model(std::uint64_t seed, int vocab = 30) {
  ModelSizing s;
  s.variant = Variant::co3;
  s.code_vocab = vocab;
  s.query_vocab = vocab;
  s.hidden = 8;
  s.embed = 6;
  s.proj = 8;
  ModelParams m(s);
  Rng rng(seed);
  m.initialize(rng, 0.5);
  return m;
}

std::vector<PairExample> random_pairs(std::size_t n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PairExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    PairExample p;
    p.code_ids = {kBosId};
    p.query_ids = {kBosId};
    const auto lc = 2 + rng.uniform_index(6), lq = 2 + rng.uniform_index(5);
    for (std::uint64_t k = 0; k < lc; ++k) p.code_ids.push_back(kReservedCount + static_cast<int>(rng.uniform_index(vocab - kReservedCount)));
    for (std::uint64_t k = 0; k < lq; ++k) p.query_ids.push_back(kReservedCount + static_cast<int>(rng.uniform_index(vocab - kReservedCount)));
    p.code_ids.push_back(kEosId);
    p.query_ids.push_back(kEosId);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST_CASE("mrr and ndcg") {
  CHECK(mrr(std::vector<int>{1, 1, 1}) == 1.0);
  CHECK(mrr(std::vector<int>{1, 2, 4}) == doctest::Approx(0.58333333333).epsilon(1e-10));
  CHECK(std::abs(mrr(std::vector<int>{1, 2, 4}) - 1.75 / 3) < 1e-15);
  CHECK(mrr(std::vector<int>{50}) == doctest::Approx(0.02));
  CHECK(ndcg(std::vector<int>{1}) == 1.0);
  CHECK(std::abs(ndcg(std::vector<int>{3}) - 0.5) < 1e-15);
  CHECK_THROWS_AS(mrr(std::vector<int>{}), Error);
  CHECK_THROWS_AS(ndcg(std::vector<int>{0}), Error);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    std::vector<int> r{1 + static_cast<int>(rng.uniform_index(50)), 1 + static_cast<int>(rng.uniform_index(50))};
    CHECK(mrr(r) > 0.0);
    CHECK(mrr(r) <= 1.0);
    CHECK(ndcg(r) > 0.0);
    CHECK(ndcg(r) <= 1.0);
  }
}

TEST_CASE("bleu") {
  std::vector<Tokens> corpus{words("the cat sat on the mat"), words("a b c d e"), words("x")};
  CHECK(bleu4(corpus, corpus) == doctest::Approx(1.0).epsilon(1e-15));

  // Hand computation: p1 = p2 = p3 = 1, no 4-gram in a 3-token candidate so
  // p4 = 1/(2*1), brevity penalty exp(1 - 4/3).
  const double hand = std::pow(1.0 * 1.0 * 1.0 * 0.5, 0.25) * std::exp(1.0 - 4.0 / 3.0);
  CHECK(std::abs(sentence_bleu4(words("the cat sat"), words("the cat sat down")) - hand) < 1e-9);

  std::vector<Tokens> cands, refs;
  for (int i = 0; i < 100; ++i) {
    Tokens c, r;
    for (int k = 0; k < 10; ++k) {
      c.push_back("c" + std::to_string(i * 10 + k));
      r.push_back("r" + std::to_string(i * 10 + k));
    }
    cands.push_back(c);
    refs.push_back(r);
  }
  CHECK(bleu4(cands, refs) < 1e-3);
  CHECK(sentence_bleu4(Tokens{}, words("a b")) == 0.0);
  CHECK_THROWS_AS(bleu4(cands, std::vector<Tokens>{}), Error);

  // Clipping: repeated candidate words only count up to the reference count.
  const double clipped = sentence_bleu4(words("the the the the"), words("the cat"));
  const double p1 = 1.0 / 4, p2 = 1.0 / (2 * 3), p3 = 1.0 / (2 * 2), p4 = 1.0 / (2 * 1);
  CHECK(clipped == doctest::Approx(std::pow(p1 * p2 * p3 * p4, 0.25)).epsilon(1e-12));
}

TEST_CASE("meteor") {
  const Tokens four = words("select all from table");
  CHECK(meteor(four, four) == doctest::Approx(1.0 - 0.5 / 64).epsilon(1e-12));
  CHECK(meteor(words("a b"), words("c d")) == 0.0);
  CHECK(meteor(Tokens{}, words("c d")) == 0.0);

  const auto a = meteor_align(words("the cat sat on the mat"), words("on the mat the cat sat"));
  CHECK(a.matches == 6);
  CHECK(a.chunks == 2);
  CHECK(meteor(words("the cat sat on the mat"), words("on the mat the cat sat")) ==
        doctest::Approx(1.0 - 0.5 * std::pow(2.0 / 6.0, 3)).epsilon(1e-12));

  const auto b = meteor_align(words("a b c a b"), words("a b"));
  CHECK(b.matches == 2);
  CHECK(b.chunks == 1);
  // P = 2/5, R = 1, F = 10PR / (R + 9P)
  const double P = 0.4, R = 1.0, F = 10 * P * R / (R + 9 * P);
  CHECK(meteor(words("a b c a b"), words("a b")) == doctest::Approx(F * (1 - 0.5 / 8)).epsilon(1e-12));

  Rng rng(6);
  const std::vector<std::string> pool{"a", "b", "c", "d", "e"};
  for (int i = 0; i < 300; ++i) {
    Tokens c, r;
    for (std::uint64_t k = 0, n = rng.uniform_index(12); k < n; ++k) c.push_back(pool[rng.uniform_index(5)]);
    for (std::uint64_t k = 0, n = 1 + rng.uniform_index(12); k < n; ++k) r.push_back(pool[rng.uniform_index(5)]);
    const double s = meteor(c, r);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("bleu buckets") {
  std::vector<BucketInput> ones(5, {1.0, 2});
  auto top = bleu_bucket_analysis(ones);
  for (int k = 0; k < 9; ++k) CHECK(top[k].count == 0);
  CHECK(top[9].count == 5);
  CHECK(top[9].mean_mrr == 0.5);

  std::vector<BucketInput> hand{{0.05, 1}, {0.07, 2}, {0.15, 4}, {0.1, 1}, {0.3, 5}, {0.99, 1}, {1.0, 2}};
  auto b = bleu_bucket_analysis(hand);
  CHECK(b[0].count == 2);
  CHECK(b[0].mean_mrr == 0.75);
  CHECK(b[1].count == 2);
  CHECK(b[1].mean_mrr == 0.625);
  CHECK(b[3].count == 1);
  CHECK(b[3].mean_mrr == 0.2);
  CHECK(b[9].count == 2);
  CHECK(b[9].mean_mrr == 0.75);
  int total = 0;
  for (const auto& x : b) total += x.count;
  CHECK(total == 7);
  CHECK(b[2].mean_mrr == 0.0);
  CHECK_THROWS_AS(bleu_bucket_analysis(std::vector<BucketInput>{{1.5, 1}}), Error);
}

TEST_CASE("retrieval protocol") {
  ModelParams m = small_model(2);
  auto pairs = random_pairs(60, 30, 9);
  EvalReport a = evaluate_retrieval(m, pairs, 49, 7);
  EvalReport b = evaluate_retrieval(m, pairs, 49, 7);
  REQUIRE(a.examples.size() == 60);
  for (std::size_t i = 0; i < 60; ++i) {
    CHECK(*a.examples[i].gold_rank == *b.examples[i].gold_rank);
    CHECK(a.examples[i].pool_size == 50);
    CHECK(*a.examples[i].gold_rank >= 1);
    CHECK(*a.examples[i].gold_rank <= 50);
  }
  CHECK(*a.mrr == *b.mrr);

  EvalReport shrunk = evaluate_retrieval(m, std::span<const PairExample>(pairs.data(), 10), 49, 7);
  CHECK(shrunk.n_distractors == 9);
  CHECK(shrunk.warnings.size() == 1);

  // Identical codes tie everywhere; the gold's rank is its pool position,
  // which is uniform, so ranks spread over the whole pool.
  auto dup = pairs;
  for (auto& p : dup) p.code_ids = dup[0].code_ids;
  EvalReport tied = evaluate_retrieval(m, dup, 9, 3);
  std::set<int> seen;
  for (const auto& e : tied.examples) seen.insert(*e.gold_rank);
  CHECK(seen.size() > 5);
}

TEST_CASE("summarisation protocol and report files") {
  ModelParams m = small_model(4);
  auto pairs = random_pairs(12, 30, 5);
  std::vector<std::string> toks;
  for (int i = kReservedCount; i < 30; ++i) toks.push_back("w" + std::to_string(i));
  Vocab vq = Vocab::from_tokens(toks);
  EvalReport s = evaluate_summarization(m, vq, pairs, 6);
  EvalReport s2 = evaluate_summarization(m, vq, pairs, 6);
  REQUIRE(s.examples.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(*s.examples[i].hypothesis == *s2.examples[i].hypothesis);
    for (const auto& w : *s.examples[i].hypothesis) CHECK(w != "<pad>");
    CHECK(s.examples[i].hypothesis->size() <= 6);
  }
  CHECK(*s.corpus_bleu4 == *s2.corpus_bleu4);
  EvalReport beam = evaluate_summarization(m, vq, pairs, 6, 1);
  CHECK(*beam.corpus_bleu4 == *s.corpus_bleu4);

  EvalReport r = evaluate_retrieval(m, pairs, 5, 1);
  EvalReport merged = merge_reports(r, s);
  REQUIRE(merged.bleu_buckets.has_value());
  int total = 0;
  for (const auto& b : *merged.bleu_buckets) total += b.count;
  CHECK(total == 12);

  const auto path = std::filesystem::temp_directory_path() / "co3_eval_test.jsonl";
  merged.write_jsonl(path);
  std::ifstream in(path);
  std::string line;
  std::vector<int> ranks;
  nlohmann::json agg;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    if (j["type"] == "example")
      ranks.push_back(j["gold_rank"].get<int>());
    else
      agg = j;
  }
  CHECK(ranks.size() == 12);
  CHECK(agg["mrr"].get<double>() == mrr(ranks));
  std::filesystem::remove(path);

  std::ostringstream table;
  merged.print_table(table);
  CHECK(table.str().find("MRR") != std::string::npos);
  CHECK(table.str().find("BLEU-4") != std::string::npos);
}

TEST_CASE("paired bootstrap") {
  std::vector<int> a{1, 1, 2, 1, 3, 1, 1, 2}, b{2, 3, 4, 2, 5, 2, 3, 4};
  auto same = paired_bootstrap_mrr(a, a, 200, 1);
  CHECK(same.delta == 0.0);
  CHECK(same.ci_low == 0.0);
  auto better = paired_bootstrap_mrr(a, b, 500, 1);
  CHECK(better.delta > 0.0);
  CHECK(better.ci_low > 0.0);
  CHECK(better.p_value == 0.0);
  CHECK(better.ci_low <= better.delta);
  CHECK(better.delta <= better.ci_high);
  CHECK_THROWS_AS(paired_bootstrap_mrr(a, std::vector<int>{1}, 10, 1), Error);
}
