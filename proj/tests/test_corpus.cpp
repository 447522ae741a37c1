#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "co3/corpus.hpp"
#include "co3/error.hpp"

using namespace co3;
using Tokens = std::vector<std::string>;

TEST_CASE("tokenize") {
  CHECK(tokenize("How to DELETE duplicates", Side::query) == Tokens{"how", "to", "delete", "duplicates"});
  CHECK(tokenize("SELECT a FROM t", Side::code) == Tokens{"SELECT", "a", "FROM", "t"});
  CHECK(tokenize("f(x)=1", Side::code) == Tokens{"f", "(", "x", ")", "=", "1"});
  CHECK(tokenize("  a.b <c>;d,e ", Side::code) == Tokens{"a", ".", "b", "<", "c", ">", ";", "d", ",", "e"});
  CHECK(tokenize("", Side::query).empty());
  CHECK(tokenize(" \t\n", Side::code).empty());
}

TEST_CASE("build vocab by frequency then first occurrence") {
  std::vector<Tokens> lists{{"a", "b", "a"}};
  Vocab v = Vocab::build(lists, 1, 10);
  CHECK(v.size() == 6);
  CHECK(v.id_of("a") == 4);
  CHECK(v.id_of("b") == 5);
  CHECK(Vocab::build(lists, 2, 10).size() == 5);

  Tokens many;
  for (int i = 0; i < 100; ++i) many.push_back("t" + std::to_string(i));
  std::vector<Tokens> wide{many};
  Vocab capped = Vocab::build(wide, 1, 20);
  CHECK(capped.size() == 20);
  CHECK(capped.id_of("t0") == 4);  // ties keep first occurrence order
  CHECK(capped.id_of("t15") == 19);
  CHECK(capped.id_of("t16") == kUnkId);
  CHECK(capped.id_of("t99") == kUnkId);

  CHECK(Vocab::build(std::vector<Tokens>{}, 1, 10).size() == 4);
  CHECK_THROWS_AS(Vocab::build(lists, 0, 10), Error);
  CHECK_THROWS_AS(Vocab::build(lists, 1, 4), Error);
}

TEST_CASE("reserved ids are never produced by corpus tokens") {
  std::vector<Tokens> lists{{"<pad>", "<s>", "x", "</s>"}};
  Vocab v = Vocab::build(lists, 1, 10);
  CHECK(v.size() == 5);
  CHECK(v.id_of("<s>") == kUnkId);
  CHECK(v.id_of("<pad>") == kUnkId);
  for (int id = 0; id < v.size(); ++id) CHECK(v.id_of(v.token_of(id)) == (id < kReservedCount ? kUnkId : id));
}

TEST_CASE("encode and decode") {
  std::vector<Tokens> lists{{"a", "b", "c", "d", "e"}};
  Vocab v = Vocab::build(lists, 1, 10);
  CHECK(encode(v, Tokens{"a"}, 10) == std::vector<int>{2, 4, 3});
  CHECK(encode(v, Tokens{"z"}, 10) == std::vector<int>{2, 1, 3});
  const auto cut = encode(v, Tokens{"a", "b", "c", "d", "e"}, 4);
  CHECK(cut == std::vector<int>{2, 4, 5, 3});

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tokens t;
    const auto n = rng.uniform_index(12);
    for (std::uint64_t i = 0; i < n; ++i) t.push_back(lists[0][rng.uniform_index(5)]);
    const int max_len = 3 + static_cast<int>(rng.uniform_index(12));
    const auto ids = encode(v, t, max_len);
    CHECK(ids.front() == kBosId);
    CHECK(ids.back() == kEosId);
    CHECK(static_cast<int>(ids.size()) <= max_len);
    const Tokens expect(t.begin(), t.begin() + static_cast<long>(std::min<std::size_t>(t.size(), max_len - 2)));
    CHECK(decode(v, ids) == expect);
  }
}

TEST_CASE("vocab file round trip") {
  std::vector<Tokens> lists{{"x", "y", "x", "zz"}};
  Vocab v = Vocab::build(lists, 1, 100);
  const auto path = std::filesystem::temp_directory_path() / "co3_vocab_test.txt";
  v.save(path);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  CHECK(first == "<pad>");
  Vocab w = Vocab::load(path);
  CHECK(w.size() == v.size());
  for (int id = 0; id < v.size(); ++id) CHECK(w.token_of(id) == v.token_of(id));
  std::filesystem::remove(path);
}

TEST_CASE("jsonl parsing reports the failing line") {
  auto pairs = parse_pairs_jsonl("{\"code\": \"SELECT 1\", \"query\": \"one\"}\n\n{\"code\": \"x\", \"query\": \"y\"}\n");
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[1].code == "x");
  try {
    parse_pairs_jsonl("{\"code\": \"a\", \"query\": \"b\"}\n{\"code\": \"a\"}\n");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::corpus);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_pairs_jsonl("not json\n"), Error);
  CHECK_THROWS_AS(parse_pairs_jsonl("{\"code\": 3, \"query\": \"b\"}\n"), Error);

  const auto path = std::filesystem::temp_directory_path() / "co3_pairs_test.jsonl";
  write_pairs_jsonl(path, pairs);
  auto back = read_pairs_jsonl(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].code == "SELECT 1");
  CHECK(back[0].query == "one");
  std::filesystem::remove(path);
}

namespace {
std::vector<RawPair> numbered(int n) {
  std::vector<RawPair> out;
  for (int i = 0; i < n; ++i) out.push_back({"c" + std::to_string(i), "q" + std::to_string(i)});
  return out;
}
}  // namespace

TEST_CASE("split sizes, determinism and disjointness") {
  auto s100 = split_corpus(numbered(100), 7);
  CHECK(s100.train.size() == 75);
  CHECK(s100.valid.size() == 10);
  CHECK(s100.test.size() == 15);
  auto s20 = split_corpus(numbered(20), 7);
  CHECK(s20.train.size() == 15);
  CHECK(s20.valid.size() == 2);
  CHECK(s20.test.size() == 3);

  auto again = split_corpus(numbered(100), 7);
  for (std::size_t i = 0; i < again.train.size(); ++i) CHECK(again.train[i].code == s100.train[i].code);
  std::set<std::string> all;
  for (const auto* part : {&s100.train, &s100.valid, &s100.test})
    for (const auto& p : *part) all.insert(p.code);
  CHECK(all.size() == 100);
  auto other = split_corpus(numbered(100), 8);
  bool differs = false;
  for (std::size_t i = 0; i < other.train.size(); ++i) differs |= other.train[i].code != s100.train[i].code;
  CHECK(differs);
}

TEST_CASE("encode_pairs drops pairs with an empty side") {
  std::vector<RawPair> pairs{{"SELECT a", "get a"}, {"", "nothing"}, {"x", "   "}};
  VocabPair v = build_vocabs(pairs, {1, 100, 100});
  auto ex = encode_pairs(pairs, v, 10, 10);
  REQUIRE(ex.size() == 1);
  CHECK(ex[0].raw_query == Tokens{"get", "a"});
  CHECK(ex[0].code_ids.front() == kBosId);
  CHECK(ex[0].query_ids.back() == kEosId);
}

TEST_CASE("batches pad to the longest row and masks follow lengths") {
  PairExample a{{2, 4, 3}, {2, 5, 3}, {}, {}};
  PairExample b{{2, 4, 4, 4, 3}, {2, 3}, {}, {}};
  std::vector<PairExample> ex{a, b};
  Batch batch = make_batch(ex);
  CHECK(batch.code.cols == 5);
  CHECK(batch.code.at(0, 3) == kPadId);
  CHECK(batch.code_mask.column(3) == std::vector<std::uint8_t>{0, 1});
  CHECK(batch.code_lengths == std::vector<int>{3, 5});
  for (int t = 0; t < 5; ++t) CHECK(batch.code_mask(0, t) == (t < 3));

  Batch single = make_batch(std::span<const PairExample>(ex.data(), 1));
  for (auto bit : single.code_mask.bits) CHECK(bit == 1);

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<PairExample> rows;
    int total = 0;
    const auto n = 1 + rng.uniform_index(6);
    for (std::uint64_t i = 0; i < n; ++i) {
      const int len = 2 + static_cast<int>(rng.uniform_index(8));
      total += len;
      rows.push_back({std::vector<int>(static_cast<std::size_t>(len), 4), {2, 3}, {}, {}});
    }
    Batch bb = make_batch(rows);
    int ones = 0;
    for (auto bit : bb.code_mask.bits) ones += bit;
    CHECK(ones == total);
  }
}

TEST_CASE("negative sampling excludes the positive index and is uniform") {
  Rng rng(17);
  std::vector<std::size_t> zero{0};
  for (int i = 0; i < 20; ++i) {
    auto d = sample_negatives(zero, 2, rng);
    CHECK(d.code_rows[0] == 1);
    CHECK(d.query_rows[0] == 1);
  }
  CHECK_THROWS_AS(sample_negatives(zero, 1, rng), Error);

  std::vector<int> counts(50, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    std::vector<std::size_t> pos{static_cast<std::size_t>(i % 50)};
    auto d = sample_negatives(pos, 50, rng);
    CHECK(d.code_rows[0] != pos[0]);
    ++counts[d.code_rows[0]];
  }
  // Each index is excluded on 1/50 of draws: expected count = draws * (49/50) / 49.
  const double p = 1.0 / 50.0;
  const double expected = draws * p;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - expected) <= 3.5 * sigma);
}
