#pragma once

// Template-generated SQL-like pairs with aligned queries.

#include <set>
#include <string>
#include <vector>

#include "co3/config.hpp"
#include "co3/corpus.hpp"
#include "co3/rng.hpp"

namespace co3::testing {

inline std::vector<RawPair> sql_pairs(std::size_t count, std::uint64_t seed = 11) {
  static const std::vector<std::string> tables{"users", "orders", "items", "shops", "cities", "teams", "songs", "books"};
  static const std::vector<std::string> cols{"id", "name", "price", "age", "email", "rating", "year", "size", "title", "owner"};
  static const std::vector<std::string> vals{"1", "2", "3", "5", "8", "10", "42", "100"};
  Rng rng = Rng::stream(seed, "fixture");
  auto pick = [&](const std::vector<std::string>& v) { return v[rng.uniform_index(v.size())]; };
  std::set<std::string> seen;
  std::vector<RawPair> out;
  while (out.size() < count) {
    const std::string t = pick(tables), c = pick(cols), c2 = pick(cols), v = pick(vals);
    RawPair p;
    switch (rng.uniform_index(5)) {
      case 0:
        p = {"SELECT " + c + " FROM " + t + " WHERE " + c2 + " = " + v + ";",
             "get " + c + " of " + t + " where " + c2 + " is " + v};
        break;
      case 1:
        p = {"SELECT COUNT(*) FROM " + t + " WHERE " + c + " > " + v + ";",
             "count " + t + " with " + c + " above " + v};
        break;
      case 2:
        p = {"SELECT MAX(" + c + ") FROM " + t + ";", "largest " + c + " in " + t};
        break;
      case 3:
        p = {"DELETE FROM " + t + " WHERE " + c + " = " + v + ";", "delete " + t + " whose " + c + " is " + v};
        break;
      default:
        p = {"SELECT " + c + ", " + c2 + " FROM " + t + " ORDER BY " + c2 + ";",
             "list " + c + " and " + c2 + " of " + t + " sorted by " + c2};
        break;
    }
    if (seen.insert(p.code).second) out.push_back(std::move(p));
  }
  return out;
}

// Small model sizing used across tests.
inline TrainConfig fixture_config(int hidden = 64) {
  TrainConfig cfg;
  cfg.hidden = hidden;
  cfg.embed = hidden / 2;
  cfg.proj = hidden;
  cfg.lm_hidden = hidden / 2;
  cfg.lm_embed = hidden / 4;
  cfg.min_freq = 1;
  cfg.max_code_len = 40;
  cfg.max_query_len = 24;
  cfg.code_vocab_size = 1000;
  cfg.query_vocab_size = 1000;
  cfg.n_distractors = 9;
  return cfg;
}

struct Encoded {
  VocabPair vocabs;
  std::vector<PairExample> examples;
};

inline Encoded encode_fixture(const std::vector<RawPair>& pairs, const TrainConfig& cfg) {
  Encoded e;
  e.vocabs = build_vocabs(pairs, {cfg.min_freq, cfg.code_vocab_size, cfg.query_vocab_size});
  e.examples = encode_pairs(pairs, e.vocabs, cfg.max_code_len, cfg.max_query_len);
  return e;
}

}  // namespace co3::testing
