#pragma once

// Pair corpora: tokenisation, vocabularies, splits, batching and negative
// sampling for <code, query> pairs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "co3/grid.hpp"
#include "co3/rng.hpp"

namespace co3 {

enum class Side { code, query };

std::string_view side_name(Side side);
Side parse_side(std::string_view name);

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kReservedCount = 4;

// Query side: lowercase + whitespace split. Code side: whitespace split with
// ( ) , ; = . < > split out into standalone tokens; case preserved.
std::vector<std::string> tokenize(std::string_view text, Side side);

class Vocab {
 public:
  Vocab();

  static Vocab build(std::span<const std::vector<std::string>> token_lists, int min_freq, int max_size);
  static Vocab from_tokens(std::span<const std::string> tokens);  // non-reserved, in id order

  int size() const { return static_cast<int>(id_to_token_.size()); }
  // Reserved spellings are never matched by corpus tokens (they map to UNK).
  int id_of(std::string_view token) const;
  const std::string& token_of(int id) const;
  bool contains(std::string_view token) const;

  // Tokens from id kReservedCount upward.
  std::vector<std::string> corpus_tokens() const;

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  static const std::vector<std::string>& reserved_tokens();

 private:
  void add(std::string token);

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// BOS + ids + EOS; the token list is truncated to max_len - 2 first.
std::vector<int> encode(const Vocab& vocab, std::span<const std::string> tokens, int max_len);
// Inverse of encode for real tokens: drops reserved ids (PAD/BOS/EOS), keeps UNK.
std::vector<std::string> decode(const Vocab& vocab, std::span<const int> ids);

struct RawPair {
  std::string code;
  std::string query;
};

struct PairExample {
  std::vector<int> code_ids;
  std::vector<int> query_ids;
  std::vector<std::string> raw_code;
  std::vector<std::string> raw_query;
};

// Reads line-delimited {"code": ..., "query": ...} records. Malformed lines
// raise ErrorCode::corpus naming the 1-based line number.
std::vector<RawPair> read_pairs_jsonl(const std::filesystem::path& path);
std::vector<RawPair> parse_pairs_jsonl(std::string_view text);
void write_pairs_jsonl(const std::filesystem::path& path, std::span<const RawPair> pairs);

struct CorpusSplit {
  std::vector<RawPair> train;
  std::vector<RawPair> valid;
  std::vector<RawPair> test;
};

// Seeded shuffle then 75/10/15 by floor; the remainder goes to train.
CorpusSplit split_corpus(std::span<const RawPair> pairs, std::uint64_t seed);

struct VocabPair {
  Vocab code;
  Vocab query;
};

struct VocabLimits {
  int min_freq = 2;
  int code_max_size = 15000;
  int query_max_size = 10000;
};

VocabPair build_vocabs(std::span<const RawPair> pairs, const VocabLimits& limits);

// Tokenises and encodes; pairs with an empty side are dropped.
std::vector<PairExample> encode_pairs(std::span<const RawPair> pairs, const VocabPair& vocabs, int max_code_len,
                                      int max_query_len);

struct Batch {
  IdGrid code;
  IdGrid query;
  Mask code_mask;
  Mask query_mask;
  std::vector<int> code_lengths;
  std::vector<int> query_lengths;

  int size() const { return code.rows; }
};

Batch make_batch(std::span<const PairExample* const> examples, int pad_id = kPadId);
Batch make_batch(std::span<const PairExample> examples, int pad_id = kPadId);

// Separate code and query batches for independently chosen rows.
Batch make_batch_from_indices(std::span<const PairExample> corpus, std::span<const std::size_t> code_rows,
                              std::span<const std::size_t> query_rows);

struct NegativeDraw {
  std::vector<std::size_t> code_rows;
  std::vector<std::size_t> query_rows;
};

// For each positive corpus index, one code row and one query row drawn
// uniformly from the other corpus indices.
NegativeDraw sample_negatives(std::span<const std::size_t> positive_rows, std::size_t corpus_size, Rng& rng);

}  // namespace co3
