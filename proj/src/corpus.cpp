#include "co3/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "co3/error.hpp"

namespace co3 {

std::string_view side_name(Side side) { return side == Side::code ? "code" : "query"; }

Side parse_side(std::string_view name) {
  if (name == "code") return Side::code;
  if (name == "query") return Side::query;
  fail(ErrorCode::usage, "unknown side '" + std::string(name) + "' (expected code|query)");
}

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

bool is_code_punct(char c) {
  switch (c) {
    case '(': case ')': case ',': case ';': case '=': case '.': case '<': case '>':
      return true;
    default:
      return false;
  }
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text, Side side) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_space(c)) {
      flush();
    } else if (side == Side::code && is_code_punct(ch)) {
      flush();
      tokens.emplace_back(1, ch);
    } else if (side == Side::query && c < 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else {
      current.push_back(ch);
    }
  }
  flush();
  return tokens;
}

const std::vector<std::string>& Vocab::reserved_tokens() {
  static const std::vector<std::string> reserved = {"<pad>", "<unk>", "<s>", "</s>"};
  return reserved;
}

Vocab::Vocab() {
  for (const auto& t : reserved_tokens()) add(t);
}

void Vocab::add(std::string token) {
  const int id = size();
  token_to_id_.emplace(token, id);
  id_to_token_.push_back(std::move(token));
}

Vocab Vocab::build(std::span<const std::vector<std::string>> token_lists, int min_freq, int max_size) {
  if (min_freq < 1) fail(ErrorCode::precondition, "build_vocab: min_freq must be >= 1");
  if (max_size <= kReservedCount) fail(ErrorCode::precondition, "build_vocab: max_size must exceed 4");
  struct Stat {
    long count = 0;
    long first = 0;
  };
  std::unordered_map<std::string, Stat> stats;
  long position = 0;
  const auto& reserved = reserved_tokens();
  for (const auto& list : token_lists) {
    for (const auto& tok : list) {
      if (std::find(reserved.begin(), reserved.end(), tok) != reserved.end()) continue;
      auto [it, inserted] = stats.try_emplace(tok);
      if (inserted) it->second.first = position;
      ++it->second.count;
      ++position;
    }
  }
  std::vector<std::pair<std::string, Stat>> ranked;
  for (auto& [tok, st] : stats)
    if (st.count >= min_freq) ranked.emplace_back(tok, st);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first < b.second.first;
  });
  const std::size_t keep = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(max_size - kReservedCount));
  Vocab v;
  for (std::size_t i = 0; i < keep; ++i) v.add(ranked[i].first);
  return v;
}

Vocab Vocab::from_tokens(std::span<const std::string> tokens) {
  Vocab v;
  for (const auto& t : tokens) {
    if (t.empty() || v.token_to_id_.count(t)) fail(ErrorCode::corpus, "vocab: duplicate or empty token '" + t + "'");
    v.add(t);
  }
  return v;
}

int Vocab::id_of(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end() || it->second < kReservedCount) return kUnkId;
  return it->second;
}

bool Vocab::contains(std::string_view token) const { return id_of(token) != kUnkId; }

const std::string& Vocab::token_of(int id) const {
  if (id < 0 || id >= size()) fail(ErrorCode::precondition, "vocab: id " + std::to_string(id) + " out of range");
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocab::corpus_tokens() const {
  return {id_to_token_.begin() + kReservedCount, id_to_token_.end()};
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  for (const auto& t : id_to_token_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  const auto& reserved = reserved_tokens();
  if (lines.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), lines.begin())) {
    fail(ErrorCode::corpus, path.string() + ": missing reserved header");
  }
  return from_tokens(std::span<const std::string>(lines).subspan(reserved.size()));
}

std::vector<int> encode(const Vocab& vocab, std::span<const std::string> tokens, int max_len) {
  if (max_len < 3) fail(ErrorCode::precondition, "encode: max_len must be >= 3");
  const std::size_t keep = std::min<std::size_t>(tokens.size(), static_cast<std::size_t>(max_len - 2));
  std::vector<int> ids;
  ids.reserve(keep + 2);
  ids.push_back(kBosId);
  for (std::size_t i = 0; i < keep; ++i) ids.push_back(vocab.id_of(tokens[i]));
  ids.push_back(kEosId);
  return ids;
}

std::vector<std::string> decode(const Vocab& vocab, std::span<const int> ids) {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    out.push_back(vocab.token_of(id));
  }
  return out;
}

std::vector<RawPair> parse_pairs_jsonl(std::string_view text) {
  std::vector<RawPair> pairs;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      fail(ErrorCode::corpus, "line " + std::to_string(line_no) + ": invalid JSON");
    }
    if (!record.is_object()) fail(ErrorCode::corpus, "line " + std::to_string(line_no) + ": expected an object");
    for (const char* field : {"code", "query"}) {
      if (!record.contains(field) || !record[field].is_string()) {
        fail(ErrorCode::corpus, "line " + std::to_string(line_no) + ": missing string field '" + field + "'");
      }
    }
    pairs.push_back({record["code"].get<std::string>(), record["query"].get<std::string>()});
    if (end == text.size()) break;
  }
  return pairs;
}

std::vector<RawPair> read_pairs_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot read corpus " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_pairs_jsonl(buf.str());
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

void write_pairs_jsonl(const std::filesystem::path& path, std::span<const RawPair> pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["code"] = p.code;
    j["query"] = p.query;
    out << j.dump() << '\n';
  }
}

CorpusSplit split_corpus(std::span<const RawPair> pairs, std::uint64_t seed) {
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::stream(seed, "split");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
  const std::size_t n = pairs.size();
  const std::size_t n_valid = n * 10 / 100;
  const std::size_t n_test = n * 15 / 100;
  const std::size_t n_train = n - n_valid - n_test;
  CorpusSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    const RawPair& p = pairs[order[i]];
    if (i < n_train)
      split.train.push_back(p);
    else if (i < n_train + n_valid)
      split.valid.push_back(p);
    else
      split.test.push_back(p);
  }
  return split;
}

VocabPair build_vocabs(std::span<const RawPair> pairs, const VocabLimits& limits) {
  std::vector<std::vector<std::string>> code, query;
  for (const auto& p : pairs) {
    code.push_back(tokenize(p.code, Side::code));
    query.push_back(tokenize(p.query, Side::query));
  }
  return {Vocab::build(code, limits.min_freq, limits.code_max_size),
          Vocab::build(query, limits.min_freq, limits.query_max_size)};
}

std::vector<PairExample> encode_pairs(std::span<const RawPair> pairs, const VocabPair& vocabs, int max_code_len,
                                      int max_query_len) {
  std::vector<PairExample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    PairExample ex;
    ex.raw_code = tokenize(p.code, Side::code);
    ex.raw_query = tokenize(p.query, Side::query);
    if (ex.raw_code.empty() || ex.raw_query.empty()) continue;
    ex.code_ids = encode(vocabs.code, ex.raw_code, max_code_len);
    ex.query_ids = encode(vocabs.query, ex.raw_query, max_query_len);
    out.push_back(std::move(ex));
  }
  return out;
}

namespace {

void fill_side(const std::vector<const std::vector<int>*>& rows, int pad_id, IdGrid& grid, Mask& mask,
               std::vector<int>& lengths) {
  int width = 0;
  for (const auto* r : rows) width = std::max(width, static_cast<int>(r->size()));
  grid = IdGrid(static_cast<int>(rows.size()), width, pad_id);
  lengths.clear();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = *rows[i];
    for (std::size_t t = 0; t < r.size(); ++t) grid.at(static_cast<int>(i), static_cast<int>(t)) = r[t];
    lengths.push_back(static_cast<int>(r.size()));
  }
  mask = Mask::from_lengths(lengths, width);
}

}  // namespace

Batch make_batch(std::span<const PairExample* const> examples, int pad_id) {
  if (examples.empty()) fail(ErrorCode::precondition, "make_batch: no examples");
  std::vector<const std::vector<int>*> code, query;
  for (const auto* ex : examples) {
    code.push_back(&ex->code_ids);
    query.push_back(&ex->query_ids);
  }
  Batch b;
  fill_side(code, pad_id, b.code, b.code_mask, b.code_lengths);
  fill_side(query, pad_id, b.query, b.query_mask, b.query_lengths);
  return b;
}

Batch make_batch(std::span<const PairExample> examples, int pad_id) {
  std::vector<const PairExample*> ptrs;
  for (const auto& ex : examples) ptrs.push_back(&ex);
  return make_batch(std::span<const PairExample* const>(ptrs), pad_id);
}

Batch make_batch_from_indices(std::span<const PairExample> corpus, std::span<const std::size_t> code_rows,
                              std::span<const std::size_t> query_rows) {
  if (code_rows.empty() || code_rows.size() != query_rows.size()) {
    fail(ErrorCode::precondition, "make_batch_from_indices: row lists must be non-empty and equal length");
  }
  std::vector<const std::vector<int>*> code, query;
  for (std::size_t i = 0; i < code_rows.size(); ++i) {
    code.push_back(&corpus[code_rows[i]].code_ids);
    query.push_back(&corpus[query_rows[i]].query_ids);
  }
  Batch b;
  fill_side(code, kPadId, b.code, b.code_mask, b.code_lengths);
  fill_side(query, kPadId, b.query, b.query_mask, b.query_lengths);
  return b;
}

NegativeDraw sample_negatives(std::span<const std::size_t> positive_rows, std::size_t corpus_size, Rng& rng) {
  if (corpus_size < 2) fail(ErrorCode::precondition, "sample_negatives: corpus needs at least 2 pairs");
  NegativeDraw draw;
  for (std::size_t pos : positive_rows) {
    std::size_t c = rng.uniform_index(corpus_size);
    while (c == pos) c = rng.uniform_index(corpus_size);
    std::size_t q = rng.uniform_index(corpus_size);
    while (q == pos) q = rng.uniform_index(corpus_size);
    draw.code_rows.push_back(c);
    draw.query_rows.push_back(q);
  }
  return draw;
}

}  // namespace co3
