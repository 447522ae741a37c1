#include "co3/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <vector>

#include "co3/error.hpp"

namespace co3 {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::co3: return "co3";
    case Variant::no_dual_shared: return "no_dual_shared";
    case Variant::no_dual_unshared: return "no_dual_unshared";
    case Variant::no_codegen: return "no_codegen";
    case Variant::retrieval_only: return "retrieval_only";
  }
  return "co3";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::co3, Variant::no_dual_shared, Variant::no_dual_unshared, Variant::no_codegen,
                    Variant::retrieval_only}) {
    if (variant_name(v) == name) return v;
  }
  fail(ErrorCode::config, "unknown variant '" + std::string(name) + "'");
}

VariantTraits traits_of(Variant v) {
  switch (v) {
    case Variant::co3: return {true, true, true, true};
    case Variant::no_dual_shared: return {true, true, false, true};
    case Variant::no_dual_unshared: return {true, true, false, false};
    case Variant::no_codegen: return {true, false, false, true};
    case Variant::retrieval_only: return {false, false, false, true};
  }
  return {};
}

std::string_view negative_mode_name(NegativeMode m) {
  switch (m) {
    case NegativeMode::random_pair: return "random_pair";
    case NegativeMode::replace_query: return "replace_query";
    case NegativeMode::replace_code: return "replace_code";
  }
  return "random_pair";
}

NegativeMode parse_negative_mode(std::string_view name) {
  for (NegativeMode m : {NegativeMode::random_pair, NegativeMode::replace_query, NegativeMode::replace_code}) {
    if (negative_mode_name(m) == name) return m;
  }
  fail(ErrorCode::config, "unknown negative_mode '" + std::string(name) + "'");
}

namespace {

template <class T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    fail(ErrorCode::config, "key '" + std::string(key) + "': cannot parse '" + std::string(value) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  fail(ErrorCode::config, "key '" + std::string(key) + "': expected true|false");
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void TrainConfig::set(std::string_view key, std::string_view value) {
  if (key == "variant") variant = parse_variant(value);
  else if (key == "lambda_cs") lambda_cs = parse_number<double>(key, value);
  else if (key == "lambda_cg") lambda_cg = parse_number<double>(key, value);
  else if (key == "lr") lr = parse_number<double>(key, value);
  else if (key == "batch_size") batch_size = parse_number<int>(key, value);
  else if (key == "max_epochs") max_epochs = parse_number<int>(key, value);
  else if (key == "patience") patience = parse_number<int>(key, value);
  else if (key == "margin") margin = parse_number<double>(key, value);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else if (key == "negative_mode") negative_mode = parse_negative_mode(value);
  else if (key == "hidden") hidden = parse_number<int>(key, value);
  else if (key == "embed") embed = parse_number<int>(key, value);
  else if (key == "proj") proj = parse_number<int>(key, value);
  else if (key == "init_scale") init_scale = parse_number<double>(key, value);
  else if (key == "max_code_len") max_code_len = parse_number<int>(key, value);
  else if (key == "max_query_len") max_query_len = parse_number<int>(key, value);
  else if (key == "min_freq") min_freq = parse_number<int>(key, value);
  else if (key == "code_vocab_size") code_vocab_size = parse_number<int>(key, value);
  else if (key == "query_vocab_size") query_vocab_size = parse_number<int>(key, value);
  else if (key == "lm_hidden") lm_hidden = parse_number<int>(key, value);
  else if (key == "lm_embed") lm_embed = parse_number<int>(key, value);
  else if (key == "lm_epochs") lm_epochs = parse_number<int>(key, value);
  else if (key == "dual_per_token") dual_per_token = parse_bool(key, value);
  else if (key == "n_distractors") n_distractors = parse_number<int>(key, value);
  else if (key == "beam") beam = parse_number<int>(key, value);
  else fail(ErrorCode::config, "unknown key '" + std::string(key) + "'");
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"variant", std::string(variant_name(variant))},
      {"lambda_cs", format_double(lambda_cs)},
      {"lambda_cg", format_double(lambda_cg)},
      {"lr", format_double(lr)},
      {"batch_size", std::to_string(batch_size)},
      {"max_epochs", std::to_string(max_epochs)},
      {"patience", std::to_string(patience)},
      {"margin", format_double(margin)},
      {"seed", std::to_string(seed)},
      {"negative_mode", std::string(negative_mode_name(negative_mode))},
      {"hidden", std::to_string(hidden)},
      {"embed", std::to_string(embed)},
      {"proj", std::to_string(proj)},
      {"init_scale", format_double(init_scale)},
      {"max_code_len", std::to_string(max_code_len)},
      {"max_query_len", std::to_string(max_query_len)},
      {"min_freq", std::to_string(min_freq)},
      {"code_vocab_size", std::to_string(code_vocab_size)},
      {"query_vocab_size", std::to_string(query_vocab_size)},
      {"lm_hidden", std::to_string(lm_hidden)},
      {"lm_embed", std::to_string(lm_embed)},
      {"lm_epochs", std::to_string(lm_epochs)},
      {"dual_per_token", dual_per_token ? "true" : "false"},
      {"n_distractors", std::to_string(n_distractors)},
      {"beam", std::to_string(beam)},
  };
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : to_map()) out << k << '=' << v << '\n';
  return out.str();
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::config, what);
  };
  require(lambda_cs >= 0 && lambda_cg >= 0, "lambda_cs and lambda_cg must be >= 0");
  require(lr > 0, "lr must be > 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(max_epochs >= 0, "max_epochs must be >= 0");
  require(patience >= 0, "patience must be >= 0");
  require(margin >= 0, "margin must be >= 0");
  require(hidden >= 2 && hidden % 2 == 0, "hidden must be an even number >= 2");
  require(embed >= 1 && proj >= 1, "embed and proj must be >= 1");
  require(init_scale > 0, "init_scale must be > 0");
  require(max_code_len >= 3 && max_query_len >= 3, "max lengths must be >= 3");
  require(min_freq >= 1, "min_freq must be >= 1");
  require(code_vocab_size > 4 && query_vocab_size > 4, "vocab sizes must exceed 4");
  require(lm_hidden >= 1 && lm_embed >= 1 && lm_epochs >= 0, "invalid language-model sizing");
  require(n_distractors >= 0, "n_distractors must be >= 0");
  require(beam >= 1, "beam must be >= 1");
}

TrainConfig TrainConfig::parse(std::string_view text) {
  TrainConfig cfg;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      fail(ErrorCode::config, "line " + std::to_string(line_no) + ": expected key=value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::config, "cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse(buf.str());
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

void TrainConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << to_text();
}

}  // namespace co3
