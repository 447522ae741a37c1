#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace co3 {

enum class Variant { co3, no_dual_shared, no_dual_unshared, no_codegen, retrieval_only };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

// Which loss terms and modules a variant carries.
struct VariantTraits {
  bool summarization = true;
  bool generation = true;
  bool dual = true;
  bool shared_cells = true;
};
VariantTraits traits_of(Variant v);

// random_pair: (x^r, y^r); replace_query: (x, y^r); replace_code: (x^r, y).
enum class NegativeMode { random_pair, replace_query, replace_code };

std::string_view negative_mode_name(NegativeMode m);
NegativeMode parse_negative_mode(std::string_view name);

struct TrainConfig {
  Variant variant = Variant::co3;
  double lambda_cs = 0.01;
  double lambda_cg = 0.01;
  double lr = 0.001;
  int batch_size = 32;
  int max_epochs = 20;
  int patience = 3;  // 0 disables early stopping
  double margin = 0.05;
  std::uint64_t seed = 1;
  NegativeMode negative_mode = NegativeMode::random_pair;

  int hidden = 400;  // decoder width; each encoder direction runs at hidden / 2
  int embed = 200;
  int proj = 400;
  double init_scale = 0.1;

  int max_code_len = 120;
  int max_query_len = 200;
  int min_freq = 2;
  int code_vocab_size = 15000;
  int query_vocab_size = 10000;

  int lm_hidden = 400;
  int lm_embed = 200;
  int lm_epochs = 5;
  bool dual_per_token = false;  // length-normalise log-probs inside the duality term

  int n_distractors = 49;
  int beam = 1;

  int direction_hidden() const { return hidden / 2; }

  // Throws ErrorCode::config on out-of-range values.
  void validate() const;

  // Flat key=value. Unknown keys are rejected.
  void set(std::string_view key, std::string_view value);
  std::map<std::string, std::string> to_map() const;
  std::string to_text() const;

  static TrainConfig parse(std::string_view text);
  static TrainConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

}  // namespace co3
