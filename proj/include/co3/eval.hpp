#pragma once

// Metrics (MRR, NDCG, BLEU-4, METEOR) and the retrieval / summarisation
// evaluation protocols.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "co3/corpus.hpp"
#include "co3/seq2seq.hpp"

namespace co3 {

using Tokens = std::vector<std::string>;

double mrr(std::span<const int> gold_ranks);
double ndcg(std::span<const int> gold_ranks);

// Corpus BLEU-4 with brevity penalty. A zero n-gram match count is replaced
// by 1 / (2 * candidate n-gram count), with the count floored at 1.
double bleu4(std::span<const Tokens> candidates, std::span<const Tokens> references);
double sentence_bleu4(const Tokens& candidate, const Tokens& reference);

struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
};

// Exact-match alignment with the most matches, then the fewest chunks.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);
double meteor(const Tokens& candidate, const Tokens& reference);

struct ExampleRecord {
  std::size_t example = 0;
  std::optional<int> gold_rank;
  std::optional<double> gold_score;
  int pool_size = 0;
  std::optional<Tokens> hypothesis;
  std::optional<double> bleu;
  std::optional<double> meteor;
};

struct BleuBucket {
  double lo = 0.0;
  double hi = 0.0;
  int count = 0;
  double mean_mrr = 0.0;  // 0 for an empty bucket
};

struct BucketInput {
  double bleu = 0.0;
  int gold_rank = 1;
};

// Ten buckets [k/10, (k+1)/10); the last one is closed at 1.
std::array<BleuBucket, 10> bleu_bucket_analysis(std::span<const BucketInput> records);

struct EvalReport {
  std::vector<ExampleRecord> examples;
  std::optional<double> mrr;
  std::optional<double> ndcg;
  std::optional<double> corpus_bleu4;
  std::optional<double> mean_meteor;
  std::optional<std::array<BleuBucket, 10>> bleu_buckets;
  int n_distractors = 0;
  std::vector<std::string> warnings;

  // Fills the bucket table from examples that carry both BLEU and rank.
  void compute_buckets();
  void write_jsonl(const std::filesystem::path& path) const;
  void print_table(std::ostream& out) const;
};

// Gold plus n distinct distractor codes per query, ranked by score. The gold
// sits at a seeded uniform position of the pool, so ties resolve by that
// position. Too small a set lowers n with a warning.
EvalReport evaluate_retrieval(ModelParams& model, std::span<const PairExample> pairs, int n_distractors,
                              std::uint64_t seed);

// Decodes every code (greedy for beam <= 1) and scores against raw queries.
EvalReport evaluate_summarization(ModelParams& model, const Vocab& query_vocab, std::span<const PairExample> pairs,
                                  int max_len, int beam = 1);

// Merges per-example fields of `b` into `a` (same example order).
EvalReport merge_reports(EvalReport a, const EvalReport& b);

struct BootstrapResult {
  double delta = 0.0;  // MRR(a) - MRR(b)
  double ci_low = 0.0;
  double ci_high = 0.0;
  double p_value = 0.0;  // share of resamples with delta <= 0
};

BootstrapResult paired_bootstrap_mrr(std::span<const int> ranks_a, std::span<const int> ranks_b, int samples,
                                     std::uint64_t seed, double confidence = 0.95);

}  // namespace co3
