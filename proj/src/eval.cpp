#include "co3/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <json.hpp>

#include "co3/error.hpp"
#include "co3/retrieval.hpp"

namespace co3 {

namespace {

void check_ranks(std::span<const int> ranks, const char* what) {
  if (ranks.empty()) fail(ErrorCode::precondition, std::string(what) + ": empty rank list");
  for (int r : ranks)
    if (r < 1) fail(ErrorCode::precondition, std::string(what) + ": ranks must be >= 1");
}

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts ngrams(const Tokens& t, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i + n))];
  return out;
}

}  // namespace

double mrr(std::span<const int> gold_ranks) {
  check_ranks(gold_ranks, "mrr");
  double s = 0.0;
  for (int r : gold_ranks) s += 1.0 / r;
  return s / static_cast<double>(gold_ranks.size());
}

double ndcg(std::span<const int> gold_ranks) {
  check_ranks(gold_ranks, "ndcg");
  double s = 0.0;
  for (int r : gold_ranks) s += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  return s / static_cast<double>(gold_ranks.size());
}

double bleu4(std::span<const Tokens> candidates, std::span<const Tokens> references) {
  if (candidates.size() != references.size()) fail(ErrorCode::precondition, "bleu4: list lengths differ");
  if (candidates.empty()) fail(ErrorCode::precondition, "bleu4: empty corpus");
  std::array<double, 4> matched{}, total{};
  double c = 0.0, r = 0.0;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    c += static_cast<double>(candidates[k].size());
    r += static_cast<double>(references[k].size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts cand = ngrams(candidates[k], n);
      const NgramCounts ref = ngrams(references[k], n);
      for (const auto& [g, cnt] : cand) {
        total[n - 1] += cnt;
        auto it = ref.find(g);
        if (it != ref.end()) matched[n - 1] += std::min(cnt, it->second);
      }
    }
  }
  if (c == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double p = matched[n] > 0 ? matched[n] / total[n] : 1.0 / (2.0 * std::max(total[n], 1.0));
    log_sum += std::log(p);
  }
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / 4.0);
}

double sentence_bleu4(const Tokens& candidate, const Tokens& reference) {
  return bleu4(std::span<const Tokens>(&candidate, 1), std::span<const Tokens>(&reference, 1));
}

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
  // Maximum matches is fixed by per-word counts; search only for fewest chunks.
  std::map<std::string, int> cand_count, ref_count;
  for (const auto& w : candidate) ++cand_count[w];
  for (const auto& w : reference) ++ref_count[w];
  int max_matches = 0;
  for (const auto& [w, n] : cand_count) {
    auto it = ref_count.find(w);
    if (it != ref_count.end()) max_matches += std::min(n, it->second);
  }
  if (max_matches == 0) return {0, 0};

  const int nc = static_cast<int>(candidate.size());
  std::vector<std::vector<int>> options(static_cast<std::size_t>(nc));
  for (int i = 0; i < nc; ++i)
    for (int j = 0; j < static_cast<int>(reference.size()); ++j)
      if (candidate[static_cast<std::size_t>(i)] == reference[static_cast<std::size_t>(j)])
        options[static_cast<std::size_t>(i)].push_back(j);
  // Suffix bound on how many more matches are still possible.
  std::vector<int> reachable(static_cast<std::size_t>(nc) + 1, 0);
  for (int i = nc - 1; i >= 0; --i) reachable[static_cast<std::size_t>(i)] = reachable[static_cast<std::size_t>(i) + 1] + (options[static_cast<std::size_t>(i)].empty() ? 0 : 1);

  std::vector<char> used(reference.size(), 0);
  int best_chunks = std::numeric_limits<int>::max();
  long budget = 200000;

  auto dfs = [&](auto& self, int i, int matches, int chunks, int last_i, int last_j) -> void {
    if (--budget < 0 && best_chunks != std::numeric_limits<int>::max()) return;
    if (chunks >= best_chunks) return;
    if (matches + reachable[static_cast<std::size_t>(i)] < max_matches) return;
    if (i == nc) {
      if (matches == max_matches) best_chunks = chunks;
      return;
    }
    for (int j : options[static_cast<std::size_t>(i)]) {
      if (used[static_cast<std::size_t>(j)]) continue;
      used[static_cast<std::size_t>(j)] = 1;
      const bool extends = last_i == i - 1 && last_j == j - 1;
      self(self, i + 1, matches + 1, chunks + (extends ? 0 : 1), i, j);
      used[static_cast<std::size_t>(j)] = 0;
    }
    self(self, i + 1, matches, chunks, last_i, last_j);
  };
  dfs(dfs, 0, 0, 0, -2, -2);
  return {max_matches, best_chunks};
}

double meteor(const Tokens& candidate, const Tokens& reference) {
  const MeteorAlignment a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  const double m = a.matches;
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double f = 10.0 * p * r / (r + 9.0 * p);
  const double penalty = 0.5 * std::pow(a.chunks / m, 3.0);
  return f * (1.0 - penalty);
}

std::array<BleuBucket, 10> bleu_bucket_analysis(std::span<const BucketInput> records) {
  std::array<BleuBucket, 10> out;
  std::array<double, 10> rr{};
  for (int k = 0; k < 10; ++k) {
    out[static_cast<std::size_t>(k)].lo = k / 10.0;
    out[static_cast<std::size_t>(k)].hi = (k + 1) / 10.0;
  }
  for (const auto& rec : records) {
    if (!(rec.bleu >= 0.0 && rec.bleu <= 1.0)) fail(ErrorCode::precondition, "bleu_bucket_analysis: BLEU outside [0, 1]");
    if (rec.gold_rank < 1) fail(ErrorCode::precondition, "bleu_bucket_analysis: rank must be >= 1");
    const int k = std::min(9, static_cast<int>(std::floor(rec.bleu * 10.0)));
    ++out[static_cast<std::size_t>(k)].count;
    rr[static_cast<std::size_t>(k)] += 1.0 / rec.gold_rank;
  }
  for (std::size_t k = 0; k < 10; ++k)
    if (out[k].count > 0) out[k].mean_mrr = rr[k] / out[k].count;
  return out;
}

void EvalReport::compute_buckets() {
  std::vector<BucketInput> in;
  for (const auto& e : examples)
    if (e.bleu && e.gold_rank) in.push_back({*e.bleu, *e.gold_rank});
  if (!in.empty()) bleu_buckets = bleu_bucket_analysis(in);
}

void EvalReport::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  for (const auto& e : examples) {
    nlohmann::ordered_json j;
    j["type"] = "example";
    j["example"] = e.example;
    if (e.gold_rank) j["gold_rank"] = *e.gold_rank;
    if (e.gold_score) j["score"] = *e.gold_score;
    if (e.gold_rank) j["pool_size"] = e.pool_size;
    if (e.hypothesis) j["hypothesis"] = *e.hypothesis;
    if (e.bleu) j["bleu"] = *e.bleu;
    if (e.meteor) j["meteor"] = *e.meteor;
    out << j.dump() << '\n';
  }
  nlohmann::ordered_json agg;
  agg["type"] = "aggregate";
  agg["count"] = examples.size();
  if (mrr) agg["mrr"] = *mrr;
  if (ndcg) agg["ndcg"] = *ndcg;
  if (mrr) agg["n_distractors"] = n_distractors;
  if (corpus_bleu4) agg["bleu4"] = *corpus_bleu4;
  if (mean_meteor) agg["meteor"] = *mean_meteor;
  if (bleu_buckets) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& b : *bleu_buckets) arr.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"mean_mrr", b.mean_mrr}});
    agg["bleu_buckets"] = arr;
  }
  if (!warnings.empty()) agg["warnings"] = warnings;
  out << agg.dump() << '\n';
}

void EvalReport::print_table(std::ostream& out) const {
  const auto flags = out.flags();
  out << std::fixed << std::setprecision(4);
  out << "examples  " << examples.size() << '\n';
  if (mrr) out << "MRR       " << *mrr << "  (gold + " << n_distractors << " distractors)\n";
  if (ndcg) out << "NDCG      " << *ndcg << '\n';
  if (corpus_bleu4) out << "BLEU-4    " << *corpus_bleu4 << '\n';
  if (mean_meteor) out << "METEOR    " << *mean_meteor << '\n';
  if (bleu_buckets) {
    out << "bucket        count  mean_MRR\n";
    for (const auto& b : *bleu_buckets)
      out << '[' << std::setprecision(1) << b.lo << ", " << b.hi << (b.hi >= 1.0 ? ']' : ')') << "    " << std::setw(5)
          << b.count << "  " << std::setprecision(4) << b.mean_mrr << '\n';
  }
  for (const auto& w : warnings) out << "warning: " << w << '\n';
  out.flags(flags);
}

EvalReport evaluate_retrieval(ModelParams& model, std::span<const PairExample> pairs, int n_distractors,
                              std::uint64_t seed) {
  if (pairs.empty()) fail(ErrorCode::precondition, "evaluate_retrieval: no pairs");
  if (n_distractors < 0) fail(ErrorCode::precondition, "evaluate_retrieval: negative distractor count");
  EvalReport report;
  const int available = static_cast<int>(pairs.size()) - 1;
  if (n_distractors > available) {
    report.warnings.push_back("test set too small: n_distractors lowered from " + std::to_string(n_distractors) +
                              " to " + std::to_string(available));
    n_distractors = available;
  }
  report.n_distractors = n_distractors;

  std::vector<std::vector<int>> codes, queries;
  for (const auto& p : pairs) {
    codes.push_back(p.code_ids);
    queries.push_back(p.query_ids);
  }
  const ad::Matrix code_vec = retrieval_vectors(model, Side::code, codes);
  const ad::Matrix query_vec = retrieval_vectors(model, Side::query, queries);

  Rng rng = Rng::stream(seed, "distractors");
  const std::size_t n = pairs.size();
  std::vector<std::size_t> others(n - 1);
  std::vector<int> ranks;
  for (std::size_t q = 0; q < n; ++q) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (i != q) others[k++] = i;
    // Partial Fisher-Yates: the first n_distractors entries are a uniform draw.
    for (std::size_t i = 0; i < static_cast<std::size_t>(n_distractors); ++i)
      std::swap(others[i], others[i + rng.uniform_index(others.size() - i)]);
    std::vector<std::size_t> pool(others.begin(), others.begin() + n_distractors);
    const std::size_t gold_pos = rng.uniform_index(pool.size() + 1);
    pool.insert(pool.begin() + static_cast<long>(gold_pos), q);

    std::vector<double> scores(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i)
      scores[i] = cosine(code_vec.row(static_cast<Eigen::Index>(pool[i])), query_vec.row(static_cast<Eigen::Index>(q)));
    const auto ranked = rank_by_scores(scores);
    ExampleRecord rec;
    rec.example = q;
    rec.pool_size = static_cast<int>(pool.size());
    for (const auto& c : ranked)
      if (c.candidate_id == gold_pos) {
        rec.gold_rank = c.rank;
        rec.gold_score = c.score;
      }
    ranks.push_back(*rec.gold_rank);
    report.examples.push_back(std::move(rec));
  }
  report.mrr = mrr(ranks);
  report.ndcg = ndcg(ranks);
  return report;
}

EvalReport evaluate_summarization(ModelParams& model, const Vocab& query_vocab, std::span<const PairExample> pairs,
                                  int max_len, int beam) {
  if (pairs.empty()) fail(ErrorCode::precondition, "evaluate_summarization: no pairs");
  EvalReport report;
  std::vector<Tokens> hyps, refs;
  const std::size_t chunk = 64;
  for (std::size_t begin = 0; begin < pairs.size(); begin += chunk) {
    const std::size_t end = std::min(pairs.size(), begin + chunk);
    std::vector<std::vector<int>> decoded;
    if (beam <= 1) {
      int width = 0;
      for (std::size_t i = begin; i < end; ++i) width = std::max(width, static_cast<int>(pairs[i].code_ids.size()));
      IdGrid src(static_cast<int>(end - begin), width, kPadId);
      Mask mask(src.rows, width, false);
      for (int r = 0; r < src.rows; ++r) {
        const auto& ids = pairs[begin + static_cast<std::size_t>(r)].code_ids;
        for (int c = 0; c < static_cast<int>(ids.size()); ++c) {
          src.at(r, c) = ids[static_cast<std::size_t>(c)];
          mask.set(r, c, true);
        }
      }
      decoded = greedy_decode(model, Task::summarize, src, mask, max_len);
    } else {
      for (std::size_t i = begin; i < end; ++i) decoded.push_back(beam_decode(model, Task::summarize, pairs[i].code_ids, max_len, beam));
    }
    for (std::size_t i = begin; i < end; ++i) {
      Tokens hyp = decode(query_vocab, decoded[i - begin]);
      // References are the vocabulary-mapped gold tokens so both sides share one alphabet.
      Tokens ref = decode(query_vocab, pairs[i].query_ids);
      ExampleRecord rec;
      rec.example = i;
      rec.bleu = sentence_bleu4(hyp, ref);
      rec.meteor = meteor(hyp, ref);
      rec.hypothesis = hyp;
      hyps.push_back(std::move(hyp));
      refs.push_back(std::move(ref));
      report.examples.push_back(std::move(rec));
    }
  }
  report.corpus_bleu4 = bleu4(hyps, refs);
  double m = 0.0;
  for (const auto& e : report.examples) m += *e.meteor;
  report.mean_meteor = m / static_cast<double>(report.examples.size());
  return report;
}

EvalReport merge_reports(EvalReport a, const EvalReport& b) {
  if (a.examples.size() != b.examples.size()) fail(ErrorCode::precondition, "merge_reports: example counts differ");
  for (std::size_t i = 0; i < a.examples.size(); ++i) {
    auto& x = a.examples[i];
    const auto& y = b.examples[i];
    if (!x.gold_rank && y.gold_rank) {
      x.gold_rank = y.gold_rank;
      x.gold_score = y.gold_score;
      x.pool_size = y.pool_size;
    }
    if (!x.bleu && y.bleu) {
      x.bleu = y.bleu;
      x.meteor = y.meteor;
      x.hypothesis = y.hypothesis;
    }
  }
  if (!a.mrr) {
    a.mrr = b.mrr;
    a.ndcg = b.ndcg;
    a.n_distractors = b.n_distractors;
  }
  if (!a.corpus_bleu4) {
    a.corpus_bleu4 = b.corpus_bleu4;
    a.mean_meteor = b.mean_meteor;
  }
  a.warnings.insert(a.warnings.end(), b.warnings.begin(), b.warnings.end());
  a.compute_buckets();
  return a;
}

BootstrapResult paired_bootstrap_mrr(std::span<const int> ranks_a, std::span<const int> ranks_b, int samples,
                                     std::uint64_t seed, double confidence) {
  if (ranks_a.size() != ranks_b.size()) fail(ErrorCode::precondition, "paired_bootstrap_mrr: rank lists differ in length");
  if (samples <= 0 || !(confidence > 0.0 && confidence < 1.0)) fail(ErrorCode::precondition, "paired_bootstrap_mrr: bad options");
  check_ranks(ranks_a, "paired_bootstrap_mrr");
  check_ranks(ranks_b, "paired_bootstrap_mrr");
  const std::size_t n = ranks_a.size();
  BootstrapResult out;
  out.delta = mrr(ranks_a) - mrr(ranks_b);
  Rng rng = Rng::stream(seed, "bootstrap");
  std::vector<double> deltas(static_cast<std::size_t>(samples));
  int non_positive = 0;
  for (auto& d : deltas) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = rng.uniform_index(n);
      s += 1.0 / ranks_a[k] - 1.0 / ranks_b[k];
    }
    d = s / static_cast<double>(n);
    if (d <= 0.0) ++non_positive;
  }
  std::sort(deltas.begin(), deltas.end());
  const double alpha = (1.0 - confidence) / 2.0;
  auto at = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::clamp(q * (samples - 1), 0.0, samples - 1.0) + 0.5);
    return deltas[std::min(idx, deltas.size() - 1)];
  };
  out.ci_low = at(alpha);
  out.ci_high = at(1.0 - alpha);
  out.p_value = static_cast<double>(non_positive) / samples;
  return out;
}

}  // namespace co3
