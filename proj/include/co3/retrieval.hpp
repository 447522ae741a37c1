#pragma once

// Retrieval scorer: tanh(max-over-time) pooling of encoder states, an affine
// map per side, and cosine similarity. Trained with a margin ranking loss.

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "co3/autodiff.hpp"
#include "co3/seq2seq.hpp"

namespace co3 {

struct Pooled {
  ad::Var vector;  // rows x hidden, tanh of the masked max
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> argmax;
};

Pooled pool_states(std::span<const ad::Var> states, const Mask& mask);

// Projected retrieval vectors (rows x proj) for one side of a batch.
ad::Var retrieval_vectors(ad::Tape& tape, ModelParams& model, Side side, const IdGrid& ids, const Mask& mask);

// Plain-number vectors for many sequences, computed in chunks.
ad::Matrix retrieval_vectors(ModelParams& model, Side side, std::span<const std::vector<int>> sequences,
                             int chunk = 64);

// Row-wise cosine of the projections.
ad::Var score(ad::Var code_vectors, ad::Var query_vectors);
double score(const ad::Matrix& code_pooled, const ad::Matrix& query_pooled, RetrievalParams& params);
double cosine(const Eigen::Ref<const ad::Matrix>& a, const Eigen::Ref<const ad::Matrix>& b);

// mean over rows of max(margin - pos + neg, 0)
ad::Var ranking_loss(ad::Var pos, ad::Var neg, double margin);
double ranking_loss(double pos, double neg, double margin);

struct ScoredCandidate {
  std::size_t candidate_id = 0;
  double score = 0.0;
  int rank = 0;  // 1-based
};

// Descending by score; equal scores keep input order.
std::vector<ScoredCandidate> rank_by_scores(std::span<const double> scores);
std::vector<ScoredCandidate> rank_candidates(ModelParams& model, std::span<const int> query_ids,
                                             std::span<const std::vector<int>> candidate_code_ids);

// count[t] = number of pooled coordinates won by time step t.
std::vector<int> pooling_attribution(ModelParams& model, Side side, std::span<const int> ids);
void write_attribution_tsv(std::ostream& out, std::span<const std::string> tokens, std::span<const int> counts);

}  // namespace co3
