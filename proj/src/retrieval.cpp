#include "co3/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "co3/error.hpp"

namespace co3 {

using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

struct Padded {
  IdGrid ids;
  Mask mask;
};

Padded pad(std::span<const std::vector<int>> seqs, std::size_t begin, std::size_t end) {
  int width = 0;
  for (std::size_t i = begin; i < end; ++i) width = std::max(width, static_cast<int>(seqs[i].size()));
  const int rows = static_cast<int>(end - begin);
  Padded p{IdGrid(rows, width, kPadId), Mask(rows, width, false)};
  for (int r = 0; r < rows; ++r) {
    const auto& s = seqs[begin + static_cast<std::size_t>(r)];
    if (s.empty()) fail(ErrorCode::precondition, "retrieval: empty sequence");
    for (int c = 0; c < static_cast<int>(s.size()); ++c) {
      p.ids.at(r, c) = s[static_cast<std::size_t>(c)];
      p.mask.set(r, c, true);
    }
  }
  return p;
}

}  // namespace

Pooled pool_states(std::span<const Var> states, const Mask& mask) {
  ad::MaxPool mp = ad::max_over_time(states, mask);
  return {ad::tanh(mp.value), std::move(mp.argmax)};
}

Var retrieval_vectors(Tape& tape, ModelParams& model, Side side, const IdGrid& ids, const Mask& mask) {
  Encoded enc = encode_side(tape, model, side, ids, mask);
  Pooled pooled = pool_states(enc.states, enc.mask);
  RetrievalParams& rp = model.retrieval;
  const bool code = side == Side::code;
  return ad::add_row(ad::matmul_nt(pooled.vector, tape.param(code ? rp.code_W : rp.query_W)),
                     tape.param(code ? rp.code_b : rp.query_b));
}

Matrix retrieval_vectors(ModelParams& model, Side side, std::span<const std::vector<int>> sequences, int chunk) {
  if (chunk <= 0) fail(ErrorCode::precondition, "retrieval_vectors: chunk must be positive");
  Matrix out(static_cast<Eigen::Index>(sequences.size()), model.retrieval.code_W.value.rows());
  for (std::size_t begin = 0; begin < sequences.size(); begin += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(sequences.size(), begin + static_cast<std::size_t>(chunk));
    Padded p = pad(sequences, begin, end);
    Tape tape(false);
    Var v = retrieval_vectors(tape, model, side, p.ids, p.mask);
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) = v.value();
  }
  return out;
}

Var score(Var code_vectors, Var query_vectors) { return ad::cosine_rows(code_vectors, query_vectors); }

double cosine(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b) {
  if (a.size() != b.size()) fail(ErrorCode::shape, "cosine: size mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    ad::numeric_warnings().zero_norm_cosine.fetch_add(1, std::memory_order_relaxed);
    return 0.0;
  }
  const double dot = (a.array() * b.array()).sum();
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

double score(const Matrix& code_pooled, const Matrix& query_pooled, RetrievalParams& params) {
  if (code_pooled.cols() != params.code_W.value.cols() || query_pooled.cols() != params.query_W.value.cols()) {
    fail(ErrorCode::shape, "score: pooled width does not match projection");
  }
  Matrix p = code_pooled * params.code_W.value.transpose() + params.code_b.value;
  Matrix q = query_pooled * params.query_W.value.transpose() + params.query_b.value;
  return cosine(p, q);
}

Var ranking_loss(Var pos, Var neg, double margin) {
  if (!(margin >= 0.0)) fail(ErrorCode::precondition, "ranking_loss: margin must be >= 0");
  return ad::mean(ad::relu(ad::add_scalar(ad::sub(neg, pos), margin)));
}

double ranking_loss(double pos, double neg, double margin) {
  if (!(margin >= 0.0)) fail(ErrorCode::precondition, "ranking_loss: margin must be >= 0");
  return std::max(margin - pos + neg, 0.0);
}

std::vector<ScoredCandidate> rank_by_scores(std::span<const double> scores) {
  if (scores.empty()) fail(ErrorCode::precondition, "rank_candidates: no candidates");
  std::vector<ScoredCandidate> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = {i, scores[i], 0};
  std::stable_sort(out.begin(), out.end(),
                   [](const ScoredCandidate& a, const ScoredCandidate& b) { return a.score > b.score; });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].rank = static_cast<int>(i) + 1;
  return out;
}

std::vector<ScoredCandidate> rank_candidates(ModelParams& model, std::span<const int> query_ids,
                                             std::span<const std::vector<int>> candidate_code_ids) {
  if (candidate_code_ids.empty()) fail(ErrorCode::precondition, "rank_candidates: no candidates");
  std::vector<std::vector<int>> query{std::vector<int>(query_ids.begin(), query_ids.end())};
  const Matrix q = retrieval_vectors(model, Side::query, query);
  const Matrix c = retrieval_vectors(model, Side::code, candidate_code_ids);
  std::vector<double> scores(candidate_code_ids.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = cosine(c.row(static_cast<Eigen::Index>(i)), q.row(0));
  return rank_by_scores(scores);
}

std::vector<int> pooling_attribution(ModelParams& model, Side side, std::span<const int> ids) {
  if (ids.empty()) fail(ErrorCode::precondition, "pooling_attribution: empty sequence");
  IdGrid grid(1, static_cast<int>(ids.size()), kPadId);
  std::copy(ids.begin(), ids.end(), grid.ids.begin());
  Mask mask(1, grid.cols, true);
  Tape tape(false);
  Encoded enc = encode_side(tape, model, side, grid, mask);
  Pooled pooled = pool_states(enc.states, enc.mask);
  std::vector<int> counts(ids.size(), 0);
  for (Eigen::Index k = 0; k < pooled.argmax.cols(); ++k) ++counts[static_cast<std::size_t>(pooled.argmax(0, k))];
  return counts;
}

void write_attribution_tsv(std::ostream& out, std::span<const std::string> tokens, std::span<const int> counts) {
  if (tokens.size() != counts.size()) fail(ErrorCode::shape, "attribution: token/count length mismatch");
  out << "position\ttoken\tcount\n";
  for (std::size_t i = 0; i < tokens.size(); ++i) out << i << '\t' << tokens[i] << '\t' << counts[i] << '\n';
}

}  // namespace co3
