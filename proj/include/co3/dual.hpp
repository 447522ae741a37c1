#pragma once

// Probabilistic-duality regularizer
//   L_dual = ((log P(x) + log P(y|x)) - (log P(y) + log P(x|y)))^2
// in log space. The marginals are plain numbers, so no gradient can reach
// the language models.

#include <span>
#include <vector>

#include "co3/autodiff.hpp"
#include "co3/corpus.hpp"
#include "co3/lm.hpp"
#include "co3/seq2seq.hpp"

namespace co3 {

struct DualityInputs {
  double log_px = 0.0;
  double log_py = 0.0;
  double log_py_given_x = 0.0;
  double log_px_given_y = 0.0;
};

// Throws ErrorCode::precondition on non-finite or positive log-probabilities.
double dual_regularizer(const DualityInputs& in);

// Per-row regulariser (rows x 1). log_py_given_x / log_px_given_y are the
// differentiable conditional columns; the marginals enter as constants.
// With `normalizer` non-empty each row's difference is divided by it first.
ad::Var dual_regularizer(ad::Var log_py_given_x, ad::Var log_px_given_y, std::span<const double> log_px,
                         std::span<const double> log_py, std::span<const double> normalizer = {});

struct BatchMarginals {
  std::vector<double> log_px;  // code side
  std::vector<double> log_py;  // query side
  std::vector<double> normalizer;  // predicted tokens on both sides, when per-token
};

struct LanguageModels {
  LanguageModel code;
  LanguageModel query;
};

// Marginals for the rows of `batch`, looked up from precomputed per-example
// numbers or evaluated with the language models.
BatchMarginals batch_marginals(const LanguageModels& lms, const Batch& batch, bool per_token);

// Mean of the per-pair regulariser; both conditional paths are recorded on `tape`.
ad::Var batch_dual_loss(ad::Tape& tape, ModelParams& model, const Batch& batch, const BatchMarginals& marginals);

}  // namespace co3
