#pragma once

// Per-side autoregressive language models supplying the marginals log P(x)
// and log P(y). They are trained once and then only ever read.

#include <filesystem>
#include <span>
#include <vector>

#include "co3/autodiff.hpp"
#include "co3/corpus.hpp"
#include "co3/lstm.hpp"

namespace co3 {

struct LmSizing {
  int vocab = 0;
  int hidden = 400;
  int embed = 200;
};

class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(Side side, const LmSizing& sizing);

  Side side() const { return side_; }
  const LmSizing& sizing() const { return sizing_; }

  ad::Parameter embedding;
  LstmCell cell;
  ad::Parameter out_W;
  ad::Parameter out_b;

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  void initialize(Rng& rng, double scale);

 private:
  Side side_ = Side::code;
  LmSizing sizing_;
};

// Per-row sum of log P(s_t | s_<t) over t >= 1 of each BOS-wrapped row.
ad::Var lm_row_logprob(ad::Tape& tape, LanguageModel& lm, const IdGrid& ids, const Mask& mask);

struct LmTrainOptions {
  int epochs = 5;
  int batch_size = 32;
  double lr = 0.001;
  double init_scale = 0.1;
  std::uint64_t seed = 1;
};

struct LmTrainReport {
  std::vector<double> epoch_nll;  // mean per-token NLL for each epoch
};

LanguageModel pretrain_lm(Side side, std::span<const std::vector<int>> sequences, const LmSizing& sizing,
                          const LmTrainOptions& options, LmTrainReport* report = nullptr);

// Sum of next-token log-probabilities; a plain number with no gradient path.
double sequence_log_marginal(const LanguageModel& lm, std::span<const int> ids);
std::vector<double> sequence_log_marginals(const LanguageModel& lm, std::span<const std::vector<int>> sequences);

// exp(mean per-token NLL) over every predicted token.
double perplexity(const LanguageModel& lm, std::span<const std::vector<int>> sequences);

void save_language_model(const LanguageModel& lm, const std::filesystem::path& path);
LanguageModel load_language_model(const std::filesystem::path& path);

}  // namespace co3
