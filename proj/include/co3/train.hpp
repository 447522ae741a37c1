#pragma once

// Per-batch three-stage updates (summarisation, generation, retrieval), the
// epoch loop with validation-based selection, and resumable checkpoints.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "co3/checkpoint.hpp"
#include "co3/config.hpp"
#include "co3/corpus.hpp"
#include "co3/dual.hpp"
#include "co3/optim.hpp"
#include "co3/seq2seq.hpp"

namespace co3 {

struct Optimizers {
  Adam cs;
  Adam cg;
  Adam cr;

  explicit Optimizers(double lr = 0.001) : cs(lr), cg(lr), cr(lr) {}
  void halve_lr();
};

// Language-model marginals per corpus example, computed once.
struct CorpusMarginals {
  std::vector<double> log_px;
  std::vector<double> log_py;
  std::vector<double> normalizer;  // empty unless per-token

  BatchMarginals rows(std::span<const std::size_t> rows) const;
};

CorpusMarginals compute_marginals(const LanguageModels& lms, std::span<const PairExample> corpus, bool per_token);

struct StepReport {
  double l_cs = 0.0;
  double l_cg = 0.0;
  double l_cr = 0.0;
  double l_dual = 0.0;
  bool retried = false;  // divergence guard fired and the lr was halved
};

// One batch of the three sequential updates. `marginals` is required for
// variants with the duality term. A non-finite loss restores the pre-step
// state, halves the learning rates and retries once; a second failure throws
// ErrorCode::diverged.
StepReport train_step(ModelParams& model, std::span<const PairExample> corpus, std::span<const std::size_t> rows,
                           const CorpusMarginals* marginals, const TrainConfig& config, Optimizers& optimizers,
                           Rng& negatives);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double l_cs = 0.0;
  double l_cg = 0.0;
  double l_cr = 0.0;
  double l_dual = 0.0;
  double val_mrr = 0.0;
  double val_bleu = 0.0;
};

struct BestRecord {
  int epoch = 0;  // 0: none yet
  double mrr = 0.0;
  double bleu = 0.0;
};

// Column names present in the log for a variant, in order.
std::vector<std::string> log_columns(Variant variant);
std::string format_log(Variant variant, std::span<const EpochRecord> history);

struct TrainState {
  TrainConfig config;
  VocabPair vocabs;
  ModelParams model;
  Optimizers optimizers;
  Rng shuffle;
  Rng negatives;
  int epochs_done = 0;
  int stale_epochs = 0;
  bool stopped = false;
  BestRecord best;
  std::vector<EpochRecord> history;
  std::vector<NamedTensor> best_params;

  // Fresh state: model initialised from the "init" stream.
  static TrainState create(const TrainConfig& config, VocabPair vocabs);

  // Copy of the model with the best-epoch parameters (current ones if none).
  ModelParams best_model() const;
};

Container to_container(const TrainState& state);
TrainState from_container(const Container& c);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

// Inference view of a checkpoint: config, vocabularies and parameters.
struct LoadedModel {
  TrainConfig config;
  VocabPair vocabs;
  ModelParams model;
};
// `use_best` picks the best-epoch parameters when the file carries them.
LoadedModel load_model(const std::filesystem::path& path, bool use_best = true);

struct TrainOptions {
  std::filesystem::path out_dir;           // empty: nothing is written
  std::optional<int> stop_after_epochs;    // pause after this many epochs in total
  std::ostream* progress = nullptr;
};

// Runs epochs until max_epochs, early stop, or stop_after_epochs. Writes
// train.log, last.co3k and best.co3k into out_dir when set.
void run_training(TrainState& state, std::span<const PairExample> train, std::span<const PairExample> valid,
                  const LanguageModels* lms, const TrainOptions& options = {});

}  // namespace co3
