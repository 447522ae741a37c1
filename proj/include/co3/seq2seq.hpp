#pragma once

// The dual sequence-to-sequence pair: code summarisation (code -> query) and
// code generation (query -> code).
//
// Each side of the corpus owns one registry entry holding a forward and a
// backward LSTM cell of width hidden / 2. The entry encodes its side
// bidirectionally and also decodes that side for the dual task: the decoder
// state [h_fwd ; h_bwd] of width `hidden` is advanced by the two cells as
// two lanes fed the same pre-projected input. The decoder starts from the
// source encoder's [last forward ; first backward] states.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "co3/autodiff.hpp"
#include "co3/config.hpp"
#include "co3/corpus.hpp"
#include "co3/lstm.hpp"

namespace co3 {

enum class CellRole { code_encoder, code_decoder, query_encoder, query_decoder };

std::string_view role_name(CellRole role);

struct CellBundle {
  std::string name;
  LstmCell forward;
  LstmCell backward;

  CellBundle() = default;
  CellBundle(const std::string& bundle_name, int direction_hidden, int input);
  std::vector<ad::Parameter*> parameters();
  long parameter_count() const { return forward.parameter_count() + backward.parameter_count(); }
};

// Maps module roles onto cell bundles. In shared mode the code
// encoder and code decoder resolve to one bundle, likewise for the query side.
class SharedCellRegistry {
 public:
  SharedCellRegistry() = default;
  SharedCellRegistry(bool shared, bool with_query_decoder, bool with_code_decoder, int direction_hidden,
                     int input);

  bool has(CellRole role) const { return role_index_[static_cast<int>(role)] >= 0; }
  CellBundle& resolve(CellRole role);
  const CellBundle& resolve(CellRole role) const;
  int bundle_count() const { return static_cast<int>(bundles_.size()); }
  std::vector<CellBundle>& bundles() { return bundles_; }
  const std::vector<CellBundle>& bundles() const { return bundles_; }
  bool shared() const { return shared_; }
  // (role, bundle name) for every present role.
  std::vector<std::pair<CellRole, std::string>> ownership() const;
  long parameter_count() const;

 private:
  std::vector<CellBundle> bundles_;
  std::array<int, 4> role_index_{-1, -1, -1, -1};
  bool shared_ = true;
};

// Decoder-specific parameters: bilinear attention, the pre-projection
// [prev embedding ; context] -> cell input, and the vocabulary projection.
struct DecoderHead {
  ad::Parameter attention;  // hidden x hidden
  ad::Parameter pre_W;      // embed x (embed + hidden)
  ad::Parameter pre_b;      // 1 x embed
  ad::Parameter out_Wu;     // hidden x 2*hidden
  ad::Parameter out_bu;     // 1 x hidden
  ad::Parameter out_Wv;     // vocab x hidden
  ad::Parameter out_bv;     // 1 x vocab

  DecoderHead() = default;
  DecoderHead(const std::string& prefix, int hidden, int embed, int vocab);
  std::vector<ad::Parameter*> parameters();
};

struct RetrievalParams {
  ad::Parameter code_W;   // proj x hidden
  ad::Parameter code_b;   // 1 x proj
  ad::Parameter query_W;  // proj x hidden
  ad::Parameter query_b;  // 1 x proj

  RetrievalParams() = default;
  RetrievalParams(int hidden, int proj);
  std::vector<ad::Parameter*> parameters();
};

struct ModelSizing {
  Variant variant = Variant::co3;
  int code_vocab = 0;
  int query_vocab = 0;
  int hidden = 400;
  int embed = 200;
  int proj = 400;

  static ModelSizing from(const TrainConfig& cfg, int code_vocab, int query_vocab);
};

enum class Task { summarize, generate };

enum class ParamGroup { summarization, generation, retrieval, all };

class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(const ModelSizing& sizing);

  const ModelSizing& sizing() const { return sizing_; }
  int direction_hidden() const { return sizing_.hidden / 2; }

  ad::Parameter code_embedding;
  ad::Parameter query_embedding;
  SharedCellRegistry cells;
  std::optional<DecoderHead> summarizer;
  std::optional<DecoderHead> generator;
  RetrievalParams retrieval;

  bool has_task(Task task) const { return task == Task::summarize ? summarizer.has_value() : generator.has_value(); }
  DecoderHead& head(Task task);
  ad::Parameter& embedding(Side side) { return side == Side::code ? code_embedding : query_embedding; }

  // Deterministic order; no duplicates.
  std::vector<ad::Parameter*> parameters(ParamGroup group = ParamGroup::all);
  std::vector<const ad::Parameter*> parameters() const;
  ad::Parameter* find(const std::string& name);

  long parameter_count() const;
  long cell_parameter_count() const { return cells.parameter_count(); }

  void initialize(Rng& rng, double scale);
  void zero_grad();

 private:
  ModelSizing sizing_;
};

// ---- forward computation ----------------------------------------------------

struct Encoded {
  std::vector<ad::Var> states;  // per time step, rows x hidden, zero at padding
  ad::Var last_forward;         // forward state at each row's last real token
  ad::Var first_backward;       // backward state at position 0
  Mask mask;
};

Encoded encode_bidirectional(ad::Tape& tape, CellBundle& cells, ad::Parameter& embedding, const IdGrid& ids,
                             const Mask& mask);
// Encoder for `side` as used by the summarisation (code) or generation (query) module.
Encoded encode_side(ad::Tape& tape, ModelParams& model, Side side, const IdGrid& ids, const Mask& mask);

struct Attention {
  ad::Var weights;  // rows x T, on the simplex over unmasked positions
  ad::Var context;  // rows x hidden
};

Attention attend(const Encoded& enc, ad::Var decoder_state, ad::Var bilinear);

struct DecoderState {
  LstmState forward_lane;
  LstmState backward_lane;
  ad::Var context;
  ad::Var hidden() const;
};

// h_0 = [last forward ; first backward], memory cells and context start at zero.
DecoderState init_decoder(ad::Tape& tape, const Encoded& enc);

struct DecodeStep {
  DecoderState state;
  ad::Var log_probs;  // rows x vocab (log of P_v)
};

DecodeStep decode_step(ad::Tape& tape, ModelParams& model, Task task, const DecoderState& prev,
                       std::span<const int> prev_tokens, const Encoded& enc);

// Teacher-forced sum of log P(target_t) for t >= 1 (BOS is not predicted,
// EOS is), one value per row.
ad::Var conditional_logprob(ad::Tape& tape, ModelParams& model, Task task, const Encoded& source,
                            const IdGrid& target, const Mask& target_mask);
ad::Var conditional_logprob(ad::Tape& tape, ModelParams& model, Task task, const Batch& batch);

// Mean over rows of the negative teacher-forced log-likelihood.
ad::Var nll_loss(ad::Var row_logprobs);

double conditional_logprob(ModelParams& model, Task task, std::span<const int> source_ids,
                           std::span<const int> target_ids);

// Token ids (without BOS/EOS), at most max_len of them.
std::vector<std::vector<int>> greedy_decode(ModelParams& model, Task task, const IdGrid& sources,
                                            const Mask& source_mask, int max_len);
std::vector<int> greedy_decode(ModelParams& model, Task task, std::span<const int> source_ids, int max_len);
std::vector<int> beam_decode(ModelParams& model, Task task, std::span<const int> source_ids, int max_len,
                             int beam);

}  // namespace co3
