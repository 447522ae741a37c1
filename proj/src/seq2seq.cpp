#include "co3/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "co3/error.hpp"

namespace co3 {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

std::string_view role_name(CellRole role) {
  switch (role) {
    case CellRole::code_encoder: return "code_encoder";
    case CellRole::code_decoder: return "code_decoder";
    case CellRole::query_encoder: return "query_encoder";
    case CellRole::query_decoder: return "query_decoder";
  }
  return "?";
}

CellBundle::CellBundle(const std::string& bundle_name, int direction_hidden, int input)
    : name(bundle_name),
      forward("cell." + bundle_name + ".fwd", direction_hidden, input),
      backward("cell." + bundle_name + ".bwd", direction_hidden, input) {}

std::vector<Parameter*> CellBundle::parameters() {
  auto out = forward.parameters();
  for (auto* p : backward.parameters()) out.push_back(p);
  return out;
}

SharedCellRegistry::SharedCellRegistry(bool shared, bool with_query_decoder, bool with_code_decoder,
                                       int direction_hidden, int input)
    : shared_(shared) {
  auto add = [&](const std::string& name) {
    bundles_.emplace_back(name, direction_hidden, input);
    return static_cast<int>(bundles_.size()) - 1;
  };
  auto set = [&](CellRole role, int index) { role_index_[static_cast<int>(role)] = index; };
  if (shared) {
    const int code = add("code");
    const int query = add("query");
    set(CellRole::code_encoder, code);
    set(CellRole::query_encoder, query);
    if (with_query_decoder) set(CellRole::query_decoder, query);
    if (with_code_decoder) set(CellRole::code_decoder, code);
  } else {
    set(CellRole::code_encoder, add("code_enc"));
    if (with_query_decoder) set(CellRole::query_decoder, add("query_dec"));
    set(CellRole::query_encoder, add("query_enc"));
    if (with_code_decoder) set(CellRole::code_decoder, add("code_dec"));
  }
}

CellBundle& SharedCellRegistry::resolve(CellRole role) {
  const int idx = role_index_[static_cast<int>(role)];
  if (idx < 0) fail(ErrorCode::precondition, "cell role " + std::string(role_name(role)) + " absent in this variant");
  return bundles_[static_cast<std::size_t>(idx)];
}

const CellBundle& SharedCellRegistry::resolve(CellRole role) const {
  return const_cast<SharedCellRegistry*>(this)->resolve(role);
}

std::vector<std::pair<CellRole, std::string>> SharedCellRegistry::ownership() const {
  std::vector<std::pair<CellRole, std::string>> out;
  for (CellRole r : {CellRole::code_encoder, CellRole::code_decoder, CellRole::query_encoder, CellRole::query_decoder})
    if (has(r)) out.emplace_back(r, resolve(r).name);
  return out;
}

long SharedCellRegistry::parameter_count() const {
  long n = 0;
  for (const auto& b : bundles_) n += b.parameter_count();
  return n;
}

DecoderHead::DecoderHead(const std::string& prefix, int hidden, int embed, int vocab)
    : attention(prefix + ".attn", hidden, hidden),
      pre_W(prefix + ".pre.W", embed, embed + hidden),
      pre_b(prefix + ".pre.b", 1, embed),
      out_Wu(prefix + ".out.Wu", hidden, 2 * hidden),
      out_bu(prefix + ".out.bu", 1, hidden),
      out_Wv(prefix + ".out.Wv", vocab, hidden),
      out_bv(prefix + ".out.bv", 1, vocab) {}

std::vector<Parameter*> DecoderHead::parameters() {
  return {&attention, &pre_W, &pre_b, &out_Wu, &out_bu, &out_Wv, &out_bv};
}

RetrievalParams::RetrievalParams(int hidden, int proj)
    : code_W("retr.code.W", proj, hidden),
      code_b("retr.code.b", 1, proj),
      query_W("retr.query.W", proj, hidden),
      query_b("retr.query.b", 1, proj) {}

std::vector<Parameter*> RetrievalParams::parameters() { return {&code_W, &code_b, &query_W, &query_b}; }

ModelSizing ModelSizing::from(const TrainConfig& cfg, int code_vocab, int query_vocab) {
  return {cfg.variant, code_vocab, query_vocab, cfg.hidden, cfg.embed, cfg.proj};
}

ModelParams::ModelParams(const ModelSizing& sizing) : sizing_(sizing) {
  if (sizing.hidden < 2 || sizing.hidden % 2 != 0) fail(ErrorCode::config, "hidden must be even and >= 2");
  if (sizing.code_vocab <= kReservedCount || sizing.query_vocab <= kReservedCount) {
    fail(ErrorCode::config, "vocabularies must contain at least one non-reserved token");
  }
  const VariantTraits traits = traits_of(sizing.variant);
  code_embedding = Parameter("emb.code", sizing.code_vocab, sizing.embed);
  query_embedding = Parameter("emb.query", sizing.query_vocab, sizing.embed);
  cells = SharedCellRegistry(traits.shared_cells, traits.summarization, traits.generation, sizing.hidden / 2,
                             sizing.embed);
  if (traits.summarization) summarizer.emplace("sum", sizing.hidden, sizing.embed, sizing.query_vocab);
  if (traits.generation) generator.emplace("gen", sizing.hidden, sizing.embed, sizing.code_vocab);
  retrieval = RetrievalParams(sizing.hidden, sizing.proj);
}

DecoderHead& ModelParams::head(Task task) {
  auto& h = task == Task::summarize ? summarizer : generator;
  if (!h) fail(ErrorCode::precondition, task == Task::summarize ? "model has no summarisation module"
                                                                 : "model has no generation module");
  return *h;
}

std::vector<Parameter*> ModelParams::parameters(ParamGroup group) {
  std::vector<Parameter*> out;
  std::unordered_set<Parameter*> seen;
  auto push = [&](Parameter* p) {
    if (seen.insert(p).second) out.push_back(p);
  };
  auto push_all = [&](std::vector<Parameter*> ps) {
    for (auto* p : ps) push(p);
  };
  switch (group) {
    case ParamGroup::all:
      push(&code_embedding);
      push(&query_embedding);
      for (auto& b : cells.bundles()) push_all(b.parameters());
      if (summarizer) push_all(summarizer->parameters());
      if (generator) push_all(generator->parameters());
      push_all(retrieval.parameters());
      break;
    case ParamGroup::summarization:
      if (!summarizer) break;
      push(&code_embedding);
      push(&query_embedding);
      push_all(cells.resolve(CellRole::code_encoder).parameters());
      push_all(cells.resolve(CellRole::query_decoder).parameters());
      push_all(summarizer->parameters());
      break;
    case ParamGroup::generation:
      if (!generator) break;
      push(&query_embedding);
      push(&code_embedding);
      push_all(cells.resolve(CellRole::query_encoder).parameters());
      push_all(cells.resolve(CellRole::code_decoder).parameters());
      push_all(generator->parameters());
      break;
    case ParamGroup::retrieval:
      push(&code_embedding);
      push(&query_embedding);
      push_all(cells.resolve(CellRole::code_encoder).parameters());
      push_all(cells.resolve(CellRole::query_encoder).parameters());
      push_all(retrieval.parameters());
      break;
  }
  return out;
}

std::vector<const Parameter*> ModelParams::parameters() const {
  auto ps = const_cast<ModelParams*>(this)->parameters(ParamGroup::all);
  return {ps.begin(), ps.end()};
}

Parameter* ModelParams::find(const std::string& name) {
  for (auto* p : parameters(ParamGroup::all))
    if (p->name == name) return p;
  return nullptr;
}

long ModelParams::parameter_count() const {
  long n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

void ModelParams::initialize(Rng& rng, double scale) {
  for (auto* p : parameters(ParamGroup::all)) {
    if (p->value.rows() == 1) {
      p->value.setZero();  // biases
      continue;
    }
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = rng.uniform(-scale, scale);
  }
  zero_grad();
}

void ModelParams::zero_grad() {
  for (auto* p : parameters(ParamGroup::all)) p->zero_grad();
}

// ---- encoder ------------------------------------------------------------------

Encoded encode_bidirectional(Tape& tape, CellBundle& cells, Parameter& embedding, const IdGrid& ids,
                             const Mask& mask) {
  if (ids.cols < 1) fail(ErrorCode::precondition, "encoder: empty sequence grid");
  if (mask.rows != ids.rows || mask.cols != ids.cols) fail(ErrorCode::shape, "encoder: mask does not match ids");
  for (int r = 0; r < ids.rows; ++r) {
    if (!mask(r, 0)) fail(ErrorCode::precondition, "encoder: row " + std::to_string(r) + " is fully masked");
  }
  const int rows = ids.rows, steps = ids.cols;
  const int dh = cells.forward.hidden();
  Var table = tape.param(embedding);
  std::vector<Var> inputs;
  inputs.reserve(steps);
  for (int t = 0; t < steps; ++t) {
    const auto col = ids.column(t);
    inputs.push_back(ad::row_select(table, col));
  }

  std::vector<Var> fwd(steps), bwd(steps);
  LstmState state = zero_state(tape, rows, dh);
  for (int t = 0; t < steps; ++t) {
    const auto m = mask.column(t);
    LstmState next = lstm_step(tape, cells.forward, state, inputs[t]);
    fwd[t] = ad::mask_rows(next.h, m);
    state = {ad::where_rows(m, next.h, state.h), ad::where_rows(m, next.c, state.c)};
  }
  Var last_forward = state.h;

  state = zero_state(tape, rows, dh);
  for (int t = steps - 1; t >= 0; --t) {
    const auto m = mask.column(t);
    LstmState next = lstm_step(tape, cells.backward, state, inputs[t]);
    bwd[t] = ad::mask_rows(next.h, m);
    state = {ad::where_rows(m, next.h, state.h), ad::where_rows(m, next.c, state.c)};
  }

  Encoded enc;
  enc.states.reserve(steps);
  for (int t = 0; t < steps; ++t) enc.states.push_back(ad::concat_cols({fwd[t], bwd[t]}));
  enc.last_forward = last_forward;
  enc.first_backward = state.h;
  enc.mask = mask;
  return enc;
}

Encoded encode_side(Tape& tape, ModelParams& model, Side side, const IdGrid& ids, const Mask& mask) {
  CellBundle& cells = model.cells.resolve(side == Side::code ? CellRole::code_encoder : CellRole::query_encoder);
  return encode_bidirectional(tape, cells, model.embedding(side), ids, mask);
}

// ---- decoder ------------------------------------------------------------------

Attention attend(const Encoded& enc, Var decoder_state, Var bilinear) {
  Var query = ad::matmul(decoder_state, bilinear);
  Var scores = ad::row_dots(enc.states, query);
  Var weights = ad::masked_softmax(scores, enc.mask);
  return {weights, ad::weighted_sum(enc.states, weights)};
}

Var DecoderState::hidden() const { return ad::concat_cols({forward_lane.h, backward_lane.h}); }

DecoderState init_decoder(Tape& tape, const Encoded& enc) {
  const int rows = static_cast<int>(enc.last_forward.rows());
  const int dh = static_cast<int>(enc.last_forward.cols());
  DecoderState s;
  s.forward_lane = {enc.last_forward, tape.constant(Matrix::Zero(rows, dh))};
  s.backward_lane = {enc.first_backward, tape.constant(Matrix::Zero(rows, dh))};
  s.context = tape.constant(Matrix::Zero(rows, 2 * dh));
  return s;
}

namespace {

Side target_side(Task task) { return task == Task::summarize ? Side::query : Side::code; }
Side source_side(Task task) { return task == Task::summarize ? Side::code : Side::query; }
CellRole decoder_role(Task task) { return task == Task::summarize ? CellRole::query_decoder : CellRole::code_decoder; }

}  // namespace

DecodeStep decode_step(Tape& tape, ModelParams& model, Task task, const DecoderState& prev,
                       std::span<const int> prev_tokens, const Encoded& enc) {
  DecoderHead& head = model.head(task);
  CellBundle& cells = model.cells.resolve(decoder_role(task));
  Var embedded = ad::row_select(tape.param(model.embedding(target_side(task))), prev_tokens);
  Var input = ad::add_row(ad::matmul_nt(ad::concat_cols({embedded, prev.context}), tape.param(head.pre_W)),
                          tape.param(head.pre_b));
  DecodeStep out;
  out.state.forward_lane = lstm_step(tape, cells.forward, prev.forward_lane, input);
  out.state.backward_lane = lstm_step(tape, cells.backward, prev.backward_lane, input);
  Var hidden = out.state.hidden();
  Attention att = attend(enc, hidden, tape.param(head.attention));
  out.state.context = att.context;
  Var u = ad::add_row(ad::matmul_nt(ad::concat_cols({hidden, att.context}), tape.param(head.out_Wu)),
                      tape.param(head.out_bu));
  Var logits = ad::add_row(ad::matmul_nt(u, tape.param(head.out_Wv)), tape.param(head.out_bv));
  out.log_probs = ad::log_softmax(logits);
  return out;
}

Var conditional_logprob(Tape& tape, ModelParams& model, Task task, const Encoded& source, const IdGrid& target,
                        const Mask& target_mask) {
  if (target.cols < 2) fail(ErrorCode::precondition, "conditional_logprob: target needs BOS and at least one token");
  DecoderState state = init_decoder(tape, source);
  Var total = tape.constant(Matrix::Zero(target.rows, 1));
  for (int t = 0; t + 1 < target.cols; ++t) {
    const auto prev = target.column(t);
    DecodeStep step = decode_step(tape, model, task, state, prev, source);
    const auto gold = target.column(t + 1);
    Var picked = ad::mask_rows(ad::pick(step.log_probs, gold), target_mask.column(t + 1));
    total = ad::add(total, picked);
    state = step.state;
  }
  return total;
}

Var conditional_logprob(Tape& tape, ModelParams& model, Task task, const Batch& batch) {
  const bool summarize = task == Task::summarize;
  Encoded source = encode_side(tape, model, source_side(task), summarize ? batch.code : batch.query,
                               summarize ? batch.code_mask : batch.query_mask);
  return conditional_logprob(tape, model, task, source, summarize ? batch.query : batch.code,
                             summarize ? batch.query_mask : batch.code_mask);
}

Var nll_loss(Var row_logprobs) { return ad::scale(ad::mean(row_logprobs), -1.0); }

double conditional_logprob(ModelParams& model, Task task, std::span<const int> source_ids,
                           std::span<const int> target_ids) {
  if (source_ids.empty() || target_ids.size() < 2) fail(ErrorCode::precondition, "conditional_logprob: empty input");
  IdGrid src(1, static_cast<int>(source_ids.size()), kPadId);
  std::copy(source_ids.begin(), source_ids.end(), src.ids.begin());
  IdGrid tgt(1, static_cast<int>(target_ids.size()), kPadId);
  std::copy(target_ids.begin(), target_ids.end(), tgt.ids.begin());
  Tape tape(false);
  Encoded enc = encode_side(tape, model, source_side(task), src, Mask(1, src.cols, true));
  return conditional_logprob(tape, model, task, enc, tgt, Mask(1, tgt.cols, true)).value()(0, 0);
}

// ---- decoding -----------------------------------------------------------------

namespace {

bool selectable(int id) { return id != kPadId && id != kBosId; }

IdGrid single_row(std::span<const int> ids) {
  IdGrid g(1, static_cast<int>(ids.size()), kPadId);
  std::copy(ids.begin(), ids.end(), g.ids.begin());
  return g;
}

Var rows_of(Tape& tape, Var v, const std::vector<int>& rows) {
  const Matrix& m = v.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return tape.constant(std::move(out));
}

DecoderState rows_of(Tape& tape, const DecoderState& s, const std::vector<int>& rows) {
  return {{rows_of(tape, s.forward_lane.h, rows), rows_of(tape, s.forward_lane.c, rows)},
          {rows_of(tape, s.backward_lane.h, rows), rows_of(tape, s.backward_lane.c, rows)},
          rows_of(tape, s.context, rows)};
}

Encoded replicate(Tape& tape, const Encoded& enc, int copies) {
  Encoded out;
  const std::vector<int> rows(static_cast<std::size_t>(copies), 0);
  for (const Var& s : enc.states) out.states.push_back(rows_of(tape, s, rows));
  out.last_forward = rows_of(tape, enc.last_forward, rows);
  out.first_backward = rows_of(tape, enc.first_backward, rows);
  out.mask = Mask(copies, enc.mask.cols, false);
  for (int r = 0; r < copies; ++r)
    for (int c = 0; c < enc.mask.cols; ++c) out.mask.set(r, c, enc.mask(0, c));
  return out;
}

}  // namespace

std::vector<std::vector<int>> greedy_decode(ModelParams& model, Task task, const IdGrid& sources,
                                            const Mask& source_mask, int max_len) {
  Tape tape(false);
  Encoded enc = encode_side(tape, model, source_side(task), sources, source_mask);
  DecoderState state = init_decoder(tape, enc);
  const int rows = sources.rows;
  std::vector<std::vector<int>> out(static_cast<std::size_t>(rows));
  std::vector<bool> done(static_cast<std::size_t>(rows), false);
  std::vector<int> prev(static_cast<std::size_t>(rows), kBosId);
  for (int step = 0; step < max_len; ++step) {
    DecodeStep ds = decode_step(tape, model, task, state, prev, enc);
    const Matrix& lp = ds.log_probs.value();
    bool any_live = false;
    for (int r = 0; r < rows; ++r) {
      if (done[r]) {
        prev[r] = kPadId;
        continue;
      }
      int best = -1;
      for (int v = 0; v < lp.cols(); ++v)
        if (selectable(v) && (best < 0 || lp(r, v) > lp(r, best))) best = v;
      if (best == kEosId) {
        done[r] = true;
        prev[r] = kPadId;
        continue;
      }
      out[r].push_back(best);
      prev[r] = best;
      any_live = true;
    }
    if (!any_live) break;
    state = ds.state;
  }
  return out;
}

std::vector<int> greedy_decode(ModelParams& model, Task task, std::span<const int> source_ids, int max_len) {
  IdGrid src = single_row(source_ids);
  return greedy_decode(model, task, src, Mask(1, src.cols, true), max_len).front();
}

std::vector<int> beam_decode(ModelParams& model, Task task, std::span<const int> source_ids, int max_len, int beam) {
  if (beam < 1) fail(ErrorCode::precondition, "beam_decode: beam must be >= 1");
  struct Hypothesis {
    std::vector<int> tokens;
    double score = 0.0;
    int row = 0;  // row inside the current state batch
  };
  struct Finished {
    std::vector<int> tokens;
    double score;
    int length;  // predicted tokens, EOS included
  };
  Tape tape(false);
  IdGrid src = single_row(source_ids);
  Encoded enc = encode_side(tape, model, source_side(task), src, Mask(1, src.cols, true));
  DecoderState state = init_decoder(tape, enc);
  std::vector<Hypothesis> live{{{}, 0.0, 0}};
  std::vector<Finished> finished;
  for (int step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<int> rows, prev;
    for (const auto& h : live) {
      rows.push_back(h.row);
      prev.push_back(h.tokens.empty() ? kBosId : h.tokens.back());
    }
    DecoderState batch_state = rows_of(tape, state, rows);
    Encoded batch_enc = replicate(tape, enc, static_cast<int>(live.size()));
    DecodeStep ds = decode_step(tape, model, task, batch_state, prev, batch_enc);
    const Matrix& lp = ds.log_probs.value();
    struct Candidate {
      double score;
      int hyp;
      int token;
    };
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i)
      for (int v = 0; v < lp.cols(); ++v)
        if (selectable(v)) cands.push_back({live[i].score + lp(static_cast<Eigen::Index>(i), v), static_cast<int>(i), v});
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    // Only the top `beam` expansions survive; those ending in EOS finish.
    std::vector<Hypothesis> next;
    for (std::size_t k = 0; k < cands.size() && k < static_cast<std::size_t>(beam); ++k) {
      const Candidate& c = cands[k];
      const Hypothesis& parent = live[static_cast<std::size_t>(c.hyp)];
      if (c.token == kEosId) {
        finished.push_back({parent.tokens, c.score, static_cast<int>(parent.tokens.size()) + 1});
        continue;
      }
      Hypothesis h{parent.tokens, c.score, c.hyp};
      h.tokens.push_back(c.token);
      next.push_back(std::move(h));
    }
    state = ds.state;
    live = std::move(next);
    if (static_cast<int>(finished.size()) >= beam) break;
  }
  for (const auto& h : live) finished.push_back({h.tokens, h.score, std::max<int>(1, static_cast<int>(h.tokens.size()))});
  const Finished* best = nullptr;
  for (const auto& f : finished)
    if (best == nullptr || f.score / f.length > best->score / best->length) best = &f;
  return best ? best->tokens : std::vector<int>{};
}

}  // namespace co3
