#include "co3/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "co3/checkpoint.hpp"
#include "co3/error.hpp"
#include "co3/optim.hpp"

namespace co3 {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

namespace {

std::string prefix_of(Side side) { return "lm." + std::string(side_name(side)); }

struct Padded {
  IdGrid ids;
  Mask mask;
};

Padded pad(std::span<const std::vector<int>* const> rows) {
  int width = 0;
  for (const auto* r : rows) width = std::max(width, static_cast<int>(r->size()));
  Padded out{IdGrid(static_cast<int>(rows.size()), width, kPadId), Mask(static_cast<int>(rows.size()), width, false)};
  for (int r = 0; r < out.ids.rows; ++r) {
    const auto& seq = *rows[static_cast<std::size_t>(r)];
    for (int c = 0; c < static_cast<int>(seq.size()); ++c) {
      out.ids.at(r, c) = seq[static_cast<std::size_t>(c)];
      out.mask.set(r, c, true);
    }
  }
  return out;
}

void check_sequence(std::span<const int> ids, int vocab) {
  if (ids.size() < 2) fail(ErrorCode::precondition, "language model: sequence needs at least two ids");
  for (int id : ids)
    if (id < 0 || id >= vocab) fail(ErrorCode::shape, "language model: id " + std::to_string(id) + " out of range");
}

}  // namespace

LanguageModel::LanguageModel(Side side, const LmSizing& sizing)
    : embedding(prefix_of(side) + ".emb", sizing.vocab, sizing.embed),
      cell(prefix_of(side) + ".cell", sizing.hidden, sizing.embed),
      out_W(prefix_of(side) + ".out.W", sizing.vocab, sizing.hidden),
      out_b(prefix_of(side) + ".out.b", 1, sizing.vocab),
      side_(side),
      sizing_(sizing) {
  if (sizing.vocab <= kReservedCount || sizing.hidden <= 0 || sizing.embed <= 0) {
    fail(ErrorCode::config, "language model: invalid sizing");
  }
}

std::vector<Parameter*> LanguageModel::parameters() { return {&embedding, &cell.W, &cell.U, &cell.b, &out_W, &out_b}; }

std::vector<const Parameter*> LanguageModel::parameters() const {
  return {&embedding, &cell.W, &cell.U, &cell.b, &out_W, &out_b};
}

void LanguageModel::initialize(Rng& rng, double scale) {
  for (auto* p : parameters()) {
    if (p->value.rows() == 1) {
      p->value.setZero();
    } else {
      for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = rng.uniform(-scale, scale);
    }
    p->zero_grad();
  }
}

Var lm_row_logprob(Tape& tape, LanguageModel& lm, const IdGrid& ids, const Mask& mask) {
  if (ids.cols < 2) fail(ErrorCode::precondition, "lm_row_logprob: rows need at least two ids");
  Var table = tape.param(lm.embedding);
  Var W = tape.param(lm.out_W);
  Var b = tape.param(lm.out_b);
  LstmState state = zero_state(tape, ids.rows, lm.cell.hidden());
  Var total = tape.constant(Matrix::Zero(ids.rows, 1));
  for (int t = 0; t + 1 < ids.cols; ++t) {
    const auto here = mask.column(t);
    LstmState next = lstm_step(tape, lm.cell, state, ad::row_select(table, ids.column(t)));
    state = {ad::where_rows(here, next.h, state.h), ad::where_rows(here, next.c, state.c)};
    Var logp = ad::log_softmax(ad::add_row(ad::matmul_nt(state.h, W), b));
    total = ad::add(total, ad::mask_rows(ad::pick(logp, ids.column(t + 1)), mask.column(t + 1)));
  }
  return total;
}

LanguageModel pretrain_lm(Side side, std::span<const std::vector<int>> sequences, const LmSizing& sizing,
                          const LmTrainOptions& options, LmTrainReport* report) {
  if (options.epochs < 0 || options.batch_size <= 0 || !(options.lr > 0.0)) {
    fail(ErrorCode::config, "pretrain_lm: invalid options");
  }
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    if (sequences[i].size() >= 2) {
      check_sequence(sequences[i], sizing.vocab);
      usable.push_back(i);
    }
  }
  if (usable.empty()) fail(ErrorCode::precondition, "pretrain_lm: no usable sequences");

  LanguageModel lm(side, sizing);
  Rng init = Rng::stream(options.seed, "lm.init." + std::string(side_name(side)));
  lm.initialize(init, options.init_scale);
  Rng shuffle = Rng::stream(options.seed, "lm.shuffle." + std::string(side_name(side)));
  Adam adam(options.lr);
  const auto params = lm.parameters();

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = usable.size(); i > 1; --i) std::swap(usable[i - 1], usable[shuffle.uniform_index(i)]);
    double nll = 0.0;
    double tokens = 0.0;
    for (std::size_t start = 0; start < usable.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(usable.size(), start + static_cast<std::size_t>(options.batch_size));
      std::vector<const std::vector<int>*> rows;
      double batch_tokens = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        rows.push_back(&sequences[usable[k]]);
        batch_tokens += static_cast<double>(sequences[usable[k]].size() - 1);
      }
      Padded batch = pad(rows);
      for (auto* p : params) p->zero_grad();
      Tape tape;
      Var lp = lm_row_logprob(tape, lm, batch.ids, batch.mask);
      Var loss = ad::scale(ad::sum(lp), -1.0 / batch_tokens);
      tape.backward(loss);
      adam.step(params);
      nll += loss.scalar() * batch_tokens;
      tokens += batch_tokens;
    }
    if (report != nullptr) report->epoch_nll.push_back(nll / tokens);
  }
  return lm;
}

double sequence_log_marginal(const LanguageModel& lm, std::span<const int> ids) {
  check_sequence(ids, lm.sizing().vocab);
  IdGrid grid(1, static_cast<int>(ids.size()), kPadId);
  std::copy(ids.begin(), ids.end(), grid.ids.begin());
  Tape tape(false);
  // An inference tape never writes through the parameters it binds.
  return lm_row_logprob(tape, const_cast<LanguageModel&>(lm), grid, Mask(1, grid.cols, true)).scalar();
}

std::vector<double> sequence_log_marginals(const LanguageModel& lm, std::span<const std::vector<int>> sequences) {
  std::vector<double> out;
  out.reserve(sequences.size());
  for (const auto& s : sequences) out.push_back(sequence_log_marginal(lm, s));
  return out;
}

double perplexity(const LanguageModel& lm, std::span<const std::vector<int>> sequences) {
  double nll = 0.0;
  double tokens = 0.0;
  for (const auto& s : sequences) {
    if (s.size() < 2) continue;
    nll -= sequence_log_marginal(lm, s);
    tokens += static_cast<double>(s.size() - 1);
  }
  if (tokens == 0.0) fail(ErrorCode::precondition, "perplexity: no predicted tokens");
  return std::exp(nll / tokens);
}

void save_language_model(const LanguageModel& lm, const std::filesystem::path& path) {
  Container c;
  c.metadata["kind"] = "language_model";
  c.metadata["side"] = std::string(side_name(lm.side()));
  c.metadata["vocab"] = std::to_string(lm.sizing().vocab);
  c.metadata["hidden"] = std::to_string(lm.sizing().hidden);
  c.metadata["embed"] = std::to_string(lm.sizing().embed);
  for (const auto* p : lm.parameters()) c.tensors.push_back({p->name, p->value});
  write_container(path, c);
}

LanguageModel load_language_model(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.meta("kind") != "language_model") fail(ErrorCode::checkpoint_format, path.string() + ": not a language model");
  LmSizing sizing;
  try {
    sizing.vocab = std::stoi(c.meta("vocab"));
    sizing.hidden = std::stoi(c.meta("hidden"));
    sizing.embed = std::stoi(c.meta("embed"));
  } catch (const std::logic_error&) {
    fail(ErrorCode::checkpoint_format, path.string() + ": bad language model sizing");
  }
  LanguageModel lm(parse_side(c.meta("side")), sizing);
  for (auto* p : lm.parameters()) {
    const NamedTensor* t = c.find(p->name);
    if (t == nullptr) fail(ErrorCode::checkpoint_format, path.string() + ": missing tensor " + p->name);
    if (t->value.rows() != p->value.rows() || t->value.cols() != p->value.cols()) {
      fail(ErrorCode::checkpoint_format, path.string() + ": shape mismatch for " + p->name);
    }
    p->value = t->value;
    p->zero_grad();
  }
  return lm;
}

}  // namespace co3
