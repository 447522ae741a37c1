#include "co3/train.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "co3/error.hpp"
#include "co3/eval.hpp"
#include "co3/retrieval.hpp"

namespace co3 {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

namespace {

std::string num(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

double parse_num(const std::string& s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) fail(ErrorCode::checkpoint_format, "bad number '" + s + "'");
  return v;
}

long parse_int(const std::string& s) {
  long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) fail(ErrorCode::checkpoint_format, "bad integer '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

struct Snapshot {
  std::vector<Matrix> values;
  Optimizers optimizers;
  std::string negatives;
};

Snapshot take_snapshot(ModelParams& model, const Optimizers& opt, const Rng& negatives) {
  Snapshot s{{}, opt, negatives.save_state()};
  for (auto* p : model.parameters(ParamGroup::all)) s.values.push_back(p->value);
  return s;
}

void restore(ModelParams& model, Optimizers& opt, Rng& negatives, const Snapshot& s) {
  auto params = model.parameters(ParamGroup::all);
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.values[i];
  opt = s.optimizers;
  negatives.load_state(s.negatives);
}

bool finite(double v) { return std::isfinite(v); }

struct NonFinite {};

Var dual_term(Var y_given_x, Var x_given_y, const CorpusMarginals& m, std::span<const std::size_t> rows) {
  const BatchMarginals bm = m.rows(rows);
  return ad::mean(dual_regularizer(y_given_x, x_given_y, bm.log_px, bm.log_py, bm.normalizer));
}

StepReport step_once(ModelParams& model, std::span<const PairExample> corpus, std::span<const std::size_t> rows,
                     const CorpusMarginals* marginals, const TrainConfig& config, Optimizers& opt, Rng& negatives) {
  const VariantTraits traits = traits_of(config.variant);
  if (traits.dual && marginals == nullptr) fail(ErrorCode::precondition, "train_step: duality term needs marginals");
  StepReport report;
  const Batch batch = make_batch_from_indices(corpus, rows, rows);

  if (traits.summarization) {
    model.zero_grad();
    Tape tape;
    Var y_given_x = conditional_logprob(tape, model, Task::summarize, batch);
    Var loss = nll_loss(y_given_x);
    report.l_cs = loss.scalar();
    if (traits.dual) {
      Var x_given_y = conditional_logprob(tape, model, Task::generate, batch);
      Var dual = dual_term(y_given_x, x_given_y, *marginals, rows);
      report.l_dual = dual.scalar();
      loss = ad::add(loss, ad::scale(dual, config.lambda_cs));
    }
    if (!finite(loss.scalar())) throw NonFinite{};
    tape.backward(loss);
    auto group = model.parameters(ParamGroup::summarization);
    opt.cs.step(group);
  }

  if (traits.generation) {
    model.zero_grad();
    Tape tape;
    Var x_given_y = conditional_logprob(tape, model, Task::generate, batch);
    Var loss = nll_loss(x_given_y);
    report.l_cg = loss.scalar();
    if (traits.dual) {
      // Re-run on the freshly updated summariser.
      Var y_given_x = conditional_logprob(tape, model, Task::summarize, batch);
      loss = ad::add(loss, ad::scale(dual_term(y_given_x, x_given_y, *marginals, rows), config.lambda_cg));
    }
    if (!finite(loss.scalar())) throw NonFinite{};
    tape.backward(loss);
    auto group = model.parameters(ParamGroup::generation);
    opt.cg.step(group);
  }

  {
    const NegativeDraw draw = sample_negatives(rows, corpus.size(), negatives);
    std::vector<std::size_t> neg_code(rows.begin(), rows.end()), neg_query(rows.begin(), rows.end());
    if (config.negative_mode != NegativeMode::replace_query) neg_code = draw.code_rows;
    if (config.negative_mode != NegativeMode::replace_code) neg_query = draw.query_rows;
    const Batch neg = make_batch_from_indices(corpus, neg_code, neg_query);

    model.zero_grad();
    Tape tape;
    Var code = retrieval_vectors(tape, model, Side::code, batch.code, batch.code_mask);
    Var query = retrieval_vectors(tape, model, Side::query, batch.query, batch.query_mask);
    Var pos = score(code, query);
    Var neg_c = config.negative_mode == NegativeMode::replace_query
                    ? code
                    : retrieval_vectors(tape, model, Side::code, neg.code, neg.code_mask);
    Var neg_q = config.negative_mode == NegativeMode::replace_code
                    ? query
                    : retrieval_vectors(tape, model, Side::query, neg.query, neg.query_mask);
    Var loss = ranking_loss(pos, score(neg_c, neg_q), config.margin);
    report.l_cr = loss.scalar();
    if (!finite(report.l_cr)) throw NonFinite{};
    tape.backward(loss);
    auto group = model.parameters(ParamGroup::retrieval);
    opt.cr.step(group);
  }
  return report;
}

}  // namespace

void Optimizers::halve_lr() {
  cs.set_lr(cs.lr() / 2);
  cg.set_lr(cg.lr() / 2);
  cr.set_lr(cr.lr() / 2);
}

BatchMarginals CorpusMarginals::rows(std::span<const std::size_t> idx) const {
  BatchMarginals out;
  for (std::size_t i : idx) {
    if (i >= log_px.size()) fail(ErrorCode::shape, "marginals: row out of range");
    out.log_px.push_back(log_px[i]);
    out.log_py.push_back(log_py[i]);
    if (!normalizer.empty()) out.normalizer.push_back(normalizer[i]);
  }
  return out;
}

CorpusMarginals compute_marginals(const LanguageModels& lms, std::span<const PairExample> corpus, bool per_token) {
  CorpusMarginals m;
  for (const auto& ex : corpus) {
    m.log_px.push_back(sequence_log_marginal(lms.code, ex.code_ids));
    m.log_py.push_back(sequence_log_marginal(lms.query, ex.query_ids));
    if (per_token) m.normalizer.push_back(static_cast<double>(ex.code_ids.size() + ex.query_ids.size() - 2));
  }
  return m;
}

StepReport train_step(ModelParams& model, std::span<const PairExample> corpus, std::span<const std::size_t> rows,
                           const CorpusMarginals* marginals, const TrainConfig& config, Optimizers& optimizers,
                           Rng& negatives) {
  if (rows.empty()) fail(ErrorCode::precondition, "train_step: empty batch");
  const Snapshot snap = take_snapshot(model, optimizers, negatives);
  try {
    return step_once(model, corpus, rows, marginals, config, optimizers, negatives);
  } catch (const NonFinite&) {
  }
  restore(model, optimizers, negatives, snap);
  optimizers.halve_lr();
  try {
    StepReport r = step_once(model, corpus, rows, marginals, config, optimizers, negatives);
    r.retried = true;
    return r;
  } catch (const NonFinite&) {
    restore(model, optimizers, negatives, snap);
    fail(ErrorCode::diverged, "non-finite loss persists after halving the learning rate");
  }
}

// ---- log ------------------------------------------------------------------------

std::vector<std::string> log_columns(Variant variant) {
  const VariantTraits t = traits_of(variant);
  std::vector<std::string> cols{"epoch"};
  if (t.summarization) cols.push_back("L_cs");
  if (t.generation) cols.push_back("L_cg");
  cols.push_back("L_cr");
  if (t.dual) cols.push_back("L_dual");
  cols.push_back("val_MRR");
  if (t.summarization) cols.push_back("val_BLEU4");
  return cols;
}

std::string format_log(Variant variant, std::span<const EpochRecord> history) {
  const VariantTraits t = traits_of(variant);
  std::string out = join(log_columns(variant), '\t') + '\n';
  for (const auto& e : history) {
    std::vector<std::string> f{std::to_string(e.epoch)};
    if (t.summarization) f.push_back(num(e.l_cs));
    if (t.generation) f.push_back(num(e.l_cg));
    f.push_back(num(e.l_cr));
    if (t.dual) f.push_back(num(e.l_dual));
    f.push_back(num(e.val_mrr));
    if (t.summarization) f.push_back(num(e.val_bleu));
    out += join(f, '\t') + '\n';
  }
  return out;
}

// ---- state & checkpoints ------------------------------------------------------

TrainState TrainState::create(const TrainConfig& config, VocabPair vocabs) {
  config.validate();
  TrainState s;
  s.config = config;
  s.model = ModelParams(ModelSizing::from(config, vocabs.code.size(), vocabs.query.size()));
  s.vocabs = std::move(vocabs);
  Rng init = Rng::stream(config.seed, "init");
  s.model.initialize(init, config.init_scale);
  s.optimizers = Optimizers(config.lr);
  s.shuffle = Rng::stream(config.seed, "shuffle");
  s.negatives = Rng::stream(config.seed, "negatives");
  return s;
}

ModelParams TrainState::best_model() const {
  ModelParams m = model;
  if (best_params.empty()) return m;
  for (auto* p : m.parameters(ParamGroup::all)) {
    for (const auto& t : best_params)
      if (t.name == p->name) p->value = t.value;
  }
  return m;
}

namespace {

void put_optimizer(Container& c, const std::string& tag, const Adam& opt) {
  c.metadata["opt." + tag + ".lr"] = num(opt.lr());
  c.metadata["opt." + tag + ".steps"] = std::to_string(opt.steps());
  for (const auto& [name, mo] : opt.moments()) {
    c.tensors.push_back({"opt." + tag + ".m." + name, mo.m});
    c.tensors.push_back({"opt." + tag + ".v." + name, mo.v});
  }
}

void get_optimizer(const Container& c, const std::string& tag, Adam& opt) {
  opt.set_lr(parse_num(c.meta("opt." + tag + ".lr")));
  opt.set_steps(parse_int(c.meta("opt." + tag + ".steps")));
  const std::string pm = "opt." + tag + ".m.", pv = "opt." + tag + ".v.";
  for (const auto& t : c.tensors) {
    if (t.name.rfind(pm, 0) == 0) {
      const std::string name = t.name.substr(pm.size());
      const NamedTensor* v = c.find(pv + name);
      if (v == nullptr) fail(ErrorCode::checkpoint_format, "optimizer state lacks " + pv + name);
      opt.moments()[name] = {t.value, v->value};
    }
  }
}

void check_shape(const Parameter& p, const Matrix& v) {
  if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) {
    fail(ErrorCode::shape, "tensor " + p.name + " has shape " + std::to_string(v.rows()) + "x" +
                               std::to_string(v.cols()) + ", config expects " + std::to_string(p.value.rows()) + "x" +
                               std::to_string(p.value.cols()));
  }
}

void read_header(const Container& c, TrainConfig& config, VocabPair& vocabs) {
  if (c.meta("kind") != "train_state") fail(ErrorCode::checkpoint_format, "not a model checkpoint");
  try {
    config = TrainConfig::parse(c.meta("config"));
  } catch (const Error& e) {
    fail(ErrorCode::checkpoint_format, std::string("embedded config: ") + e.what());
  }
  const auto code = split(c.meta("vocab.code"), '\n');
  const auto query = split(c.meta("vocab.query"), '\n');
  vocabs.code = Vocab::from_tokens(code);
  vocabs.query = Vocab::from_tokens(query);
}

ModelParams read_model(const Container& c, const TrainConfig& config, const VocabPair& vocabs, const std::string& prefix) {
  ModelParams m(ModelSizing::from(config, vocabs.code.size(), vocabs.query.size()));
  for (auto* p : m.parameters(ParamGroup::all)) {
    const NamedTensor* t = c.find(prefix + p->name);
    if (t == nullptr) fail(ErrorCode::checkpoint_format, "missing tensor " + prefix + p->name);
    check_shape(*p, t->value);
    p->value = t->value;
    p->zero_grad();
  }
  return m;
}

}  // namespace

Container to_container(const TrainState& s) {
  Container c;
  c.metadata["kind"] = "train_state";
  c.metadata["config"] = s.config.to_text();
  c.metadata["variant"] = std::string(variant_name(s.config.variant));
  c.metadata["vocab.code"] = join(s.vocabs.code.corpus_tokens(), '\n');
  c.metadata["vocab.query"] = join(s.vocabs.query.corpus_tokens(), '\n');
  c.metadata["epochs_done"] = std::to_string(s.epochs_done);
  c.metadata["stale_epochs"] = std::to_string(s.stale_epochs);
  c.metadata["stopped"] = s.stopped ? "1" : "0";
  c.metadata["best"] = std::to_string(s.best.epoch) + ' ' + num(s.best.mrr) + ' ' + num(s.best.bleu);
  std::vector<std::string> lines;
  for (const auto& e : s.history) {
    lines.push_back(std::to_string(e.epoch) + ' ' + num(e.l_cs) + ' ' + num(e.l_cg) + ' ' + num(e.l_cr) + ' ' +
                    num(e.l_dual) + ' ' + num(e.val_mrr) + ' ' + num(e.val_bleu));
  }
  c.metadata["history"] = join(lines, '\n');
  c.metadata["rng.shuffle"] = s.shuffle.save_state();
  c.metadata["rng.negatives"] = s.negatives.save_state();
  std::vector<std::string> roles;
  for (const auto& [role, bundle] : s.model.cells.ownership()) roles.push_back(std::string(role_name(role)) + '=' + bundle);
  c.metadata["cells"] = join(roles, ',');

  for (const auto* p : s.model.parameters()) c.tensors.push_back({p->name, p->value});
  put_optimizer(c, "cs", s.optimizers.cs);
  put_optimizer(c, "cg", s.optimizers.cg);
  put_optimizer(c, "cr", s.optimizers.cr);
  for (const auto& t : s.best_params) c.tensors.push_back({"best." + t.name, t.value});
  return c;
}

TrainState from_container(const Container& c) {
  TrainState s;
  read_header(c, s.config, s.vocabs);
  s.model = read_model(c, s.config, s.vocabs, "");
  get_optimizer(c, "cs", s.optimizers.cs);
  get_optimizer(c, "cg", s.optimizers.cg);
  get_optimizer(c, "cr", s.optimizers.cr);
  s.epochs_done = static_cast<int>(parse_int(c.meta("epochs_done")));
  s.stale_epochs = static_cast<int>(parse_int(c.meta("stale_epochs")));
  s.stopped = c.meta("stopped") == "1";
  const auto best = split(c.meta("best"), ' ');
  if (best.size() != 3) fail(ErrorCode::checkpoint_format, "bad best record");
  s.best = {static_cast<int>(parse_int(best[0])), parse_num(best[1]), parse_num(best[2])};
  for (const auto& line : split(c.meta("history"), '\n')) {
    const auto f = split(line, ' ');
    if (f.size() != 7) fail(ErrorCode::checkpoint_format, "bad history line");
    s.history.push_back({static_cast<int>(parse_int(f[0])), parse_num(f[1]), parse_num(f[2]), parse_num(f[3]),
                         parse_num(f[4]), parse_num(f[5]), parse_num(f[6])});
  }
  s.shuffle.load_state(c.meta("rng.shuffle"));
  s.negatives.load_state(c.meta("rng.negatives"));
  for (const auto* p : s.model.parameters()) {
    const NamedTensor* t = c.find("best." + p->name);
    if (t == nullptr) continue;
    check_shape(*p, t->value);
    s.best_params.push_back({p->name, t->value});
  }
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  write_container(path, to_container(state));
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path);
  try {
    return from_container(c);
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

LoadedModel load_model(const std::filesystem::path& path, bool use_best) {
  const Container c = read_container(path);
  try {
    LoadedModel out;
    read_header(c, out.config, out.vocabs);
    const bool has_best = use_best && c.find("best.emb.code") != nullptr;
    out.model = read_model(c, out.config, out.vocabs, has_best ? "best." : "");
    return out;
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

// ---- epoch loop ---------------------------------------------------------------

void run_training(TrainState& state, std::span<const PairExample> train, std::span<const PairExample> valid,
                  const LanguageModels* lms, const TrainOptions& options) {
  if (train.empty()) fail(ErrorCode::precondition, "train: empty training set");
  if (valid.empty()) fail(ErrorCode::precondition, "train: empty validation set");
  const TrainConfig& cfg = state.config;
  const VariantTraits traits = traits_of(cfg.variant);
  std::optional<CorpusMarginals> marginals;
  if (traits.dual) {
    if (lms == nullptr) fail(ErrorCode::precondition, "train: variant " + std::string(variant_name(cfg.variant)) + " needs language models");
    marginals = compute_marginals(*lms, train, cfg.dual_per_token);
  }
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

  while (state.epochs_done < cfg.max_epochs && !state.stopped) {
    if (options.stop_after_epochs && state.epochs_done >= *options.stop_after_epochs) break;
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[state.shuffle.uniform_index(i)]);

    EpochRecord rec;
    rec.epoch = state.epochs_done + 1;
    double weight = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const std::size_t> rows(order.data() + start, end - start);
      const StepReport r = train_step(state.model, train, rows, marginals ? &*marginals : nullptr, cfg,
                                           state.optimizers, state.negatives);
      const double w = static_cast<double>(rows.size());
      rec.l_cs += w * r.l_cs;
      rec.l_cg += w * r.l_cg;
      rec.l_cr += w * r.l_cr;
      rec.l_dual += w * r.l_dual;
      weight += w;
      if (r.retried && options.progress) *options.progress << "warning: non-finite loss, learning rate halved\n";
    }
    rec.l_cs /= weight;
    rec.l_cg /= weight;
    rec.l_cr /= weight;
    rec.l_dual /= weight;

    rec.val_mrr = *evaluate_retrieval(state.model, valid, cfg.n_distractors, cfg.seed).mrr;
    if (traits.summarization) {
      rec.val_bleu = *evaluate_summarization(state.model, state.vocabs.query, valid, cfg.max_query_len - 2).corpus_bleu4;
    }
    state.history.push_back(rec);
    state.epochs_done = rec.epoch;

    const bool improved = state.best.epoch == 0 || rec.val_mrr > state.best.mrr ||
                          (rec.val_mrr == state.best.mrr && rec.val_bleu > state.best.bleu);
    if (improved) {
      state.best = {rec.epoch, rec.val_mrr, rec.val_bleu};
      state.stale_epochs = 0;
      state.best_params.clear();
      for (const auto* p : state.model.parameters()) state.best_params.push_back({p->name, p->value});
    } else {
      ++state.stale_epochs;
    }
    if (cfg.patience > 0 && state.stale_epochs >= cfg.patience) state.stopped = true;

    if (options.progress) {
      *options.progress << "epoch " << rec.epoch << " L_cr=" << rec.l_cr << " val_MRR=" << rec.val_mrr
                        << (improved ? " *" : "") << '\n';
    }
    if (!options.out_dir.empty()) {
      std::ofstream log(options.out_dir / "train.log", std::ios::trunc);
      log << format_log(cfg.variant, state.history);
      if (!log) fail(ErrorCode::io, "cannot write train.log");
      save_checkpoint(state, options.out_dir / "last.co3k");
      if (improved) save_checkpoint(state, options.out_dir / "best.co3k");
    }
  }
}

}  // namespace co3
