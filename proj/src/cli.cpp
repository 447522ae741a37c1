#include "co3/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <json.hpp>
#include <optional>
#include <sstream>

#include "co3/error.hpp"
#include "co3/eval.hpp"
#include "co3/retrieval.hpp"
#include "co3/train.hpp"

namespace co3 {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string checkpoint;
  std::string corpus;
  std::string out_dir;
  std::optional<int> n_distractors;
  std::optional<int> beam;
  std::vector<std::string> overrides;
  std::string lm_dir;
  std::string split = "test";
  std::string input;
  std::string query;
  std::string candidates;
  std::string side = "code";
  bool resume = false;
  std::optional<int> stop_after;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

const char* kSplits[] = {"train.jsonl", "valid.jsonl", "test.jsonl"};

class Run {
 public:
  Run(std::string command, const Options& o) : command_(std::move(command)), opt_(o) {
    start_ = std::chrono::steady_clock::now();
  }

  // defaults < config file (explicit, else the prepared corpus' config.txt) < flags
  TrainConfig resolve(const std::optional<TrainConfig>& base = std::nullopt) {
    TrainConfig cfg = base.value_or(TrainConfig{});
    if (!opt_.config_path.empty()) {
      cfg = TrainConfig::load(opt_.config_path);
      config_path_ = opt_.config_path;
    } else if (!base && !opt_.corpus.empty() && fs::exists(fs::path(opt_.corpus) / "config.txt")) {
      config_path_ = (fs::path(opt_.corpus) / "config.txt").string();
      cfg = TrainConfig::load(config_path_);
    }
    for (const auto& kv : opt_.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) fail(ErrorCode::usage, "--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (opt_.seed) cfg.seed = *opt_.seed;
    if (!opt_.variant.empty()) cfg.variant = parse_variant(opt_.variant);
    if (opt_.n_distractors) cfg.n_distractors = *opt_.n_distractors;
    if (opt_.beam) cfg.beam = *opt_.beam;
    cfg.validate();
    config_ = cfg;
    return cfg;
  }

  fs::path out_dir(const fs::path& fallback = ".") {
    fs::path d = opt_.out_dir.empty() ? fallback : fs::path(opt_.out_dir);
    fs::create_directories(d);
    out_ = d;
    return d;
  }

  void digest_file(const fs::path& p) { digest_ = fnv1a64(read_file(p), digest_.value_or(0xcbf29ce484222325ULL)); }
  void digest_prepared(const fs::path& dir) {
    for (const char* s : kSplits) digest_file(dir / s);
  }
  void artifact(const fs::path& p) { artifacts_.push_back(p.string()); }
  json& extra() { return extra_; }

  void finish() {
    for (const auto& a : artifacts_)
      if (!fs::exists(a)) fail(ErrorCode::io, "declared artifact was not produced: " + a);
    json m;
    m["command"] = command_;
    m["config_path"] = config_path_.empty() ? json(nullptr) : json(config_path_);
    json cfg = json::object();
    if (config_) {
      for (const auto& [k, v] : config_->to_map()) cfg[k] = v;
    }
    m["config"] = cfg;
    m["corpus_digest"] = digest_ ? json("fnv1a64:" + hex64(*digest_)) : json(nullptr);
    m["seed"] = config_ ? json(config_->seed) : json(nullptr);
    m["artifacts"] = artifacts_;
    for (auto& [k, v] : extra_.items()) m[k] = v;
    m["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const fs::path p = out_ / (command_ + ".manifest.json");
    std::ofstream f(p);
    f << m.dump(2) << '\n';
    if (!f) fail(ErrorCode::io, "cannot write " + p.string());
  }

 private:
  std::string command_;
  const Options& opt_;
  std::chrono::steady_clock::time_point start_;
  std::string config_path_;
  std::optional<TrainConfig> config_;
  std::optional<std::uint64_t> digest_;
  std::vector<std::string> artifacts_;
  fs::path out_ = ".";
  json extra_ = json::object();
};

void require(const std::string& value, const char* flag) {
  if (value.empty()) fail(ErrorCode::usage, std::string(flag) + " is required");
}

std::vector<PairExample> load_split(const fs::path& dir, const std::string& name, const VocabPair& vocabs,
                                    const TrainConfig& cfg) {
  const auto raw = read_pairs_jsonl(dir / (name + ".jsonl"));
  return encode_pairs(raw, vocabs, cfg.max_code_len, cfg.max_query_len);
}

VocabPair load_vocabs(const fs::path& dir) {
  return {Vocab::load(dir / "vocab.code.txt"), Vocab::load(dir / "vocab.query.txt")};
}

std::string read_input(const Options& o, std::istream& in) {
  if (!o.input.empty()) return o.input;
  std::string all{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  while (!all.empty() && (all.back() == '\n' || all.back() == '\r')) all.pop_back();
  if (all.empty()) fail(ErrorCode::usage, "no input: pass --input or write to standard input");
  return all;
}

std::string join_tokens(const std::vector<std::string>& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + t[i];
  return s;
}

LoadedModel open_checkpoint(const Options& o, Run& run, TrainConfig& cfg) {
  require(o.checkpoint, "--checkpoint");
  LoadedModel m = load_model(o.checkpoint);
  // Sizing comes from the checkpoint; only run-time knobs may be overridden.
  TrainConfig resolved = run.resolve(m.config);
  if (resolved.hidden != m.config.hidden || resolved.embed != m.config.embed || resolved.proj != m.config.proj ||
      resolved.variant != m.config.variant) {
    fail(ErrorCode::shape, "config sizing or variant differs from checkpoint " + o.checkpoint);
  }
  cfg = resolved;
  return m;
}

void cmd_prepare(const Options& o, std::ostream& out) {
  Run run("prepare", o);
  require(o.corpus, "--corpus");
  const TrainConfig cfg = run.resolve();
  const fs::path dir = run.out_dir();
  run.digest_file(o.corpus);
  const auto pairs = read_pairs_jsonl(o.corpus);
  const CorpusSplit split = split_corpus(pairs, cfg.seed);
  const VocabPair vocabs = build_vocabs(split.train, {cfg.min_freq, cfg.code_vocab_size, cfg.query_vocab_size});
  write_pairs_jsonl(dir / "train.jsonl", split.train);
  write_pairs_jsonl(dir / "valid.jsonl", split.valid);
  write_pairs_jsonl(dir / "test.jsonl", split.test);
  vocabs.code.save(dir / "vocab.code.txt");
  vocabs.query.save(dir / "vocab.query.txt");
  cfg.save(dir / "config.txt");
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.code.txt", "vocab.query.txt", "config.txt"})
    run.artifact(dir / f);
  run.extra()["splits"] = {{"train", split.train.size()}, {"valid", split.valid.size()}, {"test", split.test.size()}};
  run.extra()["vocab"] = {{"code", vocabs.code.size()}, {"query", vocabs.query.size()}};
  out << "train\t" << split.train.size() << "\nvalid\t" << split.valid.size() << "\ntest\t" << split.test.size()
      << "\nvocab.code\t" << vocabs.code.size() << "\nvocab.query\t" << vocabs.query.size() << '\n';
  run.finish();
}

void cmd_pretrain_lm(const Options& o, std::ostream& out) {
  Run run("pretrain-lm", o);
  require(o.corpus, "--corpus");
  const TrainConfig cfg = run.resolve();
  const fs::path dir = run.out_dir(o.corpus);
  run.digest_prepared(o.corpus);
  const VocabPair vocabs = load_vocabs(o.corpus);
  const auto train = load_split(o.corpus, "train", vocabs, cfg);
  std::vector<std::vector<int>> xs, ys;
  for (const auto& e : train) {
    xs.push_back(e.code_ids);
    ys.push_back(e.query_ids);
  }
  LmTrainOptions lo;
  lo.epochs = cfg.lm_epochs;
  lo.batch_size = cfg.batch_size;
  lo.lr = cfg.lr;
  lo.init_scale = cfg.init_scale;
  lo.seed = cfg.seed;
  json report = json::object();
  for (Side side : {Side::code, Side::query}) {
    const auto& seqs = side == Side::code ? xs : ys;
    const Vocab& v = side == Side::code ? vocabs.code : vocabs.query;
    LmTrainReport r;
    const LanguageModel lm = pretrain_lm(side, seqs, {v.size(), cfg.lm_hidden, cfg.lm_embed}, lo, &r);
    const std::string name = "lm." + std::string(side_name(side)) + ".co3k";
    save_language_model(lm, dir / name);
    run.artifact(dir / name);
    const double ppl = perplexity(lm, seqs);
    report[std::string(side_name(side))] = {{"epoch_nll", r.epoch_nll}, {"train_perplexity", ppl}};
    out << side_name(side) << "\tperplexity\t" << ppl << '\n';
  }
  run.extra()["language_models"] = report;
  run.finish();
}

void cmd_train(const Options& o, std::ostream& out) {
  Run run("train", o);
  require(o.corpus, "--corpus");
  require(o.out_dir, "--out-dir");
  TrainConfig cfg = run.resolve();
  const fs::path dir = run.out_dir();
  run.digest_prepared(o.corpus);
  const VocabPair vocabs = load_vocabs(o.corpus);
  const auto train = load_split(o.corpus, "train", vocabs, cfg);
  const auto valid = load_split(o.corpus, "valid", vocabs, cfg);

  std::optional<LanguageModels> lms;
  if (traits_of(cfg.variant).dual) {
    const fs::path lm_dir = o.lm_dir.empty() ? fs::path(o.corpus) : fs::path(o.lm_dir);
    lms = LanguageModels{load_language_model(lm_dir / "lm.code.co3k"), load_language_model(lm_dir / "lm.query.co3k")};
    if (lms->code.sizing().vocab != vocabs.code.size() || lms->query.sizing().vocab != vocabs.query.size())
      fail(ErrorCode::shape, "language model vocabulary does not match the prepared corpus");
  }

  TrainState state;
  if (o.resume && fs::exists(dir / "last.co3k")) {
    state = load_checkpoint(dir / "last.co3k");
    if (state.config.to_text() != cfg.to_text())
      fail(ErrorCode::config, "resolved config differs from the checkpoint being resumed");
  } else {
    state = TrainState::create(cfg, vocabs);
  }
  TrainOptions topt;
  topt.out_dir = dir;
  topt.stop_after_epochs = o.stop_after;
  topt.progress = &out;
  run_training(state, train, valid, lms ? &*lms : nullptr, topt);

  for (const char* f : {"train.log", "last.co3k", "best.co3k"}) run.artifact(dir / f);
  const VariantTraits t = traits_of(cfg.variant);
  json groups = json::object();
  groups["summarization"] = t.summarization;
  groups["generation"] = t.generation;
  groups["dual"] = t.dual;
  groups["shared_cells"] = t.shared_cells;
  run.extra()["modules"] = groups;
  json cells = json::object();
  for (const auto& [role, bundle] : state.model.cells.ownership()) cells[std::string(role_name(role))] = bundle;
  run.extra()["cells"] = cells;
  run.extra()["parameter_count"] = state.model.parameter_count();
  run.extra()["log_columns"] = log_columns(cfg.variant);
  run.extra()["epochs_done"] = state.epochs_done;
  run.extra()["best"] = {{"epoch", state.best.epoch}, {"val_mrr", state.best.mrr}, {"val_bleu4", state.best.bleu}};
  run.finish();
}

void cmd_eval(const Options& o, std::ostream& out, bool retrieval) {
  Run run(retrieval ? "eval-retrieval" : "eval-summarize", o);
  require(o.corpus, "--corpus");
  TrainConfig cfg;
  LoadedModel m = open_checkpoint(o, run, cfg);
  const fs::path dir = run.out_dir();
  run.digest_prepared(o.corpus);
  const auto pairs = load_split(o.corpus, o.split, m.vocabs, cfg);
  EvalReport report;
  fs::path results;
  if (retrieval) {
    report = evaluate_retrieval(m.model, pairs, cfg.n_distractors, cfg.seed);
    results = dir / "retrieval.jsonl";
  } else {
    if (!m.model.has_task(Task::summarize))
      fail(ErrorCode::precondition, "variant " + std::string(variant_name(cfg.variant)) + " has no summariser");
    report = evaluate_summarization(m.model, m.vocabs.query, pairs, cfg.max_query_len - 2, cfg.beam);
    results = dir / "summarize.jsonl";
  }
  report.write_jsonl(results);
  run.artifact(results);
  for (const auto& w : report.warnings) out << "warning: " << w << '\n';
  report.print_table(out);
  run.finish();
}

void cmd_decode(const Options& o, std::istream& in, std::ostream& out, Task task) {
  Run run(task == Task::summarize ? "summarize" : "generate", o);
  TrainConfig cfg;
  LoadedModel m = open_checkpoint(o, run, cfg);
  run.out_dir();
  if (!m.model.has_task(task))
    fail(ErrorCode::precondition, "variant " + std::string(variant_name(cfg.variant)) + " lacks this decoder");
  const Side src = task == Task::summarize ? Side::code : Side::query;
  const Vocab& sv = task == Task::summarize ? m.vocabs.code : m.vocabs.query;
  const Vocab& tv = task == Task::summarize ? m.vocabs.query : m.vocabs.code;
  const int src_len = task == Task::summarize ? cfg.max_code_len : cfg.max_query_len;
  const int tgt_len = (task == Task::summarize ? cfg.max_query_len : cfg.max_code_len) - 2;
  const auto ids = encode(sv, tokenize(read_input(o, in), src), src_len);
  const auto outp = cfg.beam > 1 ? beam_decode(m.model, task, ids, tgt_len, cfg.beam)
                                 : greedy_decode(m.model, task, ids, tgt_len);
  const std::string text = join_tokens(decode(tv, outp));
  out << text << '\n';
  run.extra()["output"] = text;
  run.finish();
}

void cmd_search(const Options& o, std::istream& in, std::ostream& out) {
  Run run("search", o);
  require(o.candidates, "--candidates");
  TrainConfig cfg;
  LoadedModel m = open_checkpoint(o, run, cfg);
  run.out_dir();
  run.digest_file(o.candidates);
  std::istringstream lines(read_file(o.candidates));
  std::vector<std::string> snippets;
  std::vector<std::vector<int>> cand;
  for (std::string line; std::getline(lines, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    snippets.push_back(line);
    cand.push_back(encode(m.vocabs.code, tokenize(line, Side::code), cfg.max_code_len));
  }
  if (cand.empty()) fail(ErrorCode::corpus, o.candidates + ": no candidates");
  const std::string query = o.query.empty() ? read_input(o, in) : o.query;
  const auto qids = encode(m.vocabs.query, tokenize(query, Side::query), cfg.max_query_len);
  json ranked = json::array();
  for (const auto& c : rank_candidates(m.model, qids, cand)) {
    out << c.rank << '\t' << c.score << '\t' << snippets[c.candidate_id] << '\n';
    ranked.push_back({{"rank", c.rank}, {"score", c.score}, {"candidate", c.candidate_id}});
  }
  run.extra()["ranking"] = ranked;
  run.finish();
}

void cmd_attribute(const Options& o, std::istream& in, std::ostream& out) {
  Run run("attribute", o);
  TrainConfig cfg;
  LoadedModel m = open_checkpoint(o, run, cfg);
  const fs::path dir = run.out_dir();
  const Side side = parse_side(o.side);
  const Vocab& v = side == Side::code ? m.vocabs.code : m.vocabs.query;
  const auto ids = encode(v, tokenize(read_input(o, in), side), side == Side::code ? cfg.max_code_len : cfg.max_query_len);
  const auto counts = pooling_attribution(m.model, side, ids);
  std::vector<std::string> toks;
  for (int id : ids) toks.push_back(v.token_of(id));
  std::ostringstream table;
  write_attribution_tsv(table, toks, counts);
  const fs::path p = dir / "attribution.tsv";
  std::ofstream f(p);
  f << table.str();
  if (!f) fail(ErrorCode::io, "cannot write " + p.string());
  out << table.str();
  run.artifact(p);
  run.finish();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"co3: joint code retrieval, summarisation and generation"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config_path, "key=value config file");
    c->add_option("--seed", o.seed, "master seed");
    c->add_option("--set", o.overrides, "config override key=value (repeatable)");
    c->add_option("--out-dir", o.out_dir, "output directory");
  };
  auto with_checkpoint = [&](CLI::App* c) { c->add_option("--checkpoint", o.checkpoint, "model checkpoint"); };

  auto* prepare = app.add_subcommand("prepare", "split a pair corpus and build vocabularies");
  common(prepare);
  prepare->add_option("--corpus", o.corpus, "line-delimited {\"code\",\"query\"} file");

  auto* pretrain = app.add_subcommand("pretrain-lm", "train the code and query language models");
  common(pretrain);
  pretrain->add_option("--corpus", o.corpus, "prepared corpus directory");

  auto* train = app.add_subcommand("train", "train a model variant");
  common(train);
  train->add_option("--corpus", o.corpus, "prepared corpus directory");
  train->add_option("--variant", o.variant, "co3|no_dual_shared|no_dual_unshared|no_codegen|retrieval_only");
  train->add_option("--lm-dir", o.lm_dir, "directory holding lm.code.co3k and lm.query.co3k");
  train->add_flag("--resume", o.resume, "continue from out-dir/last.co3k");
  train->add_option("--stop-after", o.stop_after, "pause once this many epochs are done");

  auto* evr = app.add_subcommand("eval-retrieval", "MRR/NDCG against distractor pools");
  auto* evs = app.add_subcommand("eval-summarize", "BLEU-4/METEOR of decoded summaries");
  for (auto* c : {evr, evs}) {
    common(c);
    with_checkpoint(c);
    c->add_option("--corpus", o.corpus, "prepared corpus directory");
    c->add_option("--split", o.split, "train|valid|test")->check(CLI::IsMember({"train", "valid", "test"}));
  }
  evr->add_option("--n-distractors", o.n_distractors, "distractors per query");
  evs->add_option("--beam", o.beam, "beam width (1 = greedy)");

  auto* summarize = app.add_subcommand("summarize", "describe one code snippet");
  auto* generate = app.add_subcommand("generate", "write code for one description");
  for (auto* c : {summarize, generate}) {
    common(c);
    with_checkpoint(c);
    c->add_option("--input", o.input, "input text (default: standard input)");
    c->add_option("--beam", o.beam, "beam width (1 = greedy)");
  }

  auto* search = app.add_subcommand("search", "rank candidate snippets for one query");
  common(search);
  with_checkpoint(search);
  search->add_option("--query", o.query, "query text (default: standard input)");
  search->add_option("--candidates", o.candidates, "one code snippet per line");

  auto* attribute = app.add_subcommand("attribute", "per-token max-pooling counts");
  common(attribute);
  with_checkpoint(attribute);
  attribute->add_option("--input", o.input, "sequence text (default: standard input)");
  attribute->add_option("--side", o.side, "code|query")->check(CLI::IsMember({"code", "query"}));

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (char& ch : msg)
      if (ch == '\n') ch = ' ';
    err << "error\t" << error_code_name(ErrorCode::usage) << '\t' << msg << '\n';
    return 2;
  }

  try {
    if (prepare->parsed()) cmd_prepare(o, out);
    else if (pretrain->parsed()) cmd_pretrain_lm(o, out);
    else if (train->parsed()) cmd_train(o, out);
    else if (evr->parsed()) cmd_eval(o, out, true);
    else if (evs->parsed()) cmd_eval(o, out, false);
    else if (summarize->parsed()) cmd_decode(o, in, out, Task::summarize);
    else if (generate->parsed()) cmd_decode(o, in, out, Task::generate);
    else if (search->parsed()) cmd_search(o, in, out);
    else if (attribute->parsed()) cmd_attribute(o, in, out);
  } catch (const Error& e) {
    std::string msg = e.what();
    for (char& ch : msg)
      if (ch == '\n') ch = ' ';
    err << "error\t" << error_code_name(e.code()) << '\t' << msg << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error\t" << error_code_name(ErrorCode::io) << '\t' << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace co3
