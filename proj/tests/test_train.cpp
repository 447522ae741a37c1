#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "co3/error.hpp"
#include "co3/train.hpp"
#include "support/fixture.hpp"

using namespace co3;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("co3_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Setup {
  TrainConfig cfg;
  testing::Encoded data;
  LanguageModels lms;
  CorpusMarginals marginals;
};

Setup setup(std::size_t pairs, int hidden, Variant variant = Variant::co3) {
  Setup s;
  s.cfg = testing::fixture_config(hidden);
  s.cfg.variant = variant;
  s.cfg.lr = 0.005;
  s.cfg.batch_size = 10;
  s.data = testing::encode_fixture(testing::sql_pairs(pairs), s.cfg);
  std::vector<std::vector<int>> xs, ys;
  for (const auto& e : s.data.examples) {
    xs.push_back(e.code_ids);
    ys.push_back(e.query_ids);
  }
  LmTrainOptions lo;
  lo.epochs = 2;
  lo.batch_size = 10;
  lo.lr = 0.01;
  s.lms.code = pretrain_lm(Side::code, xs, {s.data.vocabs.code.size(), s.cfg.lm_hidden, s.cfg.lm_embed}, lo);
  s.lms.query = pretrain_lm(Side::query, ys, {s.data.vocabs.query.size(), s.cfg.lm_hidden, s.cfg.lm_embed}, lo);
  s.marginals = compute_marginals(s.lms, s.data.examples, false);
  return s;
}

std::map<std::string, ad::Matrix> values(const ModelParams& m) {
  std::map<std::string, ad::Matrix> out;
  for (const auto* p : m.parameters()) out[p->name] = p->value;
  return out;
}

bool same_bits(const ad::Matrix& a, const ad::Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("adam") {
  ad::Parameter w("w", 1, 3);
  w.value << 1.0, -2.0, 0.5;
  w.grad << 0.3, -7.0, 1e-3;
  Adam opt(0.01);
  ad::Parameter* ps[] = {&w};
  opt.step(ps);
  CHECK(w.value(0, 0) == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(w.value(0, 1) == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
  CHECK(w.value(0, 2) == doctest::Approx(0.5 - 0.01).epsilon(1e-4));

  // Zero gradient: with bias correction the step is m_hat / sqrt(v_hat), both
  // decaying at their own rates, so check parameters move only via old moments.
  ad::Parameter z("z", 1, 2);
  z.value.setConstant(3.0);
  Adam fresh(0.1);
  ad::Parameter* zs[] = {&z};
  fresh.step(zs);
  CHECK(z.value(0, 0) == 3.0);
  CHECK(z.value(0, 1) == 3.0);
  CHECK(fresh.moments().at("z").m.isZero());

  const ad::Matrix m_before = opt.moments().at("w").m;
  w.grad.setZero();
  opt.step(ps);
  CHECK(opt.moments().at("w").m.isApprox(0.9 * m_before));

  ad::Parameter q("q", 1, 1);
  q.value(0, 0) = 1.0;
  Adam conv(0.1);
  ad::Parameter* qs[] = {&q};
  for (int i = 0; i < 100; ++i) {
    q.grad(0, 0) = 2.0 * q.value(0, 0);
    conv.step(qs);
  }
  CHECK(std::abs(q.value(0, 0)) < 0.1);
  CHECK(conv.steps() == 100);
}

TEST_CASE("container format") {
  Container c;
  c.metadata["kind"] = "test";
  c.metadata["note"] = std::string("a\0b", 3);
  ad::Matrix a(2, 3);
  a << 1, 2, 3, 4, 5, -0.0;
  c.tensors.push_back({"a", a});
  c.tensors.push_back({"b", ad::Matrix::Constant(1, 1, std::numeric_limits<double>::denorm_min())});
  const std::string bytes = serialize_container(c);
  CHECK(bytes.substr(0, 4) == "CO3K");
  const Container back = parse_container(bytes);
  CHECK(back.metadata == c.metadata);
  REQUIRE(back.tensors.size() == 2);
  CHECK(same_bits(back.find("a")->value, a));
  CHECK(same_bits(back.find("b")->value, c.tensors[1].value));
  CHECK(serialize_container(back) == bytes);
  CHECK(back.find("missing") == nullptr);
  CHECK_THROWS_AS(back.meta("missing"), Error);

  auto code_of = [](const std::string& b) {
    try {
      parse_container(b);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::usage;
  };
  std::string flipped = bytes;
  flipped[bytes.size() - 20] ^= 0x10;
  CHECK(code_of(flipped) == ErrorCode::checkpoint_format);
  CHECK(code_of(bytes.substr(0, bytes.size() - 3)) == ErrorCode::checkpoint_format);
  CHECK(code_of(bytes + "x") == ErrorCode::checkpoint_format);
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK(code_of(magic) == ErrorCode::checkpoint_format);
  CHECK(code_of("") == ErrorCode::checkpoint_format);

  // A future version with a valid checksum is still refused.
  std::string v2 = bytes.substr(0, bytes.size() - 8);
  v2[4] = 2;
  std::uint64_t h = fnv1a64(v2);
  for (int i = 0; i < 8; ++i) v2.push_back(static_cast<char>((h >> (8 * i)) & 0xff));
  try {
    parse_container(v2);
    FAIL("version 2 accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::checkpoint_format);
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  const fs::path dir = scratch_dir("container");
  CHECK_THROWS_AS(read_container(dir / "none.co3k"), Error);
  try {
    read_container(dir / "none.co3k");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::checkpoint_missing);
  }
  fs::remove_all(dir);
}

TEST_CASE("train step contracts") {
  Setup s = setup(20, 16);
  std::vector<std::size_t> rows{0, 3, 5, 7, 9};

  SUBCASE("losses finite and non-negative on random init") {
    TrainState st = TrainState::create(s.cfg, s.data.vocabs);
    const StepReport r = train_step(st.model, s.data.examples, rows, &s.marginals, s.cfg, st.optimizers, st.negatives);
    for (double v : {r.l_cs, r.l_cg, r.l_cr, r.l_dual}) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
    }
    CHECK(r.l_cs > 0.0);
    CHECK(r.l_dual > 0.0);
    CHECK_FALSE(r.retried);
    CHECK(st.optimizers.cs.steps() == 1);
    CHECK(st.optimizers.cg.steps() == 1);
    CHECK(st.optimizers.cr.steps() == 1);
  }

  SUBCASE("retrieval_only touches only retrieval parameters") {
    TrainConfig cfg = s.cfg;
    cfg.variant = Variant::retrieval_only;
    TrainState st = TrainState::create(cfg, s.data.vocabs);
    const auto before = values(st.model);
    const StepReport r = train_step(st.model, s.data.examples, rows, nullptr, cfg, st.optimizers, st.negatives);
    CHECK(r.l_cs == 0.0);
    CHECK(r.l_cg == 0.0);
    CHECK(r.l_dual == 0.0);
    CHECK(r.l_cr > 0.0);
    CHECK(st.optimizers.cs.steps() == 0);
    CHECK(st.optimizers.cg.steps() == 0);
    std::set<std::string> retr;
    for (auto* p : st.model.parameters(ParamGroup::retrieval)) retr.insert(p->name);
    int changed = 0;
    for (const auto* p : st.model.parameters()) {
      if (!same_bits(p->value, before.at(p->name))) {
        ++changed;
        CHECK(retr.count(p->name) == 1);
      }
    }
    CHECK(changed > 0);
  }

  SUBCASE("zero lambdas reproduce the no-dual variant") {
    TrainConfig a = s.cfg, b = s.cfg;
    a.lambda_cs = a.lambda_cg = 0.0;
    b.variant = Variant::no_dual_shared;
    TrainState sa = TrainState::create(a, s.data.vocabs), sb = TrainState::create(b, s.data.vocabs);
    for (int k = 0; k < 3; ++k) {
      const StepReport ra = train_step(sa.model, s.data.examples, rows, &s.marginals, a, sa.optimizers, sa.negatives);
      const StepReport rb = train_step(sb.model, s.data.examples, rows, nullptr, b, sb.optimizers, sb.negatives);
      CHECK(ra.l_cs == rb.l_cs);
      CHECK(ra.l_cg == rb.l_cg);
      CHECK(ra.l_cr == rb.l_cr);
      CHECK(rb.l_dual == 0.0);
    }
    const auto va = values(sa.model), vb = values(sb.model);
    for (const auto& [name, v] : va) CHECK(same_bits(v, vb.at(name)));
  }

  SUBCASE("language models are never updated") {
    std::vector<ad::Matrix> lm_before;
    for (const auto* p : s.lms.code.parameters()) lm_before.push_back(p->value);
    for (const auto* p : s.lms.query.parameters()) lm_before.push_back(p->value);
    TrainState st = TrainState::create(s.cfg, s.data.vocabs);
    train_step(st.model, s.data.examples, rows, &s.marginals, s.cfg, st.optimizers, st.negatives);
    std::size_t i = 0;
    for (const auto* p : s.lms.code.parameters()) CHECK(same_bits(p->value, lm_before[i++]));
    for (const auto* p : s.lms.query.parameters()) CHECK(same_bits(p->value, lm_before[i++]));
    for (const auto* p : st.model.parameters()) CHECK(p->name.rfind("lm.", 0) != 0);
  }

  SUBCASE("dual variants need marginals") {
    TrainState st = TrainState::create(s.cfg, s.data.vocabs);
    CHECK_THROWS_AS(train_step(st.model, s.data.examples, rows, nullptr, s.cfg, st.optimizers, st.negatives), Error);
  }

  SUBCASE("divergence guard") {
    TrainState st = TrainState::create(s.cfg, s.data.vocabs);
    st.model.code_embedding.value(s.data.examples[0].code_ids[1], 0) = std::numeric_limits<double>::quiet_NaN();
    const auto before = values(st.model);
    const std::string rng_before = st.negatives.save_state();
    try {
      train_step(st.model, s.data.examples, rows, &s.marginals, s.cfg, st.optimizers, st.negatives);
      FAIL("no divergence reported");
    } catch (const Error& e) {
      CHECK_MESSAGE(e.code() == ErrorCode::diverged, std::string(e.what()));
    }
    for (const auto* p : st.model.parameters()) {
      CHECK(same_bits(p->value, before.at(p->name)));
    }
    CHECK(st.negatives.save_state() == rng_before);
    CHECK(st.optimizers.cs.steps() == 0);
    CHECK(st.optimizers.cs.lr() == s.cfg.lr);
  }
}

TEST_CASE("log columns per variant") {
  using V = std::vector<std::string>;
  CHECK(log_columns(Variant::co3) == V{"epoch", "L_cs", "L_cg", "L_cr", "L_dual", "val_MRR", "val_BLEU4"});
  CHECK(log_columns(Variant::no_dual_shared) == V{"epoch", "L_cs", "L_cg", "L_cr", "val_MRR", "val_BLEU4"});
  CHECK(log_columns(Variant::no_dual_unshared) == V{"epoch", "L_cs", "L_cg", "L_cr", "val_MRR", "val_BLEU4"});
  CHECK(log_columns(Variant::no_codegen) == V{"epoch", "L_cs", "L_cr", "val_MRR", "val_BLEU4"});
  CHECK(log_columns(Variant::retrieval_only) == V{"epoch", "L_cr", "val_MRR"});
  std::vector<EpochRecord> h{{1, 0.5, 0.25, 0.125, 2.0, 0.75, 0.1}};
  CHECK(format_log(Variant::no_codegen, h) == "epoch\tL_cs\tL_cr\tval_MRR\tval_BLEU4\n1\t0.5\t0.125\t0.75\t0.1\n");
}

TEST_CASE("training loop") {
  Setup s = setup(50, 32);
  const auto& ex = s.data.examples;

  SUBCASE("loss decreases over the first five epochs") {
    TrainConfig cfg = s.cfg;
    cfg.max_epochs = 5;
    cfg.patience = 0;
    TrainState st = TrainState::create(cfg, s.data.vocabs);
    run_training(st, ex, ex, &s.lms);
    REQUIRE(st.history.size() == 5);
    for (std::size_t i = 1; i < 5; ++i) {
      const auto& a = st.history[i - 1];
      const auto& b = st.history[i];
      CHECK(b.l_cs < a.l_cs + 1e-6);
      CHECK(b.l_cg < a.l_cg + 1e-6);
    }
  }

  SUBCASE("same seed gives identical logs, resume matches uninterrupted") {
    TrainConfig cfg = s.cfg;
    cfg.max_epochs = 4;
    cfg.patience = 0;
    const fs::path d1 = scratch_dir("run1"), d2 = scratch_dir("run2"), d3 = scratch_dir("run3");
    TrainState a = TrainState::create(cfg, s.data.vocabs);
    run_training(a, ex, ex, &s.lms, {d1, {}, nullptr});
    TrainState b = TrainState::create(cfg, s.data.vocabs);
    run_training(b, ex, ex, &s.lms, {d2, {}, nullptr});
    CHECK(slurp(d1 / "train.log") == slurp(d2 / "train.log"));
    CHECK(slurp(d1 / "last.co3k") == slurp(d2 / "last.co3k"));

    TrainState c = TrainState::create(cfg, s.data.vocabs);
    run_training(c, ex, ex, &s.lms, {d3, 2, nullptr});
    CHECK(c.epochs_done == 2);
    TrainState resumed = load_checkpoint(d3 / "last.co3k");
    CHECK(resumed.epochs_done == 2);
    run_training(resumed, ex, ex, &s.lms, {d3, {}, nullptr});
    CHECK(resumed.epochs_done == 4);
    const auto va = values(a.model), vr = values(resumed.model);
    for (const auto& [name, v] : va) CHECK(same_bits(v, vr.at(name)));
    CHECK(slurp(d1 / "train.log") == slurp(d3 / "train.log"));
    CHECK(slurp(d1 / "last.co3k") == slurp(d3 / "last.co3k"));

    // Load-then-save is byte-identical.
    save_checkpoint(load_checkpoint(d1 / "last.co3k"), d1 / "again.co3k");
    CHECK(slurp(d1 / "again.co3k") == slurp(d1 / "last.co3k"));

    LoadedModel best = load_model(d1 / "best.co3k");
    const auto bb = values(best.model);
    const ModelParams bm = a.best_model();
    for (const auto* p : bm.parameters()) CHECK(same_bits(p->value, bb.at(p->name)));
    for (auto d : {d1, d2, d3}) fs::remove_all(d);
  }
}

TEST_CASE("early stopping and checkpoint errors") {
  Setup s = setup(20, 16, Variant::retrieval_only);
  const auto& ex = s.data.examples;
  TrainConfig cfg = s.cfg;
  cfg.max_epochs = 40;
  cfg.patience = 1;
  cfg.lr = 1e-12;  // nothing moves, so validation never improves after epoch 1
  TrainState st = TrainState::create(cfg, s.data.vocabs);
  run_training(st, ex, ex, nullptr);
  CHECK(st.stopped);
  CHECK(st.history.size() == 2);
  CHECK(st.best.epoch == 1);
  CHECK(st.history.size() <= static_cast<std::size_t>(cfg.max_epochs));

  const fs::path dir = scratch_dir("errors");
  save_checkpoint(st, dir / "a.co3k");
  Container c = read_container(dir / "a.co3k");
  TrainConfig wrong = cfg;
  wrong.hidden = 8;
  c.metadata["config"] = wrong.to_text();
  write_container(dir / "b.co3k", c);
  try {
    load_checkpoint(dir / "b.co3k");
    FAIL("shape mismatch accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::shape);
  }
  std::string bytes = slurp(dir / "a.co3k");
  bytes[bytes.size() / 2] ^= 1;
  std::ofstream(dir / "c.co3k", std::ios::binary) << bytes;
  try {
    load_model(dir / "c.co3k");
    FAIL("corruption accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::checkpoint_format);
  }
  try {
    load_model(dir / "nope.co3k");
    FAIL("missing file accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::checkpoint_missing);
  }
  CHECK_THROWS_AS(run_training(st, {}, ex, nullptr), Error);
  TrainState dual = TrainState::create(s.cfg.variant == Variant::co3 ? s.cfg : [&] {
    TrainConfig t = s.cfg;
    t.variant = Variant::co3;
    return t;
  }(), s.data.vocabs);
  CHECK_THROWS_AS(run_training(dual, ex, ex, nullptr), Error);
  fs::remove_all(dir);
}
