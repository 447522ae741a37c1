#include <doctest.h>

#include <cmath>
#include <limits>

#include "co3/dual.hpp"
#include "co3/error.hpp"

using namespace co3;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

ModelParams tiny_model(std::uint64_t seed) {
  ModelSizing s;
  s.variant = Variant::co3;
  s.code_vocab = 20;
  s.query_vocab = 20;
  s.hidden = 8;
  s.embed = 6;
  s.proj = 8;
  ModelParams m(s);
  Rng rng(seed);
  m.initialize(rng, 0.3);
  return m;
}

Batch batch_of(const std::vector<PairExample>& ex) { return make_batch(std::span<const PairExample>(ex)); }

}  // namespace

TEST_CASE("scalar regulariser") {
  DualityInputs in;
  in.log_px = -1.0;
  in.log_py_given_x = -2.0;
  in.log_py = -1.5;
  in.log_px_given_y = -2.5;
  CHECK(dual_regularizer(in) == doctest::Approx(1.0).epsilon(1e-15));

  DualityInputs swapped{in.log_py, in.log_px, in.log_px_given_y, in.log_py_given_x};
  CHECK(dual_regularizer(swapped) == dual_regularizer(in));

  DualityInputs equal{-3.0, -1.0, -2.0, -4.0};
  CHECK(dual_regularizer(equal) == 0.0);

  Rng rng(99);
  for (int i = 0; i < 10000; ++i) {
    DualityInputs f{-rng.uniform(0, 200), -rng.uniform(0, 200), -rng.uniform(0, 200), -rng.uniform(0, 200)};
    const double v = dual_regularizer(f);
    CHECK(v >= 0.0);
    const double d = (f.log_px + f.log_py_given_x) - (f.log_py + f.log_px_given_y);
    if (d == 0.0) CHECK(v == 0.0);
  }

  DualityInputs bad = in;
  bad.log_py = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(dual_regularizer(bad), Error);
  bad.log_py = -std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(dual_regularizer(bad), Error);
}

TEST_CASE("vector regulariser matches the scalar form and only the conditionals carry gradient") {
  ad::Parameter yx("yx", 2, 1), xy("xy", 2, 1);
  yx.value << -2.0, -7.0;
  xy.value << -2.5, -1.0;
  const std::vector<double> px{-1.0, -3.0}, py{-1.5, -0.5};
  Tape t;
  Var r = dual_regularizer(t.param(yx), t.param(xy), px, py);
  CHECK(r.value()(0, 0) == doctest::Approx(dual_regularizer({px[0], py[0], -2.0, -2.5})));
  CHECK(r.value()(1, 0) == doctest::Approx(dual_regularizer({px[1], py[1], -7.0, -1.0})));
  t.backward(ad::sum(r));
  // d/d(yx) = 2 d, d/d(xy) = -2 d
  const double d0 = (px[0] - 2.0) - (py[0] - 2.5);
  CHECK(yx.grad(0, 0) == doctest::Approx(2 * d0));
  CHECK(xy.grad(0, 0) == doctest::Approx(-2 * d0));

  Tape t2;
  const std::vector<double> norm{4.0, 2.0};
  Var n = dual_regularizer(t2.param(yx), t2.param(xy), px, py, norm);
  CHECK(n.value()(0, 0) == doctest::Approx(r.value()(0, 0) / 16.0));
}

TEST_CASE("batch dual loss") {
  ModelParams m = tiny_model(3);
  LanguageModels lms{LanguageModel(Side::code, {20, 5, 4}), LanguageModel(Side::query, {20, 5, 4})};
  Rng rng(4);
  lms.code.initialize(rng, 0.3);
  lms.query.initialize(rng, 0.3);
  PairExample a{{2, 5, 6, 11, 3}, {2, 4, 3}, {}, {}};
  PairExample b{{2, 7, 3}, {2, 8, 19, 5, 3}, {}, {}};

  std::vector<PairExample> one{a}, same{a, a, a}, two{a, b};
  Tape t1, t3;
  const double single = batch_dual_loss(t1, m, batch_of(one), batch_marginals(lms, batch_of(one), false)).scalar();
  const double triple = batch_dual_loss(t3, m, batch_of(same), batch_marginals(lms, batch_of(same), false)).scalar();
  CHECK(triple == doctest::Approx(single).epsilon(1e-14));
  CHECK(single >= 0.0);

  const std::vector<int> ca = a.code_ids, qa = a.query_ids;
  DualityInputs in{sequence_log_marginal(lms.code, ca), sequence_log_marginal(lms.query, qa),
                   conditional_logprob(m, Task::summarize, ca, qa), conditional_logprob(m, Task::generate, qa, ca)};
  CHECK(single == doctest::Approx(dual_regularizer(in)).epsilon(1e-12));

  const Batch bb = batch_of(two);
  const BatchMarginals marg = batch_marginals(lms, bb, false);
  auto loss = [&](Tape& t) { return batch_dual_loss(t, m, bb, marg); };
  auto params = m.parameters(ParamGroup::all);
  std::erase_if(params, [](ad::Parameter* p) { return p->name.rfind("retr.", 0) == 0; });
  CHECK(ad::check_gradients(loss, params, 3e-3, 500, 11).max_relative_error < 1e-4);

  BatchMarginals per_token = batch_marginals(lms, bb, true);
  REQUIRE(per_token.normalizer.size() == 2);
  CHECK(per_token.normalizer[0] == 6.0);  // 4 + 2 predicted tokens
}
