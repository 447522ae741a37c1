#include "co3/dual.hpp"

#include <cmath>
#include <string>

#include "co3/error.hpp"

namespace co3 {

using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

void check_log_prob(double v, const char* what) {
  if (!std::isfinite(v)) fail(ErrorCode::precondition, std::string("dual: non-finite ") + what);
  if (v > 0.0) fail(ErrorCode::precondition, std::string("dual: positive log-probability for ") + what);
}

std::vector<int> row_ids(const IdGrid& g, int r) {
  std::vector<int> out;
  for (int c = 0; c < g.cols && g.at(r, c) != kPadId; ++c) out.push_back(g.at(r, c));
  return out;
}

}  // namespace

double dual_regularizer(const DualityInputs& in) {
  check_log_prob(in.log_px, "log_px");
  check_log_prob(in.log_py, "log_py");
  check_log_prob(in.log_py_given_x, "log_py_given_x");
  check_log_prob(in.log_px_given_y, "log_px_given_y");
  const double d = (in.log_px + in.log_py_given_x) - (in.log_py + in.log_px_given_y);
  return d * d;
}

Var dual_regularizer(Var log_py_given_x, Var log_px_given_y, std::span<const double> log_px,
                     std::span<const double> log_py, std::span<const double> normalizer) {
  const auto rows = static_cast<std::size_t>(log_py_given_x.rows());
  if (log_py_given_x.cols() != 1 || log_px_given_y.rows() != log_py_given_x.rows() || log_px_given_y.cols() != 1 ||
      log_px.size() != rows || log_py.size() != rows || (!normalizer.empty() && normalizer.size() != rows)) {
    fail(ErrorCode::shape, "dual_regularizer: inconsistent row counts");
  }
  Tape& tape = log_py_given_x.tape();
  Matrix offset(static_cast<Eigen::Index>(rows), 1);
  for (std::size_t r = 0; r < rows; ++r) {
    check_log_prob(log_px[r], "log_px");
    check_log_prob(log_py[r], "log_py");
    // Model conditionals may go non-finite during training; that is the
    // divergence guard's business, so only their sign is checked here.
    if (log_py_given_x.value()(static_cast<Eigen::Index>(r), 0) > 0.0 ||
        log_px_given_y.value()(static_cast<Eigen::Index>(r), 0) > 0.0)
      fail(ErrorCode::precondition, "dual: positive conditional log-probability");
    offset(static_cast<Eigen::Index>(r), 0) = log_px[r] - log_py[r];
  }
  Var diff = ad::add(ad::sub(log_py_given_x, log_px_given_y), tape.constant(std::move(offset)));
  if (!normalizer.empty()) {
    std::vector<double> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!(normalizer[r] > 0.0)) fail(ErrorCode::precondition, "dual_regularizer: non-positive normalizer");
      inv[r] = 1.0 / normalizer[r];
    }
    diff = ad::scale_rows(diff, inv);
  }
  return ad::hadamard(diff, diff);
}

BatchMarginals batch_marginals(const LanguageModels& lms, const Batch& batch, bool per_token) {
  BatchMarginals out;
  for (int r = 0; r < batch.size(); ++r) {
    const auto x = row_ids(batch.code, r);
    const auto y = row_ids(batch.query, r);
    out.log_px.push_back(sequence_log_marginal(lms.code, x));
    out.log_py.push_back(sequence_log_marginal(lms.query, y));
    if (per_token) out.normalizer.push_back(static_cast<double>(x.size() + y.size() - 2));
  }
  return out;
}

Var batch_dual_loss(Tape& tape, ModelParams& model, const Batch& batch, const BatchMarginals& marginals) {
  if (batch.size() == 0) fail(ErrorCode::precondition, "batch_dual_loss: empty batch");
  Var y_given_x = conditional_logprob(tape, model, Task::summarize, batch);
  Var x_given_y = conditional_logprob(tape, model, Task::generate, batch);
  return ad::mean(dual_regularizer(y_given_x, x_given_y, marginals.log_px, marginals.log_py, marginals.normalizer));
}

}  // namespace co3
