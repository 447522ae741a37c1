#include "co3/lstm.hpp"

#include "co3/error.hpp"

namespace co3 {

LstmCell::LstmCell(const std::string& prefix, int hidden, int input)
    : W(prefix + ".W", 4 * hidden, hidden), U(prefix + ".U", 4 * hidden, input), b(prefix + ".b", 1, 4 * hidden) {}

LstmState zero_state(ad::Tape& tape, int rows, int hidden) {
  return {tape.constant(ad::Matrix::Zero(rows, hidden)), tape.constant(ad::Matrix::Zero(rows, hidden))};
}

LstmState lstm_step(ad::Tape& tape, LstmCell& cell, const LstmState& prev, ad::Var input) {
  const int h = cell.hidden();
  if (input.cols() != cell.input() || prev.h.cols() != h || prev.c.cols() != h) {
    fail(ErrorCode::shape, "lstm_step: cell expects input width " + std::to_string(cell.input()) + " and hidden " +
                               std::to_string(h) + ", got input " + std::to_string(input.cols()) + " and hidden " +
                               std::to_string(prev.h.cols()));
  }
  using namespace ad;
  Var z = add_row(add(matmul_nt(input, tape.param(cell.U)), matmul_nt(prev.h, tape.param(cell.W))),
                  tape.param(cell.b));
  Var i = sigmoid(slice_cols(z, 0, h));
  Var f = sigmoid(slice_cols(z, h, h));
  Var o = sigmoid(slice_cols(z, 2 * h, h));
  Var g = tanh(slice_cols(z, 3 * h, h));
  Var c = add(hadamard(f, prev.c), hadamard(i, g));
  Var out = hadamard(o, tanh(c));
  return {out, c};
}

}  // namespace co3
