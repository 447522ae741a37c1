#pragma once

#include <string>
#include <vector>

#include "co3/autodiff.hpp"
#include "co3/rng.hpp"

namespace co3 {

// One LSTM cell. The four gate blocks are stacked row-wise in the order
// input, forget, output, candidate: W is 4h x h (recurrent), U is 4h x in
// (input), b is 1 x 4h.
struct LstmCell {
  ad::Parameter W;
  ad::Parameter U;
  ad::Parameter b;

  LstmCell() = default;
  LstmCell(const std::string& prefix, int hidden, int input);

  int hidden() const { return static_cast<int>(W.value.cols()); }
  int input() const { return static_cast<int>(U.value.cols()); }
  std::vector<ad::Parameter*> parameters() { return {&W, &U, &b}; }
  long parameter_count() const { return W.size() + U.size() + b.size(); }
};

struct LstmState {
  ad::Var h;
  ad::Var c;
};

LstmState zero_state(ad::Tape& tape, int rows, int hidden);

// i, f, o = sigmoid(.), g = tanh(.); c = f*c_prev + i*g; h = o*tanh(c).
LstmState lstm_step(ad::Tape& tape, LstmCell& cell, const LstmState& prev, ad::Var input);

}  // namespace co3
