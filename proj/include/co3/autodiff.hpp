#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every primitive application in execution order together
// with a closure that propagates the output gradient to its inputs.
// backward() replays those closures in exact reverse order. Parameters live
// outside the tape and receive accumulated gradients after backward().

#include <Eigen/Core>
#include <atomic>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "co3/grid.hpp"

namespace co3::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, int rows, int cols)
      : name(std::move(n)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

class Tape;

// Handle to a recorded value. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  // With track_params=false parameters enter as constants and nothing is
  // recorded for backward (inference mode).
  explicit Tape(bool track_params = true) : track_params_(track_params) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // One node per parameter per tape; repeated calls return the same node.
  // The parameter must not be modified while the tape is alive.
  Var param(Parameter& p);

  // Records a derived node. `inputs` decides whether gradient is needed.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Matrix value, std::span<const Var> inputs, Backward backward);

  const Matrix& value(int id) const {
    const Node& n = nodes_[id];
    return n.external != nullptr ? *n.external : n.value;
  }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  // Adds `g` into the gradient of node `id` (no-op for constants).
  template <class Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  // Zero-initialised gradient buffer for block-wise accumulation.
  Matrix& grad_buffer(int id);

  // Fills parameter gradients (additively) with d loss / d param.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  bool tracking() const { return track_params_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    Parameter* param = nullptr;
    const Matrix* external = nullptr;  // parameter value, read in place
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> bound_;
  bool track_params_;
};

// ---- primitives -----------------------------------------------------------

Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var add_row(Var x, Var row);  // broadcast a 1 x n row over every row of x
Var add_scalar(Var x, double s);
Var scale(Var x, double s);
Var hadamard(Var a, Var b);
Var sigmoid(Var x);
Var tanh(Var x);
Var exp(Var x);
Var log(Var x);
Var relu(Var x);  // subgradient 0 at the hinge
Var squared_difference(Var a, Var b);

Var concat_cols(std::span<const Var> parts);
inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}
Var slice_cols(Var x, int start, int width);

// Embedding lookup: row ids[i] of `table` becomes row i of the result.
Var row_select(Var table, std::span<const int> ids);

// Keeps rows whose flag is set, zeroes the rest.
Var mask_rows(Var x, std::span<const std::uint8_t> keep);
// Row r from `a` when flag r is set, else from `b`.
Var where_rows(std::span<const std::uint8_t> take_a, Var a, Var b);
// Multiplies row r by the constant factor[r].
Var scale_rows(Var x, std::span<const double> factor);

Var sum(Var x);
Var mean(Var x);

// Row-wise softmax over unmasked entries; masked entries are exactly 0.
Var masked_softmax(Var scores, const Mask& mask);
Var softmax(Var scores);
Var log_softmax(Var logits);

// Gathers logp(r, ids[r]) into a column, floored at log(floor).
Var pick(Var logp, std::span<const int> ids, double floor = 1e-12);

// score(r, t) = states[t].row(r) . query.row(r)
Var row_dots(std::span<const Var> states, Var query);
// out.row(r) = sum_t weights(r, t) * states[t].row(r)
Var weighted_sum(std::span<const Var> states, Var weights);

struct MaxPool {
  Var value;
  // argmax(r, k): time index that won coordinate k of row r.
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> argmax;
};
// Coordinate-wise max across time over unmasked steps; ties go to the
// lowest time index.
MaxPool max_over_time(std::span<const Var> states, const Mask& mask);

// Row-wise cosine similarity -> column. A zero-norm row scores 0.
Var cosine_rows(Var a, Var b);

// ---- gradient checking ----------------------------------------------------

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::string worst_parameter;
};

// three_point: (f(x+h) - f(x-h)) / 2h, error O(h^2).
// five_point: (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, error O(h^4).
enum class Stencil { three_point, five_point };

// Compares analytic gradients with central differences. When
// max_coordinates > 0 a seeded sample of coordinates is checked.
GradCheckResult check_gradients(const std::function<Var(Tape&)>& loss_fn,
                                std::span<Parameter* const> params, double eps = 1e-5,
                                std::size_t max_coordinates = 0, std::uint64_t seed = 0,
                                Stencil stencil = Stencil::three_point);

// Process-wide counters for soft numeric warnings (zero norms, clamps).
struct NumericWarnings {
  std::atomic<std::uint64_t> zero_norm_cosine{0};
  std::atomic<std::uint64_t> clamped_log_prob{0};
};
NumericWarnings& numeric_warnings();

}  // namespace co3::ad
