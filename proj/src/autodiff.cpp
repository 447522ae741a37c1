#include "co3/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "co3/error.hpp"
#include "co3/rng.hpp"

namespace co3::ad {

namespace {

std::string shape_of(const Matrix& m) {
  std::ostringstream out;
  out << "[" << m.rows() << "x" << m.cols() << "]";
  return out.str();
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  fail(ErrorCode::shape, std::string(op) + ": incompatible shapes " + shape_of(a) + " and " + shape_of(b));
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

void require_rows(const char* op, const Matrix& m, std::size_t n) {
  if (static_cast<std::size_t>(m.rows()) != n) {
    fail(ErrorCode::shape, std::string(op) + ": expected " + std::to_string(n) + " rows, got " + shape_of(m));
  }
}

}  // namespace

NumericWarnings& numeric_warnings() {
  static NumericWarnings counters;
  return counters;
}

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) fail(ErrorCode::shape, "scalar(): value has shape " + shape_of(v));
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  Node n;
  n.external = &p.value;
  if (track_params_) {
    n.param = &p;
    n.needs_grad = true;
  }
  nodes_.push_back(std::move(n));
  bound_.emplace(&p, static_cast<int>(nodes_.size()) - 1);
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (&v.tape() != this) fail(ErrorCode::precondition, "operands recorded on different tapes");
    n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const Matrix& v = value(id);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) fail(ErrorCode::precondition, "backward: loss belongs to another tape");
  const Matrix& lv = value(loss.id());
  if (lv.size() != 1) fail(ErrorCode::shape, "backward: loss must be scalar, got " + shape_of(lv));
  if (!nodes_[loss.id()].needs_grad) return;
  nodes_[loss.id()].grad = Matrix::Ones(1, 1);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.param == nullptr || n.grad.size() == 0) continue;
    if (n.param->grad.rows() != n.param->value.rows() || n.param->grad.cols() != n.param->value.cols())
      n.param->zero_grad();
    n.param->grad += n.grad;
  }
}

// ---- primitives -------------------------------------------------------------

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Matrix out = av * bv;
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) shape_error("matmul_nt", av, bv);
  Matrix out = av * bv.transpose();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.needs_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Matrix out = a.value() + b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Matrix out = a.value() - b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var add_row(Var x, Var row) {
  const Matrix& xv = x.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) shape_error("add_row", xv, rv);
  Matrix out = xv.rowwise() + rv.row(0);
  const int ix = x.id(), ir = row.id();
  return x.tape().record(std::move(out), {x, row}, [ix, ir](Tape& t, const Matrix& g) {
    t.accumulate(ix, g);
    if (t.needs_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

Var add_scalar(Var x, double s) {
  Matrix out = x.value().array() + s;
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, const Matrix& g) { t.accumulate(ix, g); });
}

Var scale(Var x, double s) {
  Matrix out = x.value() * s;
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, s](Tape& t, const Matrix& g) { t.accumulate(ix, g * s); });
}

Var hadamard(Var a, Var b) {
  require_same_shape("hadamard", a.value(), b.value());
  Matrix out = a.value().cwiseProduct(b.value());
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var sigmoid(Var x) {
  Matrix out = (1.0 + (-x.value().array()).exp()).inverse().matrix();
  const int ix = x.id();
  Tape& tape = x.tape();
  const int iy = static_cast<int>(tape.size());
  return tape.record(std::move(out), {x}, [ix, iy](Tape& t, const Matrix& g) {
    const auto yv = t.value(iy).array();
    t.accumulate(ix, (g.array() * yv * (1.0 - yv)).matrix());
  });
}

Var tanh(Var x) {
  Matrix out = x.value().array().tanh().matrix();
  const int ix = x.id();
  Tape& tape = x.tape();
  const int iy = static_cast<int>(tape.size());
  return tape.record(std::move(out), {x}, [ix, iy](Tape& t, const Matrix& g) {
    const auto yv = t.value(iy).array();
    t.accumulate(ix, (g.array() * (1.0 - yv.square())).matrix());
  });
}

Var exp(Var x) {
  Matrix out = x.value().array().exp().matrix();
  const int ix = x.id();
  Tape& tape = x.tape();
  const int iy = static_cast<int>(tape.size());
  return tape.record(std::move(out), {x}, [ix, iy](Tape& t, const Matrix& g) {
    t.accumulate(ix, g.cwiseProduct(t.value(iy)));
  });
}

Var log(Var x) {
  Matrix out = x.value().array().log().matrix();
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, const Matrix& g) {
    t.accumulate(ix, g.cwiseQuotient(t.value(ix)));
  });
}

Var relu(Var x) {
  Matrix out = x.value().cwiseMax(0.0);
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(ix);
    t.accumulate(ix, (xv.array() > 0.0).select(g, 0.0).matrix());
  });
}

Var squared_difference(Var a, Var b) {
  require_same_shape("squared_difference", a.value(), b.value());
  Matrix out = (a.value() - b.value()).array().square().matrix();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    Matrix d = 2.0 * (t.value(ia) - t.value(ib)).cwiseProduct(g);
    t.accumulate(ib, -d);
    t.accumulate(ia, d);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorCode::shape, "concat_cols: no operands");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_error("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(at);
    at += p.cols();
  }
  return parts[0].tape().record(std::move(out), parts, [ids, offsets](Tape& t, const Matrix& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      t.accumulate(ids[k], g.middleCols(offsets[k], t.value(ids[k]).cols()));
    }
  });
}

Var slice_cols(Var x, int start, int width) {
  const Matrix& xv = x.value();
  if (start < 0 || width < 0 || start + width > xv.cols()) {
    fail(ErrorCode::shape, "slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + width) +
                               ") outside " + shape_of(xv));
  }
  Matrix out = xv.middleCols(start, width);
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, start, width](Tape& t, const Matrix& g) {
    t.grad_buffer(ix).middleCols(start, width) += g;
  });
}

Var row_select(Var table, std::span<const int> ids) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= tv.rows()) {
      fail(ErrorCode::shape, "row_select: id " + std::to_string(ids[r]) + " outside table " + shape_of(tv));
    }
    out.row(static_cast<Eigen::Index>(r)) = tv.row(ids[r]);
  }
  const int it = table.id();
  std::vector<int> rows(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table}, [it, rows](Tape& t, const Matrix& g) {
    Matrix& gt = t.grad_buffer(it);
    for (std::size_t r = 0; r < rows.size(); ++r) gt.row(rows[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

Var mask_rows(Var x, std::span<const std::uint8_t> keep) {
  require_rows("mask_rows", x.value(), keep.size());
  Matrix out = x.value();
  for (std::size_t r = 0; r < keep.size(); ++r)
    if (!keep[r]) out.row(static_cast<Eigen::Index>(r)).setZero();
  const int ix = x.id();
  std::vector<std::uint8_t> flags(keep.begin(), keep.end());
  return x.tape().record(std::move(out), {x}, [ix, flags](Tape& t, const Matrix& g) {
    Matrix gx = g;
    for (std::size_t r = 0; r < flags.size(); ++r)
      if (!flags[r]) gx.row(static_cast<Eigen::Index>(r)).setZero();
    t.accumulate(ix, gx);
  });
}

Var where_rows(std::span<const std::uint8_t> take_a, Var a, Var b) {
  require_same_shape("where_rows", a.value(), b.value());
  require_rows("where_rows", a.value(), take_a.size());
  Matrix out = b.value();
  for (std::size_t r = 0; r < take_a.size(); ++r)
    if (take_a[r]) out.row(static_cast<Eigen::Index>(r)) = a.value().row(static_cast<Eigen::Index>(r));
  const int ia = a.id(), ib = b.id();
  std::vector<std::uint8_t> flags(take_a.begin(), take_a.end());
  return a.tape().record(std::move(out), {a, b}, [ia, ib, flags](Tape& t, const Matrix& g) {
    Matrix ga = g, gb = g;
    for (std::size_t r = 0; r < flags.size(); ++r) {
      if (flags[r])
        gb.row(static_cast<Eigen::Index>(r)).setZero();
      else
        ga.row(static_cast<Eigen::Index>(r)).setZero();
    }
    t.accumulate(ia, ga);
    t.accumulate(ib, gb);
  });
}

Var scale_rows(Var x, std::span<const double> factor) {
  require_rows("scale_rows", x.value(), factor.size());
  Eigen::VectorXd f = Eigen::Map<const Eigen::VectorXd>(factor.data(), static_cast<Eigen::Index>(factor.size()));
  Matrix out = f.asDiagonal() * x.value();
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, f](Tape& t, const Matrix& g) {
    t.accumulate(ix, f.asDiagonal() * g);
  });
}

Var sum(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  const int ix = x.id();
  const Eigen::Index r = x.rows(), c = x.cols();
  return x.tape().record(std::move(out), {x}, [ix, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ix, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) fail(ErrorCode::shape, "mean: empty operand");
  return scale(sum(x), 1.0 / n);
}

Var masked_softmax(Var scores, const Mask& mask) {
  const Matrix& s = scores.value();
  if (mask.rows != s.rows() || mask.cols != s.cols()) {
    fail(ErrorCode::shape, "masked_softmax: mask [" + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                               "] vs scores " + shape_of(s));
  }
  Matrix out = Matrix::Zero(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    double best = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
      if (!mask(static_cast<int>(r), static_cast<int>(c))) continue;
      any = true;
      if (s(r, c) > best || std::isnan(s(r, c))) best = s(r, c);
    }
    if (!any) fail(ErrorCode::precondition, "masked_softmax: row " + std::to_string(r) + " fully masked");
    double z = 0.0;
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
      if (!mask(static_cast<int>(r), static_cast<int>(c))) continue;
      out(r, c) = std::exp(s(r, c) - best);
      z += out(r, c);
    }
    out.row(r) /= z;
  }
  const int is = scores.id();
  Tape& tape = scores.tape();
  const int iy = static_cast<int>(tape.size());
  return tape.record(std::move(out), {scores}, [is, iy](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(iy);
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix gs = y.cwiseProduct(g.colwise() - dot);
    t.accumulate(is, gs);
  });
}

Var softmax(Var scores) { return masked_softmax(scores, Mask(static_cast<int>(scores.rows()), static_cast<int>(scores.cols()), true)); }

Var log_softmax(Var logits) {
  const Matrix& x = logits.value();
  Eigen::VectorXd mx = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - mx;
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix out = shifted.colwise() - lse;
  const int ix = logits.id();
  Tape& tape = logits.tape();
  const int iy = static_cast<int>(tape.size());
  return tape.record(std::move(out), {logits}, [ix, iy](Tape& t, const Matrix& g) {
    Matrix p = t.value(iy).array().exp().matrix();
    Eigen::VectorXd gsum = g.rowwise().sum();
    t.accumulate(ix, g - Matrix(p.array().colwise() * gsum.array()));
  });
}

Var pick(Var logp, std::span<const int> ids, double floor) {
  const Matrix& lp = logp.value();
  require_rows("pick", lp, ids.size());
  const double lo = std::log(floor);
  Matrix out(lp.rows(), 1);
  std::vector<std::uint8_t> live(ids.size(), 1);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= lp.cols()) {
      fail(ErrorCode::shape, "pick: id " + std::to_string(ids[r]) + " outside " + shape_of(lp));
    }
    double v = lp(static_cast<Eigen::Index>(r), ids[r]);
    if (v < lo) {
      v = lo;
      live[r] = 0;
      numeric_warnings().clamped_log_prob.fetch_add(1, std::memory_order_relaxed);
    }
    out(static_cast<Eigen::Index>(r), 0) = v;
  }
  const int il = logp.id();
  std::vector<int> cols(ids.begin(), ids.end());
  return logp.tape().record(std::move(out), {logp}, [il, cols, live](Tape& t, const Matrix& g) {
    Matrix& gl = t.grad_buffer(il);
    for (std::size_t r = 0; r < cols.size(); ++r)
      if (live[r]) gl(static_cast<Eigen::Index>(r), cols[r]) += g(static_cast<Eigen::Index>(r), 0);
  });
}

Var row_dots(std::span<const Var> states, Var query) {
  const Matrix& q = query.value();
  Matrix out(q.rows(), static_cast<Eigen::Index>(states.size()));
  for (std::size_t k = 0; k < states.size(); ++k) {
    require_same_shape("row_dots", states[k].value(), q);
    out.col(static_cast<Eigen::Index>(k)) = states[k].value().cwiseProduct(q).rowwise().sum();
  }
  std::vector<Var> inputs(states.begin(), states.end());
  inputs.push_back(query);
  std::vector<int> ids;
  for (const Var& s : states) ids.push_back(s.id());
  const int iq = query.id();
  return query.tape().record(std::move(out), inputs, [ids, iq](Tape& t, const Matrix& g) {
    const Matrix& qv = t.value(iq);
    Matrix gq = Matrix::Zero(qv.rows(), qv.cols());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const Eigen::VectorXd gk = g.col(static_cast<Eigen::Index>(k));
      if (t.needs_grad(ids[k])) t.accumulate(ids[k], gk.asDiagonal() * qv);
      gq += gk.asDiagonal() * t.value(ids[k]);
    }
    t.accumulate(iq, gq);
  });
}

Var weighted_sum(std::span<const Var> states, Var weights) {
  const Matrix& w = weights.value();
  if (states.empty() || w.cols() != static_cast<Eigen::Index>(states.size())) {
    fail(ErrorCode::shape, "weighted_sum: " + std::to_string(states.size()) + " states vs weights " + shape_of(w));
  }
  Matrix out = Matrix::Zero(states[0].rows(), states[0].cols());
  for (std::size_t k = 0; k < states.size(); ++k) {
    require_same_shape("weighted_sum", states[k].value(), states[0].value());
    require_rows("weighted_sum", w, static_cast<std::size_t>(states[k].rows()));
    const Eigen::VectorXd wk = w.col(static_cast<Eigen::Index>(k));
    out += wk.asDiagonal() * states[k].value();
  }
  std::vector<Var> inputs(states.begin(), states.end());
  inputs.push_back(weights);
  std::vector<int> ids;
  for (const Var& s : states) ids.push_back(s.id());
  const int iw = weights.id();
  return weights.tape().record(std::move(out), inputs, [ids, iw](Tape& t, const Matrix& g) {
    const Matrix& wv = t.value(iw);
    Matrix gw(wv.rows(), wv.cols());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const Eigen::VectorXd wk = wv.col(static_cast<Eigen::Index>(k));
      if (t.needs_grad(ids[k])) t.accumulate(ids[k], wk.asDiagonal() * g);
      gw.col(static_cast<Eigen::Index>(k)) = t.value(ids[k]).cwiseProduct(g).rowwise().sum();
    }
    t.accumulate(iw, gw);
  });
}

MaxPool max_over_time(std::span<const Var> states, const Mask& mask) {
  if (states.empty()) fail(ErrorCode::shape, "max_over_time: no states");
  const Eigen::Index rows = states[0].rows(), cols = states[0].cols();
  if (mask.rows != rows || mask.cols != static_cast<int>(states.size())) {
    fail(ErrorCode::shape, "max_over_time: mask [" + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                               "] vs " + std::to_string(states.size()) + " states of " + shape_of(states[0].value()));
  }
  MaxPool result;
  result.argmax.setConstant(rows, cols, -1);
  Matrix out = Matrix::Zero(rows, cols);
  for (std::size_t k = 0; k < states.size(); ++k) {
    require_same_shape("max_over_time", states[k].value(), states[0].value());
    const Matrix& s = states[k].value();
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (!mask(static_cast<int>(r), static_cast<int>(k))) continue;
      for (Eigen::Index c = 0; c < cols; ++c) {
        if (result.argmax(r, c) < 0 || s(r, c) > out(r, c)) {
          out(r, c) = s(r, c);
          result.argmax(r, c) = static_cast<int>(k);
        }
      }
    }
  }
  for (Eigen::Index r = 0; r < rows; ++r)
    if (cols > 0 && result.argmax(r, 0) < 0)
      fail(ErrorCode::precondition, "max_over_time: row " + std::to_string(r) + " fully masked");
  std::vector<int> ids;
  for (const Var& s : states) ids.push_back(s.id());
  auto arg = result.argmax;
  result.value = states[0].tape().record(std::move(out), states, [ids, arg](Tape& t, const Matrix& g) {
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        const int id = ids[static_cast<std::size_t>(arg(r, c))];
        if (t.needs_grad(id)) t.grad_buffer(id)(r, c) += g(r, c);
      }
    }
  });
  return result;
}

Var cosine_rows(Var a, Var b) {
  require_same_shape("cosine_rows", a.value(), b.value());
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Eigen::Index rows = av.rows();
  Eigen::VectorXd na = av.rowwise().norm();
  Eigen::VectorXd nb = bv.rowwise().norm();
  Matrix out(rows, 1);
  std::vector<std::uint8_t> live(static_cast<std::size_t>(rows), 1);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (na(r) == 0.0 || nb(r) == 0.0) {
      out(r, 0) = 0.0;
      live[static_cast<std::size_t>(r)] = 0;
      numeric_warnings().zero_norm_cosine.fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    out(r, 0) = std::clamp(av.row(r).dot(bv.row(r)) / (na(r) * nb(r)), -1.0, 1.0);
  }
  const int ia = a.id(), ib = b.id();
  Tape& tape = a.tape();
  const int iy = static_cast<int>(tape.size());
  return tape.record(std::move(out), {a, b}, [ia, ib, iy, na, nb, live](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(ia);
    const Matrix& bv = t.value(ib);
    const Matrix& y = t.value(iy);
    Matrix ga = Matrix::Zero(av.rows(), av.cols());
    Matrix gb = Matrix::Zero(bv.rows(), bv.cols());
    for (Eigen::Index r = 0; r < av.rows(); ++r) {
      if (!live[static_cast<std::size_t>(r)]) continue;
      const double c = y(r, 0), gr = g(r, 0);
      ga.row(r) = gr * (bv.row(r) / (na(r) * nb(r)) - c * av.row(r) / (na(r) * na(r)));
      gb.row(r) = gr * (av.row(r) / (na(r) * nb(r)) - c * bv.row(r) / (nb(r) * nb(r)));
    }
    t.accumulate(ia, ga);
    t.accumulate(ib, gb);
  });
}

// ---- gradient checking --------------------------------------------------------

GradCheckResult check_gradients(const std::function<Var(Tape&)>& loss_fn, std::span<Parameter* const> params,
                                double eps, std::size_t max_coordinates, std::uint64_t seed, Stencil stencil) {
  if (!(eps > 0.0 && eps <= 1e-2)) fail(ErrorCode::precondition, "check_gradients: eps must lie in (0, 1e-2]");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    if (!std::isfinite(loss.scalar())) fail(ErrorCode::precondition, "check_gradients: non-finite loss");
    tape.backward(loss);
  }
  auto evaluate = [&]() {
    Tape tape(false);
    const double v = loss_fn(tape).scalar();
    if (!std::isfinite(v)) fail(ErrorCode::precondition, "check_gradients: non-finite loss under perturbation");
    return v;
  };

  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (Eigen::Index i = 0; i < params[k]->size(); ++i) coords.emplace_back(k, i);
  if (max_coordinates > 0 && coords.size() > max_coordinates) {
    Rng rng(seed);
    for (std::size_t i = 0; i < max_coordinates; ++i) {
      const std::size_t j = i + rng.uniform_index(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coordinates);
  }

  GradCheckResult result;
  for (const auto& [k, i] : coords) {
    Parameter& p = *params[k];
    double* slot = p.value.data() + i;
    const double saved = *slot;
    auto at = [&](double offset) {
      *slot = saved + offset;
      const double v = evaluate();
      *slot = saved;
      return v;
    };
    const double numeric = stencil == Stencil::three_point
                               ? (at(eps) - at(-eps)) / (2.0 * eps)
                               : (-at(2 * eps) + 8.0 * at(eps) - 8.0 * at(-eps) + at(-2 * eps)) / (12.0 * eps);
    const double analytic = p.grad.data()[i];
    if (!std::isfinite(analytic)) fail(ErrorCode::precondition, "check_gradients: non-finite gradient in " + p.name);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double err = std::abs(analytic - numeric) / denom;
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_parameter = p.name + "[" + std::to_string(i) + "]";
    }
    ++result.coordinates_checked;
  }
  return result;
}

}  // namespace co3::ad
