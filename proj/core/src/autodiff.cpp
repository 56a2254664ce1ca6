#include "causaltok/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace causaltok {

Parameter& ParamStore::add(const std::string& name, Matrix init) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  it->second.value = std::move(init);
  return it->second;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
  return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.resize(0, 0);
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

namespace ad {

const Matrix& Var::value() const { return tape_->nodes_[id_].val(); }
bool Var::has_tangent() const { return tape_->nodes_[id_].has_tangent; }
const Matrix& Var::tangent() const {
  const auto& n = tape_->nodes_[id_];
  if (!n.has_tangent) throw std::logic_error("Var::tangent: node carries no tangent");
  return n.tangent;
}

Var Tape::constant(Matrix value) { return push(std::move(value), std::nullopt, {}, nullptr); }

Var Tape::input(Matrix value, Matrix tangent) {
  require_same_shape(value, tangent, "Tape::input");
  Var v = push(std::move(value), std::move(tangent), {}, nullptr);
  nodes_[v.id()].requires_grad = record_;
  return v;
}

Var Tape::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::scalar(double value, double tangent) {
  return input(Matrix::Constant(1, 1, value), Matrix::Constant(1, 1, tangent));
}

Var Tape::param(const Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.external = &p.value;
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  param_nodes_.emplace(&p, id);
  return Var(this, id);
}

Var Tape::push(Matrix value, std::optional<Matrix> tangent, std::initializer_list<Var> parents,
               BackwardFn backward) {
  return push(std::move(value), std::move(tangent),
              std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Tape::push(Matrix value, std::optional<Matrix> tangent, std::span<const Var> parents,
               BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (tangent) {
    n.tangent = std::move(*tangent);
    n.has_tangent = true;
  }
  bool needs = false;
  if (record_) {
    for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
  }
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (!record_) throw std::logic_error("Tape::backward: tape does not record gradients");
  Node& root = nodes_[loss.id()];
  if (root.val().rows() != 1 || root.val().cols() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be 1x1");
  }
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.val().rows(), n.val().cols());
  return n.grad;
}

const Matrix* Tape::param_grad(const Parameter& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end()) return nullptr;
  const Node& n = nodes_[it->second];
  return n.grad.size() == 0 ? nullptr : &n.grad;
}

namespace {

void check_same(Var a, Var b, const char* op) {
  require_same_shape(a.value(), b.value(), op);
}

bool any_tangent(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.has_tangent()) return true;
  return false;
}

// Row-broadcast helper: r is 1 x d or n x d.
bool is_broadcast_row(const Matrix& r, const Matrix& x) {
  if (r.cols() != x.cols()) return false;
  return r.rows() == 1 || r.rows() == x.rows();
}

Matrix expand_rows(const Matrix& r, Eigen::Index rows) {
  if (r.rows() == rows) return r;
  return r.replicate(rows, 1);
}

Matrix reduce_to(const Matrix& g, Eigen::Index rows) {
  if (g.rows() == rows) return g;
  return g.colwise().sum();
}

}  // namespace

Var add(Var a, Var b) {
  check_same(a, b, "ad::add");
  std::optional<Matrix> tan;
  if (any_tangent({a, b})) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    if (a.has_tangent()) d += a.tangent();
    if (b.has_tangent()) d += b.tangent();
    tan = std::move(d);
  }
  return a.tape().push(a.value() + b.value(), std::move(tan), {a, b},
                       [a, b](Tape& t, const Matrix& g) {
                         t.accumulate(a, g);
                         t.accumulate(b, g);
                       });
}

Var sub(Var a, Var b) {
  check_same(a, b, "ad::sub");
  std::optional<Matrix> tan;
  if (any_tangent({a, b})) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    if (a.has_tangent()) d += a.tangent();
    if (b.has_tangent()) d -= b.tangent();
    tan = std::move(d);
  }
  return a.tape().push(a.value() - b.value(), std::move(tan), {a, b},
                       [a, b](Tape& t, const Matrix& g) {
                         t.accumulate(a, g);
                         t.accumulate(b, -g);
                       });
}

Var mul(Var a, Var b) {
  check_same(a, b, "ad::mul");
  std::optional<Matrix> tan;
  if (any_tangent({a, b})) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    if (a.has_tangent()) d.array() += a.tangent().array() * b.value().array();
    if (b.has_tangent()) d.array() += a.value().array() * b.tangent().array();
    tan = std::move(d);
  }
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().push(std::move(out), std::move(tan), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(b.value()));
    t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double s) {
  std::optional<Matrix> tan;
  if (a.has_tangent()) tan = a.tangent() * s;
  return a.tape().push(a.value() * s, std::move(tan), {a},
                       [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var add_scalar(Var a, double s) {
  std::optional<Matrix> tan;
  if (a.has_tangent()) tan = a.tangent();
  Matrix out = a.value().array() + s;
  return a.tape().push(std::move(out), std::move(tan), {a},
                       [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("ad::matmul: inner dimension mismatch");
  std::optional<Matrix> tan;
  if (any_tangent({a, b})) {
    Matrix d = Matrix::Zero(a.rows(), b.cols());
    if (a.has_tangent()) d.noalias() += a.tangent() * b.value();
    if (b.has_tangent()) d.noalias() += a.value() * b.tangent();
    tan = std::move(d);
  }
  Matrix out = a.value() * b.value();
  return a.tape().push(std::move(out), std::move(tan), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var linear(Var x, Var w, Var b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw std::invalid_argument("ad::linear: shape mismatch");
  }
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  std::optional<Matrix> tan;
  if (any_tangent({x, w, b})) {
    Matrix d = Matrix::Zero(out.rows(), out.cols());
    if (x.has_tangent()) d.noalias() += x.tangent() * w.value();
    if (w.has_tangent()) d.noalias() += x.value() * w.tangent();
    if (b.has_tangent()) d.rowwise() += b.tangent().row(0);
    tan = std::move(d);
  }
  return x.tape().push(std::move(out), std::move(tan), {x, w, b},
                       [x, w, b](Tape& t, const Matrix& g) {
                         if (t.requires_grad(x)) t.accumulate(x, g * w.value().transpose());
                         if (t.requires_grad(w)) t.accumulate(w, x.value().transpose() * g);
                         if (t.requires_grad(b)) t.accumulate(b, g.colwise().sum());
                       });
}

Var add_row(Var x, Var row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw std::invalid_argument("ad::add_row: row must be 1 x cols");
  }
  Matrix out = x.value();
  out.rowwise() += row.value().row(0);
  std::optional<Matrix> tan;
  if (any_tangent({x, row})) {
    Matrix d = Matrix::Zero(out.rows(), out.cols());
    if (x.has_tangent()) d += x.tangent();
    if (row.has_tangent()) d.rowwise() += row.tangent().row(0);
    tan = std::move(d);
  }
  return x.tape().push(std::move(out), std::move(tan), {x, row},
                       [x, row](Tape& t, const Matrix& g) {
                         t.accumulate(x, g);
                         if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
                       });
}

static Matrix layer_norm_jacobian(const Matrix& y, const Eigen::VectorXd& inv_sigma, const Matrix& dx) {
  // J dx = (dx - mean(dx) - y * mean(y . dx)) / sigma; J is symmetric.
  const double d = static_cast<double>(y.cols());
  Matrix out(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double m = dx.row(i).sum() / d;
    const double my = dx.row(i).dot(y.row(i)) / d;
    out.row(i) = (dx.row(i).array() - m - y.row(i).array() * my) * inv_sigma(i);
  }
  return out;
}

Var layer_norm(Var x, double eps) {
  const Matrix& xv = x.value();
  const auto n = xv.rows();
  const double d = static_cast<double>(xv.cols());
  Matrix y(n, xv.cols());
  Eigen::VectorXd inv_sigma(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().sum() / d;
    inv_sigma(i) = 1.0 / std::sqrt(var + eps);
    y.row(i) = (xv.row(i).array() - mu) * inv_sigma(i);
  }
  std::optional<Matrix> tan;
  if (x.has_tangent()) tan = layer_norm_jacobian(y, inv_sigma, x.tangent());
  return x.tape().push(y, std::move(tan), {x}, [x, y, inv_sigma](Tape& t, const Matrix& g) {
    t.accumulate(x, layer_norm_jacobian(y, inv_sigma, g));
  });
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

Matrix gelu_value(const Matrix& x) {
  return (0.5 * x.array() * (1.0 + (kGeluC * (x.array() + kGeluA * x.array().cube())).tanh()))
      .matrix();
}

Matrix gelu_derivative(const Matrix& x) {
  const auto u = (kGeluC * (x.array() + kGeluA * x.array().cube())).tanh();
  const auto du = kGeluC * (1.0 + 3.0 * kGeluA * x.array().square());
  return (0.5 * (1.0 + u) + 0.5 * x.array() * (1.0 - u.square()) * du).matrix();
}

}  // namespace

Var gelu(Var x) {
  Matrix deriv = gelu_derivative(x.value());
  std::optional<Matrix> tan;
  if (x.has_tangent()) tan = x.tangent().cwiseProduct(deriv);
  return x.tape().push(gelu_value(x.value()), std::move(tan), {x},
                       [x, deriv](Tape& t, const Matrix& g) {
                         t.accumulate(x, g.cwiseProduct(deriv));
                       });
}

Var silu(Var x) {
  const Matrix sig = (1.0 / (1.0 + (-x.value().array()).exp())).matrix();
  Matrix out = x.value().cwiseProduct(sig);
  Matrix deriv = (sig.array() * (1.0 + x.value().array() * (1.0 - sig.array()))).matrix();
  std::optional<Matrix> tan;
  if (x.has_tangent()) tan = x.tangent().cwiseProduct(deriv);
  return x.tape().push(std::move(out), std::move(tan), {x}, [x, deriv](Tape& t, const Matrix& g) {
    t.accumulate(x, g.cwiseProduct(deriv));
  });
}

Var tanh(Var x) {
  Matrix out = x.value().array().tanh().matrix();
  Matrix deriv = (1.0 - out.array().square()).matrix();
  std::optional<Matrix> tan;
  if (x.has_tangent()) tan = x.tangent().cwiseProduct(deriv);
  return x.tape().push(std::move(out), std::move(tan), {x}, [x, deriv](Tape& t, const Matrix& g) {
    t.accumulate(x, g.cwiseProduct(deriv));
  });
}

Var attention(Var q, Var k, Var v, int heads, std::shared_ptr<const BoolMatrix> mask) {
  check_same(q, k, "ad::attention(q,k)");
  check_same(q, v, "ad::attention(q,v)");
  const Eigen::Index n = q.rows();
  const Eigen::Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("ad::attention: bad head count");
  if (mask && (mask->rows() != n || mask->cols() != n)) {
    throw std::invalid_argument("ad::attention: mask shape mismatch");
  }
  const Eigen::Index dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<Matrix>>(heads);
  Matrix out(n, d);
  const bool tangent = any_tangent({q, k, v});
  Matrix tan_out;
  if (tangent) tan_out.setZero(n, d);

  for (int h = 0; h < heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().middleCols(h * dh, dh);
    const auto vh = v.value().middleCols(h * dh, dh);
    Matrix s = (qh * kh.transpose()) * sc;
    Matrix& p = (*probs)[h];
    p.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j)
        if (!mask || (*mask)(i, j)) mx = std::max(mx, s(i, j));
      double z = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double e = (!mask || (*mask)(i, j)) ? std::exp(s(i, j) - mx) : 0.0;
        p(i, j) = e;
        z += e;
      }
      p.row(i) /= z;
    }
    out.middleCols(h * dh, dh).noalias() = p * vh;

    if (tangent) {
      Matrix ds = Matrix::Zero(n, n);
      if (q.has_tangent()) ds.noalias() += q.tangent().middleCols(h * dh, dh) * kh.transpose();
      if (k.has_tangent()) ds.noalias() += qh * k.tangent().middleCols(h * dh, dh).transpose();
      ds *= sc;
      // Masked entries have p = 0, so they drop out of dp automatically.
      Matrix pds = p.cwiseProduct(ds);
      Eigen::VectorXd rs = pds.rowwise().sum();
      Matrix dp = pds - p.cwiseProduct(rs.replicate(1, n));
      auto block = tan_out.middleCols(h * dh, dh);
      block.noalias() += dp * vh;
      if (v.has_tangent()) block.noalias() += p * v.tangent().middleCols(h * dh, dh);
    }
  }

  std::optional<Matrix> tan;
  if (tangent) tan = std::move(tan_out);
  return q.tape().push(
      std::move(out), std::move(tan), {q, k, v},
      [q, k, v, heads, dh, sc, probs](Tape& t, const Matrix& g) {
        const Eigen::Index n = q.rows();
        const Eigen::Index d = q.cols();
        Matrix gq = Matrix::Zero(n, d), gk = Matrix::Zero(n, d), gv = Matrix::Zero(n, d);
        for (int h = 0; h < heads; ++h) {
          const Matrix& p = (*probs)[h];
          const auto gh = g.middleCols(h * dh, dh);
          const auto qh = q.value().middleCols(h * dh, dh);
          const auto kh = k.value().middleCols(h * dh, dh);
          const auto vh = v.value().middleCols(h * dh, dh);
          gv.middleCols(h * dh, dh).noalias() = p.transpose() * gh;
          Matrix dp = gh * vh.transpose();
          Eigen::VectorXd rs = p.cwiseProduct(dp).rowwise().sum();
          Matrix ds = p.cwiseProduct(dp - rs.replicate(1, n)) * sc;
          gq.middleCols(h * dh, dh).noalias() = ds * kh;
          gk.middleCols(h * dh, dh).noalias() = ds.transpose() * qh;
        }
        t.accumulate(q, gq);
        t.accumulate(k, gk);
        t.accumulate(v, gv);
      });
}

Var modulate(Var x, Var shift, Var sc) {
  if (!is_broadcast_row(shift.value(), x.value()) || !is_broadcast_row(sc.value(), x.value())) {
    throw std::invalid_argument("ad::modulate: shift/scale shape mismatch");
  }
  const Eigen::Index n = x.rows();
  const Matrix shift_e = expand_rows(shift.value(), n);
  const Matrix scale_e = expand_rows(sc.value(), n);
  Matrix out = (x.value().array() * (1.0 + scale_e.array()) + shift_e.array()).matrix();
  std::optional<Matrix> tan;
  if (any_tangent({x, shift, sc})) {
    Matrix d = Matrix::Zero(n, x.cols());
    if (x.has_tangent()) d.array() += x.tangent().array() * (1.0 + scale_e.array());
    if (sc.has_tangent()) d.array() += x.value().array() * expand_rows(sc.tangent(), n).array();
    if (shift.has_tangent()) d += expand_rows(shift.tangent(), n);
    tan = std::move(d);
  }
  return x.tape().push(std::move(out), std::move(tan), {x, shift, sc},
                       [x, shift, sc, scale_e](Tape& t, const Matrix& g) {
                         t.accumulate(x, (g.array() * (1.0 + scale_e.array())).matrix());
                         if (t.requires_grad(sc)) {
                           t.accumulate(sc, reduce_to(g.cwiseProduct(x.value()), sc.rows()));
                         }
                         if (t.requires_grad(shift)) t.accumulate(shift, reduce_to(g, shift.rows()));
                       });
}

Var gate(Var h, Var g) {
  if (!is_broadcast_row(g.value(), h.value())) {
    throw std::invalid_argument("ad::gate: gate shape mismatch");
  }
  const Eigen::Index n = h.rows();
  const Matrix ge = expand_rows(g.value(), n);
  Matrix out = h.value().cwiseProduct(ge);
  std::optional<Matrix> tan;
  if (any_tangent({h, g})) {
    Matrix d = Matrix::Zero(n, h.cols());
    if (h.has_tangent()) d += h.tangent().cwiseProduct(ge);
    if (g.has_tangent()) d += h.value().cwiseProduct(expand_rows(g.tangent(), n));
    tan = std::move(d);
  }
  return h.tape().push(std::move(out), std::move(tan), {h, g}, [h, g, ge](Tape& t, const Matrix& gr) {
    t.accumulate(h, gr.cwiseProduct(ge));
    if (t.requires_grad(g)) t.accumulate(g, reduce_to(gr.cwiseProduct(h.value()), g.rows()));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("ad::concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool tangent = false;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("ad::concat_rows: column mismatch");
    rows += p.rows();
    tangent = tangent || p.has_tangent();
  }
  Matrix out(rows, cols);
  std::optional<Matrix> tan;
  if (tangent) tan = Matrix::Zero(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    out.middleRows(off, p.rows()) = p.value();
    if (p.has_tangent()) tan->middleRows(off, p.rows()) = p.tangent();
    off += p.rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  Tape& tape = parts.front().tape();
  return tape.push(std::move(out), std::move(tan), std::span<const Var>(ins),
                   [ins, offsets](Tape& t, const Matrix& g) {
                     for (std::size_t i = 0; i < ins.size(); ++i) {
                       if (t.requires_grad(ins[i])) {
                         t.accumulate(ins[i], g.middleRows(offsets[i], ins[i].rows()));
                       }
                     }
                   });
}

Var slice_rows(Var x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw std::invalid_argument("ad::slice_rows: range out of bounds");
  }
  std::optional<Matrix> tan;
  if (x.has_tangent()) tan = x.tangent().middleRows(begin, count);
  return x.tape().push(x.value().middleRows(begin, count), std::move(tan), {x},
                       [x, begin, count](Tape& t, const Matrix& g) {
                         Matrix full = Matrix::Zero(x.rows(), x.cols());
                         full.middleRows(begin, count) = g;
                         t.accumulate(x, full);
                       });
}

Var slice_cols(Var x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw std::invalid_argument("ad::slice_cols: range out of bounds");
  }
  std::optional<Matrix> tan;
  if (x.has_tangent()) tan = x.tangent().middleCols(begin, count);
  return x.tape().push(x.value().middleCols(begin, count), std::move(tan), {x},
                       [x, begin, count](Tape& t, const Matrix& g) {
                         Matrix full = Matrix::Zero(x.rows(), x.cols());
                         full.middleCols(begin, count) = g;
                         t.accumulate(x, full);
                       });
}

Var gather_rows(Var table, std::vector<int> indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), table.cols());
  std::optional<Matrix> tan;
  if (table.has_tangent()) tan = Matrix(out.rows(), out.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    if (r < 0 || r >= table.rows()) throw std::invalid_argument("ad::gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(r);
    if (tan) tan->row(static_cast<Eigen::Index>(i)) = table.tangent().row(r);
  }
  return table.tape().push(std::move(out), std::move(tan), {table},
                           [table, indices = std::move(indices)](Tape& t, const Matrix& g) {
                             Matrix full = Matrix::Zero(table.rows(), table.cols());
                             for (std::size_t i = 0; i < indices.size(); ++i) {
                               full.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
                             }
                             t.accumulate(table, full);
                           });
}

Var gather(Var x, std::shared_ptr<const std::vector<int>> index, Eigen::Index rows,
           Eigen::Index cols) {
  if (static_cast<Eigen::Index>(index->size()) != rows * cols) {
    throw std::invalid_argument("ad::gather: index size does not match output shape");
  }
  const Eigen::Index src_size = x.value().size();
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const int s = (*index)[static_cast<std::size_t>(i)];
    if (s < 0 || s >= src_size) throw std::invalid_argument("ad::gather: index out of range");
    out.data()[i] = x.value().data()[s];
  }
  std::optional<Matrix> tan;
  if (x.has_tangent()) {
    Matrix d(rows, cols);
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      d.data()[i] = x.tangent().data()[(*index)[static_cast<std::size_t>(i)]];
    }
    tan = std::move(d);
  }
  return x.tape().push(std::move(out), std::move(tan), {x}, [x, index](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      full.data()[(*index)[static_cast<std::size_t>(i)]] += g.data()[i];
    }
    t.accumulate(x, full);
  });
}

Var normalize_rows(Var x, double eps) {
  const Matrix& xv = x.value();
  Eigen::VectorXd norms = (xv.rowwise().squaredNorm().array() + eps).sqrt().matrix();
  Matrix y = xv;
  for (Eigen::Index i = 0; i < y.rows(); ++i) y.row(i) /= norms(i);
  auto jac = [](const Matrix& y, const Eigen::VectorXd& norms, const Matrix& d) {
    Matrix out(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      out.row(i) = (d.row(i) - y.row(i) * y.row(i).dot(d.row(i))) / norms(i);
    }
    return out;
  };
  std::optional<Matrix> tan;
  if (x.has_tangent()) tan = jac(y, norms, x.tangent());
  return x.tape().push(y, std::move(tan), {x}, [x, y, norms, jac](Tape& t, const Matrix& g) {
    t.accumulate(x, jac(y, norms, g));
  });
}

Var sinusoidal(Var s, int dim, double max_freq) {
  if (s.cols() != 1) throw std::invalid_argument("ad::sinusoidal: input must be a column");
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("ad::sinusoidal: dim must be even");
  const int half = dim / 2;
  Eigen::RowVectorXd freqs(half);
  for (int j = 0; j < half; ++j) {
    const double frac = half > 1 ? static_cast<double>(j) / (half - 1) : 0.0;
    freqs(j) = std::exp(frac * std::log(max_freq));
  }
  const Eigen::Index n = s.rows();
  Matrix out(n, dim);
  Matrix deriv(n, dim);  // d out / d s
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < half; ++j) {
      const double a = freqs(j) * s.value()(i, 0);
      out(i, j) = std::sin(a);
      out(i, half + j) = std::cos(a);
      deriv(i, j) = freqs(j) * std::cos(a);
      deriv(i, half + j) = -freqs(j) * std::sin(a);
    }
  }
  std::optional<Matrix> tan;
  if (s.has_tangent()) {
    Matrix d = deriv;
    for (Eigen::Index i = 0; i < n; ++i) d.row(i) *= s.tangent()(i, 0);
    tan = std::move(d);
  }
  return s.tape().push(std::move(out), std::move(tan), {s}, [s, deriv](Tape& t, const Matrix& g) {
    t.accumulate(s, g.cwiseProduct(deriv).rowwise().sum());
  });
}

Var sum_squares(Var x) {
  Matrix out = Matrix::Constant(1, 1, x.value().squaredNorm());
  std::optional<Matrix> tan;
  if (x.has_tangent()) {
    tan = Matrix::Constant(1, 1, 2.0 * x.value().cwiseProduct(x.tangent()).sum());
  }
  return x.tape().push(std::move(out), std::move(tan), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate(x, x.value() * (2.0 * g(0, 0)));
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  Matrix out = Matrix::Constant(1, 1, x.value().mean());
  std::optional<Matrix> tan;
  if (x.has_tangent()) tan = Matrix::Constant(1, 1, x.tangent().mean());
  return x.tape().push(std::move(out), std::move(tan), {x}, [x, n](Tape& t, const Matrix& g) {
    t.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0) / n));
  });
}

Var neg_mean_cosine(Var a, Var b, double eps) {
  check_same(a, b, "ad::neg_mean_cosine");
  const Eigen::Index n = a.rows();
  if (n == 0) throw std::invalid_argument("ad::neg_mean_cosine: no rows");
  Eigen::VectorXd na = (a.value().rowwise().squaredNorm().array() + eps * eps).sqrt().matrix();
  Eigen::VectorXd nb = (b.value().rowwise().squaredNorm().array() + eps * eps).sqrt().matrix();
  Eigen::VectorXd cos(n);
  for (Eigen::Index i = 0; i < n; ++i) cos(i) = a.value().row(i).dot(b.value().row(i)) / (na(i) * nb(i));
  Matrix out = Matrix::Constant(1, 1, -cos.mean());
  // d cos / d a = b/(|a||b|) - cos * a/|a|^2
  auto grad_side = [n](const Matrix& self, const Matrix& other, const Eigen::VectorXd& ns,
                       const Eigen::VectorXd& no, const Eigen::VectorXd& cos) {
    Matrix gr(self.rows(), self.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      gr.row(i) = other.row(i) / (ns(i) * no(i)) - self.row(i) * (cos(i) / (ns(i) * ns(i)));
    }
    return gr;
  };
  std::optional<Matrix> tan;
  if (any_tangent({a, b})) {
    double d = 0.0;
    if (a.has_tangent()) {
      d += grad_side(a.value(), b.value(), na, nb, cos).cwiseProduct(a.tangent()).sum();
    }
    if (b.has_tangent()) {
      d += grad_side(b.value(), a.value(), nb, na, cos).cwiseProduct(b.tangent()).sum();
    }
    tan = Matrix::Constant(1, 1, -d / static_cast<double>(n));
  }
  return a.tape().push(std::move(out), std::move(tan), {a, b},
                       [a, b, na, nb, cos, grad_side, n](Tape& t, const Matrix& g) {
                         const double s = -g(0, 0) / static_cast<double>(n);
                         if (t.requires_grad(a)) {
                           t.accumulate(a, grad_side(a.value(), b.value(), na, nb, cos) * s);
                         }
                         if (t.requires_grad(b)) {
                           t.accumulate(b, grad_side(b.value(), a.value(), nb, na, cos) * s);
                         }
                       });
}

}  // namespace ad
}  // namespace causaltok
