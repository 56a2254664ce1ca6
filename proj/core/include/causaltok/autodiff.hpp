#pragma once

// Tape-based automatic differentiation over row-major matrices.
//
// Reverse mode: every op records a closure that maps the output cotangent to
// input cotangents; Tape::backward replays them in reverse creation order.
//
// Forward mode: tangents are propagated eagerly. A leaf created with
// Tape::input carries a seed tangent, and every op whose inputs carry a
// tangent computes its own output tangent alongside the value. Parameters and
// constants have no tangent. Tangents are plain data and never enter the
// reverse-mode graph, so a target built from them is detached automatically.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "causaltok/tensor.hpp"

namespace causaltok {

struct Parameter {
  Matrix value;
  Matrix grad;  // empty until the first accumulation
};

/// Named parameters with stable addresses and canonical (sorted) order.
class ParamStore {
 public:
  using Map = std::map<std::string, Parameter>;

  Parameter& add(const std::string& name, Matrix init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  std::size_t scalar_count() const;
  std::size_t size() const { return params_.size(); }

  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

 private:
  Map params_;
};

namespace ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Matrix& value() const;
  bool has_tangent() const;
  const Matrix& tangent() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix&)>;

  /// With record_gradients = false no backward closures are stored, which is
  /// what inference and pure forward-mode evaluation want.
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf with a seed tangent; on a recording tape it also receives a gradient.
  Var input(Matrix value, Matrix tangent);
  Var scalar(double value);
  Var scalar(double value, double tangent);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(const Parameter& p);

  void backward(Var loss);

  /// Gradient w.r.t. a node after backward (zero matrix when unreached).
  Matrix grad(Var v) const;
  /// Gradient w.r.t. a parameter leaf; empty when the parameter was unused.
  const Matrix* param_grad(const Parameter& p) const;

  bool records_gradients() const { return record_; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // -- op-author interface ------------------------------------------------
  Var push(Matrix value, std::optional<Matrix> tangent, std::initializer_list<Var> parents,
           BackwardFn backward);
  Var push(Matrix value, std::optional<Matrix> tangent, std::span<const Var> parents,
           BackwardFn backward);

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

 private:
  friend class Var;
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    Matrix tangent;
    bool has_tangent = false;
    bool requires_grad = false;
    BackwardFn backward;

    const Matrix& val() const { return external ? *external : value; }
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// ---------------------------------------------------------------------------
// Ops. Shapes are checked; mismatches throw std::invalid_argument.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var matmul(Var a, Var b);
/// x W + b with b a 1 x out row broadcast over rows.
Var linear(Var x, Var w, Var b);
/// Broadcast-add a 1 x d row to every row of x.
Var add_row(Var x, Var row);
Var layer_norm(Var x, double eps = 1e-6);
Var gelu(Var x);
Var silu(Var x);
Var tanh(Var x);
/// Multi-head scaled dot-product attention. q, k, v are n x d; mask (n x n,
/// true = may attend) may be null for full attention.
Var attention(Var q, Var k, Var v, int heads, std::shared_ptr<const BoolMatrix> mask);
/// x * (1 + scale) + shift, where shift/scale are 1 x d (broadcast) or n x d.
Var modulate(Var x, Var shift, Var scale);
/// h * gate with gate 1 x d (broadcast) or n x d.
Var gate(Var h, Var g);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var x, Eigen::Index begin, Eigen::Index count);
/// Rows of `table` picked by index (embedding lookup).
Var gather_rows(Var table, std::vector<int> indices);
/// out.flat[i] = x.flat[index[i]]; used for patchify/unpatchify.
Var gather(Var x, std::shared_ptr<const std::vector<int>> index, Eigen::Index rows,
           Eigen::Index cols);
/// Each row divided by sqrt(|row|^2 + eps).
Var normalize_rows(Var x, double eps = 1e-12);
/// Sinusoidal features of an n x 1 column: [sin(f_j s), cos(f_j s)] with
/// frequencies geometrically spaced in [1, max_freq].
Var sinusoidal(Var s, int dim, double max_freq);
Var sum_squares(Var x);  // 1 x 1
Var mean(Var x);         // 1 x 1
/// -(1/N) sum_n cos(a_n, b_n) over matching rows; 1 x 1.
Var neg_mean_cosine(Var a, Var b, double eps = 1e-8);

}  // namespace ad
}  // namespace causaltok
