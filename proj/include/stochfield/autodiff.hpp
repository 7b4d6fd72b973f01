#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stochfield/common.hpp"

namespace stochfield {

// Named trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  MatrixXd value;
  MatrixXd grad;
};

class ParameterStore {
 public:
  int add(std::string name, MatrixXd init) {
    params_.push_back({std::move(name), std::move(init), MatrixXd()});
    Parameter& p = params_.back();
    p.grad = MatrixXd::Zero(p.value.rows(), p.value.cols());
    return static_cast<int>(params_.size()) - 1;
  }

  Parameter& operator[](int i) { return params_[static_cast<size_t>(i)]; }
  const Parameter& operator[](int i) const { return params_[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(params_.size()); }

  int find(const std::string& name) const {
    for (size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  int scalar_count() const {
    int n = 0;
    for (const auto& p : params_) n += static_cast<int>(p.value.size());
    return n;
  }

 private:
  std::vector<Parameter> params_;
};

using VarId = int32_t;

// Reverse-mode tape over matrix-valued nodes. Creation order is the
// topological order; each node caches its forward value and an adjoint
// accumulator, and optionally a backward closure that scatters its adjoint
// into its parents' accumulators.
class Tape {
 public:
  struct Node {
    MatrixXd value;
    MatrixXd adjoint;  // empty until first accumulation
    std::function<void(Tape&, VarId)> backward;
    int param = -1;
    const char* op = "";
  };

  VarId push(MatrixXd value, std::function<void(Tape&, VarId)> backward = nullptr, const char* op = "") {
    nodes_.push_back({std::move(value), MatrixXd(), std::move(backward), -1, op});
    return static_cast<VarId>(nodes_.size()) - 1;
  }

  VarId constant(MatrixXd value, const char* op = "const") { return push(std::move(value), nullptr, op); }

  VarId leaf(const ParameterStore& store, int param_index) {
    VarId id = push(store[param_index].value, nullptr, "param");
    nodes_.back().param = param_index;
    return id;
  }

  const MatrixXd& value(VarId id) const { return nodes_[static_cast<size_t>(id)].value; }

  bool has_adjoint(VarId id) const { return nodes_[static_cast<size_t>(id)].adjoint.size() > 0; }

  const MatrixXd& adjoint(VarId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.adjoint.size() == 0) n.adjoint = MatrixXd::Zero(n.value.rows(), n.value.cols());
    return n.adjoint;
  }

  template <typename Expr>
  void add_adjoint(VarId id, const Expr& delta) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.adjoint.size() == 0) n.adjoint = MatrixXd::Zero(n.value.rows(), n.value.cols());
    n.adjoint += delta;
  }

  // Seeds the (scalar) root with 1 and runs one reverse sweep. Parameter
  // leaves add their adjoints into the store's gradient accumulators.
  void backward(VarId root, ParameterStore& store) {
    sweep(root, [&](int param, const MatrixXd& adj) { store[param].grad += adj; });
  }

  // As above, but collects gradients into a detached buffer (one slot per
  // parameter, allocated on first touch). Lets batch elements run on separate
  // tapes concurrently and be reduced in a fixed order afterwards.
  void backward(VarId root, std::vector<MatrixXd>& grads) {
    sweep(root, [&](int param, const MatrixXd& adj) {
      MatrixXd& g = grads[static_cast<size_t>(param)];
      if (g.size() == 0) {
        g = adj;
      } else {
        g += adj;
      }
    });
  }

  size_t size() const { return nodes_.size(); }

 private:
  template <typename Sink>
  void sweep(VarId root, Sink&& sink) {
    if (value(root).size() != 1) throw NumericalError("backward: root node must be scalar");
    add_adjoint(root, MatrixXd::Ones(1, 1));
    for (VarId id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.adjoint.size() == 0) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param >= 0) sink(n.param, n.adjoint);
    }
  }

  std::vector<Node> nodes_;
};

// Generic elementwise / matrix ops (small glue; the heavy operators live next
// to the modules that own them).
VarId op_add(Tape& t, VarId a, VarId b);
VarId op_sub(Tape& t, VarId a, VarId b);
VarId op_mul(Tape& t, VarId a, VarId b);  // elementwise
VarId op_scale(Tape& t, VarId a, double s);
VarId op_matmul(Tape& t, VarId a, VarId b);
VarId op_sum(Tape& t, VarId a);           // -> 1x1
VarId op_mean(Tape& t, const std::vector<VarId>& xs);  // mean of scalars -> 1x1
VarId op_exp(Tape& t, VarId a);           // elementwise
VarId op_softplus(Tape& t, VarId a);      // log(1 + e^x), elementwise
VarId op_sigmoid(Tape& t, VarId a);       // elementwise
VarId op_add_const(Tape& t, VarId a, double c);
VarId op_cols(Tape& t, VarId a, int begin, int count);  // column slice
VarId op_hcat(Tape& t, VarId a, VarId b);               // column concatenation

}  // namespace stochfield
