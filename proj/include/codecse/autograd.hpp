#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "codecse/grid.hpp"
#include "codecse/params.hpp"
#include "codecse/tensor.hpp"

namespace codecse {

struct Var {
  std::size_t id = 0;
};

// Reverse-mode tape over the fixed layer set used by the enhancement model.
// A tape is single-use: record a forward pass, call backward() once.
// Parameters are read by pointer, so the store must outlive the tape and stay
// unchanged while the tape is alive.
class Tape {
 public:
  // With record_gradients false no backward closures are kept (inference).
  explicit Tape(const ParameterStore* params = nullptr, bool record_gradients = true)
      : params_(params), record_(record_gradients) {}

  Var constant(Tensor value);
  // Differentiable input; its gradient is readable via grad() after backward.
  Var leaf(Tensor value);
  Var param(ParamId id);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() target; an empty tensor if unreached.
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // x[n x k] . w[k x m]
  Var matmul(Var x, Var w);
  // x[n x k] . w[k x m] + b[1 x m]
  Var affine(Var x, Var w, Var b);
  Var add(Var a, Var b);
  Var scale(Var a, double factor);
  // x[n x h] + table[offset .. offset + n)
  Var add_rows(Var x, Var table, std::size_t offset);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var gelu(Var x);
  // Bidirectional multi-head attention over a packed [n x 3h] q|k|v input.
  Var self_attention(Var qkv, std::size_t num_heads);
  // Row i of the result is row indices[i] of table.
  Var embedding(Var table, std::span<const int> indices);
  Var sum(Var a);
  Var add_scalars(std::span<const Var> terms);

  // Mean over masked (row, group) slots of -log softmax(logits)[target].
  // logits is [L x (C*D)], softmax taken per group of D columns. Zero when the
  // mask is empty.
  Var masked_cross_entropy(Var logits, const TokenGrid& targets, const MaskGrid& mask,
                           std::size_t codebook_size);
  // Mean binary cross-entropy of sigmoid(logits) against targets over slots
  // where `include` is set (all slots when include is empty).
  Var bce_with_logits(Var logits, const MaskGrid& targets, const MaskGrid& include = {});
  // Mean absolute difference against a constant target.
  Var mae(Var estimate, const Tensor& target);

  void backward(Var loss, GradientSet* param_grads = nullptr);

 private:
  using BackFn = std::function<void(Tape&)>;
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::ptrdiff_t param = -1;
    BackFn back;
  };

  Var push(Tensor value, bool requires_grad, BackFn back = {});
  Tensor& grad_ref(std::size_t id);
  bool rg(Var v) const { return nodes_[v.id].requires_grad; }

  const ParameterStore* params_;
  bool record_ = true;
  std::vector<Node> nodes_;
};

// Softmax over consecutive groups of `group` columns of a [L x (C*group)] matrix.
Tensor grouped_softmax(const Tensor& logits, std::size_t group);
double sigmoid(double x);

}  // namespace codecse
