#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "mqmk/numerics/tensor.hpp"

namespace mqmk::num {

// Define-by-run reverse-mode autodiff. Every primitive call appends a node
// to an implicit graph held together by shared_ptr parent links; the graph
// is rebuilt on each forward pass and freed when the last Var handle goes
// out of scope. Creation order is a topological order, but backward() does
// its own DFS so partially used graphs work too.

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool needs_grad = false;
  Tensor* bound = nullptr;  // leaf write-back target (requires_grad leaves)
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // accumulates into parents' grad
  const char* op = "leaf";

  std::size_t size() const { return value.size(); }
  void accumulate(const std::vector<double>& g);
  double* grad_slot();  // ensure allocated, return data
};

using NodePtr = std::shared_ptr<Node>;

// Lightweight value-semantics handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  const std::vector<double>& values() const { return n_->value; }
  double scalar() const;
  std::size_t size() const { return n_->value.size(); }
  const NodePtr& node() const { return n_; }

 private:
  NodePtr n_;
};

// ------------------------------------------------------------------
// Leaves
// ------------------------------------------------------------------
Var leaf(Tensor& t);                 // grads flow back into t.grad when t.requires_grad
Var constant(const Tensor& t);       // copy, never differentiated
Var constant(Shape shape, std::vector<double> values);
Var scalar_const(double v);

// ------------------------------------------------------------------
// Primitives
// ------------------------------------------------------------------
Var matmul(const Var& a, const Var& b);            // (m,k)x(k,n) -> (m,n)
Var transpose(const Var& a);                       // (m,n) -> (n,m)
Var add(const Var& a, const Var& b);               // same shape
Var scalar_mul(const Var& a, double c);
Var add_row_broadcast(const Var& x, const Var& row);  // row added to each row of x
Var layer_norm(const Var& x, const Var& gain, const Var& bias);  // per row, eps 1e-12
Var softmax_rows(const Var& x);                    // 1-D treated as a single row
Var gelu(const Var& x);                            // exact erf form
Var concat_rows(const std::vector<Var>& parts);    // token-axis concatenation
Var slice_rows(const Var& x, std::size_t row_begin, std::size_t row_end);
Var mean_all(const Var& x);
Var sum_all(const Var& x);
Var dot(const Var& a, const Var& b);
Var cosine_similarity(const Var& a, const Var& b);  // clamped to [-1, 1]
Var cross_entropy(const Var& logits, std::size_t label);  // 1-D logits
// Mean cross-entropy over a batch of logit rows with the softmax restricted
// to `allowed` class columns; gradients outside `allowed` are exactly zero.
Var masked_cross_entropy_mean(const Var& logits, const std::vector<std::size_t>& labels,
                              const std::vector<std::size_t>& allowed);
Var detach(const Var& x);  // stop-gradient

// ------------------------------------------------------------------
// Batched sequence primitives. A batch of `batch` token sequences of length
// `seq` is stored as one (batch*seq, dim) matrix with per-sample contiguous
// row blocks.
// ------------------------------------------------------------------
// Prepend the same token block (tokens: (p, dim)) to every sample.
Var concat_front_per_sample(const Var& x, const Var& tokens, std::size_t batch, std::size_t seq);
// Drop the first `count` tokens of every sample.
Var drop_front_per_sample(const Var& x, std::size_t count, std::size_t batch, std::size_t seq);
// Gather token 0 of every sample -> (batch, dim).
Var take_row0_per_sample(const Var& x, std::size_t batch, std::size_t seq);
// Add the same (seq, dim) block to every sample (positional embeddings).
Var add_block_broadcast(const Var& x, const Var& block, std::size_t batch);
// Fused multi-head self-attention over q/k/v of shape (batch*seq, dim):
// per sample and head, softmax(Q Kt / sqrt(head_dim)) V, heads concatenated.
Var self_attention(const Var& q, const Var& k, const Var& v, std::size_t batch, std::size_t seq,
                   std::size_t heads);

// ------------------------------------------------------------------
// Reverse pass. `output` must be scalar. Accumulates into the grad buffer
// of every requires_grad Tensor bound by leaf(); callers zero grads first.
// ------------------------------------------------------------------
void backward(const Var& output);

}  // namespace mqmk::num
