#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "amber/tensor.hpp"

namespace amber {

using NodeId = std::int32_t;

template <typename T>
class Tape;

// Row-major boolean matrix; entry (r, c) says whether query r may attend key c.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allow;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, bool fill = false) : rows(r), cols(c), allow(r * c, fill ? 1 : 0) {}

  bool operator()(std::size_t r, std::size_t c) const { return allow[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool value) { allow[r * cols + c] = value ? 1 : 0; }
  std::span<const std::uint8_t> row(std::size_t r) const { return {allow.data() + r * cols, cols}; }
  bool operator==(const Mask&) const = default;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

// Handle to a node recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  NodeId id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Tensor<T>& grad() const { return tape->grad(id); }
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, NodeId)>;

  Var<T> constant(Tensor<T> value);
  // Differentiable leaf; its gradient stays on the tape.
  Var<T> input(Tensor<T> value);
  // Leaf bound to a parameter; backward() accumulates into parameter.grad.
  Var<T> parameter(Parameter<T>& parameter);
  Var<T> record(Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward);

  const Tensor<T>& value(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  const Tensor<T>& grad(NodeId id) const;
  bool has_grad(NodeId id) const { return !nodes_.at(static_cast<std::size_t>(id)).grad.data.empty(); }
  bool requires_grad(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).inputs; }

  // Zero-initialised on first use. Backward rules accumulate into this.
  Tensor<T>& grad_buffer(NodeId id);

  void backward(Var<T> loss);
  void reset();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    Parameter<T>* parameter = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// Row-wise softmax over allowed entries only; disallowed entries are exactly 0.
template <typename T>
void masked_softmax_row(std::span<const T> logits, std::span<const std::uint8_t> allow, std::span<T> out);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// a * b^T
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> add_scalar(Var<T> a, T offset);
// Adds a length-cols vector to every row.
template <typename T> Var<T> add_row(Var<T> a, Var<T> bias);
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps);
template <typename T> Var<T> masked_softmax(Var<T> logits, const Mask& mask);
// Mean of -log softmax(row)[target] over rows.
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const int> targets);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> dot(Var<T> a, Var<T> b);
template <typename T> Var<T> gather_rows(Var<T> table, std::span<const int> rows);
template <typename T> Var<T> mean_rows(Var<T> a, std::span<const std::size_t> rows);
template <typename T> Var<T> slice(Var<T> a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
// Divides each row by its sum. Rows must have positive mass.
template <typename T> Var<T> row_normalize(Var<T> a);
template <typename T> Var<T> dropout(Var<T> a, T rate, std::mt19937_64& rng);

// Packed multi-sequence attention. Sequences are stacked row-wise in one
// matrix; attention is computed independently inside each sequence.
struct PackedLayout {
  std::size_t heads = 1;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;
  std::vector<Mask> masks;
  std::vector<std::size_t> prob_offsets;
  std::size_t total_rows = 0;
  std::size_t total_probs = 0;

  static std::shared_ptr<const PackedLayout> build(std::vector<std::size_t> lengths, std::vector<Mask> masks,
                                                   std::size_t heads);
  // Offset of the (head, row, col) entry of sequence seq in the packed probabilities.
  std::size_t prob_index(std::size_t seq, std::size_t head, std::size_t r, std::size_t c) const {
    const std::size_t n = lengths[seq];
    return prob_offsets[seq] + (head * n + r) * n + c;
  }
};

// Post-softmax attention weights of every sequence and head, flattened.
template <typename T>
Var<T> attention_probs(Var<T> queries, Var<T> keys, std::shared_ptr<const PackedLayout> layout, T score_scale);
template <typename T>
Var<T> attention_mix(Var<T> probs, Var<T> values, std::shared_ptr<const PackedLayout> layout);
// Sub-block [r0, r1) x [c0, c1) of one head's attention matrix.
template <typename T>
Var<T> attention_block(Var<T> probs, std::shared_ptr<const PackedLayout> layout, std::size_t seq, std::size_t head,
                       std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);

}  // namespace amber
