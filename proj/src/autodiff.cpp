#include "amber/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace amber {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMat<T>> cmap(const Tensor<T>& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

template <typename T>
Eigen::Map<RowMat<T>> mmap(Tensor<T>& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape == nullptr || a.tape != b.tape) fail(ErrorKind::kUsage, "operands recorded on different tapes");
  return *a.tape;
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() > 2) fail(ErrorKind::kDimension, std::string(op) + ": expected a matrix, got " + shape_string(t.shape));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.size() != b.size() || a.rows() != b.rows()) {
    fail(ErrorKind::kDimension,
         std::string(op) + ": shape mismatch " + shape_string(a.shape) + " vs " + shape_string(b.shape));
  }
}

Shape matrix_shape(std::size_t rows, std::size_t cols) { return Shape{rows, cols}; }

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, false});
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::input(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, true});
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& parameter) {
  nodes_.push_back(Node{parameter.value, {}, {}, {}, &parameter, true});
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward) {
  bool needs = false;
  for (NodeId id : inputs) {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) fail(ErrorKind::kUsage, "input node out of range");
    needs = needs || nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, std::move(inputs), needs ? std::move(backward) : BackwardFn{}, nullptr,
                        needs});
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename T>
const Tensor<T>& Tape<T>::grad(NodeId id) const {
  const Node& node = nodes_.at(static_cast<std::size_t>(id));
  if (node.grad.data.empty() && !node.value.data.empty()) {
    fail(ErrorKind::kUsage, "node " + std::to_string(id) + " has no gradient");
  }
  return node.grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(NodeId id) {
  Node& node = nodes_.at(static_cast<std::size_t>(id));
  if (node.grad.data.size() != node.value.data.size()) node.grad = Tensor<T>(node.value.shape);
  return node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) fail(ErrorKind::kUsage, "loss belongs to another tape");
  if (backward_done_) fail(ErrorKind::kUsage, "backward already ran on this tape; reset it first");
  const Tensor<T>& lv = value(loss.id);
  if (lv.size() != 1) fail(ErrorKind::kShape, "backward needs a scalar loss, got " + shape_string(lv.shape));
  backward_done_ = true;
  grad_buffer(loss.id).data[0] = T(1);
  for (NodeId id = loss.id; id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad || node.grad.data.empty()) continue;
    if (node.backward) node.backward(*this, id);
    if (node.parameter != nullptr) {
      auto& dst = node.parameter->grad;
      if (dst.data.size() != node.grad.data.size()) dst = Tensor<T>(node.value.shape);
      for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += node.grad.data[i];
    }
  }
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Kernels

template <typename T>
void masked_softmax_row(std::span<const T> logits, std::span<const std::uint8_t> allow, std::span<T> out) {
  T peak = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (allow[j]) {
      peak = std::max(peak, logits[j]);
      any = true;
    }
  }
  if (!any) fail(ErrorKind::kMask, "masked_softmax: every position is disallowed");
  T total = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = allow[j] ? std::exp(logits[j] - peak) : T(0);
    total += out[j];
  }
  for (std::size_t j = 0; j < logits.size(); ++j) out[j] /= total;
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    fail(ErrorKind::kDimension,
         "matmul: inner dimensions differ for " + shape_string(av.shape) + " x " + shape_string(bv.shape));
  }
  Tensor<T> out(matrix_shape(av.rows(), bv.cols()));
  mmap(out).noalias() = cmap(av) * cmap(bv);
  const NodeId ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    auto g = cmap(t.grad(self));
    if (t.requires_grad(ia)) mmap(t.grad_buffer(ia)).noalias() += g * cmap(t.value(ib)).transpose();
    if (t.requires_grad(ib)) mmap(t.grad_buffer(ib)).noalias() += cmap(t.value(ia)).transpose() * g;
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  if (av.cols() != bv.cols()) {
    fail(ErrorKind::kDimension,
         "matmul_nt: inner dimensions differ for " + shape_string(av.shape) + " x " + shape_string(bv.shape) + "^T");
  }
  Tensor<T> out(matrix_shape(av.rows(), bv.rows()));
  mmap(out).noalias() = cmap(av) * cmap(bv).transpose();
  const NodeId ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    auto g = cmap(t.grad(self));
    if (t.requires_grad(ia)) mmap(t.grad_buffer(ia)).noalias() += g * cmap(t.value(ib));
    if (t.requires_grad(ib)) mmap(t.grad_buffer(ib)).noalias() += g.transpose() * cmap(t.value(ia));
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const Tensor<T>& av = a.value();
  require_matrix(av, "transpose");
  Tensor<T> out(matrix_shape(av.cols(), av.rows()));
  mmap(out) = cmap(av).transpose();
  const NodeId ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape<T>& t, NodeId self) {
    mmap(t.grad_buffer(ia)) += cmap(t.grad(self)).transpose();
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  const NodeId ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).data;
    for (NodeId in : {ia, ib}) {
      if (!t.requires_grad(in)) continue;
      auto& d = t.grad_buffer(in).data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv[i];
  const NodeId ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).data;
    if (t.requires_grad(ia)) {
      auto& d = t.grad_buffer(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& d = t.grad_buffer(ib).data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
  const NodeId ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).data;
    if (t.requires_grad(ia)) {
      auto& d = t.grad_buffer(ia).data;
      const auto& other = t.value(ib).data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
    if (t.requires_grad(ib)) {
      auto& d = t.grad_buffer(ib).data;
      const auto& other = t.value(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= factor;
  const NodeId ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, factor](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).data;
    auto& d = t.grad_buffer(ia).data;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += factor * g[i];
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v += offset;
  const NodeId ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).data;
    auto& d = t.grad_buffer(ia).data;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias) {
  Tape<T>& tape = same_tape(a, bias);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = bias.value();
  require_matrix(av, "add_row");
  if (bv.size() != av.cols()) {
    fail(ErrorKind::kDimension, "add_row: bias " + shape_string(bv.shape) + " does not match " + shape_string(av.shape));
  }
  Tensor<T> out = av;
  mmap(out).rowwise() += cmap(bv).row(0);
  const NodeId ia = a.id, ib = bias.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    auto g = cmap(t.grad(self));
    if (t.requires_grad(ia)) mmap(t.grad_buffer(ia)) += g;
    if (t.requires_grad(ib)) mmap(t.grad_buffer(ib)).row(0) += g.colwise().sum();
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.value();
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (auto& v : out.data) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  const NodeId ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, inv_sqrt2](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).data;
    const auto& x = t.value(ia).data;
    auto& d = t.grad_buffer(ia).data;
    const T inv_sqrt_2pi = T(0.3989422804014327);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
      d[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  Tape<T>& tape = same_tape(x, gain);
  same_tape(x, bias);
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    fail(ErrorKind::kDimension, "layer_norm: gain/bias do not match width " + std::to_string(d));
  }
  if (!(eps > T(0))) fail(ErrorKind::kInput, "layer_norm: eps must be positive");
  Tensor<T> out(xv.shape);
  // Saved normalised input and inverse std per row for the backward rule.
  auto normed = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(n);
  const auto& g = gain.value().data;
  const auto& b = bias.value().data;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.row(r);
    T mean = 0;
    for (T v : row) mean += v;
    mean /= static_cast<T>(d);
    T var = 0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mean) * is;
      (*normed)[r * d + c] = h;
      out(r, c) = h * g[c] + b[c];
    }
  }
  const NodeId ix = x.id, ig = gain.id, ib = bias.id;
  return tape.record(std::move(out), {ix, ig, ib}, [ix, ig, ib, normed, inv_std, n, d](Tape<T>& t, NodeId self) {
    const auto& gy = t.grad(self).data;
    const auto& gv = t.value(ig).data;
    if (t.requires_grad(ig)) {
      auto& dg = t.grad_buffer(ig).data;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) dg[c] += gy[r * d + c] * (*normed)[r * d + c];
    }
    if (t.requires_grad(ib)) {
      auto& db = t.grad_buffer(ib).data;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) db[c] += gy[r * d + c];
    }
    if (t.requires_grad(ix)) {
      auto& dx = t.grad_buffer(ix).data;
      for (std::size_t r = 0; r < n; ++r) {
        T mean_dh = 0, mean_dh_h = 0;
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = gy[r * d + c] * gv[c];
          mean_dh += dh;
          mean_dh_h += dh * (*normed)[r * d + c];
        }
        mean_dh /= static_cast<T>(d);
        mean_dh_h /= static_cast<T>(d);
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = gy[r * d + c] * gv[c];
          dx[r * d + c] += (*inv_std)[r] * (dh - mean_dh - (*normed)[r * d + c] * mean_dh_h);
        }
      }
    }
  });
}

template <typename T>
Var<T> masked_softmax(Var<T> logits, const Mask& mask) {
  const Tensor<T>& lv = logits.value();
  require_matrix(lv, "masked_softmax");
  if (mask.rows != lv.rows() || mask.cols != lv.cols()) {
    fail(ErrorKind::kDimension, "masked_softmax: mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                                    " does not match logits " + shape_string(lv.shape));
  }
  Tensor<T> out(lv.shape);
  for (std::size_t r = 0; r < lv.rows(); ++r) masked_softmax_row<T>(lv.row(r), mask.row(r), out.row(r));
  const NodeId il = logits.id;
  return logits.tape->record(std::move(out), {il}, [il](Tape<T>& t, NodeId self) {
    const Tensor<T>& p = t.value(self);
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& d = t.grad_buffer(il);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      auto pr = p.row(r);
      auto gr = g.row(r);
      auto dr = d.row(r);
      T inner = 0;
      for (std::size_t c = 0; c < pr.size(); ++c) inner += pr[c] * gr[c];
      for (std::size_t c = 0; c < pr.size(); ++c) dr[c] += pr[c] * (gr[c] - inner);
    }
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
  const Tensor<T>& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  const std::size_t n = lv.rows(), v = lv.cols();
  if (targets.size() != n) {
    fail(ErrorKind::kDimension, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                    std::to_string(n) + " rows");
  }
  auto probs = std::make_shared<Tensor<T>>(lv.shape);
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int target = targets[r];
    if (target < 0 || static_cast<std::size_t>(target) >= v) {
      fail(ErrorKind::kIndex, "cross_entropy: target " + std::to_string(target) + " outside [0, " +
                                  std::to_string(v) + ")");
    }
    auto row = lv.row(r);
    const T peak = *std::max_element(row.begin(), row.end());
    T z = 0;
    for (T x : row) z += std::exp(x - peak);
    const T lse = peak + std::log(z);
    total += lse - row[static_cast<std::size_t>(target)];
    auto pr = probs->row(r);
    for (std::size_t c = 0; c < v; ++c) pr[c] = std::exp(row[c] - lse);
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  const NodeId il = logits.id;
  return logits.tape->record(Tensor<T>::scalar(total / static_cast<T>(n)), {il},
                             [il, probs, tgt = std::move(tgt)](Tape<T>& t, NodeId self) {
                               const T g = t.grad(self).data[0] / static_cast<T>(tgt.size());
                               Tensor<T>& d = t.grad_buffer(il);
                               for (std::size_t r = 0; r < tgt.size(); ++r) {
                                 auto pr = probs->row(r);
                                 auto dr = d.row(r);
                                 for (std::size_t c = 0; c < pr.size(); ++c) dr[c] += g * pr[c];
                                 dr[static_cast<std::size_t>(tgt[r])] -= g;
                               }
                             });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (T v : a.value().data) total += v;
  const NodeId ia = a.id;
  return a.tape->record(Tensor<T>::scalar(total), {ia}, [ia](Tape<T>& t, NodeId self) {
    const T g = t.grad(self).data[0];
    for (auto& d : t.grad_buffer(ia).data) d += g;
  });
}

template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b);
  if (a.value().size() != b.value().size()) {
    fail(ErrorKind::kDimension,
         "dot: size mismatch " + shape_string(a.value().shape) + " vs " + shape_string(b.value().shape));
  }
  T total = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) total += a.value().data[i] * b.value().data[i];
  const NodeId ia = a.id, ib = b.id;
  return tape.record(Tensor<T>::scalar(total), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    const T g = t.grad(self).data[0];
    if (t.requires_grad(ia)) {
      auto& d = t.grad_buffer(ia).data;
      const auto& o = t.value(ib).data;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * o[i];
    }
    if (t.requires_grad(ib)) {
      auto& d = t.grad_buffer(ib).data;
      const auto& o = t.value(ia).data;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * o[i];
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const int> rows) {
  const Tensor<T>& tv = table.value();
  require_matrix(tv, "gather_rows");
  const std::size_t d = tv.cols();
  Tensor<T> out(matrix_shape(rows.size(), d));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= tv.rows()) {
      fail(ErrorKind::kIndex, "gather_rows: row " + std::to_string(rows[r]) + " outside table of " +
                                  std::to_string(tv.rows()));
    }
    auto src = tv.row(static_cast<std::size_t>(rows[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  std::vector<int> idx(rows.begin(), rows.end());
  const NodeId it = table.id;
  return table.tape->record(std::move(out), {it}, [it, idx = std::move(idx)](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& d = t.grad_buffer(it);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto gr = g.row(r);
      auto dr = d.row(static_cast<std::size_t>(idx[r]));
      for (std::size_t c = 0; c < gr.size(); ++c) dr[c] += gr[c];
    }
  });
}

template <typename T>
Var<T> mean_rows(Var<T> a, std::span<const std::size_t> rows) {
  const Tensor<T>& av = a.value();
  require_matrix(av, "mean_rows");
  if (rows.empty()) fail(ErrorKind::kInput, "mean_rows: empty row set");
  const std::size_t d = av.cols();
  Tensor<T> out(matrix_shape(1, d));
  for (std::size_t r : rows) {
    if (r >= av.rows()) fail(ErrorKind::kIndex, "mean_rows: row " + std::to_string(r) + " out of range");
    auto src = av.row(r);
    for (std::size_t c = 0; c < d; ++c) out.data[c] += src[c];
  }
  const T inv = T(1) / static_cast<T>(rows.size());
  for (auto& v : out.data) v *= inv;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const NodeId ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, inv, idx = std::move(idx)](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).data;
    Tensor<T>& d = t.grad_buffer(ia);
    for (std::size_t r : idx) {
      auto dr = d.row(r);
      for (std::size_t c = 0; c < dr.size(); ++c) dr[c] += inv * g[c];
    }
  });
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  const Tensor<T>& av = a.value();
  require_matrix(av, "slice");
  if (r0 > r1 || c0 > c1 || r1 > av.rows() || c1 > av.cols()) {
    fail(ErrorKind::kIndex, "slice: range outside " + shape_string(av.shape));
  }
  Tensor<T> out(matrix_shape(r1 - r0, c1 - c0));
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) out(r - r0, c - c0) = av(r, c);
  const NodeId ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, r0, r1, c0, c1](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& d = t.grad_buffer(ia);
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) d(r, c) += g(r - r0, c - c0);
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) fail(ErrorKind::kInput, "concat_rows: nothing to concatenate");
  Tape<T>* tape = parts.front().tape;
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  std::vector<NodeId> ids;
  for (const auto& p : parts) {
    if (p.tape != tape) fail(ErrorKind::kUsage, "concat_rows: parts on different tapes");
    if (p.cols() != d) fail(ErrorKind::kDimension, "concat_rows: width mismatch");
    total += p.rows();
    ids.push_back(p.id);
  }
  Tensor<T> out(matrix_shape(total, d));
  std::size_t at = 0;
  for (const auto& p : parts) {
    const auto& src = p.value().data;
    std::copy(src.begin(), src.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at * d));
    at += p.rows();
  }
  return tape->record(std::move(out), ids, [ids](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).data;
    std::size_t at = 0;
    for (NodeId id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        auto& dd = t.grad_buffer(id).data;
        for (std::size_t i = 0; i < n; ++i) dd[i] += g[at + i];
      }
      at += n;
    }
  });
}

template <typename T>
Var<T> row_normalize(Var<T> a) {
  const Tensor<T>& av = a.value();
  require_matrix(av, "row_normalize");
  Tensor<T> out = av;
  auto sums = std::make_shared<std::vector<T>>(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    T s = 0;
    for (T v : av.row(r)) s += v;
    if (!(s > T(0))) fail(ErrorKind::kInput, "row_normalize: row " + std::to_string(r) + " has no mass");
    (*sums)[r] = s;
    for (auto& v : out.row(r)) v /= s;
  }
  const NodeId ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, sums](Tape<T>& t, NodeId self) {
    const Tensor<T>& y = t.value(self);
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& d = t.grad_buffer(ia);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      T inner = 0;
      for (std::size_t c = 0; c < y.cols(); ++c) inner += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) d(r, c) += (g(r, c) - inner) / (*sums)[r];
    }
  });
}

template <typename T>
Var<T> dropout(Var<T> a, T rate, std::mt19937_64& rng) {
  if (rate <= T(0)) return a;
  if (rate >= T(1)) fail(ErrorKind::kConfig, "dropout rate must be below 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  auto gate = std::make_shared<std::vector<T>>(a.value().size());
  const T inv = T(1) / (T(1) - rate);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*gate)[i] = keep(rng) ? inv : T(0);
    out.data[i] *= (*gate)[i];
  }
  const NodeId ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, gate](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).data;
    auto& d = t.grad_buffer(ia).data;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (*gate)[i];
  });
}

// ---------------------------------------------------------------------------
// Packed attention

std::shared_ptr<const PackedLayout> PackedLayout::build(std::vector<std::size_t> lengths, std::vector<Mask> masks,
                                                        std::size_t heads) {
  if (lengths.size() != masks.size()) fail(ErrorKind::kDimension, "attention layout: one mask per sequence required");
  if (heads == 0) fail(ErrorKind::kConfig, "attention layout: zero heads");
  auto layout = std::make_shared<PackedLayout>();
  layout->heads = heads;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    const std::size_t n = lengths[s];
    const Mask& m = masks[s];
    if (n == 0) fail(ErrorKind::kInput, "attention layout: empty sequence");
    if (m.rows != n || m.cols != n) {
      fail(ErrorKind::kDimension, "attention layout: mask of sequence " + std::to_string(s) + " is not " +
                                      std::to_string(n) + "x" + std::to_string(n));
    }
    for (std::size_t r = 0; r < n; ++r) {
      auto row = m.row(r);
      if (std::none_of(row.begin(), row.end(), [](std::uint8_t v) { return v != 0; })) {
        fail(ErrorKind::kMask, "attention mask row " + std::to_string(r) + " of sequence " + std::to_string(s) +
                                   " allows no column");
      }
    }
    layout->offsets.push_back(layout->total_rows);
    layout->prob_offsets.push_back(layout->total_probs);
    layout->total_rows += n;
    layout->total_probs += heads * n * n;
  }
  layout->lengths = std::move(lengths);
  layout->masks = std::move(masks);
  return layout;
}

template <typename T>
Var<T> attention_probs(Var<T> queries, Var<T> keys, std::shared_ptr<const PackedLayout> layout, T score_scale) {
  Tape<T>& tape = same_tape(queries, keys);
  const Tensor<T>& q = queries.value();
  const Tensor<T>& k = keys.value();
  require_same_shape(q, k, "attention_probs");
  const PackedLayout& lay = *layout;
  if (q.rows() != lay.total_rows || q.cols() % lay.heads != 0) {
    fail(ErrorKind::kDimension, "attention_probs: queries " + shape_string(q.shape) + " do not fit the layout");
  }
  const std::size_t width = q.cols(), dh = width / lay.heads;
  Tensor<T> out(Shape{lay.total_probs});
  std::vector<T> scores;
  for (std::size_t s = 0; s < lay.lengths.size(); ++s) {
    const std::size_t n = lay.lengths[s], off = lay.offsets[s];
    scores.assign(n, T(0));
    for (std::size_t h = 0; h < lay.heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = &q.data[(off + i) * width + h * dh];
        auto allow = lay.masks[s].row(i);
        for (std::size_t j = 0; j < n; ++j) {
          if (!allow[j]) {
            scores[j] = T(0);
            continue;
          }
          const T* kj = &k.data[(off + j) * width + h * dh];
          T acc = 0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          scores[j] = acc * score_scale;
        }
        masked_softmax_row<T>(scores, allow, std::span<T>(&out.data[lay.prob_index(s, h, i, 0)], n));
      }
    }
  }
  const NodeId iq = queries.id, ik = keys.id;
  return tape.record(std::move(out), {iq, ik}, [iq, ik, layout, score_scale](Tape<T>& t, NodeId self) {
    const PackedLayout& lay = *layout;
    const auto& p = t.value(self).data;
    const auto& gp = t.grad(self).data;
    const Tensor<T>& q = t.value(iq);
    const Tensor<T>& k = t.value(ik);
    const std::size_t width = q.cols(), dh = width / lay.heads;
    Tensor<T>* dq = t.requires_grad(iq) ? &t.grad_buffer(iq) : nullptr;
    Tensor<T>* dk = t.requires_grad(ik) ? &t.grad_buffer(ik) : nullptr;
    std::vector<T> ds;
    for (std::size_t s = 0; s < lay.lengths.size(); ++s) {
      const std::size_t n = lay.lengths[s], off = lay.offsets[s];
      ds.assign(n, T(0));
      for (std::size_t h = 0; h < lay.heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t base = lay.prob_index(s, h, i, 0);
          T inner = 0;
          for (std::size_t j = 0; j < n; ++j) inner += p[base + j] * gp[base + j];
          for (std::size_t j = 0; j < n; ++j) ds[j] = p[base + j] * (gp[base + j] - inner) * score_scale;
          const T* qi = &q.data[(off + i) * width + h * dh];
          for (std::size_t j = 0; j < n; ++j) {
            if (ds[j] == T(0)) continue;
            const T* kj = &k.data[(off + j) * width + h * dh];
            if (dq) {
              T* dqi = &dq->data[(off + i) * width + h * dh];
              for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds[j] * kj[c];
            }
            if (dk) {
              T* dkj = &dk->data[(off + j) * width + h * dh];
              for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds[j] * qi[c];
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> attention_mix(Var<T> probs, Var<T> values, std::shared_ptr<const PackedLayout> layout) {
  Tape<T>& tape = same_tape(probs, values);
  const PackedLayout& lay = *layout;
  const Tensor<T>& p = probs.value();
  const Tensor<T>& v = values.value();
  if (p.size() != lay.total_probs || v.rows() != lay.total_rows || v.cols() % lay.heads != 0) {
    fail(ErrorKind::kDimension, "attention_mix: operands do not fit the layout");
  }
  const std::size_t width = v.cols(), dh = width / lay.heads;
  Tensor<T> out(v.shape);
  for (std::size_t s = 0; s < lay.lengths.size(); ++s) {
    const std::size_t n = lay.lengths[s], off = lay.offsets[s];
    for (std::size_t h = 0; h < lay.heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        T* oi = &out.data[(off + i) * width + h * dh];
        const std::size_t base = lay.prob_index(s, h, i, 0);
        for (std::size_t j = 0; j < n; ++j) {
          const T w = p.data[base + j];
          if (w == T(0)) continue;
          const T* vj = &v.data[(off + j) * width + h * dh];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  const NodeId ip = probs.id, iv = values.id;
  return tape.record(std::move(out), {ip, iv}, [ip, iv, layout](Tape<T>& t, NodeId self) {
    const PackedLayout& lay = *layout;
    const Tensor<T>& g = t.grad(self);
    const auto& p = t.value(ip).data;
    const Tensor<T>& v = t.value(iv);
    const std::size_t width = v.cols(), dh = width / lay.heads;
    Tensor<T>* dp = t.requires_grad(ip) ? &t.grad_buffer(ip) : nullptr;
    Tensor<T>* dv = t.requires_grad(iv) ? &t.grad_buffer(iv) : nullptr;
    for (std::size_t s = 0; s < lay.lengths.size(); ++s) {
      const std::size_t n = lay.lengths[s], off = lay.offsets[s];
      for (std::size_t h = 0; h < lay.heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
          const T* gi = &g.data[(off + i) * width + h * dh];
          const std::size_t base = lay.prob_index(s, h, i, 0);
          for (std::size_t j = 0; j < n; ++j) {
            const T* vj = &v.data[(off + j) * width + h * dh];
            if (dp) {
              T acc = 0;
              for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
              dp->data[base + j] += acc;
            }
            const T w = p[base + j];
            if (dv && w != T(0)) {
              T* dvj = &dv->data[(off + j) * width + h * dh];
              for (std::size_t c = 0; c < dh; ++c) dvj[c] += w * gi[c];
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> attention_block(Var<T> probs, std::shared_ptr<const PackedLayout> layout, std::size_t seq, std::size_t head,
                       std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  const PackedLayout& lay = *layout;
  if (seq >= lay.lengths.size() || head >= lay.heads) fail(ErrorKind::kIndex, "attention_block: no such sequence/head");
  const std::size_t n = lay.lengths[seq];
  if (r0 > r1 || c0 > c1 || r1 > n || c1 > n) fail(ErrorKind::kIndex, "attention_block: range outside sequence");
  const auto& p = probs.value().data;
  Tensor<T> out(matrix_shape(r1 - r0, c1 - c0));
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) out(r - r0, c - c0) = p[lay.prob_index(seq, head, r, c)];
  const NodeId ip = probs.id;
  return probs.tape->record(std::move(out), {ip}, [ip, layout, seq, head, r0, r1, c0, c1](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    auto& d = t.grad_buffer(ip).data;
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) d[layout->prob_index(seq, head, r, c)] += g(r - r0, c - c0);
  });
}

// ---------------------------------------------------------------------------

#define AMBER_INSTANTIATE(T)                                                                                     \
  template class Tape<T>;                                                                                        \
  template void masked_softmax_row<T>(std::span<const T>, std::span<const std::uint8_t>, std::span<T>);         \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                                     \
  template Var<T> matmul_nt<T>(Var<T>, Var<T>);                                                                  \
  template Var<T> transpose<T>(Var<T>);                                                                          \
  template Var<T> add<T>(Var<T>, Var<T>);                                                                        \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                                        \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                                        \
  template Var<T> scale<T>(Var<T>, T);                                                                           \
  template Var<T> add_scalar<T>(Var<T>, T);                                                                      \
  template Var<T> add_row<T>(Var<T>, Var<T>);                                                                    \
  template Var<T> gelu<T>(Var<T>);                                                                               \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                                      \
  template Var<T> masked_softmax<T>(Var<T>, const Mask&);                                                        \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const int>);                                                \
  template Var<T> sum<T>(Var<T>);                                                                                \
  template Var<T> dot<T>(Var<T>, Var<T>);                                                                        \
  template Var<T> gather_rows<T>(Var<T>, std::span<const int>);                                                  \
  template Var<T> mean_rows<T>(Var<T>, std::span<const std::size_t>);                                            \
  template Var<T> slice<T>(Var<T>, std::size_t, std::size_t, std::size_t, std::size_t);                          \
  template Var<T> concat_rows<T>(std::span<const Var<T>>);                                                       \
  template Var<T> row_normalize<T>(Var<T>);                                                                      \
  template Var<T> dropout<T>(Var<T>, T, std::mt19937_64&);                                                       \
  template Var<T> attention_probs<T>(Var<T>, Var<T>, std::shared_ptr<const PackedLayout>, T);                    \
  template Var<T> attention_mix<T>(Var<T>, Var<T>, std::shared_ptr<const PackedLayout>);                         \
  template Var<T> attention_block<T>(Var<T>, std::shared_ptr<const PackedLayout>, std::size_t, std::size_t,      \
                                     std::size_t, std::size_t, std::size_t, std::size_t);

AMBER_INSTANTIATE(float)
AMBER_INSTANTIATE(double)

#undef AMBER_INSTANTIATE

}  // namespace amber
