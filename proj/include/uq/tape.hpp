#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "uq/kernels.hpp"
#include "uq/tensor.hpp"

namespace uq {

class Tape;
using NodeId = std::int32_t;

namespace detail {
void backward_add(Tape&, NodeId);
void backward_scale(Tape&, NodeId);
void backward_matmul(Tape&, NodeId);
void backward_linear(Tape&, NodeId);
void backward_slice_cols(Tape&, NodeId);
void backward_pad_cols(Tape&, NodeId);
void backward_slice_rows(Tape&, NodeId);
void backward_embedding(Tape&, NodeId);
void backward_layer_norm(Tape&, NodeId);
void backward_gelu(Tape&, NodeId);
void backward_softmax(Tape&, NodeId);
void backward_cross_entropy(Tape&, NodeId);
void backward_sum_squares(Tape&, NodeId);

// tanh through exp; saturates cleanly for |x| large and costs one exp.
inline double fast_tanh(double x) { return 1.0 - 2.0 / (std::exp(2.0 * x) + 1.0); }
}  // namespace detail

/// Define-by-run reverse-mode tape. A fresh graph is recorded on every
/// forward pass; nodes are appended in topological order by construction,
/// so the backward sweep is a single reverse walk that visits each node
/// once. A tape is single-threaded; run independent tapes in parallel.
class Tape {
 public:
  struct Node {
    Tensor value;
    void (*backward)(Tape&, NodeId) = nullptr;
    NodeId parent[3] = {-1, -1, -1};
    std::int64_t aux0 = 0;
    std::int64_t aux1 = 0;
    double scalar = 0.0;
    bool needs_grad = false;
    Tensor saved;
    std::shared_ptr<const std::vector<std::int32_t>> ints;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Drops the recorded graph but keeps allocated capacity.
  void reset() {
    nodes_.clear();
    grads_.clear();
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  const Tensor& value(NodeId id) const { return nodes_[id].value; }

  /// Gradient of the last backward() loss w.r.t. this node. Zero tensor
  /// for nodes the loss never touched.
  Tensor grad(NodeId id) const {
    if (static_cast<std::size_t>(id) < grads_.size() && !grads_[id].empty()) {
      return grads_[id];
    }
    return Tensor::zeros(nodes_[id].value.shape());
  }

  /// Inserts an input node. Trainable leaves receive gradient; constants
  /// are skipped during the backward sweep.
  NodeId leaf(Tensor v, bool trainable = true) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = trainable;
    return push_(std::move(n));
  }

  NodeId constant(Tensor v) { return leaf(std::move(v), false); }

  /// Elementwise sum of two tensors with identical shape.
  NodeId add(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].value;
    const Tensor& tb = nodes_[b].value;
    if (!ta.same_shape(tb)) {
      throw std::invalid_argument("add: shape mismatch " + ta.shape_string() +
                                  " vs " + tb.shape_string());
    }
    Tensor out = Tensor::uninitialized(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) out[i] = ta[i] + tb[i];
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_add;
    n.parent[0] = a;
    n.parent[1] = b;
    return push_op_(std::move(n));
  }

  NodeId scale(NodeId a, double factor) {
    const Tensor& ta = nodes_[a].value;
    Tensor out = Tensor::uninitialized(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) out[i] = factor * ta[i];
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_scale;
    n.parent[0] = a;
    n.scalar = factor;
    return push_op_(std::move(n));
  }

  /// Standard matrix product a[m x k] * b[k x n].
  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].value;
    const Tensor& tb = nodes_[b].value;
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
      throw std::invalid_argument("matmul: incompatible shapes " +
                                  ta.shape_string() + " vs " + tb.shape_string());
    }
    const std::size_t m = ta.dim(0), k = ta.dim(1), nn = tb.dim(1);
    Tensor out = Tensor::uninitialized({m, nn});
    kernels::gemm_nn(ta.data(), tb.data(), out.data(), m, k, nn);
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_matmul;
    n.parent[0] = a;
    n.parent[1] = b;
    return push_op_(std::move(n));
  }

  /// Projection y = x * w^T with x[rows x in], w[out x in].
  /// Weight rows live in output-major order, the layout adapters use.
  NodeId linear(NodeId x, NodeId w) {
    const Tensor& tx = nodes_[x].value;
    const Tensor& tw = nodes_[w].value;
    if (tx.rank() != 2 || tw.rank() != 2 || tx.dim(1) != tw.dim(1)) {
      throw std::invalid_argument("linear: incompatible shapes " +
                                  tx.shape_string() + " vs " + tw.shape_string());
    }
    const std::size_t rows = tx.dim(0), in = tx.dim(1), out_dim = tw.dim(0);
    Tensor out = Tensor::uninitialized({rows, out_dim});
    kernels::gemm_nt(tx.data(), tw.data(), out.data(), rows, in, out_dim);
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_linear;
    n.parent[0] = x;
    n.parent[1] = w;
    return push_op_(std::move(n));
  }

  NodeId slice_cols(NodeId x, std::size_t first, std::size_t count) {
    const Tensor& tx = nodes_[x].value;
    const std::size_t rows = tx.dim(0), cols = tx.dim(1);
    if (first + count > cols) throw std::invalid_argument("slice_cols: out of range");
    Tensor out = Tensor::uninitialized({rows, count});
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = tx.data() + r * cols + first;
      double* dst = out.data() + r * count;
      for (std::size_t c = 0; c < count; ++c) dst[c] = src[c];
    }
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_slice_cols;
    n.parent[0] = x;
    n.aux0 = static_cast<std::int64_t>(first);
    return push_op_(std::move(n));
  }

  /// Embeds x's columns into a wider zero matrix starting at column
  /// `first`. Summing padded per-head blocks re-assembles a full width.
  NodeId pad_cols(NodeId x, std::size_t first, std::size_t total) {
    const Tensor& tx = nodes_[x].value;
    const std::size_t rows = tx.dim(0), cols = tx.dim(1);
    if (first + cols > total) throw std::invalid_argument("pad_cols: out of range");
    Tensor out({rows, total});
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = tx.data() + r * cols;
      double* dst = out.data() + r * total + first;
      for (std::size_t c = 0; c < cols; ++c) dst[c] = src[c];
    }
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_pad_cols;
    n.parent[0] = x;
    n.aux0 = static_cast<std::int64_t>(first);
    return push_op_(std::move(n));
  }

  NodeId slice_rows(NodeId x, std::size_t first, std::size_t count) {
    const Tensor& tx = nodes_[x].value;
    const std::size_t rows = tx.dim(0), cols = tx.dim(1);
    if (first + count > rows) throw std::invalid_argument("slice_rows: out of range");
    Tensor out = Tensor::uninitialized({count, cols});
    for (std::size_t r = 0; r < count; ++r) {
      const double* src = tx.data() + (first + r) * cols;
      double* dst = out.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] = src[c];
    }
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_slice_rows;
    n.parent[0] = x;
    n.aux0 = static_cast<std::int64_t>(first);
    return push_op_(std::move(n));
  }

  /// Gathers table rows by index: out[t, :] = table[ids[t], :].
  NodeId embedding(NodeId table, std::vector<std::int32_t> ids) {
    const Tensor& tt = nodes_[table].value;
    const std::size_t vocab = tt.dim(0), width = tt.dim(1);
    Tensor out = Tensor::uninitialized({ids.size(), width});
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const std::int32_t id = ids[t];
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw std::invalid_argument("embedding: index " + std::to_string(id) +
                                    " out of range [0," + std::to_string(vocab) + ")");
      }
      const double* src = tt.data() + static_cast<std::size_t>(id) * width;
      double* dst = out.data() + t * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] = src[c];
    }
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_embedding;
    n.parent[0] = table;
    n.ints = std::make_shared<const std::vector<std::int32_t>>(std::move(ids));
    return push_op_(std::move(n));
  }

  /// Normalizes each length-d slice to zero mean and unit variance, then
  /// applies the affine gain/bias.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5) {
    const Tensor& tx = nodes_[x].value;
    const std::size_t d = tx.shape().back();
    const std::size_t rows = tx.size() / d;
    const Tensor& tg = nodes_[gain].value;
    const Tensor& tb = nodes_[bias].value;
    if (tg.size() != d || tb.size() != d) {
      throw std::invalid_argument("layer_norm: gain/bias size must equal last dim");
    }
    Tensor out = Tensor::uninitialized(tx.shape());
    Tensor stats = Tensor::uninitialized({rows, 2});  // mean, 1 / sqrt(var + eps)
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = tx.data() + r * d;
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += xr[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = xr[j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      stats.at(r, 0) = mean;
      stats.at(r, 1) = inv;
      double* yr = out.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) {
        yr[j] = tg[j] * ((xr[j] - mean) * inv) + tb[j];
      }
    }
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_layer_norm;
    n.parent[0] = x;
    n.parent[1] = gain;
    n.parent[2] = bias;
    n.saved = std::move(stats);
    return push_op_(std::move(n));
  }

  /// GELU, tanh approximation.
  NodeId gelu(NodeId x) {
    const Tensor& tx = nodes_[x].value;
    Tensor out = Tensor::uninitialized(tx.shape());
    Tensor tanh_vals = Tensor::uninitialized(tx.shape());
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    constexpr double kCubic = 0.044715;
    for (std::size_t i = 0; i < tx.size(); ++i) {
      const double v = tx[i];
      const double t = detail::fast_tanh(kSqrt2OverPi * (v + kCubic * v * v * v));
      tanh_vals[i] = t;
      out[i] = 0.5 * v * (1.0 + t);
    }
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_gelu;
    n.parent[0] = x;
    n.saved = std::move(tanh_vals);
    return push_op_(std::move(n));
  }

  /// Softmax over the last axis, computed with max subtraction.
  NodeId softmax(NodeId x) {
    const Tensor& tx = nodes_[x].value;
    const std::size_t d = tx.shape().back();
    const std::size_t rows = tx.size() / d;
    Tensor out = Tensor::uninitialized(tx.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      softmax_row_(tx.data() + r * d, out.data() + r * d, d);
    }
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_softmax;
    n.parent[0] = x;
    return push_op_(std::move(n));
  }

  /// Softmax over a square score matrix where row i only attends to
  /// columns j <= i; entries above the diagonal come out exactly zero.
  NodeId causal_softmax(NodeId scores) {
    const Tensor& ts = nodes_[scores].value;
    if (ts.rank() != 2 || ts.dim(0) != ts.dim(1)) {
      throw std::invalid_argument("causal_softmax: square matrix required, got " +
                                  ts.shape_string());
    }
    const std::size_t t = ts.dim(0);
    Tensor out = Tensor::uninitialized({t, t});
    for (std::size_t i = 0; i < t; ++i) {
      softmax_row_(ts.data() + i * t, out.data() + i * t, i + 1);
      double* yr = out.data() + i * t;
      for (std::size_t j = i + 1; j < t; ++j) yr[j] = 0.0;
    }
    Node n;
    n.value = std::move(out);
    n.backward = &detail::backward_softmax;
    n.parent[0] = scores;
    return push_op_(std::move(n));
  }

  /// Mean of -log softmax(logits[t])[targets[t]] over the positions where
  /// mask is true; everything else carries no loss and no gradient.
  NodeId masked_cross_entropy(NodeId logits, const std::vector<std::int32_t>& targets,
                              const std::vector<bool>& mask) {
    const Tensor& tl = nodes_[logits].value;
    const std::size_t t_len = tl.dim(0), vocab = tl.dim(1);
    if (targets.size() != t_len || mask.size() != t_len) {
      throw std::invalid_argument("masked_cross_entropy: targets/mask length " +
                                  std::to_string(targets.size()) + "/" +
                                  std::to_string(mask.size()) +
                                  " does not match logits rows " + std::to_string(t_len));
    }
    std::vector<std::int32_t> active(t_len, -1);
    std::int64_t n_active = 0;
    for (std::size_t t = 0; t < t_len; ++t) {
      if (!mask[t]) continue;
      if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
        throw std::invalid_argument("masked_cross_entropy: target " +
                                    std::to_string(targets[t]) + " out of vocab " +
                                    std::to_string(vocab));
      }
      active[t] = targets[t];
      ++n_active;
    }
    if (n_active == 0) {
      throw std::invalid_argument("masked_cross_entropy: mask selects no positions");
    }
    // Filled only for active rows; inactive rows are never read back.
    Tensor probs = Tensor::uninitialized({t_len, vocab});
    double total = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      if (active[t] < 0) continue;
      const double* xr = tl.data() + t * vocab;
      double* pr = probs.data() + t * vocab;
      double mx = xr[0];
      for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, xr[v]);
      double sum = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) {
        pr[v] = std::exp(xr[v] - mx);
        sum += pr[v];
      }
      const double inv = 1.0 / sum;
      for (std::size_t v = 0; v < vocab; ++v) pr[v] *= inv;
      total += (mx + std::log(sum)) - xr[active[t]];
    }
    Node n;
    n.value = Tensor::scalar(total / static_cast<double>(n_active));
    n.backward = &detail::backward_cross_entropy;
    n.parent[0] = logits;
    n.aux0 = n_active;
    n.saved = std::move(probs);
    n.ints = std::make_shared<const std::vector<std::int32_t>>(std::move(active));
    return push_op_(std::move(n));
  }

  /// Sum of squared entries (squared Frobenius norm), as a scalar node.
  NodeId sum_squares(NodeId x) {
    const Tensor& tx = nodes_[x].value;
    double s = 0.0;
    for (std::size_t i = 0; i < tx.size(); ++i) s += tx[i] * tx[i];
    Node n;
    n.value = Tensor::scalar(s);
    n.backward = &detail::backward_sum_squares;
    n.parent[0] = x;
    return push_op_(std::move(n));
  }

  /// Reverse sweep from a scalar loss node. Each reachable node is
  /// visited exactly once, in reverse recording order.
  void backward(NodeId loss) {
    if (nodes_[loss].value.size() != 1) {
      throw std::invalid_argument("backward: loss node must be scalar, got " +
                                  nodes_[loss].value.shape_string());
    }
    grads_.assign(nodes_.size(), Tensor());
    grads_[loss] = Tensor::scalar(1.0);
    for (NodeId id = loss; id >= 0; --id) {
      const Node& n = nodes_[id];
      if (!n.needs_grad || n.backward == nullptr) continue;
      if (grads_[id].empty()) continue;  // not reachable from the loss
      n.backward(*this, id);
    }
  }

  // Internal access for backward implementations.
  const Node& node(NodeId id) const { return nodes_[id]; }
  bool wants_grad(NodeId id) const { return id >= 0 && nodes_[id].needs_grad; }
  Tensor& grad_slot(NodeId id) {
    if (grads_[id].empty()) grads_[id] = Tensor::zeros(nodes_[id].value.shape());
    return grads_[id];
  }
  /// Like grad_slot, but a first-touch slot comes back uninitialized with
  /// fresh=true and the caller must overwrite every entry. Writing x into a
  /// fresh slot equals accumulating x onto zeros bit for bit, so the two
  /// entry points are interchangeable for full-coverage writers.
  Tensor& grad_slot_fresh(NodeId id, bool& fresh) {
    fresh = grads_[id].empty();
    if (fresh) grads_[id] = Tensor::uninitialized(nodes_[id].value.shape());
    return grads_[id];
  }

 private:
  NodeId push_(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId push_op_(Node n) {
    for (NodeId p : n.parent) {
      if (p >= 0 && nodes_[p].needs_grad) {
        n.needs_grad = true;
        break;
      }
    }
    return push_(std::move(n));
  }

  static void softmax_row_(const double* x, double* y, std::size_t d) {
    double mx = x[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

namespace detail {

inline void backward_add(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  const Tensor& g = t.grad_slot(id);
  for (int s = 0; s < 2; ++s) {
    const NodeId p = n.parent[s];
    if (!t.wants_grad(p)) continue;
    bool fresh = false;
    Tensor& dst = t.grad_slot_fresh(p, fresh);
    if (fresh) {
      std::copy(g.begin(), g.end(), dst.begin());
    } else {
      kernels::axpy(1.0, g.data(), dst.data(), g.size());
    }
  }
}

inline void backward_scale(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  const Tensor& g = t.grad_slot(id);
  if (!t.wants_grad(n.parent[0])) return;
  bool fresh = false;
  Tensor& dst = t.grad_slot_fresh(n.parent[0], fresh);
  if (fresh) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] = n.scalar * g[i];
  } else {
    kernels::axpy(n.scalar, g.data(), dst.data(), g.size());
  }
}

inline void backward_matmul(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  const Tensor& g = t.grad_slot(id);
  const Tensor& a = t.node(n.parent[0]).value;
  const Tensor& b = t.node(n.parent[1]).value;
  const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  if (t.wants_grad(n.parent[0])) {
    // da += g * b^T
    bool fresh = false;
    Tensor& da = t.grad_slot_fresh(n.parent[0], fresh);
    if (fresh) {
      kernels::gemm_nt(g.data(), b.data(), da.data(), m, nn, k);
    } else {
      Tensor tmp = Tensor::uninitialized({m, k});
      kernels::gemm_nt(g.data(), b.data(), tmp.data(), m, nn, k);
      kernels::axpy(1.0, tmp.data(), da.data(), tmp.size());
    }
  }
  if (t.wants_grad(n.parent[1])) {
    // db += a^T * g
    kernels::gemm_tn_acc(a.data(), g.data(), t.grad_slot(n.parent[1]).data(), m, k, nn);
  }
}

inline void backward_linear(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  const Tensor& g = t.grad_slot(id);
  const Tensor& x = t.node(n.parent[0]).value;
  const Tensor& w = t.node(n.parent[1]).value;
  const std::size_t rows = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (t.wants_grad(n.parent[0])) {
    // dx += g * w
    bool fresh = false;
    Tensor& dx = t.grad_slot_fresh(n.parent[0], fresh);
    if (fresh) {
      kernels::gemm_nn(g.data(), w.data(), dx.data(), rows, out, in);
    } else {
      kernels::gemm_nn_acc(g.data(), w.data(), dx.data(), rows, out, in);
    }
  }
  if (t.wants_grad(n.parent[1])) {
    // dw += g^T * x
    kernels::gemm_tn_acc(g.data(), x.data(), t.grad_slot(n.parent[1]).data(), rows, out, in);
  }
}

inline void backward_slice_cols(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  if (!t.wants_grad(n.parent[0])) return;
  const Tensor& g = t.grad_slot(id);
  Tensor& dx = t.grad_slot(n.parent[0]);
  const std::size_t rows = g.dim(0), count = g.dim(1), cols = dx.dim(1);
  const std::size_t first = static_cast<std::size_t>(n.aux0);
  for (std::size_t r = 0; r < rows; ++r) {
    kernels::axpy(1.0, g.data() + r * count, dx.data() + r * cols + first, count);
  }
}

inline void backward_pad_cols(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  if (!t.wants_grad(n.parent[0])) return;
  const Tensor& g = t.grad_slot(id);
  Tensor& dx = t.grad_slot(n.parent[0]);
  const std::size_t rows = dx.dim(0), count = dx.dim(1), total = g.dim(1);
  const std::size_t first = static_cast<std::size_t>(n.aux0);
  for (std::size_t r = 0; r < rows; ++r) {
    kernels::axpy(1.0, g.data() + r * total + first, dx.data() + r * count, count);
  }
}

inline void backward_slice_rows(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  if (!t.wants_grad(n.parent[0])) return;
  const Tensor& g = t.grad_slot(id);
  Tensor& dx = t.grad_slot(n.parent[0]);
  const std::size_t count = g.dim(0), cols = g.dim(1);
  const std::size_t first = static_cast<std::size_t>(n.aux0);
  kernels::axpy(1.0, g.data(), dx.data() + first * cols, count * cols);
}

inline void backward_embedding(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  if (!t.wants_grad(n.parent[0])) return;
  const Tensor& g = t.grad_slot(id);
  Tensor& dtable = t.grad_slot(n.parent[0]);
  const std::size_t width = g.dim(1);
  const std::vector<std::int32_t>& ids = *n.ints;
  for (std::size_t r = 0; r < ids.size(); ++r) {
    kernels::axpy(1.0, g.data() + r * width,
                  dtable.data() + static_cast<std::size_t>(ids[r]) * width, width);
  }
}

inline void backward_layer_norm(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  const Tensor& g = t.grad_slot(id);
  const Tensor& x = t.node(n.parent[0]).value;
  const Tensor& gain = t.node(n.parent[1]).value;
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  const bool want_x = t.wants_grad(n.parent[0]);
  const bool want_gain = t.wants_grad(n.parent[1]);
  const bool want_bias = t.wants_grad(n.parent[2]);
  Tensor* dx_slot = nullptr;
  bool dx_fresh = false;
  if (want_x) dx_slot = &t.grad_slot_fresh(n.parent[0], dx_fresh);
  for (std::size_t r = 0; r < rows; ++r) {
    const double mean = n.saved.at(r, 0);
    const double inv = n.saved.at(r, 1);
    const double* xr = x.data() + r * d;
    const double* gr = g.data() + r * d;
    if (want_gain || want_bias) {
      for (std::size_t j = 0; j < d; ++j) {
        const double xhat = (xr[j] - mean) * inv;
        if (want_gain) t.grad_slot(n.parent[1])[j] += gr[j] * xhat;
        if (want_bias) t.grad_slot(n.parent[2])[j] += gr[j];
      }
    }
    if (want_x) {
      double sum_gy = 0.0, sum_gy_xhat = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double gy = gr[j] * gain[j];
        sum_gy += gy;
        sum_gy_xhat += gy * (xr[j] - mean) * inv;
      }
      const double mean_gy = sum_gy / static_cast<double>(d);
      const double mean_gy_xhat = sum_gy_xhat / static_cast<double>(d);
      double* dx = dx_slot->data() + r * d;
      for (std::size_t j = 0; j < d; ++j) {
        const double gy = gr[j] * gain[j];
        const double xhat = (xr[j] - mean) * inv;
        const double v = inv * (gy - mean_gy - xhat * mean_gy_xhat);
        if (dx_fresh) {
          dx[j] = v;
        } else {
          dx[j] += v;
        }
      }
    }
  }
}

inline void backward_gelu(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  if (!t.wants_grad(n.parent[0])) return;
  const Tensor& g = t.grad_slot(id);
  const Tensor& x = t.node(n.parent[0]).value;
  bool fresh = false;
  Tensor& dx = t.grad_slot_fresh(n.parent[0], fresh);
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCubic = 0.044715;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double tn = n.saved[i];
    const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
    const double dv = g[i] * (0.5 * (1.0 + tn) + 0.5 * v * (1.0 - tn * tn) * du);
    if (fresh) {
      dx[i] = dv;
    } else {
      dx[i] += dv;
    }
  }
}

inline void backward_softmax(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  if (!t.wants_grad(n.parent[0])) return;
  const Tensor& g = t.grad_slot(id);
  const Tensor& y = n.value;
  bool fresh = false;
  Tensor& dx = t.grad_slot_fresh(n.parent[0], fresh);
  const std::size_t d = y.shape().back();
  const std::size_t rows = y.size() / d;
  // dx = y * (g - dot(g, y)); masked entries have y == 0 and stay silent.
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y.data() + r * d;
    const double* gr = g.data() + r * d;
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
    double* dr = dx.data() + r * d;
    if (fresh) {
      for (std::size_t j = 0; j < d; ++j) dr[j] = yr[j] * (gr[j] - dot);
    } else {
      for (std::size_t j = 0; j < d; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  }
}

inline void backward_cross_entropy(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  if (!t.wants_grad(n.parent[0])) return;
  const double g = t.grad_slot(id)[0] / static_cast<double>(n.aux0);
  const std::vector<std::int32_t>& active = *n.ints;
  Tensor& dx = t.grad_slot(n.parent[0]);
  const std::size_t vocab = dx.dim(1);
  for (std::size_t r = 0; r < active.size(); ++r) {
    if (active[r] < 0) continue;
    const double* pr = n.saved.data() + r * vocab;
    double* dr = dx.data() + r * vocab;
    for (std::size_t v = 0; v < vocab; ++v) dr[v] += g * pr[v];
    dr[static_cast<std::size_t>(active[r])] -= g;
  }
}

inline void backward_sum_squares(Tape& t, NodeId id) {
  const Tape::Node& n = t.node(id);
  if (!t.wants_grad(n.parent[0])) return;
  const double g = t.grad_slot(id)[0];
  const Tensor& x = t.node(n.parent[0]).value;
  kernels::axpy(2.0 * g, x.data(), t.grad_slot(n.parent[0]).data(), x.size());
}

}  // namespace detail
}  // namespace uq
