#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "uq/kernels.hpp"
#include "uq/rng.hpp"
#include "uq/tape.hpp"
#include "uq/tensor.hpp"

namespace uq {

/// Decoder-only transformer shape. Desk-scale default is deliberately tiny:
/// it trains in minutes on one CPU core while exercising every code path.
struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t mlp_dim = 128;
  std::size_t max_seq_len = 256;

  void validate() const {
    if (vocab_size < 1 || embed_dim < 1 || num_layers < 1 || num_heads < 1 ||
        mlp_dim < 1 || max_seq_len < 1) {
      throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
    }
    if (embed_dim % num_heads != 0) {
      throw std::invalid_argument("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                                  " not divisible by num_heads " +
                                  std::to_string(num_heads));
    }
  }

  std::size_t head_dim() const { return embed_dim / num_heads; }
};

/// All pretrained parameters. Frozen during fine-tuning: the trainer binds
/// these as constants on the tape, so they can never receive an update.
/// Weight matrices are stored row-major as [out x in] and consumed with
/// y = x * W^T, matching how the adapter product B*A is written.
struct BaseWeights {
  struct Layer {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;        // [d x d]
    Tensor ln2_gain, ln2_bias;
    Tensor w_mlp_in;              // [mlp x d]
    Tensor w_mlp_out;             // [d x mlp]
  };

  Tensor token_embedding;         // [V x d]
  Tensor position_embedding;      // [T x d]
  std::vector<Layer> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor lm_head;                 // [V x d], applied as x * head^T

  /// Fixed enumeration order; checkpointing, Adam state and hashing all
  /// depend on this order being stable.
  std::vector<Tensor*> all_params() {
    std::vector<Tensor*> out{&token_embedding, &position_embedding};
    for (Layer& l : layers) {
      for (Tensor* t : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.wk, &l.wv, &l.wo,
                        &l.ln2_gain, &l.ln2_bias, &l.w_mlp_in, &l.w_mlp_out}) {
        out.push_back(t);
      }
    }
    out.push_back(&lnf_gain);
    out.push_back(&lnf_bias);
    out.push_back(&lm_head);
    return out;
  }
  std::vector<const Tensor*> all_params() const {
    auto mutable_list = const_cast<BaseWeights*>(this)->all_params();
    return {mutable_list.begin(), mutable_list.end()};
  }
};

/// Random base initialization: embeddings uniform(-0.1, 0.1), projections
/// Kaiming-style uniform(-1/sqrt(in), 1/sqrt(in)), norms at identity.
inline BaseWeights init_base(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.embed_dim;
  auto fill = [&rng](Tensor t, double bound) {
    for (double& v : t) v = rng.uniform(-bound, bound);
    return t;
  };
  auto proj = [&fill](std::size_t out, std::size_t in) {
    return fill(Tensor({out, in}), 1.0 / std::sqrt(static_cast<double>(in)));
  };
  BaseWeights w;
  w.token_embedding = fill(Tensor({cfg.vocab_size, d}), 0.1);
  w.position_embedding = fill(Tensor({cfg.max_seq_len, d}), 0.1);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    BaseWeights::Layer layer;
    layer.ln1_gain = Tensor::full({d}, 1.0);
    layer.ln1_bias = Tensor::zeros({d});
    layer.wq = proj(d, d);
    layer.wk = proj(d, d);
    layer.wv = proj(d, d);
    layer.wo = proj(d, d);
    layer.ln2_gain = Tensor::full({d}, 1.0);
    layer.ln2_bias = Tensor::zeros({d});
    layer.w_mlp_in = proj(cfg.mlp_dim, d);
    layer.w_mlp_out = proj(d, cfg.mlp_dim);
    w.layers.push_back(std::move(layer));
  }
  w.lnf_gain = Tensor::full({d}, 1.0);
  w.lnf_bias = Tensor::zeros({d});
  w.lm_head = proj(cfg.vocab_size, d);
  return w;
}

/// One low-rank adapter: delta = scale * B * A with B [d_out x r] zeroed at
/// init so a fresh member is bitwise identical to the base model.
struct LoraAdapter {
  Tensor a;                // [r x d_in]
  Tensor b;                // [d_out x r]
  std::size_t rank = 0;
  double scale = 1.0;
  std::size_t layer = 0;
  enum class Target { query, value } target = Target::query;
};

/// W + scale * B * A in the same [out x in] layout as the base weight.
inline Tensor effective_weight(const Tensor& w, const LoraAdapter& adapter) {
  const std::size_t out = adapter.b.dim(0), r = adapter.b.dim(1);
  const std::size_t in = adapter.a.dim(1);
  if (adapter.a.dim(0) != r || w.dim(0) != out || w.dim(1) != in) {
    throw std::invalid_argument("effective_weight: shape mismatch, W " +
                                w.shape_string() + " B " + adapter.b.shape_string() +
                                " A " + adapter.a.shape_string());
  }
  Tensor delta({out, in});
  kernels::gemm_nn(adapter.b.data(), adapter.a.data(), delta.data(), out, r, in);
  Tensor result = w.clone();
  kernels::axpy(adapter.scale, delta.data(), result.data(), result.size());
  return result;
}

/// One ensemble member: a shared frozen base plus its own adapters on the
/// query and value projections of every layer (order: L0 q, L0 v, L1 q, ...).
struct EnsembleMember {
  std::shared_ptr<const BaseWeights> base;
  std::vector<LoraAdapter> adapters;
  std::uint64_t seed = 0;

  LoraAdapter& adapter(std::size_t layer, LoraAdapter::Target t) {
    return adapters[2 * layer + (t == LoraAdapter::Target::value ? 1 : 0)];
  }
  const LoraAdapter& adapter(std::size_t layer, LoraAdapter::Target t) const {
    return adapters[2 * layer + (t == LoraAdapter::Target::value ? 1 : 0)];
  }

  /// Trainable tensors in the fixed order (adapter-major, A before B) that
  /// the tape binding, Adam state and checkpoints all share.
  std::vector<Tensor*> trainable_params() {
    std::vector<Tensor*> out;
    for (LoraAdapter& ad : adapters) {
      out.push_back(&ad.a);
      out.push_back(&ad.b);
    }
    return out;
  }
};

/// Adapter parameter count: sum of r * (d_in + d_out) over adapters.
inline std::size_t trainable_param_count(const EnsembleMember& member) {
  std::size_t n = 0;
  for (const LoraAdapter& ad : member.adapters) n += ad.a.size() + ad.b.size();
  return n;
}

/// Fresh member: B exactly zero, A i.i.d. uniform on [-1/sqrt(k), 1/sqrt(k)]
/// with k the input width. Draw order is fixed (layer-major, query before
/// value) so the seed pins every entry.
inline EnsembleMember init_member(const ModelConfig& cfg,
                                  std::shared_ptr<const BaseWeights> base,
                                  std::size_t rank, double scale,
                                  std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim;
  if (rank >= d) {
    throw std::invalid_argument("init_member: rank " + std::to_string(rank) +
                                " must be < " + std::to_string(d));
  }
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  EnsembleMember member;
  member.base = std::move(base);
  member.seed = seed;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (auto target : {LoraAdapter::Target::query, LoraAdapter::Target::value}) {
      LoraAdapter ad;
      ad.rank = rank;
      ad.scale = scale;
      ad.layer = l;
      ad.target = target;
      ad.a = Tensor({rank, d});
      for (double& v : ad.a) v = rng.uniform(-bound, bound);
      ad.b = Tensor::zeros({d, rank});
      member.adapters.push_back(std::move(ad));
    }
  }
  return member;
}

/// Parameter binding for one tape. Binding is separate from graph building
/// so that every sequence in a batch references the *same* leaf nodes and
/// gradients accumulate across the batch.
struct BoundParams {
  struct Layer {
    NodeId ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w_mlp_in, w_mlp_out;
    NodeId a_q = -1, b_q = -1, a_v = -1, b_v = -1;  // -1 when no adapters bound
  };
  NodeId token_embedding, position_embedding, lnf_gain, lnf_bias, lm_head;
  std::vector<Layer> layers;
  /// Trainable leaves in enumeration order (base order when the base is
  /// trainable, adapter order when adapters are).
  std::vector<NodeId> param_nodes;
  double lora_scale = 1.0;
  bool has_adapters = false;
};

struct BindOptions {
  bool base_trainable = false;      // pretraining trains the base itself
  bool adapters_trainable = true;
};

inline BoundParams bind(Tape& tape, const ModelConfig& cfg, const BaseWeights& base,
                        const EnsembleMember* member, const BindOptions& opts = {}) {
  BoundParams bp;
  auto bind_base = [&](const Tensor& t) {
    NodeId id = tape.leaf(t, opts.base_trainable);
    if (opts.base_trainable) bp.param_nodes.push_back(id);
    return id;
  };
  auto bind_adapter = [&](const LoraAdapter& ad, NodeId& a_node, NodeId& b_node) {
    a_node = tape.leaf(ad.a, opts.adapters_trainable);
    b_node = tape.leaf(ad.b, opts.adapters_trainable);
    if (opts.adapters_trainable) {
      bp.param_nodes.push_back(a_node);
      bp.param_nodes.push_back(b_node);
    }
  };

  bp.token_embedding = bind_base(base.token_embedding);
  bp.position_embedding = bind_base(base.position_embedding);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const BaseWeights::Layer& lw = base.layers[l];
    BoundParams::Layer bl;
    bl.ln1_gain = bind_base(lw.ln1_gain);
    bl.ln1_bias = bind_base(lw.ln1_bias);
    bl.wq = bind_base(lw.wq);
    bl.wk = bind_base(lw.wk);
    bl.wv = bind_base(lw.wv);
    bl.wo = bind_base(lw.wo);
    bl.ln2_gain = bind_base(lw.ln2_gain);
    bl.ln2_bias = bind_base(lw.ln2_bias);
    bl.w_mlp_in = bind_base(lw.w_mlp_in);
    bl.w_mlp_out = bind_base(lw.w_mlp_out);
    if (member != nullptr) {
      bind_adapter(member->adapter(l, LoraAdapter::Target::query), bl.a_q, bl.b_q);
      bind_adapter(member->adapter(l, LoraAdapter::Target::value), bl.a_v, bl.b_v);
    }
    bp.layers.push_back(bl);
  }
  bp.lnf_gain = bind_base(base.lnf_gain);
  bp.lnf_bias = bind_base(base.lnf_bias);
  bp.lm_head = bind_base(base.lm_head);
  if (member != nullptr) {
    bp.has_adapters = true;
    bp.lora_scale = member->adapters.empty() ? 1.0 : member->adapters[0].scale;
  }
  return bp;
}

/// Builds the forward graph for one token sequence against already-bound
/// parameters and returns the logits node ([T x V], or [1 x V] when only
/// the final position is requested).
inline NodeId forward_tokens(Tape& tape, const ModelConfig& cfg, const BoundParams& bp,
                             const std::vector<std::int32_t>& tokens,
                             bool last_position_only = false) {
  const std::size_t T = tokens.size();
  if (T == 0 || T > cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(T) +
                                " outside [1, " + std::to_string(cfg.max_seq_len) + "]");
  }
  for (std::int32_t tok : tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size) {
      throw std::invalid_argument("forward: token " + std::to_string(tok) +
                                  " outside vocabulary of " +
                                  std::to_string(cfg.vocab_size));
    }
  }

  const std::size_t d = cfg.embed_dim;
  const std::size_t hd = cfg.head_dim();
  std::vector<std::int32_t> positions(T);
  for (std::size_t t = 0; t < T; ++t) positions[t] = static_cast<std::int32_t>(t);

  NodeId x = tape.add(tape.embedding(bp.token_embedding, tokens),
                      tape.embedding(bp.position_embedding, positions));

  for (const BoundParams::Layer& bl : bp.layers) {
    NodeId a_in = tape.layer_norm(x, bl.ln1_gain, bl.ln1_bias);

    // q and v take the low-rank detour x*A^T*B^T scaled by alpha; with B=0
    // this adds exact zeros, which is what makes fresh members bit-identical
    // to the base model.
    auto project = [&](NodeId w, NodeId a_node, NodeId b_node) {
      NodeId y = tape.linear(a_in, w);
      if (a_node < 0) return y;
      NodeId delta = tape.linear(tape.linear(a_in, a_node), b_node);
      return tape.add(y, tape.scale(delta, bp.lora_scale));
    };

    NodeId q = project(bl.wq, bl.a_q, bl.b_q);
    NodeId k = tape.linear(a_in, bl.wk);
    NodeId v = project(bl.wv, bl.a_v, bl.b_v);

    NodeId merged = -1;
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      NodeId qh = tape.slice_cols(q, h * hd, hd);
      NodeId kh = tape.slice_cols(k, h * hd, hd);
      NodeId vh = tape.slice_cols(v, h * hd, hd);
      NodeId scores = tape.scale(tape.linear(qh, kh),
                                 1.0 / std::sqrt(static_cast<double>(hd)));
      NodeId attn = tape.matmul(tape.causal_softmax(scores), vh);
      NodeId padded = tape.pad_cols(attn, h * hd, d);
      merged = (merged < 0) ? padded : tape.add(merged, padded);
    }
    x = tape.add(x, tape.linear(merged, bl.wo));

    NodeId m_in = tape.layer_norm(x, bl.ln2_gain, bl.ln2_bias);
    NodeId hidden = tape.gelu(tape.linear(m_in, bl.w_mlp_in));
    x = tape.add(x, tape.linear(hidden, bl.w_mlp_out));
  }

  if (last_position_only) x = tape.slice_rows(x, T - 1, 1);
  NodeId xf = tape.layer_norm(x, bp.lnf_gain, bp.lnf_bias);
  return tape.linear(xf, bp.lm_head);
}

/// Plain inference: logits tensor for one sequence, adapters applied when a
/// member is given. last_only trims the output to the final position.
inline Tensor logits_for(const ModelConfig& cfg, const BaseWeights& base,
                         const EnsembleMember* member,
                         const std::vector<std::int32_t>& tokens,
                         bool last_only = false) {
  Tape tape;
  BindOptions opts;
  opts.base_trainable = false;
  opts.adapters_trainable = false;
  BoundParams bp = bind(tape, cfg, base, member, opts);
  NodeId logits = forward_tokens(tape, cfg, bp, tokens, last_only);
  return tape.value(logits).clone();
}

}  // namespace uq
