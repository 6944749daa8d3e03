#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uq/adam.hpp"
#include "uq/kernels.hpp"
#include "uq/data.hpp"
#include "uq/hash.hpp"
#include "uq/metrics.hpp"
#include "uq/model.hpp"
#include "uq/parallel.hpp"
#include "uq/rng.hpp"
#include "uq/tape.hpp"
#include "uq/tensor.hpp"

namespace uq {

/// Ensemble fine-tuning knobs. Desk-scale defaults: the learning rate is
/// deliberately large (tiny model, 2k adapter parameters) and ten epochs is
/// enough to watch the run descend, bottom out and overfit.
struct TrainConfig {
  std::size_t members = 5;
  std::size_t epochs = 6;
  std::size_t batch_size = 16;
  double lambda_half = 0.1;           // coefficient on sum of ||B*A||^2
  AdamConfig adam;                    // lr 3e-3, betas 0.9/0.999, eps 1e-8
  std::uint64_t master_seed = 1902;
  bool early_stop = true;
  std::size_t lora_rank = 4;
  double lora_scale = 8.0;

  void validate() const {
    if (members < 1) throw std::invalid_argument("TrainConfig: members must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (lambda_half < 0.0) throw std::invalid_argument("TrainConfig: lambda_half must be >= 0");
    if (adam.learning_rate <= 0.0) {
      throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    }
    if (lora_rank < 1) throw std::invalid_argument("TrainConfig: lora_rank must be >= 1");
  }
};

/// Member index used for ensemble-level rows.
inline constexpr std::int64_t kEnsembleMember = -1;

struct TrainLogRow {
  std::int64_t member = 0;   // kEnsembleMember for ensemble rows
  std::int64_t epoch = 0;    // 0-based
  std::string split;         // "train" | "val"
  std::string metric;        // "loss", "penalty", "ba_norm2", "nll", ...
  double value = 0.0;
};

/// Flat metric log. Every row is a pure function of (seed, config, data);
/// wall_seconds is measured and deliberately kept out of the rows so the
/// deterministic part can be compared bit for bit across runs.
struct TrainLog {
  std::vector<TrainLogRow> rows;
  double wall_seconds = 0.0;

  void add(std::int64_t member, std::int64_t epoch, std::string split,
           std::string metric, double value) {
    rows.push_back({member, epoch, std::move(split), std::move(metric), value});
  }

  const TrainLogRow* find(std::int64_t member, std::int64_t epoch,
                          std::string_view split, std::string_view metric) const {
    for (const TrainLogRow& r : rows) {
      if (r.member == member && r.epoch == epoch && r.split == split &&
          r.metric == metric) {
        return &r;
      }
    }
    return nullptr;
  }

  double value_of(std::int64_t member, std::int64_t epoch, std::string_view split,
                  std::string_view metric) const {
    const TrainLogRow* r = find(member, epoch, split, metric);
    if (r == nullptr) {
      throw std::out_of_range("TrainLog: no row (member " + std::to_string(member) +
                              ", epoch " + std::to_string(epoch) + ", " +
                              std::string(split) + ", " + std::string(metric) + ")");
    }
    return r->value;
  }

  /// Values ordered by epoch for one (member, split, metric) triple.
  std::vector<double> series(std::int64_t member, std::string_view split,
                             std::string_view metric) const {
    std::vector<std::pair<std::int64_t, double>> found;
    for (const TrainLogRow& r : rows) {
      if (r.member == member && r.split == split && r.metric == metric) {
        found.emplace_back(r.epoch, r.value);
      }
    }
    std::sort(found.begin(), found.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<double> out;
    out.reserve(found.size());
    for (const auto& [epoch, value] : found) out.push_back(value);
    return out;
  }
};

/// Per-epoch training snapshot: enough to restore the member exactly and
/// to verify the restore against the validation NLL recorded at save time.
struct Checkpoint {
  std::int64_t epoch = 0;
  std::vector<LoraAdapter> adapters;  // deep copies
  std::uint64_t optimizer_digest = 0;
  double val_nll = 0.0;
};

// ---------------------------------------------------------------------------
// Encoding and loss assembly.
// ---------------------------------------------------------------------------

/// One sample ready for the model: prompt tokens ending at the "A: ("
/// placement marker, so the next-token distribution at the final position
/// is the answer distribution.
struct EncodedMcq {
  std::vector<std::int32_t> tokens;
  std::int32_t answer_token = 0;  // vocabulary id of the correct letter
  std::int32_t label = 0;         // reduced class index (== answer_token)
  bool ambiguous = false;
};

inline EncodedMcq encode_sample(const Tokenizer& tok, const McqSample& s) {
  EncodedMcq e;
  e.tokens = tok.encode(format_prompt(s, /*include_answer=*/false));
  e.answer_token = tok.choice_token(static_cast<std::size_t>(s.answer));
  e.label = s.answer;
  e.ambiguous = s.ambiguous;
  return e;
}

inline std::vector<EncodedMcq> encode_samples(const Tokenizer& tok,
                                              const std::vector<McqSample>& samples) {
  std::vector<EncodedMcq> out;
  out.reserve(samples.size());
  for (const McqSample& s : samples) out.push_back(encode_sample(tok, s));
  return out;
}

inline std::vector<std::int32_t> labels_of(const std::vector<EncodedMcq>& samples) {
  std::vector<std::int32_t> out;
  out.reserve(samples.size());
  for (const EncodedMcq& s : samples) out.push_back(s.label);
  return out;
}

/// Direct (tape-free) evaluation of lambda_half * sum of ||B*A||^2. This is
/// both the logging path and the independent oracle the graph version is
/// tested against.
inline double l2_lora_penalty(const std::vector<LoraAdapter>& adapters,
                              double lambda_half) {
  if (lambda_half < 0.0) {
    throw std::invalid_argument("l2_lora_penalty: lambda_half must be >= 0");
  }
  double total = 0.0;
  for (const LoraAdapter& ad : adapters) {
    const std::size_t d_out = ad.b.dim(0), r = ad.b.dim(1), d_in = ad.a.dim(1);
    Tensor prod = Tensor::uninitialized({d_out, d_in});
    kernels::gemm_nn(ad.b.data(), ad.a.data(), prod.data(), d_out, r, d_in);
    for (std::size_t i = 0; i < prod.size(); ++i) total += prod[i] * prod[i];
  }
  return lambda_half * total;
}

/// Differentiable lambda_half * sum of ||B*A||^2 over the bound adapters.
inline NodeId penalty_node(Tape& tape, const BoundParams& bp, double lambda_half) {
  NodeId total = -1;
  for (const BoundParams::Layer& bl : bp.layers) {
    for (auto [a, b] : {std::pair{bl.a_q, bl.b_q}, std::pair{bl.a_v, bl.b_v}}) {
      if (a < 0) continue;
      NodeId sq = tape.sum_squares(tape.matmul(b, a));
      total = (total < 0) ? sq : tape.add(total, sq);
    }
  }
  if (total < 0) return tape.constant(Tensor::scalar(0.0));
  return tape.scale(total, lambda_half);
}

/// Cross-entropy of the answer token at the placement position for one
/// sequence. The forward pass trims to the final position before the
/// language-model head; the full-sequence context still feeds it.
inline NodeId answer_loss_node(Tape& tape, const ModelConfig& cfg, const BoundParams& bp,
                               const EncodedMcq& sample) {
  NodeId logits = forward_tokens(tape, cfg, bp, sample.tokens, /*last_position_only=*/true);
  return tape.masked_cross_entropy(logits, {sample.answer_token}, {true});
}

/// Mean answer cross-entropy over a batch plus the L2 penalty: the per-step
/// training objective.
inline NodeId training_loss_node(Tape& tape, const ModelConfig& cfg, const BoundParams& bp,
                                 const std::vector<EncodedMcq>& samples,
                                 const std::vector<std::size_t>& batch,
                                 double lambda_half) {
  if (batch.empty()) throw std::invalid_argument("training_loss: empty batch");
  NodeId ce_sum = -1;
  for (std::size_t idx : batch) {
    NodeId ce = answer_loss_node(tape, cfg, bp, samples[idx]);
    ce_sum = (ce_sum < 0) ? ce : tape.add(ce_sum, ce);
  }
  NodeId loss = tape.scale(ce_sum, 1.0 / static_cast<double>(batch.size()));
  if (lambda_half > 0.0 && bp.has_adapters) {
    loss = tape.add(loss, penalty_node(tape, bp, lambda_half));
  }
  return loss;
}

/// Value-only training loss for a whole sample list, for tests and audits.
inline double training_loss(const ModelConfig& cfg, const EnsembleMember& member,
                            const std::vector<EncodedMcq>& samples, double lambda_half) {
  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Tape tape;
  BoundParams bp = bind(tape, cfg, *member.base, &member);
  NodeId loss = training_loss_node(tape, cfg, bp, samples, all, lambda_half);
  return tape.value(loss)[0];
}

// ---------------------------------------------------------------------------
// Prediction.
// ---------------------------------------------------------------------------

/// Member predictive distribution over the reduced classes for each sample:
/// softmax over the full vocabulary at the answer position, then the class
/// reduction (answer letters keep their mass, the rest pools into "other").
/// Pass member == nullptr for the bare base model. Returns [N x C].
inline Tensor predict_reduced(const ModelConfig& cfg, const BaseWeights& base,
                              const EnsembleMember* member,
                              const std::vector<EncodedMcq>& samples) {
  Tensor out = Tensor::uninitialized({samples.size(), kNumReducedClasses});
  const ClassReduction reduce;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Tensor logits = logits_for(cfg, base, member, samples[i].tokens, /*last_only=*/true);
    const std::vector<double> probs = softmax_values(logits.data(), logits.size());
    const std::vector<double> reduced = reduce.reduce(probs.data());
    std::copy(reduced.begin(), reduced.end(), out.data() + i * kNumReducedClasses);
  }
  return out;
}

/// Stacks per-member probability matrices [N x C] into the [N x M x C]
/// layout the uncertainty metrics consume.
inline PredictiveSet stack_members(const std::vector<Tensor>& member_probs,
                                   const std::vector<std::int32_t>& labels) {
  if (member_probs.empty()) {
    throw std::invalid_argument("stack_members: need at least one member");
  }
  const std::size_t n = member_probs[0].dim(0);
  const std::size_t c = member_probs[0].dim(1);
  const std::size_t m = member_probs.size();
  PredictiveSet set;
  set.probs = Tensor::uninitialized({n, m, c});
  set.labels = labels;
  for (std::size_t mi = 0; mi < m; ++mi) {
    const Tensor& p = member_probs[mi];
    if (p.dim(0) != n || p.dim(1) != c) {
      throw std::invalid_argument("stack_members: member " + std::to_string(mi) +
                                  " has shape " + p.shape_string());
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(p.data() + i * c, p.data() + (i + 1) * c,
                set.probs.data() + (i * m + mi) * c);
    }
  }
  set.validate();
  return set;
}

// ---------------------------------------------------------------------------
// Optimization loop.
// ---------------------------------------------------------------------------

inline std::uint64_t optimizer_digest(const AdamOptimizer& opt) {
  std::vector<const Tensor*> parts;
  for (const AdamState& s : opt.states()) {
    parts.push_back(&s.m);
    parts.push_back(&s.v);
  }
  std::uint64_t h = digest_tensors(parts);
  const std::int64_t t = opt.step_count();
  return fnv1a64(&t, sizeof(t), h);
}

struct MemberRun {
  std::vector<TrainLogRow> rows;
  std::vector<Checkpoint> checkpoints;  // one per epoch
  std::vector<Tensor> val_probs;        // per epoch, [N_val x C]
};

/// Trains one member in place. Per epoch: shuffle with the member-seeded
/// stream, one Adam step per batch, then validation metrics and a
/// checkpoint. The base weights are bound as constants, so they cannot
/// drift even in principle.
inline MemberRun fine_tune_member(const ModelConfig& cfg, EnsembleMember& member,
                                  const std::vector<EncodedMcq>& train,
                                  const std::vector<EncodedMcq>& val,
                                  const TrainConfig& config) {
  config.validate();
  if (train.empty() || val.empty()) {
    throw std::invalid_argument("fine_tune_member: train and val sets must be nonempty");
  }
  const std::int64_t member_index = 0;  // rewritten by fine_tune_ensemble
  MemberRun run;
  AdamOptimizer opt(member.trainable_params(), config.adam);
  Rng shuffle_rng(derive_seed(member.seed, 7777));
  const std::vector<std::int32_t> val_labels = labels_of(val);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t off = 0; off < order.size(); off += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - off);
      const std::vector<std::size_t> batch(order.begin() + off, order.begin() + off + len);
      Tape tape;
      BoundParams bp = bind(tape, cfg, *member.base, &member);
      NodeId loss = training_loss_node(tape, cfg, bp, train, batch, config.lambda_half);
      tape.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(bp.param_nodes.size());
      for (NodeId p : bp.param_nodes) grads.push_back(tape.grad(p));
      opt.step(grads);
      loss_sum += tape.value(loss)[0];
      ++steps;
    }

    const auto e = static_cast<std::int64_t>(epoch);
    run.rows.push_back({member_index, e, "train", "loss",
                        loss_sum / static_cast<double>(steps)});
    run.rows.push_back({member_index, e, "train", "penalty",
                        l2_lora_penalty(member.adapters, config.lambda_half)});
    run.rows.push_back({member_index, e, "train", "ba_norm2",
                        l2_lora_penalty(member.adapters, 1.0)});

    Tensor probs = predict_reduced(cfg, *member.base, &member, val);
    const auto records = build_records(stack_members({probs}, val_labels));
    const double val_nll = nll(records);
    run.rows.push_back({member_index, e, "val", "nll", val_nll});
    run.rows.push_back({member_index, e, "val", "accuracy", accuracy(records)});
    run.rows.push_back({member_index, e, "val", "ece", ece(records)});
    run.val_probs.push_back(std::move(probs));

    Checkpoint ck;
    ck.epoch = e;
    for (const LoraAdapter& ad : member.adapters) {
      LoraAdapter copy = ad;
      copy.a = ad.a.clone();
      copy.b = ad.b.clone();
      ck.adapters.push_back(std::move(copy));
    }
    ck.optimizer_digest = optimizer_digest(opt);
    ck.val_nll = val_nll;
    run.checkpoints.push_back(std::move(ck));
  }
  return run;
}

/// Argmin of the per-epoch ensemble validation NLL; ties resolve to the
/// earlier epoch. This is the early-stopping rule.
inline std::size_t early_stop_select(const std::vector<double>& ensemble_val_nll) {
  if (ensemble_val_nll.empty()) {
    throw std::invalid_argument("early_stop_select: need at least one epoch");
  }
  std::size_t best = 0;
  for (std::size_t e = 1; e < ensemble_val_nll.size(); ++e) {
    if (ensemble_val_nll[e] < ensemble_val_nll[best]) best = e;
  }
  return best;
}

inline std::size_t early_stop_select(const TrainLog& log) {
  return early_stop_select(log.series(kEnsembleMember, "val", "nll"));
}

struct EnsembleRun {
  std::vector<EnsembleMember> members;               // final-epoch state
  std::vector<std::vector<Checkpoint>> checkpoints;  // [member][epoch]
  TrainLog log;
  std::vector<double> ensemble_val_nll;              // per epoch
  std::size_t best_epoch = 0;
};

/// Trains M members that differ only in their derived seeds and merges the
/// logs. Members are independent, so the worker count never changes any
/// logged number; `seed_override` exists for degenerate-ensemble tests.
inline EnsembleRun fine_tune_ensemble(const ModelConfig& cfg,
                                      std::shared_ptr<const BaseWeights> base,
                                      const std::vector<EncodedMcq>& train,
                                      const std::vector<EncodedMcq>& val,
                                      const TrainConfig& config,
                                      std::size_t max_threads = 0,
                                      const std::vector<std::uint64_t>* seed_override = nullptr) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  if (seed_override != nullptr && seed_override->size() != config.members) {
    throw std::invalid_argument("fine_tune_ensemble: seed override count mismatch");
  }

  EnsembleRun run;
  run.members.reserve(config.members);
  for (std::size_t m = 0; m < config.members; ++m) {
    const std::uint64_t seed = seed_override != nullptr
                                   ? (*seed_override)[m]
                                   : derive_seed(config.master_seed, m);
    run.members.push_back(init_member(cfg, base, config.lora_rank, config.lora_scale, seed));
  }

  std::vector<MemberRun> member_runs(config.members);
  parallel_for(
      config.members,
      [&](std::size_t m) {
        member_runs[m] = fine_tune_member(cfg, run.members[m], train, val, config);
      },
      max_threads);

  for (std::size_t m = 0; m < config.members; ++m) {
    for (TrainLogRow row : member_runs[m].rows) {
      row.member = static_cast<std::int64_t>(m);
      run.log.rows.push_back(std::move(row));
    }
    run.checkpoints.push_back(std::move(member_runs[m].checkpoints));
  }

  const std::vector<std::int32_t> val_labels = labels_of(val);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    std::vector<Tensor> epoch_probs;
    epoch_probs.reserve(config.members);
    for (std::size_t m = 0; m < config.members; ++m) {
      epoch_probs.push_back(member_runs[m].val_probs[e]);
    }
    const auto records = build_records(stack_members(epoch_probs, val_labels));
    const double ens_nll = nll(records);
    const auto epoch = static_cast<std::int64_t>(e);
    run.log.add(kEnsembleMember, epoch, "val", "nll", ens_nll);
    run.log.add(kEnsembleMember, epoch, "val", "accuracy", accuracy(records));
    run.log.add(kEnsembleMember, epoch, "val", "ece", ece(records));
    run.ensemble_val_nll.push_back(ens_nll);
  }
  run.best_epoch = (config.epochs > 0 && config.early_stop)
                       ? early_stop_select(run.ensemble_val_nll)
                       : (config.epochs > 0 ? config.epochs - 1 : 0);
  run.log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

// ---------------------------------------------------------------------------
// Base pretraining (next-token objective on the disjoint pretrain world).
// ---------------------------------------------------------------------------

struct PretrainConfig {
  // Ten epochs is past the knee where the base masters the pretraining
  // world's answer rule (held-out answer-slot accuracy ~1.0); adapters then
  // re-key an existing circuit instead of building one, which is what makes
  // the downstream fine-tune converge in a handful of epochs.
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  AdamConfig adam;
  std::uint64_t seed = 7;           // base init and shuffle order
  double held_out_fraction = 0.1;   // tail of the corpus, never trained

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("PretrainConfig: batch_size must be >= 1");
    if (adam.learning_rate <= 0.0) {
      throw std::invalid_argument("PretrainConfig: learning_rate must be > 0");
    }
    if (held_out_fraction < 0.0 || held_out_fraction >= 1.0) {
      throw std::invalid_argument("PretrainConfig: held_out_fraction outside [0,1)");
    }
  }
};

struct PretrainResult {
  BaseWeights base;
  TrainLog log;                 // member kEnsembleMember, split "pretrain"
  double final_train_loss = 0.0;
  double held_out_loss = 0.0;   // mean next-token NLL on the held-out tail
};

/// Next-token cross-entropy graph for one sequence: position t predicts
/// token t+1, every position except the last is supervised.
inline NodeId next_token_loss_node(Tape& tape, const ModelConfig& cfg,
                                   const BoundParams& bp,
                                   const std::vector<std::int32_t>& tokens) {
  if (tokens.size() < 2) {
    throw std::invalid_argument("next_token_loss: need at least two tokens");
  }
  NodeId logits = forward_tokens(tape, cfg, bp, tokens);
  std::vector<std::int32_t> targets(tokens.size(), 0);
  std::vector<bool> mask(tokens.size(), false);
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    targets[t] = tokens[t + 1];
    mask[t] = true;
  }
  return tape.masked_cross_entropy(logits, targets, mask);
}

inline double next_token_loss(const ModelConfig& cfg, const BaseWeights& base,
                              const std::vector<std::int32_t>& tokens) {
  Tape tape;
  BindOptions opts;
  opts.base_trainable = false;
  opts.adapters_trainable = false;
  BoundParams bp = bind(tape, cfg, base, nullptr, opts);
  return tape.value(next_token_loss_node(tape, cfg, bp, tokens))[0];
}

/// Trains a fresh base on formatted QA texts (answers included) with the
/// next-token objective. The held-out tail is only ever evaluated.
inline PretrainResult pretrain_base(const ModelConfig& cfg,
                                    const std::vector<std::vector<std::int32_t>>& corpus,
                                    const PretrainConfig& config) {
  cfg.validate();
  config.validate();
  if (corpus.size() < 2) {
    throw std::invalid_argument("pretrain_base: corpus needs at least two sequences");
  }
  const auto start = std::chrono::steady_clock::now();
  const std::size_t held_out =
      std::min(corpus.size() - 1,
               static_cast<std::size_t>(static_cast<double>(corpus.size()) *
                                        config.held_out_fraction));
  const std::size_t train_count = corpus.size() - held_out;

  PretrainResult result;
  result.base = init_base(cfg, config.seed);
  AdamOptimizer opt(result.base.all_params(), config.adam);
  Rng shuffle_rng(derive_seed(config.seed, 1313));

  std::vector<std::size_t> order(train_count);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  BindOptions opts;
  opts.base_trainable = true;
  opts.adapters_trainable = false;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t off = 0; off < order.size(); off += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - off);
      Tape tape;
      BoundParams bp = bind(tape, cfg, result.base, nullptr, opts);
      NodeId ce_sum = -1;
      for (std::size_t i = off; i < off + len; ++i) {
        NodeId ce = next_token_loss_node(tape, cfg, bp, corpus[order[i]]);
        ce_sum = (ce_sum < 0) ? ce : tape.add(ce_sum, ce);
      }
      NodeId loss = tape.scale(ce_sum, 1.0 / static_cast<double>(len));
      tape.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(bp.param_nodes.size());
      for (NodeId p : bp.param_nodes) grads.push_back(tape.grad(p));
      opt.step(grads);
      loss_sum += tape.value(loss)[0];
      ++steps;
    }
    result.final_train_loss = loss_sum / static_cast<double>(steps);
    result.log.add(kEnsembleMember, static_cast<std::int64_t>(epoch), "pretrain", "loss",
                   result.final_train_loss);
  }

  if (held_out > 0) {
    double held_sum = 0.0;
    for (std::size_t i = train_count; i < corpus.size(); ++i) {
      held_sum += next_token_loss(cfg, result.base, corpus[i]);
    }
    result.held_out_loss = held_sum / static_cast<double>(held_out);
    result.log.add(kEnsembleMember,
                   config.epochs > 0 ? static_cast<std::int64_t>(config.epochs) - 1 : 0,
                   "pretrain", "held_out_nll", result.held_out_loss);
  }
  result.log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace uq
