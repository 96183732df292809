#include "tidpo/losses.hpp"

#include <cmath>

#include "tidpo/rng.hpp"

namespace tidpo {

namespace {

constexpr uint64_t kAnchorStream = 0x616e63686f727364ull;   // "anchorsd"
constexpr uint64_t kRandWStream = 0x72616e6477656967ull;    // "randweig"

void check_pair(const ModelParams& policy, const ModelParams& reference) {
  if (!policy.config.compatible_with(reference.config)) {
    throw ConfigMismatch("loss: policy and reference configs differ");
  }
}

}  // namespace

const char* loss_variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::kTIDPO: return "tidpo";
    case LossVariant::kDPO: return "dpo";
    case LossVariant::kNoTriplet: return "no-triplet";
    case LossVariant::kUniformWeight: return "uniform-weight";
    case LossVariant::kRandomWeight: return "random-weight";
    case LossVariant::kNoGaussianPrior: return "no-gaussian-prior";
    case LossVariant::kSoftmaxPrior: return "softmax-prior";
  }
  return "?";
}

LossVariant loss_variant_from_name(const std::string& s) {
  for (LossVariant v :
       {LossVariant::kTIDPO, LossVariant::kDPO, LossVariant::kNoTriplet,
        LossVariant::kUniformWeight, LossVariant::kRandomWeight,
        LossVariant::kNoGaussianPrior, LossVariant::kSoftmaxPrior}) {
    if (s == loss_variant_name(v)) return v;
  }
  throw InvalidArgument("unknown loss variant: " + s);
}

void LossConfig::validate() const {
  if (!(beta > 0.0)) throw InvalidArgument("loss: beta must be > 0");
  if (!(gamma >= 0.0)) throw InvalidArgument("loss: gamma must be >= 0");
  if (!(alpha_margin >= 0.0)) {
    throw InvalidArgument("loss: alpha_margin must be >= 0");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw InvalidArgument("loss: lambda must be in [0,1]");
  }
}

bool variant_uses_triplet(const LossConfig& cfg) {
  return cfg.variant != LossVariant::kDPO &&
         cfg.variant != LossVariant::kNoTriplet && cfg.gamma > 0.0;
}

double preference_probability(double delta) { return stable_sigmoid(delta); }

double loss_dpo_w(const LossConfig& cfg, double delta) {
  return softplus(-(cfg.beta * delta));
}

double delta_r_token(const ModelParams& policy, const ModelParams& reference,
                     const TokenSequence& x, const TokenSequence& y_w,
                     const TokenSequence& y_l,
                     const std::vector<double>& w_w,
                     const std::vector<double>& w_l) {
  check_pair(policy, reference);
  if (w_w.size() != y_w.size()) {
    throw LengthMismatch("delta_r_token: w_w length != len(y_w)");
  }
  if (w_l.size() != y_l.size()) {
    throw LengthMismatch("delta_r_token: w_l length != len(y_l)");
  }
  const std::vector<double> pw = response_logprobs_eval(policy, x, y_w);
  const std::vector<double> rw = response_logprobs_eval(reference, x, y_w);
  const std::vector<double> pl = response_logprobs_eval(policy, x, y_l);
  const std::vector<double> rl = response_logprobs_eval(reference, x, y_l);
  double cw = 0.0, cl = 0.0;
  for (size_t t = 0; t < y_w.size(); ++t) cw += (pw[t] - rw[t]) * w_w[t];
  for (size_t t = 0; t < y_l.size(); ++t) cl += (pl[t] - rl[t]) * w_l[t];
  return cw - cl;
}

double delta_r_token(const ModelParams& policy, const ModelParams& reference,
                     const TokenSequence& x, const TokenSequence& y_w,
                     const TokenSequence& y_l, const ImportanceWeights& w_w,
                     const ImportanceWeights& w_l) {
  return delta_r_token(policy, reference, x, y_w, y_l, w_w.mixed, w_l.mixed);
}

std::pair<double, bool> triplet_from_logratios(std::span<const double> b,
                                               std::span<const double> c,
                                               std::span<const double> d,
                                               double alpha) {
  if (d.empty()) throw EmptyAnchor("triplet: anchor log-ratios empty");
  const size_t t_align = std::min(d.size(), b.size());
  const size_t t_push = std::min(d.size(), c.size());
  double pos = 0.0;
  for (size_t t = 0; t < t_align; ++t) pos += (d[t] - b[t]) * (d[t] - b[t]);
  double neg = 0.0;
  for (size_t t = 0; t < t_push; ++t) neg += (c[t] - d[t]) * (c[t] - d[t]);
  const double pre = (pos - neg) + alpha;
  return {pre > 0.0 ? pre : 0.0, pre > 0.0};
}

std::pair<double, bool> loss_triplet(const ModelParams& policy,
                                     const ModelParams& reference,
                                     const TokenSequence& x,
                                     const TokenSequence& y_anchor,
                                     const TokenSequence& y_w,
                                     const TokenSequence& y_l,
                                     const LossConfig& cfg) {
  check_pair(policy, reference);
  if (y_anchor.empty()) throw EmptyAnchor("loss_triplet: empty anchor");
  auto ratios = [&](const TokenSequence& y) {
    std::vector<double> p = response_logprobs_eval(policy, x, y);
    const std::vector<double> r = response_logprobs_eval(reference, x, y);
    for (size_t t = 0; t < p.size(); ++t) p[t] -= r[t];
    return p;
  };
  const std::vector<double> b = ratios(y_w);
  const std::vector<double> c = ratios(y_l);
  const std::vector<double> d = ratios(y_anchor);
  return triplet_from_logratios(b, c, d, cfg.alpha_margin);
}

TokenSequence generate_anchor(const ModelParams& policy,
                              const TokenSequence& x,
                              const TokenSequence& y_w, uint64_t seed) {
  if (y_w.empty()) throw SequenceTooShort("generate_anchor: empty y_w");
  const int64_t t_w = static_cast<int64_t>(y_w.size());
  const int64_t half = (t_w + 1) / 2;
  TokenSequence anchor(y_w.begin(), y_w.begin() + half);
  SequenceState state{x, anchor};
  if (static_cast<int64_t>(state.concat().size()) <
      policy.config.max_seq_len) {
    const TokenSequence cont = sample(policy, state, t_w, 1.0, seed);
    anchor.insert(anchor.end(), cont.begin(), cont.end());
  }
  if (anchor.empty()) throw EmptyAnchor("generate_anchor: produced nothing");
  return anchor;
}

std::vector<double> dirichlet_weights(int64_t T, uint64_t seed) {
  if (T < 1) throw InvalidArgument("dirichlet_weights: T must be >= 1");
  Rng rng(seed);
  std::vector<double> w(T);
  double total = 0.0;
  for (int64_t t = 0; t < T; ++t) {
    // Exp(1) draws normalized = flat Dirichlet.
    double u = rng.next_uniform();
    while (u >= 1.0) u = rng.next_uniform();
    w[t] = -std::log1p(-u);
    total += w[t];
  }
  if (total <= 0.0) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(T));
    return w;
  }
  for (double& v : w) v /= total;
  return w;
}

uint64_t batch_input_seed(uint64_t train_seed, int64_t step) {
  return derive_seed(derive_seed(train_seed, kAnchorStream),
                     static_cast<uint64_t>(step));
}

namespace {

std::vector<double> variant_weights(const LossConfig& cfg,
                                    const ModelParams& policy,
                                    const TokenSequence& x,
                                    const TokenSequence& y, uint64_t wseed) {
  const int64_t T = static_cast<int64_t>(y.size());
  switch (cfg.variant) {
    case LossVariant::kDPO:
      return std::vector<double>(T, 1.0);
    case LossVariant::kUniformWeight:
      return std::vector<double>(T, 1.0 / static_cast<double>(T));
    case LossVariant::kRandomWeight:
      return dirichlet_weights(T, wseed);
    case LossVariant::kTIDPO:
    case LossVariant::kNoTriplet:
      return importance_weights_for_response(policy, x, y, cfg.lambda).mixed;
    case LossVariant::kNoGaussianPrior:
      // lambda pinned to 1: pure normalized importance.
      return importance_weights_for_response(policy, x, y, 1.0).mixed;
    case LossVariant::kSoftmaxPrior: {
      const std::vector<double> raw = response_raw_importance(policy, x, y);
      return mix_weights(raw, cfg.lambda, softmax_weights(raw)).mixed;
    }
  }
  throw InvalidArgument("variant_weights: unknown variant");
}

}  // namespace

BatchInputs prepare_batch_inputs(const LossConfig& cfg,
                                 std::span<const PreferenceTriple> batch,
                                 const ModelParams& policy, uint64_t seed) {
  cfg.validate();
  if (batch.empty()) throw InvalidArgument("loss: empty batch");
  const bool triplet = variant_uses_triplet(cfg);
  const uint64_t wbase = derive_seed(seed, kRandWStream);
  BatchInputs inputs;
  inputs.w_w.reserve(batch.size());
  inputs.w_l.reserve(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const PreferenceTriple& tr = batch[i];
    inputs.w_w.push_back(variant_weights(cfg, policy, tr.x, tr.y_w,
                                         derive_seed(wbase, 2 * i)));
    inputs.w_l.push_back(variant_weights(cfg, policy, tr.x, tr.y_l,
                                         derive_seed(wbase, 2 * i + 1)));
    if (triplet) {
      inputs.anchors.push_back(
          generate_anchor(policy, tr.x, tr.y_w, derive_seed(seed, i)));
    }
  }
  return inputs;
}

const std::vector<double>& RefLogprobCache::get(const TokenSequence& x,
                                                const TokenSequence& y) {
  TokenSequence key = x;
  key.insert(key.end(), y.begin(), y.end());
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  return cache_.emplace(std::move(key), response_logprobs_eval(ref_, x, y))
      .first->second;
}

BatchLossGraph build_batch_loss(ModelGraph& policy_graph,
                                const LossConfig& cfg,
                                std::span<const PreferenceTriple> batch,
                                const ModelParams& reference,
                                const BatchInputs& inputs,
                                RefLogprobCache* ref_cache) {
  cfg.validate();
  if (batch.empty()) throw InvalidArgument("loss: empty batch");
  if (inputs.w_w.size() != batch.size() ||
      inputs.w_l.size() != batch.size()) {
    throw LengthMismatch("build_batch_loss: inputs do not match batch size");
  }
  const bool triplet = variant_uses_triplet(cfg);
  if (triplet && inputs.anchors.size() != batch.size()) {
    throw LengthMismatch("build_batch_loss: anchors do not match batch size");
  }
  Tape& tape = policy_graph.tape();
  const int64_t B = static_cast<int64_t>(batch.size());

  // Log-ratio vector of one response on the tape: policy logprobs (graph)
  // minus frozen reference logprobs (constant).
  auto log_ratios = [&](const TokenSequence& x, const TokenSequence& y,
                        int64_t limit) {
    ValueId lp = policy_graph.response_log_probs(x, y, limit);
    std::vector<double> ref = ref_cache != nullptr
                                  ? ref_cache->get(x, y)
                                  : response_logprobs_eval(reference, x, y);
    if (limit >= 0) ref.resize(limit);
    return tape.sub(lp, tape.constant(Tensor::from_vector(std::move(ref))));
  };

  BatchLossGraph out;
  ValueId dpo_acc = kNoValue;
  ValueId tri_acc = kNoValue;
  double delta_sum = 0.0;
  bool any_margin = false;

  for (int64_t i = 0; i < B; ++i) {
    const PreferenceTriple& tr = batch[i];
    if (inputs.w_w[i].size() != tr.y_w.size()) {
      throw LengthMismatch("build_batch_loss: w_w length != len(y_w)");
    }
    if (inputs.w_l[i].size() != tr.y_l.size()) {
      throw LengthMismatch("build_batch_loss: w_l length != len(y_l)");
    }
    ValueId lr_w = log_ratios(tr.x, tr.y_w, -1);
    ValueId lr_l = log_ratios(tr.x, tr.y_l, -1);
    ValueId cw = tape.sum(
        tape.mul(lr_w, tape.constant(Tensor::from_vector(inputs.w_w[i]))));
    ValueId cl = tape.sum(
        tape.mul(lr_l, tape.constant(Tensor::from_vector(inputs.w_l[i]))));
    ValueId delta = tape.sub(cw, cl);
    delta_sum += tape.value(delta).data[0];
    ValueId l_dpo = tape.neg(tape.log_sigmoid(tape.scale(delta, cfg.beta)));
    dpo_acc = dpo_acc == kNoValue ? l_dpo : tape.add(dpo_acc, l_dpo);

    if (triplet) {
      const TokenSequence& anchor = inputs.anchors[i];
      if (anchor.empty()) throw EmptyAnchor("build_batch_loss: empty anchor");
      const int64_t t_align =
          std::min<int64_t>(anchor.size(), tr.y_w.size());
      const int64_t t_push = std::min<int64_t>(anchor.size(), tr.y_l.size());
      ValueId d_align = log_ratios(tr.x, anchor, t_align);
      ValueId b_align = log_ratios(tr.x, tr.y_w, t_align);
      ValueId pos_diff = tape.sub(d_align, b_align);
      ValueId pos = tape.sum(tape.mul(pos_diff, pos_diff));
      ValueId c_push = log_ratios(tr.x, tr.y_l, t_push);
      ValueId d_push = log_ratios(tr.x, anchor, t_push);
      ValueId neg_diff = tape.sub(c_push, d_push);
      ValueId neg = tape.sum(tape.mul(neg_diff, neg_diff));
      ValueId pre = tape.add(tape.sub(pos, neg),
                             tape.constant(Tensor::scalar(cfg.alpha_margin)));
      any_margin = any_margin || tape.value(pre).data[0] > 0.0;
      ValueId l_tri = tape.relu(pre);
      tri_acc = tri_acc == kNoValue ? l_tri : tape.add(tri_acc, l_tri);
    }
  }

  const double inv_b = 1.0 / static_cast<double>(B);
  ValueId dpo_mean = tape.scale(dpo_acc, inv_b);
  out.breakdown.l_dpo_w = tape.value(dpo_mean).data[0];
  out.breakdown.delta_r_token = delta_sum * inv_b;
  out.breakdown.margin_active = any_margin;
  if (triplet) {
    ValueId tri_mean = tape.scale(tri_acc, inv_b);
    out.breakdown.l_triplet = tape.value(tri_mean).data[0];
    out.root = tape.add(dpo_mean, tape.scale(tri_mean, cfg.gamma));
  } else {
    out.breakdown.l_triplet = 0.0;
    out.root = dpo_mean;
  }
  out.breakdown.l_total = tape.value(out.root).data[0];
  return out;
}

LossBreakdown loss_total(const LossConfig& cfg,
                         std::span<const PreferenceTriple> batch,
                         const ModelParams& policy,
                         const ModelParams& reference, uint64_t seed,
                         RefLogprobCache* ref_cache) {
  check_pair(policy, reference);
  const BatchInputs inputs = prepare_batch_inputs(cfg, batch, policy, seed);
  Tape tape;
  ModelGraph graph(tape, policy, LeafMode::kNone);
  return build_batch_loss(graph, cfg, batch, reference, inputs, ref_cache)
      .breakdown;
}

}  // namespace tidpo
