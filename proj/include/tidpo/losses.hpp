#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tidpo/attribution.hpp"
#include "tidpo/datagen.hpp"

namespace tidpo {

// Full objective plus the ablation variants: each removes or replaces one
// ingredient of the full loss.
enum class LossVariant {
  kTIDPO,            // hybrid weights + triplet
  kDPO,              // unit weights, no triplet (sequence-level baseline)
  kNoTriplet,        // hybrid weights, triplet forced off
  kUniformWeight,    // W = 1/T, triplet on
  kRandomWeight,     // W ~ seeded flat Dirichlet, triplet on
  kNoGaussianPrior,  // W = normalized importance only, triplet on
  kSoftmaxPrior,     // Gaussian prior replaced by softmax of raw scores
};

const char* loss_variant_name(LossVariant v);
LossVariant loss_variant_from_name(const std::string& s);

struct LossConfig {
  LossVariant variant = LossVariant::kTIDPO;
  double beta = 0.1;          // preference temperature
  double gamma = 0.1;         // triplet weight
  double alpha_margin = 0.3;  // triplet margin
  double lambda = 0.7;        // importance/prior mix

  void validate() const;
};

// Whether this variant trains with the triplet term / non-unit weights.
bool variant_uses_triplet(const LossConfig& cfg);

struct LossBreakdown {
  double delta_r_token = 0.0;
  double l_dpo_w = 0.0;
  double l_triplet = 0.0;
  double l_total = 0.0;
  bool margin_active = false;
};

// --- scalar kernels -------------------------------------------------------

// sigma(delta): the weighted Bradley-Terry preference probability.
double preference_probability(double delta);

// -log sigma(beta * delta), computed via softplus for stability.
double loss_dpo_w(const LossConfig& cfg, double delta);

// Weighted token-level reward difference:
//   sum_t w_w[t]*logratio(y_w^t) - sum_t w_l[t]*logratio(y_l^t).
double delta_r_token(const ModelParams& policy, const ModelParams& reference,
                     const TokenSequence& x, const TokenSequence& y_w,
                     const TokenSequence& y_l,
                     const std::vector<double>& w_w,
                     const std::vector<double>& w_l);
double delta_r_token(const ModelParams& policy, const ModelParams& reference,
                     const TokenSequence& x, const TokenSequence& y_w,
                     const TokenSequence& y_l, const ImportanceWeights& w_w,
                     const ImportanceWeights& w_l);

// Triplet hinge on per-token log-ratio vectors b (preferred), c (rejected),
// d (anchor): [ sum_{t<T_align}(d-b)^2 - sum_{t<T_push}(c-d)^2 + alpha ]_+
// with T_align = min(|d|,|b|), T_push = min(|d|,|c|). Returns (loss,
// margin_active) where margin_active is the pre-hinge value being > 0.
std::pair<double, bool> triplet_from_logratios(std::span<const double> b,
                                               std::span<const double> c,
                                               std::span<const double> d,
                                               double alpha);

std::pair<double, bool> loss_triplet(const ModelParams& policy,
                                     const ModelParams& reference,
                                     const TokenSequence& x,
                                     const TokenSequence& y_anchor,
                                     const TokenSequence& y_w,
                                     const TokenSequence& y_l,
                                     const LossConfig& cfg);

// --- anchors and per-batch fixed inputs ------------------------------------

// Anchor: first ceil(T_w/2) tokens of y_w as a forced prefix, then up to
// T_w policy-sampled tokens at temperature 1.0.
TokenSequence generate_anchor(const ModelParams& policy,
                              const TokenSequence& x,
                              const TokenSequence& y_w, uint64_t seed);

// Flat Dirichlet draw (uniform over the simplex), summing to 1.
std::vector<double> dirichlet_weights(int64_t T, uint64_t seed);

// Seed scheduling so anchors/random weights are reproducible per batch.
uint64_t batch_input_seed(uint64_t train_seed, int64_t step);

// Everything the loss consumes that is held constant during the training
// backward pass: per-token weight vectors (detached) and anchor token
// sequences. Computed from the current policy in a separate pass.
struct BatchInputs {
  std::vector<std::vector<double>> w_w;
  std::vector<std::vector<double>> w_l;
  std::vector<TokenSequence> anchors;  // empty when the variant has none
};

BatchInputs prepare_batch_inputs(const LossConfig& cfg,
                                 std::span<const PreferenceTriple> batch,
                                 const ModelParams& policy, uint64_t seed);

// Memoizes response log-probs of the frozen reference model, which never
// change across a training run.
class RefLogprobCache {
 public:
  explicit RefLogprobCache(const ModelParams& reference) : ref_(reference) {}
  const std::vector<double>& get(const TokenSequence& x,
                                 const TokenSequence& y);
  const ModelParams& reference() const { return ref_; }

 private:
  const ModelParams& ref_;
  std::map<TokenSequence, std::vector<double>> cache_;
};

// Builds the batch-mean loss onto the graph's tape. `breakdown` carries the
// scalar values; `root` is the differentiable batch loss.
struct BatchLossGraph {
  ValueId root = kNoValue;
  LossBreakdown breakdown;
};

BatchLossGraph build_batch_loss(ModelGraph& policy_graph,
                                const LossConfig& cfg,
                                std::span<const PreferenceTriple> batch,
                                const ModelParams& reference,
                                const BatchInputs& inputs,
                                RefLogprobCache* ref_cache = nullptr);

// Pure evaluation: prepare inputs with `seed`, build on a scratch tape.
LossBreakdown loss_total(const LossConfig& cfg,
                         std::span<const PreferenceTriple> batch,
                         const ModelParams& policy,
                         const ModelParams& reference, uint64_t seed,
                         RefLogprobCache* ref_cache = nullptr);

}  // namespace tidpo
