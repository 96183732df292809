#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tidpo/attribution.hpp"
#include "tidpo/datagen.hpp"
#include "tidpo/losses.hpp"
#include "tidpo/trainer.hpp"

namespace tidpo {

// --- noise model for the variance / bound checks ----------------------------

// Reward-difference noise model: the true reward contribution mu is
// perturbed by |N| i.i.d. Normal(0, sigma_eps^2) terms from non-critical
// tokens; the weighted estimator scales each term by weights[t].
struct NoiseModelSpec {
  int64_t n_noncritical = 10;
  double sigma_eps = 1.0;
  std::vector<double> weights;  // length n_noncritical, entries in [0,1]
  int64_t n_samples = 100000;
  uint64_t seed = 0;

  void validate() const;
};

struct VerifyReport {
  std::string name;
  double observed = 0.0;
  double expected = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

std::string verify_reports_to_json(const std::vector<VerifyReport>& reports);
bool all_passed(const std::vector<VerifyReport>& reports);

// Monte-Carlo check of the variance-reduction lemma: with shared noise
// draws, Var(sum w*eps) / Var(sum eps) must match sum(w^2)/|N| within 5%,
// and the weighted variance is strictly smaller whenever some w < 1.
// Returns [ratio report, ordering report].
std::vector<VerifyReport> verify_lemma1(const NoiseModelSpec& spec);

// Monte-Carlo check of the expected-loss bound: with R_dpo = mu + sum eps
// and R_ti = mu + sum w*eps (shared draws), verifies
//   E[L_TI] <= E[L_DPO] - 0.5 * kappa_hat * delta_sigma2 * slack
// where L = -log sigmoid(beta R), kappa_hat is the sampled minimum of
// beta^2 sigma(beta R)(1 - sigma(beta R)) over all drawn R, and
// delta_sigma2 = sigma_eps^2 (|N| - sum w^2) is theoretical.
VerifyReport verify_theorem2(const NoiseModelSpec& spec, double mu,
                             double beta, double slack = 0.9);

// --- KL split (directional policy-divergence check) -------------------------

// Mean per-position conditional KL(pi || pi_ref) over preferred-response
// states, split by planted critical vs non-critical positions.
struct KlSplit {
  double k_c = 0.0;  // mean KL at critical positions
  double k_n = 0.0;  // mean KL at non-critical positions
  int64_t n_c = 0;   // number of critical states
  int64_t n_n = 0;   // number of non-critical states

  double total() const { return k_c * static_cast<double>(n_c) +
                                k_n * static_cast<double>(n_n); }
};

KlSplit kl_split(const ModelParams& params, const ModelParams& reference,
                 const Corpus& corpus);

// Directional check: the importance-weighted model should waste less KL
// budget on non-critical positions than plain DPO. Throws UntrainedInput
// when both models are KL-indistinguishable from the reference.
std::vector<VerifyReport> verify_theorem3_kl_split(
    const ModelParams& trained_tidpo, const ModelParams& trained_dpo,
    const ModelParams& reference, const Corpus& corpus);

// --- gradient fidelity -------------------------------------------------------

// Per-parameter gradients of the batch loss assembled from per-token
// log-prob gradients and the scalar chain coefficients (the closed-form
// expansion of the weighted-DPO + triplet objective).
std::map<std::string, Tensor> closed_form_gradients(
    const LossConfig& cfg, std::span<const PreferenceTriple> batch,
    const ModelParams& policy, const ModelParams& reference,
    const BatchInputs& inputs);

// Reverse-mode gradients of the same fixed-input batch loss.
std::map<std::string, Tensor> autodiff_gradients(
    const LossConfig& cfg, std::span<const PreferenceTriple> batch,
    const ModelParams& policy, const ModelParams& reference,
    const BatchInputs& inputs);

// Central finite differences (step h) of the fixed-input batch loss.
std::map<std::string, Tensor> finite_difference_gradients(
    const LossConfig& cfg, std::span<const PreferenceTriple> batch,
    ModelParams policy, const ModelParams& reference,
    const BatchInputs& inputs, double h = 1e-5);

// Normwise (infinity-norm) relative error between two gradient sets:
//   max_i |a_i - b_i| / max(1e-12, max_i max(|a_i|, |b_i|)).
double gradient_relative_error(const std::map<std::string, Tensor>& a,
                               const std::map<std::string, Tensor>& b);

// Three-way agreement (autodiff vs finite differences, autodiff vs closed
// form) on one batch. Weights and anchors are computed once from `seed`
// and held fixed across all three methods. When `reference` is null a
// distinct deterministic init is derived from params.config.
std::vector<VerifyReport> check_gradients(const ModelParams& params,
                                          std::span<const PreferenceTriple> batch,
                                          const LossConfig& cfg,
                                          uint64_t seed = 0,
                                          const ModelParams* reference = nullptr);

// --- weight histograms -------------------------------------------------------

struct HistogramRow {
  double bin_low = 0.0;
  double bin_high = 0.0;
  int64_t count = 0;
  double frequency = 0.0;
};

struct WeightHistogram {
  std::vector<HistogramRow> overall;
  std::vector<HistogramRow> planted;  // critical positions of y_w
  std::vector<HistogramRow> filler;   // remaining positions of y_w
};

// Mixed-weight histogram over every preferred-response position in the
// corpus, with planted/filler conditional histograms.
WeightHistogram weight_histogram(const ModelParams& params,
                                 const Corpus& corpus, double lambda,
                                 int64_t bins);

std::string histogram_to_csv(const std::vector<HistogramRow>& rows);

// First-order stochastic dominance of `high` over `low`: the cumulative
// frequency of `high` never exceeds that of `low` (within eps).
bool stochastically_dominates(const std::vector<HistogramRow>& high,
                              const std::vector<HistogramRow>& low,
                              double eps = 1e-12);

// --- correlation -------------------------------------------------------------

// Sample Pearson correlation; throws DegenerateVariance on a constant
// column.
double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// Correlation between per-triple mean top-k mixed weight and the
// correctness bit (uniform-weight delta_r > 0).
double pearson_weight_accuracy(const ModelParams& params,
                               const ModelParams& reference,
                               const Corpus& corpus, int64_t top_k = 5,
                               double lambda = 0.7);

// --- generation diversity ----------------------------------------------------

struct DiversityMetrics {
  double self_bleu = 0.0;
  double distinct2 = 0.0;
  double distinct4 = 0.0;
  double entropy = 0.0;  // pooled unigram Shannon entropy, nats
};

// BLEU-4 of one hypothesis against reference sequences: uniform weights
// over n-gram orders the hypothesis supports, clipped counts, standard
// brevity penalty against the closest reference length.
double bleu4(const TokenSequence& hypothesis,
             const std::vector<TokenSequence>& references);

double distinct_n(const std::vector<TokenSequence>& samples, int64_t n);

DiversityMetrics diversity_metrics(const std::vector<TokenSequence>& samples);

// Deterministic generation batch: prompts drawn round-robin from the first
// n_prompts corpus entries (so the metrics measure per-prompt output variety
// rather than corpus variety), sampled at the given temperature with
// per-sample derived seeds.
std::vector<TokenSequence> generate_samples(const ModelParams& params,
                                            const Corpus& corpus,
                                            int64_t n_samples,
                                            int64_t max_new,
                                            double temperature, uint64_t seed,
                                            int64_t n_prompts = 8);

// --- noise robustness sweep --------------------------------------------------

struct NoiseSweepRow {
  double rate = 0.0;
  std::string variant;
  double accuracy = 0.0;  // on the clean (rate 0) corpus
};

// For each label-noise rate: regenerate the corpus at that rate (same seed
// family), train plain DPO and the configured variant from one shared
// init, and evaluate both on the clean corpus.
std::vector<NoiseSweepRow> noise_sweep(const std::vector<double>& rates,
                                       const TrainConfig& cfg,
                                       const CorpusSpec& corpus_spec,
                                       const ModelConfig& model_cfg);

std::string noise_sweep_to_csv(const std::vector<NoiseSweepRow>& rows);

// acc(rate_from) - acc(rate_to) for one variant.
double sweep_degradation(const std::vector<NoiseSweepRow>& rows,
                         const std::string& variant, double rate_from,
                         double rate_to);

}  // namespace tidpo
