#pragma once

#include <utility>
#include <vector>

#include "tidpo/microlm.hpp"

namespace tidpo {

// Scalar attribution target for a sequence: the largest next-token logit at
// the final position. Holding the tape keeps the forward graph alive so a
// caller can run backward() from `root` to the embedding leaf.
struct TargetScalar {
  Tape tape;
  ValueId root = kNoValue;
  ValueId embedding_leaf = kNoValue;
  double value = 0.0;
};

TargetScalar target_scalar(const ModelParams& p, const TokenSequence& seq);

// Per-position importance: L1 norm of the target's gradient with respect
// to each input embedding row. Length == len(seq); entries >= 0.
std::vector<double> raw_importance(const ModelParams& p,
                                   const TokenSequence& seq);

// Importance of the response positions of x+y only (slice of the full
// sequence importance, unnormalized).
std::vector<double> response_raw_importance(const ModelParams& p,
                                            const TokenSequence& x,
                                            const TokenSequence& y);

// Bell curve over positions 0..T-1 centered at (T-1)/2 with sigma = T/4,
// i.e. exp(-0.5 ((t - mu)/sigma)^2). The normalized form sums to 1.
std::vector<double> gaussian_prior_unnormalized(int64_t T);
std::vector<double> gaussian_prior(int64_t T);

// Softmax over raw importances; an alternative position prior used by one
// of the ablations.
std::vector<double> softmax_weights(const std::vector<double>& raw);

struct ImportanceWeights {
  std::vector<double> raw;         // as given, >= 0
  std::vector<double> normalized;  // raw / sum(raw), or uniform if sum == 0
  std::vector<double> prior;       // sums to 1
  std::vector<double> mixed;       // lambda*normalized + (1-lambda)*prior
  double lambda = 0.0;
};

// Blend normalized importance with the Gaussian prior (or a caller-supplied
// normalized prior). The blend sums to 1 up to rounding.
ImportanceWeights mix_weights(const std::vector<double>& raw, double lambda);
ImportanceWeights mix_weights(const std::vector<double>& raw, double lambda,
                              std::vector<double> prior);

// Full pipeline for one response: attribute over x+y, keep the response
// slice, renormalize, blend with the Gaussian prior over response length.
ImportanceWeights importance_weights_for_response(const ModelParams& p,
                                                  const TokenSequence& x,
                                                  const TokenSequence& y,
                                                  double lambda);

// Both responses of a preference pair, attributed independently.
std::pair<ImportanceWeights, ImportanceWeights> weights_for_pair(
    const ModelParams& policy, const TokenSequence& x,
    const TokenSequence& y_w, const TokenSequence& y_l, double lambda);

}  // namespace tidpo
