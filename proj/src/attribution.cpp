#include "tidpo/attribution.hpp"

#include <cmath>

namespace tidpo {

TargetScalar target_scalar(const ModelParams& p, const TokenSequence& seq) {
  if (seq.size() < 2) {
    throw SequenceTooShort(
        "target_scalar: need at least one context token and a final position");
  }
  TargetScalar ts;
  ModelGraph g(ts.tape, p, LeafMode::kEmbeddings);
  ValueId lg = g.logits(seq);
  const int64_t T = static_cast<int64_t>(seq.size());
  ValueId last = ts.tape.gather_rows(lg, {T - 1});
  ts.root = ts.tape.max_reduce(last);
  ts.embedding_leaf = g.last_embedding_leaf();
  ts.value = ts.tape.value(ts.root).data[0];
  return ts;
}

std::vector<double> raw_importance(const ModelParams& p,
                                   const TokenSequence& seq) {
  TargetScalar ts = target_scalar(p, seq);
  const auto grads = ts.tape.backward(ts.root);
  const Tensor& ge = grads.at(ts.embedding_leaf);
  const int64_t T = ge.rows(), d = ge.cols();
  std::vector<double> out(T, 0.0);
  for (int64_t i = 0; i < T; ++i) {
    double l1 = 0.0;
    for (int64_t j = 0; j < d; ++j) l1 += std::abs(ge.data[i * d + j]);
    out[i] = l1;
  }
  return out;
}

std::vector<double> response_raw_importance(const ModelParams& p,
                                            const TokenSequence& x,
                                            const TokenSequence& y) {
  if (x.empty()) throw SequenceTooShort("attribution: empty prompt");
  if (y.empty()) throw SequenceTooShort("attribution: empty response");
  TokenSequence seq = x;
  seq.insert(seq.end(), y.begin(), y.end());
  const std::vector<double> full = raw_importance(p, seq);
  return std::vector<double>(full.begin() + static_cast<int64_t>(x.size()),
                             full.end());
}

std::vector<double> gaussian_prior_unnormalized(int64_t T) {
  if (T < 1) throw InvalidArgument("gaussian_prior: T must be >= 1");
  const double mu = static_cast<double>(T - 1) / 2.0;
  const double sigma = static_cast<double>(T) / 4.0;
  std::vector<double> out(T);
  for (int64_t t = 0; t < T; ++t) {
    const double z = (static_cast<double>(t) - mu) / sigma;
    out[t] = std::exp(-0.5 * z * z);
  }
  return out;
}

std::vector<double> gaussian_prior(int64_t T) {
  std::vector<double> out = gaussian_prior_unnormalized(T);
  double s = 0.0;
  for (double v : out) s += v;
  for (double& v : out) v /= s;
  return out;
}

std::vector<double> softmax_weights(const std::vector<double>& raw) {
  if (raw.empty()) throw InvalidArgument("softmax_weights: empty input");
  double mx = raw[0];
  for (double v : raw) mx = std::max(mx, v);
  std::vector<double> out(raw.size());
  double s = 0.0;
  for (size_t i = 0; i < raw.size(); ++i) {
    out[i] = std::exp(raw[i] - mx);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

ImportanceWeights mix_weights(const std::vector<double>& raw, double lambda) {
  return mix_weights(raw, lambda,
                     gaussian_prior(static_cast<int64_t>(raw.size())));
}

ImportanceWeights mix_weights(const std::vector<double>& raw, double lambda,
                              std::vector<double> prior) {
  if (raw.empty()) throw InvalidArgument("mix_weights: empty importance");
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw InvalidArgument("mix_weights: lambda must be in [0,1]");
  }
  if (prior.size() != raw.size()) {
    throw LengthMismatch("mix_weights: prior length differs from importance");
  }
  ImportanceWeights w;
  w.raw = raw;
  w.lambda = lambda;
  w.prior = std::move(prior);
  double total = 0.0;
  for (double v : raw) {
    if (v < 0.0) throw InvalidArgument("mix_weights: negative importance");
    total += v;
  }
  const int64_t T = static_cast<int64_t>(raw.size());
  w.normalized.resize(T);
  if (total > 0.0) {
    for (int64_t t = 0; t < T; ++t) w.normalized[t] = raw[t] / total;
  } else {
    // Zero attribution everywhere (e.g. a constant model): fall back to
    // uniform so the blend still sums to 1.
    std::fill(w.normalized.begin(), w.normalized.end(),
              1.0 / static_cast<double>(T));
  }
  w.mixed.resize(T);
  for (int64_t t = 0; t < T; ++t) {
    w.mixed[t] = lambda * w.normalized[t] + (1.0 - lambda) * w.prior[t];
  }
  return w;
}

ImportanceWeights importance_weights_for_response(const ModelParams& p,
                                                  const TokenSequence& x,
                                                  const TokenSequence& y,
                                                  double lambda) {
  return mix_weights(response_raw_importance(p, x, y), lambda);
}

std::pair<ImportanceWeights, ImportanceWeights> weights_for_pair(
    const ModelParams& policy, const TokenSequence& x,
    const TokenSequence& y_w, const TokenSequence& y_l, double lambda) {
  return {importance_weights_for_response(policy, x, y_w, lambda),
          importance_weights_for_response(policy, x, y_l, lambda)};
}

}  // namespace tidpo
