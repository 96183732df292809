#include "tidpo/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "tidpo/errors.hpp"
#include "tidpo/io.hpp"
#include "tidpo/rng.hpp"

namespace tidpo {
namespace {

constexpr uint64_t kGradRefStream = 0x6772616472656621ull;  // "gradref!"
constexpr uint64_t kGenStreamBase = 0x67656e73616d706cull;  // "gensampl"

double softplus_local(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// Bessel-corrected sample variance.
double sample_variance(const std::vector<double>& xs) {
  const auto n = static_cast<double>(xs.size());
  if (xs.size() < 2) throw TooFewSamples("variance needs >= 2 samples");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return ss / (n - 1.0);
}

std::map<std::string, Tensor> zero_like_params(const ModelParams& p) {
  std::map<std::string, Tensor> out;
  for_each_param(p, [&](const std::string& name, const Tensor& t) {
    out.emplace(name, Tensor::zeros(t.shape));
  });
  return out;
}

void add_scaled(std::map<std::string, Tensor>& dst,
                const std::map<std::string, Tensor>& src, double c) {
  if (c == 0.0) return;
  for (auto& [name, t] : dst) {
    const Tensor& s = src.at(name);
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] += c * s.data[i];
  }
}

// Gradient of log pi(y_t | x + y_<t) wrt every parameter, for each of the
// first `limit` response tokens (all when limit < 0). One shared forward,
// one backward per token.
std::vector<std::map<std::string, Tensor>> per_token_logprob_grads(
    const ModelParams& policy, const TokenSequence& x, const TokenSequence& y,
    int64_t limit = -1) {
  Tape tape;
  ModelGraph graph(tape, policy, LeafMode::kParams);
  TokenSequence concat = x;
  concat.insert(concat.end(), y.begin(), y.end());
  const ValueId lp = graph.log_probs(concat);
  const auto m = static_cast<int64_t>(x.size());
  const auto t_y = static_cast<int64_t>(y.size());
  const int64_t k = limit >= 0 ? std::min<int64_t>(limit, t_y) : t_y;
  std::vector<std::map<std::string, Tensor>> out;
  out.reserve(static_cast<size_t>(k));
  for (int64_t t = 0; t < k; ++t) {
    const ValueId cell =
        tape.select(lp, {{m + t - 1, static_cast<int64_t>(concat[static_cast<size_t>(m + t)])}});
    std::map<ValueId, Tensor> by_id = tape.backward(cell);
    std::map<std::string, Tensor> g;
    for (const auto& [name, vid] : graph.param_ids())
      g.emplace(name, std::move(by_id.at(vid)));
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<double> logratio_vector(const ModelParams& policy,
                                    const ModelParams& reference,
                                    const TokenSequence& x,
                                    const TokenSequence& y) {
  std::vector<double> pol = response_logprobs_eval(policy, x, y);
  const std::vector<double> ref = response_logprobs_eval(reference, x, y);
  for (size_t i = 0; i < pol.size(); ++i) pol[i] -= ref[i];
  return pol;
}

double batch_loss_value(const LossConfig& cfg,
                        std::span<const PreferenceTriple> batch,
                        const ModelParams& policy,
                        const ModelParams& reference,
                        const BatchInputs& inputs,
                        RefLogprobCache* ref_cache) {
  Tape tape;
  ModelGraph graph(tape, policy, LeafMode::kNone);
  return build_batch_loss(graph, cfg, batch, reference, inputs, ref_cache)
      .breakdown.l_total;
}

// Row-wise log-softmax of a logits row [lo, hi).
void log_softmax_row(const double* row, int64_t n, std::vector<double>& out) {
  out.resize(static_cast<size_t>(n));
  double mx = row[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) sum += std::exp(row[i] - mx);
  const double lse = mx + std::log(sum);
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = row[i] - lse;
}

}  // namespace

void NoiseModelSpec::validate() const {
  if (n_noncritical < 1)
    throw InvalidArgument("noise model: n_noncritical must be >= 1");
  if (!(std::isfinite(sigma_eps) && sigma_eps > 0.0))
    throw InvalidArgument("noise model: sigma_eps must be positive");
  if (static_cast<int64_t>(weights.size()) != n_noncritical)
    throw LengthMismatch("noise model: weights length must equal |N|");
  for (double w : weights) {
    if (!(w >= 0.0 && w <= 1.0))
      throw InvalidArgument("noise model: weights must lie in [0,1]");
  }
  if (n_samples < 1)
    throw InvalidArgument("noise model: n_samples must be >= 1");
}

std::string verify_reports_to_json(const std::vector<VerifyReport>& reports) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const VerifyReport& r : reports) {
    nlohmann::ordered_json o;
    o["name"] = r.name;
    o["observed"] = r.observed;
    o["expected"] = r.expected;
    o["tolerance"] = r.tolerance;
    o["passed"] = r.passed;
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

bool all_passed(const std::vector<VerifyReport>& reports) {
  for (const VerifyReport& r : reports)
    if (!r.passed) return false;
  return true;
}

std::vector<VerifyReport> verify_lemma1(const NoiseModelSpec& spec) {
  spec.validate();
  if (spec.n_samples < 10000)
    throw InvalidArgument("lemma1: n_samples must be >= 1e4");
  Rng rng(spec.seed);
  std::vector<double> s_dpo(static_cast<size_t>(spec.n_samples));
  std::vector<double> s_ti(static_cast<size_t>(spec.n_samples));
  for (int64_t k = 0; k < spec.n_samples; ++k) {
    double sum_dpo = 0.0, sum_ti = 0.0;
    for (int64_t t = 0; t < spec.n_noncritical; ++t) {
      const double eps = spec.sigma_eps * rng.next_gaussian();
      sum_dpo += eps;
      sum_ti += spec.weights[static_cast<size_t>(t)] * eps;
    }
    s_dpo[static_cast<size_t>(k)] = sum_dpo;
    s_ti[static_cast<size_t>(k)] = sum_ti;
  }
  const double var_dpo = sample_variance(s_dpo);
  const double var_ti = sample_variance(s_ti);

  double sum_w2 = 0.0;
  bool any_below_one = false;
  for (double w : spec.weights) {
    sum_w2 += w * w;
    any_below_one = any_below_one || (w < 1.0);
  }
  const double exp_ratio = sum_w2 / static_cast<double>(spec.n_noncritical);

  VerifyReport ratio;
  ratio.name = "lemma1_variance_ratio";
  ratio.observed = var_ti / var_dpo;
  ratio.expected = exp_ratio;
  ratio.tolerance = 0.05 * std::max(exp_ratio, 1e-12);
  ratio.passed = std::abs(ratio.observed - ratio.expected) <= ratio.tolerance;

  VerifyReport order;
  order.observed = var_ti;
  order.expected = var_dpo;
  order.tolerance = 0.0;
  if (any_below_one) {
    order.name = "lemma1_ordering_strict";
    order.passed = var_ti < var_dpo;
  } else {
    order.name = "lemma1_ordering_nonstrict";
    order.passed = var_ti <= var_dpo;
  }
  return {ratio, order};
}

VerifyReport verify_theorem2(const NoiseModelSpec& spec, double mu,
                             double beta, double slack) {
  spec.validate();
  if (!(std::isfinite(mu)))
    throw InvalidArgument("theorem2: mu must be finite");
  if (!(std::isfinite(beta) && beta > 0.0))
    throw InvalidArgument("theorem2: beta must be positive");
  if (!(slack > 0.0 && slack <= 1.0))
    throw InvalidArgument("theorem2: slack must be in (0,1]");
  Rng rng(spec.seed);
  double mean_dpo = 0.0, mean_ti = 0.0;
  double kappa_hat = std::numeric_limits<double>::infinity();
  auto curvature = [&](double r) {
    const double s = stable_sigmoid(beta * r);
    return beta * beta * s * (1.0 - s);
  };
  for (int64_t k = 0; k < spec.n_samples; ++k) {
    double sum_dpo = 0.0, sum_ti = 0.0;
    for (int64_t t = 0; t < spec.n_noncritical; ++t) {
      const double eps = spec.sigma_eps * rng.next_gaussian();
      sum_dpo += eps;
      sum_ti += spec.weights[static_cast<size_t>(t)] * eps;
    }
    const double r_dpo = mu + sum_dpo;
    const double r_ti = mu + sum_ti;
    mean_dpo += softplus_local(-beta * r_dpo);
    mean_ti += softplus_local(-beta * r_ti);
    kappa_hat = std::min(kappa_hat, std::min(curvature(r_dpo), curvature(r_ti)));
  }
  mean_dpo /= static_cast<double>(spec.n_samples);
  mean_ti /= static_cast<double>(spec.n_samples);

  double sum_w2 = 0.0;
  for (double w : spec.weights) sum_w2 += w * w;
  const double delta_sigma2 = spec.sigma_eps * spec.sigma_eps *
                              (static_cast<double>(spec.n_noncritical) - sum_w2);

  VerifyReport r;
  r.name = "theorem2_bound";
  r.observed = mean_ti;
  r.expected = mean_dpo - 0.5 * kappa_hat * delta_sigma2 * slack;
  r.tolerance = 0.0;
  r.passed = r.observed <= r.expected;
  return r;
}

KlSplit kl_split(const ModelParams& params, const ModelParams& reference,
                 const Corpus& corpus) {
  if (!params.config.compatible_with(reference.config))
    throw ConfigMismatch("kl_split: model configs differ");
  if (corpus.empty()) throw InvalidArgument("kl_split: corpus is empty");
  KlSplit out;
  double sum_c = 0.0, sum_n = 0.0;
  std::vector<double> lp, lq;
  for (const PreferenceTriple& triple : corpus) {
    TokenSequence concat = triple.x;
    concat.insert(concat.end(), triple.y_w.begin(), triple.y_w.end());
    const Tensor logits_p = logits_eval(params, concat);
    const Tensor logits_q = logits_eval(reference, concat);
    const int64_t vocab = logits_p.shape[1];
    const auto m = static_cast<int64_t>(triple.x.size());
    const std::set<int32_t> critical(triple.critical_w.begin(),
                                     triple.critical_w.end());
    for (int64_t t = 0; t < static_cast<int64_t>(triple.y_w.size()); ++t) {
      const int64_t row = m - 1 + t;
      log_softmax_row(&logits_p.data[static_cast<size_t>(row * vocab)], vocab, lp);
      log_softmax_row(&logits_q.data[static_cast<size_t>(row * vocab)], vocab, lq);
      double kl = 0.0;
      for (int64_t v = 0; v < vocab; ++v) {
        const size_t i = static_cast<size_t>(v);
        kl += std::exp(lp[i]) * (lp[i] - lq[i]);
      }
      if (critical.count(static_cast<int32_t>(t)) != 0) {
        sum_c += kl;
        ++out.n_c;
      } else {
        sum_n += kl;
        ++out.n_n;
      }
    }
  }
  out.k_c = out.n_c > 0 ? sum_c / static_cast<double>(out.n_c) : 0.0;
  out.k_n = out.n_n > 0 ? sum_n / static_cast<double>(out.n_n) : 0.0;
  return out;
}

std::vector<VerifyReport> verify_theorem3_kl_split(
    const ModelParams& trained_tidpo, const ModelParams& trained_dpo,
    const ModelParams& reference, const Corpus& corpus) {
  const KlSplit ti = kl_split(trained_tidpo, reference, corpus);
  const KlSplit dpo = kl_split(trained_dpo, reference, corpus);
  if (ti.total() < 1e-12 && dpo.total() < 1e-12) {
    throw UntrainedInput(
        "theorem3: both models are KL-indistinguishable from the reference");
  }
  std::vector<VerifyReport> out;
  VerifyReport moved_ti{"theorem3_total_kl_tidpo", ti.total(), 0.0, 0.0,
                        ti.total() > 1e-12};
  VerifyReport moved_dpo{"theorem3_total_kl_dpo", dpo.total(), 0.0, 0.0,
                         dpo.total() > 1e-12};
  VerifyReport order{"theorem3_kn_ordering", ti.k_n, dpo.k_n, 0.0,
                     ti.k_n < dpo.k_n};
  out.push_back(order);
  out.push_back(moved_ti);
  out.push_back(moved_dpo);
  return out;
}

std::map<std::string, Tensor> autodiff_gradients(
    const LossConfig& cfg, std::span<const PreferenceTriple> batch,
    const ModelParams& policy, const ModelParams& reference,
    const BatchInputs& inputs) {
  Tape tape;
  ModelGraph graph(tape, policy, LeafMode::kParams);
  const BatchLossGraph g =
      build_batch_loss(graph, cfg, batch, reference, inputs, nullptr);
  std::map<ValueId, Tensor> by_id = tape.backward(g.root);
  std::map<std::string, Tensor> out;
  for (const auto& [name, vid] : graph.param_ids())
    out.emplace(name, std::move(by_id.at(vid)));
  return out;
}

std::map<std::string, Tensor> closed_form_gradients(
    const LossConfig& cfg, std::span<const PreferenceTriple> batch,
    const ModelParams& policy, const ModelParams& reference,
    const BatchInputs& inputs) {
  cfg.validate();
  if (batch.empty()) throw InvalidArgument("closed form: empty batch");
  std::map<std::string, Tensor> acc = zero_like_params(policy);
  const double b_inv = 1.0 / static_cast<double>(batch.size());
  const bool triplet = variant_uses_triplet(cfg);
  for (size_t i = 0; i < batch.size(); ++i) {
    const PreferenceTriple& t = batch[i];
    const std::vector<double>& ww = inputs.w_w[i];
    const std::vector<double>& wl = inputs.w_l[i];

    const auto gw = per_token_logprob_grads(policy, t.x, t.y_w);
    const auto gl = per_token_logprob_grads(policy, t.x, t.y_l);

    // d/d delta of -log sigmoid(beta*delta) = -beta (1 - sigmoid(beta*delta)).
    const double delta =
        delta_r_token(policy, reference, t.x, t.y_w, t.y_l, ww, wl);
    const double coef =
        -cfg.beta * (1.0 - stable_sigmoid(cfg.beta * delta)) * b_inv;
    for (size_t k = 0; k < gw.size(); ++k) add_scaled(acc, gw[k], coef * ww[k]);
    for (size_t k = 0; k < gl.size(); ++k) add_scaled(acc, gl[k], -coef * wl[k]);

    if (!triplet) continue;
    const TokenSequence& anchor = inputs.anchors[i];
    const std::vector<double> b = logratio_vector(policy, reference, t.x, t.y_w);
    const std::vector<double> c = logratio_vector(policy, reference, t.x, t.y_l);
    const std::vector<double> d = logratio_vector(policy, reference, t.x, anchor);
    const size_t t_align = std::min(d.size(), b.size());
    const size_t t_push = std::min(d.size(), c.size());
    double pos = 0.0, neg = 0.0;
    for (size_t k = 0; k < t_align; ++k) pos += (d[k] - b[k]) * (d[k] - b[k]);
    for (size_t k = 0; k < t_push; ++k) neg += (c[k] - d[k]) * (c[k] - d[k]);
    const double pre = (pos - neg) + cfg.alpha_margin;
    if (pre <= 0.0) continue;

    const auto gd = per_token_logprob_grads(policy, t.x, anchor);
    const double gcoef = cfg.gamma * b_inv;
    for (size_t k = 0; k < t_align; ++k) {
      const double diff = d[k] - b[k];
      add_scaled(acc, gw[k], gcoef * (-2.0 * diff));
      add_scaled(acc, gd[k], gcoef * (2.0 * diff));
    }
    for (size_t k = 0; k < t_push; ++k) {
      const double diff = c[k] - d[k];
      add_scaled(acc, gl[k], gcoef * (-2.0 * diff));
      add_scaled(acc, gd[k], gcoef * (2.0 * diff));
    }
  }
  return acc;
}

std::map<std::string, Tensor> finite_difference_gradients(
    const LossConfig& cfg, std::span<const PreferenceTriple> batch,
    ModelParams policy, const ModelParams& reference,
    const BatchInputs& inputs, double h) {
  if (!(std::isfinite(h) && h > 0.0))
    throw InvalidArgument("finite differences: h must be positive");
  RefLogprobCache ref_cache(reference);
  std::map<std::string, Tensor> out = zero_like_params(policy);
  for_each_param(policy, [&](const std::string& name, Tensor& t) {
    Tensor& g = out.at(name);
    for (size_t i = 0; i < t.data.size(); ++i) {
      const double saved = t.data[i];
      t.data[i] = saved + h;
      const double up =
          batch_loss_value(cfg, batch, policy, reference, inputs, &ref_cache);
      t.data[i] = saved - h;
      const double down =
          batch_loss_value(cfg, batch, policy, reference, inputs, &ref_cache);
      t.data[i] = saved;
      g.data[i] = (up - down) / (2.0 * h);
    }
  });
  return out;
}

double gradient_relative_error(const std::map<std::string, Tensor>& a,
                               const std::map<std::string, Tensor>& b) {
  if (a.size() != b.size())
    throw LengthMismatch("gradient sets have different parameter counts");
  double scale = 0.0, max_diff = 0.0;
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end())
      throw LengthMismatch("gradient sets disagree on parameter " + name);
    const Tensor& tb = it->second;
    if (ta.shape != tb.shape)
      throw ShapeMismatch("gradient shapes differ for " + name);
    for (size_t i = 0; i < ta.data.size(); ++i) {
      scale = std::max({scale, std::abs(ta.data[i]), std::abs(tb.data[i])});
      max_diff = std::max(max_diff, std::abs(ta.data[i] - tb.data[i]));
    }
  }
  return max_diff / std::max(scale, 1e-12);
}

std::vector<VerifyReport> check_gradients(const ModelParams& params,
                                          std::span<const PreferenceTriple> batch,
                                          const LossConfig& cfg, uint64_t seed,
                                          const ModelParams* reference) {
  if (param_count(params) > 10000)
    throw InvalidArgument(
        "check_gradients: model too large for finite differences");
  if (batch.empty()) throw InvalidArgument("check_gradients: empty batch");
  ModelParams derived_ref;
  if (reference == nullptr) {
    ModelConfig rc = params.config;
    rc.seed = derive_seed(params.config.seed, kGradRefStream);
    derived_ref = init_params(rc);
    reference = &derived_ref;
  }
  const BatchInputs inputs = prepare_batch_inputs(cfg, batch, params, seed);
  const auto ad = autodiff_gradients(cfg, batch, params, *reference, inputs);
  const auto closed = closed_form_gradients(cfg, batch, params, *reference, inputs);
  const auto fd =
      finite_difference_gradients(cfg, batch, params, *reference, inputs);

  VerifyReport vs_fd;
  vs_fd.name = "gradcheck_ad_vs_fd";
  vs_fd.observed = gradient_relative_error(ad, fd);
  vs_fd.expected = 0.0;
  vs_fd.tolerance = 1e-4;
  vs_fd.passed = vs_fd.observed < vs_fd.tolerance;

  VerifyReport vs_closed;
  vs_closed.name = "gradcheck_ad_vs_closed";
  vs_closed.observed = gradient_relative_error(ad, closed);
  vs_closed.expected = 0.0;
  vs_closed.tolerance = 1e-6;
  vs_closed.passed = vs_closed.observed < vs_closed.tolerance;
  return {vs_fd, vs_closed};
}

WeightHistogram weight_histogram(const ModelParams& params,
                                 const Corpus& corpus, double lambda,
                                 int64_t bins) {
  if (bins < 1) throw InvalidArgument("weight_histogram: bins must be >= 1");
  if (corpus.empty()) throw InvalidArgument("weight_histogram: empty corpus");
  std::vector<int64_t> overall(static_cast<size_t>(bins), 0);
  std::vector<int64_t> planted(static_cast<size_t>(bins), 0);
  std::vector<int64_t> filler(static_cast<size_t>(bins), 0);
  for (const PreferenceTriple& t : corpus) {
    const ImportanceWeights iw =
        importance_weights_for_response(params, t.x, t.y_w, lambda);
    const std::set<int32_t> critical(t.critical_w.begin(), t.critical_w.end());
    for (size_t pos = 0; pos < iw.mixed.size(); ++pos) {
      const double w = iw.mixed[pos];
      auto bin = static_cast<int64_t>(w * static_cast<double>(bins));
      bin = std::min<int64_t>(std::max<int64_t>(bin, 0), bins - 1);
      ++overall[static_cast<size_t>(bin)];
      if (critical.count(static_cast<int32_t>(pos)) != 0)
        ++planted[static_cast<size_t>(bin)];
      else
        ++filler[static_cast<size_t>(bin)];
    }
  }
  auto to_rows = [&](const std::vector<int64_t>& counts) {
    int64_t total = 0;
    for (int64_t c : counts) total += c;
    std::vector<HistogramRow> rows;
    rows.reserve(counts.size());
    for (int64_t k = 0; k < bins; ++k) {
      HistogramRow r;
      r.bin_low = static_cast<double>(k) / static_cast<double>(bins);
      r.bin_high = static_cast<double>(k + 1) / static_cast<double>(bins);
      r.count = counts[static_cast<size_t>(k)];
      r.frequency =
          total > 0 ? static_cast<double>(r.count) / static_cast<double>(total)
                    : 0.0;
      rows.push_back(r);
    }
    return rows;
  };
  WeightHistogram out;
  out.overall = to_rows(overall);
  out.planted = to_rows(planted);
  out.filler = to_rows(filler);
  return out;
}

std::string histogram_to_csv(const std::vector<HistogramRow>& rows) {
  std::ostringstream os;
  os << "bin_low,bin_high,count,frequency\n";
  for (const HistogramRow& r : rows) {
    os << format_double(r.bin_low) << ',' << format_double(r.bin_high) << ','
       << r.count << ',' << format_double(r.frequency) << '\n';
  }
  return os.str();
}

bool stochastically_dominates(const std::vector<HistogramRow>& high,
                              const std::vector<HistogramRow>& low,
                              double eps) {
  if (high.size() != low.size())
    throw LengthMismatch("dominance check: histograms have different bins");
  double cdf_high = 0.0, cdf_low = 0.0;
  for (size_t i = 0; i < high.size(); ++i) {
    cdf_high += high[i].frequency;
    cdf_low += low[i].frequency;
    if (cdf_high > cdf_low + eps) return false;
  }
  return true;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size())
    throw LengthMismatch("pearson: column lengths differ");
  if (xs.size() < 2) throw TooFewSamples("pearson: needs >= 2 samples");
  const bool x_const =
      std::all_of(xs.begin(), xs.end(), [&](double v) { return v == xs[0]; });
  const bool y_const =
      std::all_of(ys.begin(), ys.end(), [&](double v) { return v == ys[0]; });
  if (x_const || y_const)
    throw DegenerateVariance("pearson: constant column has undefined r");
  const auto n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  return sxy / std::sqrt(sxx * syy);
}

double pearson_weight_accuracy(const ModelParams& params,
                               const ModelParams& reference,
                               const Corpus& corpus, int64_t top_k,
                               double lambda) {
  if (corpus.size() < 2)
    throw TooFewSamples("pearson_weight_accuracy: needs >= 2 triples");
  if (top_k < 1) throw InvalidArgument("pearson_weight_accuracy: top_k >= 1");
  std::vector<double> weight_col, bit_col;
  weight_col.reserve(corpus.size());
  bit_col.reserve(corpus.size());
  for (const PreferenceTriple& t : corpus) {
    ImportanceWeights iw =
        importance_weights_for_response(params, t.x, t.y_w, lambda);
    std::vector<double> mixed = iw.mixed;
    std::sort(mixed.begin(), mixed.end(), std::greater<double>());
    const size_t k = std::min<size_t>(static_cast<size_t>(top_k), mixed.size());
    double mean = 0.0;
    for (size_t i = 0; i < k; ++i) mean += mixed[i];
    mean /= static_cast<double>(k);
    weight_col.push_back(mean);

    const auto tw = static_cast<double>(t.y_w.size());
    const auto tl = static_cast<double>(t.y_l.size());
    const std::vector<double> ww(t.y_w.size(), 1.0 / tw);
    const std::vector<double> wl(t.y_l.size(), 1.0 / tl);
    const double delta =
        delta_r_token(params, reference, t.x, t.y_w, t.y_l, ww, wl);
    bit_col.push_back(delta > 0.0 ? 1.0 : 0.0);
  }
  return pearson(weight_col, bit_col);
}

double bleu4(const TokenSequence& hypothesis,
             const std::vector<TokenSequence>& references) {
  if (references.empty()) throw InvalidArgument("bleu4: no references");
  const auto c = static_cast<int64_t>(hypothesis.size());
  if (c == 0) return 0.0;

  // Closest reference length; ties resolved toward the shorter one.
  int64_t r = static_cast<int64_t>(references[0].size());
  for (const TokenSequence& ref : references) {
    const auto len = static_cast<int64_t>(ref.size());
    const int64_t best = std::abs(len - c) - std::abs(r - c);
    if (best < 0 || (best == 0 && len < r)) r = len;
  }

  double log_p_sum = 0.0;
  int64_t included = 0;
  using Gram = std::vector<TokenId>;
  for (int64_t n = 1; n <= 4; ++n) {
    const int64_t total = c - n + 1;
    if (total <= 0) continue;
    std::map<Gram, int64_t> hyp_counts;
    for (int64_t i = 0; i < total; ++i) {
      hyp_counts[Gram(hypothesis.begin() + i, hypothesis.begin() + i + n)]++;
    }
    std::map<Gram, int64_t> ref_max;
    for (const TokenSequence& ref : references) {
      std::map<Gram, int64_t> rc;
      for (int64_t i = 0; i + n <= static_cast<int64_t>(ref.size()); ++i) {
        rc[Gram(ref.begin() + i, ref.begin() + i + n)]++;
      }
      for (const auto& [g, k] : rc) {
        auto it = ref_max.find(g);
        if (it == ref_max.end())
          ref_max.emplace(g, k);
        else
          it->second = std::max(it->second, k);
      }
    }
    int64_t clipped = 0;
    for (const auto& [g, k] : hyp_counts) {
      auto it = ref_max.find(g);
      if (it != ref_max.end()) clipped += std::min(k, it->second);
    }
    if (clipped == 0) return 0.0;
    log_p_sum += std::log(static_cast<double>(clipped) /
                          static_cast<double>(total));
    ++included;
  }
  if (included == 0) return 0.0;
  const double geo = std::exp(log_p_sum / static_cast<double>(included));
  const double bp =
      c >= r ? 1.0
             : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return bp * geo;
}

double distinct_n(const std::vector<TokenSequence>& samples, int64_t n) {
  if (n < 1) throw InvalidArgument("distinct_n: n must be >= 1");
  using Gram = std::vector<TokenId>;
  std::set<Gram> unique;
  int64_t total = 0;
  for (const TokenSequence& s : samples) {
    for (int64_t i = 0; i + n <= static_cast<int64_t>(s.size()); ++i) {
      unique.insert(Gram(s.begin() + i, s.begin() + i + n));
      ++total;
    }
  }
  return total > 0 ? static_cast<double>(unique.size()) /
                         static_cast<double>(total)
                   : 0.0;
}

DiversityMetrics diversity_metrics(const std::vector<TokenSequence>& samples) {
  if (samples.size() < 2)
    throw TooFewSamples("diversity_metrics: needs >= 2 samples");
  DiversityMetrics out;

  double bleu_sum = 0.0;
  for (size_t i = 0; i < samples.size(); ++i) {
    std::vector<TokenSequence> refs;
    refs.reserve(samples.size() - 1);
    for (size_t j = 0; j < samples.size(); ++j)
      if (j != i) refs.push_back(samples[j]);
    bleu_sum += bleu4(samples[i], refs);
  }
  out.self_bleu = bleu_sum / static_cast<double>(samples.size());

  out.distinct2 = distinct_n(samples, 2);
  out.distinct4 = distinct_n(samples, 4);

  std::map<TokenId, int64_t> unigrams;
  int64_t total = 0;
  for (const TokenSequence& s : samples) {
    for (TokenId t : s) {
      ++unigrams[t];
      ++total;
    }
  }
  double h = 0.0;
  for (const auto& [tok, k] : unigrams) {
    const double p = static_cast<double>(k) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  out.entropy = total > 0 ? h : 0.0;
  return out;
}

std::vector<TokenSequence> generate_samples(const ModelParams& params,
                                            const Corpus& corpus,
                                            int64_t n_samples, int64_t max_new,
                                            double temperature, uint64_t seed,
                                            int64_t n_prompts) {
  if (corpus.empty()) throw InvalidArgument("generate_samples: empty corpus");
  if (n_samples < 0)
    throw InvalidArgument("generate_samples: n_samples must be >= 0");
  if (n_prompts < 1)
    throw InvalidArgument("generate_samples: n_prompts must be >= 1");
  const size_t pool = std::min(static_cast<size_t>(n_prompts), corpus.size());
  std::vector<TokenSequence> out;
  out.reserve(static_cast<size_t>(n_samples));
  const uint64_t base = derive_seed(seed, kGenStreamBase);
  for (int64_t k = 0; k < n_samples; ++k) {
    const SequenceState state{corpus[static_cast<size_t>(k) % pool].x, {}};
    out.push_back(sample(params, state, max_new, temperature,
                         derive_seed(base, static_cast<uint64_t>(k))));
  }
  return out;
}

std::vector<NoiseSweepRow> noise_sweep(const std::vector<double>& rates,
                                       const TrainConfig& cfg,
                                       const CorpusSpec& corpus_spec,
                                       const ModelConfig& model_cfg) {
  if (rates.empty()) throw InvalidArgument("noise_sweep: no rates");
  cfg.validate();
  model_cfg.validate();

  CorpusSpec clean_spec = corpus_spec;
  clean_spec.noise_rate = 0.0;
  clean_spec.validate();
  const Corpus clean = generate_corpus(clean_spec);
  const ModelParams init = init_params(model_cfg);

  std::vector<LossVariant> variants{LossVariant::kDPO};
  if (cfg.loss.variant != LossVariant::kDPO)
    variants.push_back(cfg.loss.variant);

  std::vector<NoiseSweepRow> rows;
  for (const double rate : rates) {
    CorpusSpec s = corpus_spec;
    s.noise_rate = rate;
    s.validate();
    const Corpus noisy = generate_corpus(s);
    for (const LossVariant v : variants) {
      TrainConfig c = cfg;
      c.loss.variant = v;
      c.checkpoint_dir.clear();
      c.n_checkpoints = 0;
      c.eval_every = 0;
      const TrainResult r = train_from(c, noisy, init, init, nullptr);
      rows.push_back(
          {rate, loss_variant_name(v), evaluate(r.params, init, clean)});
    }
  }
  return rows;
}

std::string noise_sweep_to_csv(const std::vector<NoiseSweepRow>& rows) {
  std::ostringstream os;
  os << "rate,variant,accuracy\n";
  for (const NoiseSweepRow& r : rows) {
    os << format_double(r.rate) << ',' << r.variant << ','
       << format_double(r.accuracy) << '\n';
  }
  return os.str();
}

double sweep_degradation(const std::vector<NoiseSweepRow>& rows,
                         const std::string& variant, double rate_from,
                         double rate_to) {
  auto find = [&](double rate) {
    for (const NoiseSweepRow& r : rows) {
      if (r.variant == variant && r.rate == rate) return r.accuracy;
    }
    throw InvalidArgument("sweep_degradation: missing row for " + variant);
  };
  return find(rate_from) - find(rate_to);
}

}  // namespace tidpo
