#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tidpo/losses.hpp"

namespace tidpo {

enum class OptimizerKind { kSGD, kAdam };

const char* optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& s);

struct TrainConfig {
  LossConfig loss;
  int64_t epochs = 3;
  int64_t batch_size = 16;
  double lr = 0.015;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t eval_every = 0;      // full-corpus accuracy every k steps; 0 = off
  uint64_t seed = 0;
  std::string checkpoint_dir;  // empty = no checkpoint files
  // Loss-curve checkpoints (see LossCurvePoint); 0 disables the curve.
  int64_t n_checkpoints = 0;
  // Cap on triples used for curve evaluation (prefix of the corpus).
  int64_t eval_subset = 64;

  void validate() const;
};

struct TrainLogRow {
  int64_t step = 0;    // 1-based optimizer step the row describes
  double epoch = 0.0;  // step / steps_per_epoch
  LossBreakdown loss;  // batch loss at this step (before the update)
  std::optional<double> eval_accuracy;
  int64_t wall_ms = 0;  // measured; excluded from persisted CSV
};

// One point of the aligned convergence curve. `l_own` is the run's own
// training objective on the eval subset; `l_aligned` is the shared
// comparison functional (the TI-DPO objective config) evaluated on this
// model, which is what makes two runs' columns comparable.
struct LossCurvePoint {
  int64_t step = 0;
  double epoch = 0.0;
  double l_own = 0.0;
  double l_aligned = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<TrainLogRow> log;
  std::vector<LossCurvePoint> curve;
};

// SGD / Adam over the named parameter tensors. Gradients are keyed by
// for_each_param name.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double beta1, double beta2,
            double eps);
  void apply(ModelParams& p, const std::map<std::string, Tensor>& grads);
  int64_t step_count() const { return t_; }
  uint64_t state_hash() const;

 private:
  OptimizerKind kind_;
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// Algorithm: shuffle per epoch, two passes per batch (weights+anchors from
// the current policy, then one differentiable loss graph), optimizer step,
// logging. The reference model is the frozen initial snapshot.
TrainResult train(const TrainConfig& cfg, const Corpus& corpus,
                  const ModelConfig& model_cfg);

// Same loop but starting from explicit policy/reference (used for paired
// runs and sweeps that share one init). `aligned_loss` overrides the
// functional used for the curve's l_aligned column.
TrainResult train_from(const TrainConfig& cfg, const Corpus& corpus,
                       ModelParams policy, const ModelParams& reference,
                       const LossConfig* aligned_loss = nullptr);

// Fraction of triples with delta_r_token > 0 under uniform weights (ties
// count as incorrect), so the measure is loss-variant-agnostic.
double evaluate(const ModelParams& params, const ModelParams& reference,
                const Corpus& corpus);

struct PairedRunResult {
  TrainResult dpo;
  TrainResult tidpo;
};

// Trains the configured variant and a plain-DPO twin from identical init,
// seed, and data order, logging aligned loss curves at n_checkpoints
// evenly spaced steps (both endpoints included).
PairedRunResult paired_run(const TrainConfig& cfg, const Corpus& corpus,
                           const ModelConfig& model_cfg,
                           int64_t n_checkpoints = 12);

// CSV serialization of the training log (wall_ms intentionally omitted so
// reruns are byte-identical).
std::string train_log_to_csv(const std::vector<TrainLogRow>& rows);
std::string curve_to_csv(const std::vector<LossCurvePoint>& rows);

}  // namespace tidpo
