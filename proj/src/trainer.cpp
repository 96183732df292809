#include "tidpo/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <utility>

#include "tidpo/errors.hpp"
#include "tidpo/io.hpp"
#include "tidpo/rng.hpp"

namespace tidpo {
namespace {

constexpr uint64_t kShuffleStream = 0x65706f6368736866ull;  // "epochshf"
constexpr uint64_t kEvalStream = 0x6576616c616e6368ull;     // "evalanch"

void hash_bytes(uint64_t& h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
}

// Evenly spaced optimizer-step counts including 0 and total (deduplicated,
// so short runs may yield fewer than n points).
std::vector<int64_t> checkpoint_steps(int64_t n_checkpoints, int64_t total) {
  std::vector<int64_t> steps;
  if (n_checkpoints <= 0) return steps;
  if (n_checkpoints == 1) {
    steps.push_back(total);
    return steps;
  }
  for (int64_t i = 0; i < n_checkpoints; ++i) {
    const double f = static_cast<double>(i) * static_cast<double>(total) /
                     static_cast<double>(n_checkpoints - 1);
    steps.push_back(std::llround(f));
  }
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  return steps;
}

std::string csv_double(double v) { return format_double(v); }

}  // namespace

const char* optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kSGD:
      return "sgd";
    case OptimizerKind::kAdam:
      return "adam";
  }
  throw InvalidArgument("unknown optimizer kind");
}

OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSGD;
  if (s == "adam") return OptimizerKind::kAdam;
  throw InvalidArgument("unknown optimizer name: " + s);
}

void TrainConfig::validate() const {
  loss.validate();
  if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (!(std::isfinite(lr) && lr >= 0.0))
    throw InvalidArgument("lr must be finite and >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0))
    throw InvalidArgument("adam_beta1 must be in [0,1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw InvalidArgument("adam_beta2 must be in [0,1)");
  if (!(std::isfinite(adam_eps) && adam_eps > 0.0))
    throw InvalidArgument("adam_eps must be positive");
  if (eval_every < 0) throw InvalidArgument("eval_every must be >= 0");
  if (n_checkpoints < 0) throw InvalidArgument("n_checkpoints must be >= 0");
  if (eval_subset < 1) throw InvalidArgument("eval_subset must be >= 1");
}

Optimizer::Optimizer(OptimizerKind kind, double lr, double beta1, double beta2,
                     double eps)
    : kind_(kind), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void Optimizer::apply(ModelParams& p,
                      const std::map<std::string, Tensor>& grads) {
  ++t_;
  const double bias1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for_each_param(p, [&](const std::string& name, Tensor& t) {
    auto it = grads.find(name);
    if (it == grads.end())
      throw InvalidArgument("optimizer: missing gradient for " + name);
    const Tensor& g = it->second;
    if (g.shape != t.shape)
      throw ShapeMismatch("optimizer: gradient shape mismatch for " + name);
    if (kind_ == OptimizerKind::kSGD) {
      for (size_t i = 0; i < t.data.size(); ++i) t.data[i] -= lr_ * g.data[i];
      return;
    }
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) m.assign(t.data.size(), 0.0);
    if (v.empty()) v.assign(t.data.size(), 0.0);
    for (size_t i = 0; i < t.data.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g.data[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g.data[i] * g.data[i];
      const double mhat = m[i] / bias1;
      const double vhat = v[i] / bias2;
      t.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  });
}

uint64_t Optimizer::state_hash() const {
  uint64_t h = 14695981039346656037ull;
  const int kind = static_cast<int>(kind_);
  hash_bytes(h, &kind, sizeof(kind));
  hash_bytes(h, &lr_, sizeof(lr_));
  hash_bytes(h, &b1_, sizeof(b1_));
  hash_bytes(h, &b2_, sizeof(b2_));
  hash_bytes(h, &eps_, sizeof(eps_));
  hash_bytes(h, &t_, sizeof(t_));
  for (const auto* table : {&m_, &v_}) {
    for (const auto& [name, vals] : *table) {
      hash_bytes(h, name.data(), name.size());
      hash_bytes(h, vals.data(), vals.size() * sizeof(double));
    }
  }
  return h;
}

double evaluate(const ModelParams& params, const ModelParams& reference,
                const Corpus& corpus) {
  if (corpus.empty()) throw InvalidArgument("evaluate: corpus is empty");
  int64_t correct = 0;
  for (const PreferenceTriple& t : corpus) {
    const auto tw = static_cast<double>(t.y_w.size());
    const auto tl = static_cast<double>(t.y_l.size());
    const std::vector<double> ww(t.y_w.size(), 1.0 / tw);
    const std::vector<double> wl(t.y_l.size(), 1.0 / tl);
    const double delta =
        delta_r_token(params, reference, t.x, t.y_w, t.y_l, ww, wl);
    if (delta > 0.0) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(corpus.size());
}

TrainResult train_from(const TrainConfig& cfg, const Corpus& corpus,
                       ModelParams policy, const ModelParams& reference,
                       const LossConfig* aligned_loss) {
  cfg.validate();
  if (corpus.empty()) throw InvalidArgument("train: corpus is empty");
  const auto n = static_cast<int64_t>(corpus.size());
  const int64_t bsz = std::min<int64_t>(cfg.batch_size, n);
  const int64_t steps_per_epoch = (n + bsz - 1) / bsz;
  const int64_t total_steps = cfg.epochs * steps_per_epoch;

  Optimizer opt(cfg.optimizer, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps);
  RefLogprobCache ref_cache(reference);

  const uint64_t eval_seed = derive_seed(cfg.seed, kEvalStream);
  const auto n_eval = static_cast<size_t>(std::min<int64_t>(cfg.eval_subset, n));
  const Corpus eval_batch(corpus.begin(),
                          corpus.begin() + static_cast<std::ptrdiff_t>(n_eval));

  TrainResult out;
  const std::vector<int64_t> ckpts =
      checkpoint_steps(cfg.n_checkpoints, total_steps);
  size_t ckpt_ptr = 0;

  auto record_curve = [&](int64_t completed_steps) {
    LossCurvePoint pt;
    pt.step = completed_steps;
    pt.epoch = static_cast<double>(completed_steps) /
               static_cast<double>(steps_per_epoch);
    pt.l_own =
        loss_total(cfg.loss, eval_batch, policy, reference, eval_seed,
                   &ref_cache)
            .l_total;
    pt.l_aligned =
        aligned_loss == nullptr
            ? pt.l_own
            : loss_total(*aligned_loss, eval_batch, policy, reference,
                         eval_seed, &ref_cache)
                  .l_total;
    pt.accuracy = evaluate(policy, reference, eval_batch);
    out.curve.push_back(pt);
  };

  namespace fs = std::filesystem;
  const bool save_ckpts = !cfg.checkpoint_dir.empty();
  if (save_ckpts) fs::create_directories(cfg.checkpoint_dir);
  auto ckpt_path = [&](const std::string& name) {
    return (fs::path(cfg.checkpoint_dir) / name).string();
  };

  double best_acc = -1.0;
  ModelParams last_good = policy;

  try {
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::vector<int64_t> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle_rng(derive_seed(derive_seed(cfg.seed, kShuffleStream),
                                  static_cast<uint64_t>(epoch)));
      shuffle_rng.shuffle(order);

      for (int64_t b = 0; b < steps_per_epoch; ++b) {
        const int64_t step_index = epoch * steps_per_epoch + b;
        while (ckpt_ptr < ckpts.size() && ckpts[ckpt_ptr] == step_index) {
          record_curve(step_index);
          ++ckpt_ptr;
        }
        const auto t0 = std::chrono::steady_clock::now();

        Corpus batch;
        const int64_t lo = b * bsz;
        const int64_t hi = std::min<int64_t>(n, lo + bsz);
        batch.reserve(static_cast<size_t>(hi - lo));
        for (int64_t i = lo; i < hi; ++i)
          batch.push_back(corpus[static_cast<size_t>(order[static_cast<size_t>(i)])]);

        // Pass 1: attribution weights and anchors, detached from training.
        const BatchInputs inputs = prepare_batch_inputs(
            cfg.loss, batch, policy, batch_input_seed(cfg.seed, step_index));

        // Pass 2: differentiable loss on its own tape.
        Tape tape;
        ModelGraph graph(tape, policy, LeafMode::kParams);
        const BatchLossGraph loss_graph = build_batch_loss(
            graph, cfg.loss, batch, reference, inputs, &ref_cache);

        std::map<ValueId, Tensor> grads_by_id = tape.backward(loss_graph.root);
        std::map<std::string, Tensor> grads;
        for (const auto& [name, vid] : graph.param_ids()) {
          auto it = grads_by_id.find(vid);
          if (it == grads_by_id.end())
            throw InvalidArgument("train: missing gradient for " + name);
          grads.emplace(name, std::move(it->second));
        }
        opt.apply(policy, grads);
        bool params_finite = true;
        for_each_param(std::as_const(policy),
                       [&](const std::string&, const Tensor& t) {
                         params_finite = params_finite && t.all_finite();
                       });
        if (!params_finite)
          throw NonFinite("parameters non-finite after update at step " +
                          std::to_string(step_index + 1));
        last_good = policy;

        TrainLogRow row;
        row.step = step_index + 1;
        row.epoch = static_cast<double>(row.step) /
                    static_cast<double>(steps_per_epoch);
        row.loss = loss_graph.breakdown;
        if (cfg.eval_every > 0 && row.step % cfg.eval_every == 0) {
          const double acc = evaluate(policy, reference, corpus);
          row.eval_accuracy = acc;
          if (save_ckpts && acc > best_acc) {
            best_acc = acc;
            save_checkpoint(policy, ckpt_path("best.json"));
          }
        }
        row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        out.log.push_back(row);
      }
      if (save_ckpts)
        save_checkpoint(policy,
                        ckpt_path("epoch_" + std::to_string(epoch + 1) +
                                  ".json"));
    }

    while (ckpt_ptr < ckpts.size()) {
      record_curve(total_steps);
      ++ckpt_ptr;
    }
    if (save_ckpts) save_checkpoint(policy, ckpt_path("final.json"));
  } catch (const NonFinite& e) {
    if (save_ckpts) save_checkpoint(last_good, ckpt_path("last_good.json"));
    throw NonFiniteLoss(std::string("training aborted on non-finite value "
                                    "(last good checkpoint preserved): ") +
                        e.what());
  }

  out.params = std::move(policy);
  return out;
}

TrainResult train(const TrainConfig& cfg, const Corpus& corpus,
                  const ModelConfig& model_cfg) {
  model_cfg.validate();
  ModelParams init = init_params(model_cfg);
  const ModelParams reference = init;
  return train_from(cfg, corpus, std::move(init), reference, nullptr);
}

PairedRunResult paired_run(const TrainConfig& cfg, const Corpus& corpus,
                           const ModelConfig& model_cfg,
                           int64_t n_checkpoints) {
  model_cfg.validate();
  const ModelParams init = init_params(model_cfg);

  TrainConfig ti_cfg = cfg;
  ti_cfg.n_checkpoints = n_checkpoints;
  TrainConfig dpo_cfg = ti_cfg;
  dpo_cfg.loss.variant = LossVariant::kDPO;
  if (!cfg.checkpoint_dir.empty()) {
    namespace fs = std::filesystem;
    ti_cfg.checkpoint_dir = (fs::path(cfg.checkpoint_dir) / "tidpo").string();
    dpo_cfg.checkpoint_dir = (fs::path(cfg.checkpoint_dir) / "dpo").string();
    fs::create_directories(cfg.checkpoint_dir);
    save_checkpoint(init,
                    (fs::path(cfg.checkpoint_dir) / "reference.json").string());
  }

  PairedRunResult out;
  // Both runs share init, reference, seed, and data order; the aligned
  // column evaluates the configured objective on both models so the curves
  // are directly comparable.
  out.dpo = train_from(dpo_cfg, corpus, init, init, &cfg.loss);
  out.tidpo = train_from(ti_cfg, corpus, init, init, nullptr);
  return out;
}

std::string train_log_to_csv(const std::vector<TrainLogRow>& rows) {
  std::ostringstream os;
  os << "step,epoch,delta_r_token,l_dpo_w,l_triplet,l_total,margin_active,"
        "eval_accuracy\n";
  for (const TrainLogRow& r : rows) {
    os << r.step << ',' << csv_double(r.epoch) << ','
       << csv_double(r.loss.delta_r_token) << ',' << csv_double(r.loss.l_dpo_w)
       << ',' << csv_double(r.loss.l_triplet) << ','
       << csv_double(r.loss.l_total) << ',' << (r.loss.margin_active ? 1 : 0)
       << ',';
    if (r.eval_accuracy.has_value()) os << csv_double(*r.eval_accuracy);
    os << '\n';
  }
  return os.str();
}

std::string curve_to_csv(const std::vector<LossCurvePoint>& rows) {
  std::ostringstream os;
  os << "step,epoch,l_own,l_aligned,accuracy\n";
  for (const LossCurvePoint& r : rows) {
    os << r.step << ',' << csv_double(r.epoch) << ',' << csv_double(r.l_own)
       << ',' << csv_double(r.l_aligned) << ',' << csv_double(r.accuracy)
       << '\n';
  }
  return os.str();
}

}  // namespace tidpo
