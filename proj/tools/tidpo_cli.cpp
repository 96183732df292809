// Command-line front end: corpus generation, training (single and paired),
// ablations, lambda sweeps, weight reports, and the verification checks.
// Every output file is written atomically and is bit-identical across reruns
// with the same flags and seeds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tidpo/attribution.hpp"
#include "tidpo/datagen.hpp"
#include "tidpo/errors.hpp"
#include "tidpo/io.hpp"
#include "tidpo/losses.hpp"
#include "tidpo/microlm.hpp"
#include "tidpo/rng.hpp"
#include "tidpo/trainer.hpp"
#include "tidpo/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct ModelFlags {
  int64_t vocab = 64;
  int64_t d_model = 32;
  int64_t layers = 2;
  int64_t heads = 2;
  int64_t max_seq = 64;
  uint64_t model_seed = 0;

  tidpo::ModelConfig to_config() const {
    tidpo::ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = d_model;
    c.n_layers = layers;
    c.n_heads = heads;
    c.max_seq_len = max_seq;
    c.seed = model_seed;
    c.validate();
    return c;
  }
};

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
  cmd->add_option("--vocab", m.vocab, "Vocabulary size")->capture_default_str();
  cmd->add_option("--d-model", m.d_model, "Embedding width")
      ->capture_default_str();
  cmd->add_option("--layers", m.layers, "Transformer blocks")
      ->capture_default_str();
  cmd->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
  cmd->add_option("--max-seq", m.max_seq, "Maximum sequence length")
      ->capture_default_str();
  cmd->add_option("--model-seed", m.model_seed, "Parameter init seed")
      ->capture_default_str();
}

struct TrainFlags {
  std::string variant = "tidpo";
  double beta = 0.1;
  double gamma = 0.1;
  double alpha = 0.3;
  double lambda = 0.7;
  double lr = 0.015;
  int64_t epochs = 3;
  int64_t batch = 16;
  uint64_t seed = 0;
  std::string optimizer = "adam";
  int64_t eval_every = 0;
  int64_t eval_subset = 64;

  tidpo::TrainConfig to_config() const {
    tidpo::TrainConfig c;
    c.loss.variant = tidpo::loss_variant_from_name(variant);
    c.loss.beta = beta;
    c.loss.gamma = gamma;
    c.loss.alpha_margin = alpha;
    c.loss.lambda = lambda;
    c.lr = lr;
    c.epochs = epochs;
    c.batch_size = batch;
    c.seed = seed;
    c.optimizer = tidpo::optimizer_from_name(optimizer);
    c.eval_every = eval_every;
    c.eval_subset = eval_subset;
    c.validate();
    return c;
  }
};

void add_train_flags(CLI::App* cmd, TrainFlags& t, bool include_lambda = true) {
  cmd->add_option("--variant", t.variant,
                  "Loss variant: tidpo|dpo|no-triplet|uniform-weight|"
                  "random-weight|no-gaussian-prior|softmax-prior")
      ->capture_default_str();
  cmd->add_option("--beta", t.beta, "Preference temperature")
      ->capture_default_str();
  cmd->add_option("--gamma", t.gamma, "Triplet loss weight")
      ->capture_default_str();
  cmd->add_option("--alpha", t.alpha, "Triplet margin")->capture_default_str();
  if (include_lambda)
    cmd->add_option("--lambda", t.lambda, "Importance/prior mix")
        ->capture_default_str();
  cmd->add_option("--lr", t.lr, "Learning rate")->capture_default_str();
  cmd->add_option("--epochs", t.epochs, "Training epochs")
      ->capture_default_str();
  cmd->add_option("--batch", t.batch, "Batch size")->capture_default_str();
  cmd->add_option("--seed", t.seed, "Training seed")->capture_default_str();
  cmd->add_option("--optimizer", t.optimizer, "sgd|adam")
      ->capture_default_str();
  cmd->add_option("--eval-every", t.eval_every,
                  "Full-corpus eval cadence in steps (0 = off)")
      ->capture_default_str();
  cmd->add_option("--eval-subset", t.eval_subset,
                  "Max triples used for checkpoint loss curves")
      ->capture_default_str();
}

tidpo::Corpus load_corpus_checked(const std::string& path, int64_t vocab) {
  return tidpo::load_corpus(path, vocab);
}

void write_text(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  tidpo::atomic_write_file(path, text);
}

std::string dump_reports(const std::vector<tidpo::VerifyReport>& reports) {
  return tidpo::verify_reports_to_json(reports);
}

// Emits reports to stdout and (optionally) a file; returns the exit code.
int finish_verify(const std::vector<tidpo::VerifyReport>& reports,
                  const std::string& out_path) {
  const std::string text = dump_reports(reports);
  std::cout << text;
  if (!out_path.empty()) write_text(out_path, text);
  return tidpo::all_passed(reports) ? 0 : 1;
}

ordered_json run_summary(const std::string& variant,
                         const tidpo::TrainResult& result,
                         const tidpo::ModelParams& reference,
                         const tidpo::Corpus& corpus) {
  ordered_json o;
  o["variant"] = variant;
  o["final_accuracy"] = tidpo::evaluate(result.params, reference, corpus);
  if (!result.log.empty()) {
    o["final_l_total"] = result.log.back().loss.l_total;
    o["final_l_dpo_w"] = result.log.back().loss.l_dpo_w;
  }
  o["params_hash"] = tidpo::params_hash(result.params);
  return o;
}

std::string paired_curve_csv(const tidpo::TrainResult& dpo,
                             const tidpo::TrainResult& tidpo_run) {
  if (dpo.curve.size() != tidpo_run.curve.size())
    throw tidpo::LengthMismatch("paired runs logged different curve lengths");
  std::ostringstream os;
  os << "step,epoch,dpo_loss,tidpo_loss,dpo_accuracy,tidpo_accuracy\n";
  for (size_t i = 0; i < dpo.curve.size(); ++i) {
    const auto& a = dpo.curve[i];
    const auto& b = tidpo_run.curve[i];
    if (a.step != b.step)
      throw tidpo::LengthMismatch("paired curves disagree on logged steps");
    os << a.step << ',' << tidpo::format_double(a.epoch) << ','
       << tidpo::format_double(a.l_aligned) << ','
       << tidpo::format_double(b.l_aligned) << ','
       << tidpo::format_double(a.accuracy) << ','
       << tidpo::format_double(b.accuracy) << '\n';
  }
  return os.str();
}

std::vector<double> require_rates(std::vector<double> rates) {
  if (rates.empty()) rates = {0.0, 0.1, 0.2, 0.4};
  return rates;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-importance guided preference optimization laboratory"};
  app.require_subcommand(1);
  int exit_code = 0;

  // ---------------------------------------------------------------- datagen
  auto* datagen = app.add_subcommand(
      "datagen", "Generate a planted preference corpus (JSONL)");
  tidpo::CorpusSpec dg_spec;
  std::string dg_out;
  datagen->add_option("--n", dg_spec.n_triples, "Number of triples")
      ->capture_default_str();
  datagen->add_option("--prompt-len", dg_spec.prompt_len, "Prompt length")
      ->capture_default_str();
  datagen->add_option("--resp-len", dg_spec.response_len, "Response length")
      ->capture_default_str();
  datagen
      ->add_option("--n-critical", dg_spec.n_critical,
                   "Planted critical tokens per response")
      ->capture_default_str();
  datagen->add_option("--noise", dg_spec.noise_rate, "Label-flip rate [0,1]")
      ->capture_default_str();
  datagen->add_option("--seed", dg_spec.seed, "Generation seed")
      ->capture_default_str();
  datagen->add_option("--vocab", dg_spec.vocab_size, "Vocabulary size")
      ->capture_default_str();
  datagen->add_option("--out", dg_out, "Output JSONL path")->required();
  datagen->callback([&] {
    dg_spec.validate();
    const tidpo::Corpus corpus = tidpo::generate_corpus(dg_spec);
    fs::path p(dg_out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    tidpo::save_corpus(dg_out, corpus);
    std::cout << "wrote " << corpus.size() << " triples to " << dg_out << "\n";
  });

  // ------------------------------------------------------------------ train
  auto* train_cmd =
      app.add_subcommand("train", "Train a policy against its frozen init");
  ModelFlags tr_model;
  TrainFlags tr_flags;
  std::string tr_data, tr_out;
  bool tr_compare = false;
  int64_t tr_checkpoints = 12;
  add_model_flags(train_cmd, tr_model);
  add_train_flags(train_cmd, tr_flags);
  train_cmd->add_option("--data", tr_data, "Corpus JSONL")->required();
  train_cmd->add_option("--out", tr_out, "Output directory")->required();
  train_cmd->add_flag("--compare-dpo", tr_compare,
                      "Also train a plain-DPO twin from the same init and "
                      "emit aligned loss curves");
  train_cmd
      ->add_option("--checkpoints", tr_checkpoints,
                   "Loss-curve points (0 disables the curve)")
      ->capture_default_str();
  train_cmd->callback([&] {
    const tidpo::ModelConfig mc = tr_model.to_config();
    tidpo::TrainConfig cfg = tr_flags.to_config();
    const tidpo::Corpus corpus = load_corpus_checked(tr_data, mc.vocab_size);
    fs::create_directories(tr_out);
    const tidpo::ModelParams reference = tidpo::init_params(mc);
    ordered_json summary;
    if (tr_compare) {
      cfg.checkpoint_dir = (fs::path(tr_out) / "ckpt").string();
      const tidpo::PairedRunResult pr =
          tidpo::paired_run(cfg, corpus, mc, tr_checkpoints);
      write_text((fs::path(tr_out) / "dpo_log.csv").string(),
                 tidpo::train_log_to_csv(pr.dpo.log));
      write_text((fs::path(tr_out) / "tidpo_log.csv").string(),
                 tidpo::train_log_to_csv(pr.tidpo.log));
      write_text((fs::path(tr_out) / "paired_loss.csv").string(),
                 paired_curve_csv(pr.dpo, pr.tidpo));
      summary["dpo"] = run_summary("dpo", pr.dpo, reference, corpus);
      summary["tidpo"] =
          run_summary(tr_flags.variant, pr.tidpo, reference, corpus);
    } else {
      cfg.checkpoint_dir = (fs::path(tr_out) / "ckpt").string();
      cfg.n_checkpoints = tr_checkpoints;
      const tidpo::TrainResult result = tidpo::train(cfg, corpus, mc);
      write_text((fs::path(tr_out) / "train_log.csv").string(),
                 tidpo::train_log_to_csv(result.log));
      if (!result.curve.empty())
        write_text((fs::path(tr_out) / "curve.csv").string(),
                   tidpo::curve_to_csv(result.curve));
      summary = run_summary(tr_flags.variant, result, reference, corpus);
    }
    write_text((fs::path(tr_out) / "summary.json").string(),
               summary.dump(2) + "\n");
    std::cout << summary.dump(2) << "\n";
  });

  // ----------------------------------------------------------------- ablate
  auto* ablate =
      app.add_subcommand("ablate", "Train every loss variant on one corpus");
  ModelFlags ab_model;
  TrainFlags ab_flags;
  std::string ab_data, ab_out;
  add_model_flags(ablate, ab_model);
  add_train_flags(ablate, ab_flags);
  ablate->add_option("--data", ab_data, "Corpus JSONL")->required();
  ablate->add_option("--out", ab_out, "Output CSV path")->required();
  ablate->callback([&] {
    const tidpo::ModelConfig mc = ab_model.to_config();
    const tidpo::Corpus corpus = load_corpus_checked(ab_data, mc.vocab_size);
    const tidpo::ModelParams init = tidpo::init_params(mc);
    const std::vector<tidpo::LossVariant> variants{
        tidpo::LossVariant::kTIDPO,          tidpo::LossVariant::kDPO,
        tidpo::LossVariant::kNoTriplet,      tidpo::LossVariant::kUniformWeight,
        tidpo::LossVariant::kRandomWeight,   tidpo::LossVariant::kNoGaussianPrior,
        tidpo::LossVariant::kSoftmaxPrior};
    std::ostringstream os;
    os << "variant,accuracy,final_l_dpo_w,final_l_total\n";
    for (const tidpo::LossVariant v : variants) {
      tidpo::TrainConfig cfg = ab_flags.to_config();
      cfg.loss.variant = v;
      const tidpo::TrainResult r =
          tidpo::train_from(cfg, corpus, init, init, nullptr);
      os << tidpo::loss_variant_name(v) << ','
         << tidpo::format_double(tidpo::evaluate(r.params, init, corpus))
         << ',' << tidpo::format_double(r.log.back().loss.l_dpo_w) << ','
         << tidpo::format_double(r.log.back().loss.l_total) << '\n';
    }
    write_text(ab_out, os.str());
    std::cout << os.str();
  });

  // ------------------------------------------------------------------ sweep
  auto* sweep = app.add_subcommand(
      "sweep", "Sensitivity sweep over the importance/prior mix");
  ModelFlags sw_model;
  TrainFlags sw_flags;
  std::string sw_data, sw_out;
  std::vector<double> sw_lambdas;
  add_model_flags(sweep, sw_model);
  add_train_flags(sweep, sw_flags, /*include_lambda=*/false);
  sweep->add_option("--data", sw_data, "Corpus JSONL")->required();
  sweep->add_option("--out", sw_out, "Output directory")->required();
  sweep
      ->add_option("--lambda", sw_lambdas,
                   "Mix values to sweep (comma separated)")
      ->delimiter(',');
  sweep->callback([&] {
    const tidpo::ModelConfig mc = sw_model.to_config();
    const tidpo::Corpus corpus = load_corpus_checked(sw_data, mc.vocab_size);
    const tidpo::ModelParams init = tidpo::init_params(mc);
    if (sw_lambdas.empty())
      sw_lambdas = {0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
    std::ostringstream os;
    os << "lambda,accuracy\n";
    std::vector<std::pair<double, double>> cells;
    for (const double lam : sw_lambdas) {
      tidpo::TrainConfig cfg = sw_flags.to_config();
      cfg.loss.lambda = lam;
      cfg.loss.validate();
      const tidpo::TrainResult r =
          tidpo::train_from(cfg, corpus, init, init, nullptr);
      const double acc = tidpo::evaluate(r.params, init, corpus);
      cells.emplace_back(lam, acc);
      os << tidpo::format_double(lam) << ',' << tidpo::format_double(acc)
         << '\n';
    }
    fs::create_directories(sw_out);
    write_text((fs::path(sw_out) / "sweep.csv").string(), os.str());

    double best = 0.0;
    for (const auto& [lam, acc] : cells) best = std::max(best, acc);
    double band_min = 1.0;
    bool band_seen = false;
    for (const auto& [lam, acc] : cells) {
      if (lam >= 0.3 && lam <= 0.7) {
        band_min = std::min(band_min, acc);
        band_seen = true;
      }
    }
    std::vector<tidpo::VerifyReport> reports;
    tidpo::VerifyReport stability;
    stability.name = "sweep_stability_band";
    stability.observed = band_seen ? band_min : 0.0;
    stability.expected = best;
    stability.tolerance = 0.02;
    stability.passed =
        band_seen && (best - stability.observed) <= stability.tolerance;
    reports.push_back(stability);
    const std::string text = dump_reports(reports);
    write_text((fs::path(sw_out) / "sweep_report.json").string(), text);
    std::cout << os.str() << text;
  });

  // ----------------------------------------------------------------- report
  auto* report = app.add_subcommand(
      "report", "Per-token weight report for preferred responses");
  std::string rp_model, rp_data, rp_out;
  double rp_lambda = 0.7;
  int64_t rp_limit = 8;
  report->add_option("--model", rp_model, "Checkpoint JSON")->required();
  report->add_option("--data", rp_data, "Corpus JSONL")->required();
  report->add_option("--out", rp_out, "Output JSON path")->required();
  report->add_option("--lambda", rp_lambda, "Importance/prior mix")
      ->capture_default_str();
  report->add_option("--limit", rp_limit, "Number of triples to report")
      ->capture_default_str();
  report->callback([&] {
    const tidpo::ModelParams params = tidpo::load_checkpoint(rp_model);
    const tidpo::Corpus corpus =
        load_corpus_checked(rp_data, params.config.vocab_size);
    ordered_json sequences = ordered_json::array();
    const auto n =
        std::min<size_t>(corpus.size(), static_cast<size_t>(rp_limit));
    for (size_t i = 0; i < n; ++i) {
      const tidpo::PreferenceTriple& t = corpus[i];
      const tidpo::ImportanceWeights iw = tidpo::importance_weights_for_response(
          params, t.x, t.y_w, rp_lambda);
      ordered_json seq = ordered_json::array();
      for (size_t pos = 0; pos < iw.mixed.size(); ++pos) {
        ordered_json tok;
        tok["token_id"] = t.y_w[pos];
        tok["position"] = pos;
        tok["raw"] = iw.raw[pos];
        tok["mixed"] = iw.mixed[pos];
        seq.push_back(std::move(tok));
      }
      sequences.push_back(std::move(seq));
    }
    const std::string text = sequences.dump(2) + "\n";
    write_text(rp_out, text);
    std::cout << text;
  });

  // ----------------------------------------------------------------- verify
  auto* verify = app.add_subcommand("verify", "Theory and methodology checks");
  verify->require_subcommand(1);

  // verify lemma1
  auto* v_lemma1 = verify->add_subcommand(
      "lemma1", "Monte-Carlo variance-reduction check");
  int64_t l1_n = 10;
  double l1_sigma = 1.0;
  int64_t l1_samples = 100000;
  uint64_t l1_seed = 0;
  std::string l1_weights = "half";
  std::string l1_out;
  v_lemma1->add_option("--n", l1_n, "Non-critical token count |N|")
      ->capture_default_str();
  v_lemma1->add_option("--sigma", l1_sigma, "Noise std")->capture_default_str();
  v_lemma1->add_option("--samples", l1_samples, "Monte-Carlo samples")
      ->capture_default_str();
  v_lemma1->add_option("--seed", l1_seed, "Seed")->capture_default_str();
  v_lemma1
      ->add_option("--weights", l1_weights,
                   "ones|half|random or comma-separated values")
      ->capture_default_str();
  v_lemma1->add_option("--out", l1_out, "Optional JSON output path");
  v_lemma1->callback([&] {
    tidpo::NoiseModelSpec spec;
    spec.n_noncritical = l1_n;
    spec.sigma_eps = l1_sigma;
    spec.n_samples = l1_samples;
    spec.seed = l1_seed;
    if (l1_weights == "ones") {
      spec.weights.assign(static_cast<size_t>(l1_n), 1.0);
    } else if (l1_weights == "half") {
      spec.weights.assign(static_cast<size_t>(l1_n), 0.5);
    } else if (l1_weights == "random") {
      tidpo::Rng rng(tidpo::derive_seed(l1_seed, 0x77656967687473ull));
      for (int64_t i = 0; i < l1_n; ++i)
        spec.weights.push_back(rng.next_uniform());
    } else {
      std::stringstream ss(l1_weights);
      std::string item;
      while (std::getline(ss, item, ','))
        spec.weights.push_back(std::stod(item));
    }
    exit_code = finish_verify(tidpo::verify_lemma1(spec), l1_out);
  });

  // verify theorem2
  auto* v_thm2 =
      verify->add_subcommand("theorem2", "Expected-loss bound check");
  int64_t t2_n = 10;
  double t2_sigma = 1.0, t2_mu = 1.0, t2_beta = 1.0, t2_w = 0.5,
         t2_slack = 0.9;
  int64_t t2_samples = 20000;
  uint64_t t2_seed = 0;
  std::string t2_out;
  v_thm2->add_option("--n", t2_n, "Non-critical token count |N|")
      ->capture_default_str();
  v_thm2->add_option("--sigma", t2_sigma, "Noise std")->capture_default_str();
  v_thm2->add_option("--mu", t2_mu, "True reward difference")
      ->capture_default_str();
  v_thm2->add_option("--beta", t2_beta, "Preference temperature")
      ->capture_default_str();
  v_thm2->add_option("--w", t2_w, "Uniform non-critical weight")
      ->capture_default_str();
  v_thm2->add_option("--slack", t2_slack, "Bound slack factor")
      ->capture_default_str();
  v_thm2->add_option("--samples", t2_samples, "Monte-Carlo samples")
      ->capture_default_str();
  v_thm2->add_option("--seed", t2_seed, "Seed")->capture_default_str();
  v_thm2->add_option("--out", t2_out, "Optional JSON output path");
  v_thm2->callback([&] {
    tidpo::NoiseModelSpec spec;
    spec.n_noncritical = t2_n;
    spec.sigma_eps = t2_sigma;
    spec.n_samples = t2_samples;
    spec.seed = t2_seed;
    spec.weights.assign(static_cast<size_t>(t2_n), t2_w);
    exit_code = finish_verify(
        {tidpo::verify_theorem2(spec, t2_mu, t2_beta, t2_slack)}, t2_out);
  });

  // verify theorem3
  auto* v_thm3 = verify->add_subcommand(
      "theorem3", "KL-split directional check on trained checkpoints");
  std::string t3_ti, t3_dpo, t3_ref, t3_data, t3_out;
  v_thm3->add_option("--tidpo", t3_ti, "Trained TI-DPO checkpoint")
      ->required();
  v_thm3->add_option("--dpo", t3_dpo, "Trained DPO checkpoint")->required();
  v_thm3->add_option("--ref", t3_ref, "Reference checkpoint")->required();
  v_thm3->add_option("--data", t3_data, "Corpus JSONL")->required();
  v_thm3->add_option("--out", t3_out, "Optional JSON output path");
  v_thm3->callback([&] {
    const tidpo::ModelParams ti = tidpo::load_checkpoint(t3_ti);
    const tidpo::ModelParams dpo = tidpo::load_checkpoint(t3_dpo);
    const tidpo::ModelParams ref = tidpo::load_checkpoint(t3_ref);
    const tidpo::Corpus corpus =
        load_corpus_checked(t3_data, ref.config.vocab_size);
    try {
      exit_code = finish_verify(
          tidpo::verify_theorem3_kl_split(ti, dpo, ref, corpus), t3_out);
    } catch (const tidpo::UntrainedInput& e) {
      std::vector<tidpo::VerifyReport> skipped;
      skipped.push_back(
          {std::string("theorem3_skipped_untrained"), 0.0, 0.0, 0.0, false});
      std::cerr << "skipped: " << e.what() << "\n";
      exit_code = finish_verify(skipped, t3_out);
    }
  });

  // verify grads
  auto* v_grads = verify->add_subcommand(
      "grads", "Three-way gradient agreement on a small model");
  uint64_t gr_seed = 0;
  int64_t gr_seeds = 1;
  std::string gr_variant = "tidpo";
  std::string gr_out;
  v_grads->add_option("--seed", gr_seed, "First seed")->capture_default_str();
  v_grads->add_option("--seeds", gr_seeds, "Number of consecutive seeds")
      ->capture_default_str();
  v_grads->add_option("--variant", gr_variant, "Loss variant")
      ->capture_default_str();
  v_grads->add_option("--out", gr_out, "Optional JSON output path");
  v_grads->callback([&] {
    std::vector<tidpo::VerifyReport> all;
    for (int64_t k = 0; k < gr_seeds; ++k) {
      const uint64_t seed = gr_seed + static_cast<uint64_t>(k);
      tidpo::ModelConfig mc;
      mc.vocab_size = 24;
      mc.d_model = 8;
      mc.n_layers = 1;
      mc.n_heads = 2;
      mc.max_seq_len = 32;
      mc.seed = seed;
      tidpo::CorpusSpec cs;
      cs.n_triples = 2;
      cs.prompt_len = 4;
      cs.response_len = 6;
      cs.n_critical = 2;
      cs.vocab_size = mc.vocab_size;
      cs.seed = seed;
      const tidpo::Corpus batch = tidpo::generate_corpus(cs);
      tidpo::LossConfig cfg;
      cfg.variant = tidpo::loss_variant_from_name(gr_variant);
      const tidpo::ModelParams params = tidpo::init_params(mc);
      for (tidpo::VerifyReport r :
           tidpo::check_gradients(params, batch, cfg, seed)) {
        r.name += "_seed" + std::to_string(seed);
        all.push_back(std::move(r));
      }
    }
    exit_code = finish_verify(all, gr_out);
  });

  // verify hist
  auto* v_hist = verify->add_subcommand(
      "hist", "Mixed-weight histograms over the corpus");
  std::string h_model, h_data, h_out, h_planted, h_filler, h_json;
  double h_lambda = 0.7;
  int64_t h_bins = 20;
  bool h_check_dominance = false;
  v_hist->add_option("--model", h_model, "Checkpoint JSON")->required();
  v_hist->add_option("--data", h_data, "Corpus JSONL")->required();
  v_hist->add_option("--lambda", h_lambda, "Importance/prior mix")
      ->capture_default_str();
  v_hist->add_option("--bins", h_bins, "Histogram bins over [0,1]")
      ->capture_default_str();
  v_hist->add_option("--out", h_out, "Overall histogram CSV path");
  v_hist->add_option("--planted", h_planted, "Planted-position CSV path");
  v_hist->add_option("--filler", h_filler, "Filler-position CSV path");
  v_hist->add_option("--json", h_json, "Optional JSON report path");
  v_hist->add_flag("--check-dominance", h_check_dominance,
                   "Require planted weights to stochastically dominate "
                   "filler weights (trained models)");
  v_hist->callback([&] {
    const tidpo::ModelParams params = tidpo::load_checkpoint(h_model);
    const tidpo::Corpus corpus =
        load_corpus_checked(h_data, params.config.vocab_size);
    const tidpo::WeightHistogram hist =
        tidpo::weight_histogram(params, corpus, h_lambda, h_bins);
    if (!h_out.empty()) write_text(h_out, tidpo::histogram_to_csv(hist.overall));
    if (!h_planted.empty())
      write_text(h_planted, tidpo::histogram_to_csv(hist.planted));
    if (!h_filler.empty())
      write_text(h_filler, tidpo::histogram_to_csv(hist.filler));

    std::vector<tidpo::VerifyReport> reports;
    double freq_sum = 0.0;
    for (const auto& row : hist.overall) freq_sum += row.frequency;
    reports.push_back({"hist_frequencies_sum", freq_sum, 1.0, 1e-9,
                       std::abs(freq_sum - 1.0) <= 1e-9});
    if (h_check_dominance) {
      const bool dom = tidpo::stochastically_dominates(hist.planted,
                                                       hist.filler);
      reports.push_back(
          {"hist_planted_dominance", dom ? 1.0 : 0.0, 1.0, 0.0, dom});
    }
    exit_code = finish_verify(reports, h_json);
  });

  // verify pearson
  auto* v_pearson = verify->add_subcommand(
      "pearson", "Weight/correctness correlation on a trained model");
  std::string p_model, p_ref, p_data, p_out;
  int64_t p_topk = 5;
  double p_lambda = 0.7;
  v_pearson->add_option("--model", p_model, "Checkpoint JSON")->required();
  v_pearson->add_option("--ref", p_ref, "Reference checkpoint JSON")
      ->required();
  v_pearson->add_option("--data", p_data, "Corpus JSONL")->required();
  v_pearson->add_option("--topk", p_topk, "Top-k weights per triple")
      ->capture_default_str();
  v_pearson->add_option("--lambda", p_lambda, "Importance/prior mix")
      ->capture_default_str();
  v_pearson->add_option("--out", p_out, "Optional JSON output path");
  v_pearson->callback([&] {
    const tidpo::ModelParams params = tidpo::load_checkpoint(p_model);
    const tidpo::ModelParams ref = tidpo::load_checkpoint(p_ref);
    const tidpo::Corpus corpus =
        load_corpus_checked(p_data, params.config.vocab_size);
    std::vector<tidpo::VerifyReport> reports;
    try {
      const double r =
          tidpo::pearson_weight_accuracy(params, ref, corpus, p_topk, p_lambda);
      reports.push_back({"pearson_in_range", r, 0.0, 1.0,
                         r >= -1.0 && r <= 1.0});
    } catch (const tidpo::DegenerateVariance& e) {
      std::cerr << "degenerate: " << e.what() << "\n";
      reports.push_back({"pearson_degenerate", 0.0, 0.0, 0.0, false});
    }
    exit_code = finish_verify(reports, p_out);
  });

  // verify diversity
  auto* v_div = verify->add_subcommand(
      "diversity", "Generation diversity metrics for a checkpoint");
  std::string d_model, d_data, d_out;
  int64_t d_n = 200, d_max_new = 12, d_prompts = 8;
  double d_temp = 1.0;
  uint64_t d_seed = 0;
  v_div->add_option("--model", d_model, "Checkpoint JSON")->required();
  v_div->add_option("--data", d_data, "Corpus JSONL (prompt source)")
      ->required();
  v_div->add_option("--n", d_n, "Number of generations")
      ->capture_default_str();
  v_div->add_option("--n-prompts", d_prompts, "Distinct prompts to sample from")
      ->capture_default_str();
  v_div->add_option("--max-new", d_max_new, "Max new tokens per generation")
      ->capture_default_str();
  v_div->add_option("--temp", d_temp, "Sampling temperature")
      ->capture_default_str();
  v_div->add_option("--seed", d_seed, "Sampling seed")->capture_default_str();
  v_div->add_option("--out", d_out, "Optional JSON output path");
  v_div->callback([&] {
    const tidpo::ModelParams params = tidpo::load_checkpoint(d_model);
    const tidpo::Corpus corpus =
        load_corpus_checked(d_data, params.config.vocab_size);
    const std::vector<tidpo::TokenSequence> samples = tidpo::generate_samples(
        params, corpus, d_n, d_max_new, d_temp, d_seed, d_prompts);
    const tidpo::DiversityMetrics m = tidpo::diversity_metrics(samples);
    std::vector<tidpo::VerifyReport> reports;
    reports.push_back({"diversity_self_bleu", m.self_bleu, 0.5, 0.5,
                       m.self_bleu >= 0.0 && m.self_bleu <= 1.0});
    reports.push_back({"diversity_distinct2", m.distinct2, 0.5, 0.5,
                       m.distinct2 >= 0.0 && m.distinct2 <= 1.0});
    reports.push_back({"diversity_distinct4", m.distinct4, 0.5, 0.5,
                       m.distinct4 >= 0.0 && m.distinct4 <= 1.0});
    reports.push_back(
        {"diversity_entropy", m.entropy, 0.0, 0.0, m.entropy >= 0.0});
    exit_code = finish_verify(reports, d_out);
  });

  // verify noise-sweep
  auto* v_noise = verify->add_subcommand(
      "noise-sweep", "Label-noise robustness sweep (trains per cell)");
  ModelFlags ns_model;
  TrainFlags ns_flags;
  std::vector<double> ns_rates;
  std::string ns_csv, ns_out;
  tidpo::CorpusSpec ns_spec;
  add_model_flags(v_noise, ns_model);
  add_train_flags(v_noise, ns_flags);
  v_noise->add_option("--rates", ns_rates, "Noise rates (comma separated)")
      ->delimiter(',');
  v_noise->add_option("--n", ns_spec.n_triples, "Corpus size")
      ->capture_default_str();
  v_noise->add_option("--prompt-len", ns_spec.prompt_len, "Prompt length")
      ->capture_default_str();
  v_noise->add_option("--resp-len", ns_spec.response_len, "Response length")
      ->capture_default_str();
  v_noise
      ->add_option("--n-critical", ns_spec.n_critical,
                   "Planted critical tokens")
      ->capture_default_str();
  v_noise->add_option("--corpus-seed", ns_spec.seed, "Corpus seed")
      ->capture_default_str();
  v_noise->add_option("--csv", ns_csv, "Accuracy table CSV path");
  v_noise->add_option("--out", ns_out, "Optional JSON output path");
  v_noise->callback([&] {
    const tidpo::ModelConfig mc = ns_model.to_config();
    ns_spec.vocab_size = mc.vocab_size;
    const std::vector<double> rates = require_rates(ns_rates);
    const tidpo::TrainConfig cfg = ns_flags.to_config();
    const std::vector<tidpo::NoiseSweepRow> rows =
        tidpo::noise_sweep(rates, cfg, ns_spec, mc);
    const std::string csv = tidpo::noise_sweep_to_csv(rows);
    if (!ns_csv.empty()) write_text(ns_csv, csv);
    std::cout << csv;

    std::vector<tidpo::VerifyReport> reports;
    const std::string variant = tidpo::loss_variant_name(cfg.loss.variant);
    const bool has_pair = variant != "dpo";
    const double lo = *std::min_element(rates.begin(), rates.end());
    const double hi = *std::max_element(rates.begin(), rates.end());
    if (has_pair && lo < hi) {
      const double deg_ti = tidpo::sweep_degradation(rows, variant, lo, hi);
      const double deg_dpo = tidpo::sweep_degradation(rows, "dpo", lo, hi);
      reports.push_back({"noise_degradation_ordering", deg_ti, deg_dpo, 0.0,
                         deg_ti < deg_dpo});
    }
    exit_code = finish_verify(reports, ns_out);
  });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const tidpo::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
