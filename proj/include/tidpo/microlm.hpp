#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tidpo/autodiff.hpp"
#include "tidpo/errors.hpp"

namespace tidpo {

using TokenId = int32_t;
using TokenSequence = std::vector<TokenId>;

// Reserved vocabulary slots.
constexpr TokenId kPadToken = 0;
constexpr TokenId kBosToken = 1;
constexpr TokenId kEosToken = 2;
constexpr TokenId kUnkToken = 3;
constexpr int64_t kNumReservedTokens = 4;

struct ModelConfig {
  int64_t vocab_size = 64;
  int64_t d_model = 32;
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t max_seq_len = 64;
  uint64_t seed = 0;

  int64_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
  // Same architecture (init seed may differ): two such models can be
  // compared as policy and reference.
  bool compatible_with(const ModelConfig& o) const {
    return vocab_size == o.vocab_size && d_model == o.d_model &&
           n_layers == o.n_layers && n_heads == o.n_heads &&
           max_seq_len == o.max_seq_len;
  }
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  // Per-head projections; outputs re-projected to d_model and summed, which
  // is equivalent to the usual concat followed by a block output matrix.
  std::vector<Tensor> wq, wk, wv;  // each [d_model, head_dim]
  std::vector<Tensor> wo;          // each [head_dim, d_model]
  Tensor attn_bias;                // [d_model]
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1;           // [d_model, 4*d_model], [4*d_model]
  Tensor mlp_w2, mlp_b2;           // [4*d_model, d_model], [d_model]
};

// Pre-norm causal transformer: token+position embeddings, n_layers blocks
// of (LN, multi-head attention, residual, LN, ReLU MLP, residual), final
// LN, linear head to vocabulary logits.
struct ModelParams {
  ModelConfig config;
  Tensor tok_emb;  // [vocab_size, d_model]
  Tensor pos_emb;  // [max_seq_len, d_model]
  std::vector<LayerParams> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor out_proj;  // [d_model, vocab_size]
  Tensor out_bias;  // [vocab_size]
};

// Gaussian(0, 0.02) weight matrices, unit LN gains, zero biases. Fully
// determined by config.seed.
ModelParams init_params(const ModelConfig& cfg);

int64_t param_count(const ModelParams& p);

// Visits every parameter tensor in a fixed, documented order (embeddings,
// then per-layer tensors head by head, then final LN and output head).
// Checkpoints, the optimizer, and gradient flattening all use this order.
void for_each_param(
    ModelParams& p,
    const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(
    const ModelParams& p,
    const std::function<void(const std::string&, const Tensor&)>& fn);

// FNV-1a over the raw bytes of all parameters, in for_each_param order.
uint64_t params_hash(const ModelParams& p);

// Prompt plus already-generated prefix; the model conditions on the
// concatenation.
struct SequenceState {
  TokenSequence prompt;
  TokenSequence prefix;
  TokenSequence concat() const;
};

// How model inputs are registered on the tape.
enum class LeafMode {
  kNone,        // pure evaluation, nothing receives gradients
  kParams,      // parameters are leaves (training)
  kEmbeddings,  // the gathered embedding matrix is the leaf (attribution)
};

// Binds one model onto a tape and builds forward graphs over it. With
// LeafMode::kParams the parameter tensors are registered once in the
// constructor and shared across every sequence built on this graph.
class ModelGraph {
 public:
  ModelGraph(Tape& tape, const ModelParams& params, LeafMode mode);

  // Full logit matrix [T, vocab_size] for a token sequence.
  ValueId logits(const TokenSequence& tokens);
  // Row-wise log-softmax of the logits, [T, vocab_size]. Cached per token
  // sequence, so several selections over one sequence share one forward.
  ValueId log_probs(const TokenSequence& tokens);
  // log pi(y_t | x + y_<t) for each response token, [len(response)], or for
  // the first `limit` tokens when limit >= 0.
  ValueId response_log_probs(const TokenSequence& prompt,
                             const TokenSequence& response,
                             int64_t limit = -1);

  // The [T, d_model] embedding leaf of the most recent sequence built in
  // LeafMode::kEmbeddings.
  ValueId last_embedding_leaf() const;

  // Parameter leaf ids keyed by for_each_param name (kParams mode).
  const std::map<std::string, ValueId>& param_ids() const {
    return param_ids_;
  }

  Tape& tape() { return tape_; }

 private:
  ValueId embed(const TokenSequence& tokens);
  ValueId block(ValueId x, int64_t layer, int64_t seq_len);
  ValueId pid(const std::string& name) const;

  Tape& tape_;
  const ModelParams& params_;
  LeafMode mode_;
  std::map<std::string, ValueId> param_ids_;
  ValueId last_emb_leaf_ = kNoValue;
  std::map<int64_t, ValueId> causal_masks_;  // seq_len -> cached constant
  std::map<TokenSequence, ValueId> log_probs_cache_;
};

// Convenience no-grad evaluation helpers built on a scratch tape, so they
// share the exact numeric kernels with the differentiable path.
Tensor logits_eval(const ModelParams& p, const TokenSequence& tokens);
std::vector<double> response_logprobs_eval(const ModelParams& p,
                                           const TokenSequence& prompt,
                                           const TokenSequence& response);
double token_logprob(const ModelParams& p, const SequenceState& state,
                     TokenId token);
// log pi(token|state) - log pi_ref(token|state).
double log_ratio(const ModelParams& policy, const ModelParams& reference,
                 const SequenceState& state, TokenId token);

// Autoregressive sampling. temperature > 0 samples from the scaled
// softmax; temperature == 0 takes the argmax (first max on ties).
// Generation stops at kEosToken, max_new tokens, or max_seq_len.
TokenSequence sample(const ModelParams& p, const SequenceState& state,
                     int64_t max_new, double temperature, uint64_t seed);

// JSON checkpoints; doubles round-trip bit for bit.
void save_checkpoint(const ModelParams& p, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace tidpo
