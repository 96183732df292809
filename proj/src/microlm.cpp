#include "tidpo/microlm.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "json.hpp"
#include "tidpo/io.hpp"
#include "tidpo/rng.hpp"

namespace tidpo {

namespace {

constexpr uint64_t kInitStream = 0x6d6f64656c696e69ull;  // "modelini"
constexpr double kMaskValue = -1e30;
constexpr double kInitStd = 0.02;
constexpr const char* kCheckpointFormat = "tidpo-checkpoint-v1";

void check_tokens(const TokenSequence& tokens, int64_t vocab) {
  for (TokenId t : tokens) {
    if (t < 0 || t >= vocab) {
      throw InvalidArgument("token id " + std::to_string(t) +
                            " outside vocabulary of size " +
                            std::to_string(vocab));
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < kNumReservedTokens) {
    throw InvalidArgument("ModelConfig: vocab_size must be >= " +
                          std::to_string(kNumReservedTokens));
  }
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len <= 0) {
    throw InvalidArgument("ModelConfig: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw InvalidArgument("ModelConfig: d_model must be divisible by n_heads");
  }
}

ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.config = cfg;
  const int64_t d = cfg.d_model, hd = cfg.head_dim(), v = cfg.vocab_size;
  p.tok_emb = Tensor::zeros({v, d});
  p.pos_emb = Tensor::zeros({cfg.max_seq_len, d});
  p.layers.resize(cfg.n_layers);
  for (auto& l : p.layers) {
    l.ln1_gain = Tensor::zeros({d});
    l.ln1_bias = Tensor::zeros({d});
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
      l.wq.push_back(Tensor::zeros({d, hd}));
      l.wk.push_back(Tensor::zeros({d, hd}));
      l.wv.push_back(Tensor::zeros({d, hd}));
      l.wo.push_back(Tensor::zeros({hd, d}));
    }
    l.attn_bias = Tensor::zeros({d});
    l.ln2_gain = Tensor::zeros({d});
    l.ln2_bias = Tensor::zeros({d});
    l.mlp_w1 = Tensor::zeros({d, 4 * d});
    l.mlp_b1 = Tensor::zeros({4 * d});
    l.mlp_w2 = Tensor::zeros({4 * d, d});
    l.mlp_b2 = Tensor::zeros({d});
  }
  p.lnf_gain = Tensor::zeros({d});
  p.lnf_bias = Tensor::zeros({d});
  p.out_proj = Tensor::zeros({d, v});
  p.out_bias = Tensor::zeros({v});

  // Weight matrices ~ N(0, 0.02^2); LN gains 1; every bias 0. Draw order
  // follows for_each_param so init is pinned to the traversal order.
  Rng rng(derive_seed(cfg.seed, kInitStream));
  for_each_param(p, [&](const std::string& name, Tensor& t) {
    if (t.rank() == 2) {
      for (double& x : t.data) x = kInitStd * rng.next_gaussian();
    } else if (name.size() >= 4 &&
               name.compare(name.size() - 4, 4, "gain") == 0) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    }
  });
  return p;
}

void for_each_param(
    ModelParams& p,
    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("tok_emb", p.tok_emb);
  fn("pos_emb", p.pos_emb);
  for (size_t li = 0; li < p.layers.size(); ++li) {
    LayerParams& l = p.layers[li];
    const std::string pre = "layer" + std::to_string(li) + ".";
    fn(pre + "ln1_gain", l.ln1_gain);
    fn(pre + "ln1_bias", l.ln1_bias);
    for (size_t h = 0; h < l.wq.size(); ++h) {
      const std::string hp = pre + "head" + std::to_string(h) + ".";
      fn(hp + "wq", l.wq[h]);
      fn(hp + "wk", l.wk[h]);
      fn(hp + "wv", l.wv[h]);
      fn(hp + "wo", l.wo[h]);
    }
    fn(pre + "attn_bias", l.attn_bias);
    fn(pre + "ln2_gain", l.ln2_gain);
    fn(pre + "ln2_bias", l.ln2_bias);
    fn(pre + "mlp_w1", l.mlp_w1);
    fn(pre + "mlp_b1", l.mlp_b1);
    fn(pre + "mlp_w2", l.mlp_w2);
    fn(pre + "mlp_b2", l.mlp_b2);
  }
  fn("lnf_gain", p.lnf_gain);
  fn("lnf_bias", p.lnf_bias);
  fn("out_proj", p.out_proj);
  fn("out_bias", p.out_bias);
}

void for_each_param(
    const ModelParams& p,
    const std::function<void(const std::string&, const Tensor&)>& fn) {
  for_each_param(const_cast<ModelParams&>(p),
                 [&](const std::string& name, Tensor& t) {
                   fn(name, static_cast<const Tensor&>(t));
                 });
}

int64_t param_count(const ModelParams& p) {
  int64_t n = 0;
  for_each_param(p, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

uint64_t params_hash(const ModelParams& p) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  auto mix = [&](const void* data, size_t len) {
    const unsigned char* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for_each_param(p, [&](const std::string& name, const Tensor& t) {
    mix(name.data(), name.size());
    mix(t.data.data(), t.data.size() * sizeof(double));
  });
  return h;
}

TokenSequence SequenceState::concat() const {
  TokenSequence out = prompt;
  out.insert(out.end(), prefix.begin(), prefix.end());
  return out;
}

ModelGraph::ModelGraph(Tape& tape, const ModelParams& params, LeafMode mode)
    : tape_(tape), params_(params), mode_(mode) {
  params.config.validate();
  if (mode_ == LeafMode::kParams) {
    for_each_param(params_, [&](const std::string& name, const Tensor& t) {
      Tensor copy = t;
      copy.requires_grad = true;
      param_ids_.emplace(name, tape_.leaf(std::move(copy)));
    });
  }
}

ValueId ModelGraph::pid(const std::string& name) const {
  if (mode_ == LeafMode::kParams) return param_ids_.at(name);
  // Constant per use; cheap at this scale and keeps one code path.
  const Tensor* t = nullptr;
  for_each_param(params_, [&](const std::string& n, const Tensor& cand) {
    if (n == name) t = &cand;
  });
  if (t == nullptr) throw InvalidArgument("unknown parameter " + name);
  return const_cast<Tape&>(tape_).constant(*t);
}

ValueId ModelGraph::embed(const TokenSequence& tokens) {
  const int64_t T = static_cast<int64_t>(tokens.size());
  if (T == 0) throw SequenceTooShort("model input is empty");
  if (T > params_.config.max_seq_len) {
    throw SequenceTooLong("sequence length " + std::to_string(T) +
                          " exceeds max_seq_len " +
                          std::to_string(params_.config.max_seq_len));
  }
  check_tokens(tokens, params_.config.vocab_size);

  if (mode_ == LeafMode::kParams) {
    std::vector<int64_t> tok_rows(tokens.begin(), tokens.end());
    std::vector<int64_t> pos_rows(T);
    for (int64_t i = 0; i < T; ++i) pos_rows[i] = i;
    ValueId te = tape_.gather_rows(pid("tok_emb"), std::move(tok_rows));
    ValueId pe = tape_.gather_rows(pid("pos_emb"), std::move(pos_rows));
    return tape_.add(te, pe);
  }

  // Evaluation and attribution modes materialize the combined embedding
  // matrix up front; in kEmbeddings mode it is the gradient leaf.
  const int64_t d = params_.config.d_model;
  Tensor emb = Tensor::zeros({T, d});
  for (int64_t i = 0; i < T; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      emb.data[i * d + j] = params_.tok_emb.data[tokens[i] * d + j] +
                            params_.pos_emb.data[i * d + j];
    }
  }
  if (mode_ == LeafMode::kEmbeddings) {
    emb.requires_grad = true;
    last_emb_leaf_ = tape_.leaf(std::move(emb));
    return last_emb_leaf_;
  }
  return tape_.constant(std::move(emb));
}

ValueId ModelGraph::last_embedding_leaf() const {
  if (last_emb_leaf_ == kNoValue) {
    throw InvalidArgument(
        "no embedding leaf; build a sequence in LeafMode::kEmbeddings first");
  }
  return last_emb_leaf_;
}

ValueId ModelGraph::block(ValueId x, int64_t layer, int64_t T) {
  const std::string pre = "layer" + std::to_string(layer) + ".";
  const int64_t hd = params_.config.head_dim();

  ValueId h = tape_.layer_norm_rows(x);
  h = tape_.add(tape_.mul(h, pid(pre + "ln1_gain")), pid(pre + "ln1_bias"));

  // Causal mask: additive 0 on/below the diagonal, -1e30 above. A finite
  // constant keeps the finiteness scan meaningful while the softmax
  // underflows masked entries to exactly zero probability.
  ValueId mask;
  auto it = causal_masks_.find(T);
  if (it != causal_masks_.end()) {
    mask = it->second;
  } else {
    Tensor m = Tensor::zeros({T, T});
    for (int64_t i = 0; i < T; ++i)
      for (int64_t j = i + 1; j < T; ++j) m.data[i * T + j] = kMaskValue;
    mask = tape_.constant(std::move(m));
    causal_masks_.emplace(T, mask);
  }

  ValueId attn = kNoValue;
  for (int64_t head = 0; head < params_.config.n_heads; ++head) {
    const std::string hp = pre + "head" + std::to_string(head) + ".";
    ValueId q = tape_.matmul(h, pid(hp + "wq"));
    ValueId k = tape_.matmul(h, pid(hp + "wk"));
    ValueId v = tape_.matmul(h, pid(hp + "wv"));
    ValueId scores =
        tape_.scale(tape_.matmul(q, tape_.transpose(k)),
                    1.0 / std::sqrt(static_cast<double>(hd)));
    ValueId probs = tape_.softmax_rows(tape_.add(scores, mask));
    ValueId proj = tape_.matmul(tape_.matmul(probs, v), pid(hp + "wo"));
    attn = attn == kNoValue ? proj : tape_.add(attn, proj);
  }
  attn = tape_.add(attn, pid(pre + "attn_bias"));
  x = tape_.add(x, attn);

  ValueId h2 = tape_.layer_norm_rows(x);
  h2 = tape_.add(tape_.mul(h2, pid(pre + "ln2_gain")), pid(pre + "ln2_bias"));
  ValueId m1 = tape_.add(tape_.matmul(h2, pid(pre + "mlp_w1")),
                         pid(pre + "mlp_b1"));
  ValueId m2 = tape_.add(tape_.matmul(tape_.relu(m1), pid(pre + "mlp_w2")),
                         pid(pre + "mlp_b2"));
  return tape_.add(x, m2);
}

ValueId ModelGraph::logits(const TokenSequence& tokens) {
  ValueId x = embed(tokens);
  const int64_t T = static_cast<int64_t>(tokens.size());
  for (int64_t l = 0; l < params_.config.n_layers; ++l) x = block(x, l, T);
  ValueId h = tape_.layer_norm_rows(x);
  h = tape_.add(tape_.mul(h, pid("lnf_gain")), pid("lnf_bias"));
  return tape_.add(tape_.matmul(h, pid("out_proj")), pid("out_bias"));
}

ValueId ModelGraph::log_probs(const TokenSequence& tokens) {
  auto it = log_probs_cache_.find(tokens);
  if (it != log_probs_cache_.end()) return it->second;
  ValueId lp = tape_.log_softmax_rows(logits(tokens));
  log_probs_cache_.emplace(tokens, lp);
  return lp;
}

ValueId ModelGraph::response_log_probs(const TokenSequence& prompt,
                                       const TokenSequence& response,
                                       int64_t limit) {
  if (prompt.empty()) {
    throw SequenceTooShort("response_log_probs: prompt must be non-empty");
  }
  if (response.empty()) {
    throw SequenceTooShort("response_log_probs: response must be non-empty");
  }
  const int64_t M = static_cast<int64_t>(prompt.size());
  const int64_t T = static_cast<int64_t>(response.size());
  const int64_t k = limit < 0 ? T : std::min(limit, T);
  if (k < 1) throw InvalidArgument("response_log_probs: limit must be >= 1");

  TokenSequence concat = prompt;
  concat.insert(concat.end(), response.begin(), response.end());
  ValueId lp = log_probs(concat);
  std::vector<std::pair<int64_t, int64_t>> cells;
  cells.reserve(k);
  for (int64_t t = 0; t < k; ++t) {
    cells.emplace_back(M + t - 1, static_cast<int64_t>(concat[M + t]));
  }
  return tape_.select(lp, std::move(cells));
}

Tensor logits_eval(const ModelParams& p, const TokenSequence& tokens) {
  Tape tape;
  ModelGraph g(tape, p, LeafMode::kNone);
  return tape.value(g.logits(tokens));
}

std::vector<double> response_logprobs_eval(const ModelParams& p,
                                           const TokenSequence& prompt,
                                           const TokenSequence& response) {
  Tape tape;
  ModelGraph g(tape, p, LeafMode::kNone);
  return tape.value(g.response_log_probs(prompt, response)).data;
}

double token_logprob(const ModelParams& p, const SequenceState& state,
                     TokenId token) {
  if (token < 0 || token >= p.config.vocab_size) {
    throw InvalidArgument("token_logprob: token outside vocabulary");
  }
  const TokenSequence seq = state.concat();
  Tape tape;
  ModelGraph g(tape, p, LeafMode::kNone);
  const Tensor& lp = tape.value(g.log_probs(seq));
  return lp.at(lp.rows() - 1, token);
}

double log_ratio(const ModelParams& policy, const ModelParams& reference,
                 const SequenceState& state, TokenId token) {
  if (!policy.config.compatible_with(reference.config)) {
    throw ConfigMismatch("log_ratio: policy and reference configs differ");
  }
  return token_logprob(policy, state, token) -
         token_logprob(reference, state, token);
}

TokenSequence sample(const ModelParams& p, const SequenceState& state,
                     int64_t max_new, double temperature, uint64_t seed) {
  if (max_new < 0) throw InvalidArgument("sample: max_new must be >= 0");
  if (temperature < 0.0 || !std::isfinite(temperature)) {
    throw InvalidArgument("sample: temperature must be finite and >= 0");
  }
  TokenSequence seq = state.concat();
  if (static_cast<int64_t>(seq.size()) + 1 > p.config.max_seq_len) {
    throw SequenceTooLong("sample: no room left before max_seq_len");
  }
  Rng rng(seed);
  TokenSequence out;
  const int64_t v = p.config.vocab_size;
  for (int64_t step = 0; step < max_new; ++step) {
    if (static_cast<int64_t>(seq.size()) >= p.config.max_seq_len) break;
    const Tensor logits = logits_eval(p, seq);
    const double* row = &logits.data[(logits.rows() - 1) * v];
    TokenId tok = 0;
    if (temperature == 0.0) {
      for (int64_t j = 1; j < v; ++j)
        if (row[j] > row[tok]) tok = static_cast<TokenId>(j);
    } else {
      // Softmax of logits/temperature, then one CDF draw.
      double mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      std::vector<double> probs(v);
      double z = 0.0;
      for (int64_t j = 0; j < v; ++j) {
        probs[j] = std::exp((row[j] - mx) / temperature);
        z += probs[j];
      }
      const double u = rng.next_uniform() * z;
      double cum = 0.0;
      tok = static_cast<TokenId>(v - 1);  // guard against fp undershoot
      for (int64_t j = 0; j < v; ++j) {
        cum += probs[j];
        if (u < cum) {
          tok = static_cast<TokenId>(j);
          break;
        }
      }
    }
    out.push_back(tok);
    seq.push_back(tok);
    if (tok == kEosToken) break;
  }
  return out;
}

namespace {

nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape}, {"data", t.data}};
}

Tensor tensor_from_json(const nlohmann::json& j, const std::string& name) {
  if (!j.contains("shape") || !j.contains("data")) {
    throw CheckpointIOError("checkpoint tensor " + name +
                            " missing shape/data");
  }
  try {
    return Tensor(j["shape"].get<std::vector<int64_t>>(),
                  j["data"].get<std::vector<double>>());
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointIOError("checkpoint tensor " + name + ": " + e.what());
  }
}

}  // namespace

void save_checkpoint(const ModelParams& p, const std::string& path) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["config"] = {{"vocab_size", p.config.vocab_size},
                 {"d_model", p.config.d_model},
                 {"n_layers", p.config.n_layers},
                 {"n_heads", p.config.n_heads},
                 {"max_seq_len", p.config.max_seq_len},
                 {"seed", p.config.seed}};
  nlohmann::json params = nlohmann::json::object();
  for_each_param(p, [&](const std::string& name, const Tensor& t) {
    params[name] = tensor_to_json(t);
  });
  j["params"] = std::move(params);
  atomic_write_file(path, j.dump());
}

ModelParams load_checkpoint(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const std::exception& e) {
    throw CheckpointIOError(std::string("cannot load checkpoint: ") +
                            e.what());
  }
  if (!j.contains("format") || j["format"] != kCheckpointFormat) {
    throw CheckpointIOError("not a checkpoint file: " + path);
  }
  ModelConfig cfg;
  try {
    const auto& c = j.at("config");
    cfg.vocab_size = c.at("vocab_size").get<int64_t>();
    cfg.d_model = c.at("d_model").get<int64_t>();
    cfg.n_layers = c.at("n_layers").get<int64_t>();
    cfg.n_heads = c.at("n_heads").get<int64_t>();
    cfg.max_seq_len = c.at("max_seq_len").get<int64_t>();
    cfg.seed = c.at("seed").get<uint64_t>();
  } catch (const std::exception& e) {
    throw CheckpointIOError(std::string("bad checkpoint config: ") + e.what());
  }
  ModelParams p = init_params(cfg);
  const auto& jp = j.at("params");
  for_each_param(p, [&](const std::string& name, Tensor& t) {
    if (!jp.contains(name)) {
      throw CheckpointIOError("checkpoint missing tensor " + name);
    }
    Tensor loaded = tensor_from_json(jp[name], name);
    if (!loaded.same_shape(t)) {
      throw CheckpointIOError("checkpoint tensor " + name +
                              " has wrong shape");
    }
    if (!loaded.all_finite()) {
      throw CheckpointIOError("checkpoint tensor " + name +
                              " contains non-finite values");
    }
    t = std::move(loaded);
  });
  return p;
}

}  // namespace tidpo
