#include "tidpo/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "tidpo/io.hpp"
#include "tidpo/rng.hpp"

namespace tidpo {

namespace {

constexpr uint64_t kGenStream = 0x636f727075736765ull;    // "corpusge"
constexpr uint64_t kNoiseStream = 0x6e6f697365666c70ull;  // "noiseflp"

}  // namespace

void CorpusSpec::validate() const {
  if (n_triples < 1) throw SpecInfeasible("corpus: n_triples must be >= 1");
  if (prompt_len < 1) throw SpecInfeasible("corpus: prompt_len must be >= 1");
  if (response_len < 1) {
    throw SpecInfeasible("corpus: response_len must be >= 1");
  }
  if (n_critical < 1 || n_critical > response_len) {
    throw SpecInfeasible(
        "corpus: n_critical must be in [1, response_len] so y_w != y_l");
  }
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) {
    throw SpecInfeasible("corpus: noise_rate must be in [0,1]");
  }
  if (vocab_size < kFillerPoolStart + 1) {
    throw SpecInfeasible(
        "corpus: vocabulary too small for good/bad/filler pools (need >= " +
        std::to_string(kFillerPoolStart + 1) + ")");
  }
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, kGenStream));
  const int64_t n_filler = spec.vocab_size - kFillerPoolStart;
  const int64_t T = spec.response_len;

  // Critical positions live in the middle half [T/4, T/4 + ceil(T/2)),
  // widened to the whole response when n_critical needs the room.
  int64_t lo = T / 4;
  int64_t hi = std::min<int64_t>(T, lo + (T + 1) / 2);
  if (hi - lo < spec.n_critical) {
    lo = 0;
    hi = T;
  }

  Corpus corpus;
  corpus.reserve(spec.n_triples);
  for (int64_t i = 0; i < spec.n_triples; ++i) {
    PreferenceTriple tr;
    tr.x.resize(spec.prompt_len);
    tr.x[0] = kBosToken;
    for (int64_t j = 1; j < spec.prompt_len; ++j) {
      tr.x[j] =
          static_cast<TokenId>(kFillerPoolStart + rng.next_index(n_filler));
    }

    std::vector<int32_t> positions(hi - lo);
    for (int64_t j = 0; j < hi - lo; ++j) {
      positions[j] = static_cast<int32_t>(lo + j);
    }
    rng.shuffle(positions);
    positions.resize(spec.n_critical);
    std::sort(positions.begin(), positions.end());

    // Shared filler backbone; the pair differs only at critical positions.
    tr.y_w.resize(T);
    for (int64_t j = 0; j < T; ++j) {
      tr.y_w[j] =
          static_cast<TokenId>(kFillerPoolStart + rng.next_index(n_filler));
    }
    tr.y_l = tr.y_w;
    for (int32_t pos : positions) {
      tr.y_w[pos] =
          static_cast<TokenId>(kGoodPoolStart + rng.next_index(kPoolSize));
      tr.y_l[pos] =
          static_cast<TokenId>(kBadPoolStart + rng.next_index(kPoolSize));
    }
    tr.critical_w = positions;
    tr.critical_l = positions;
    tr.flipped = false;
    corpus.push_back(std::move(tr));
  }
  return inject_noise(std::move(corpus), spec.noise_rate,
                      derive_seed(spec.seed, kNoiseStream));
}

Corpus inject_noise(Corpus corpus, double rate, uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw InvalidArgument("inject_noise: rate must be in [0,1]");
  }
  const int64_t n = static_cast<int64_t>(corpus.size());
  const int64_t k = std::llround(rate * static_cast<double>(n));
  if (k == 0) return corpus;
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  for (int64_t i = 0; i < k; ++i) {
    PreferenceTriple& tr = corpus[order[i]];
    std::swap(tr.y_w, tr.y_l);
    std::swap(tr.critical_w, tr.critical_l);
    tr.flipped = !tr.flipped;
  }
  return corpus;
}

void save_corpus(const std::string& path, const Corpus& corpus) {
  std::string out;
  for (const PreferenceTriple& tr : corpus) {
    nlohmann::json j{{"x", tr.x},
                     {"y_w", tr.y_w},
                     {"y_l", tr.y_l},
                     {"critical_w", tr.critical_w},
                     {"critical_l", tr.critical_l},
                     {"flipped", tr.flipped}};
    out += j.dump();
    out += '\n';
  }
  atomic_write_file(path, out);
}

namespace {

void check_response(const TokenSequence& y, const std::vector<int32_t>& crit,
                    int64_t vocab, int64_t line, const char* which) {
  if (y.empty()) {
    throw ParseError("line " + std::to_string(line) + ": empty " + which);
  }
  for (size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || y[i] >= vocab) {
      throw ParseError("line " + std::to_string(line) + ": token " +
                       std::to_string(y[i]) + " at " + which + "[" +
                       std::to_string(i) + "] outside vocabulary of size " +
                       std::to_string(vocab));
    }
  }
  for (int32_t pos : crit) {
    if (pos < 0 || pos >= static_cast<int64_t>(y.size())) {
      throw ParseError("line " + std::to_string(line) +
                       ": critical position " + std::to_string(pos) +
                       " outside " + which + " bounds");
    }
  }
}

}  // namespace

Corpus load_corpus(const std::string& path, int64_t vocab_size) {
  std::istringstream in(read_file(path));
  Corpus corpus;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      PreferenceTriple tr;
      tr.x = j.at("x").get<TokenSequence>();
      tr.y_w = j.at("y_w").get<TokenSequence>();
      tr.y_l = j.at("y_l").get<TokenSequence>();
      tr.critical_w = j.at("critical_w").get<std::vector<int32_t>>();
      tr.critical_l = j.at("critical_l").get<std::vector<int32_t>>();
      tr.flipped = j.at("flipped").get<bool>();
      corpus.push_back(std::move(tr));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
    const PreferenceTriple& tr = corpus.back();
    if (tr.x.empty()) {
      throw ParseError("line " + std::to_string(lineno) + ": empty prompt");
    }
    for (size_t i = 0; i < tr.x.size(); ++i) {
      if (tr.x[i] < 0 || tr.x[i] >= vocab_size) {
        throw ParseError("line " + std::to_string(lineno) + ": token " +
                         std::to_string(tr.x[i]) + " at x[" +
                         std::to_string(i) + "] outside vocabulary of size " +
                         std::to_string(vocab_size));
      }
    }
    check_response(tr.y_w, tr.critical_w, vocab_size, lineno, "y_w");
    check_response(tr.y_l, tr.critical_l, vocab_size, lineno, "y_l");
    if (tr.y_w == tr.y_l) {
      throw ParseError("line " + std::to_string(lineno) + ": y_w equals y_l");
    }
  }
  return corpus;
}

}  // namespace tidpo
