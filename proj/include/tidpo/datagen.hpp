#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tidpo/microlm.hpp"

namespace tidpo {

// One preference record: prompt x, preferred response y_w, rejected
// response y_l. For synthetic corpora the positions where the two
// responses genuinely differ (the planted signal) are recorded.
struct PreferenceTriple {
  TokenSequence x;
  TokenSequence y_w;
  TokenSequence y_l;
  std::vector<int32_t> critical_w;  // positions into y_w
  std::vector<int32_t> critical_l;  // positions into y_l
  bool flipped = false;             // label noise applied

  bool operator==(const PreferenceTriple&) const = default;
};

using Corpus = std::vector<PreferenceTriple>;

struct CorpusSpec {
  int64_t n_triples = 512;
  int64_t prompt_len = 8;
  int64_t response_len = 12;
  int64_t n_critical = 2;
  double noise_rate = 0.0;
  uint64_t seed = 0;
  int64_t vocab_size = 64;

  void validate() const;
};

// Token pools carved out of the vocabulary after the reserved ids:
// good [4,12), bad [12,20), filler [20, vocab_size).
constexpr int64_t kPoolSize = 8;
constexpr TokenId kGoodPoolStart = kNumReservedTokens;
constexpr TokenId kBadPoolStart = kGoodPoolStart + kPoolSize;
constexpr TokenId kFillerPoolStart = kBadPoolStart + kPoolSize;

inline bool is_good_token(TokenId t) {
  return t >= kGoodPoolStart && t < kBadPoolStart;
}
inline bool is_bad_token(TokenId t) {
  return t >= kBadPoolStart && t < kFillerPoolStart;
}
inline bool is_filler_token(TokenId t, int64_t vocab_size) {
  return t >= kFillerPoolStart && t < vocab_size;
}

// Planted-critical-token corpus. Each triple: a filler backbone shared by
// y_w and y_l; at the critical positions y_w carries good-pool tokens and
// y_l bad-pool tokens, so the pair differs exactly there. Critical
// positions are drawn from the middle half of the response (widened only
// when n_critical needs more room). spec.noise_rate is applied at the end
// via inject_noise.
Corpus generate_corpus(const CorpusSpec& spec);

// Swaps y_w/y_l on an exact-count uniformly chosen subset: flips
// round(rate*n) triples selected as a shuffled prefix.
Corpus inject_noise(Corpus corpus, double rate, uint64_t seed);

// Line-delimited JSON, one triple per line; written atomically.
void save_corpus(const std::string& path, const Corpus& corpus);
Corpus load_corpus(const std::string& path, int64_t vocab_size);

}  // namespace tidpo
