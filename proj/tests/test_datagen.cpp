#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "tidpo/datagen.hpp"
#include "tidpo/io.hpp"

using tidpo::Corpus;
using tidpo::CorpusSpec;
using tidpo::PreferenceTriple;

namespace {

CorpusSpec small_spec() {
  CorpusSpec s;
  s.n_triples = 40;
  s.prompt_len = 6;
  s.response_len = 12;
  s.n_critical = 2;
  s.seed = 7;
  return s;
}

int64_t count_flipped(const Corpus& c) {
  int64_t n = 0;
  for (const auto& t : c) n += t.flipped ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("corpus shape and determinism") {
  const Corpus c1 = tidpo::generate_corpus(small_spec());
  const Corpus c2 = tidpo::generate_corpus(small_spec());
  REQUIRE(c1.size() == 40);
  CHECK(c1 == c2);

  CorpusSpec other = small_spec();
  other.seed = 8;
  CHECK(tidpo::generate_corpus(other) != c1);

  for (const auto& t : c1) {
    CHECK(t.x.size() == 6);
    CHECK(t.y_w.size() == 12);
    CHECK(t.y_l.size() == 12);
    CHECK(t.critical_w.size() == 2);
    CHECK(t.critical_l.size() == 2);
    CHECK_FALSE(t.flipped);
    CHECK(t.y_w != t.y_l);
  }
}

TEST_CASE("planted structure: pools, shared backbone, middle-half positions") {
  const CorpusSpec spec = small_spec();
  const Corpus c = tidpo::generate_corpus(spec);
  // Middle half of a 12-token response: positions [3, 9).
  const int64_t lo = spec.response_len / 4;
  const int64_t hi = lo + spec.response_len / 2;

  for (const auto& t : c) {
    // Critical positions are shared between the two responses here (the
    // pair differs exactly there), sorted and unique.
    CHECK(t.critical_w == t.critical_l);
    std::set<int32_t> crit(t.critical_w.begin(), t.critical_w.end());
    CHECK(crit.size() == t.critical_w.size());
    for (int32_t pos : crit) {
      CHECK(pos >= lo);
      CHECK(pos < hi);
      CHECK(tidpo::is_good_token(t.y_w[pos]));
      CHECK(tidpo::is_bad_token(t.y_l[pos]));
    }
    for (int64_t i = 0; i < spec.response_len; ++i) {
      if (crit.count(static_cast<int32_t>(i))) continue;
      CHECK(t.y_w[i] == t.y_l[i]);  // shared filler backbone
      CHECK(tidpo::is_filler_token(t.y_w[i], spec.vocab_size));
    }
    CHECK(t.x[0] == tidpo::kBosToken);
    for (size_t i = 1; i < t.x.size(); ++i)
      CHECK(tidpo::is_filler_token(t.x[i], spec.vocab_size));
  }
}

TEST_CASE("n_critical == response_len makes the responses differ everywhere") {
  CorpusSpec spec = small_spec();
  spec.response_len = 6;
  spec.n_critical = 6;
  const Corpus c = tidpo::generate_corpus(spec);
  for (const auto& t : c) {
    for (int64_t i = 0; i < 6; ++i) {
      CHECK(t.y_w[i] != t.y_l[i]);
      CHECK(tidpo::is_good_token(t.y_w[i]));
      CHECK(tidpo::is_bad_token(t.y_l[i]));
    }
  }
}

TEST_CASE("infeasible specs are rejected") {
  CorpusSpec s = small_spec();
  s.n_critical = 13;  // > response_len
  CHECK_THROWS_AS(tidpo::generate_corpus(s), tidpo::SpecInfeasible);
  s = small_spec();
  s.n_triples = 0;
  CHECK_THROWS_AS(tidpo::generate_corpus(s), tidpo::SpecInfeasible);
  s = small_spec();
  s.noise_rate = 1.5;
  CHECK_THROWS_AS(tidpo::generate_corpus(s), tidpo::SpecInfeasible);
  s = small_spec();
  s.vocab_size = tidpo::kFillerPoolStart;  // no filler tokens left
  CHECK_THROWS_AS(tidpo::generate_corpus(s), tidpo::SpecInfeasible);
}

TEST_CASE("inject_noise flips an exact count, preserving content") {
  CorpusSpec spec = small_spec();
  spec.n_triples = 1000;
  const Corpus clean = tidpo::generate_corpus(spec);

  SUBCASE("rate 0 is the identity") {
    CHECK(tidpo::inject_noise(clean, 0.0, 3) == clean);
  }
  SUBCASE("rate 1 flips everything") {
    const Corpus all = tidpo::inject_noise(clean, 1.0, 3);
    CHECK(count_flipped(all) == 1000);
    for (size_t i = 0; i < all.size(); ++i) {
      CHECK(all[i].y_w == clean[i].y_l);
      CHECK(all[i].y_l == clean[i].y_w);
      CHECK(all[i].critical_w == clean[i].critical_l);
      CHECK(all[i].critical_l == clean[i].critical_w);
      CHECK(all[i].x == clean[i].x);
    }
  }
  SUBCASE("rate 0.2 on 1000 flips exactly 200") {
    const Corpus noisy = tidpo::inject_noise(clean, 0.2, 3);
    CHECK(count_flipped(noisy) == 200);
    // Unflipped entries are untouched; flipped ones are exact swaps.
    for (size_t i = 0; i < noisy.size(); ++i) {
      if (noisy[i].flipped) {
        CHECK(noisy[i].y_w == clean[i].y_l);
        CHECK(noisy[i].y_l == clean[i].y_w);
      } else {
        CHECK(noisy[i] == clean[i]);
      }
    }
    // Deterministic in the seed, different across seeds.
    CHECK(tidpo::inject_noise(clean, 0.2, 3) == noisy);
    CHECK(tidpo::inject_noise(clean, 0.2, 4) != noisy);
  }
  SUBCASE("rounding: rate 0.5 on odd count") {
    Corpus five(clean.begin(), clean.begin() + 5);
    CHECK(count_flipped(tidpo::inject_noise(five, 0.5, 1)) == 3);  // round(2.5)
  }
  SUBCASE("invalid rate") {
    CHECK_THROWS_AS(tidpo::inject_noise(clean, -0.1, 0),
                    tidpo::InvalidArgument);
    CHECK_THROWS_AS(tidpo::inject_noise(clean, 1.01, 0),
                    tidpo::InvalidArgument);
  }
}

TEST_CASE("generate_corpus applies spec.noise_rate") {
  CorpusSpec spec = small_spec();
  spec.n_triples = 50;
  spec.noise_rate = 0.4;
  const Corpus noisy = tidpo::generate_corpus(spec);
  CHECK(count_flipped(noisy) == 20);
}

TEST_CASE("save/load round-trip is exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tidpo_test_datagen";
  fs::create_directories(dir);
  const std::string path = (dir / "corpus.jsonl").string();

  CorpusSpec spec = small_spec();
  spec.noise_rate = 0.25;
  const Corpus c = tidpo::generate_corpus(spec);
  tidpo::save_corpus(path, c);
  const Corpus back = tidpo::load_corpus(path, spec.vocab_size);
  CHECK(back == c);
  fs::remove_all(dir);
}

TEST_CASE("load_corpus rejects malformed data with line diagnostics") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tidpo_test_datagen_bad";
  fs::create_directories(dir);
  const auto write = [&](const std::string& name, const std::string& body) {
    const std::string p = (dir / name).string();
    tidpo::atomic_write_file(p, body);
    return p;
  };
  const std::string good_line =
      R"({"x":[5,6],"y_w":[20,4,21],"y_l":[20,13,21],"critical_w":[1],"critical_l":[1],"flipped":false})";

  SUBCASE("well-formed line loads") {
    const Corpus c = tidpo::load_corpus(write("ok.jsonl", good_line + "\n"), 64);
    REQUIRE(c.size() == 1);
    CHECK(c[0].y_w == tidpo::TokenSequence{20, 4, 21});
  }
  SUBCASE("y_w == y_l is rejected") {
    const std::string bad =
        R"({"x":[5],"y_w":[20,4],"y_l":[20,4],"critical_w":[],"critical_l":[],"flipped":false})";
    CHECK_THROWS_AS(tidpo::load_corpus(write("dup.jsonl", bad + "\n"), 64),
                    tidpo::ParseError);
  }
  SUBCASE("out-of-vocab token names the position") {
    const std::string bad =
        R"({"x":[5],"y_w":[20,99],"y_l":[20,13],"critical_w":[1],"critical_l":[1],"flipped":false})";
    try {
      tidpo::load_corpus(write("oov.jsonl", bad + "\n"), 64);
      FAIL("expected ParseError");
    } catch (const tidpo::ParseError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("99") != std::string::npos);
      CHECK(msg.find("y_w[1]") != std::string::npos);
      CHECK(msg.find("line 1") != std::string::npos);
    }
  }
  SUBCASE("truncated JSON carries the line number") {
    const std::string body = good_line + "\n" + R"({"x": [5,)" + "\n";
    try {
      tidpo::load_corpus(write("trunc.jsonl", body), 64);
      FAIL("expected ParseError");
    } catch (const tidpo::ParseError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  SUBCASE("critical position out of bounds") {
    const std::string bad =
        R"({"x":[5],"y_w":[20,4],"y_l":[20,13],"critical_w":[7],"critical_l":[1],"flipped":false})";
    CHECK_THROWS_AS(tidpo::load_corpus(write("crit.jsonl", bad + "\n"), 64),
                    tidpo::ParseError);
  }
  fs::remove_all(dir);
}
