#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mmt/subword.hpp"

using namespace mmt;

namespace {

std::vector<VocabToken> controls() {
  return {{"<pad>", 0.0}, {"<s>", 0.0}, {"</s>", 0.0}, {"<unk>", 0.0}};
}

// Small two-language corpus: en plus one substitution cipher.
struct Fixture {
  LanguageRegistry reg;
  std::vector<PairCorpus> corpora;
  std::vector<const PairCorpus*> ptrs;

  explicit Fixture(int sentences = 600, int lexicon = 150, std::uint64_t seed = 5) {
    TextGenSpec gen;
    gen.sentences = sentences;
    gen.lexicon_words = lexicon;
    gen.seed = seed;
    auto base = generate_base_corpus(gen);
    CipherSpec spec;
    spec.kind = CipherSpec::Kind::substitution;
    spec.code = "c1";
    spec.seed = 71;
    corpora = generate_synthetic(base, resolve_ciphers({spec}),
                                 {static_cast<std::size_t>(sentences)}, reg);
    for (const auto& c : corpora) ptrs.push_back(&c);
  }
};

}  // namespace

TEST_CASE("viterbi picks the highest-scoring segmentation") {
  auto tokens = controls();
  tokens.push_back({"a", -2.0});
  tokens.push_back({"b", -2.0});
  tokens.push_back({"ab", -0.5});
  auto vocab = Vocabulary::from_tokens(tokens);
  auto ids = vocab.segment("abab");
  REQUIRE(ids.size() == 2);
  CHECK(vocab.surface_of(ids[0]) == "ab");
  CHECK(vocab.surface_of(ids[1]) == "ab");
}

TEST_CASE("ties prefer fewer tokens, then leftmost-longest") {
  auto tokens = controls();
  // all equal scores: "abc" can be [ab,c] or [a,bc]; leftmost-longest wins
  tokens.push_back({"a", -1.0});
  tokens.push_back({"b", -1.0});
  tokens.push_back({"c", -1.0});
  tokens.push_back({"ab", -1.0});
  tokens.push_back({"bc", -1.0});
  auto vocab = Vocabulary::from_tokens(tokens);
  auto ids = vocab.segment("abc");
  REQUIRE(ids.size() == 2);
  CHECK(vocab.surface_of(ids[0]) == "ab");
  CHECK(vocab.surface_of(ids[1]) == "c");
}

TEST_CASE("uncovered characters map to exactly one unk each") {
  auto tokens = controls();
  tokens.push_back({"a", -1.0});
  auto vocab = Vocabulary::from_tokens(tokens);
  auto ids = vocab.segment("axa");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] != Vocabulary::kUnkId);
  CHECK(ids[1] == Vocabulary::kUnkId);
  CHECK(ids[2] != Vocabulary::kUnkId);
  CHECK(vocab.detokenize(ids) == std::string("a") + kUnkGlyph + "a");
}

TEST_CASE("detokenize basics") {
  auto tokens = controls();
  tokens.push_back({"<2fr>", 0.0});
  tokens.push_back({"hi", -1.0});
  auto vocab = Vocabulary::from_tokens(tokens);
  CHECK(vocab.detokenize({}) == "");
  CHECK(vocab.segment("").empty());
  CHECK_THROWS_AS(vocab.detokenize({99}), std::invalid_argument);
  CHECK_THROWS_AS(vocab.detokenize({-1}), std::invalid_argument);
  // control ids render as nothing
  CHECK(vocab.detokenize({Vocabulary::kBosId, vocab.id_of("hi"), Vocabulary::kEosId}) == "hi");
}

TEST_CASE("language tags segment atomically and round-trip") {
  auto tokens = controls();
  tokens.push_back({"<2fr>", 0.0});
  tokens.push_back({"h", -1.0});
  tokens.push_back({"i", -1.0});
  tokens.push_back({kBoundaryMarker, -1.0});
  auto vocab = Vocabulary::from_tokens(tokens);
  auto ids = vocab.segment("<2fr> hi");
  REQUIRE(!ids.empty());
  CHECK(ids[0] == vocab.tag_id("fr"));
  CHECK(vocab.is_tag(ids[0]));
  CHECK(vocab.detokenize(ids) == "<2fr> hi");
  CHECK_THROWS_AS(vocab.tag_id("de"), std::invalid_argument);
}

TEST_CASE("learned vocabulary: size exactness, reserved layout, determinism") {
  Fixture f;
  VocabPolicy policy;
  policy.vocab_size = 200;
  policy.sample_budget = 2000;
  auto vocab = learn_vocabulary(f.ptrs, policy, 42, f.reg);

  CHECK(vocab.size() == 200);
  CHECK(vocab.tokens()[0].surface == "<pad>");
  CHECK(vocab.tokens()[1].surface == "<s>");
  CHECK(vocab.tokens()[2].surface == "</s>");
  CHECK(vocab.tokens()[3].surface == "<unk>");
  CHECK(vocab.tokens()[4].surface == "<2c1>");
  CHECK(vocab.tokens()[5].surface == "<2en>");
  CHECK(vocab.tag_id("en") == 5);

  auto again = learn_vocabulary(f.ptrs, policy, 42, f.reg);
  REQUIRE(again.size() == vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    CHECK(again.tokens()[i].surface == vocab.tokens()[i].surface);
    CHECK(again.tokens()[i].score == vocab.tokens()[i].score);
  }

  // surfaces unique
  std::set<std::string> surfaces;
  for (const auto& t : vocab.tokens()) surfaces.insert(t.surface);
  CHECK(surfaces.size() == vocab.size());
}

TEST_CASE("full coverage alphabet makes OOV impossible on the corpus") {
  Fixture f;
  VocabPolicy policy;
  policy.vocab_size = 150;
  policy.sample_budget = 1500;
  policy.char_coverage = 1.0;
  auto vocab = learn_vocabulary(f.ptrs, policy, 7, f.reg);

  for (const auto* c : f.ptrs) {
    for (std::size_t i = 0; i < c->size(); i += 37) {
      for (int id : vocab.segment(c->examples[i].first)) CHECK(id != Vocabulary::kUnkId);
    }
  }
}

TEST_CASE("round-trip is lossless on covered text") {
  Fixture f;
  VocabPolicy policy;
  policy.vocab_size = 180;
  policy.sample_budget = 1500;
  auto vocab = learn_vocabulary(f.ptrs, policy, 3, f.reg);

  std::vector<std::string> alpha(vocab.alphabet().begin(), vocab.alphabet().end());
  // drop the boundary marker from the random alphabet; spaces stand in for it
  alpha.erase(std::remove(alpha.begin(), alpha.end(), kBoundaryMarker), alpha.end());
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    std::string text;
    int len = static_cast<int>(rng.next_below(30));
    for (int i = 0; i < len; ++i) {
      if (rng.next_double() < 0.18) text += ' ';
      else text += alpha[rng.next_below(alpha.size())];
    }
    auto ids = vocab.segment(text);
    CHECK(vocab.detokenize(ids) == text);
    for (int id : ids) CHECK(id != Vocabulary::kUnkId);
  }
  // corpus sentences round-trip too
  for (std::size_t i = 0; i < f.corpora[0].size(); i += 53) {
    const auto& s = f.corpora[0].examples[i].second;
    CHECK(vocab.detokenize(vocab.segment(s)) == s);
  }
}

TEST_CASE("partial coverage bounds the character OOV rate") {
  Fixture f(900, 150, 11);
  VocabPolicy policy;
  policy.vocab_size = 150;
  policy.sample_budget = 1500;
  policy.char_coverage = 0.90;
  auto vocab = learn_vocabulary(f.ptrs, policy, 13, f.reg);

  std::uint64_t chars = 0, unks = 0;
  for (const auto* c : f.ptrs) {
    for (std::size_t i = 0; i < c->size(); i += 11) {
      const auto& s = c->examples[i].first;
      chars += utf8_chars(s).size();
      for (int id : vocab.segment(s))
        if (id == Vocabulary::kUnkId) ++unks;
    }
  }
  double oov_rate = static_cast<double>(unks) / static_cast<double>(chars);
  CHECK(oov_rate <= (1.0 - 0.90) + 0.05);
}

TEST_CASE("vocab_size below alphabet+reserved is rejected with the feasible minimum") {
  Fixture f;
  VocabPolicy policy;
  policy.vocab_size = 10;
  policy.sample_budget = 500;
  try {
    learn_vocabulary(f.ptrs, policy, 1, f.reg);
    FAIL("expected vocab_size error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("minimum feasible") != std::string::npos);
  }
}

TEST_CASE("saturated vocabulary yields word-count lengths, chars-only yields char counts") {
  LanguageRegistry reg;
  std::vector<std::string> lines = {"aa bb", "bb cc aa"};
  std::vector<std::string> tgt = {"aa bb", "bb cc aa"};
  auto corpus = register_corpus(LanguagePair{"en", "fr"}, lines, tgt, reg);

  // every word (plain and marked) present: mean tokens = mean word count
  auto tokens = controls();
  for (const std::string w : {"aa", "bb", "cc"}) {
    tokens.push_back({w, -1.0});
    tokens.push_back({kBoundaryMarker + w, -1.0});
  }
  for (const std::string ch : {std::string("a"), std::string("b"), std::string("c"), kBoundaryMarker})
    tokens.push_back({ch, -10.0});
  auto saturated = Vocabulary::from_tokens(tokens);
  auto report = length_stats(saturated, {&corpus}, 100);
  CHECK(report.mean_tokens["en"] == Catch::Approx((2.0 + 3.0) / 2.0));

  // characters only: mean tokens = mean char count (boundary markers included)
  auto char_tokens = controls();
  for (const std::string ch : {std::string("a"), std::string("b"), std::string("c"), kBoundaryMarker})
    char_tokens.push_back({ch, -1.0});
  auto chars_only = Vocabulary::from_tokens(char_tokens);
  auto char_report = length_stats(chars_only, {&corpus}, 100);
  CHECK(char_report.mean_tokens["en"] == Catch::Approx((5.0 + 8.0) / 2.0));
}

TEST_CASE("token counts never grow when a constant-score vocabulary is extended") {
  auto base_tokens = controls();
  for (char c = 'a'; c <= 'f'; ++c) base_tokens.push_back({std::string(1, c), -1.0});
  base_tokens.push_back({kBoundaryMarker, -1.0});
  base_tokens.push_back({"ab", -1.0});
  base_tokens.push_back({"cd", -1.0});
  auto small = Vocabulary::from_tokens(base_tokens);

  auto big_tokens = base_tokens;
  big_tokens.push_back({"abc", -1.0});
  big_tokens.push_back({"def", -1.0});
  big_tokens.push_back({kBoundaryMarker + "ab", -1.0});
  auto big = Vocabulary::from_tokens(big_tokens);

  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    std::string text;
    int len = static_cast<int>(rng.next_below(24));
    for (int i = 0; i < len; ++i) {
      if (rng.next_double() < 0.15) text += ' ';
      else text += static_cast<char>('a' + rng.next_below(6));
    }
    CHECK(big.segment(text).size() <= small.segment(text).size());
  }
}

TEST_CASE("mean sequence length is non-increasing in vocab size") {
  Fixture f(1200, 300, 21);
  VocabPolicy policy;
  policy.sample_budget = 2400;
  double prev = 1e9;
  for (int size : {120, 300, 700}) {
    policy.vocab_size = size;
    auto vocab = learn_vocabulary(f.ptrs, policy, 5, f.reg);
    auto report = length_stats(vocab, f.ptrs, 400);
    double mean = report.mean_tokens["en"];
    CHECK(mean <= prev + 1e-9);
    prev = mean;
  }
}

TEST_CASE("vocabulary sampling temperature protects the low-resource language") {
  // two languages with disjoint scripts and a 50:1 size imbalance
  LanguageRegistry reg;
  TextGenSpec gen;
  gen.sentences = 2600;
  gen.lexicon_words = 400;
  gen.seed = 31;
  auto base = generate_base_corpus(gen);

  CipherSpec big_spec;  // "language" over the same letters as en
  big_spec.kind = CipherSpec::Kind::substitution;
  big_spec.code = "big";
  big_spec.seed = 1;
  auto ciphers = resolve_ciphers({big_spec});

  // low-resource language: rewrite into an uppercase script so its characters
  // and pieces are disjoint from the high-resource text
  auto upper = [](std::string s) {
    for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
  };
  std::vector<std::string> low_src, low_tgt;
  for (int i = 0; i < 50; ++i) {
    low_src.push_back(base[static_cast<std::size_t>(i)]);
    low_tgt.push_back(upper(base[static_cast<std::size_t>(i)]));
  }
  reg.register_synthetic("low");

  auto corpora = generate_synthetic(base, ciphers, {2500}, reg);
  corpora.push_back(register_corpus(LanguagePair{"en", "low"}, low_src, low_tgt, reg));
  std::vector<const PairCorpus*> ptrs;
  for (const auto& c : corpora) ptrs.push_back(&c);

  VocabPolicy policy;
  policy.vocab_size = 400;
  policy.sample_budget = 3000;

  policy.vocab_temperature = 1.0;
  auto cold = learn_vocabulary(ptrs, policy, 17, reg);
  policy.vocab_temperature = 100.0;
  auto hot = learn_vocabulary(ptrs, policy, 17, reg);

  auto cold_report = length_stats(cold, ptrs, 50);
  auto hot_report = length_stats(hot, ptrs, 50);
  CHECK(hot_report.mean_tokens["low"] <= cold_report.mean_tokens["low"] + 1e-9);
}

TEST_CASE("vocabulary file round-trips ids and scores") {
  Fixture f;
  VocabPolicy policy;
  policy.vocab_size = 160;
  policy.sample_budget = 1000;
  auto vocab = learn_vocabulary(f.ptrs, policy, 23, f.reg);
  vocab.save("vocab_roundtrip.vocab");
  auto loaded = Vocabulary::load("vocab_roundtrip.vocab");
  REQUIRE(loaded.size() == vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    CHECK(loaded.tokens()[i].surface == vocab.tokens()[i].surface);
    CHECK(loaded.tokens()[i].score == vocab.tokens()[i].score);
  }
  std::string sample = f.corpora[0].examples[3].first;
  CHECK(loaded.segment(sample) == vocab.segment(sample));
  std::remove("vocab_roundtrip.vocab");
}
