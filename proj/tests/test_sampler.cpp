#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mmt/sampler.hpp"

using namespace mmt;

namespace {

std::map<std::string, std::uint64_t> random_sizes(Rng& rng, int max_pairs) {
  std::map<std::string, std::uint64_t> sizes;
  int n = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_pairs)));
  for (int i = 0; i < n; ++i)
    sizes["p" + std::to_string(i)] = 1 + rng.next_below(2'000'000'000ULL);
  return sizes;
}

PairCorpus tiny_corpus(const std::string& src, const std::string& tgt, int n,
                       const LanguageRegistry& reg) {
  std::vector<std::string> s, t;
  for (int i = 0; i < n; ++i) {
    s.push_back(src + " sent " + std::to_string(i));
    t.push_back(tgt + " sent " + std::to_string(i));
  }
  return register_corpus(LanguagePair{src, tgt}, s, t, reg);
}

}  // namespace

TEST_CASE("compute_probabilities matches hand-derived values") {
  auto t1 = compute_probabilities({{"a", 800}, {"b", 100}, {"c", 100}}, 1.0);
  CHECK(t1.probabilities["a"] == Catch::Approx(0.8).epsilon(1e-12));
  CHECK(t1.probabilities["b"] == Catch::Approx(0.1).epsilon(1e-12));
  CHECK(t1.probabilities["c"] == Catch::Approx(0.1).epsilon(1e-12));

  // direct evaluation: 0.8^0.2 = 0.9564, 0.2^0.2 = 0.7248, renormalized
  auto t5 = compute_probabilities({{"a", 4}, {"b", 1}}, 5.0);
  CHECK(t5.probabilities["a"] == Catch::Approx(0.5689).margin(1e-3));
  CHECK(t5.probabilities["b"] == Catch::Approx(0.4311).margin(1e-3));

  auto t100 = compute_probabilities({{"a", 4}, {"b", 1}}, 100.0);
  CHECK(t100.probabilities["a"] == Catch::Approx(0.5035).margin(1e-3));
  CHECK(t100.probabilities["b"] == Catch::Approx(0.4965).margin(1e-3));
}

TEST_CASE("compute_probabilities rejects bad input") {
  CHECK_THROWS_AS(compute_probabilities({{"a", 1}}, 0.0), std::domain_error);
  CHECK_THROWS_AS(compute_probabilities({{"a", 1}}, -2.0), std::domain_error);
  CHECK_THROWS_AS(compute_probabilities({{"a", 0}, {"b", 0}}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(compute_probabilities({}, 1.0), std::invalid_argument);
}

TEST_CASE("zero-size pairs get zero probability") {
  auto p = compute_probabilities({{"a", 10}, {"b", 0}}, 5.0);
  CHECK(p.probabilities["a"] == Catch::Approx(1.0));
  CHECK(p.probabilities["b"] == 0.0);
}

TEST_CASE("policy properties hold on random size vectors") {
  Rng rng(1234);
  for (int trial = 0; trial < 1000; ++trial) {
    auto sizes = random_sizes(rng, 64);
    double t = std::exp(rng.next_double() * std::log(200.0));  // T in [1, 200)

    auto policy = compute_probabilities(sizes, t);
    double sum = 0.0;
    for (const auto& [id, p] : policy.probabilities) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-9);

    // T=1 identity
    auto base = compute_probabilities(sizes, 1.0);
    long double total = 0.0L;
    for (const auto& [id, d] : sizes) total += d;
    for (const auto& [id, d] : sizes) {
      double expected = static_cast<double>(d) / static_cast<double>(total);
      CHECK(std::abs(base.probabilities[id] - expected) <= 1e-12 * std::max(1.0, expected));
    }

    // order preservation at this temperature
    for (auto i = sizes.begin(); i != sizes.end(); ++i) {
      auto j = std::next(i);
      if (j == sizes.end()) break;
      if (i->second > j->second) CHECK(policy.probabilities[i->first] > policy.probabilities[j->first]);
      if (i->second < j->second) CHECK(policy.probabilities[i->first] < policy.probabilities[j->first]);
    }

    // uniform limit
    auto uniform = compute_probabilities(sizes, 1e6);
    double inv_n = 1.0 / static_cast<double>(sizes.size());
    for (const auto& [id, p] : uniform.probabilities) CHECK(std::abs(p - inv_n) < 1e-4);
  }
}

TEST_CASE("largest pair probability is non-increasing in T, smallest non-decreasing") {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    auto sizes = random_sizes(rng, 16);
    std::string largest, smallest;
    std::uint64_t max_d = 0, min_d = UINT64_MAX;
    for (const auto& [id, d] : sizes) {
      if (d > max_d) { max_d = d; largest = id; }
      if (d < min_d) { min_d = d; smallest = id; }
    }
    double prev_max = 2.0, prev_min = -1.0;
    for (double t : {0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 100.0, 1000.0}) {
      auto p = compute_probabilities(sizes, t);
      CHECK(p.probabilities[largest] <= prev_max + 1e-12);
      CHECK(p.probabilities[smallest] >= prev_min - 1e-12);
      prev_max = p.probabilities[largest];
      prev_min = p.probabilities[smallest];
    }
  }
}

TEST_CASE("prepend_language_tag") {
  LanguageRegistry reg;
  CHECK(prepend_language_tag("hello", "fr", reg) == "<2fr> hello");
  CHECK(prepend_language_tag("", "de", reg) == "<2de> ");
  CHECK_THROWS_AS(prepend_language_tag("x", "qq", reg), std::invalid_argument);
}

TEST_CASE("degenerate policy yields a single-pair stream") {
  LanguageRegistry reg;
  auto a = tiny_corpus("en", "fr", 5, reg);
  auto b = tiny_corpus("fr", "en", 5, reg);
  SamplingPolicy policy;
  policy.temperature = 1.0;
  policy.probabilities = {{"en-fr", 1.0}, {"fr-en", 0.0}};
  MixedStream stream({&a, &b}, policy, 7, reg);
  for (int i = 0; i < 50; ++i) {
    auto ex = stream.next();
    CHECK(ex.pair.id() == "en-fr");
    CHECK(ex.source_text.rfind("<2fr> ", 0) == 0);
  }
}

TEST_CASE("empirical frequencies concentrate around the policy") {
  LanguageRegistry reg;
  auto a = tiny_corpus("en", "fr", 40, reg);
  auto b = tiny_corpus("fr", "en", 10, reg);
  SamplingPolicy policy;
  policy.temperature = 1.0;
  policy.probabilities = {{"en-fr", 0.8}, {"fr-en", 0.2}};
  MixedStream stream({&a, &b}, policy, 20240601, reg);
  int count_a = 0;
  const int n = 100'000;
  for (int i = 0; i < n; ++i)
    if (stream.next().pair.id() == "en-fr") ++count_a;
  double freq = static_cast<double>(count_a) / n;
  CHECK(freq >= 0.796);
  CHECK(freq <= 0.804);
}

TEST_CASE("stream law: empirical L1 distance under 0.02 at 1e5 draws") {
  LanguageRegistry reg;
  Rng rng(5150);
  for (int trial = 0; trial < 3; ++trial) {
    int n_pairs = 2 + static_cast<int>(rng.next_below(15));
    std::vector<PairCorpus> corpora;
    std::map<std::string, std::uint64_t> sizes;
    for (int i = 0; i < n_pairs; ++i) {
      std::string code = "z" + std::to_string(i);
      reg.register_synthetic(code);
      corpora.push_back(tiny_corpus("en", code, 3 + static_cast<int>(rng.next_below(20)), reg));
      sizes[corpora.back().pair.id()] = 1 + rng.next_below(100'000);
    }
    auto policy = compute_probabilities(sizes, 3.0);
    std::vector<const PairCorpus*> ptrs;
    for (auto& c : corpora) ptrs.push_back(&c);
    MixedStream stream(ptrs, policy, 42 + trial, reg);
    std::map<std::string, int> counts;
    const int n = 100'000;
    for (int i = 0; i < n; ++i) counts[stream.next().pair.id()]++;
    double l1 = 0.0;
    for (const auto& [id, p] : policy.probabilities)
      l1 += std::abs(p - static_cast<double>(counts[id]) / n);
    CHECK(l1 < 0.02);
  }
}

TEST_CASE("streams are reproducible and exhaust epochs before repeating") {
  LanguageRegistry reg;
  auto a = tiny_corpus("en", "fr", 7, reg);
  SamplingPolicy policy;
  policy.temperature = 1.0;
  policy.probabilities = {{"en-fr", 1.0}};

  MixedStream s1({&a}, policy, 99, reg), s2({&a}, policy, 99, reg);
  std::vector<std::string> first, second;
  for (int i = 0; i < 1000; ++i) {
    first.push_back(s1.next().source_text);
    second.push_back(s2.next().source_text);
  }
  CHECK(first == second);

  // every epoch of 7 draws covers the whole corpus exactly once
  MixedStream s3({&a}, policy, 3, reg);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::set<std::string> seen;
    for (int i = 0; i < 7; ++i) seen.insert(s3.next().target_text);
    CHECK(seen.size() == 7);
  }
}

TEST_CASE("policy must cover all corpora") {
  LanguageRegistry reg;
  auto a = tiny_corpus("en", "fr", 3, reg);
  SamplingPolicy policy;
  policy.temperature = 1.0;
  policy.probabilities = {{"en-de", 1.0}};
  CHECK_THROWS_AS(MixedStream({&a}, policy, 1, reg), std::invalid_argument);
}

namespace {

// word-count segmenter: one id per whitespace token
SegmentedExample word_segmenter(const TaggedExample& ex) {
  SegmentedExample out;
  out.pair = ex.pair;
  for (std::size_t i = 0; i < split_words(ex.source_text).size(); ++i)
    out.source_ids.push_back(static_cast<int>(i));
  for (std::size_t i = 0; i < split_words(ex.target_text).size(); ++i)
    out.target_ids.push_back(static_cast<int>(i));
  return out;
}

struct FixedStream {
  TaggedExample example;
  TaggedExample next() { return example; }
};

}  // namespace

TEST_CASE("batch packing respects the token budget") {
  TaggedExample ex;
  ex.pair = LanguagePair{"en", "fr"};
  ex.source_text = "<2fr> a b c";      // 4 tokens
  ex.target_text = "w x y z";          // 4 tokens
  FixedStream stream{ex};

  BatchStream bs(stream, word_segmenter, 10);
  for (int i = 0; i < 5; ++i) {
    auto batch = bs.next();
    CHECK(batch.examples.size() == 1);  // two examples would need 16 > 10 tokens
    CHECK(batch.token_count == 8);
    CHECK(batch.composition.at("en-fr") == 1);
  }

  BatchStream exact(stream, word_segmenter, 8);
  CHECK(exact.next().examples.size() == 1);

  BatchStream big(stream, word_segmenter, 16);
  CHECK(big.next().examples.size() == 2);

  BatchStream tiny(stream, word_segmenter, 7);
  CHECK_THROWS_AS(tiny.next(), std::runtime_error);
}
