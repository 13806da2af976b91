#include <catch2/catch_amalgamated.hpp>

#include "mmt/evalsuite.hpp"
#include "mmt/trainer.hpp"

using namespace mmt;

namespace {

// en plus two substitution ciphers, multiway dev/test included.
struct EvalFixture {
  LanguageRegistry reg;
  std::vector<Cipher> ciphers;
  std::vector<PairCorpus> corpora;
  std::vector<const PairCorpus*> ptrs;
  MultiwaySet dev, test;

  EvalFixture() {
    TextGenSpec gen;
    gen.sentences = 1500;
    gen.lexicon_words = 120;
    gen.min_words = 2;
    gen.max_words = 5;
    gen.seed = 19;
    auto base = generate_base_corpus(gen);

    std::vector<CipherSpec> specs(2);
    specs[0].kind = CipherSpec::Kind::substitution;
    specs[0].code = "c1";
    specs[0].seed = 100;
    specs[1].kind = CipherSpec::Kind::substitution;
    specs[1].code = "c2";
    specs[1].seed = 200;
    ciphers = resolve_ciphers(specs);

    corpora = generate_synthetic(base, ciphers, {1000, 600}, reg, "en", base.size() - 300);
    for (const auto& c : corpora) ptrs.push_back(&c);
    auto splits = split_multiway(base, ciphers, 150, 150);
    dev = std::move(splits.first);
    test = std::move(splits.second);
  }

  // exact translator backed by the cipher keys
  Translator oracle() const {
    return [this](const std::string& source, const LanguagePair& dir) {
      std::string base_text = source;
      for (const auto& c : ciphers)
        if (c.spec().code == dir.source) base_text = c.invert(source);
      if (dir.target == "en") return base_text;
      for (const auto& c : ciphers)
        if (c.spec().code == dir.target) return c.apply(base_text);
      throw std::invalid_argument("oracle has no key for " + dir.target);
    };
  }

  std::vector<LanguagePair> all_directions() const {
    std::vector<LanguagePair> dirs;
    for (const auto* c : ptrs) dirs.push_back(c->pair);
    return dirs;
  }
};

}  // namespace

TEST_CASE("the cipher oracle scores 100 on every direction") {
  EvalFixture f;
  auto scores = evaluate_translator(f.oracle(), f.test, f.all_directions(), 80);
  REQUIRE(scores.size() == 4);
  for (const auto& [id, s] : scores) CHECK(s.value == Catch::Approx(100.0).margin(1e-9));
}

TEST_CASE("an empty-output translator scores 0") {
  EvalFixture f;
  Translator silent = [](const std::string&, const LanguagePair&) { return std::string(); };
  auto scores = evaluate_translator(silent, f.test, f.all_directions(), 40);
  for (const auto& [id, s] : scores) CHECK(s.value == 0.0);
}

TEST_CASE("missing language in the test set is an error") {
  EvalFixture f;
  CHECK_THROWS_AS(
      evaluate_translator(f.oracle(), f.test, {LanguagePair{"en", "zz"}}, 10),
      std::invalid_argument);
}

TEST_CASE("group_report reproduces the reference aggregation layout") {
  // 102 languages per side with the default 25/52/25 grouping; constant
  // scores within each group so the means are exact
  std::map<std::string, std::uint64_t> sizes;
  std::map<std::string, double> scores;
  for (int i = 0; i < 102; ++i) {
    std::string id = "en-l" + std::to_string(i);
    sizes[id] = 1'000'000 - static_cast<std::uint64_t>(i) * 9000;
    scores[id] = i < 25 ? 29.34 : (i < 77 ? 17.50 : 11.72);
  }
  auto stats = compute_stats(sizes);
  REQUIRE(stats.high.size() == 25);
  REQUIRE(stats.med.size() == 52);
  REQUIRE(stats.low.size() == 25);
  auto report = group_report(scores, stats);
  CHECK(report.group_means["High"] == Catch::Approx(29.34).epsilon(1e-12));
  CHECK(report.group_means["Med"] == Catch::Approx(17.50).epsilon(1e-12));
  CHECK(report.group_means["Low"] == Catch::Approx(11.72).epsilon(1e-12));
}

TEST_CASE("deltas against a baseline carry the transfer/interference signs") {
  // Low-group transfer (+) and High-group interference (-), reference values
  std::map<std::string, std::uint64_t> sizes = {{"hi-en", 1000}, {"lo-en", 10}};
  std::map<std::string, double> multilingual = {{"hi-en", 33.85}, {"lo-en", 26.96}};
  std::map<std::string, double> bilingual = {{"hi-en", 37.61}, {"lo-en", 21.63}};
  auto stats = compute_stats(sizes, {0.5, 0.0, 0.5});
  auto report = group_report(multilingual, stats, &bilingual);
  REQUIRE(report.has_baseline);
  CHECK(report.deltas["lo-en"] == Catch::Approx(26.96 - 21.63));
  CHECK(report.deltas["hi-en"] == Catch::Approx(33.85 - 37.61));
  CHECK(report.deltas["lo-en"] > 0.0);
  CHECK(report.deltas["hi-en"] < 0.0);
}

TEST_CASE("identity scores and baseline give zero deltas and constant means") {
  std::map<std::string, std::uint64_t> sizes = {{"a-en", 100}, {"b-en", 50}, {"c-en", 10}};
  std::map<std::string, double> scores = {{"a-en", 42.0}, {"b-en", 42.0}, {"c-en", 42.0}};
  auto stats = compute_stats(sizes, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  auto report = group_report(scores, stats, &scores);
  for (const auto& [g, m] : report.group_means) CHECK(m == 42.0);
  for (const auto& [id, d] : report.deltas) CHECK(d == 0.0);
}

TEST_CASE("group_report rejects missing pairs") {
  std::map<std::string, std::uint64_t> sizes = {{"a-en", 100}, {"b-en", 50}};
  std::map<std::string, double> scores = {{"a-en", 10.0}};
  auto stats = compute_stats(sizes, {0.5, 0.0, 0.5});
  CHECK_THROWS_AS(group_report(scores, stats), std::invalid_argument);
  std::map<std::string, double> full = {{"a-en", 10.0}, {"b-en", 20.0}};
  std::map<std::string, double> partial_baseline = {{"a-en", 10.0}};
  CHECK_THROWS_AS(group_report(full, stats, &partial_baseline), std::invalid_argument);
}

TEST_CASE("report CSV is ordered by descending size") {
  std::map<std::string, std::uint64_t> sizes = {{"a-en", 10}, {"b-en", 1000}, {"c-en", 100}};
  std::map<std::string, double> scores = {{"a-en", 1.0}, {"b-en", 2.0}, {"c-en", 3.0}};
  auto stats = compute_stats(sizes, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  auto report = group_report(scores, stats);
  auto csv = report_csv(report, stats);
  auto lines = split(csv, '\n');
  REQUIRE(lines.size() >= 4);
  CHECK(lines[0] == "pair,size,group,bleu");
  CHECK(lines[1].rfind("b-en,1000,High,", 0) == 0);
  CHECK(lines[2].rfind("c-en,100,Med,", 0) == 0);
  CHECK(lines[3].rfind("a-en,10,Low,", 0) == 0);
}

TEST_CASE("zero-shot evaluation rejects supervised pairs and reports pivot scores") {
  EvalFixture f;
  std::set<std::string> training_ids;
  for (const auto* c : f.ptrs) training_ids.insert(c->pair.id());

  CHECK_THROWS_AS(zero_shot_eval(f.oracle(), f.test, {LanguagePair{"en", "c1"}}, training_ids, 10),
                  std::invalid_argument);

  std::vector<LanguagePair> zs = {LanguagePair{"c1", "c2"}, LanguagePair{"c2", "c1"}};
  auto result = zero_shot_eval(f.oracle(), f.test, zs, training_ids, 40);
  REQUIRE(result.direct.size() == 2);
  REQUIRE(result.pivot.size() == 2);
  for (const auto& [id, s] : result.direct) CHECK(s.value == Catch::Approx(100.0).margin(1e-9));
  for (const auto& [id, s] : result.pivot) CHECK(s.value == Catch::Approx(100.0).margin(1e-9));
}

TEST_CASE("a copy-trained model reaches high BLEU through the full decode path") {
  // identity cipher: the model learns to copy; evaluation runs the real
  // segment -> decode -> detokenize -> BLEU pipeline
  LanguageRegistry reg;
  TextGenSpec gen;
  gen.sentences = 1200;
  gen.lexicon_words = 50;
  gen.min_words = 2;
  gen.max_words = 4;
  gen.seed = 23;
  auto base = generate_base_corpus(gen);

  CipherSpec spec;
  spec.kind = CipherSpec::Kind::identity;
  spec.code = "cid";
  spec.seed = 1;
  auto ciphers = resolve_ciphers({spec});
  auto corpora = generate_synthetic(base, ciphers, {900}, reg, "en", base.size() - 200);
  std::vector<const PairCorpus*> ptrs;
  for (const auto& c : corpora) ptrs.push_back(&c);
  auto [dev, test] = split_multiway(base, ciphers, 100, 100);

  VocabPolicy vp;
  vp.vocab_size = 120;
  vp.sample_budget = 1500;
  auto vocab = learn_vocabulary(ptrs, vp, 4, reg);

  ModelConfig mc;
  mc.encoder_layers = 1;
  mc.decoder_layers = 1;
  mc.model_dim = 48;
  mc.ff_dim = 96;
  mc.heads = 4;
  mc.dropout = 0.1;
  mc.vocab_size = static_cast<int>(vocab.size());
  mc.tag_ids = {vocab.tag_id("cid"), vocab.tag_id("en")};
  mc.max_len = 96;
  Model model(mc, 6);

  std::map<std::string, std::uint64_t> sizes;
  for (const auto* c : ptrs) sizes[c->pair.id()] = c->size();
  auto policy = compute_probabilities(sizes, 1.0);
  MixedStream stream(ptrs, policy, 12, reg);
  auto segmenter = [&](const TaggedExample& e) { return segment_example(vocab, e); };
  BatchStream batches(stream, segmenter, 256);

  TrainConfig tc;
  tc.schedule = {1.0, 200};
  tc.total_steps = 700;
  tc.checkpoint_every = 700;
  tc.seed = 3;
  train(model, batches, tc);

  EvalOptions opts;
  opts.max_sentences = 60;
  opts.max_decode_len = 32;
  auto scores = evaluate_model(model, test, {LanguagePair{"en", "cid"}}, vocab, opts);
  CHECK(scores["en-cid"].value > 90.0);
}
