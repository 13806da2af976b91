#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmt/common.hpp"
#include "mmt/corpus.hpp"

namespace mmt {

// ---------------------------------------------------------------------------
// Temperature-based sampling distribution
// ---------------------------------------------------------------------------

struct SamplingPolicy {
  double temperature = 1.0;
  std::map<std::string, double> probabilities;  // pair id -> p_l(T)
};

// p_l(T) = (D_l / sum D)^(1/T), renormalized. T=1 reproduces the data
// distribution; large T approaches uniform over pairs with data.
inline SamplingPolicy compute_probabilities(const std::map<std::string, std::uint64_t>& sizes,
                                            double temperature) {
  if (!(temperature > 0.0))
    throw std::domain_error("sampling temperature must be > 0, got " + std::to_string(temperature));
  if (sizes.empty()) throw std::invalid_argument("compute_probabilities: no sizes given");

  long double total = 0.0L;
  for (const auto& [id, d] : sizes) total += static_cast<long double>(d);
  if (total <= 0.0L) throw std::invalid_argument("compute_probabilities: all sizes are zero");

  // exp((1/T) * log p_l) keeps the computation stable for large T.
  SamplingPolicy policy;
  policy.temperature = temperature;
  double norm = 0.0;
  for (const auto& [id, d] : sizes) {
    double p = 0.0;
    if (d > 0) {
      double log_pl = std::log(static_cast<double>(d) / static_cast<double>(total));
      p = std::exp(log_pl / temperature);
    }
    policy.probabilities[id] = p;
    norm += p;
  }
  for (auto& [id, p] : policy.probabilities) p /= norm;
  return policy;
}

// ---------------------------------------------------------------------------
// Target-language tagging
// ---------------------------------------------------------------------------

inline std::string language_tag(const std::string& code) { return "<2" + code + ">"; }

inline std::string prepend_language_tag(const std::string& source, const std::string& target_code,
                                        const LanguageRegistry& registry) {
  if (!registry.contains(target_code))
    throw std::invalid_argument("unknown language code for tag: " + target_code);
  return language_tag(target_code) + " " + source;
}

struct TaggedExample {
  LanguagePair pair;
  std::string source_text;  // begins with exactly one "<2xx>" tag token
  std::string target_text;
};

// ---------------------------------------------------------------------------
// Mixed example stream
// ---------------------------------------------------------------------------

// Infinite stream over a set of pair corpora. Each example's pair is drawn
// i.i.d. from the policy; within a pair the corpus is traversed in shuffled
// epochs with wraparound, so over-sampling of small corpora is realized by
// repetition. Single-consumer; deterministic for a given seed.
class MixedStream {
 public:
  MixedStream(std::vector<const PairCorpus*> corpora, SamplingPolicy policy, std::uint64_t seed,
              const LanguageRegistry& registry)
      : policy_(std::move(policy)), rng_(derive_seed(seed, "mixed-stream")) {
    for (const auto* c : corpora) {
      auto it = policy_.probabilities.find(c->pair.id());
      if (it == policy_.probabilities.end())
        throw std::invalid_argument("sampling policy does not cover pair " + c->pair.id());
      validate_pair(c->pair, registry);
    }
    // Deterministic pair order: policy map order (lexicographic by id).
    for (const auto& [id, p] : policy_.probabilities) {
      const PairCorpus* corpus = nullptr;
      for (const auto* c : corpora)
        if (c->pair.id() == id) corpus = c;
      if (corpus == nullptr)
        throw std::invalid_argument("policy names pair without corpus: " + id);
      if (p <= 0.0) continue;  // zero-probability pairs never drawn
      PairState state;
      state.corpus = corpus;
      state.rng = Rng(derive_seed(seed, "pair-epochs", fnv1a64(id)));
      state.order.resize(corpus->size());
      for (std::size_t i = 0; i < state.order.size(); ++i) state.order[i] = i;
      state.rng.shuffle(state.order);
      cumulative_ += p;
      cum_.push_back(cumulative_);
      pairs_.push_back(std::move(state));
    }
    if (pairs_.empty()) throw std::invalid_argument("mixed stream has no pairs with p > 0");
  }

  TaggedExample next() {
    double u = rng_.next_double() * cumulative_;
    std::size_t lo = 0, hi = cum_.size() - 1;
    while (lo < hi) {
      std::size_t mid = (lo + hi) / 2;
      if (cum_[mid] > u) hi = mid;
      else lo = mid + 1;
    }
    PairState& state = pairs_[lo];
    if (state.cursor >= state.order.size()) {
      state.cursor = 0;
      state.rng.shuffle(state.order);  // epoch-wise reshuffle
    }
    const auto& ex = state.corpus->examples[state.order[state.cursor++]];
    TaggedExample out;
    out.pair = state.corpus->pair;
    out.source_text = language_tag(out.pair.target) + " " + ex.first;
    out.target_text = ex.second;
    return out;
  }

 private:
  struct PairState {
    const PairCorpus* corpus = nullptr;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    Rng rng{0};
  };

  SamplingPolicy policy_;
  std::vector<PairState> pairs_;
  std::vector<double> cum_;
  double cumulative_ = 0.0;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Token-budget batching
// ---------------------------------------------------------------------------

struct SegmentedExample {
  LanguagePair pair;
  std::vector<int> source_ids;  // leading tag id included
  std::vector<int> target_ids;  // trailing eos id included
};

struct Batch {
  std::vector<SegmentedExample> examples;
  std::size_t token_count = 0;                   // source + target ids, padding excluded
  std::map<std::string, std::size_t> composition;  // pair id -> example count
};

// Greedy packing: examples are appended until the next one would exceed the
// budget. `segment` maps a TaggedExample to id sequences.
template <typename Stream, typename Segmenter>
class BatchStream {
 public:
  BatchStream(Stream& stream, Segmenter segment, std::size_t token_budget)
      : stream_(stream), segment_(std::move(segment)), budget_(token_budget) {
    if (budget_ == 0) throw std::invalid_argument("token budget must be > 0");
  }

  Batch next() {
    Batch batch;
    for (;;) {
      if (!pending_) {
        TaggedExample raw = stream_.next();
        pending_ = segment_(raw);
      }
      std::size_t tokens = pending_->source_ids.size() + pending_->target_ids.size();
      if (tokens > budget_) {
        throw std::runtime_error("example exceeds token budget (" + std::to_string(tokens) + " > " +
                                 std::to_string(budget_) + ") for pair " + pending_->pair.id());
      }
      if (batch.token_count + tokens > budget_) break;
      batch.token_count += tokens;
      batch.composition[pending_->pair.id()]++;
      batch.examples.push_back(std::move(*pending_));
      pending_.reset();
    }
    return batch;
  }

 private:
  Stream& stream_;
  Segmenter segment_;
  std::size_t budget_;
  std::optional<SegmentedExample> pending_;
};

}  // namespace mmt
