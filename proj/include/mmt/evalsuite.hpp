#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmt/bleu.hpp"
#include "mmt/corpus.hpp"
#include "mmt/model.hpp"
#include "mmt/subword.hpp"

namespace mmt {

struct EvalOptions {
  std::size_t max_sentences = SIZE_MAX;  // cap per direction
  int max_decode_len = 48;
  std::string mode = "greedy";
};

// A translator maps source text to target text for a given direction. Model
// inference, pivoting and test oracles all fit behind this signature.
using Translator = std::function<std::string(const std::string&, const LanguagePair&)>;

inline Translator model_translator(const Model& model, const Vocabulary& vocab,
                                   const EvalOptions& opts = {}) {
  return [&model, &vocab, opts](const std::string& source, const LanguagePair& dir) {
    std::vector<int> ids;
    ids.push_back(vocab.tag_id(dir.target));
    for (int id : vocab.segment(source)) ids.push_back(id);
    ids.push_back(Vocabulary::kEosId);
    return vocab.detokenize(model.decode(ids, opts.max_decode_len, opts.mode));
  };
}

inline std::map<std::string, BleuScore> evaluate_translator(
    const Translator& translate, const MultiwaySet& testset,
    const std::vector<LanguagePair>& directions, std::size_t max_sentences = SIZE_MAX) {
  std::map<std::string, BleuScore> scores;
  for (const auto& dir : directions) {
    auto sources = testset.column(dir.source);  // throws on missing language
    auto refs = testset.column(dir.target);
    std::size_t n = std::min(max_sentences, sources.size());
    std::vector<std::string> hyps, cut_refs;
    hyps.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      hyps.push_back(translate(sources[i], dir));
      cut_refs.push_back(refs[i]);
    }
    scores[dir.id()] = corpus_bleu(hyps, cut_refs);
  }
  return scores;
}

// Decodes every test source with the direction's target tag, detokenizes and
// scores against the aligned references.
inline std::map<std::string, BleuScore> evaluate_model(const Model& model,
                                                       const MultiwaySet& testset,
                                                       const std::vector<LanguagePair>& directions,
                                                       const Vocabulary& vocab,
                                                       const EvalOptions& opts = {}) {
  return evaluate_translator(model_translator(model, vocab, opts), testset, directions,
                             opts.max_sentences);
}

// ---------------------------------------------------------------------------
// Group aggregation
// ---------------------------------------------------------------------------

struct EvalReport {
  std::map<std::string, double> per_pair;     // BLEU values
  std::map<std::string, double> group_means;  // High/Med/Low
  std::map<std::string, double> deltas;       // per pair, score - baseline
  bool has_baseline = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["per_pair"] = per_pair;
    j["group_means"] = group_means;
    if (has_baseline) j["deltas"] = deltas;
    return j;
  }
};

inline std::map<std::string, double> bleu_values(const std::map<std::string, BleuScore>& scores) {
  std::map<std::string, double> out;
  for (const auto& [id, s] : scores) out[id] = s.value;
  return out;
}

inline EvalReport group_report(const std::map<std::string, double>& scores,
                               const DatasetStats& stats,
                               const std::map<std::string, double>* baseline = nullptr) {
  EvalReport report;
  auto mean_over = [&](const std::vector<std::string>& ids) {
    double sum = 0.0;
    for (const auto& id : ids) {
      auto it = scores.find(id);
      if (it == scores.end()) throw std::invalid_argument("missing score for pair " + id);
      sum += it->second;
    }
    return ids.empty() ? 0.0 : sum / static_cast<double>(ids.size());
  };
  report.per_pair = scores;
  report.group_means["High"] = mean_over(stats.high);
  report.group_means["Med"] = mean_over(stats.med);
  report.group_means["Low"] = mean_over(stats.low);
  if (baseline) {
    report.has_baseline = true;
    for (const auto& [id, value] : scores) {
      auto it = baseline->find(id);
      if (it == baseline->end()) throw std::invalid_argument("baseline missing pair " + id);
      report.deltas[id] = value - it->second;
    }
  }
  return report;
}

// CSV ordered by descending D_l, the x-axis convention of the per-pair plots.
inline std::string report_csv(const EvalReport& report, const DatasetStats& stats) {
  std::string csv = "pair,size,group,bleu";
  if (report.has_baseline) csv += ",delta";
  csv += "\n";
  auto group_name = [&](const std::string& id) {
    switch (stats.group_of(id)) {
      case DatasetStats::Group::high: return "High";
      case DatasetStats::Group::med: return "Med";
      default: return "Low";
    }
  };
  char buf[64];
  for (const auto& id : stats.by_descending_size()) {
    auto it = report.per_pair.find(id);
    if (it == report.per_pair.end()) throw std::invalid_argument("missing score for pair " + id);
    std::snprintf(buf, sizeof buf, "%.4f", it->second);
    csv += id + "," + std::to_string(stats.sizes.at(id)) + "," + group_name(id) + "," + buf;
    if (report.has_baseline) {
      std::snprintf(buf, sizeof buf, "%.4f", report.deltas.at(id));
      csv += std::string(",") + buf;
    }
    csv += "\n";
  }
  return csv;
}

// ---------------------------------------------------------------------------
// Zero-shot evaluation
// ---------------------------------------------------------------------------

struct ZeroShotResult {
  std::map<std::string, BleuScore> direct;
  std::map<std::string, BleuScore> pivot;  // two-step x -> bridge -> y
};

// Directions must have no direct parallel data: each pair id is checked
// against the training manifest before any decoding happens.
inline ZeroShotResult zero_shot_eval(const Translator& translate, const MultiwaySet& testset,
                                     const std::vector<LanguagePair>& directions,
                                     const std::set<std::string>& training_pair_ids,
                                     std::size_t max_sentences = SIZE_MAX,
                                     const std::string& bridge = "en") {
  for (const auto& dir : directions) {
    if (training_pair_ids.count(dir.id()))
      throw std::invalid_argument("not-zero-shot: pair " + dir.id() +
                                  " is present in the training manifest");
  }
  ZeroShotResult result;
  result.direct = evaluate_translator(translate, testset, directions, max_sentences);
  Translator pivoted = [&](const std::string& source, const LanguagePair& dir) {
    std::string bridged = translate(source, LanguagePair{dir.source, bridge});
    return translate(bridged, LanguagePair{bridge, dir.target});
  };
  result.pivot = evaluate_translator(pivoted, testset, directions, max_sentences);
  return result;
}

inline ZeroShotResult zero_shot_eval(const Model& model, const MultiwaySet& testset,
                                     const std::vector<LanguagePair>& directions,
                                     const Vocabulary& vocab,
                                     const std::set<std::string>& training_pair_ids,
                                     const EvalOptions& opts = {}, const std::string& bridge = "en") {
  return zero_shot_eval(model_translator(model, vocab, opts), testset, directions,
                        training_pair_ids, opts.max_sentences, bridge);
}

}  // namespace mmt
