#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmt/common.hpp"
#include "mmt/corpus.hpp"
#include "mmt/sampler.hpp"

namespace mmt {

// Word-boundary marker (U+2581). Spaces are rewritten to this character
// before segmentation and restored by detokenize, which keeps segmentation
// lossless on covered text.
inline const std::string kBoundaryMarker = "\xe2\x96\x81";
inline const std::string kUnkGlyph = "\xef\xbf\xbd";  // U+FFFD shown for unk ids

struct VocabPolicy {
  int vocab_size = 1000;
  double char_coverage = 1.0;       // fraction of character occurrences to cover
  double vocab_temperature = 1.0;   // T_V over per-language monolingual sizes
  std::size_t sample_budget = 100'000;  // sentences drawn per learner run
  int max_piece_len = 16;           // characters
  int em_iterations = 4;

  void validate() const {
    if (vocab_size < 1) throw std::invalid_argument("vocab_size must be positive");
    if (!(char_coverage > 0.0) || char_coverage > 1.0)
      throw std::invalid_argument("char_coverage must be in (0, 1]");
    if (!(vocab_temperature > 0.0)) throw std::domain_error("vocab_temperature must be > 0");
    if (sample_budget == 0) throw std::invalid_argument("sample_budget must be positive");
  }
};

struct VocabToken {
  std::string surface;
  double score = 0.0;
};

class Vocabulary {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kBosId = 1;
  static constexpr int kEosId = 2;
  static constexpr int kUnkId = 3;

  // Builds a vocabulary from an ordered token list; order defines ids. The
  // first four tokens must be the control tokens, language tags follow.
  static Vocabulary from_tokens(std::vector<VocabToken> tokens) {
    static const std::vector<std::string> controls = {"<pad>", "<s>", "</s>", "<unk>"};
    if (tokens.size() < controls.size())
      throw std::invalid_argument("vocabulary must start with the four control tokens");
    for (std::size_t i = 0; i < controls.size(); ++i)
      if (tokens[i].surface != controls[i])
        throw std::invalid_argument("token " + std::to_string(i) + " must be " + controls[i]);

    Vocabulary v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      const std::string& s = v.tokens_[i].surface;
      if (!v.by_surface_.emplace(s, static_cast<int>(i)).second)
        throw std::invalid_argument("duplicate token surface: " + s);
      if (s.size() > 3 && s.rfind("<2", 0) == 0 && s.back() == '>')
        v.tag_ids_[s.substr(2, s.size() - 3)] = static_cast<int>(i);
      std::size_t n_chars = utf8_chars(s).size();
      if (i >= controls.size() && v.tag_ids_.count(tag_code_of(s)) == 0)
        v.max_piece_chars_ = std::max(v.max_piece_chars_, n_chars);
      if (i >= controls.size() && n_chars == 1 && s.rfind("<2", 0) != 0)
        v.alphabet_.insert(s);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<VocabToken>& tokens() const { return tokens_; }
  const std::set<std::string>& alphabet() const { return alphabet_; }

  int id_of(const std::string& surface) const {
    auto it = by_surface_.find(surface);
    return it == by_surface_.end() ? -1 : it->second;
  }

  int tag_id(const std::string& code) const {
    auto it = tag_ids_.find(code);
    if (it == tag_ids_.end()) throw std::invalid_argument("no language tag for code: " + code);
    return it->second;
  }

  bool is_tag(int id) const {
    const std::string& s = surface_of(id);
    return s.size() > 3 && s.rfind("<2", 0) == 0 && s.back() == '>';
  }

  const std::string& surface_of(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw std::invalid_argument("invalid token id: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)].surface;
  }

  // Maximum-score (Viterbi) segmentation; ties prefer fewer tokens, then the
  // leftmost-longest split. Reserved tag surfaces are matched atomically;
  // characters without any covering token map to a single unk each.
  std::vector<int> segment(const std::string& text) const {
    std::vector<int> out;
    std::size_t i = 0, plain_begin = 0;
    while (i < text.size()) {
      int reserved_id = -1;
      std::size_t reserved_len = 0;
      if (text[i] == '<') {
        for (const auto& [code, id] : tag_ids_) {
          const std::string& surface = tokens_[static_cast<std::size_t>(id)].surface;
          if (surface.size() > reserved_len && text.compare(i, surface.size(), surface) == 0) {
            reserved_id = id;
            reserved_len = surface.size();
          }
        }
      }
      if (reserved_id >= 0) {
        viterbi(text.substr(plain_begin, i - plain_begin), out);
        out.push_back(reserved_id);
        i += reserved_len;
        plain_begin = i;
      } else {
        ++i;
      }
    }
    viterbi(text.substr(plain_begin), out);
    return out;
  }

  // Inverse of segment on covered text. Control tokens render as nothing,
  // unk as the replacement glyph, boundary markers as spaces.
  std::string detokenize(const std::vector<int>& ids) const {
    std::string joined;
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw std::invalid_argument("invalid token id: " + std::to_string(id));
      if (id == kPadId || id == kBosId || id == kEosId) continue;
      if (id == kUnkId) {
        joined += kUnkGlyph;
        continue;
      }
      joined += tokens_[static_cast<std::size_t>(id)].surface;
    }
    std::string out;
    out.reserve(joined.size());
    for (std::size_t i = 0; i < joined.size();) {
      if (joined.compare(i, kBoundaryMarker.size(), kBoundaryMarker) == 0) {
        out += ' ';
        i += kBoundaryMarker.size();
      } else {
        out += joined[i];
        ++i;
      }
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
    out.precision(17);
    for (const auto& t : tokens_) out << t.surface << '\t' << t.score << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::vector<VocabToken> tokens;
    for (const auto& line : read_lines(path)) {
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw std::runtime_error("bad vocabulary line: " + line);
      tokens.push_back({line.substr(0, tab), std::stod(line.substr(tab + 1))});
    }
    return from_tokens(std::move(tokens));
  }

 private:
  static std::string tag_code_of(const std::string& s) {
    if (s.size() > 3 && s.rfind("<2", 0) == 0 && s.back() == '>') return s.substr(2, s.size() - 3);
    return std::string();
  }

  struct Cell {
    double score = -std::numeric_limits<double>::infinity();
    int tokens = 0;
    int take_chars = 0;  // characters consumed by the chosen token (0 = unset)
    int token_id = -1;
  };

  void viterbi(const std::string& raw, std::vector<int>& out) const {
    if (raw.empty()) return;
    std::string text;
    text.reserve(raw.size() * 2);
    for (char c : raw) {
      if (c == ' ') text += kBoundaryMarker;
      else text += c;
    }
    auto chars = utf8_chars(text);
    const std::size_t n = chars.size();
    std::vector<std::size_t> offset(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) offset[i + 1] = offset[i] + chars[i].size();

    constexpr double kUnkScore = -1e4;
    std::vector<Cell> best(n + 1);
    best[n] = Cell{0.0, 0, 0, -1};
    for (std::size_t i = n; i-- > 0;) {
      Cell& cell = best[i];
      std::size_t max_len = std::min(static_cast<std::size_t>(max_piece_chars_), n - i);
      for (std::size_t len = 1; len <= max_len; ++len) {
        const Cell& next = best[i + len];
        auto it = by_surface_.find(text.substr(offset[i], offset[i + len] - offset[i]));
        if (it == by_surface_.end()) continue;
        double score = tokens_[static_cast<std::size_t>(it->second)].score + next.score;
        int count = next.tokens + 1;
        bool accept = cell.take_chars == 0 || score > cell.score + 1e-12;
        if (!accept && score > cell.score - 1e-12) {
          accept = count < cell.tokens ||
                   (count == cell.tokens && static_cast<int>(len) > cell.take_chars);
        }
        if (accept) {
          cell.score = score;
          cell.tokens = count;
          cell.take_chars = static_cast<int>(len);
          cell.token_id = it->second;
        }
      }
      if (cell.take_chars == 0) {  // uncovered character: exactly one unk
        const Cell& next = best[i + 1];
        cell.score = kUnkScore + next.score;
        cell.tokens = next.tokens + 1;
        cell.take_chars = 1;
        cell.token_id = kUnkId;
      }
    }
    for (std::size_t i = 0; i < n;) {
      out.push_back(best[i].token_id);
      i += static_cast<std::size_t>(best[i].take_chars);
    }
  }

  std::vector<VocabToken> tokens_;
  std::unordered_map<std::string, int> by_surface_;
  std::map<std::string, int> tag_ids_;  // code -> id
  std::set<std::string> alphabet_;
  std::size_t max_piece_chars_ = 1;
};

// ---------------------------------------------------------------------------
// Vocabulary learning
// ---------------------------------------------------------------------------

namespace detail {

// Monolingual sides per language, in deterministic order.
inline std::map<std::string, std::vector<const std::string*>> monolingual_sides(
    const std::vector<const PairCorpus*>& corpora) {
  std::map<std::string, std::vector<const std::string*>> sides;
  for (const auto* c : corpora) {
    for (const auto& [src, tgt] : c->examples) {
      sides[c->pair.source].push_back(&src);
      sides[c->pair.target].push_back(&tgt);
    }
  }
  return sides;
}

}  // namespace detail

// Unigram-style learner: language-balanced sentence sampling, coverage-based
// alphabet selection, then alternating score-and-prune passes over frequent
// substrings until the token budget is reached.
inline Vocabulary learn_vocabulary(const std::vector<const PairCorpus*>& corpora,
                                   const VocabPolicy& policy, std::uint64_t seed,
                                   const LanguageRegistry& registry) {
  policy.validate();
  if (corpora.empty()) throw std::invalid_argument("learn_vocabulary: no corpora");

  auto sides = detail::monolingual_sides(corpora);
  std::map<std::string, std::uint64_t> sizes;
  for (const auto& [code, lines] : sides) {
    if (!registry.contains(code))
      throw std::invalid_argument("corpus language not registered: " + code);
    sizes[code] = lines.size();
  }
  auto lang_policy = compute_probabilities(sizes, policy.vocab_temperature);

  // Apportion the sentence budget per language (largest remainder), then
  // draw with shuffled-epoch cycling so small languages are over-sampled.
  std::map<std::string, std::size_t> quota;
  {
    std::size_t assigned = 0;
    std::vector<std::pair<double, std::string>> remainders;
    for (const auto& [code, p] : lang_policy.probabilities) {
      double exact = p * static_cast<double>(policy.sample_budget);
      std::size_t base = static_cast<std::size_t>(exact);
      quota[code] = base;
      assigned += base;
      remainders.push_back({-(exact - static_cast<double>(base)), code});
    }
    std::sort(remainders.begin(), remainders.end());
    for (std::size_t i = 0; assigned < policy.sample_budget && i < remainders.size(); ++i, ++assigned)
      quota[remainders[i].second]++;
  }

  std::unordered_map<std::string, std::uint64_t> word_counts;
  for (const auto& [code, n] : quota) {
    const auto& lines = sides[code];
    if (lines.empty()) continue;
    std::vector<std::size_t> order(lines.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "vocab-sample", fnv1a64(code)));
    rng.shuffle(order);
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (cursor >= order.size()) {
        cursor = 0;
        rng.shuffle(order);
      }
      const std::string& line = *lines[order[cursor++]];
      auto words = split_words(line);
      for (std::size_t w = 0; w < words.size(); ++w)
        ++word_counts[w == 0 ? words[w] : kBoundaryMarker + words[w]];
    }
  }
  if (word_counts.empty()) throw std::runtime_error("learn_vocabulary: sampled text is empty");

  // Alphabet by coverage: smallest character set covering the requested
  // fraction of character occurrences. The boundary marker is always kept.
  std::map<std::string, std::uint64_t> char_counts;
  std::uint64_t char_total = 0;
  for (const auto& [word, freq] : word_counts) {
    for (const auto& ch : utf8_chars(word)) {
      char_counts[ch] += freq;
      char_total += freq;
    }
  }
  std::vector<std::pair<std::string, std::uint64_t>> char_order(char_counts.begin(),
                                                                char_counts.end());
  std::sort(char_order.begin(), char_order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::set<std::string> alphabet = {kBoundaryMarker};
  std::uint64_t covered = char_counts.count(kBoundaryMarker) ? char_counts[kBoundaryMarker] : 0;
  for (const auto& [ch, cnt] : char_order) {
    if (static_cast<double>(covered) >=
        policy.char_coverage * static_cast<double>(char_total) - 1e-9)
      break;
    if (alphabet.insert(ch).second) covered += cnt;
  }

  // Reserved tokens: controls plus one tag per language present.
  std::vector<VocabToken> reserved = {{"<pad>", 0.0}, {"<s>", 0.0}, {"</s>", 0.0}, {"<unk>", 0.0}};
  for (const auto& [code, lines] : sides) reserved.push_back({language_tag(code), 0.0});

  const std::size_t min_size = reserved.size() + alphabet.size();
  if (static_cast<std::size_t>(policy.vocab_size) < min_size + 1)
    throw std::invalid_argument("vocab_size " + std::to_string(policy.vocab_size) +
                                " too small; minimum feasible is " + std::to_string(min_size + 1) +
                                " (reserved + alphabet + 1)");
  const std::size_t piece_budget = static_cast<std::size_t>(policy.vocab_size) - min_size;

  // Seed candidates: frequent substrings over covered characters, boundary
  // marker allowed only word-initially.
  std::unordered_map<std::string, std::uint64_t> candidates;
  for (const auto& [word, freq] : word_counts) {
    auto chars = utf8_chars(word);
    std::vector<std::size_t> off(chars.size() + 1, 0);
    std::vector<bool> cov(chars.size());
    for (std::size_t i = 0; i < chars.size(); ++i) {
      off[i + 1] = off[i] + chars[i].size();
      cov[i] = alphabet.count(chars[i]) > 0;
    }
    std::size_t max_len = std::min<std::size_t>(chars.size(),
                                                static_cast<std::size_t>(policy.max_piece_len));
    for (std::size_t i = 0; i < chars.size(); ++i) {
      if (i > 0 && chars[i] == kBoundaryMarker) continue;  // marker only at start
      bool ok = true;
      for (std::size_t len = 1; len <= max_len && i + len <= chars.size(); ++len) {
        std::size_t j = i + len - 1;
        if (!cov[j] || (j > i && chars[j] == kBoundaryMarker)) { ok = false; }
        if (!ok) break;
        if (len >= 2) candidates[word.substr(off[i], off[i + len] - off[i])] += freq;
      }
    }
  }
  for (auto it = candidates.begin(); it != candidates.end();) {
    if (it->second < 2) it = candidates.erase(it);
    else ++it;
  }

  auto take_top = [](std::vector<std::pair<std::string, std::uint64_t>>& items, std::size_t k) {
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (items.size() > k) items.resize(k);
  };

  std::vector<std::pair<std::string, std::uint64_t>> active(candidates.begin(), candidates.end());
  take_top(active, std::max<std::size_t>(piece_budget * 8, 20'000));

  // Score-and-prune iterations: segment the lexicon under current scores,
  // re-score by usage, shrink the active set toward the budget.
  std::unordered_map<std::string, double> scores;
  auto rescore_from_counts = [&](const std::unordered_map<std::string, std::uint64_t>& used,
                                 const std::set<std::string>& alpha) {
    long double total = 0;
    for (const auto& [s, c] : used) total += c;
    for (const auto& a : alpha) if (!used.count(a)) total += 1;  // floor mass for idle chars
    scores.clear();
    for (const auto& [s, c] : used)
      scores[s] = std::log(static_cast<double>(c) / static_cast<double>(total));
    double floor_score = std::log(0.5 / static_cast<double>(total));
    for (const auto& a : alpha)
      if (!scores.count(a)) scores[a] = floor_score;
    return floor_score;
  };

  {
    std::unordered_map<std::string, std::uint64_t> init;
    for (const auto& [s, c] : active) init[s] = c;
    for (const auto& [ch, c] : char_counts)
      if (alphabet.count(ch)) init[ch] += c;
    rescore_from_counts(init, alphabet);
  }

  auto segment_word = [&](const std::string& word, int max_piece,
                          std::vector<std::string>& out_pieces) {
    auto chars = utf8_chars(word);
    const std::size_t n = chars.size();
    std::vector<std::size_t> off(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) off[i + 1] = off[i] + chars[i].size();
    struct Cell { double score; int take; };
    std::vector<Cell> best(n + 1, {-std::numeric_limits<double>::infinity(), 0});
    best[n] = {0.0, 0};
    for (std::size_t i = n; i-- > 0;) {
      std::size_t max_len = std::min<std::size_t>(static_cast<std::size_t>(max_piece), n - i);
      for (std::size_t len = 1; len <= max_len; ++len) {
        if (best[i + len].take == 0 && i + len != n) continue;
        auto it = scores.find(word.substr(off[i], off[i + len] - off[i]));
        if (it == scores.end()) continue;
        double s = it->second + best[i + len].score;
        if (s > best[i].score) best[i] = {s, static_cast<int>(len)};
      }
      if (best[i].take == 0) best[i] = {-1e4 + best[i + 1].score, 1};  // uncovered char
    }
    out_pieces.clear();
    for (std::size_t i = 0; i < n;) {
      std::size_t len = static_cast<std::size_t>(best[i].take);
      out_pieces.push_back(word.substr(off[i], off[i + len] - off[i]));
      i += len;
    }
  };

  std::vector<std::pair<std::string, std::uint64_t>> lexicon(word_counts.begin(),
                                                             word_counts.end());
  std::sort(lexicon.begin(), lexicon.end());

  std::unordered_map<std::string, std::uint64_t> used;
  for (int iter = 0; iter < std::max(1, policy.em_iterations); ++iter) {
    used.clear();
    std::vector<std::string> pieces;
    for (const auto& [word, freq] : lexicon) {
      segment_word(word, policy.max_piece_len, pieces);
      for (const auto& p : pieces) used[p] += freq;
    }
    // keep only used multi-char pieces; shrink toward the budget
    std::vector<std::pair<std::string, std::uint64_t>> survivors;
    for (const auto& [s, c] : active) {
      auto it = used.find(s);
      if (it != used.end() && it->second > 0) survivors.push_back({s, it->second});
    }
    bool last = iter + 1 == std::max(1, policy.em_iterations);
    std::size_t keep = last ? piece_budget
                            : std::max(piece_budget, survivors.size() * 3 / 4);
    take_top(survivors, keep);
    active = std::move(survivors);

    std::unordered_map<std::string, std::uint64_t> next_counts;
    for (const auto& [s, c] : active) next_counts[s] = c;
    for (const auto& a : alphabet) {
      auto it = used.find(a);
      next_counts[a] = it == used.end() ? 0 : it->second;
    }
    rescore_from_counts(next_counts, alphabet);
  }

  if (active.size() < piece_budget)
    throw std::runtime_error("corpus too small for vocab_size " +
                             std::to_string(policy.vocab_size) + "; at most " +
                             std::to_string(min_size + active.size()) + " tokens are learnable");

  // Assemble: reserved, then alphabet and pieces by descending score.
  std::vector<VocabToken> tokens = reserved;
  std::vector<VocabToken> learned;
  for (const auto& a : alphabet) learned.push_back({a, scores.at(a)});
  for (const auto& [s, c] : active) learned.push_back({s, scores.at(s)});
  std::sort(learned.begin(), learned.end(), [](const VocabToken& a, const VocabToken& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.surface < b.surface;
  });
  tokens.insert(tokens.end(), learned.begin(), learned.end());
  return Vocabulary::from_tokens(std::move(tokens));
}

// Canonical segmentation of a tagged example for training and decoding:
// source = [target tag] + body pieces + eos, target = pieces + eos. The tag
// comes from the pair so a malformed source prefix is rejected.
inline SegmentedExample segment_example(const Vocabulary& vocab, const TaggedExample& ex) {
  const std::string expected = language_tag(ex.pair.target) + " ";
  if (ex.source_text.rfind(expected, 0) != 0)
    throw std::invalid_argument("source is not tagged for " + ex.pair.target + ": " +
                                ex.source_text);
  SegmentedExample out;
  out.pair = ex.pair;
  out.source_ids.push_back(vocab.tag_id(ex.pair.target));
  for (int id : vocab.segment(ex.source_text.substr(expected.size())))
    out.source_ids.push_back(id);
  out.source_ids.push_back(Vocabulary::kEosId);
  out.target_ids = vocab.segment(ex.target_text);
  out.target_ids.push_back(Vocabulary::kEosId);
  return out;
}

// ---------------------------------------------------------------------------
// Sequence-length analytics
// ---------------------------------------------------------------------------

struct LengthReport {
  std::map<std::string, double> mean_tokens;       // language -> mean tokens/sentence
  std::map<std::string, std::size_t> sample_size;  // language -> sentences measured
  std::size_t vocab_size = 0;
};

inline LengthReport length_stats(const Vocabulary& vocab,
                                 const std::vector<const PairCorpus*>& corpora,
                                 std::size_t sample_size, std::uint64_t seed = 1) {
  if (sample_size == 0) throw std::invalid_argument("length_stats: sample_size must be positive");
  LengthReport report;
  report.vocab_size = vocab.size();
  for (const auto& [code, lines] : detail::monolingual_sides(corpora)) {
    if (lines.empty()) continue;
    std::vector<std::size_t> order(lines.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "length-sample", fnv1a64(code)));
    rng.shuffle(order);
    std::size_t n = std::min(sample_size, order.size());
    std::uint64_t tokens = 0;
    for (std::size_t i = 0; i < n; ++i)
      tokens += vocab.segment(*lines[order[i]]).size();
    report.mean_tokens[code] = static_cast<double>(tokens) / static_cast<double>(n);
    report.sample_size[code] = n;
  }
  return report;
}

}  // namespace mmt
