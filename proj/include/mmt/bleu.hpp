#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmt/common.hpp"

namespace mmt {

// ---------------------------------------------------------------------------
// mteval-v13a tokenization
// ---------------------------------------------------------------------------

// The language-independent tokenization of mteval-v13a, applied to true-cased
// text (no lowercasing). Rules, in order:
//   1. unescape &quot; &amp; &lt; &gt;, drop <skipped> markers
//   2. pad ASCII punctuation except . , - ' with spaces
//   3. split . and , unless surrounded by digits on the relevant side
//   4. split - when preceded by a digit
//   5. collapse whitespace
// Non-ASCII bytes pass through untouched.
inline std::vector<std::string> tokenize_v13a(const std::string& line) {
  std::string s;
  s.reserve(line.size());
  for (std::size_t i = 0; i < line.size();) {
    if (line.compare(i, 9, "<skipped>") == 0) { i += 9; continue; }
    if (line.compare(i, 6, "&quot;") == 0) { s += '"'; i += 6; continue; }
    if (line.compare(i, 5, "&amp;") == 0) { s += '&'; i += 5; continue; }
    if (line.compare(i, 4, "&lt;") == 0) { s += '<'; i += 4; continue; }
    if (line.compare(i, 4, "&gt;") == 0) { s += '>'; i += 4; continue; }
    char c = line[i];
    s += (c == '\n' || c == '\t') ? ' ' : c;
    ++i;
  }

  auto is_digit = [](char c) { return c >= '0' && c <= '9'; };
  // Punctuation split unconditionally: all ASCII punct except . , - '
  auto is_general_punct = [](char c) {
    return (c >= '{' && c <= '~') || (c >= '[' && c <= '`') || (c >= ' ' && c <= '&') ||
           (c >= '(' && c <= '+') || (c >= ':' && c <= '@') || c == '/';
  };

  std::string padded = " " + s + " ";
  std::string t1;
  t1.reserve(padded.size() * 2);
  for (char c : padded) {
    if (c != ' ' && is_general_punct(c)) {
      t1 += ' ';
      t1 += c;
      t1 += ' ';
    } else {
      t1 += c;
    }
  }

  // ([^0-9])([.,]) -> "$1 $2 "  then  ([.,])([^0-9]) -> " $1 $2"
  std::string t2;
  t2.reserve(t1.size() * 2);
  for (std::size_t i = 0; i < t1.size(); ++i) {
    char c = t1[i];
    if ((c == '.' || c == ',') && i > 0 && !is_digit(t1[i - 1])) {
      t2 += ' ';
      t2 += c;
      t2 += ' ';
    } else {
      t2 += c;
    }
  }
  std::string t3;
  t3.reserve(t2.size() * 2);
  for (std::size_t i = 0; i < t2.size(); ++i) {
    char c = t2[i];
    if ((c == '.' || c == ',') && i + 1 < t2.size() && !is_digit(t2[i + 1])) {
      t3 += ' ';
      t3 += c;
      t3 += ' ';
    } else {
      t3 += c;
    }
  }

  // ([0-9])(-) -> "$1 - "
  std::string t4;
  t4.reserve(t3.size() * 2);
  for (std::size_t i = 0; i < t3.size(); ++i) {
    char c = t3[i];
    if (c == '-' && i > 0 && is_digit(t3[i - 1])) {
      t4 += " - ";
    } else {
      t4 += c;
    }
  }

  return split_words(t4);
}

// ---------------------------------------------------------------------------
// Corpus BLEU
// ---------------------------------------------------------------------------

struct BleuScore {
  double value = 0.0;                       // 0..100
  std::array<double, 4> precisions{};      // p1..p4
  double brevity_penalty = 1.0;
  std::uint64_t hyp_length = 0;
  std::uint64_t ref_length = 0;
};

// Unsmoothed corpus-level BLEU-4: clipped n-gram precision over the whole
// corpus, BP = min(1, exp(1 - ref_len/hyp_len)). Any zero precision yields a
// zero score, matching mteval behaviour. Single reference per hypothesis.
inline BleuScore corpus_bleu(const std::vector<std::string>& hypotheses,
                             const std::vector<std::string>& references) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) +
                                " hypotheses vs " + std::to_string(references.size()) +
                                " references");
  if (hypotheses.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");

  constexpr int kMaxOrder = 4;
  std::array<std::uint64_t, 4> matched{}, total{};
  BleuScore score;

  std::unordered_map<std::string, std::uint64_t> ref_counts;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    auto hyp = tokenize_v13a(hypotheses[i]);
    auto ref = tokenize_v13a(references[i]);
    score.hyp_length += hyp.size();
    score.ref_length += ref.size();

    for (int n = 1; n <= kMaxOrder; ++n) {
      if (ref.size() + 1 > static_cast<std::size_t>(n)) {
        ref_counts.clear();
        for (std::size_t j = 0; j + n <= ref.size(); ++j) {
          std::string key;
          for (int k = 0; k < n; ++k) {
            if (k) key += '\x1f';
            key += ref[j + k];
          }
          ++ref_counts[key];
        }
        for (std::size_t j = 0; j + n <= hyp.size(); ++j) {
          std::string key;
          for (int k = 0; k < n; ++k) {
            if (k) key += '\x1f';
            key += hyp[j + k];
          }
          auto it = ref_counts.find(key);
          if (it != ref_counts.end() && it->second > 0) {
            --it->second;
            ++matched[n - 1];
          }
        }
      }
      if (hyp.size() + 1 > static_cast<std::size_t>(n))
        total[n - 1] += hyp.size() - n + 1;
    }
  }

  if (score.hyp_length == 0) {
    score.value = 0.0;
    score.brevity_penalty = 0.0;
    return score;
  }

  double log_precision_sum = 0.0;
  bool any_zero = false;
  for (int n = 0; n < kMaxOrder; ++n) {
    double p = total[n] > 0 ? static_cast<double>(matched[n]) / static_cast<double>(total[n]) : 0.0;
    score.precisions[n] = p;
    if (p <= 0.0) any_zero = true;
    else log_precision_sum += std::log(p);
  }

  double ratio = static_cast<double>(score.ref_length) / static_cast<double>(score.hyp_length);
  score.brevity_penalty = std::min(1.0, std::exp(1.0 - ratio));

  score.value = any_zero ? 0.0
                         : score.brevity_penalty * std::exp(log_precision_sum / kMaxOrder) * 100.0;
  return score;
}

}  // namespace mmt
