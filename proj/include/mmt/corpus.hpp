#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mmt/common.hpp"

namespace mmt {

// ---------------------------------------------------------------------------
// Language registry
// ---------------------------------------------------------------------------

// BCP-47 codes of the built-in language inventory, plus English. Synthetic
// cipher languages are registered on top of these at runtime.
inline const std::vector<std::string>& builtin_language_codes() {
  static const std::vector<std::string> codes = {
      "en",
      // column 1
      "af", "sq", "am", "ar", "hy", "az", "eu", "be", "bn", "bs", "bg", "my",
      "ca", "ceb", "zh", "co", "hr", "cs", "da", "nl", "eo", "et", "tl", "fi",
      "fr", "fy", "gl", "ka", "de", "el", "gu", "ht", "ha", "haw",
      // column 2
      "iw", "hi", "hmn", "hu", "is", "ig", "id", "ga", "it", "ja", "jw", "kn",
      "kk", "km", "ko", "ku", "ky", "lo", "lv", "lt", "lb", "mk", "mg", "ms",
      "ml", "mt", "mi", "mr", "mn", "ne", "no", "ny", "ps", "fa",
      // column 3
      "pl", "pt", "pa", "ro", "ru", "sm", "gd", "sr", "st", "sn", "sd", "si",
      "sk", "sl", "so", "es", "su", "sw", "sv", "tg", "ta", "te", "th", "tr",
      "uk", "ur", "uz", "vi", "cy", "xh", "yi", "yo", "zu",
  };
  return codes;
}

class LanguageRegistry {
 public:
  LanguageRegistry() {
    for (const auto& c : builtin_language_codes()) {
      index_.insert(c);
      codes_.push_back(c);
    }
  }

  bool contains(const std::string& code) const { return index_.count(code) > 0; }

  void register_synthetic(const std::string& code) {
    if (code.empty()) throw std::invalid_argument("language code must be non-empty");
    for (char c : code) {
      if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')))
        throw std::invalid_argument("synthetic language code must be lowercase alphanumeric: " + code);
    }
    if (contains(code)) return;  // idempotent
    index_.insert(code);
    codes_.push_back(code);
  }

  const std::vector<std::string>& codes() const { return codes_; }

 private:
  std::vector<std::string> codes_;
  std::unordered_set<std::string> index_;
};

// ---------------------------------------------------------------------------
// Pair corpora
// ---------------------------------------------------------------------------

struct LanguagePair {
  std::string source;
  std::string target;

  std::string id() const { return source + "-" + target; }

  static LanguagePair parse(const std::string& id) {
    auto dash = id.find('-');
    if (dash == std::string::npos || dash == 0 || dash + 1 >= id.size())
      throw std::invalid_argument("bad language pair id: " + id);
    return LanguagePair{id.substr(0, dash), id.substr(dash + 1)};
  }

  bool operator==(const LanguagePair& o) const { return source == o.source && target == o.target; }
};

inline void validate_pair(const LanguagePair& pair, const LanguageRegistry& registry) {
  if (pair.source == pair.target)
    throw std::invalid_argument("language pair source equals target: " + pair.id());
  if (!registry.contains(pair.source))
    throw std::invalid_argument("unknown source language: " + pair.source);
  if (!registry.contains(pair.target))
    throw std::invalid_argument("unknown target language: " + pair.target);
}

// A parallel corpus for one directed language pair. `size()` is the D_l used
// by sampling and grouping. Immutable once built.
struct PairCorpus {
  LanguagePair pair;
  std::vector<std::pair<std::string, std::string>> examples;
  std::size_t dropped = 0;  // empty-side pairs removed at ingestion

  std::size_t size() const { return examples.size(); }
};

inline PairCorpus register_corpus(const LanguagePair& pair,
                                  const std::vector<std::string>& source_lines,
                                  const std::vector<std::string>& target_lines,
                                  const LanguageRegistry& registry) {
  validate_pair(pair, registry);
  if (source_lines.size() != target_lines.size()) {
    throw std::invalid_argument("line-count mismatch for " + pair.id() + ": source has " +
                                std::to_string(source_lines.size()) + " lines, target has " +
                                std::to_string(target_lines.size()));
  }
  PairCorpus corpus;
  corpus.pair = pair;
  corpus.examples.reserve(source_lines.size());
  for (std::size_t i = 0; i < source_lines.size(); ++i) {
    std::string s = trim(source_lines[i]);
    std::string t = trim(target_lines[i]);
    if (s.empty() || t.empty()) {
      ++corpus.dropped;
      continue;
    }
    corpus.examples.emplace_back(std::move(s), std::move(t));
  }
  if (corpus.examples.empty())
    throw std::runtime_error("empty corpus after filtering: " + pair.id());
  return corpus;
}

inline std::vector<std::string> read_lines(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  return read_lines(in);
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  for (const auto& l : lines) out << l << '\n';
}

inline PairCorpus register_corpus(const LanguagePair& pair, std::istream& source,
                                  std::istream& target, const LanguageRegistry& registry) {
  return register_corpus(pair, read_lines(source), read_lines(target), registry);
}

// Single-file variant: TSV with columns (source, target).
inline PairCorpus register_corpus_tsv(const LanguagePair& pair,
                                      const std::vector<std::string>& tsv_lines,
                                      const LanguageRegistry& registry) {
  std::vector<std::string> src, tgt;
  src.reserve(tsv_lines.size());
  tgt.reserve(tsv_lines.size());
  for (const auto& line : tsv_lines) {
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::invalid_argument("TSV line without tab in corpus " + pair.id());
    src.push_back(line.substr(0, tab));
    tgt.push_back(line.substr(tab + 1));
  }
  return register_corpus(pair, src, tgt, registry);
}

// ---------------------------------------------------------------------------
// Dataset statistics and resource groups
// ---------------------------------------------------------------------------

struct DatasetStats {
  std::size_t num_pairs = 0;
  std::map<std::string, std::uint64_t> sizes;  // pair id -> D_l
  std::vector<std::string> high, med, low;     // descending D_l within each group

  enum class Group { high, med, low };

  Group group_of(const std::string& pair_id) const {
    for (const auto& p : high)
      if (p == pair_id) return Group::high;
    for (const auto& p : med)
      if (p == pair_id) return Group::med;
    for (const auto& p : low)
      if (p == pair_id) return Group::low;
    throw std::invalid_argument("pair not in stats: " + pair_id);
  }

  // Pair ids sorted by descending D_l, ties by id.
  std::vector<std::string> by_descending_size() const {
    std::vector<std::string> out;
    out.insert(out.end(), high.begin(), high.end());
    out.insert(out.end(), med.begin(), med.end());
    out.insert(out.end(), low.begin(), low.end());
    return out;
  }
};

// Default cut fractions follow the 25/52/25 grouping of a 102-language set,
// scaled to N.
inline constexpr std::array<double, 3> kDefaultGroupFractions = {25.0 / 102.0, 52.0 / 102.0,
                                                                 25.0 / 102.0};

inline DatasetStats compute_stats(const std::map<std::string, std::uint64_t>& sizes,
                                  std::array<double, 3> fractions = kDefaultGroupFractions) {
  if (sizes.empty()) throw std::invalid_argument("compute_stats: no corpora given");
  double fsum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(fsum - 1.0) > 1e-9)
    throw std::invalid_argument("group fractions must sum to 1");

  DatasetStats stats;
  stats.sizes = sizes;
  stats.num_pairs = sizes.size();

  std::vector<std::pair<std::string, std::uint64_t>> order(sizes.begin(), sizes.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;  // ties by pair id
  });

  const std::size_t n = order.size();
  std::size_t n_high = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  std::size_t n_low = static_cast<std::size_t>(std::llround(fractions[2] * static_cast<double>(n)));
  if (n_high + n_low > n) n_low = n - n_high;
  const std::size_t n_med = n - n_high - n_low;

  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_high) stats.high.push_back(order[i].first);
    else if (i < n_high + n_med) stats.med.push_back(order[i].first);
    else stats.low.push_back(order[i].first);
  }
  return stats;
}

inline DatasetStats compute_stats(const std::vector<const PairCorpus*>& corpora,
                                  std::array<double, 3> fractions = kDefaultGroupFractions) {
  if (corpora.empty()) throw std::invalid_argument("compute_stats: no corpora given");
  std::map<std::string, std::uint64_t> sizes;
  for (const auto* c : corpora) sizes[c->pair.id()] = c->size();
  return compute_stats(sizes, fractions);
}

// ---------------------------------------------------------------------------
// Synthetic cipher languages
// ---------------------------------------------------------------------------

// A cipher language is a deterministic, invertible transformation of a base
// corpus. Because the mapping is exact, an oracle translation exists for
// every sentence and BLEU 100 is achievable, which makes desk-scale
// experiments measurable.
struct CipherSpec {
  enum class Kind { identity, substitution, word_shuffle, affine };

  Kind kind = Kind::substitution;
  std::string code;                    // synthetic language code, e.g. "c1"
  std::uint64_t seed = 0;
  std::optional<std::string> parent;   // derive key by perturbing parent's key
  int perturb = 0;                     // number of perturbed key positions

  static Kind parse_kind(const std::string& s) {
    if (s == "identity") return Kind::identity;
    if (s == "substitution") return Kind::substitution;
    if (s == "word-shuffle-with-key" || s == "word_shuffle" || s == "word-shuffle")
      return Kind::word_shuffle;
    if (s == "affine-substitution" || s == "affine") return Kind::affine;
    throw std::invalid_argument("unknown cipher kind: " + s);
  }
};

class Cipher {
 public:
  static Cipher make(const CipherSpec& spec) {
    Cipher c;
    c.spec_ = spec;
    switch (spec.kind) {
      case CipherSpec::Kind::identity:
        for (int i = 0; i < 26; ++i) c.key_[i] = i;
        break;
      case CipherSpec::Kind::substitution: {
        std::vector<int> perm(26);
        for (int i = 0; i < 26; ++i) perm[i] = i;
        Rng rng(derive_seed(spec.seed, "cipher-key"));
        rng.shuffle(perm);
        for (int i = 0; i < 26; ++i) c.key_[i] = perm[i];
        break;
      }
      case CipherSpec::Kind::affine: {
        static const std::array<int, 12> units = {1, 3, 5, 7, 9, 11, 15, 17, 19, 21, 23, 25};
        Rng rng(derive_seed(spec.seed, "cipher-key"));
        int a = units[rng.next_below(units.size())];
        int b = static_cast<int>(rng.next_below(26));
        for (int i = 0; i < 26; ++i) c.key_[i] = (a * i + b) % 26;
        break;
      }
      case CipherSpec::Kind::word_shuffle:
        for (int i = 0; i < 26; ++i) c.key_[i] = i;
        break;
    }
    return c;
  }

  // Derive a related cipher: the parent's key with `spec.perturb` random
  // transpositions applied. Small perturbation counts give languages whose
  // surface forms mostly coincide.
  static Cipher make_child(const CipherSpec& spec, const Cipher& parent) {
    Cipher c = parent;
    c.spec_ = spec;
    Rng rng(derive_seed(spec.seed, "cipher-perturb"));
    for (int k = 0; k < spec.perturb; ++k) {
      int i = static_cast<int>(rng.next_below(26));
      int j = static_cast<int>(rng.next_below(26));
      std::swap(c.key_[i], c.key_[j]);
    }
    return c;
  }

  const CipherSpec& spec() const { return spec_; }

  std::string apply(const std::string& sentence) const {
    if (spec_.kind == CipherSpec::Kind::word_shuffle) return shuffle_words(sentence, false);
    return map_letters(sentence, key_);
  }

  std::string invert(const std::string& sentence) const {
    if (spec_.kind == CipherSpec::Kind::word_shuffle) return shuffle_words(sentence, true);
    std::array<int, 26> inv{};
    for (int i = 0; i < 26; ++i) inv[key_[i]] = i;
    return map_letters(sentence, inv);
  }

 private:
  static std::string map_letters(const std::string& s, const std::array<int, 26>& key) {
    std::string out = s;
    for (char& ch : out) {
      if (ch >= 'a' && ch <= 'z') ch = static_cast<char>('a' + key[ch - 'a']);
      else if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>('A' + key[ch - 'A']);
    }
    return out;
  }

  std::string shuffle_words(const std::string& sentence, bool inverse) const {
    auto words = split_words(sentence);
    const std::size_t n = words.size();
    if (n <= 1) return sentence;
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    // Keyed by sentence length so the permutation is self-contained and
    // invertible without the original text.
    Rng rng(derive_seed(spec_.seed, "word-shuffle", n));
    rng.shuffle(perm);
    std::vector<std::string> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (inverse) out[perm[i]] = words[i];
      else out[i] = words[perm[i]];
    }
    std::string joined;
    for (std::size_t i = 0; i < n; ++i) {
      if (i) joined += ' ';
      joined += out[i];
    }
    return joined;
  }

  CipherSpec spec_;
  std::array<int, 26> key_{};
};

// Resolve a cipher list with parent references into concrete ciphers, in
// input order. Parents must appear before children.
inline std::vector<Cipher> resolve_ciphers(const std::vector<CipherSpec>& specs) {
  std::vector<Cipher> out;
  std::map<std::string, std::size_t> by_code;
  for (const auto& spec : specs) {
    if (spec.code.empty()) throw std::invalid_argument("cipher spec without language code");
    if (by_code.count(spec.code)) throw std::invalid_argument("duplicate cipher id: " + spec.code);
    if (spec.parent) {
      auto it = by_code.find(*spec.parent);
      if (it == by_code.end())
        throw std::invalid_argument("cipher parent not defined before child: " + *spec.parent);
      out.push_back(Cipher::make_child(spec, out[it->second]));
    } else {
      out.push_back(Cipher::make(spec));
    }
    by_code[spec.code] = out.size() - 1;
  }
  return out;
}

// For each cipher c, emits the pair corpora (en -> c) and (c -> en) over a
// deterministic per-cipher subset of the base corpus. `sizes[i]` is the
// sentence count for ciphers[i]; only base indices < train_limit are used so
// dev/test tails can be held out.
inline std::vector<PairCorpus> generate_synthetic(const std::vector<std::string>& base_lines,
                                                  const std::vector<Cipher>& ciphers,
                                                  const std::vector<std::size_t>& sizes,
                                                  LanguageRegistry& registry,
                                                  const std::string& base_code = "en",
                                                  std::size_t train_limit = SIZE_MAX) {
  if (ciphers.size() != sizes.size())
    throw std::invalid_argument("generate_synthetic: one size per cipher required");
  const std::size_t limit = std::min(train_limit, base_lines.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] > limit) {
      throw std::invalid_argument("requested size " + std::to_string(sizes[i]) + " for cipher " +
                                  ciphers[i].spec().code + " exceeds available base corpus (" +
                                  std::to_string(limit) + ")");
    }
  }

  std::vector<PairCorpus> out;
  for (std::size_t ci = 0; ci < ciphers.size(); ++ci) {
    const Cipher& cipher = ciphers[ci];
    const std::string& code = cipher.spec().code;
    registry.register_synthetic(code);

    std::vector<std::size_t> idx(limit);
    for (std::size_t i = 0; i < limit; ++i) idx[i] = i;
    Rng rng(derive_seed(cipher.spec().seed, "corpus-subset"));
    rng.shuffle(idx);
    idx.resize(sizes[ci]);
    std::sort(idx.begin(), idx.end());

    PairCorpus to_c, from_c;
    to_c.pair = LanguagePair{base_code, code};
    from_c.pair = LanguagePair{code, base_code};
    to_c.examples.reserve(sizes[ci]);
    from_c.examples.reserve(sizes[ci]);
    for (std::size_t i : idx) {
      const std::string& base = base_lines[i];
      std::string ciphered = cipher.apply(base);
      to_c.examples.emplace_back(base, ciphered);
      from_c.examples.emplace_back(std::move(ciphered), base);
    }
    out.push_back(std::move(to_c));
    out.push_back(std::move(from_c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-way aligned dev/test sets
// ---------------------------------------------------------------------------

struct MultiwaySet {
  enum class Role { dev, test };

  Role role = Role::dev;
  std::vector<std::string> languages;           // codes, first is the base language
  std::vector<std::vector<std::string>> rows;   // rows[i][j] = sentence i in languages[j]

  std::size_t size() const { return rows.size(); }

  std::size_t language_index(const std::string& code) const {
    for (std::size_t j = 0; j < languages.size(); ++j)
      if (languages[j] == code) return j;
    throw std::invalid_argument("language not in multiway set: " + code);
  }

  const std::string& at(std::size_t i, const std::string& code) const {
    return rows.at(i)[language_index(code)];
  }

  std::vector<std::string> column(const std::string& code) const {
    std::size_t j = language_index(code);
    std::vector<std::string> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r[j]);
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write multiway set: " + path);
    out << "# role: " << (role == Role::dev ? "dev" : "test") << '\n';
    for (std::size_t j = 0; j < languages.size(); ++j)
      out << (j ? "\t" : "") << languages[j];
    out << '\n';
    for (const auto& r : rows) {
      for (std::size_t j = 0; j < r.size(); ++j) out << (j ? "\t" : "") << r[j];
      out << '\n';
    }
  }

  static MultiwaySet load(const std::string& path) {
    auto lines = read_lines(path);
    if (lines.size() < 2) throw std::runtime_error("truncated multiway set: " + path);
    MultiwaySet set;
    std::size_t first = 0;
    if (!lines.empty() && lines[0].rfind("# role:", 0) == 0) {
      set.role = lines[0].find("test") != std::string::npos ? Role::test : Role::dev;
      first = 1;
    }
    set.languages = split(lines[first], '\t');
    for (std::size_t i = first + 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      auto row = split(lines[i], '\t');
      if (row.size() != set.languages.size())
        throw std::runtime_error("ragged multiway row in " + path);
      set.rows.push_back(std::move(row));
    }
    return set;
  }
};

// Carves the dev/test tails off the base corpus and expands them into
// multi-way aligned sets over the base language plus all cipher languages.
// Training corpora must be generated with train_limit = base size - dev - test
// so the splits stay disjoint on base-sentence identity.
inline std::pair<MultiwaySet, MultiwaySet> split_multiway(const std::vector<std::string>& base_lines,
                                                          const std::vector<Cipher>& ciphers,
                                                          std::size_t dev_size, std::size_t test_size,
                                                          const std::string& base_code = "en") {
  if (base_lines.size() < dev_size + test_size)
    throw std::invalid_argument("insufficient held-out data: base has " +
                                std::to_string(base_lines.size()) + " lines, need " +
                                std::to_string(dev_size + test_size));
  MultiwaySet dev, test;
  dev.role = MultiwaySet::Role::dev;
  test.role = MultiwaySet::Role::test;
  dev.languages.push_back(base_code);
  test.languages.push_back(base_code);
  for (const auto& c : ciphers) {
    dev.languages.push_back(c.spec().code);
    test.languages.push_back(c.spec().code);
  }

  auto expand = [&](std::size_t begin, std::size_t end, MultiwaySet& set) {
    for (std::size_t i = begin; i < end; ++i) {
      std::vector<std::string> row;
      row.reserve(ciphers.size() + 1);
      row.push_back(base_lines[i]);
      for (const auto& c : ciphers) row.push_back(c.apply(base_lines[i]));
      set.rows.push_back(std::move(row));
    }
  };
  const std::size_t n = base_lines.size();
  expand(n - dev_size - test_size, n - test_size, dev);
  expand(n - test_size, n, test);
  return {std::move(dev), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic base corpus generator
// ---------------------------------------------------------------------------

// Deterministic English-like text: a seeded lexicon of syllabic words drawn
// with a Zipf-ish rank distribution. Lowercase ASCII only, which keeps the
// letter ciphers total on the corpus alphabet.
struct TextGenSpec {
  int lexicon_words = 4000;
  int sentences = 50000;
  int min_words = 3;
  int max_words = 8;
  double zipf_exponent = 1.05;
  std::uint64_t seed = 1;
};

inline std::vector<std::string> generate_base_corpus(const TextGenSpec& spec) {
  if (spec.lexicon_words < 1 || spec.sentences < 1 || spec.min_words < 1 ||
      spec.max_words < spec.min_words)
    throw std::invalid_argument("bad text generator spec");

  static const std::vector<std::string> onsets = {
      "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t",
      "v", "w", "z", "bl", "br", "ch", "cl", "cr", "dr", "fl", "fr", "gl", "gr",
      "pl", "pr", "sh", "sk", "sl", "sm", "sn", "sp", "st", "str", "sw", "th", "tr"};
  static const std::vector<std::string> vowels = {"a", "e", "i", "o", "u", "ai",
                                                  "ea", "ee", "oa", "oo", "ou"};
  static const std::vector<std::string> codas = {"",  "b", "d",  "g",  "k",  "l",  "m", "n",
                                                 "p", "r", "s",  "t",  "nd", "nt", "rk", "rm",
                                                 "rn", "rt", "sh", "st", "ck", "ng"};

  Rng lex_rng(derive_seed(spec.seed, "lexicon"));
  std::vector<std::string> lexicon;
  std::unordered_set<std::string> seen;
  while (static_cast<int>(lexicon.size()) < spec.lexicon_words) {
    int syllables = 1 + static_cast<int>(lex_rng.next_below(3));
    std::string word;
    for (int s = 0; s < syllables; ++s) {
      word += onsets[lex_rng.next_below(onsets.size())];
      word += vowels[lex_rng.next_below(vowels.size())];
      if (s + 1 == syllables || lex_rng.next_double() < 0.4)
        word += codas[lex_rng.next_below(codas.size())];
    }
    if (seen.insert(word).second) lexicon.push_back(std::move(word));
  }

  // Zipf weights over lexicon ranks; cumulative table for inverse sampling.
  std::vector<double> cum(lexicon.size());
  double total = 0.0;
  for (std::size_t r = 0; r < lexicon.size(); ++r) {
    total += 1.0 / std::pow(static_cast<double>(r) + 2.7, spec.zipf_exponent);
    cum[r] = total;
  }

  Rng rng(derive_seed(spec.seed, "sentences"));
  auto draw_word = [&]() -> const std::string& {
    double u = rng.next_double() * total;
    auto it = std::lower_bound(cum.begin(), cum.end(), u);
    std::size_t r = static_cast<std::size_t>(it - cum.begin());
    if (r >= lexicon.size()) r = lexicon.size() - 1;
    return lexicon[r];
  };

  std::vector<std::string> out;
  out.reserve(spec.sentences);
  for (int i = 0; i < spec.sentences; ++i) {
    int n = rng.next_int(spec.min_words, spec.max_words);
    std::string sentence;
    for (int w = 0; w < n; ++w) {
      if (w) sentence += ' ';
      sentence += draw_word();
    }
    out.push_back(std::move(sentence));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Registry manifest
// ---------------------------------------------------------------------------

// Plain-text listing of the training corpora: one line per pair with the pair
// id, file paths and optional declared size. A target path of "-" means the
// source path is a two-column TSV.
struct ManifestEntry {
  std::string pair_id;
  std::string source_path;
  std::string target_path;  // "-" for TSV mode
  std::optional<std::uint64_t> declared_size;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << "# pair\tsource\ttarget\tsize\n";
  for (const auto& e : entries) {
    out << e.pair_id << '\t' << e.source_path << '\t' << e.target_path;
    if (e.declared_size) out << '\t' << *e.declared_size;
    out << '\n';
  }
}

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::vector<ManifestEntry> entries;
  for (const auto& raw : read_lines(path)) {
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    auto fields = split(line, '\t');
    if (fields.size() < 3)
      throw std::runtime_error("manifest line needs pair, source and target: " + line);
    ManifestEntry e;
    e.pair_id = fields[0];
    e.source_path = fields[1];
    e.target_path = fields[2];
    if (fields.size() > 3 && !fields[3].empty())
      e.declared_size = std::stoull(fields[3]);
    entries.push_back(std::move(e));
  }
  return entries;
}

// Loads every corpus listed in a manifest. Relative paths resolve against
// the manifest's directory.
inline std::vector<PairCorpus> load_corpora(const std::string& manifest_path,
                                            LanguageRegistry& registry) {
  auto dir_of = [](const std::string& p) {
    auto slash = p.find_last_of('/');
    return slash == std::string::npos ? std::string() : p.substr(0, slash + 1);
  };
  const std::string base_dir = dir_of(manifest_path);
  auto resolve = [&](const std::string& p) {
    return (p.empty() || p[0] == '/') ? p : base_dir + p;
  };

  std::vector<PairCorpus> corpora;
  for (const auto& e : load_manifest(manifest_path)) {
    LanguagePair pair = LanguagePair::parse(e.pair_id);
    if (!registry.contains(pair.source)) registry.register_synthetic(pair.source);
    if (!registry.contains(pair.target)) registry.register_synthetic(pair.target);
    PairCorpus corpus;
    if (e.target_path == "-") {
      corpus = register_corpus_tsv(pair, read_lines(resolve(e.source_path)), registry);
    } else {
      corpus = register_corpus(pair, read_lines(resolve(e.source_path)),
                               read_lines(resolve(e.target_path)), registry);
    }
    if (e.declared_size && *e.declared_size != corpus.size())
      throw std::runtime_error("manifest size mismatch for " + e.pair_id + ": declared " +
                               std::to_string(*e.declared_size) + ", loaded " +
                               std::to_string(corpus.size()));
    corpora.push_back(std::move(corpus));
  }
  return corpora;
}

}  // namespace mmt
