#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mmt {

// Deterministic RNG used throughout the toolkit. All randomness is derived
// from explicit seeds so that corpora, vocabularies, training runs and
// reports are byte-reproducible on a given machine.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::next_below: n must be > 0");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int next_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::uint64_t value, std::uint64_t h) {
  for (int i = 0; i < 8; ++i) {
    h ^= (value >> (8 * i)) & 0xff;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stable sub-stream derivation: same (seed, label) always yields the same
// child seed, independent of call order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return fnv1a64(label, fnv1a64(seed, 0xcbf29ce484222325ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t index) {
  return fnv1a64(index, derive_seed(seed, label));
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    std::size_t b = i;
    while (i < s.size() && s[i] != ' ') ++i;
    if (i > b) out.emplace_back(s.substr(b, i - b));
  }
  return out;
}

// Number of bytes in the UTF-8 character starting at s[i].
inline std::size_t utf8_char_len(std::string_view s, std::size_t i) {
  unsigned char c = static_cast<unsigned char>(s[i]);
  std::size_t n = 1;
  if ((c & 0x80) == 0x00) n = 1;
  else if ((c & 0xe0) == 0xc0) n = 2;
  else if ((c & 0xf0) == 0xe0) n = 3;
  else if ((c & 0xf8) == 0xf0) n = 4;
  if (i + n > s.size()) n = 1;  // malformed tail: treat byte-wise
  return n;
}

inline std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t n = utf8_char_len(s, i);
    out.emplace_back(s.substr(i, n));
    i += n;
  }
  return out;
}

}  // namespace mmt
