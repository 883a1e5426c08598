#include "qlab/synthetic_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace qlab::data {

namespace {

// Only the raw engine output is used: distribution objects are implementation-defined.
class Source {
 public:
  explicit Source(std::uint64_t seed) : rng_(seed) {}
  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

 private:
  std::mt19937_64 rng_;
};

constexpr std::size_t kLexicon = 3000;
constexpr std::size_t kFollowers = 6;
constexpr double kZipfExponent = 1.1;
constexpr double kBigramProb = 0.55;

std::string make_word(Source& src) {
  static constexpr char kConsonants[] = "tnshrdlcmwfgypbvk";
  static constexpr char kVowels[] = "eaoiu";
  const std::size_t syllables = 1 + src.below(3);
  std::string w;
  for (std::size_t s = 0; s < syllables; ++s) {
    w += kConsonants[src.below(sizeof(kConsonants) - 1)];
    w += kVowels[src.below(sizeof(kVowels) - 1)];
    if (src.uniform() < 0.3) w += kConsonants[src.below(sizeof(kConsonants) - 1)];
  }
  return w;
}

}  // namespace

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  Source src(seed ^ 0x5eed5eed5eed5eedULL);

  std::vector<std::string> lexicon;
  lexicon.reserve(kLexicon);
  while (lexicon.size() < kLexicon) {
    std::string w = make_word(src);
    if (std::find(lexicon.begin(), lexicon.end(), w) == lexicon.end()) lexicon.push_back(std::move(w));
  }

  std::vector<double> cdf(kLexicon);
  double total = 0.0;
  for (std::size_t i = 0; i < kLexicon; ++i) {
    total += 1.0 / std::pow(static_cast<double>(i + 1), kZipfExponent);
    cdf[i] = total;
  }
  for (double& c : cdf) c /= total;
  auto zipf = [&]() {
    const double u = src.uniform();
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), kLexicon - 1);
  };

  std::vector<std::size_t> followers(kLexicon * kFollowers);
  for (auto& f : followers) f = zipf();

  std::string out;
  out.reserve(bytes + 16);
  std::size_t word = zipf();
  std::size_t in_sentence = 0;
  std::size_t sentences_on_line = 0;
  bool capitalize = true;
  while (out.size() < bytes) {
    std::string w = lexicon[word];
    if (capitalize) w[0] = static_cast<char>(w[0] - 'a' + 'A');
    capitalize = false;
    out += w;
    ++in_sentence;
    if (in_sentence >= 4 && src.uniform() < 0.15) {
      out += '.';
      in_sentence = 0;
      capitalize = true;
      if (++sentences_on_line >= 3 && src.uniform() < 0.4) {
        out += '\n';
        sentences_on_line = 0;
      } else {
        out += ' ';
      }
    } else if (in_sentence >= 3 && src.uniform() < 0.05) {
      out += ", ";
    } else {
      out += ' ';
    }
    word = src.uniform() < kBigramProb ? followers[word * kFollowers + src.below(kFollowers)] : zipf();
  }
  out.resize(bytes);
  return out;
}

}  // namespace qlab::data
