#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace qlab::data {

/// Deterministic English-like text: a Zipf-distributed lexicon of pseudo-words
/// with word-level bigram preferences, sentence punctuation and line breaks.
/// Identical (bytes, seed) always produce identical output on every platform.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

}  // namespace qlab::data
