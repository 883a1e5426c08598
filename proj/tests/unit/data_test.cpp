#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <set>

#include "qlab/data.hpp"
#include "qlab/error.hpp"
#include "qlab/synthetic_corpus.hpp"
#include "test_support.hpp"

namespace qlab::data {
namespace {

using testing::ScratchDir;

void write_bytes(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

TokenStream iota_stream(std::size_t n) {
  std::vector<std::uint8_t> bytes(n);
  std::iota(bytes.begin(), bytes.end(), std::uint8_t{0});
  return stream_from_bytes(bytes);
}

TEST(LoadCorpus, BytesBecomeTokenIds) {
  ScratchDir dir;
  write_bytes(dir / "abc.txt", "abc");
  EXPECT_EQ(load_corpus(dir / "abc.txt").tokens, (std::vector<TokenId>{97, 98, 99}));
  EXPECT_EQ(load_corpus(dir / "abc.txt", 2).tokens, (std::vector<TokenId>{97, 98}));
}

TEST(LoadCorpus, OneMebibyteFile) {
  ScratchDir dir;
  std::string blob(1 << 20, '\0');
  for (std::size_t i = 0; i < blob.size(); ++i) blob[i] = static_cast<char>((i * 131) & 0xff);
  write_bytes(dir / "big.bin", blob);
  const TokenStream s = load_corpus(dir / "big.bin");
  ASSERT_EQ(s.size(), 1048576u);
  for (TokenId t : s.tokens) ASSERT_LT(t, 256);
}

TEST(LoadCorpus, MissingOrEmptyFileIsIngestionError) {
  ScratchDir dir;
  EXPECT_THROW(load_corpus(dir / "absent.txt"), IngestionError);
  write_bytes(dir / "empty.txt", "");
  EXPECT_THROW(load_corpus(dir / "empty.txt"), IngestionError);
}

TEST(Split, SizesForTenPercentFractions) {
  const Splits s = split(iota_stream(100), 0.1, 0.1, 4);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.calib.size(), 10u);
}

TEST(Split, SlicesAreDisjointAndCoverTheStream) {
  const TokenStream stream = iota_stream(200);
  const Splits s = split(stream, 0.15, 0.05, 99);
  std::vector<int> seen(200, 0);
  for (const TokenStream* part : {&s.train, &s.val, &s.calib}) {
    for (TokenId t : part->tokens) ++seen[t];
  }
  for (int c : seen) EXPECT_EQ(c, 1);
  // Validation and calibration are contiguous in the source.
  ASSERT_EQ(s.val.source.size(), 1u);
  ASSERT_EQ(s.calib.source.size(), 1u);
  EXPECT_EQ(s.val.source[0].end, s.calib.source[0].begin);
}

TEST(Split, SameSeedIsIdentical) {
  const TokenStream stream = iota_stream(250);
  const Splits a = split(stream, 0.1, 0.1, 17);
  const Splits b = split(stream, 0.1, 0.1, 17);
  EXPECT_EQ(a.train.tokens, b.train.tokens);
  EXPECT_EQ(a.val.tokens, b.val.tokens);
  EXPECT_EQ(a.calib.tokens, b.calib.tokens);
}

TEST(Split, DifferentSeedsMoveTheHeldOutBlock) {
  const TokenStream stream = iota_stream(250);
  std::set<std::size_t> offsets;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    offsets.insert(split(stream, 0.1, 0.1, seed).val.source.at(0).begin);
  }
  EXPECT_GE(offsets.size(), 9u);
}

TEST(Split, BadFractionsAreConfigErrors) {
  const TokenStream stream = iota_stream(100);
  EXPECT_THROW(split(stream, 0.0, 0.1, 0), ConfigError);
  EXPECT_THROW(split(stream, 0.1, -0.1, 0), ConfigError);
  EXPECT_THROW(split(stream, 0.6, 0.4, 0), ConfigError);
}

TEST(Batching, TargetsAreShiftedInputs) {
  const TokenStream stream = iota_stream(10);
  BatchCursor cursor;
  const auto b = next_batch(stream, 1, 4, cursor);
  ASSERT_TRUE(b);
  EXPECT_EQ(b->inputs, (std::vector<TokenId>{0, 1, 2, 3}));
  EXPECT_EQ(b->targets, (std::vector<TokenId>{1, 2, 3, 4}));
  EXPECT_EQ(cursor.windows_consumed, 1u);
}

TEST(Batching, ExhaustionWithoutWrapAndWrapAround) {
  const TokenStream stream = iota_stream(10);  // two windows of 4
  EXPECT_EQ(windows_per_epoch(stream, 4), 2u);
  BatchCursor cursor;
  ASSERT_TRUE(next_batch(stream, 2, 4, cursor, false));
  EXPECT_FALSE(next_batch(stream, 1, 4, cursor, false));
  const auto wrapped = next_batch(stream, 1, 4, cursor, true);
  ASSERT_TRUE(wrapped);
  EXPECT_EQ(wrapped->inputs.front(), 0);
}

TEST(Batching, CalibrationSetCountsSequences) {
  const TokenStream stream = iota_stream(200);
  const CalibrationSet c = make_calibration(stream, 10, 8, 4);
  EXPECT_EQ(c.sample_count, 10u);
  std::size_t rows = 0;
  for (const auto& b : c.batches) rows += b.batch;
  EXPECT_EQ(rows, 10u);
  // Requests beyond the stream are capped.
  EXPECT_EQ(make_calibration(stream, 1000, 8, 4).sample_count, windows_per_epoch(stream, 8));
}

TEST(Batching, ContentHashSeesEveryToken) {
  const TokenStream stream = iota_stream(100);
  auto batches = fixed_batches(stream, 4, 2, 8);
  const auto h = content_hash(batches);
  EXPECT_EQ(h, content_hash(fixed_batches(stream, 4, 2, 8)));
  batches.back().targets.back() ^= 1;
  EXPECT_NE(h, content_hash(batches));
}

TEST(SyntheticCorpus, DeterministicAndTextLike) {
  const std::string a = synthetic_corpus(20000, 3);
  EXPECT_EQ(a.size(), 20000u);
  EXPECT_EQ(a, synthetic_corpus(20000, 3));
  EXPECT_NE(a, synthetic_corpus(20000, 4));
  const auto spaces = std::count(a.begin(), a.end(), ' ');
  EXPECT_GT(spaces, 1000);
  EXPECT_NE(a.find('\n'), std::string::npos);
  for (char c : a) ASSERT_TRUE(c == ' ' || c == '\n' || c == '.' || c == ',' || std::isalpha(static_cast<unsigned char>(c))) << int(c);
}

}  // namespace
}  // namespace qlab::data
