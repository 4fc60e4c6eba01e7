#include <gtest/gtest.h>

#include <map>

#include "slimunet/corpus.hpp"
#include "slimunet/error.hpp"
#include "test_support.hpp"

using namespace slimunet;
using namespace slimunet::testing;

namespace {

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace

TEST(Corpus, DeterministicInNAndSeed) {
  const auto a = generate_toy_corpus(4, 1);
  const auto b = generate_toy_corpus(4, 1);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].caption, b[i].caption);
    EXPECT_TRUE(bitwise_equal(a[i].image, b[i].image));
  }
  const auto c = generate_toy_corpus(48, 2);
  const auto d = generate_toy_corpus(48, 3);
  bool differs = false;
  for (std::size_t i = 0; i < c.size(); ++i) differs |= c[i].caption != d[i].caption;
  EXPECT_TRUE(differs);
}

TEST(Corpus, CaptionsStayInVocabulary) {
  for (const auto& s : generate_toy_corpus(200, 7)) {
    ASSERT_EQ(s.caption.size(), static_cast<std::size_t>(Vocabulary::max_tokens));
    bool padding = false;
    for (int t : s.caption) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, Vocabulary::size);
      if (t == Vocabulary::null_token) padding = true;
      else EXPECT_FALSE(padding) << "content token after padding";
    }
    EXPECT_EQ(tokenize(caption_text(s.caption)), s.caption);
  }
}

TEST(Corpus, CaptionNamesColorAndShape) {
  for (const auto& s : generate_toy_corpus(48, 9)) {
    const auto text = caption_text(s.caption);
    const auto shape_word = Vocabulary::word(Vocabulary::id("circle") + static_cast<int>(s.attributes.shape));
    const auto color_word = Vocabulary::word(Vocabulary::id("red") + s.attributes.color);
    EXPECT_NE(text.find(shape_word), std::string::npos) << text;
    EXPECT_NE(text.find(color_word), std::string::npos) << text;
  }
}

TEST(Corpus, BalancedOverColorShapePairs) {
  for (int n : {24, 100, 250}) {
    std::map<std::pair<int, int>, int> counts;
    for (const auto& s : generate_toy_corpus(n, 11)) counts[{s.attributes.color, static_cast<int>(s.attributes.shape)}]++;
    EXPECT_EQ(counts.size(), std::min<std::size_t>(24, static_cast<std::size_t>(n)));
    for (const auto& [k, v] : counts) {
      EXPECT_GE(v, n / 24);
      EXPECT_LE(v, n / 24 + 1);
    }
  }
}

TEST(Corpus, ImagesInRange) {
  for (const auto& s : generate_toy_corpus(24, 12)) {
    EXPECT_EQ(s.image.shape(), (Shape{kImageChannels, kImageSize, kImageSize}));
    for (std::int64_t i = 0; i < s.image.numel(); ++i) {
      EXPECT_GE(s.image[i], -1.f);
      EXPECT_LE(s.image[i], 1.f);
    }
  }
}

TEST(Tokenize, UnknownWordThrows) {
  EXPECT_THROW(tokenize("red unicorn"), RangeError);
  EXPECT_THROW(tokenize("a b c d e f g h i"), RangeError);
  const auto t = tokenize("red circle on white");
  EXPECT_EQ(t.size(), static_cast<std::size_t>(Vocabulary::max_tokens));
  EXPECT_EQ(t[4], Vocabulary::null_token);
}

TEST(Encoders, TextLookupProperties) {
  const FrozenEncoders enc(8, 3);
  const auto cap = tokenize("red circle on white");
  const auto a = enc.encode_text(cap);
  EXPECT_EQ(a.shape(), (Shape{Vocabulary::max_tokens, 8}));
  EXPECT_TRUE(bitwise_equal(a, enc.encode_text(cap)));

  // One differing token changes exactly one row.
  auto other = cap;
  other[1] = Vocabulary::id("square");
  const auto b = enc.encode_text(other);
  int rows_changed = 0;
  for (int r = 0; r < Vocabulary::max_tokens; ++r) {
    bool changed = false;
    for (int d = 0; d < 8; ++d) changed |= a[r * 8 + d] != b[r * 8 + d];
    rows_changed += changed;
  }
  EXPECT_EQ(rows_changed, 1);

  // Null context equals the encoding of the all-null caption.
  const auto nul = enc.null_context(2);
  const auto empty = enc.encode_text(std::vector<int>(Vocabulary::max_tokens, Vocabulary::null_token));
  EXPECT_EQ(nul.shape(), (Shape{2, Vocabulary::max_tokens, 8}));
  for (std::int64_t i = 0; i < nul.numel(); ++i) EXPECT_EQ(nul[i], empty[i % empty.numel()]);

  const auto batch = enc.encode_text_batch({cap, other});
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    EXPECT_EQ(batch[i], a[i]);
    EXPECT_EQ(batch[a.numel() + i], b[i]);
  }
}

TEST(Encoders, HashStable) {
  EXPECT_EQ(FrozenEncoders(8, 3).hash(), FrozenEncoders(8, 3).hash());
  EXPECT_NE(FrozenEncoders(8, 3).hash(), FrozenEncoders(8, 4).hash());
  EXPECT_NE(FrozenEncoders(8, 3).hash(), FrozenEncoders(16, 3).hash());
}

TEST(Codec, ShapesAndConstantImage) {
  const FrozenEncoders enc(8, 3);
  const Tensor<float> flat({3, 16, 16}, 0.5f);
  const auto z = enc.encode_image(flat);
  EXPECT_EQ(z.shape(), (Shape{12, 8, 8}));
  // Constant image: block means hold the value, deviations vanish.
  for (std::int64_t c = 0; c < 12; ++c) {
    for (std::int64_t i = 0; i < 64; ++i) EXPECT_EQ(z[c * 64 + i], c < 3 ? 0.5f : 0.f);
  }
  EXPECT_TRUE(bitwise_equal(enc.decode_latent(z), flat));
  Rng rng(1);
  const auto batch = randn<float>({2, 3, 4, 6}, rng);
  EXPECT_EQ(enc.encode_image(batch).shape(), (Shape{2, 12, 2, 3}));
  EXPECT_THROW(enc.encode_image(randn<float>({3, 5, 4}, rng)), DimensionError);
}

TEST(Codec, RoundTripWithinRounding) {
  const FrozenEncoders enc(8, 3);
  for (const auto& s : generate_toy_corpus(24, 5)) {
    const auto back = enc.decode_latent(enc.encode_image(s.image));
    for (std::int64_t i = 0; i < back.numel(); ++i) EXPECT_NEAR(back[i], s.image[i], 1e-6f);
  }
}

TEST(Codec, BlockMeanOracle) {
  const FrozenEncoders enc(8, 3);
  Rng rng(2);
  const auto img = randn<float>({1, 4, 4}, rng);
  const auto z = enc.encode_image(img);
  for (int by = 0; by < 2; ++by) {
    for (int bx = 0; bx < 2; ++bx) {
      const double mean = (double(img[(2 * by) * 4 + 2 * bx]) + img[(2 * by) * 4 + 2 * bx + 1] +
                           img[(2 * by + 1) * 4 + 2 * bx] + img[(2 * by + 1) * 4 + 2 * bx + 1]) /
                          4.0;
      EXPECT_NEAR(z[by * 2 + bx], mean, 1e-6);
    }
  }
}

TEST(Corpus, SaveLoadRoundTrip) {
  const auto dir = scratch_dir("corpus_roundtrip");
  const auto c = generate_toy_corpus(30, 4);
  save_corpus(dir, c, 4);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  const auto back = load_corpus(dir);
  ASSERT_EQ(back.size(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(back[i].caption, c[i].caption);
    EXPECT_EQ(back[i].attributes.color, c[i].attributes.color);
    EXPECT_EQ(back[i].attributes.background, c[i].attributes.background);
    EXPECT_TRUE(bitwise_equal(back[i].image, c[i].image));
  }
  EXPECT_EQ(corpus_manifest(c, 4)["seed"], 4);
  EXPECT_THROW(load_corpus(dir / "missing"), IoError);
}
