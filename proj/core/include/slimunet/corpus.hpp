#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slimunet/tensor.hpp"

namespace slimunet {

/// Closed 32-token vocabulary. Token 0 is the null token used for padding
/// and for the unconditional branch of classifier-free guidance.
struct Vocabulary {
  static constexpr int size = 32;
  static constexpr int max_tokens = 8;
  static constexpr int null_token = 0;

  static const std::array<std::string, size>& words();
  static int id(const std::string& word);
  static const std::string& word(int id);
};

enum class ShapeKind { circle, square, triangle, cross };

struct SceneAttributes {
  int color = 0;       // index into shape colors
  ShapeKind shape = ShapeKind::circle;
  int background = 0;  // index into background colors
  int size = 0;        // 0 small, 1 large
  int position = 0;    // center, left, right, top, bottom
};

inline constexpr int kShapeColors = 6;
inline constexpr int kShapeKinds = 4;
inline constexpr int kBackgrounds = 4;
inline constexpr int kImageChannels = 3;
inline constexpr int kImageSize = 16;

struct CaptionedImage {
  Tensor<float> image;       // [3, 16, 16], values in [-1, 1]
  std::vector<int> caption;  // exactly max_tokens ids, null padded
  SceneAttributes attributes;
};

/// Balanced over the 24 color/shape pairs; deterministic in (n, seed).
std::vector<CaptionedImage> generate_toy_corpus(int n, std::uint64_t seed);

Tensor<float> render_scene(const SceneAttributes& a);

std::string caption_text(const std::vector<int>& caption);
/// Space-separated words to null-padded ids; unknown words throw RangeError.
std::vector<int> tokenize(const std::string& text);

/// Frozen text-table and lossless image codec stand-ins.
///
/// The image codec maps [C,H,W] to [4C,H/2,W/2]: channel block 0 holds the
/// 2x2 block mean, blocks 1-3 the horizontal, vertical and diagonal
/// deviations. Decoding inverts it exactly up to rounding.
class FrozenEncoders {
 public:
  FrozenEncoders(int context_dim, std::uint64_t seed);

  int context_dim() const noexcept { return context_dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const Tensor<float>& text_table() const noexcept { return table_; }

  /// [max_tokens, context_dim] rows looked up from the table.
  Tensor<float> encode_text(const std::vector<int>& caption) const;
  /// [B, max_tokens, context_dim].
  Tensor<float> encode_text_batch(const std::vector<std::vector<int>>& captions) const;
  /// Context of the all-null caption, batched.
  Tensor<float> null_context(std::int64_t batch) const;

  /// Accepts [C,H,W] or [B,C,H,W] with even H, W.
  Tensor<float> encode_image(const Tensor<float>& image) const;
  Tensor<float> decode_latent(const Tensor<float>& latent) const;

  /// Content hash of every frozen parameter.
  std::uint64_t hash() const;

 private:
  int context_dim_;
  std::uint64_t seed_;
  Tensor<float> table_;
};

/// Writes manifest.json plus an images tensor archive.
void save_corpus(const std::filesystem::path& dir, const std::vector<CaptionedImage>& corpus, std::uint64_t seed);
std::vector<CaptionedImage> load_corpus(const std::filesystem::path& dir);
nlohmann::json corpus_manifest(const std::vector<CaptionedImage>& corpus, std::uint64_t seed);

}  // namespace slimunet
