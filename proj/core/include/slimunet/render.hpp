#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "slimunet/corpus.hpp"

namespace slimunet {

/// Writes 8-bit RGB pixels (row-major, interleaved) as a lossless PNG. The
/// encoder adds no timestamps, so equal pixels give equal bytes.
void write_png(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb);

/// Maps a [3,H,W] image in [-1,1] to interleaved 8-bit RGB.
std::vector<std::uint8_t> to_rgb8(const Tensor<float>& image);

/// Decodes every latent and tiles the images edge to edge: one row per
/// entry of `rows`, one column per latent. Rows must have equal length.
void render_grid(const std::vector<std::vector<Tensor<float>>>& rows, const FrozenEncoders& encoders,
                 const std::filesystem::path& path);

}  // namespace slimunet
