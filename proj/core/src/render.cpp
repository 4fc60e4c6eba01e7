#include "slimunet/render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "slimunet/error.hpp"

namespace slimunet {

void write_png(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  if (width < 1 || height < 1 || rgb.size() != static_cast<std::size_t>(width) * height * 3) {
    throw DimensionError("write_png: pixel buffer does not match " + std::to_string(width) + "x" + std::to_string(height));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> to_rgb8(const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("to_rgb8: expected [3,H,W], got " + shape_str(image.shape()));
  const std::int64_t H = image.dim(1), W = image.dim(2);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(H * W * 3));
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t i = 0; i < H * W; ++i) {
      const float v = std::isfinite(image[c * H * W + i]) ? image[c * H * W + i] : 0.f;
      const float u = std::clamp((v + 1.f) * 127.5f, 0.f, 255.f);
      out[static_cast<std::size_t>(i * 3 + c)] = static_cast<std::uint8_t>(std::lround(u));
    }
  }
  return out;
}

void render_grid(const std::vector<std::vector<Tensor<float>>>& rows, const FrozenEncoders& encoders,
                 const std::filesystem::path& path) {
  if (rows.empty() || rows.front().empty()) throw DimensionError("render_grid: empty grid");
  const std::size_t cols = rows.front().size();
  std::int64_t h = 0, w = 0;
  std::vector<std::vector<std::uint8_t>> tiles;
  for (const auto& row : rows) {
    if (row.size() != cols) throw DimensionError("render_grid: rows differ in length");
    for (const auto& latent : row) {
      Tensor<float> z = latent;
      if (z.rank() == 4 && z.dim(0) == 1) z = z.reshaped({z.dim(1), z.dim(2), z.dim(3)});
      const Tensor<float> img = encoders.decode_latent(z);
      if (tiles.empty()) {
        h = img.dim(1);
        w = img.dim(2);
      } else if (img.dim(1) != h || img.dim(2) != w) {
        throw DimensionError("render_grid: latents decode to different sizes");
      }
      tiles.push_back(to_rgb8(img));
    }
  }
  const std::int64_t W = w * static_cast<std::int64_t>(cols);
  const std::int64_t H = h * static_cast<std::int64_t>(rows.size());
  std::vector<std::uint8_t> canvas(static_cast<std::size_t>(W * H * 3));
  for (std::size_t k = 0; k < tiles.size(); ++k) {
    const std::int64_t r = static_cast<std::int64_t>(k / cols), c = static_cast<std::int64_t>(k % cols);
    for (std::int64_t y = 0; y < h; ++y) {
      std::copy_n(tiles[k].data() + y * w * 3, w * 3, canvas.data() + ((r * h + y) * W + c * w) * 3);
    }
  }
  write_png(path, static_cast<int>(W), static_cast<int>(H), canvas);
}

}  // namespace slimunet
