#include "slimunet/corpus.hpp"

#include <algorithm>
#include <sstream>

#include "slimunet/checkpoint.hpp"
#include "slimunet/error.hpp"
#include "slimunet/hash.hpp"
#include "slimunet/random.hpp"

namespace slimunet {
namespace {

using Rgb = std::array<float, 3>;

constexpr std::array<Rgb, kShapeColors> kShapeRgb{{
    {1.f, -1.f, -1.f},   // red
    {-1.f, 1.f, -1.f},   // green
    {-1.f, -1.f, 1.f},   // blue
    {1.f, 1.f, -1.f},    // yellow
    {1.f, -1.f, 1.f},    // magenta
    {-1.f, 1.f, 1.f},    // cyan
}};
constexpr std::array<Rgb, kBackgrounds> kBackgroundRgb{{
    {1.f, 1.f, 1.f},     // white
    {-1.f, -1.f, -1.f},  // black
    {0.f, 0.f, 0.f},     // gray
    {-1.f, -1.f, 0.f},   // navy
}};

constexpr int kFirstColor = 1;
constexpr int kFirstShape = 7;
constexpr int kOn = 11;
constexpr int kFirstBackground = 12;
constexpr int kFirstSize = 16;
constexpr int kFirstPosition = 18;

bool inside(ShapeKind kind, double dx, double dy, double r) {
  switch (kind) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::triangle: return dy >= -r && dy <= 0.8 * r && std::abs(dx) <= 0.5 * (dy + r);
    case ShapeKind::cross:
      return (std::abs(dx) <= r / 3 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3 && std::abs(dx) <= r);
  }
  return false;
}

std::vector<int> build_caption(const SceneAttributes& a, bool with_size, bool with_position) {
  std::vector<int> c;
  if (with_size) c.push_back(kFirstSize + a.size);
  c.push_back(kFirstColor + a.color);
  c.push_back(kFirstShape + static_cast<int>(a.shape));
  c.push_back(kOn);
  c.push_back(kFirstBackground + a.background);
  if (with_position) c.push_back(kFirstPosition + a.position);
  c.resize(Vocabulary::max_tokens, Vocabulary::null_token);
  return c;
}

void check_tokens(const std::vector<int>& caption) {
  if (caption.size() > static_cast<std::size_t>(Vocabulary::max_tokens)) {
    throw RangeError("caption longer than " + std::to_string(Vocabulary::max_tokens) + " tokens");
  }
  for (int t : caption) {
    if (t < 0 || t >= Vocabulary::size) throw RangeError("unknown token id " + std::to_string(t));
  }
}

nlohmann::json attributes_json(const SceneAttributes& a) {
  return {{"color", a.color}, {"shape", static_cast<int>(a.shape)}, {"background", a.background},
          {"size", a.size}, {"position", a.position}};
}

}  // namespace

const std::array<std::string, Vocabulary::size>& Vocabulary::words() {
  static const std::array<std::string, size> w{
      "<null>", "red",    "green",  "blue",   "yellow", "magenta", "cyan",   "circle",
      "square", "triangle", "cross", "on",     "white",  "black",   "gray",   "navy",
      "small",  "large",  "center", "left",   "right",  "top",     "bottom", "<unused0>",
      "<unused1>", "<unused2>", "<unused3>", "<unused4>", "<unused5>", "<unused6>", "<unused7>", "<unused8>"};
  return w;
}

int Vocabulary::id(const std::string& word) {
  const auto& w = words();
  auto it = std::find(w.begin(), w.end(), word);
  if (it == w.end()) throw RangeError("unknown token '" + word + "'");
  return static_cast<int>(it - w.begin());
}

const std::string& Vocabulary::word(int id) {
  if (id < 0 || id >= size) throw RangeError("unknown token id " + std::to_string(id));
  return words()[static_cast<std::size_t>(id)];
}

Tensor<float> render_scene(const SceneAttributes& a) {
  static constexpr std::array<std::array<double, 2>, 5> centers{{{8, 8}, {5, 8}, {11, 8}, {8, 5}, {8, 11}}};
  const double r = a.size == 0 ? 3.0 : 5.0;
  const auto [cx, cy] = centers.at(static_cast<std::size_t>(a.position));
  const Rgb& fg = kShapeRgb.at(static_cast<std::size_t>(a.color));
  const Rgb& bg = kBackgroundRgb.at(static_cast<std::size_t>(a.background));
  Tensor<float> img({kImageChannels, kImageSize, kImageSize});
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const bool in = inside(a.shape, x + 0.5 - cx, y + 0.5 - cy, r);
      for (int ch = 0; ch < kImageChannels; ++ch) img[(ch * kImageSize + y) * kImageSize + x] = in ? fg[ch] : bg[ch];
    }
  }
  return img;
}

std::vector<CaptionedImage> generate_toy_corpus(int n, std::uint64_t seed) {
  if (n < 1) throw RangeError("corpus size must be >= 1");
  Rng rng(seed);
  constexpr int pairs = kShapeColors * kShapeKinds;
  std::vector<int> pair_of(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pair_of[i] = i % pairs;
  std::shuffle(pair_of.begin(), pair_of.end(), rng);
  std::vector<CaptionedImage> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    SceneAttributes a;
    a.color = pair_of[i] / kShapeKinds;
    a.shape = static_cast<ShapeKind>(pair_of[i] % kShapeKinds);
    a.background = static_cast<int>(rng() % kBackgrounds);
    a.size = static_cast<int>(rng() % 2);
    a.position = static_cast<int>(rng() % 5);
    const bool with_size = rng() % 2 == 0;
    const bool with_position = rng() % 2 == 0;
    out.push_back({render_scene(a), build_caption(a, with_size, with_position), a});
  }
  return out;
}

std::string caption_text(const std::vector<int>& caption) {
  std::string s;
  for (int t : caption) {
    if (t == Vocabulary::null_token) continue;
    if (!s.empty()) s += ' ';
    s += Vocabulary::word(t);
  }
  return s;
}

std::vector<int> tokenize(const std::string& text) {
  std::istringstream in(text);
  std::vector<int> ids;
  for (std::string w; in >> w;) ids.push_back(Vocabulary::id(w));
  check_tokens(ids);
  ids.resize(Vocabulary::max_tokens, Vocabulary::null_token);
  return ids;
}

FrozenEncoders::FrozenEncoders(int context_dim, std::uint64_t seed)
    : context_dim_(context_dim), seed_(seed), table_({Vocabulary::size, context_dim}) {
  if (context_dim < 1) throw RangeError("context_dim must be >= 1");
  Rng rng(splitmix64(seed ^ fnv1a("text_table")));
  table_ = randn<float>(table_.shape(), rng);
}

Tensor<float> FrozenEncoders::encode_text(const std::vector<int>& caption) const {
  check_tokens(caption);
  Tensor<float> out({Vocabulary::max_tokens, context_dim_});
  for (int i = 0; i < Vocabulary::max_tokens; ++i) {
    const int tok = i < static_cast<int>(caption.size()) ? caption[i] : Vocabulary::null_token;
    std::copy_n(table_.data() + static_cast<std::int64_t>(tok) * context_dim_, context_dim_,
                out.data() + static_cast<std::int64_t>(i) * context_dim_);
  }
  return out;
}

Tensor<float> FrozenEncoders::encode_text_batch(const std::vector<std::vector<int>>& captions) const {
  const std::int64_t per = std::int64_t{Vocabulary::max_tokens} * context_dim_;
  Tensor<float> out({static_cast<std::int64_t>(captions.size()), Vocabulary::max_tokens, context_dim_});
  for (std::size_t b = 0; b < captions.size(); ++b) {
    const auto row = encode_text(captions[b]);
    std::copy_n(row.data(), per, out.data() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

Tensor<float> FrozenEncoders::null_context(std::int64_t batch) const {
  return encode_text_batch(std::vector<std::vector<int>>(static_cast<std::size_t>(batch), std::vector<int>{}));
}

Tensor<float> FrozenEncoders::encode_image(const Tensor<float>& image) const {
  const bool batched = image.rank() == 4;
  if (image.rank() != 3 && !batched) throw DimensionError("encode_image: expected [C,H,W] or [B,C,H,W]");
  const std::int64_t B = batched ? image.dim(0) : 1;
  const std::int64_t C = image.dim(-3), H = image.dim(-2), W = image.dim(-1);
  if (H % 2 != 0 || W % 2 != 0) throw DimensionError("encode_image: H and W must be even, got " + shape_str(image.shape()));
  const std::int64_t h = H / 2, w = W / 2;
  Shape shape = batched ? Shape{B, 4 * C, h, w} : Shape{4 * C, h, w};
  Tensor<float> out(shape);
  for (std::int64_t b = 0; b < B; ++b) {
    const float* src = image.data() + b * C * H * W;
    float* dst = out.data() + b * 4 * C * h * w;
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const float* p = src + (c * H + 2 * y) * W + 2 * x;
          const float a = p[0], bb = p[1], cc = p[W], d = p[W + 1];
          const std::int64_t o = y * w + x;
          dst[(0 * C + c) * h * w + o] = (a + bb + cc + d) / 4;
          dst[(1 * C + c) * h * w + o] = (a - bb + cc - d) / 4;
          dst[(2 * C + c) * h * w + o] = (a + bb - cc - d) / 4;
          dst[(3 * C + c) * h * w + o] = (a - bb - cc + d) / 4;
        }
      }
    }
  }
  return out;
}

Tensor<float> FrozenEncoders::decode_latent(const Tensor<float>& latent) const {
  const bool batched = latent.rank() == 4;
  if (latent.rank() != 3 && !batched) throw DimensionError("decode_latent: expected [4C,h,w] or [B,4C,h,w]");
  const std::int64_t B = batched ? latent.dim(0) : 1;
  const std::int64_t C4 = latent.dim(-3), h = latent.dim(-2), w = latent.dim(-1);
  if (C4 % 4 != 0) throw DimensionError("decode_latent: channel count must be a multiple of 4");
  const std::int64_t C = C4 / 4, H = 2 * h, W = 2 * w;
  Tensor<float> out(batched ? Shape{B, C, H, W} : Shape{C, H, W});
  for (std::int64_t b = 0; b < B; ++b) {
    const float* src = latent.data() + b * C4 * h * w;
    float* dst = out.data() + b * C * H * W;
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const std::int64_t o = y * w + x;
          const float m = src[(0 * C + c) * h * w + o], dh = src[(1 * C + c) * h * w + o];
          const float dv = src[(2 * C + c) * h * w + o], dd = src[(3 * C + c) * h * w + o];
          float* p = dst + (c * H + 2 * y) * W + 2 * x;
          p[0] = m + dh + dv + dd;
          p[1] = m - dh + dv - dd;
          p[W] = m + dh - dv - dd;
          p[W + 1] = m - dh - dv + dd;
        }
      }
    }
  }
  return out;
}

std::uint64_t FrozenEncoders::hash() const {
  Fnv1a h;
  h.update("haar2x2-v1");
  h.update(&context_dim_, sizeof context_dim_);
  h.update(table_.data(), static_cast<std::size_t>(table_.numel()) * sizeof(float));
  return h.digest();
}

nlohmann::json corpus_manifest(const std::vector<CaptionedImage>& corpus, std::uint64_t seed) {
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    items.push_back({{"index", i},
                     {"caption", caption_text(corpus[i].caption)},
                     {"tokens", corpus[i].caption},
                     {"attributes", attributes_json(corpus[i].attributes)}});
  }
  return {{"format", "slimunet-toy-corpus"},
          {"version", 1},
          {"seed", seed},
          {"size", corpus.size()},
          {"vocabulary", Vocabulary::words()},
          {"max_tokens", Vocabulary::max_tokens},
          {"null_token", Vocabulary::null_token},
          {"image_size", {kImageChannels, kImageSize, kImageSize}},
          {"latent_size", {4 * kImageChannels, kImageSize / 2, kImageSize / 2}},
          {"items", items}};
}

void save_corpus(const std::filesystem::path& dir, const std::vector<CaptionedImage>& corpus, std::uint64_t seed) {
  std::vector<NamedTensor<float>> images;
  for (std::size_t i = 0; i < corpus.size(); ++i) images.emplace_back("image." + std::to_string(i), corpus[i].image);
  write_tensor_archive(dir, "images", images);
  write_json_file(dir / "manifest.json", corpus_manifest(corpus, seed));
}

std::vector<CaptionedImage> load_corpus(const std::filesystem::path& dir) {
  const auto manifest = read_json_file(dir / "manifest.json");
  auto images = read_tensor_archive<float>(dir, "images");
  const auto& items = manifest.at("items");
  if (items.size() != images.size()) throw IoError("corpus manifest and image archive disagree in " + dir.string());
  std::vector<CaptionedImage> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    SceneAttributes a;
    const auto& aj = it.at("attributes");
    a.color = aj.at("color");
    a.shape = static_cast<ShapeKind>(aj.at("shape").get<int>());
    a.background = aj.at("background");
    a.size = aj.at("size");
    a.position = aj.at("position");
    auto caption = it.at("tokens").get<std::vector<int>>();
    check_tokens(caption);
    out.push_back({std::move(images[i].second), std::move(caption), a});
  }
  return out;
}

}  // namespace slimunet
