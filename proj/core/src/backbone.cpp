#include "slimunet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "slimunet/error.hpp"
#include "slimunet/hash.hpp"
#include "slimunet/ops.hpp"

namespace slimunet {
namespace {

class LayoutBuilder {
 public:
  explicit LayoutBuilder(const UNetConfig& c) : c_(c) {}

  std::vector<ParamSpec> build() {
    const int base = c_.base_channels;
    const int temb = c_.time_embed_dim;
    conv("conv_in", c_.in_channels, base, 3);
    linear("time_embed.linear_1", base, temb, true);
    linear("time_embed.linear_2", temb, temb, true);
    if (c_.pooled_embed_dim > 0) {
      linear("add_embed.linear_1", c_.pooled_embed_dim, temb, true);
      linear("add_embed.linear_2", temb, temb, true);
    }
    const int S = c_.stages();
    int ch = base;
    for (int s = 1; s <= S; ++s) {
      const int out = c_.channels(s);
      for (int j = 1; j <= c_.resnets_per_down_stage; ++j) {
        const std::string stage = "down." + std::to_string(s);
        resnet(stage + ".resnet." + std::to_string(j), j == 1 ? ch : out, out);
        const int depth = c_.layer_depth(Section::down, s, j);
        if (depth > 0) attention(stage + ".attn." + std::to_string(j), out, depth);
      }
      ch = out;
      if (s < S) conv("down." + std::to_string(s) + ".downsample", out, out, 3);
    }
    const int mid = c_.channels(S);
    resnet("mid.1.resnet.1", mid, mid);
    if (c_.mid_block.has_attention) attention("mid.1.attn.1", mid, c_.mid_block.attention_depth);
    if (c_.mid_block.has_second_resnet) resnet("mid.1.resnet.2", mid, mid);

    int prev = mid;
    for (int u = 1; u <= S; ++u) {
      const int s = S + 1 - u;
      const int out = c_.channels(s);
      const int skip_last = s >= 2 ? c_.channels(s - 1) : base;
      const std::string stage = "up." + std::to_string(u);
      for (int j = 1; j <= c_.resnets_per_up_stage; ++j) {
        const int skip = j == c_.resnets_per_up_stage ? skip_last : out;
        const int in = (j == 1 ? prev : out) + skip;
        resnet(stage + ".resnet." + std::to_string(j), in, out);
        const int depth = c_.layer_depth(Section::up, u, j);
        if (depth > 0) attention(stage + ".attn." + std::to_string(j), out, depth);
      }
      prev = out;
      if (u < S) conv(stage + ".upsample", out, out, 3);
    }
    norm("norm_out", c_.channels(1));
    conv("conv_out", c_.channels(1), c_.out_channels, 3);
    return std::move(specs_);
  }

 private:
  void add(std::string path, Shape shape, InitKind kind, double bound = 0.0) {
    specs_.push_back({std::move(path), std::move(shape), kind, bound});
  }
  void conv(const std::string& p, int cin, int cout, int k) {
    const double b = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
    add(p + ".weight", {cout, cin, k, k}, InitKind::uniform, b);
    add(p + ".bias", {cout}, InitKind::uniform, b);
  }
  void linear(const std::string& p, int in, int out, bool bias) {
    const double b = 1.0 / std::sqrt(static_cast<double>(in));
    add(p + ".weight", {out, in}, InitKind::uniform, b);
    if (bias) add(p + ".bias", {out}, InitKind::uniform, b);
  }
  void norm(const std::string& p, int ch) {
    add(p + ".weight", {ch}, InitKind::ones);
    add(p + ".bias", {ch}, InitKind::zeros);
  }
  void resnet(const std::string& p, int cin, int cout) {
    norm(p + ".norm1", cin);
    conv(p + ".conv1", cin, cout, 3);
    linear(p + ".time_proj", c_.time_embed_dim, cout, true);
    norm(p + ".norm2", cout);
    conv(p + ".conv2", cout, cout, 3);
    if (cin != cout) conv(p + ".shortcut", cin, cout, 1);
  }
  void attention(const std::string& p, int ch, int depth) {
    norm(p + ".norm", ch);
    linear(p + ".proj_in", ch, ch, true);
    for (int b = 1; b <= depth; ++b) {
      const std::string q = p + ".blocks." + std::to_string(b);
      norm(q + ".norm1", ch);
      linear(q + ".attn1.to_q", ch, ch, false);
      linear(q + ".attn1.to_k", ch, ch, false);
      linear(q + ".attn1.to_v", ch, ch, false);
      linear(q + ".attn1.to_out", ch, ch, true);
      norm(q + ".norm2", ch);
      linear(q + ".attn2.to_q", ch, ch, false);
      linear(q + ".attn2.to_k", c_.context_dim, ch, false);
      linear(q + ".attn2.to_v", c_.context_dim, ch, false);
      linear(q + ".attn2.to_out", ch, ch, true);
      norm(q + ".norm3", ch);
      linear(q + ".ff.proj", ch, 8 * ch, true);
      linear(q + ".ff.out", 4 * ch, ch, true);
    }
    linear(p + ".proj_out", ch, ch, true);
  }

  const UNetConfig& c_;
  std::vector<ParamSpec> specs_;
};

std::string key(Section s, int stage, const char* kind, int pos) {
  return std::string(to_string(s)) + "." + std::to_string(stage) + "." + kind + "." + std::to_string(pos);
}

void require_valid(const UNetConfig& c) {
  auto v = validate_config(c);
  if (!v.empty()) throw ConfigError("invalid U-Net config", std::move(v));
}

}  // namespace

std::vector<ParamSpec> parameter_layout(const UNetConfig& config) {
  require_valid(config);
  return LayoutBuilder(config).build();
}

std::vector<TapKey> describe_taps(const UNetConfig& c) {
  std::vector<TapKey> keys;
  for (const auto& [k, _] : predict_tap_shapes(c, 1, 1 << (c.stages() - 1), 1 << (c.stages() - 1))) keys.push_back(k);
  return keys;
}

std::map<TapKey, Shape> predict_tap_shapes(const UNetConfig& c, std::int64_t batch, std::int64_t height,
                                           std::int64_t width) {
  require_valid(c);
  const int S = c.stages();
  std::map<TapKey, Shape> out;
  auto at = [&](int s) {
    const std::int64_t f = std::int64_t{1} << (s - 1);
    return Shape{batch, c.channels(s), height / f, width / f};
  };
  for (int s = 1; s <= S; ++s)
    for (int j = 1; j <= c.resnets_per_down_stage; ++j) {
      out[key(Section::down, s, "resnet", j)] = at(s);
      if (c.layer_depth(Section::down, s, j) > 0) out[key(Section::down, s, "attn", j)] = at(s);
    }
  out["mid.1.resnet.1"] = at(S);
  if (c.mid_block.has_attention) out["mid.1.attn.1"] = at(S);
  if (c.mid_block.has_second_resnet) out["mid.1.resnet.2"] = at(S);
  out["mid.1.out.1"] = at(S);
  for (int u = 1; u <= S; ++u)
    for (int j = 1; j <= c.resnets_per_up_stage; ++j) {
      const Shape shape = at(S + 1 - u);
      out[key(Section::up, u, "resnet", j)] = shape;
      if (c.layer_depth(Section::up, u, j) > 0) out[key(Section::up, u, "attn", j)] = shape;
    }
  return out;
}

template <class T>
BasicUNet<T>::BasicUNet(UNetConfig config, std::map<std::string, Tensor<T>> tensors) : config_(std::move(config)) {
  const auto layout = parameter_layout(config_);
  std::vector<std::string> problems;
  for (const auto& spec : layout) {
    auto it = tensors.find(spec.path);
    if (it == tensors.end()) {
      problems.push_back(spec.path + ": missing");
      continue;
    }
    if (it->second.shape() != spec.shape) {
      problems.push_back(spec.path + ": shape " + shape_str(it->second.shape()) + ", expected " + shape_str(spec.shape));
      continue;
    }
    params_.emplace(spec.path, Var<T>(std::move(it->second)));
    tensors.erase(it);
  }
  for (const auto& [path, _] : tensors) problems.push_back(path + ": not part of this architecture");
  if (!problems.empty()) throw ConfigError("parameter set does not match config", std::move(problems));
}

template <class T>
BasicUNet<T> BasicUNet<T>::clone() const {
  std::map<std::string, Tensor<T>> copy;
  for (const auto& [path, v] : params_) copy.emplace(path, v.value());
  BasicUNet out(config_, std::move(copy));
  out.provenance = provenance;
  return out;
}

template <class T>
const Var<T>& BasicUNet<T>::parameter(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw Error("no parameter named '" + path + "'");
  return it->second;
}

template <class T>
Tensor<T>& BasicUNet<T>::mutable_tensor(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw Error("no parameter named '" + path + "'");
  return it->second.mutable_value();
}

template <class T>
std::int64_t BasicUNet<T>::num_params() const {
  std::int64_t n = 0;
  for (const auto& [_, v] : params_) n += v.value().numel();
  return n;
}

template <class T>
void BasicUNet<T>::set_requires_grad(bool on) {
  for (auto& [_, v] : params_) v.node()->requires_grad = on;
}

template <class T>
void BasicUNet<T>::zero_grad() {
  for (auto& [_, v] : params_) v.zero_grad();
}

template <class T>
BasicUNet<T> build_unet(const UNetConfig& config, std::uint64_t seed) {
  std::map<std::string, Tensor<T>> tensors;
  for (const auto& spec : parameter_layout(config)) {
    Tensor<T> t(spec.shape);
    switch (spec.init) {
      case InitKind::ones: t.fill(T(1)); break;
      case InitKind::zeros: break;
      case InitKind::uniform: {
        // Seeded per path so a tensor's initial value does not depend on which
        // other tensors exist.
        std::mt19937_64 rng(splitmix64(seed ^ fnv1a(spec.path)));
        std::uniform_real_distribution<double> dist(-spec.bound, spec.bound);
        for (auto& x : t.vec()) x = static_cast<T>(dist(rng));
        break;
      }
    }
    tensors.emplace(spec.path, std::move(t));
  }
  return BasicUNet<T>(config, std::move(tensors));
}

template <class T>
Tensor<T> timestep_embedding(std::span<const int> timesteps, int dim) {
  const int half = dim / 2;
  Tensor<T> out(Shape{static_cast<std::int64_t>(timesteps.size()), dim});
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = timesteps[b] * freq;
      out[static_cast<std::int64_t>(b) * dim + i] = static_cast<T>(std::cos(arg));
      out[static_cast<std::int64_t>(b) * dim + half + i] = static_cast<T>(std::sin(arg));
    }
  }
  return out;
}

namespace {

template <class T>
class Runner {
 public:
  Runner(const BasicUNet<T>& m, std::int64_t batch, FeatureTapRegistry<T>* taps)
      : m_(m), c_(m.config()), batch_(batch), taps_(taps) {}

  const Var<T>& p(const std::string& path) const { return m_.parameter(path); }

  Var<T> conv(const Var<T>& x, const std::string& path, int stride = 1) const {
    const Var<T>& w = p(path + ".weight");
    const int k = static_cast<int>(w.shape()[2]);
    return ops::conv2d(x, w, &p(path + ".bias"), stride, k / 2);
  }
  Var<T> linear(const Var<T>& x, const std::string& path, bool bias = true) const {
    return ops::linear(x, p(path + ".weight"), bias ? &p(path + ".bias") : nullptr);
  }
  Var<T> gnorm(const Var<T>& x, const std::string& path) const {
    return ops::group_norm(x, p(path + ".weight"), p(path + ".bias"), norm_groups(static_cast<int>(x.shape()[1])),
                           T(1e-5));
  }
  Var<T> lnorm(const Var<T>& x, const std::string& path) const {
    return ops::layer_norm(x, p(path + ".weight"), p(path + ".bias"), T(1e-5));
  }

  Var<T> resnet(const Var<T>& x, const Var<T>& emb_act, const std::string& path) const {
    Var<T> h = conv(ops::silu(gnorm(x, path + ".norm1")), path + ".conv1");
    h = ops::add_per_channel(h, linear(emb_act, path + ".time_proj"));
    h = conv(ops::silu(gnorm(h, path + ".norm2")), path + ".conv2");
    Var<T> skip = m_.parameters().count(path + ".shortcut.weight") ? conv(x, path + ".shortcut") : x;
    return ops::add(skip, h);
  }

  Var<T> attn(const Var<T>& x, const Var<T>& context, const std::string& path, int depth) const {
    const std::int64_t C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int heads = static_cast<int>(C / c_.attention_head_dim);
    Var<T> h = linear(ops::to_tokens(gnorm(x, path + ".norm")), path + ".proj_in");
    for (int b = 1; b <= depth; ++b) {
      const std::string q = path + ".blocks." + std::to_string(b);
      Var<T> n = lnorm(h, q + ".norm1");
      Var<T> a = ops::attention(linear(n, q + ".attn1.to_q", false), linear(n, q + ".attn1.to_k", false),
                                linear(n, q + ".attn1.to_v", false), static_cast<int>(batch_), heads);
      h = ops::add(h, linear(a, q + ".attn1.to_out"));
      n = lnorm(h, q + ".norm2");
      a = ops::attention(linear(n, q + ".attn2.to_q", false), linear(context, q + ".attn2.to_k", false),
                         linear(context, q + ".attn2.to_v", false), static_cast<int>(batch_), heads);
      h = ops::add(h, linear(a, q + ".attn2.to_out"));
      n = lnorm(h, q + ".norm3");
      h = ops::add(h, linear(ops::geglu(linear(n, q + ".ff.proj")), q + ".ff.out"));
    }
    h = linear(h, path + ".proj_out");
    return ops::add(ops::from_tokens(h, batch_, H, W), x);
  }

  void tap(const std::string& key, const Var<T>& v) const {
    if (taps_) taps_->emplace(key, v);
  }

 private:
  const BasicUNet<T>& m_;
  const UNetConfig& c_;
  std::int64_t batch_;
  FeatureTapRegistry<T>* taps_;
};

}  // namespace

template <class T>
ForwardResult<T> forward(const BasicUNet<T>& model, const Tensor<T>& z_t, const Tensor<T>& context,
                         std::type_identity_t<const Tensor<T>*> pooled, std::span<const int> timesteps,
                         const ForwardOptions& options) {
  const UNetConfig& c = model.config();
  const int S = c.stages();
  const std::int64_t div = std::int64_t{1} << (S - 1);
  const auto& zs = z_t.shape();
  if (zs.size() != 4 || zs[1] != c.in_channels || zs[2] % div != 0 || zs[3] % div != 0 || zs[2] < div ||
      zs[3] < div) {
    throw DimensionError("z_t: expected [B," + std::to_string(c.in_channels) + ",H,W] with H,W divisible by " +
                         std::to_string(div) + ", got " + shape_str(zs));
  }
  const std::int64_t B = zs[0];
  const auto& cs = context.shape();
  if (cs.size() != 3 || cs[0] != B || cs[2] != c.context_dim || cs[1] < 1) {
    throw DimensionError("context: expected [" + std::to_string(B) + ",L," + std::to_string(c.context_dim) +
                         "], got " + shape_str(cs));
  }
  if (c.pooled_embed_dim > 0) {
    if (!pooled || pooled->shape() != Shape{B, c.pooled_embed_dim}) {
      throw DimensionError("pooled: expected [" + std::to_string(B) + "," + std::to_string(c.pooled_embed_dim) +
                           "]" + (pooled ? ", got " + shape_str(pooled->shape()) : ", got none"));
    }
  }
  if (static_cast<std::int64_t>(timesteps.size()) != B) {
    throw DimensionError("timesteps: expected " + std::to_string(B) + " entries, got " +
                         std::to_string(timesteps.size()));
  }
  for (int t : timesteps) {
    if (t < 0 || t >= options.num_timesteps) {
      throw RangeError("timesteps: value " + std::to_string(t) + " outside [0, " +
                       std::to_string(options.num_timesteps) + ")");
    }
  }

  ForwardResult<T> result;
  if (options.capture_taps) result.taps.emplace();
  Runner<T> r(model, B, result.taps ? &*result.taps : nullptr);

  Var<T> emb = r.linear(Var<T>(timestep_embedding<T>(timesteps, c.base_channels)), "time_embed.linear_1");
  emb = r.linear(ops::silu(emb), "time_embed.linear_2");
  if (c.pooled_embed_dim > 0) {
    Var<T> add = r.linear(Var<T>(*pooled), "add_embed.linear_1");
    emb = ops::add(emb, r.linear(ops::silu(add), "add_embed.linear_2"));
  }
  const Var<T> emb_act = ops::silu(emb);
  const Var<T> ctx(context.reshaped(Shape{B * cs[1], cs[2]}));

  Var<T> h = r.conv(Var<T>(z_t), "conv_in");
  std::vector<Var<T>> skips{h};
  for (int s = 1; s <= S; ++s) {
    const std::string stage = "down." + std::to_string(s);
    for (int j = 1; j <= c.resnets_per_down_stage; ++j) {
      h = r.resnet(h, emb_act, stage + ".resnet." + std::to_string(j));
      r.tap(stage + ".resnet." + std::to_string(j), h);
      if (const int depth = c.layer_depth(Section::down, s, j); depth > 0) {
        h = r.attn(h, ctx, stage + ".attn." + std::to_string(j), depth);
        r.tap(stage + ".attn." + std::to_string(j), h);
      }
      skips.push_back(h);
    }
    if (s < S) {
      h = r.conv(h, stage + ".downsample", 2);
      skips.push_back(h);
    }
  }

  h = r.resnet(h, emb_act, "mid.1.resnet.1");
  r.tap("mid.1.resnet.1", h);
  if (c.mid_block.has_attention) {
    h = r.attn(h, ctx, "mid.1.attn.1", c.mid_block.attention_depth);
    r.tap("mid.1.attn.1", h);
  }
  if (c.mid_block.has_second_resnet) {
    h = r.resnet(h, emb_act, "mid.1.resnet.2");
    r.tap("mid.1.resnet.2", h);
  }
  r.tap("mid.1.out.1", h);

  for (int u = 1; u <= S; ++u) {
    const std::string stage = "up." + std::to_string(u);
    for (int j = 1; j <= c.resnets_per_up_stage; ++j) {
      h = ops::concat_channels(h, skips.back());
      skips.pop_back();
      h = r.resnet(h, emb_act, stage + ".resnet." + std::to_string(j));
      r.tap(stage + ".resnet." + std::to_string(j), h);
      if (const int depth = c.layer_depth(Section::up, u, j); depth > 0) {
        h = r.attn(h, ctx, stage + ".attn." + std::to_string(j), depth);
        r.tap(stage + ".attn." + std::to_string(j), h);
      }
    }
    if (u < S) h = r.conv(ops::upsample_nearest2x(h), stage + ".upsample");
  }
  h = r.conv(ops::silu(r.gnorm(h, "norm_out")), "conv_out");
  result.eps = h;
  return result;
}

template <class T>
std::uint64_t parameter_hash(const BasicUNet<T>& model) {
  Fnv1a h;
  for (const auto& [path, v] : model.parameters()) {
    h.update(path);
    h.update(v.value().data(), static_cast<std::size_t>(v.value().numel()) * sizeof(T));
  }
  return h.digest();
}

template class BasicUNet<float>;
template class BasicUNet<double>;
template BasicUNet<float> build_unet(const UNetConfig&, std::uint64_t);
template BasicUNet<double> build_unet(const UNetConfig&, std::uint64_t);
template ForwardResult<float> forward(const BasicUNet<float>&, const Tensor<float>&, const Tensor<float>&,
                                      const Tensor<float>*, std::span<const int>, const ForwardOptions&);
template ForwardResult<double> forward(const BasicUNet<double>&, const Tensor<double>&, const Tensor<double>&,
                                       const Tensor<double>*, std::span<const int>, const ForwardOptions&);
template Tensor<float> timestep_embedding(std::span<const int>, int);
template Tensor<double> timestep_embedding(std::span<const int>, int);
template std::uint64_t parameter_hash(const BasicUNet<float>&);
template std::uint64_t parameter_hash(const BasicUNet<double>&);

}  // namespace slimunet
