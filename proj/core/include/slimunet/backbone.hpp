#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "slimunet/autograd.hpp"
#include "slimunet/config.hpp"

namespace slimunet {

/// Canonical tap path `{down|mid|up}.{stage}.{resnet|attn|out}.{position}`,
/// 1-based. The string is the identity.
using TapKey = std::string;

/// Captured intermediate features ordered by key.
template <class T>
using FeatureTapRegistry = std::map<TapKey, Var<T>>;

enum class InitKind { uniform, ones, zeros };

struct ParamSpec {
  std::string path;
  Shape shape;
  InitKind init = InitKind::uniform;
  double bound = 0.0;  // half-width for uniform init
};

/// Ordered list of every tensor the model for `config` owns.
std::vector<ParamSpec> parameter_layout(const UNetConfig& config);

/// Tap keys in registry order.
std::vector<TapKey> describe_taps(const UNetConfig& config);

/// Feature shape of every tap for a batch of `batch` latents of size height x width.
std::map<TapKey, Shape> predict_tap_shapes(const UNetConfig& config, std::int64_t batch, std::int64_t height,
                                           std::int64_t width);

/// Conditional U-Net denoiser. Parameters are leaf variables addressed by
/// canonical path; the model is move-only, use clone() for a deep copy.
template <class T>
class BasicUNet {
 public:
  /// Adopts `tensors`, which must match parameter_layout(config) exactly.
  BasicUNet(UNetConfig config, std::map<std::string, Tensor<T>> tensors);

  BasicUNet(BasicUNet&&) noexcept = default;
  BasicUNet& operator=(BasicUNet&&) noexcept = default;
  BasicUNet(const BasicUNet&) = delete;
  BasicUNet& operator=(const BasicUNet&) = delete;

  BasicUNet clone() const;

  const UNetConfig& config() const noexcept { return config_; }
  const std::map<std::string, Var<T>>& parameters() const noexcept { return params_; }
  const Var<T>& parameter(const std::string& path) const;
  Tensor<T>& mutable_tensor(const std::string& path);
  std::int64_t num_params() const;

  void set_requires_grad(bool on);
  void zero_grad();

  /// Transformer-block provenance: block prefix in this model -> prefix in the
  /// original (unpruned) ancestor, e.g. "down.3.attn.1.blocks.4" ->
  /// "down.3.attn.1.blocks.6". Identity entries are omitted.
  std::map<std::string, std::string> provenance;

 private:
  UNetConfig config_;
  std::map<std::string, Var<T>> params_;
};

using UNetModel = BasicUNet<float>;

/// Deterministic initialization: identical (config, seed) gives bitwise equal weights.
template <class T>
BasicUNet<T> build_unet(const UNetConfig& config, std::uint64_t seed);

template <class T>
struct ForwardResult {
  Var<T> eps;
  std::optional<FeatureTapRegistry<T>> taps;
};

struct ForwardOptions {
  bool capture_taps = false;
  int num_timesteps = 1000;  // timesteps must lie in [0, num_timesteps)
};

/// Predicts the noise residual for z_t[B,in,H,W] given context[B,L,context_dim],
/// optional pooled[B,pooled_embed_dim] and one timestep per sample.
template <class T>
ForwardResult<T> forward(const BasicUNet<T>& model, const Tensor<T>& z_t, const Tensor<T>& context,
                         std::type_identity_t<const Tensor<T>*> pooled, std::span<const int> timesteps,
                         const ForwardOptions& options = {});

/// Sinusoidal timestep features, [B, dim], cosine half first.
template <class T>
Tensor<T> timestep_embedding(std::span<const int> timesteps, int dim);

/// Hash of every parameter path and byte, for immutability checks.
template <class T>
std::uint64_t parameter_hash(const BasicUNet<T>& model);

}  // namespace slimunet
