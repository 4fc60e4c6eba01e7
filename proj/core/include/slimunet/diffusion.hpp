#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slimunet/backbone.hpp"
#include "slimunet/random.hpp"

namespace slimunet {

enum class BetaSchedule { linear, scaled_linear };

const char* to_string(BetaSchedule k);
BetaSchedule beta_schedule_from_string(const std::string& s);

/// Discrete DDPM noise schedule; tables are indexed by timestep 0..T-1.
struct DiffusionSchedule {
  int T = 0;
  BetaSchedule kind = BetaSchedule::scaled_linear;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
};

DiffusionSchedule make_schedule(int T, BetaSchedule kind, double beta_start, double beta_end);

/// T=1000, scaled_linear, 0.00085 .. 0.012.
DiffusionSchedule default_schedule();

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, one timestep per sample.
template <class T>
Tensor<T> add_noise(const Tensor<T>& z0, const Tensor<T>& eps, std::span<const int> t, const DiffusionSchedule& s);

/// eps_uncond + g (eps_cond - eps_uncond); g = 1 and g = 0 return the inputs exactly.
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double guidance_scale);

/// Evenly spaced inference timesteps, descending, ending at 0:
/// floor(i T / steps) for i = steps-1 .. 0.
std::vector<int> inference_timesteps(int T, int steps);

/// One ancestral DDPM update from timestep t to prev_t (prev_t = -1 at the
/// final step). Over a strided subsequence the per-step beta is
/// 1 - abar_t / abar_prev, which reduces to beta_t when prev_t = t - 1.
/// Noise with the posterior variance is added unless prev_t < 0.
template <class T>
Tensor<T> ddpm_step(const Tensor<T>& eps_hat, const Tensor<T>& z_t, int t, int prev_t, const DiffusionSchedule& s,
                    Rng& rng);

/// Conditioning for one branch of the sampler.
template <class T>
struct Conditioning {
  Tensor<T> context;               // [B, L, context_dim]
  std::optional<Tensor<T>> pooled;  // [B, pooled_embed_dim]
};

/// Noise predictor: (z_t, conditioning, timesteps) -> eps_hat.
template <class T>
using Denoiser = std::function<Tensor<T>(const Tensor<T>&, const Conditioning<T>&, std::span<const int>)>;

template <class T>
Denoiser<T> model_denoiser(const BasicUNet<T>& model);

struct SampleOptions {
  int steps = 25;
  double guidance_scale = 9.0;
  Shape shape;  // latent shape [B, C, H, W]
};

/// Classifier-free guided ancestral sampling from pure noise. The
/// unconditional branch is skipped when guidance_scale == 1.
template <class T>
Tensor<T> sample(const Denoiser<T>& denoiser, const Conditioning<T>& cond, const Conditioning<T>& uncond,
                 const SampleOptions& options, const DiffusionSchedule& schedule, Rng& rng);

template <class T>
Tensor<T> sample(const BasicUNet<T>& model, const Conditioning<T>& cond, const Conditioning<T>& uncond,
                 const SampleOptions& options, const DiffusionSchedule& schedule, Rng& rng);

}  // namespace slimunet
