#include "slimunet/diffusion.hpp"

#include <cmath>

#include "slimunet/error.hpp"

namespace slimunet {

const char* to_string(BetaSchedule k) { return k == BetaSchedule::linear ? "linear" : "scaled_linear"; }

BetaSchedule beta_schedule_from_string(const std::string& s) {
  if (s == "linear") return BetaSchedule::linear;
  if (s == "scaled_linear") return BetaSchedule::scaled_linear;
  throw ConfigError("unknown beta schedule '" + s + "'", {"beta_schedule: expected linear or scaled_linear"});
}

DiffusionSchedule make_schedule(int T, BetaSchedule kind, double beta_start, double beta_end) {
  std::vector<std::string> v;
  if (T < 1) v.push_back("timesteps: must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    v.push_back("beta_start/beta_end: need 0 < beta_start <= beta_end < 1");
  }
  if (!v.empty()) throw ConfigError("invalid diffusion schedule", std::move(v));
  DiffusionSchedule s{T, kind, beta_start, beta_end, {}, {}, {}};
  s.betas.resize(T);
  for (int t = 0; t < T; ++t) {
    const double f = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
    if (kind == BetaSchedule::linear) {
      s.betas[t] = beta_start + f * (beta_end - beta_start);
    } else {
      const double r = std::sqrt(beta_start) + f * (std::sqrt(beta_end) - std::sqrt(beta_start));
      s.betas[t] = r * r;
    }
  }
  double abar = 1.0;
  for (int t = 0; t < T; ++t) {
    s.alphas.push_back(1.0 - s.betas[t]);
    abar *= s.alphas[t];
    s.alpha_bars.push_back(abar);
  }
  return s;
}

DiffusionSchedule default_schedule() { return make_schedule(1000, BetaSchedule::scaled_linear, 0.00085, 0.012); }

template <class T>
Tensor<T> add_noise(const Tensor<T>& z0, const Tensor<T>& eps, std::span<const int> t, const DiffusionSchedule& s) {
  if (z0.shape() != eps.shape()) {
    throw DimensionError("add_noise: z0 " + shape_str(z0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  if (z0.rank() < 1 || static_cast<std::size_t>(z0.dim(0)) != t.size()) {
    throw DimensionError("add_noise: need one timestep per sample");
  }
  Tensor<T> out(z0.shape());
  const std::int64_t per = z0.numel() / z0.dim(0);
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (t[b] < 0 || t[b] >= s.T) throw RangeError("add_noise: timestep " + std::to_string(t[b]) + " outside [0, T)");
    const double a = std::sqrt(s.alpha_bars[t[b]]);
    const double n = std::sqrt(1.0 - s.alpha_bars[t[b]]);
    for (std::int64_t i = b * per; i < static_cast<std::int64_t>(b + 1) * per; ++i) {
      out[i] = static_cast<T>(a * z0[i] + n * eps[i]);
    }
  }
  return out;
}

template <class T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double g) {
  if (eps_cond.shape() != eps_uncond.shape()) {
    throw DimensionError("cfg_combine: " + shape_str(eps_cond.shape()) + " vs " + shape_str(eps_uncond.shape()));
  }
  if (g == 1.0) return eps_cond;
  if (g == 0.0) return eps_uncond;
  Tensor<T> out(eps_cond.shape());
  const T gs = static_cast<T>(g);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = eps_uncond[i] + gs * (eps_cond[i] - eps_uncond[i]);
  return out;
}

std::vector<int> inference_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw RangeError("inference steps must lie in [1, " + std::to_string(T) + "]");
  std::vector<int> ts;
  for (int i = steps - 1; i >= 0; --i) {
    ts.push_back(static_cast<int>(static_cast<std::int64_t>(i) * T / steps));
  }
  return ts;
}

template <class T>
Tensor<T> ddpm_step(const Tensor<T>& eps_hat, const Tensor<T>& z_t, int t, int prev_t, const DiffusionSchedule& s,
                    Rng& rng) {
  if (eps_hat.shape() != z_t.shape()) {
    throw DimensionError("ddpm_step: eps " + shape_str(eps_hat.shape()) + " vs z_t " + shape_str(z_t.shape()));
  }
  if (t < 0 || t >= s.T || prev_t < -1 || prev_t >= t) {
    throw RangeError("ddpm_step: need 0 <= t < T and -1 <= prev_t < t, got t=" + std::to_string(t) +
                     " prev_t=" + std::to_string(prev_t));
  }
  const double abar = s.alpha_bars[t];
  const double abar_prev = prev_t >= 0 ? s.alpha_bars[prev_t] : 1.0;
  const double alpha = abar / abar_prev;
  const double beta = 1.0 - alpha;
  const double c_eps = beta / std::sqrt(1.0 - abar);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  Tensor<T> out(z_t.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<T>((z_t[i] - c_eps * eps_hat[i]) * inv_sqrt_alpha);
  }
  if (prev_t >= 0) {
    const double sigma = std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar));
    const Tensor<T> noise = randn<T>(z_t.shape(), rng);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(out[i] + sigma * noise[i]);
  }
  return out;
}

template <class T>
Denoiser<T> model_denoiser(const BasicUNet<T>& model) {
  return [&model](const Tensor<T>& z, const Conditioning<T>& c, std::span<const int> t) {
    NoGradGuard guard;
    return forward(model, z, c.context, c.pooled ? &*c.pooled : nullptr, t).eps.value();
  };
}

template <class T>
Tensor<T> sample(const Denoiser<T>& denoiser, const Conditioning<T>& cond, const Conditioning<T>& uncond,
                 const SampleOptions& o, const DiffusionSchedule& schedule, Rng& rng) {
  if (o.shape.size() != 4) throw DimensionError("sample: latent shape must be [B, C, H, W]");
  const auto ts = inference_timesteps(schedule.T, o.steps);
  Tensor<T> z = randn<T>(o.shape, rng);
  std::vector<int> tb(static_cast<std::size_t>(o.shape[0]));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    std::fill(tb.begin(), tb.end(), ts[i]);
    Tensor<T> eps = denoiser(z, cond, tb);
    if (o.guidance_scale != 1.0) eps = cfg_combine(eps, denoiser(z, uncond, tb), o.guidance_scale);
    const int prev = i + 1 < ts.size() ? ts[i + 1] : -1;
    z = ddpm_step(eps, z, ts[i], prev, schedule, rng);
  }
  return z;
}

template <class T>
Tensor<T> sample(const BasicUNet<T>& model, const Conditioning<T>& cond, const Conditioning<T>& uncond,
                 const SampleOptions& o, const DiffusionSchedule& schedule, Rng& rng) {
  return sample(model_denoiser(model), cond, uncond, o, schedule, rng);
}

#define SLIMUNET_INSTANTIATE_DIFFUSION(T)                                                                        \
  template Tensor<T> add_noise(const Tensor<T>&, const Tensor<T>&, std::span<const int>, const DiffusionSchedule&); \
  template Tensor<T> cfg_combine(const Tensor<T>&, const Tensor<T>&, double);                                    \
  template Tensor<T> ddpm_step(const Tensor<T>&, const Tensor<T>&, int, int, const DiffusionSchedule&, Rng&);     \
  template Denoiser<T> model_denoiser(const BasicUNet<T>&);                                                      \
  template Tensor<T> sample(const Denoiser<T>&, const Conditioning<T>&, const Conditioning<T>&,                  \
                            const SampleOptions&, const DiffusionSchedule&, Rng&);                               \
  template Tensor<T> sample(const BasicUNet<T>&, const Conditioning<T>&, const Conditioning<T>&,                 \
                            const SampleOptions&, const DiffusionSchedule&, Rng&);

SLIMUNET_INSTANTIATE_DIFFUSION(float)
SLIMUNET_INSTANTIATE_DIFFUSION(double)

}  // namespace slimunet
