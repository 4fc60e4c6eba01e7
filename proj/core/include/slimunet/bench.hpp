#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slimunet/diffusion.hpp"

namespace slimunet {

struct BenchReport {
  std::string model_name;
  int steps = 25;
  double guidance_scale = 9.0;
  int batch = 1;
  int warmup = 2;
  int reps = 5;
  double seconds_per_image = 0.0;       // median rep time / batch
  double iterations_per_second = 0.0;   // steps / median rep time
  std::int64_t params = 0;
  std::int64_t flops_per_step = 0;      // MACs per sampling step per image, both guidance branches
  std::string hardware;
  std::vector<double> rep_seconds;      // raw timed reps, in run order

  friend bool operator==(const BenchReport&, const BenchReport&) = default;
};

nlohmann::json to_json(const BenchReport& r);
BenchReport bench_report_from_json(const nlohmann::json& j);

struct BenchOptions {
  int steps = 25;
  double guidance_scale = 9.0;
  int batch = 1;
  int warmup = 2;
  int reps = 5;
};

/// Monotonic clock in seconds; injectable for tests.
using BenchClock = std::function<double()>;
double steady_seconds();

/// CPU model, logical cores, BLAS threads and compiler.
std::string hardware_descriptor();

double median(std::vector<double> values);

/// Times `reps` end-to-end sample() calls after `warmup` untimed ones.
BenchReport time_inference(const std::string& name, const Denoiser<float>& denoiser, const Conditioning<float>& cond,
                           const Conditioning<float>& uncond, const Shape& latent_shape, const BenchOptions& options,
                           const DiffusionSchedule& schedule, Rng& rng, const BenchClock& clock = steady_seconds);

/// Model overload; fills params and flops_per_step from the config.
BenchReport time_inference(const std::string& name, const UNetModel& model, const Conditioning<float>& cond,
                           const Conditioning<float>& uncond, const Shape& latent_shape, const BenchOptions& options,
                           const DiffusionSchedule& schedule, Rng& rng, const BenchClock& clock = steady_seconds);

struct ComparisonRow {
  std::string model_name;
  double seconds_per_image = 0.0;
  double iterations_per_second = 0.0;
  double speedup = 0.0;                // baseline seconds / model seconds
  double throughput_ratio = 0.0;       // model it/s / baseline it/s
  std::optional<double> param_ratio;   // model params / baseline params, when both known
};

struct Comparison {
  std::string baseline;
  std::vector<ComparisonRow> rows;

  const ComparisonRow& row(const std::string& model_name) const;
  nlohmann::json to_json() const;
  /// Aligned text table: Model, Inference Time (s), Iteration/s, Speedup.
  std::string to_table() const;
};

Comparison compare(const std::vector<BenchReport>& reports, const std::string& baseline);

/// Published A100 latency rows (25 steps, guidance 9, batch 1); SD1.5 was measured at 768x768.
std::vector<BenchReport> published_latency_rows();

}  // namespace slimunet
