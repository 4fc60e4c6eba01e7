#include "slimunet/bench.hpp"

#include <cblas.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "slimunet/error.hpp"
#include "slimunet/pruning.hpp"

namespace slimunet {

nlohmann::json to_json(const BenchReport& r) {
  return {{"model_name", r.model_name},
          {"steps", r.steps},
          {"guidance_scale", r.guidance_scale},
          {"batch", r.batch},
          {"warmup", r.warmup},
          {"reps", r.reps},
          {"seconds_per_image", r.seconds_per_image},
          {"iterations_per_second", r.iterations_per_second},
          {"params", r.params},
          {"flops_per_step", r.flops_per_step},
          {"hardware", r.hardware},
          {"rep_seconds", r.rep_seconds}};
}

BenchReport bench_report_from_json(const nlohmann::json& j) {
  try {
    BenchReport r;
    r.model_name = j.at("model_name");
    r.steps = j.at("steps");
    r.guidance_scale = j.at("guidance_scale");
    r.batch = j.at("batch");
    r.warmup = j.at("warmup");
    r.reps = j.at("reps");
    r.seconds_per_image = j.at("seconds_per_image");
    r.iterations_per_second = j.at("iterations_per_second");
    r.params = j.value("params", std::int64_t{0});
    r.flops_per_step = j.value("flops_per_step", std::int64_t{0});
    r.hardware = j.value("hardware", std::string{});
    r.rep_seconds = j.value("rep_seconds", std::vector<double>{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed bench report", {std::string("report: ") + e.what()});
  }
}

double steady_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::string hardware_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      cpu = line.substr(line.find(':') + 2);
      break;
    }
  }
  std::ostringstream s;
  s << cpu << "; " << std::thread::hardware_concurrency() << " logical cores; BLAS threads "
    << openblas_get_num_threads() << "; " << "compiler " << __VERSION__;
  return s.str();
}

double median(std::vector<double> v) {
  if (v.empty()) throw RangeError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

BenchReport time_inference(const std::string& name, const Denoiser<float>& denoiser, const Conditioning<float>& cond,
                           const Conditioning<float>& uncond, const Shape& latent_shape, const BenchOptions& o,
                           const DiffusionSchedule& schedule, Rng& rng, const BenchClock& clock) {
  if (o.warmup < 1) throw RangeError("bench: warmup must be >= 1");
  if (o.reps < 3) throw RangeError("bench: reps must be >= 3");
  if (o.batch < 1 || latent_shape.empty() || latent_shape[0] != o.batch) {
    throw DimensionError("bench: latent batch must equal the configured batch");
  }
  const SampleOptions so{o.steps, o.guidance_scale, latent_shape};
  for (int i = 0; i < o.warmup; ++i) (void)sample(denoiser, cond, uncond, so, schedule, rng);
  BenchReport r;
  r.model_name = name;
  r.steps = o.steps;
  r.guidance_scale = o.guidance_scale;
  r.batch = o.batch;
  r.warmup = o.warmup;
  r.reps = o.reps;
  for (int i = 0; i < o.reps; ++i) {
    const double t0 = clock();
    (void)sample(denoiser, cond, uncond, so, schedule, rng);
    r.rep_seconds.push_back(clock() - t0);
  }
  const double med = median(r.rep_seconds);
  r.seconds_per_image = med / o.batch;
  r.iterations_per_second = med > 0.0 ? o.steps / med : 0.0;
  r.hardware = hardware_descriptor();
  return r;
}

BenchReport time_inference(const std::string& name, const UNetModel& model, const Conditioning<float>& cond,
                           const Conditioning<float>& uncond, const Shape& latent_shape, const BenchOptions& o,
                           const DiffusionSchedule& schedule, Rng& rng, const BenchClock& clock) {
  BenchReport r = time_inference(name, model_denoiser(model), cond, uncond, latent_shape, o, schedule, rng, clock);
  r.params = count_params(model.config());
  const int tokens = static_cast<int>(cond.context.dim(1));
  const std::int64_t per_eval = estimate_flops(model.config(), static_cast<int>(latent_shape[2]),
                                               static_cast<int>(latent_shape[3]), tokens);
  r.flops_per_step = per_eval * (o.guidance_scale == 1.0 ? 1 : 2);
  return r;
}

const ComparisonRow& Comparison::row(const std::string& model_name) const {
  for (const auto& r : rows) {
    if (r.model_name == model_name) return r;
  }
  throw RangeError("no comparison row for '" + model_name + "'");
}

nlohmann::json Comparison::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    rs.push_back({{"model_name", r.model_name},
                  {"seconds_per_image", r.seconds_per_image},
                  {"iterations_per_second", r.iterations_per_second},
                  {"speedup", r.speedup},
                  {"throughput_ratio", r.throughput_ratio},
                  {"param_ratio", r.param_ratio ? nlohmann::json(*r.param_ratio) : nlohmann::json(nullptr)}});
  }
  return {{"baseline", baseline}, {"rows", rs}};
}

std::string Comparison::to_table() const {
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, r.model_name.size());
  std::ostringstream s;
  s << std::left << std::setw(static_cast<int>(w)) << "Model" << "  " << std::right << std::setw(18)
    << "Inference Time (s)" << "  " << std::setw(11) << "Iteration/s" << "  " << std::setw(8) << "Speedup" << '\n';
  for (const auto& r : rows) {
    s << std::left << std::setw(static_cast<int>(w)) << r.model_name << "  " << std::right << std::fixed
      << std::setprecision(3) << std::setw(18) << r.seconds_per_image << "  " << std::setprecision(2)
      << std::setw(11) << r.iterations_per_second << "  " << std::setw(7) << r.speedup << "x\n";
  }
  return s.str();
}

Comparison compare(const std::vector<BenchReport>& reports, const std::string& baseline) {
  auto it = std::find_if(reports.begin(), reports.end(), [&](const BenchReport& r) { return r.model_name == baseline; });
  if (it == reports.end()) throw ConfigError("baseline missing", {"baseline: no report named '" + baseline + "'"});
  const BenchReport& b = *it;
  Comparison c{baseline, {}};
  for (const auto& r : reports) {
    ComparisonRow row;
    row.model_name = r.model_name;
    row.seconds_per_image = r.seconds_per_image;
    row.iterations_per_second = r.iterations_per_second;
    row.speedup = b.seconds_per_image / r.seconds_per_image;
    row.throughput_ratio = r.iterations_per_second / b.iterations_per_second;
    if (r.params > 0 && b.params > 0) row.param_ratio = static_cast<double>(r.params) / static_cast<double>(b.params);
    c.rows.push_back(row);
  }
  return c;
}

std::vector<BenchReport> published_latency_rows() {
  auto row = [](std::string name, double s, double its, std::int64_t params) {
    BenchReport r;
    r.model_name = std::move(name);
    r.seconds_per_image = s;
    r.iterations_per_second = its;
    r.params = params;
    r.hardware = "A100 (published)";
    return r;
  };
  const UNetConfig ref = reference_sdxl_config();
  return {row("SD1.5", 1.699, 16.79, 0),
          row("SDXL", 3.135, 8.80, count_params(ref)),
          row("SSD-1B", 2.169, 13.37, count_params(apply_plan(ref, canonical_plan(CanonicalPlan::SSD_1B)))),
          row("Vega", 1.616, 18.95, count_params(apply_plan(ref, canonical_plan(CanonicalPlan::VEGA))))};
}

}  // namespace slimunet
