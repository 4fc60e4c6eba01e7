#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slimunet/diffusion.hpp"
#include "slimunet/distill.hpp"
#include "slimunet/pruning.hpp"
#include "slimunet/trainer.hpp"

namespace slimunet {

inline constexpr const char* kOutputRootEnv = "SLIMUNET_OUT";

struct CorpusSpec {
  int n = 960;
  std::uint64_t seed = 7;
  std::uint64_t split_seed = 3;
  std::uint64_t encoder_seed = 11;
  std::optional<std::string> dir;         // load instead of generating when set
  std::optional<std::string> background;  // keep only this background word
};

struct DiffusionSpec {
  int timesteps = 1000;
  BetaSchedule beta_schedule = BetaSchedule::scaled_linear;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  int inference_steps = 25;
  double guidance_scale = 9.0;

  DiffusionSchedule schedule() const { return make_schedule(timesteps, beta_schedule, beta_start, beta_end); }
};

struct TeacherRef {
  std::string id;
  std::string checkpoint;
  int start_step = 0;
};

/// File-level run description with sections
/// {model, plan, diffusion, distill, hyper, teachers, corpus} plus the
/// optional progressive_fractions list.
struct RunConfig {
  UNetConfig model = toy_config();
  std::optional<PruningPlan> plan;
  std::optional<double> plan_fraction;  // plan = progressive_plans(model, {f}) when set
  DiffusionSpec diffusion;
  DistillLossWeights distill;
  TrainHyper hyper;
  std::vector<TeacherRef> teachers;
  CorpusSpec corpus;
  std::vector<double> progressive_fractions{0.2, 0.4, 0.5};

  /// Explicit plan, derived progressive plan, or the empty plan.
  PruningPlan resolved_plan() const;
};

/// Accepts a run config, a bare model config, or a run manifest (whose
/// config snapshot is used; the per-invocation "checkpoints" and "prompts"
/// lists a sample manifest records are ignored). "model" may be "toy", "sdxl_ref" or an object;
/// "plan" may be a canonical name, a plan object or {"progressive_fraction": f}.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& rc);
RunConfig load_run_config(const std::filesystem::path& path);

/// Corpus for a run, generated or loaded, with the background filter applied.
std::vector<CaptionedImage> load_run_corpus(const CorpusSpec& spec);
TrainingData load_training_data(const RunConfig& rc);

/// Reproducibility record written into every output directory.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  nlohmann::json config_snapshot;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::vector<std::string> artifacts;
  std::string tool_version;
  std::string hardware;
};

nlohmann::json to_json(const RunManifest& m);
void write_manifest(const std::filesystem::path& dir, const RunManifest& m);

const char* tool_version();

/// Runs one command line (args exclude the program name). Exit codes: 0
/// success, 1 validation or usage error, 2 runtime failure.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

}  // namespace slimunet
