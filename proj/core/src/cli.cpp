#include "slimunet/cli.hpp"

#include <CLI11.hpp>
#include <cblas.h>

#include <cstdlib>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include "slimunet/bench.hpp"
#include "slimunet/checkpoint.hpp"
#include "slimunet/error.hpp"
#include "slimunet/render.hpp"

#ifndef SLIMUNET_VERSION
#define SLIMUNET_VERSION "0.0.0"
#endif

namespace slimunet {
namespace fs = std::filesystem;

const char* tool_version() { return SLIMUNET_VERSION; }

// ---------------------------------------------------------------- run config

PruningPlan RunConfig::resolved_plan() const {
  if (plan) return *plan;
  if (plan_fraction) return progressive_plans(model, {*plan_fraction}).front();
  return PruningPlan{"empty", {}};
}

namespace {

UNetConfig model_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "toy") return toy_config();
    if (name == "sdxl_ref") return reference_sdxl_config();
    throw ConfigError("unknown model preset '" + name + "'", {"model: expected toy, sdxl_ref or an object"});
  }
  return config_from_json(j);
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& section) {
  std::vector<std::string> errors;
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) errors.push_back(section + ": unknown key '" + k + "'");
  }
  if (!errors.empty()) throw ConfigError("invalid run config", std::move(errors));
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j_in) {
  nlohmann::json j = j_in;
  if (j_in.contains("config_snapshot")) {
    j = j_in.at("config_snapshot");
    j.erase("checkpoints");
    j.erase("prompts");
  }
  RunConfig rc;
  if (!j.contains("model")) {
    rc.model = model_from_json(j);  // bare model config
    return rc;
  }
  reject_unknown(j, {"model", "plan", "diffusion", "distill", "hyper", "teachers", "corpus", "progressive_fractions"},
                 "run config");
  try {
    rc.model = model_from_json(j.at("model"));
    if (j.contains("plan") && !j.at("plan").is_null()) {
      const auto& p = j.at("plan");
      if (p.is_string()) {
        rc.plan = canonical_plan(p.get<std::string>());
      } else if (p.contains("progressive_fraction")) {
        rc.plan_fraction = p.at("progressive_fraction").get<double>();
      } else {
        rc.plan = plan_from_json(p);
      }
    }
    if (j.contains("diffusion")) {
      const auto& d = j.at("diffusion");
      reject_unknown(d, {"timesteps", "beta_schedule", "beta_start", "beta_end", "inference_steps", "guidance_scale"},
                     "diffusion");
      read_opt(d, "timesteps", rc.diffusion.timesteps);
      if (d.contains("beta_schedule")) rc.diffusion.beta_schedule = beta_schedule_from_string(d.at("beta_schedule"));
      read_opt(d, "beta_start", rc.diffusion.beta_start);
      read_opt(d, "beta_end", rc.diffusion.beta_end);
      read_opt(d, "inference_steps", rc.diffusion.inference_steps);
      read_opt(d, "guidance_scale", rc.diffusion.guidance_scale);
    }
    if (j.contains("distill")) {
      const auto& d = j.at("distill");
      reject_unknown(d, {"lambda_out_kd", "lambda_feat_kd"}, "distill");
      read_opt(d, "lambda_out_kd", rc.distill.lambda_out_kd);
      read_opt(d, "lambda_feat_kd", rc.distill.lambda_feat_kd);
    }
    read_opt(j, "progressive_fractions", rc.progressive_fractions);
    if (j.contains("hyper")) rc.hyper = hyper_from_json(j.at("hyper"));
    if (j.contains("teachers")) {
      for (const auto& t : j.at("teachers")) {
        reject_unknown(t, {"id", "checkpoint", "start_step"}, "teachers");
        TeacherRef ref;
        ref.checkpoint = t.at("checkpoint");
        ref.id = t.value("id", ref.checkpoint);
        ref.start_step = t.value("start_step", 0);
        rc.teachers.push_back(ref);
      }
    }
    if (j.contains("corpus")) {
      const auto& c = j.at("corpus");
      reject_unknown(c, {"n", "seed", "split_seed", "encoder_seed", "dir", "background"}, "corpus");
      read_opt(c, "n", rc.corpus.n);
      read_opt(c, "seed", rc.corpus.seed);
      read_opt(c, "split_seed", rc.corpus.split_seed);
      read_opt(c, "encoder_seed", rc.corpus.encoder_seed);
      if (c.contains("dir") && !c.at("dir").is_null()) rc.corpus.dir = c.at("dir").get<std::string>();
      if (c.contains("background") && !c.at("background").is_null()) {
        rc.corpus.background = c.at("background").get<std::string>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid run config", {std::string("run config: ") + e.what()});
  }
  (void)rc.diffusion.schedule();  // validates the schedule fields
  return rc;
}

nlohmann::json to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["model"] = to_json(rc.model);
  if (rc.plan) {
    j["plan"] = to_json(*rc.plan);
  } else if (rc.plan_fraction) {
    j["plan"] = {{"progressive_fraction", *rc.plan_fraction}};
  } else {
    j["plan"] = nullptr;
  }
  j["diffusion"] = {{"timesteps", rc.diffusion.timesteps},
                    {"beta_schedule", to_string(rc.diffusion.beta_schedule)},
                    {"beta_start", rc.diffusion.beta_start},
                    {"beta_end", rc.diffusion.beta_end},
                    {"inference_steps", rc.diffusion.inference_steps},
                    {"guidance_scale", rc.diffusion.guidance_scale}};
  j["distill"] = {{"lambda_out_kd", rc.distill.lambda_out_kd}, {"lambda_feat_kd", rc.distill.lambda_feat_kd}};
  j["hyper"] = to_json(rc.hyper);
  j["progressive_fractions"] = rc.progressive_fractions;
  j["teachers"] = nlohmann::json::array();
  for (const auto& t : rc.teachers) {
    j["teachers"].push_back({{"id", t.id}, {"checkpoint", t.checkpoint}, {"start_step", t.start_step}});
  }
  j["corpus"] = {{"n", rc.corpus.n},
                 {"seed", rc.corpus.seed},
                 {"split_seed", rc.corpus.split_seed},
                 {"encoder_seed", rc.corpus.encoder_seed},
                 {"dir", rc.corpus.dir ? nlohmann::json(*rc.corpus.dir) : nlohmann::json(nullptr)},
                 {"background", rc.corpus.background ? nlohmann::json(*rc.corpus.background) : nlohmann::json(nullptr)}};
  return j;
}

RunConfig load_run_config(const fs::path& path) { return run_config_from_json(read_json_file(path)); }

std::vector<CaptionedImage> load_run_corpus(const CorpusSpec& spec) {
  auto corpus = spec.dir && fs::exists(fs::path(*spec.dir) / "manifest.json") ? load_corpus(*spec.dir)
                                                                              : generate_toy_corpus(spec.n, spec.seed);
  if (spec.background) {
    const int bg = Vocabulary::id(*spec.background) - Vocabulary::id("white");
    if (bg < 0 || bg >= kBackgrounds) {
      throw ConfigError("invalid corpus filter", {"corpus.background: '" + *spec.background + "' is not a background"});
    }
    std::erase_if(corpus, [bg](const CaptionedImage& c) { return c.attributes.background != bg; });
    if (corpus.empty()) throw ConfigError("invalid corpus filter", {"corpus.background: no matching images"});
  }
  return corpus;
}

TrainingData load_training_data(const RunConfig& rc) {
  auto encoders = std::make_shared<const FrozenEncoders>(rc.model.context_dim, rc.corpus.encoder_seed);
  return prepare_training_data(load_run_corpus(rc.corpus), std::move(encoders), rc.corpus.split_seed);
}

nlohmann::json to_json(const RunManifest& m) {
  return {{"command", m.command},
          {"argv", m.argv},
          {"config_path", m.config_path},
          {"config_snapshot", m.config_snapshot},
          {"seed", m.seed},
          {"deterministic", m.deterministic},
          {"artifacts", m.artifacts},
          {"tool_version", m.tool_version},
          {"hardware", m.hardware}};
}

void write_manifest(const fs::path& dir, const RunManifest& m) {
  fs::create_directories(dir);
  write_json_file(dir / "manifest.json", to_json(m));
}

// ---------------------------------------------------------------- dispatch

namespace {

/// Raised for bad flag combinations detected after parsing.
struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
};

struct Context {
  std::vector<std::string> args;
  std::ostream& out;
  std::ostream& err;
};

void add_common(CLI::App* sub, Common& c, bool with_out) {
  sub->add_option("--config", c.config, "Run or model config JSON (a run manifest also works)");
  sub->add_option("--seed", c.seed, "Seed overriding the config's hyper.seed");
  sub->add_flag("--deterministic", c.deterministic, "Pin BLAS to one thread for bitwise reproducibility");
  if (with_out) sub->add_option("--out", c.out, "Output directory (default: $SLIMUNET_OUT/<command>)");
}

fs::path output_dir(const Common& c, const std::string& command) {
  if (!c.out.empty()) return c.out;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / command;
  return fs::path("runs") / command;
}

RunConfig resolve_config(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) rc.hyper.seed = *c.seed;
  return rc;
}

void apply_mode(const Common& c) {
  if (c.deterministic) openblas_set_num_threads(1);
}

RunManifest manifest_for(const std::string& command, const Context& ctx, const Common& c, const RunConfig& rc) {
  RunManifest m;
  m.command = command;
  m.argv = ctx.args;
  m.config_path = c.config;
  m.config_snapshot = to_json(rc);
  m.seed = rc.hyper.seed;
  m.deterministic = c.deterministic;
  m.tool_version = tool_version();
  m.hardware = hardware_descriptor();
  return m;
}

PruningPlan load_plan_arg(const std::string& arg) {
  if (fs::exists(arg)) return plan_from_json(read_json_file(arg));
  return canonical_plan(arg);
}

std::string depth_table(const UNetConfig& c) {
  std::ostringstream s;
  for (Section sec : {Section::down, Section::up}) {
    for (int st = 1; st <= c.stages(); ++st) {
      s << to_string(sec) << '.' << st << " attention depths:";
      for (int j = 1; j <= c.attention_layers(sec); ++j) s << ' ' << c.layer_depth(sec, st, j);
      s << '\n';
    }
  }
  s << "mid: attention " << (c.mid_block.has_attention ? std::to_string(c.mid_block.attention_depth) : "removed")
    << ", second resnet " << (c.mid_block.has_second_resnet ? "kept" : "removed") << '\n';
  return s.str();
}

void require_valid(const UNetConfig& c, const PruningPlan& plan) {
  if (auto v = validate_plan(c, plan); !v.empty()) throw ConfigError("plan '" + plan.name + "' is invalid", std::move(v));
}

TeacherSchedule load_teachers(const std::vector<TeacherRef>& refs) {
  if (refs.empty()) throw UsageError("no teachers given (use --teacher or the config's teachers section)");
  TeacherSchedule s;
  for (const auto& r : refs) {
    auto ck = load_checkpoint(r.checkpoint);
    s.entries.push_back({r.id, std::make_shared<const UNetModel>(std::move(ck.model)), r.start_step});
  }
  return s;
}

void print_breakdown(std::ostream& out, const LossBreakdown& b) {
  out << nlohmann::json{{"task", b.task}, {"out_kd", b.out_kd}, {"feat_kd", b.feat_kd}, {"total", b.total}, {"per_tap", b.per_tap}}
             .dump(2)
      << '\n';
}

Conditioning<float> conditioning_for(const FrozenEncoders& enc, const UNetConfig& config,
                                     const std::vector<std::vector<int>>& captions) {
  Conditioning<float> c{enc.encode_text_batch(captions), std::nullopt};
  if (config.pooled_embed_dim > 0) c.pooled = pooled_from_context(c.context, config.pooled_embed_dim);
  return c;
}

/// Teacher overrides shared by distill and progressive.
struct TeacherFlags {
  std::vector<std::string> paths;
  std::vector<int> swap_at;
};

void apply_teacher_flags(RunConfig& rc, const TeacherFlags& f) {
  if (f.paths.empty()) return;
  if (f.swap_at.size() + 1 != f.paths.size()) {
    throw UsageError("--swap-at must be given once for every --teacher after the first");
  }
  rc.teachers.clear();
  for (std::size_t i = 0; i < f.paths.size(); ++i) {
    rc.teachers.push_back({fs::path(f.paths[i]).parent_path().filename().string() + "#" + std::to_string(i + 1),
                           f.paths[i], i == 0 ? 0 : f.swap_at[i - 1]});
  }
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Context ctx{args, out, err};
  CLI::App app{"slimunet: prune, distill and benchmark conditional U-Net denoisers", "slimunet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tool_version());

  // plan show | validate
  auto* plan_cmd = app.add_subcommand("plan", "Inspect or validate pruning plans");
  plan_cmd->require_subcommand(1);
  Common plan_show_c, plan_val_c;
  std::string plan_show_arg, plan_val_arg;
  std::optional<double> plan_show_fraction;
  auto* plan_show = plan_cmd->add_subcommand("show", "Print a plan and its effect on a config");
  plan_show->add_option("--plan", plan_show_arg, "Plan JSON file or canonical name (SSD_1B, VEGA)");
  plan_show->add_option("--progressive", plan_show_fraction, "Derive the heuristic plan removing this fraction");
  add_common(plan_show, plan_show_c, false);
  auto* plan_validate = plan_cmd->add_subcommand("validate", "Check a plan against a config");
  plan_validate->add_option("--plan", plan_val_arg, "Plan JSON file or canonical name")->required();
  add_common(plan_validate, plan_val_c, false);

  // prune
  Common prune_c;
  std::string prune_plan, prune_teacher;
  auto* prune = app.add_subcommand("prune", "Apply a plan to a config, optionally inheriting teacher weights");
  prune->add_option("--plan", prune_plan, "Plan JSON file or canonical name")->required();
  prune->add_option("--teacher", prune_teacher, "Teacher checkpoint directory to inherit weights from");
  add_common(prune, prune_c, true);

  // count-params / estimate-flops
  Common count_c, flops_c;
  std::string count_plan, flops_plan;
  int flops_h = 128, flops_w = 128, flops_tokens = 77;
  auto* count = app.add_subcommand("count-params", "Exact parameter count without allocating weights");
  count->add_option("--plan", count_plan, "Plan JSON file or canonical name");
  add_common(count, count_c, false);
  auto* flops = app.add_subcommand("estimate-flops", "Analytic multiply-accumulate count of one forward pass");
  flops->add_option("--plan", flops_plan, "Plan JSON file or canonical name");
  flops->add_option("--height", flops_h, "Latent height")->capture_default_str();
  flops->add_option("--width", flops_w, "Latent width")->capture_default_str();
  flops->add_option("--context-tokens", flops_tokens, "Text context length")->capture_default_str();
  add_common(flops, flops_c, false);

  // gen-corpus
  Common corpus_c;
  int corpus_n = 960;
  auto* gen = app.add_subcommand("gen-corpus", "Render the procedural captioned-shape corpus");
  gen->add_option("--n", corpus_n, "Number of images")->capture_default_str();
  add_common(gen, corpus_c, true);

  // training commands
  struct TrainFlags {
    std::optional<int> steps, batch;
    std::optional<double> lr;
  };
  auto add_train_flags = [](CLI::App* sub, TrainFlags& f) {
    sub->add_option("--steps", f.steps, "Override hyper.max_steps");
    sub->add_option("--batch", f.batch, "Override hyper.batch_size");
    sub->add_option("--lr", f.lr, "Override hyper.learning_rate");
  };
  auto apply_train_flags = [](RunConfig& rc, const TrainFlags& f) {
    if (f.steps) rc.hyper.max_steps = *f.steps;
    if (f.batch) rc.hyper.batch_size = *f.batch;
    if (f.lr) rc.hyper.learning_rate = *f.lr;
    if (auto v = validate_hyper(rc.hyper); !v.empty()) throw ConfigError("invalid hyperparameters", std::move(v));
  };

  Common teach_c;
  TrainFlags teach_f;
  auto* teach = app.add_subcommand("train-teacher", "Train a teacher from scratch on the toy corpus");
  add_train_flags(teach, teach_f);
  add_common(teach, teach_c, true);

  Common ft_c;
  TrainFlags ft_f;
  std::string ft_teacher, ft_background = "black";
  auto* ft = app.add_subcommand("finetune-teacher", "Continue a teacher on a background-filtered subset");
  ft->add_option("--teacher", ft_teacher, "Base teacher checkpoint directory")->required();
  ft->add_option("--background", ft_background, "Background word selecting the subset")->capture_default_str();
  add_train_flags(ft, ft_f);
  add_common(ft, ft_c, true);

  Common dist_c;
  TrainFlags dist_f;
  TeacherFlags dist_t;
  std::string dist_plan;
  std::optional<double> dist_fraction, dist_lo, dist_lf;
  auto* dist = app.add_subcommand("distill", "Prune a teacher and retrain the student with distillation");
  dist->add_option("--teacher", dist_t.paths, "Teacher checkpoint; repeat for a swap schedule");
  dist->add_option("--swap-at", dist_t.swap_at, "Start step of each teacher after the first");
  dist->add_option("--plan", dist_plan, "Plan JSON file or canonical name");
  dist->add_option("--fraction", dist_fraction, "Use the heuristic plan removing this parameter fraction");
  dist->add_option("--lambda-out", dist_lo, "Output-level distillation weight");
  dist->add_option("--lambda-feat", dist_lf, "Feature-level distillation weight");
  add_train_flags(dist, dist_f);
  add_common(dist, dist_c, true);

  Common prog_c;
  TrainFlags prog_f;
  TeacherFlags prog_t;
  std::vector<double> prog_fractions;
  auto* prog = app.add_subcommand("progressive", "Distill a sequence of nested, increasingly pruned students");
  prog->add_option("--fractions", prog_fractions, "Increasing parameter fractions to remove (default 0.2,0.4,0.5)")
      ->delimiter(',');
  prog->add_option("--teacher", prog_t.paths, "Teacher checkpoint; repeat for a swap schedule");
  prog->add_option("--swap-at", prog_t.swap_at, "Start step of each teacher after the first");
  add_train_flags(prog, prog_f);
  add_common(prog, prog_c, true);

  // sample / evaluate / bench
  Common sample_c;
  std::vector<std::string> sample_ckpts, sample_prompts{"red circle on white", "large blue square on black"};
  int sample_seeds = 2;
  std::optional<int> sample_steps;
  std::optional<double> sample_guidance;
  auto* samp = app.add_subcommand("sample", "Guided DDPM sampling into a PNG grid (row per model)");
  samp->add_option("--checkpoint", sample_ckpts, "Checkpoint directory; repeat for more rows")->required();
  samp->add_option("--prompt", sample_prompts, "Caption; repeat for more columns")->capture_default_str();
  samp->add_option("--seeds", sample_seeds, "Seeds per prompt")->capture_default_str();
  samp->add_option("--steps", sample_steps, "Override diffusion.inference_steps");
  samp->add_option("--guidance", sample_guidance, "Override diffusion.guidance_scale");
  add_common(samp, sample_c, true);

  Common eval_c;
  std::string eval_student, eval_teacher;
  auto* eval = app.add_subcommand("evaluate", "Held-out loss breakdown of a student against a teacher");
  eval->add_option("--student", eval_student, "Student checkpoint directory")->required();
  eval->add_option("--teacher", eval_teacher, "Teacher checkpoint directory")->required();
  add_common(eval, eval_c, false);

  Common bench_c;
  std::vector<std::string> bench_ckpts, bench_names;
  std::string bench_baseline;
  bool bench_published = false;
  BenchOptions bench_o;
  auto* bench = app.add_subcommand("bench", "Time end-to-end sampling and compare models");
  bench->add_option("--checkpoint", bench_ckpts, "Checkpoint directory to time; repeatable");
  bench->add_option("--name", bench_names, "Display name per checkpoint");
  bench->add_option("--baseline", bench_baseline, "Row the speedups are relative to (default: first)");
  bench->add_flag("--published", bench_published, "Include the published A100 rows");
  bench->add_option("--steps", bench_o.steps, "Inference steps")->capture_default_str();
  bench->add_option("--guidance", bench_o.guidance_scale, "Guidance scale")->capture_default_str();
  bench->add_option("--warmup", bench_o.warmup, "Untimed warmup samples")->capture_default_str();
  bench->add_option("--reps", bench_o.reps, "Timed repetitions")->capture_default_str();
  add_common(bench, bench_c, true);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*plan_show) {
      apply_mode(plan_show_c);
      const RunConfig rc = resolve_config(plan_show_c);
      PruningPlan plan;
      if (plan_show_fraction) {
        plan = progressive_plans(rc.model, {*plan_show_fraction}).front();
      } else if (!plan_show_arg.empty()) {
        plan = load_plan_arg(plan_show_arg);
      } else {
        throw UsageError("plan show needs --plan or --progressive");
      }
      out << to_json(plan).dump(2) << '\n';
      if (!plan_show_c.config.empty()) {
        require_valid(rc.model, plan);
        const UNetConfig pruned = apply_plan(rc.model, plan);
        out << depth_table(pruned);
        out << "params: " << count_params(rc.model) << " -> " << count_params(pruned) << '\n';
      }
      return 0;
    }
    if (*plan_validate) {
      if (plan_val_c.config.empty()) throw UsageError("plan validate needs --config");
      const RunConfig rc = resolve_config(plan_val_c);
      const auto v = validate_plan(rc.model, load_plan_arg(plan_val_arg));
      if (!v.empty()) {
        for (const auto& s : v) err << s << '\n';
        return 1;
      }
      out << "OK\n";
      return 0;
    }
    if (*prune) {
      apply_mode(prune_c);
      const RunConfig rc = resolve_config(prune_c);
      const PruningPlan plan = load_plan_arg(prune_plan);
      const UNetConfig base = prune_teacher.empty() ? rc.model : load_checkpoint(prune_teacher).model.config();
      require_valid(base, plan);
      const UNetConfig pruned = apply_plan(base, plan);
      out << depth_table(pruned) << "params: " << count_params(base) << " -> " << count_params(pruned) << '\n';
      const fs::path dir = output_dir(prune_c, "prune");
      RunManifest m = manifest_for("prune", ctx, prune_c, rc);
      fs::create_directories(dir);
      write_json_file(dir / "config.json", to_json(pruned));
      write_json_file(dir / "plan.json", to_json(plan));
      m.artifacts = {"config.json", "plan.json"};
      if (!prune_teacher.empty()) {
        auto teacher = load_checkpoint(prune_teacher);
        const UNetModel student = inherit_weights(teacher.model, plan);
        save_checkpoint(student, dir / "checkpoint",
                        {{"kind", "pruned_student"}, {"plan", to_json(plan)}, {"teacher", prune_teacher}});
        m.artifacts.push_back("checkpoint");
      }
      write_manifest(dir, m);
      return 0;
    }
    if (*count) {
      const RunConfig rc = resolve_config(count_c);
      UNetConfig c = rc.model;
      if (!count_plan.empty()) {
        const auto plan = load_plan_arg(count_plan);
        require_valid(c, plan);
        c = apply_plan(c, plan);
      }
      out << count_params(c) << '\n';
      return 0;
    }
    if (*flops) {
      const RunConfig rc = resolve_config(flops_c);
      UNetConfig c = rc.model;
      if (!flops_plan.empty()) {
        const auto plan = load_plan_arg(flops_plan);
        require_valid(c, plan);
        c = apply_plan(c, plan);
      }
      const auto f = flop_breakdown(c, flops_h, flops_w, flops_tokens);
      out << nlohmann::json{{"conv", f.conv},
                            {"attention", f.attention},
                            {"feedforward", f.feedforward},
                            {"linear", f.linear},
                            {"total", f.total()},
                            {"height", flops_h},
                            {"width", flops_w},
                            {"context_tokens", flops_tokens}}
                 .dump(2)
          << '\n';
      return 0;
    }
    if (*gen) {
      apply_mode(corpus_c);
      RunConfig rc = resolve_config(corpus_c);
      rc.corpus.n = corpus_n;
      if (corpus_c.seed) rc.corpus.seed = *corpus_c.seed;
      const auto corpus = generate_toy_corpus(rc.corpus.n, rc.corpus.seed);
      const fs::path dir = output_dir(corpus_c, "gen-corpus");
      save_corpus(dir / "corpus", corpus, rc.corpus.seed);
      const FrozenEncoders enc(rc.model.context_dim, rc.corpus.encoder_seed);
      std::vector<Tensor<float>> preview;
      for (std::size_t i = 0; i < std::min<std::size_t>(8, corpus.size()); ++i) {
        preview.push_back(enc.encode_image(corpus[i].image));
      }
      render_grid({preview}, enc, dir / "preview.png");
      RunManifest m = manifest_for("gen-corpus", ctx, corpus_c, rc);
      m.artifacts = {"corpus", "preview.png"};
      write_manifest(dir, m);
      out << "wrote " << corpus.size() << " images to " << dir.string() << '\n';
      return 0;
    }
    if (*teach) {
      apply_mode(teach_c);
      RunConfig rc = resolve_config(teach_c);
      apply_train_flags(rc, teach_f);
      const TrainingData data = load_training_data(rc);
      const fs::path dir = output_dir(teach_c, "train-teacher");
      auto r = train_teacher(data, rc.model, rc.hyper, rc.diffusion.schedule(), {dir});
      RunManifest m = manifest_for("train-teacher", ctx, teach_c, rc);
      m.artifacts = {"checkpoint", "metrics.jsonl"};
      write_manifest(dir, m);
      out << r.summary.dump(2) << '\n';
      return 0;
    }
    if (*ft) {
      apply_mode(ft_c);
      RunConfig rc = resolve_config(ft_c);
      apply_train_flags(rc, ft_f);
      auto base = load_checkpoint(ft_teacher);
      rc.model = base.model.config();
      rc.corpus.background = ft_background;
      const TrainingData data = load_training_data(rc);
      const fs::path dir = output_dir(ft_c, "finetune-teacher");
      auto r = finetune_teacher(base.model, data, rc.hyper, rc.diffusion.schedule(), {dir});
      RunManifest m = manifest_for("finetune-teacher", ctx, ft_c, rc);
      m.artifacts = {"checkpoint", "metrics.jsonl"};
      write_manifest(dir, m);
      out << r.summary.dump(2) << '\n';
      return 0;
    }
    if (*dist) {
      apply_mode(dist_c);
      RunConfig rc = resolve_config(dist_c);
      apply_train_flags(rc, dist_f);
      apply_teacher_flags(rc, dist_t);
      if (!dist_plan.empty()) {
        rc.plan = load_plan_arg(dist_plan);
        rc.plan_fraction.reset();
      }
      if (dist_fraction) {
        rc.plan.reset();
        rc.plan_fraction = dist_fraction;
      }
      if (dist_lo) rc.distill.lambda_out_kd = *dist_lo;
      if (dist_lf) rc.distill.lambda_feat_kd = *dist_lf;
      DistillRunConfig run;
      run.teachers = load_teachers(rc.teachers);
      rc.model = run.teachers.entries.front().model->config();
      run.plan = rc.resolved_plan();
      require_valid(rc.model, run.plan);
      run.weights = rc.distill;
      run.hyper = rc.hyper;
      const TrainingData data = load_training_data(rc);
      const fs::path dir = output_dir(dist_c, "distill");
      auto r = distill(run, data, rc.diffusion.schedule(), {dir});
      RunManifest m = manifest_for("distill", ctx, dist_c, rc);
      m.artifacts = {"checkpoint", "metrics.jsonl"};
      write_manifest(dir, m);
      out << r.summary.dump(2) << '\n';
      return 0;
    }
    if (*prog) {
      apply_mode(prog_c);
      RunConfig rc = resolve_config(prog_c);
      apply_train_flags(rc, prog_f);
      apply_teacher_flags(rc, prog_t);
      if (!prog_fractions.empty()) rc.progressive_fractions = prog_fractions;
      DistillRunConfig run;
      run.teachers = load_teachers(rc.teachers);
      rc.model = run.teachers.entries.front().model->config();
      run.weights = rc.distill;
      run.hyper = rc.hyper;
      const TrainingData data = load_training_data(rc);
      const fs::path dir = output_dir(prog_c, "progressive");
      auto results = progressive_distill(rc.progressive_fractions, run, data, rc.diffusion.schedule(), {dir});
      RunManifest m = manifest_for("progressive", ctx, prog_c, rc);
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory()) m.artifacts.push_back(e.path().filename().string());
      }
      std::sort(m.artifacts.begin(), m.artifacts.end());
      write_manifest(dir, m);
      for (const auto& r : results) out << r.summary.at("params") << ' ' << r.summary.dump() << '\n';
      return 0;
    }
    if (*samp) {
      apply_mode(sample_c);
      RunConfig rc = resolve_config(sample_c);
      if (sample_steps) rc.diffusion.inference_steps = *sample_steps;
      if (sample_guidance) rc.diffusion.guidance_scale = *sample_guidance;
      const auto schedule = rc.diffusion.schedule();
      std::vector<std::vector<Tensor<float>>> grid;
      std::vector<NamedTensor<float>> latents;
      std::optional<FrozenEncoders> enc;
      for (std::size_t mi = 0; mi < sample_ckpts.size(); ++mi) {
        const auto ck = load_checkpoint(sample_ckpts[mi]);
        const UNetConfig& cfg = ck.model.config();
        if (!enc) enc.emplace(cfg.context_dim, rc.corpus.encoder_seed);
        std::vector<Tensor<float>> row;
        for (std::size_t pi = 0; pi < sample_prompts.size(); ++pi) {
          const auto caption = tokenize(sample_prompts[pi]);
          const auto cond = conditioning_for(*enc, cfg, {caption});
          const auto uncond = conditioning_for(*enc, cfg, {std::vector<int>{}});
          for (int s = 0; s < sample_seeds; ++s) {
            Rng rng = derive_rng(rc.hyper.seed, pi * 1000003ULL + static_cast<std::uint64_t>(s));
            const Shape shape{1, cfg.in_channels, kImageSize / 2, kImageSize / 2};
            auto z = sample(ck.model, cond, uncond,
                            {rc.diffusion.inference_steps, rc.diffusion.guidance_scale, shape}, schedule, rng);
            latents.emplace_back("row" + std::to_string(mi) + ".prompt" + std::to_string(pi) + ".seed" + std::to_string(s), z);
            row.push_back(std::move(z));
          }
        }
        grid.push_back(std::move(row));
      }
      const fs::path dir = output_dir(sample_c, "sample");
      render_grid(grid, *enc, dir / "grid.png");
      write_tensor_archive(dir, "latents", latents);
      RunManifest m = manifest_for("sample", ctx, sample_c, rc);
      m.config_snapshot["checkpoints"] = sample_ckpts;
      m.config_snapshot["prompts"] = sample_prompts;
      m.artifacts = {"grid.png", "latents.bin", "latents.index.json"};
      write_manifest(dir, m);
      out << "wrote " << (dir / "grid.png").string() << '\n';
      return 0;
    }
    if (*eval) {
      apply_mode(eval_c);
      const RunConfig rc = resolve_config(eval_c);
      const auto student = load_checkpoint(eval_student);
      const auto teacher = load_checkpoint(eval_teacher);
      RunConfig data_rc = rc;
      data_rc.model = teacher.model.config();
      const TrainingData data = load_training_data(data_rc);
      print_breakdown(out, evaluate(student.model, teacher.model, data.heldout, *data.encoders,
                                    rc.diffusion.schedule(), rc.distill, rc.hyper.eval_seed, rc.hyper.eval_batch));
      return 0;
    }
    if (*bench) {
      apply_mode(bench_c);
      const RunConfig rc = resolve_config(bench_c);
      if (bench_ckpts.empty() && !bench_published) throw UsageError("bench needs --checkpoint or --published");
      if (!bench_names.empty() && bench_names.size() != bench_ckpts.size()) {
        throw UsageError("--name must be given once per --checkpoint");
      }
      const auto schedule = rc.diffusion.schedule();
      std::vector<BenchReport> reports;
      for (std::size_t i = 0; i < bench_ckpts.size(); ++i) {
        const auto ck = load_checkpoint(bench_ckpts[i]);
        const UNetConfig& cfg = ck.model.config();
        const FrozenEncoders enc(cfg.context_dim, rc.corpus.encoder_seed);
        const auto cond = conditioning_for(enc, cfg, {tokenize("red circle on white")});
        const auto uncond = conditioning_for(enc, cfg, {std::vector<int>{}});
        Rng rng = derive_rng(rc.hyper.seed, i);
        const Shape shape{bench_o.batch, cfg.in_channels, kImageSize / 2, kImageSize / 2};
        reports.push_back(time_inference(bench_names.empty() ? bench_ckpts[i] : bench_names[i], ck.model, cond, uncond,
                                         shape, bench_o, schedule, rng));
      }
      if (bench_published) {
        for (auto& r : published_latency_rows()) reports.push_back(std::move(r));
      }
      const std::string baseline = bench_baseline.empty() ? reports.front().model_name : bench_baseline;
      const Comparison cmp = compare(reports, baseline);
      out << cmp.to_table();
      const fs::path dir = output_dir(bench_c, "bench");
      fs::create_directories(dir);
      nlohmann::json reps = nlohmann::json::array();
      for (const auto& r : reports) reps.push_back(to_json(r));
      write_json_file(dir / "bench.json", {{"reports", reps}, {"comparison", cmp.to_json()}});
      { std::ofstream(dir / "bench.txt") << cmp.to_table(); }
      RunManifest m = manifest_for("bench", ctx, bench_c, rc);
      m.artifacts = {"bench.json", "bench.txt"};
      write_manifest(dir, m);
      return 0;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return 1;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const RangeError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const CapacityError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return 2;
  }
  err << app.help();
  return 1;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_dispatch(args, std::cout, std::cerr);
}

}  // namespace slimunet
