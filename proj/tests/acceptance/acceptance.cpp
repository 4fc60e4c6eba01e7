// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance --workdir DIR [--only 1,5,9]
//
// Criteria 6, 7, 9 and 10 share one teacher trained from
// configs/toy_teacher.json; expect roughly half an hour on one core.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "slimunet/bench.hpp"
#include "slimunet/cli.hpp"
#include "slimunet/config.hpp"
#include "slimunet/diffusion.hpp"
#include "slimunet/distill.hpp"
#include "slimunet/pruning.hpp"
#include "slimunet/trainer.hpp"
#include "test_support.hpp"

using namespace slimunet;
using namespace slimunet::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

bool within(double v, double target, double rel) { return std::abs(v - target) <= rel * target; }

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

/// Shared state for the training-based criteria.
class Workspace {
 public:
  explicit Workspace(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }

  const RunConfig& teacher_config() {
    if (!teacher_rc_) teacher_rc_ = load_run_config(fs::path(SLIMUNET_CONFIG_DIR) / "toy_teacher.json");
    return *teacher_rc_;
  }
  const RunConfig& distill_config() {
    if (!distill_rc_) distill_rc_ = load_run_config(fs::path(SLIMUNET_CONFIG_DIR) / "toy_distill.json");
    return *distill_rc_;
  }
  const TrainingData& data() {
    if (!data_) data_ = load_training_data(teacher_config());
    return *data_;
  }
  DiffusionSchedule schedule() { return teacher_config().diffusion.schedule(); }

  /// 50%-analog plan: the heuristic plan removing half of the toy parameters.
  PruningPlan half_plan() { return progressive_plans(teacher_config().model, {0.5}).front(); }

  const TrainResult& teacher() {
    if (!teacher_) {
      const auto t0 = Clock::now();
      const auto& rc = teacher_config();
      std::cout << "  training teacher: " << rc.hyper.max_steps << " steps, batch " << rc.hyper.batch_size << ", lr "
                << rc.hyper.learning_rate << std::endl;
      teacher_ = train_teacher(data(), rc.model, rc.hyper, schedule(), {dir_ / "teacher"});
      std::cout << "  teacher trained in " << std::fixed << std::setprecision(0) << since(t0) << " s"
                << std::defaultfloat << std::setprecision(6) << std::endl;
    }
    return *teacher_;
  }
  std::shared_ptr<const UNetModel> teacher_model() {
    if (!teacher_ptr_) teacher_ptr_ = std::make_shared<UNetModel>(teacher().model.clone());
    return teacher_ptr_;
  }

  DistillRunConfig distill_run(DistillLossWeights w) {
    DistillRunConfig run;
    run.plan = half_plan();
    run.weights = w;
    run.teachers.entries = {{"base", teacher_model(), 0}};
    run.hyper = distill_config().hyper;
    return run;
  }

  std::optional<UNetModel> distilled_student;

 private:
  fs::path dir_;
  std::optional<RunConfig> teacher_rc_, distill_rc_;
  std::optional<TrainingData> data_;
  std::optional<TrainResult> teacher_;
  std::shared_ptr<const UNetModel> teacher_ptr_;
};

// ---------------------------------------------------------------- criteria

Outcome parameter_bands(Workspace&) {
  Outcome o;
  const auto t0 = Clock::now();
  const auto ref = reference_sdxl_config();
  const double full = static_cast<double>(count_params(ref));
  const double ssd = static_cast<double>(count_params(apply_plan(ref, canonical_plan(CanonicalPlan::SSD_1B))));
  const double vega = static_cast<double>(count_params(apply_plan(ref, canonical_plan(CanonicalPlan::VEGA))));
  const double secs = since(t0);
  o.require(within(full, 2.6e9, 0.04), "reference in 2.6e9 +/- 4%");
  o.require(within(ssd, 1.3e9, 0.05), "SSD-1B in 1.3e9 +/- 5%");
  o.require(within(vega, 0.74e9, 0.05), "Vega in 0.74e9 +/- 5%");
  o.require(secs < 1.0, "under 1 s");
  o.detail << std::setprecision(4) << "reference " << full / 1e9 << "B, SSD-1B " << ssd / 1e9 << "B, Vega " << vega / 1e9
           << "B in " << std::setprecision(2) << secs * 1e3 << " ms (analytic, no weights)";
  return o;
}

Outcome plan_fidelity(Workspace&) {
  Outcome o;
  const auto ref = reference_sdxl_config();
  for (auto which : {CanonicalPlan::SSD_1B, CanonicalPlan::VEGA}) {
    const auto p = canonical_plan(which);
    o.require(plan_from_json(nlohmann::json::parse(to_json(p).dump())) == p, p.name + " JSON round-trip");
    o.require(validate_plan(ref, p).empty(), p.name + " validates");
  }
  const auto ssd_plan = canonical_plan(CanonicalPlan::SSD_1B);
  const auto ssd = apply_plan(ref, ssd_plan);
  const auto removed = expand_plan(ref, ssd_plan);
  for (int j = 1; j <= ref.attention_layers(Section::down); ++j) {
    o.require(ssd.layer_depth(Section::down, 3, j) == 4, "SSD-1B down-stage-3 depth 4");
    std::set<int> survivors;
    for (int b = 1; b <= ref.layer_depth(Section::down, 3, j); ++b) {
      if (!removed.count({RemovalKind::TransformerBlocks, {Section::down, 3, j}, b})) survivors.insert(b);
    }
    o.require(survivors == std::set<int>{1, 2, 3, 6}, "SSD-1B survivors {1,2,3,6}");
  }
  const auto vega = apply_plan(ref, canonical_plan(CanonicalPlan::VEGA));
  for (int j = 1; j <= ref.attention_layers(Section::up); ++j) {
    o.require(vega.layer_depth(Section::up, 1, j) == 2, "Vega up-stage-1 depth 2");
  }
  o.detail << "both plans round-trip and validate; SSD-1B down-3 keeps {1,2,3,6} of 10; Vega up-1 depths 2";
  return o;
}

Outcome identity_distillation(Workspace&) {
  Outcome o;
  const auto c = toy_config();
  const auto teacher = build_unet<float>(c, 17);
  const auto student = inherit_weights(teacher, {});
  Rng rng(18);
  for (int k = 0; k < 10; ++k) {
    const auto in = random_inputs<float>(c, 2, 8, rng);
    const auto rt = run(teacher, in, true);
    const auto rs = run(student, in, true);
    o.require(bitwise_equal(rt.eps.value(), rs.eps.value()), "bitwise forward");
    const auto eps = randn<float>(in.z.shape(), rng);
    const auto l = total_loss(eps, rt.eps, rs.eps, *rt.taps, *rs.taps, {1.0, 1.0});
    o.require(l.breakdown.out_kd == 0.0 && l.breakdown.feat_kd == 0.0, "distillation terms exactly 0");
    o.require(l.features.shared() == rt.taps->size(), "all taps shared");
  }
  o.detail << "10 inputs bitwise equal; out_kd = feat_kd = 0 exactly";
  return o;
}

Outcome tap_shapes(Workspace&) {
  Outcome o;
  Rng rng(4);
  std::size_t shared = 0;
  for (int k = 0; k < 100; ++k) {
    const auto c = random_toy_config(rng);
    const auto plan = random_valid_plan(c, rng);
    const auto teacher = build_unet<float>(c, static_cast<std::uint64_t>(k));
    const auto student = inherit_weights(teacher, plan);
    const auto in = random_inputs<float>(c, 1, latent_side(c), rng);
    const auto rt = run(teacher, in, true);
    const auto rs = run(student, in, true);
    for (const auto& [key, v] : *rs.taps) {
      if (!rt.taps->count(key)) continue;
      ++shared;
      o.require(rt.taps->at(key).shape() == v.shape(), "shape match at " + key);
    }
  }
  o.detail << "100 random (config, plan) pairs, " << shared << " shared taps, all shapes equal";
  return o;
}

Outcome gradient_checks(Workspace&) {
  Outcome o;
  for (auto term : {LossTerm::task, LossTerm::out_kd, LossTerm::feat_kd}) {
    const auto r = check_loss_gradient(term, 1);
    o.require(r.params <= 10000, "model has <= 10k parameters");
    o.require(r.max_rel < 1e-4, std::string(term_name(term)) + " rel error " + r.worst);
    o.require(r.nontrivial >= 5, std::string(term_name(term)) + " nontrivial coordinates");
    o.detail << term_name(term) << " max rel " << std::scientific << std::setprecision(1) << r.max_rel << " ("
             << r.checked << " coords, " << r.params << " params)" << (term == LossTerm::feat_kd ? "" : "; ");
  }
  return o;
}

Outcome distillation_benefit(Workspace& ws) {
  Outcome o;
  const auto& teacher = ws.teacher();
  if (auto ev = teacher.metrics.of_kind("eval"); ev.size() >= 2) {
    const double a = ev.front()["task"], b = ev.back()["task"];
    std::cout << std::setprecision(4) << "  teacher held-out task loss " << a << " -> " << b << " (" << std::fixed
              << std::setprecision(0) << 100.0 * (1.0 - b / a) << "% drop)" << std::defaultfloat << std::endl;
  }
  const auto& data = ws.data();
  const auto sched = ws.schedule();
  const auto& tm = *ws.teacher_model();
  auto heldout_kd = [&](const UNetModel& s) {
    return evaluate(s, tm, data.heldout, *data.encoders, sched, {1.0, 1.0}).out_kd;
  };
  const double step0 = heldout_kd(inherit_weights(tm, ws.half_plan()));

  std::vector<double> finals;
  for (auto w : {DistillLossWeights{1.0, 1.0}, DistillLossWeights{0.0, 0.0}}) {
    const auto t0 = Clock::now();
    const auto run = ws.distill_run(w);
    std::cout << std::defaultfloat << "  distilling lambda=(" << w.lambda_out_kd << "," << w.lambda_feat_kd << "): "
              << run.hyper.max_steps << " steps, batch " << run.hyper.batch_size << std::endl;
    const std::string name = w.lambda_out_kd > 0 ? "distill_kd" : "distill_ablation";
    auto r = distill(run, data, sched, {ws.dir() / name});
    finals.push_back(heldout_kd(r.model));
    std::cout << "  done in " << std::fixed << std::setprecision(0) << since(t0) << " s, held-out out_kd "
              << std::scientific << std::setprecision(3) << finals.back() << std::defaultfloat << std::endl;
    if (w.lambda_out_kd > 0) ws.distilled_student = std::move(r.model);
  }
  o.require(finals[0] <= 0.7 * step0, "out_kd at least 30% below step 0");
  o.require(finals[0] < finals[1], "below the task-only ablation");
  o.detail << std::scientific << std::setprecision(3) << "held-out out_kd step 0 " << step0 << " -> distilled "
           << finals[0] << " (" << std::fixed << std::setprecision(0) << 100.0 * (1.0 - finals[0] / step0)
           << "% lower), ablation " << std::scientific << std::setprecision(3) << finals[1];
  return o;
}

Outcome teacher_swap(Workspace& ws) {
  Outcome o;
  auto rc = ws.teacher_config();
  rc.corpus.background = "black";
  const auto black = load_training_data(rc);
  auto h = rc.hyper;
  h.max_steps = 200;
  h.eval_every = 0;
  const auto ft = finetune_teacher(*ws.teacher_model(), black, h, ws.schedule(), {ws.dir() / "finetune_black"});
  const auto ft_model = std::make_shared<UNetModel>(ft.model.clone());

  auto run = ws.distill_run({1.0, 1.0});
  const int boundary = 20;
  run.hyper.max_steps = 2 * boundary;
  run.hyper.log_every = 1;
  run.hyper.eval_every = 0;
  run.teachers.entries.push_back({"black", ft_model, boundary});
  const auto h0 = parameter_hash(*run.teachers.entries[0].model);
  const auto h1 = parameter_hash(*ft_model);
  o.require(h0 != h1, "finetuned teacher differs from base");
  const auto r = distill(run, ws.data(), ws.schedule(), {ws.dir() / "swap"});

  const auto swaps = r.metrics.of_kind("teacher_swap");
  o.require(swaps.size() == 1, "exactly one swap record");
  if (swaps.size() == 1) {
    o.require(swaps[0]["step"] == boundary, "swap logged at the boundary");
    o.require(swaps[0]["from"] == "base" && swaps[0]["to"] == "black", "swap ids");
  }
  int base_steps = 0;
  for (const auto& rec : r.metrics.of_kind("train")) {
    const int step = rec["step"];
    const bool base = rec["teacher_id"] == "base";
    base_steps += base;
    o.require(base == (step <= boundary), "teacher id at step " + std::to_string(step));
  }
  o.require(parameter_hash(*run.teachers.entries[0].model) == h0, "base teacher hash unchanged");
  o.require(parameter_hash(*ft_model) == h1, "finetuned teacher hash unchanged");
  o.detail << "black-background teacher (" << black.train.size() << " train images) from step " << boundary
           << "; swap logged at step " << (swaps.empty() ? -1 : swaps[0]["step"].get<int>()) << ", " << base_steps
           << "/" << 2 * boundary << " updates on base; hashes unchanged";
  return o;
}

Outcome progressive_nesting(Workspace&) {
  Outcome o;
  const auto t0 = Clock::now();
  const std::vector<double> fr{0.2, 0.4, 0.5};
  for (const auto& c : {toy_config(), reference_sdxl_config()}) {
    const auto plans = progressive_plans(c, fr);
    const double base = static_cast<double>(count_params(c));
    std::int64_t prev = count_params(c);
    for (std::size_t i = 0; i < plans.size(); ++i) {
      o.require(validate_plan(c, plans[i]).empty(), "plan validates");
      const auto n = count_params(apply_plan(c, plans[i]));
      o.require(n < prev, "strictly decreasing count");
      o.require(1.0 - static_cast<double>(n) / base >= fr[i], "meets fraction");
      if (i > 0) o.require(is_nested(c, plans[i - 1], plans[i]), "nested");
      prev = n;
    }
    o.require(plans.size() == fr.size(), "one plan per fraction");
  }
  const auto plans = progressive_plans(toy_config(), fr);
  const double base = static_cast<double>(count_params(toy_config()));
  o.detail << "toy removes";
  for (const auto& p : plans) {
    o.detail << ' ' << std::fixed << std::setprecision(1)
             << 100.0 * (1.0 - static_cast<double>(count_params(apply_plan(toy_config(), p))) / base) << '%';
  }
  o.detail << "; nested and decreasing for toy and reference in " << std::setprecision(2) << since(t0) << " s";
  return o;
}

Outcome latency_direction(Workspace& ws) {
  Outcome o;
  const auto& tm = *ws.teacher_model();
  const UNetModel student = ws.distilled_student ? ws.distilled_student->clone() : inherit_weights(tm, ws.half_plan());
  const auto& enc = *ws.data().encoders;
  const Conditioning<float> cond{enc.encode_text_batch({tokenize("red circle on white")}), std::nullopt};
  const Conditioning<float> uncond{enc.null_context(1), std::nullopt};
  const Shape shape{1, tm.config().in_channels, kImageSize / 2, kImageSize / 2};
  BenchOptions opt;  // 25 steps, guidance 9, 2 warmups, 5 reps
  Rng rng(9);
  const auto rt = time_inference("teacher", tm, cond, uncond, shape, opt, ws.schedule(), rng);
  const auto rs = time_inference("student", student, cond, uncond, shape, opt, ws.schedule(), rng);
  o.require(opt.reps >= 5 && opt.warmup >= 2, "at least 5 reps after 2 warmups");
  o.require(rs.seconds_per_image < rt.seconds_per_image, "student faster than teacher");
  const auto c = compare(published_latency_rows(), "SDXL");
  const double speedup = c.row("Vega").speedup, ratio = c.row("SSD-1B").throughput_ratio;
  o.require(std::abs(speedup - 1.94) <= 0.01, "Vega/SDXL speedup 1.94");
  o.require(std::abs(ratio - 1.52) <= 0.01, "SSD-1B/SDXL throughput 1.52");
  std::cout << compare({rt, rs}, "teacher").to_table();
  o.detail << std::fixed << std::setprecision(4) << "teacher " << rt.seconds_per_image << " s, student "
           << rs.seconds_per_image << " s per image (median of " << opt.reps << "); published Vega speedup "
           << std::setprecision(3) << speedup << ", SSD-1B throughput " << ratio;
  return o;
}

Outcome sampling_protocol(Workspace& ws) {
  Outcome o;
  const auto& tm = *ws.teacher_model();
  const auto& enc = *ws.data().encoders;
  const auto sched = ws.schedule();
  const Conditioning<float> cond{
      enc.encode_text_batch({tokenize("red circle on white"), tokenize("large blue square on black")}), std::nullopt};
  const Conditioning<float> uncond{enc.null_context(2), std::nullopt};
  SampleOptions opt{25, 9.0, {2, tm.config().in_channels, kImageSize / 2, kImageSize / 2}};
  Rng a(3);
  const auto guided = sample(tm, cond, uncond, opt, sched, a);
  bool finite = true;
  for (std::int64_t i = 0; i < guided.numel(); ++i) finite &= std::isfinite(guided[i]);
  o.require(finite, "finite latents at guidance 9");

  opt.guidance_scale = 1.0;
  Rng b(4);
  const auto unit = sample(tm, cond, uncond, opt, sched, b);
  Rng c(4);
  auto z = randn<float>(opt.shape, c);
  const auto ts = inference_timesteps(sched.T, opt.steps);
  const auto denoise = model_denoiser(tm);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const std::vector<int> tb(2, ts[i]);
    z = ddpm_step(denoise(z, cond, tb), z, ts[i], i + 1 < ts.size() ? ts[i + 1] : -1, sched, c);
  }
  o.require(bitwise_equal(unit, z), "guidance 1 equals the conditional-only loop");
  o.detail << "25 steps at guidance 9 finite; guidance 1 bitwise equal to the conditional-only loop";
  return o;
}

std::set<int> parse_only(const std::string& s) {
  std::set<int> out;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) out.insert(std::stoi(tok));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path workdir = fs::temp_directory_path() / "slimunet_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      only = parse_only(argv[++i]);
    } else {
      std::cerr << "usage: acceptance [--workdir DIR] [--only N,N,...]\n";
      return 2;
    }
  }
  fs::create_directories(workdir);
  Workspace ws(workdir);

  const std::vector<std::pair<std::string, std::function<Outcome(Workspace&)>>> criteria{
      {"parameter-count reproduction", parameter_bands},
      {"plan fidelity", plan_fidelity},
      {"identity distillation", identity_distillation},
      {"tap-shape compatibility", tap_shapes},
      {"gradient checks", gradient_checks},
      {"end-to-end distillation benefit", distillation_benefit},
      {"teacher swap bookkeeping", teacher_swap},
      {"progressive nesting", progressive_nesting},
      {"latency direction", latency_direction},
      {"sampling protocol", sampling_protocol},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second(ws);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << id << "  " << criteria[i].first << " ("
              << std::fixed << std::setprecision(1) << since(t0) << " s): " << o.detail.str() << std::defaultfloat << std::setprecision(6)
              << std::endl;
  }
  if (only.empty() || only.count(11)) {
    std::cout << "NOTE  11  human preference study: no artifact counterpart; not evaluated" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
