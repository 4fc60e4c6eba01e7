#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "slimunet/cli.hpp"
#include "slimunet/config.hpp"
#include "slimunet/render.hpp"
#include "test_support.hpp"

using namespace slimunet;
using namespace slimunet::testing;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli_dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string config(const std::string& name) { return std::string(SLIMUNET_CONFIG_DIR) + "/" + name; }

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string dir_bytes(const fs::path& dir) {
  std::string all;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) all += fs::relative(f, dir).string() + '\n' + read_bytes(f);
  return all;
}

// Small run config: fast model, tiny corpus, a handful of steps.
fs::path write_tiny_config(const fs::path& dir) {
  nlohmann::json model = to_json(toy_config());
  model["base_channels"] = 8;
  model["channel_multipliers"] = {1, 2};
  model["transformer_depths"] = {0, 1};
  model["resnets_per_down_stage"] = 1;
  model["resnets_per_up_stage"] = 2;
  model["context_dim"] = 16;
  model["attention_head_dim"] = 8;
  model["time_embed_dim"] = 16;
  model["mid_block"] = {{"has_attention", true}, {"attention_depth", 1}, {"has_second_resnet", true}};
  const nlohmann::json j{{"model", model},
                         {"hyper", {{"learning_rate", 1e-3}, {"batch_size", 2}, {"max_steps", 3}, {"eval_every", 0},
                                    {"log_every", 1}, {"eval_batch", 4}}},
                         {"corpus", {{"n", 40}, {"seed", 2}}}};
  const auto p = dir / "tiny.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

std::array<std::uint32_t, 2> png_size(const fs::path& p) {
  const auto b = read_bytes(p);
  EXPECT_GE(b.size(), 24u);
  EXPECT_EQ(b.substr(1, 3), "PNG");
  auto be32 = [&](std::size_t o) {
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(b[o + i]);
    return v;
  };
  return {be32(16), be32(20)};
}

}  // namespace

// ---------------------------------------------------------------- planning commands

TEST(Cli, CountParamsReference) {
  const auto r = cli({"count-params", "--config", config("sdxl_ref.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find(std::to_string(count_params(reference_sdxl_config()))), std::string::npos) << r.out;
  const auto v = cli({"count-params", "--config", config("sdxl_ref.json"), "--plan", config("plans/vega.json")});
  ASSERT_EQ(v.code, 0) << v.err;
  EXPECT_NE(v.out.find("745225604"), std::string::npos) << v.out;
}

TEST(Cli, PlanValidateAndMismatch) {
  const auto ok = cli({"plan", "validate", "--config", config("sdxl_ref.json"), "--plan", config("plans/ssd1b.json")});
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("OK"), std::string::npos);
  const auto bad = cli({"plan", "validate", "--config", config("toy.json"), "--plan", config("plans/vega.json")});
  EXPECT_EQ(bad.code, 1);
  EXPECT_FALSE(bad.err.empty());
  const auto dir = scratch_dir("cli_prune_bad");
  const auto prune = cli({"prune", "--config", config("toy.json"), "--plan", config("plans/vega.json"), "--out",
                          dir.string()});
  EXPECT_EQ(prune.code, 1);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"no-such-command"}).code, 1);
  EXPECT_EQ(cli({"count-params", "--no-such-flag"}).code, 1);
  // Unreadable files are runtime failures; malformed content is a validation error.
  EXPECT_EQ(cli({"count-params", "--config", "/nonexistent/config.json"}).code, 2);
  const auto dir = scratch_dir("cli_usage");
  std::ofstream(dir / "bad.json") << R"({"model": {"base_channels": -1}})";
  EXPECT_EQ(cli({"count-params", "--config", (dir / "bad.json").string()}).code, 1);
  EXPECT_EQ(cli({"--version"}).code, 0);
}

TEST(Cli, EverySubcommandHasHelp) {
  const std::vector<std::pair<std::vector<std::string>, std::string>> cases{
      {{"plan", "show"}, "--progressive"},     {{"plan", "validate"}, "--plan"},
      {{"prune"}, "--teacher"},                {{"count-params"}, "--plan"},
      {{"estimate-flops"}, "--context-tokens"}, {{"gen-corpus"}, "--n"},
      {{"train-teacher"}, "--steps"},          {{"finetune-teacher"}, "--background"},
      {{"distill"}, "--lambda-feat"},          {{"progressive"}, "--fractions"},
      {{"sample"}, "--guidance"},              {{"evaluate"}, "--student"},
      {{"bench"}, "--published"}};
  for (auto [args, flag] : cases) {
    args.push_back("--help");
    const auto r = cli(args);
    EXPECT_EQ(r.code, 0) << args.front();
    EXPECT_NE(r.out.find(flag), std::string::npos) << args.front() << " help lacks " << flag;
    EXPECT_NE(r.out.find("--config"), std::string::npos) << args.front();
  }
}

TEST(Cli, EstimateFlopsPrintsJson) {
  const auto r = cli({"estimate-flops", "--config", config("toy.json"), "--height", "8", "--width", "8",
                      "--context-tokens", "8"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["total"].get<std::int64_t>(), estimate_flops(toy_config(), 8, 8, 8));
}

// ---------------------------------------------------------------- output directories and manifests

TEST(Cli, OutputRootFromEnvironmentAndFlagWins) {
  const auto root = scratch_dir("cli_env_root");
  ::setenv(kOutputRootEnv, root.c_str(), 1);
  const auto a = cli({"gen-corpus", "--n", "24"});
  EXPECT_EQ(a.code, 0) << a.err;
  EXPECT_TRUE(fs::exists(root / "gen-corpus" / "manifest.json"));
  EXPECT_TRUE(fs::exists(root / "gen-corpus" / "preview.png"));

  const auto explicit_dir = scratch_dir("cli_env_flag");
  const auto b = cli({"gen-corpus", "--n", "24", "--out", explicit_dir.string()});
  ::unsetenv(kOutputRootEnv);
  EXPECT_EQ(b.code, 0) << b.err;
  EXPECT_TRUE(fs::exists(explicit_dir / "manifest.json"));
  const auto m = nlohmann::json::parse(read_bytes(explicit_dir / "manifest.json"));
  EXPECT_EQ(m["command"], "gen-corpus");
  EXPECT_FALSE(m["tool_version"].get<std::string>().empty());
  EXPECT_FALSE(m["hardware"].get<std::string>().empty());
}

TEST(Cli, ManifestReplayReproducesCheckpoint) {
  const auto dir = scratch_dir("cli_manifest");
  const auto cfg = write_tiny_config(dir);
  const auto first = cli({"train-teacher", "--config", cfg.string(), "--seed", "4", "--steps", "2", "--deterministic",
                          "--out", (dir / "a").string()});
  ASSERT_EQ(first.code, 0) << first.err;
  const auto replay = cli({"train-teacher", "--config", (dir / "a" / "manifest.json").string(), "--deterministic",
                           "--out", (dir / "b").string()});
  ASSERT_EQ(replay.code, 0) << replay.err;
  EXPECT_EQ(dir_bytes(dir / "a" / "checkpoint"), dir_bytes(dir / "b" / "checkpoint"));
  EXPECT_EQ(read_bytes(dir / "a" / "metrics.jsonl"), read_bytes(dir / "b" / "metrics.jsonl"));
  const auto m = nlohmann::json::parse(read_bytes(dir / "a" / "manifest.json"));
  EXPECT_EQ(m["seed"], 4);
  EXPECT_EQ(m["config_snapshot"]["hyper"]["max_steps"], 2);
}

TEST(Cli, DistillEvaluateSampleBenchChain) {
  const auto dir = scratch_dir("cli_chain");
  const auto cfg = write_tiny_config(dir).string();
  ASSERT_EQ(cli({"train-teacher", "--config", cfg, "--out", (dir / "t").string()}).code, 0);
  const auto teacher = (dir / "t" / "checkpoint").string();
  const auto d = cli({"distill", "--config", cfg, "--teacher", teacher, "--fraction", "0.3", "--steps", "2", "--out",
                      (dir / "s").string()});
  ASSERT_EQ(d.code, 0) << d.err;
  const auto student = (dir / "s" / "checkpoint").string();

  const auto e = cli({"evaluate", "--config", cfg, "--student", student, "--teacher", teacher});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto ej = nlohmann::json::parse(e.out);
  EXPECT_EQ(ej["total"].get<double>(),
            ej["task"].get<double>() + ej["out_kd"].get<double>() + ej["feat_kd"].get<double>());

  const auto s = cli({"sample", "--config", cfg, "--checkpoint", teacher, "--checkpoint", student, "--prompt",
                      "red circle on white", "--prompt", "blue square on black", "--seeds", "1", "--steps", "3",
                      "--out", (dir / "g").string()});
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(png_size(dir / "g" / "grid.png"), (std::array<std::uint32_t, 2>{2 * kImageSize, 2 * kImageSize}));

  const auto b = cli({"bench", "--config", cfg, "--checkpoint", teacher, "--checkpoint", student, "--name", "teacher",
                      "--name", "student", "--steps", "2", "--warmup", "1", "--reps", "3", "--published", "--out",
                      (dir / "b").string()});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_NE(b.out.find("Speedup"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "b" / "bench.json"));
  EXPECT_EQ(cli({"bench", "--config", cfg, "--checkpoint", teacher, "--reps", "2", "--out", (dir / "c").string()}).code,
            1);
}

#ifdef SLIMUNET_CLI_PATH
TEST(Cli, BinaryExitCodes) {
  const std::string bin = SLIMUNET_CLI_PATH;
  const std::string quiet = " >/dev/null 2>&1";
  auto status = [](int raw) { return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1; };
  EXPECT_EQ(status(std::system((bin + " --version" + quiet).c_str())), 0);
  EXPECT_EQ(status(std::system((bin + " bogus" + quiet).c_str())), 1);
  EXPECT_EQ(status(std::system((bin + " count-params --config " + config("sdxl_ref.json") + quiet).c_str())), 0);
}
#endif

// ---------------------------------------------------------------- run config

TEST(RunConfigJson, RoundTripAndRejection) {
  RunConfig rc;
  rc.plan_fraction = 0.4;
  rc.distill = {0.5, 2.0};
  rc.hyper.max_steps = 17;
  rc.teachers = {{"base", "a/checkpoint", 0}, {"ft", "b/checkpoint", 9}};
  rc.corpus.background = "black";
  rc.progressive_fractions = {0.1, 0.3};
  const auto j = to_json(rc);
  EXPECT_EQ(to_json(run_config_from_json(j)), j);
  EXPECT_EQ(run_config_from_json(j).resolved_plan(), progressive_plans(toy_config(), {0.4}).front());
  EXPECT_THROW(run_config_from_json({{"modle", "toy"}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"hyper", {{"lr", 1}}}}), ConfigError);
  EXPECT_EQ(run_config_from_json(to_json(toy_config())).model, toy_config());
  EXPECT_EQ(run_config_from_json({{"model", "sdxl_ref"}}).model, reference_sdxl_config());
}

// ---------------------------------------------------------------- rendering

TEST(Render, GridDimensionsAndDeterminism) {
  const auto dir = scratch_dir("render");
  const FrozenEncoders enc(8, 1);
  Rng rng(2);
  const auto latent = [&] { return randn<float>({12, 8, 8}, rng); };
  render_grid({{latent()}}, enc, dir / "one.png");
  EXPECT_EQ(png_size(dir / "one.png"), (std::array<std::uint32_t, 2>{16, 16}));
  const std::vector<std::vector<Tensor<float>>> rows{{latent(), latent(), latent()}, {latent(), latent(), latent()}};
  render_grid(rows, enc, dir / "a.png");
  render_grid(rows, enc, dir / "b.png");
  EXPECT_EQ(png_size(dir / "a.png"), (std::array<std::uint32_t, 2>{48, 32}));
  EXPECT_EQ(read_bytes(dir / "a.png"), read_bytes(dir / "b.png"));
  EXPECT_THROW(render_grid({{latent()}, {latent(), latent()}}, enc, dir / "c.png"), DimensionError);
}

TEST(Render, Rgb8Mapping) {
  Tensor<float> img({3, 1, 2});
  img[0] = -1.f;
  img[1] = 1.f;
  img[2] = 0.f;
  img[3] = 2.f;
  img[4] = -3.f;
  img[5] = 0.5f;
  const auto rgb = to_rgb8(img);
  ASSERT_EQ(rgb.size(), 6u);
  EXPECT_EQ(rgb[0], 0);    // pixel 0 red
  EXPECT_EQ(rgb[3], 255);  // pixel 1 red
  EXPECT_EQ(rgb[2], 0);    // pixel 0 blue clamps
  EXPECT_EQ(rgb[4], 255);  // pixel 1 green clamps
}
