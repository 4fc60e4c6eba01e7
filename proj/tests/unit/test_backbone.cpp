#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "slimunet/backbone.hpp"
#include "slimunet/checkpoint.hpp"
#include "slimunet/error.hpp"
#include "slimunet/ops.hpp"
#include "test_support.hpp"

using namespace slimunet;
using namespace slimunet::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

UNetConfig micro_config() {
  UNetConfig c;
  c.in_channels = c.out_channels = 4;
  c.base_channels = 8;
  c.channel_multipliers = {1};
  c.transformer_depths = {0};
  c.resnets_per_down_stage = 1;
  c.resnets_per_up_stage = 2;
  c.context_dim = 8;
  c.attention_head_dim = 8;
  c.time_embed_dim = 16;
  c.mid_block = {false, 0, false};
  return c;
}

// Two stages, attention in stage 2 and the mid block; under 10k parameters.
UNetConfig grad_config() {
  UNetConfig c;
  c.in_channels = c.out_channels = 4;
  c.base_channels = 4;
  c.channel_multipliers = {1, 1};
  c.transformer_depths = {0, 1};
  c.resnets_per_down_stage = 1;
  c.resnets_per_up_stage = 2;
  c.context_dim = 4;
  c.attention_head_dim = 4;
  c.time_embed_dim = 8;
  c.mid_block = {true, 1, false};
  return c;
}

}  // namespace

// ---------------------------------------------------------------- config

TEST(Config, ReferenceAndToyAreValid) {
  EXPECT_TRUE(validate_config(reference_sdxl_config()).empty());
  EXPECT_TRUE(validate_config(toy_config()).empty());
}

TEST(Config, LengthMismatchNamesBothFields) {
  auto c = toy_config();
  c.transformer_depths = {0, 1};
  const auto v = validate_config(c);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("transformer_depths"), std::string::npos);
  EXPECT_NE(v[0].find("channel_multipliers"), std::string::npos);
}

TEST(Config, HeadDimDivisibility) {
  auto c = toy_config();
  c.base_channels = 30;
  c.attention_head_dim = 64;
  c.transformer_depths = {1, 1, 2};
  const auto v = validate_config(c);
  ASSERT_FALSE(v.empty());
  EXPECT_NE(v[0].find("attention_head_dim"), std::string::npos);
}

TEST(Config, ReportsEveryViolation) {
  auto c = toy_config();
  c.out_channels = 3;
  c.time_embed_dim = 0;
  c.mid_block = {false, 2, true};
  EXPECT_GE(validate_config(c).size(), 3u);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  for (const auto& c : {reference_sdxl_config(), toy_config()}) EXPECT_EQ(config_from_json(to_json(c)), c);
  auto j = to_json(toy_config());
  j["dropout"] = 0.1;
  EXPECT_THROW(config_from_json(j), ConfigError);
}

// ---------------------------------------------------------------- build

TEST(Build, SameSeedIsBitwiseIdentical) {
  const auto a = build_unet<float>(toy_config(), 7);
  const auto b = build_unet<float>(toy_config(), 7);
  for (const auto& [path, v] : a.parameters()) EXPECT_TRUE(bitwise_equal(v.value(), b.parameter(path).value())) << path;
  EXPECT_EQ(parameter_hash(a), parameter_hash(b));
}

TEST(Build, DifferentSeedDiffers) {
  const auto a = build_unet<float>(toy_config(), 7);
  const auto b = build_unet<float>(toy_config(), 8);
  bool any = false;
  for (const auto& [path, v] : a.parameters()) any |= !bitwise_equal(v.value(), b.parameter(path).value());
  EXPECT_TRUE(any);
}

TEST(Build, InvalidConfigThrowsWithViolations) {
  auto c = toy_config();
  c.resnets_per_up_stage = 2;
  try {
    (void)build_unet<float>(c, 0);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_FALSE(e.violations().empty());
  }
}

TEST(Build, MicroConfigHandCount) {
  // conv_in 8*4*9+8, time MLP 8*16+16 + 16*16+16, down resnet 8->8 (two
  // norms, two 3x3 convs, time projection), mid resnet the same, two up
  // resnets 16->8 with 1x1 shortcuts, norm_out, conv_out 8->4.
  const std::int64_t resnet_8_8 = 2 * 8 + (8 * 8 * 9 + 8) + (16 * 8 + 8) + 2 * 8 + (8 * 8 * 9 + 8);
  const std::int64_t resnet_16_8 = 2 * 16 + (16 * 8 * 9 + 8) + (16 * 8 + 8) + 2 * 8 + (8 * 8 * 9 + 8) + (16 * 8 + 8);
  const std::int64_t expected = (8 * 4 * 9 + 8) + (8 * 16 + 16) + (16 * 16 + 16) + resnet_8_8 + resnet_8_8 +
                                2 * resnet_16_8 + 2 * 8 + (4 * 8 * 9 + 4);
  EXPECT_EQ(expected, 7820);
  EXPECT_EQ(count_params(micro_config()), expected);
  EXPECT_EQ(enumerated_params(build_unet<float>(micro_config(), 0)), expected);
}

TEST(Build, ReferenceLayoutMatchesCounter) {
  // The layout is what build_unet allocates; enumerating it avoids 10 GB of weights.
  std::int64_t n = 0;
  for (const auto& spec : parameter_layout(reference_sdxl_config())) n += shape_numel(spec.shape);
  EXPECT_EQ(n, count_params(reference_sdxl_config()));
}

TEST(Build, CloneIsDeep) {
  const auto a = build_unet<float>(toy_config(), 1);
  auto b = a.clone();
  b.mutable_tensor("conv_in.weight")[0] += 1.0f;
  EXPECT_NE(parameter_hash(a), parameter_hash(b));
}

// ---------------------------------------------------------------- forward

TEST(Forward, ToyOutputShape) {
  const auto m = build_unet<float>(toy_config(), 0);
  Rng rng(1);
  const auto z = randn<float>({2, 12, 32, 32}, rng);
  const auto ctx = randn<float>({2, 8, 64}, rng);
  const std::vector<int> t{10, 900};
  EXPECT_EQ(forward(m, z, ctx, nullptr, t).eps.shape(), (Shape{2, 12, 32, 32}));
}

TEST(Forward, TapKeysMatchDescribeAndTapsAreObservationOnly) {
  const auto m = build_unet<float>(toy_config(), 0);
  Rng rng(2);
  const auto in = random_inputs<float>(toy_config(), 2, 8, rng);
  const auto with = run(m, in, true);
  const auto without = run(m, in, false);
  ASSERT_TRUE(with.taps.has_value());
  EXPECT_FALSE(without.taps.has_value());
  std::vector<TapKey> keys;
  for (const auto& [k, _] : *with.taps) keys.push_back(k);
  EXPECT_EQ(keys, describe_taps(toy_config()));
  EXPECT_TRUE(bitwise_equal(with.eps.value(), without.eps.value()));
}

TEST(Forward, InputErrors) {
  const auto c = toy_config();
  const auto m = build_unet<float>(c, 0);
  Rng rng(3);
  const auto ctx = randn<float>({1, 8, 64}, rng);
  const std::vector<int> t{0};
  EXPECT_THROW(forward(m, randn<float>({1, 4, 8, 8}, rng), ctx, nullptr, t), DimensionError);
  EXPECT_THROW(forward(m, randn<float>({1, 12, 6, 6}, rng), ctx, nullptr, t), DimensionError);
  EXPECT_THROW(forward(m, randn<float>({1, 12, 8, 8}, rng), randn<float>({1, 8, 32}, rng), nullptr, t), DimensionError);
  const std::vector<int> bad{1000};
  EXPECT_THROW(forward(m, randn<float>({1, 12, 8, 8}, rng), ctx, nullptr, bad), RangeError);
}

TEST(Forward, DeterministicAndContextSensitive) {
  const auto m = build_unet<float>(toy_config(), 4);
  Rng rng(4);
  auto in = random_inputs<float>(toy_config(), 2, 8, rng);
  const auto a = run(m, in, false).eps.value();
  const auto b = run(m, in, false).eps.value();
  EXPECT_TRUE(bitwise_equal(a, b));
  in.context = randn<float>(in.context.shape(), rng);
  EXPECT_GT(max_abs_diff(a, run(m, in, false).eps.value()), 0.0f);
}

TEST(Forward, InputsAreNotMutated) {
  const auto m = build_unet<float>(toy_config(), 5);
  Rng rng(5);
  const auto in = random_inputs<float>(toy_config(), 1, 8, rng);
  const auto copy = in;
  (void)run(m, in, true);
  EXPECT_TRUE(bitwise_equal(in.z, copy.z));
  EXPECT_TRUE(bitwise_equal(in.context, copy.context));
}

// ---------------------------------------------------------------- taps

TEST(Taps, DepthZeroStageHasNoAttentionKeys) {
  auto c = toy_config();
  c.transformer_depths = {0, 1, 1};
  const auto keys = describe_taps(c);
  auto has = [&](const std::string& k) { return std::find(keys.begin(), keys.end(), k) != keys.end(); };
  EXPECT_TRUE(has("down.1.resnet.1"));
  EXPECT_TRUE(has("down.2.attn.1"));
  for (const auto& k : keys) EXPECT_NE(k.rfind("down.1.attn.", 0), 0u) << k;
}

TEST(Taps, StrippedMidBlock) {
  auto c = toy_config();
  c.mid_block = {false, 0, false};
  const auto keys = describe_taps(c);
  auto has = [&](const std::string& k) { return std::find(keys.begin(), keys.end(), k) != keys.end(); };
  EXPECT_TRUE(has("mid.1.resnet.1"));
  EXPECT_TRUE(has("mid.1.out.1"));
  EXPECT_FALSE(has("mid.1.attn.1"));
  EXPECT_FALSE(has("mid.1.resnet.2"));
}

TEST(Taps, ReferenceKeysMatchIndependentWalk) {
  const auto c = reference_sdxl_config();
  // Walk the config structure directly: every resnet and attention-bearing
  // layer position in each section, plus the mid block entries.
  std::set<std::string> expected;
  const std::vector<int> depths{0, 2, 10};
  for (int s = 1; s <= 3; ++s) {
    for (int j = 1; j <= 2; ++j) {
      expected.insert("down." + std::to_string(s) + ".resnet." + std::to_string(j));
      if (depths[s - 1] > 0) expected.insert("down." + std::to_string(s) + ".attn." + std::to_string(j));
    }
    for (int j = 1; j <= 3; ++j) {
      expected.insert("up." + std::to_string(s) + ".resnet." + std::to_string(j));
      if (depths[3 - s] > 0) expected.insert("up." + std::to_string(s) + ".attn." + std::to_string(j));
    }
  }
  for (const char* k : {"mid.1.resnet.1", "mid.1.attn.1", "mid.1.resnet.2", "mid.1.out.1"}) expected.insert(k);
  const auto keys = describe_taps(c);
  EXPECT_EQ(std::set<std::string>(keys.begin(), keys.end()), expected);
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  const auto up_attn = std::count_if(keys.begin(), keys.end(), [](const std::string& k) {
    return k.rfind("up.", 0) == 0 && k.find(".attn.") != std::string::npos;
  });
  EXPECT_EQ(up_attn, 6);
}

TEST(Taps, PredictedShapesMatchCapturedFor100RandomConfigs) {
  Rng rng(2024);
  for (int i = 0; i < 100; ++i) {
    const auto c = random_toy_config(rng);
    ASSERT_TRUE(validate_config(c).empty()) << to_json(c).dump();
    const auto m = build_unet<float>(c, static_cast<std::uint64_t>(i));
    const std::int64_t side = latent_side(c, pick(rng, 0, 1));
    const auto in = random_inputs<float>(c, 1 + pick(rng, 0, 1), side, rng);
    const auto r = run(m, in, true);
    const auto predicted = predict_tap_shapes(c, in.z.dim(0), side, side);
    ASSERT_EQ(r.taps->size(), predicted.size()) << to_json(c).dump();
    for (const auto& [k, v] : *r.taps) EXPECT_EQ(v.shape(), predicted.at(k)) << k << " in " << to_json(c).dump();
    EXPECT_EQ(r.eps.shape(), in.z.shape());
  }
}

TEST(Taps, CountOracleFor50RandomConfigs) {
  Rng rng(77);
  for (int i = 0; i < 50; ++i) {
    const auto c = random_toy_config(rng);
    EXPECT_EQ(count_params(c), enumerated_params(build_unet<float>(c, 0))) << to_json(c).dump();
  }
}

TEST(Forward, ConditioningSensitivityOnRandomConfigs) {
  Rng rng(99);
  int checked = 0;
  while (checked < 20) {
    const auto c = random_toy_config(rng);
    bool any = c.mid_block.has_attention;
    for (int d : c.transformer_depths) any |= d > 0;
    if (!any) continue;
    const auto m = build_unet<float>(c, 1);
    auto in = random_inputs<float>(c, 1, latent_side(c), rng);
    const auto a = run(m, in, false).eps.value();
    in.context = randn<float>(in.context.shape(), rng);
    EXPECT_GT(max_abs_diff(a, run(m, in, false).eps.value()), 0.0f) << to_json(c).dump();
    ++checked;
  }
}

// ---------------------------------------------------------------- gradients

TEST(Gradients, MeanSquaredOutputMatchesFiniteDifferences) {
  const auto c = grad_config();
  ASSERT_LE(count_params(c), 10000);
  auto m = build_unet<double>(c, 3);
  m.set_requires_grad(true);
  Rng rng(6);
  const auto in = random_inputs<double>(c, 2, 4, rng);
  const Var<double> zero(Tensor<double>(in.z.shape()));
  auto loss_of = [&] { return ops::mse(run(m, in, false).eps, zero); };

  m.zero_grad();
  backward(loss_of());
  std::vector<std::pair<std::string, std::int64_t>> probes;
  std::vector<std::string> paths;
  for (const auto& [p, _] : m.parameters()) paths.push_back(p);
  while (probes.size() < 20) {
    const auto& p = paths[static_cast<std::size_t>(pick(rng, 0, static_cast<int>(paths.size()) - 1))];
    probes.emplace_back(p, pick(rng, 0, static_cast<int>(m.parameter(p).value().numel()) - 1));
  }
  NoGradGuard ng;
  for (const auto& [p, i] : probes) {
    const double analytic = m.parameter(p).grad().empty() ? 0.0 : m.parameter(p).grad()[i];
    const double h = 1e-5;
    const double x0 = m.mutable_tensor(p)[i];
    m.mutable_tensor(p)[i] = x0 + h;
    const double up = loss_of().item();
    m.mutable_tensor(p)[i] = x0 - h;
    const double down = loss_of().item();
    m.mutable_tensor(p)[i] = x0;
    const double numeric = (up - down) / (2 * h);
    // Biases feeding a GroupNorm have exactly zero gradient; the floor keeps
    // central-difference roundoff (~1e-12 at h = 1e-5) from reading as error.
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
    EXPECT_LT(rel, 1e-4) << p << "[" << i << "] analytic " << analytic << " numeric " << numeric;
  }
}

// ---------------------------------------------------------------- checkpoint

TEST(Checkpoint, SaveLoadSaveIsBitwiseIdentical) {
  const auto dir = scratch_dir("ckpt_roundtrip");
  const auto m = build_unet<float>(toy_config(), 11);
  save_checkpoint(m, dir / "a", {{"note", "first"}});
  const auto loaded = load_checkpoint(dir / "a");
  EXPECT_EQ(loaded.model.config(), m.config());
  EXPECT_EQ(parameter_hash(loaded.model), parameter_hash(m));
  EXPECT_EQ(loaded.meta.at("note"), "first");
  save_checkpoint(loaded.model, dir / "b", loaded.meta);
  for (const char* f : {"config.json", "tensors.bin", "tensors.index.json", "meta.json"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
}

TEST(Checkpoint, PrunedProvenanceSurvivesRoundTrip) {
  const auto dir = scratch_dir("ckpt_provenance");
  const auto teacher = build_unet<float>(toy_config(), 1);
  PruningPlan plan{"p", {{RemovalKind::TransformerBlocks, {Section::down, 3, 1}, {1}}}};
  const auto student = inherit_weights(teacher, plan);
  save_checkpoint(student, dir);
  const auto back = load_checkpoint(dir);
  EXPECT_EQ(back.model.provenance, student.provenance);
  EXPECT_EQ(back.model.config(), student.config());
}

TEST(Checkpoint, TensorArchiveRoundTripsBothDtypes) {
  const auto dir = scratch_dir("archive");
  Rng rng(8);
  std::vector<NamedTensor<double>> d{{"scalar", Tensor<double>(Shape{}, 3.5)},
                                     {"vec", randn<double>({5}, rng)},
                                     {"four/d", randn<double>({2, 3, 1, 2}, rng)}};
  write_tensor_archive(dir, "d", d);
  const auto back = read_tensor_archive<double>(dir, "d");
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back[i].first, d[i].first);
    EXPECT_TRUE(bitwise_equal(back[i].second, d[i].second));
  }
  EXPECT_THROW(read_tensor_archive<float>(dir, "d"), IoError);
  const auto index = read_json_file(dir / "d.index.json");
  EXPECT_EQ(index.at("records").size(), 3u);
  EXPECT_EQ(index.at("records")[2].at("dims"), (nlohmann::json{2, 3, 1, 2}));
}

TEST(Checkpoint, MissingOrTruncatedArchivesFail) {
  const auto dir = scratch_dir("ckpt_bad");
  EXPECT_THROW(load_checkpoint(dir / "nope"), IoError);
  save_checkpoint(build_unet<float>(micro_config(), 0), dir / "c");
  std::filesystem::resize_file(dir / "c" / "tensors.bin", 100);
  EXPECT_THROW(load_checkpoint(dir / "c"), IoError);
}
