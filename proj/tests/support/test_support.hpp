#pragma once

// Shared generators and oracles for the unit and acceptance tests.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "slimunet/backbone.hpp"
#include "slimunet/pruning.hpp"
#include "slimunet/random.hpp"

namespace slimunet::testing {

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("slimunet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline int pick(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

/// Small random config that builds: widths divisible by the head dim,
/// optional pooled path, random mid block.
inline UNetConfig random_toy_config(Rng& rng) {
  UNetConfig c;
  c.in_channels = c.out_channels = pick(rng, 1, 3) * 4;
  c.attention_head_dim = pick(rng, 0, 1) ? 4 : 8;
  c.base_channels = 8 * pick(rng, 1, 2);
  const int stages = pick(rng, 1, 3);
  c.channel_multipliers.clear();
  c.transformer_depths.clear();
  int mult = 1;
  for (int s = 0; s < stages; ++s) {
    if (s > 0) mult *= pick(rng, 1, 2);
    c.channel_multipliers.push_back(mult);
    c.transformer_depths.push_back(pick(rng, 0, 3));
  }
  c.resnets_per_down_stage = pick(rng, 1, 2);
  c.resnets_per_up_stage = c.resnets_per_down_stage + 1;
  c.context_dim = 4 * pick(rng, 1, 3);
  c.time_embed_dim = 8 * pick(rng, 1, 2);
  c.pooled_embed_dim = pick(rng, 0, 1) ? 0 : 6;
  c.mid_block.has_attention = pick(rng, 0, 3) > 0;
  c.mid_block.attention_depth = c.mid_block.has_attention ? pick(rng, 1, 3) : 0;
  c.mid_block.has_second_resnet = pick(rng, 0, 3) > 0;
  return c;
}

/// Random plan that validates against `c`: each attention layer loses a
/// random subset of blocks (sometimes all of them, sometimes via
/// WholeAttentionLayer) and the mid elements are dropped at random.
inline PruningPlan random_valid_plan(const UNetConfig& c, Rng& rng) {
  PruningPlan p{"random", {}};
  for (Section sec : {Section::down, Section::up}) {
    for (int st = 1; st <= c.stages(); ++st) {
      for (int j = 1; j <= c.attention_layers(sec); ++j) {
        const int depth = c.layer_depth(sec, st, j);
        if (depth == 0 || pick(rng, 0, 2) == 0) continue;
        if (pick(rng, 0, 4) == 0) {
          p.directives.push_back({RemovalKind::WholeAttentionLayer, {sec, st, j}, {}});
          continue;
        }
        std::set<int> blocks;
        for (int b = 1; b <= depth; ++b) {
          if (pick(rng, 0, 1)) blocks.insert(b);
        }
        if (blocks.empty()) blocks.insert(pick(rng, 1, depth));
        p.directives.push_back({RemovalKind::TransformerBlocks, {sec, st, j}, blocks});
      }
    }
  }
  if (c.mid_block.has_attention && pick(rng, 0, 1)) {
    p.directives.push_back({RemovalKind::MidAttention, {Section::mid, 1, 1}, {}});
  }
  if (c.mid_block.has_second_resnet && pick(rng, 0, 1)) {
    p.directives.push_back({RemovalKind::MidSecondResnet, {Section::mid, 1, 1}, {}});
  }
  return p;
}

/// Latent side that every stage can halve down to.
inline std::int64_t latent_side(const UNetConfig& c, int factor = 1) { return std::int64_t{1} << (c.stages() - 1) << factor; }

template <class T>
struct ForwardInputs {
  Tensor<T> z;
  Tensor<T> context;
  std::optional<Tensor<T>> pooled;
  std::vector<int> t;
};

template <class T>
ForwardInputs<T> random_inputs(const UNetConfig& c, std::int64_t batch, std::int64_t side, Rng& rng, int T_max = 1000) {
  ForwardInputs<T> in{randn<T>({batch, c.in_channels, side, side}, rng),
                      randn<T>({batch, 3, c.context_dim}, rng),
                      std::nullopt,
                      {}};
  if (c.pooled_embed_dim > 0) in.pooled = randn<T>({batch, c.pooled_embed_dim}, rng);
  for (std::int64_t b = 0; b < batch; ++b) in.t.push_back(pick(rng, 0, T_max - 1));
  return in;
}

template <class T>
ForwardResult<T> run(const BasicUNet<T>& m, const ForwardInputs<T>& in, bool taps) {
  return forward(m, in.z, in.context, in.pooled ? &*in.pooled : nullptr, in.t, {taps, 1000});
}

/// Brute-force count: enumerate the built model's tensors.
template <class T>
std::int64_t enumerated_params(const BasicUNet<T>& m) {
  std::int64_t n = 0;
  for (const auto& [path, v] : m.parameters()) n += v.value().numel();
  return n;
}

}  // namespace slimunet::testing
