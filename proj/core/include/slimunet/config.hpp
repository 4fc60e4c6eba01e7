#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace slimunet {

enum class Section { down, mid, up };

const char* to_string(Section s);
Section section_from_string(const std::string& s);

struct MidBlockConfig {
  bool has_attention = true;
  int attention_depth = 1;  // 0 whenever has_attention is false
  bool has_second_resnet = true;

  friend bool operator==(const MidBlockConfig&, const MidBlockConfig&) = default;
};

/// Complete architectural description of a conditional U-Net denoiser.
///
/// Stage indices are 1-based everywhere outside this struct's vectors. Up
/// stage u mirrors down stage (stages() + 1 - u), so up stage 1 is the
/// deepest decoder stage.
struct UNetConfig {
  int in_channels = 4;
  int out_channels = 4;
  int base_channels = 320;
  std::vector<int> channel_multipliers{1, 2, 4};
  int resnets_per_down_stage = 2;
  int resnets_per_up_stage = 3;
  std::vector<int> transformer_depths{0, 2, 10};
  int context_dim = 2048;
  int attention_head_dim = 64;
  int time_embed_dim = 1280;
  int pooled_embed_dim = 0;
  MidBlockConfig mid_block;
  /// Per-attention-layer depth overrides keyed by layer path
  /// ("down.3.attn.1"). Present only once a layer diverges from its stage
  /// default; a depth of 0 means the layer was deleted.
  std::map<std::string, int> attention_layer_depths;

  int stages() const { return static_cast<int>(channel_multipliers.size()); }
  /// Channel width of 1-based encoder stage s.
  int channels(int stage) const { return base_channels * channel_multipliers.at(stage - 1); }
  /// Default transformer depth of the attention layers mirrored at encoder stage s.
  int stage_depth(int stage) const { return transformer_depths.at(stage - 1); }
  /// Encoder stage mirrored by a section/stage pair (identity for down).
  int encoder_stage(Section section, int stage) const { return section == Section::up ? stages() + 1 - stage : stage; }
  int attention_layers(Section section) const {
    return section == Section::down ? resnets_per_down_stage : resnets_per_up_stage;
  }
  /// Effective transformer depth of one attention layer after any pruning.
  int layer_depth(Section section, int stage, int layer) const;

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

std::string attention_layer_path(Section section, int stage, int layer);

/// GroupNorm group count used for a channel width.
int norm_groups(int channels);

/// Every invariant violation, each naming the offending field. Empty iff the
/// config can be built.
std::vector<std::string> validate_config(const UNetConfig& config);

/// Reference full-scale configuration reproducing the SDXL-base U-Net.
UNetConfig reference_sdxl_config();

/// Small configuration that trains in minutes on a CPU.
UNetConfig toy_config();

nlohmann::json to_json(const UNetConfig& config);
/// Parses a config object; unknown keys raise ConfigError.
UNetConfig config_from_json(const nlohmann::json& j);

}  // namespace slimunet
