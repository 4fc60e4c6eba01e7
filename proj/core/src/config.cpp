#include "slimunet/config.hpp"

#include <numeric>
#include <regex>
#include <set>

#include "slimunet/error.hpp"

namespace slimunet {

const char* to_string(Section s) {
  switch (s) {
    case Section::down: return "down";
    case Section::mid: return "mid";
    case Section::up: return "up";
  }
  return "?";
}

Section section_from_string(const std::string& s) {
  if (s == "down") return Section::down;
  if (s == "mid") return Section::mid;
  if (s == "up") return Section::up;
  throw ConfigError("invalid section", {"section: unknown value '" + s + "'"});
}

std::string attention_layer_path(Section section, int stage, int layer) {
  return std::string(to_string(section)) + "." + std::to_string(stage) + ".attn." + std::to_string(layer);
}

int UNetConfig::layer_depth(Section section, int stage, int layer) const {
  if (section == Section::mid) return mid_block.has_attention ? mid_block.attention_depth : 0;
  auto it = attention_layer_depths.find(attention_layer_path(section, stage, layer));
  if (it != attention_layer_depths.end()) return it->second;
  return stage_depth(encoder_stage(section, stage));
}

int norm_groups(int channels) { return std::gcd(32, channels); }

std::vector<std::string> validate_config(const UNetConfig& c) {
  std::vector<std::string> v;
  auto positive = [&](int value, const char* field) {
    if (value < 1) v.push_back(std::string(field) + ": must be >= 1, got " + std::to_string(value));
  };
  positive(c.in_channels, "in_channels");
  positive(c.out_channels, "out_channels");
  positive(c.base_channels, "base_channels");
  positive(c.resnets_per_down_stage, "resnets_per_down_stage");
  positive(c.resnets_per_up_stage, "resnets_per_up_stage");
  positive(c.attention_head_dim, "attention_head_dim");
  positive(c.time_embed_dim, "time_embed_dim");
  if (c.out_channels != c.in_channels) {
    v.push_back("out_channels: must equal in_channels (" + std::to_string(c.in_channels) + "), got " +
                std::to_string(c.out_channels));
  }
  if (c.pooled_embed_dim < 0) v.push_back("pooled_embed_dim: must be >= 0");
  if (c.channel_multipliers.empty()) v.push_back("channel_multipliers: at least one stage required");
  for (std::size_t i = 0; i < c.channel_multipliers.size(); ++i) {
    if (c.channel_multipliers[i] < 1) {
      v.push_back("channel_multipliers[" + std::to_string(i) + "]: must be >= 1");
    }
  }
  if (c.channel_multipliers.size() != c.transformer_depths.size()) {
    v.push_back("transformer_depths/channel_multipliers: lengths differ (" +
                std::to_string(c.transformer_depths.size()) + " vs " + std::to_string(c.channel_multipliers.size()) +
                ")");
  }
  // Skip connections: conv_in + every down resnet + every downsampler must
  // feed exactly one up resnet.
  if (c.resnets_per_up_stage != c.resnets_per_down_stage + 1) {
    v.push_back("resnets_per_up_stage: must equal resnets_per_down_stage + 1 (" +
                std::to_string(c.resnets_per_down_stage + 1) + "), got " + std::to_string(c.resnets_per_up_stage));
  }
  const bool shapes_ok = !c.channel_multipliers.empty() &&
                         c.channel_multipliers.size() == c.transformer_depths.size() && c.attention_head_dim >= 1 &&
                         c.base_channels >= 1;
  bool any_attention = false;
  if (shapes_ok) {
    for (int s = 1; s <= c.stages(); ++s) {
      const int depth = c.stage_depth(s);
      if (depth < 0) {
        v.push_back("transformer_depths[" + std::to_string(s - 1) + "]: must be >= 0");
      } else if (depth > 0) {
        any_attention = true;
        if (c.channels(s) % c.attention_head_dim != 0) {
          v.push_back("base_channels/attention_head_dim: stage " + std::to_string(s) + " width " +
                      std::to_string(c.channels(s)) + " not divisible by attention_head_dim " +
                      std::to_string(c.attention_head_dim));
        }
      }
    }
    if (c.mid_block.has_attention) {
      any_attention = true;
      if (c.mid_block.attention_depth < 1) v.push_back("mid_block.attention_depth: must be >= 1 when has_attention");
      if (c.channels(c.stages()) % c.attention_head_dim != 0) {
        v.push_back("base_channels/attention_head_dim: mid width " + std::to_string(c.channels(c.stages())) +
                    " not divisible by attention_head_dim " + std::to_string(c.attention_head_dim));
      }
    } else if (c.mid_block.attention_depth != 0) {
      v.push_back("mid_block.attention_depth: must be 0 when has_attention is false");
    }
    static const std::regex key_re(R"((down|up)\.(\d+)\.attn\.(\d+))");
    for (const auto& [key, depth] : c.attention_layer_depths) {
      std::smatch m;
      if (!std::regex_match(key, m, key_re)) {
        v.push_back("attention_layer_depths: malformed layer key '" + key + "'");
        continue;
      }
      const Section sec = section_from_string(m[1]);
      const int stage = std::stoi(m[2]);
      const int layer = std::stoi(m[3]);
      if (stage < 1 || stage > c.stages() || layer < 1 || layer > c.attention_layers(sec)) {
        v.push_back("attention_layer_depths: layer '" + key + "' out of range");
        continue;
      }
      const int stage_default = c.stage_depth(c.encoder_stage(sec, stage));
      if (depth < 0 || depth > stage_default) {
        v.push_back("attention_layer_depths: depth of '" + key + "' must lie in [0, " +
                    std::to_string(stage_default) + "], got " + std::to_string(depth));
      }
    }
  }
  if (any_attention && c.context_dim < 1) v.push_back("context_dim: must be >= 1 when attention is present");
  return v;
}

UNetConfig reference_sdxl_config() {
  UNetConfig c;
  c.in_channels = 4;
  c.out_channels = 4;
  c.base_channels = 320;
  c.channel_multipliers = {1, 2, 4};
  c.resnets_per_down_stage = 2;
  c.resnets_per_up_stage = 3;
  c.transformer_depths = {0, 2, 10};
  c.context_dim = 2048;
  c.attention_head_dim = 64;
  c.time_embed_dim = 1280;
  c.pooled_embed_dim = 2816;
  c.mid_block = {true, 10, true};
  return c;
}

UNetConfig toy_config() {
  UNetConfig c;
  c.in_channels = 12;
  c.out_channels = 12;
  c.base_channels = 32;
  c.channel_multipliers = {1, 2, 4};
  c.resnets_per_down_stage = 2;
  c.resnets_per_up_stage = 3;
  c.transformer_depths = {0, 1, 2};
  c.context_dim = 64;
  c.attention_head_dim = 16;
  c.time_embed_dim = 128;
  c.pooled_embed_dim = 0;
  c.mid_block = {true, 2, true};
  return c;
}

nlohmann::json to_json(const UNetConfig& c) {
  nlohmann::json j{
      {"in_channels", c.in_channels},
      {"out_channels", c.out_channels},
      {"base_channels", c.base_channels},
      {"channel_multipliers", c.channel_multipliers},
      {"resnets_per_down_stage", c.resnets_per_down_stage},
      {"resnets_per_up_stage", c.resnets_per_up_stage},
      {"transformer_depths", c.transformer_depths},
      {"context_dim", c.context_dim},
      {"attention_head_dim", c.attention_head_dim},
      {"time_embed_dim", c.time_embed_dim},
      {"pooled_embed_dim", c.pooled_embed_dim},
      {"mid_block",
       {{"has_attention", c.mid_block.has_attention},
        {"attention_depth", c.mid_block.attention_depth},
        {"has_second_resnet", c.mid_block.has_second_resnet}}},
  };
  if (!c.attention_layer_depths.empty()) j["attention_layer_depths"] = c.attention_layer_depths;
  return j;
}

namespace {

template <class V>
void read_field(const nlohmann::json& j, const char* key, V& out, std::vector<std::string>& errors) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    errors.push_back(std::string(key) + ": " + e.what());
  }
}

}  // namespace

UNetConfig config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{
      "in_channels",     "out_channels",       "base_channels",   "channel_multipliers",
      "resnets_per_down_stage", "resnets_per_up_stage", "transformer_depths", "context_dim",
      "attention_head_dim", "time_embed_dim", "pooled_embed_dim", "mid_block",
      "attention_layer_depths"};
  static const std::set<std::string> required{
      "in_channels",  "out_channels",        "base_channels",        "channel_multipliers",
      "resnets_per_down_stage", "resnets_per_up_stage", "transformer_depths", "context_dim",
      "attention_head_dim", "time_embed_dim", "mid_block"};
  static const std::set<std::string> mid_known{"has_attention", "attention_depth", "has_second_resnet"};

  std::vector<std::string> errors;
  if (!j.is_object()) throw ConfigError("invalid U-Net config", {"config: expected a JSON object"});
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) errors.push_back(key + ": unknown key");
  }
  for (const auto& key : required) {
    if (!j.contains(key)) errors.push_back(key + ": missing");
  }
  UNetConfig c;
  c.pooled_embed_dim = 0;
  read_field(j, "in_channels", c.in_channels, errors);
  read_field(j, "out_channels", c.out_channels, errors);
  read_field(j, "base_channels", c.base_channels, errors);
  read_field(j, "channel_multipliers", c.channel_multipliers, errors);
  read_field(j, "resnets_per_down_stage", c.resnets_per_down_stage, errors);
  read_field(j, "resnets_per_up_stage", c.resnets_per_up_stage, errors);
  read_field(j, "transformer_depths", c.transformer_depths, errors);
  read_field(j, "context_dim", c.context_dim, errors);
  read_field(j, "attention_head_dim", c.attention_head_dim, errors);
  read_field(j, "time_embed_dim", c.time_embed_dim, errors);
  read_field(j, "pooled_embed_dim", c.pooled_embed_dim, errors);
  read_field(j, "attention_layer_depths", c.attention_layer_depths, errors);
  if (j.contains("mid_block")) {
    const auto& m = j.at("mid_block");
    if (!m.is_object()) {
      errors.push_back("mid_block: expected an object");
    } else {
      for (const auto& [key, _] : m.items()) {
        if (!mid_known.count(key)) errors.push_back("mid_block." + key + ": unknown key");
      }
      read_field(m, "has_attention", c.mid_block.has_attention, errors);
      read_field(m, "attention_depth", c.mid_block.attention_depth, errors);
      read_field(m, "has_second_resnet", c.mid_block.has_second_resnet, errors);
      if (!c.mid_block.has_attention) c.mid_block.attention_depth = 0;
    }
  }
  if (!errors.empty()) throw ConfigError("invalid U-Net config", std::move(errors));
  return c;
}

}  // namespace slimunet
