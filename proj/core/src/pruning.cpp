#include "slimunet/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <regex>

#include "slimunet/error.hpp"

namespace slimunet {
namespace {

constexpr Site kMidSite{Section::mid, 1, 1};

bool is_mid_kind(RemovalKind k) { return k == RemovalKind::MidAttention || k == RemovalKind::MidSecondResnet; }

std::string site_str(const Site& s) {
  return s.section == Section::mid ? std::string("mid") : attention_layer_path(s.section, s.stage, s.attn_layer);
}

std::string describe(std::size_t i, const RemovalDirective& d) {
  return "directive[" + std::to_string(i) + "] " + to_string(d.kind) + " @ " + site_str(d.site);
}

/// Current transformer depth at a site, or -1 if the site does not exist.
int site_depth(const UNetConfig& c, const Site& s) {
  if (s.section == Section::mid) return c.layer_depth(Section::mid, 1, 1);
  if (s.stage < 1 || s.stage > c.stages() || s.attn_layer < 1 || s.attn_layer > c.attention_layers(s.section)) return -1;
  return c.layer_depth(s.section, s.stage, s.attn_layer);
}

/// Blocks removed per site plus mid-resnet flag. Assumes a validated plan.
struct Removals {
  std::map<Site, std::set<int>> blocks;
  bool mid_second_resnet = false;
};

Removals collect(const UNetConfig& c, const PruningPlan& plan) {
  Removals r;
  for (const auto& d : plan.directives) {
    switch (d.kind) {
      case RemovalKind::TransformerBlocks:
        r.blocks[d.site.section == Section::mid ? kMidSite : d.site].insert(d.blocks.begin(), d.blocks.end());
        break;
      case RemovalKind::MidAttention:
      case RemovalKind::WholeAttentionLayer: {
        auto& set = r.blocks[d.kind == RemovalKind::MidAttention ? kMidSite : d.site];
        for (int b = 1; b <= site_depth(c, d.kind == RemovalKind::MidAttention ? kMidSite : d.site); ++b) set.insert(b);
        break;
      }
      case RemovalKind::MidSecondResnet:
        r.mid_second_resnet = true;
        break;
    }
  }
  return r;
}

/// Surviving original block indices, ascending.
std::vector<int> survivors(int depth, const std::set<int>& removed) {
  std::vector<int> out;
  for (int b = 1; b <= depth; ++b) {
    if (!removed.count(b)) out.push_back(b);
  }
  return out;
}

void require_valid_plan(const UNetConfig& c, const PruningPlan& plan) {
  if (auto v = validate_config(c); !v.empty()) throw ConfigError("invalid config", std::move(v));
  if (auto v = validate_plan(c, plan); !v.empty()) throw ConfigError("invalid plan '" + plan.name + "'", std::move(v));
}

RemovalDirective blocks_directive(Section sec, int stage, int layer, std::set<int> blocks) {
  return {RemovalKind::TransformerBlocks, {sec, stage, layer}, std::move(blocks)};
}

PruningPlan merge_steps(std::string name, const std::vector<RemovalDirective>& steps) {
  PruningPlan plan{std::move(name), {}};
  for (const auto& s : steps) {
    if (s.kind == RemovalKind::TransformerBlocks) {
      auto it = std::find_if(plan.directives.begin(), plan.directives.end(), [&](const RemovalDirective& d) {
        return d.kind == RemovalKind::TransformerBlocks && d.site == s.site;
      });
      if (it != plan.directives.end()) {
        it->blocks.insert(s.blocks.begin(), s.blocks.end());
        continue;
      }
    }
    plan.directives.push_back(s);
  }
  return plan;
}

// Closed-form parameter counts of the building blocks.
std::int64_t conv_p(std::int64_t k, std::int64_t cin, std::int64_t cout) { return k * k * cin * cout + cout; }
std::int64_t linear_p(std::int64_t in, std::int64_t out, bool bias) { return in * out + (bias ? out : 0); }
std::int64_t norm_p(std::int64_t c) { return 2 * c; }

std::int64_t resnet_p(std::int64_t cin, std::int64_t cout, std::int64_t temb) {
  return norm_p(cin) + conv_p(3, cin, cout) + linear_p(temb, cout, true) + norm_p(cout) + conv_p(3, cout, cout) +
         (cin != cout ? conv_p(1, cin, cout) : 0);
}

std::int64_t block_p(std::int64_t c, std::int64_t ctx) {
  const std::int64_t self_attn = 3 * c * c + linear_p(c, c, true);
  const std::int64_t cross_attn = c * c + 2 * ctx * c + linear_p(c, c, true);
  const std::int64_t ff = linear_p(c, 8 * c, true) + linear_p(4 * c, c, true);
  return 3 * norm_p(c) + self_attn + cross_attn + ff;
}

std::int64_t attention_p(std::int64_t c, std::int64_t depth, std::int64_t ctx) {
  if (depth == 0) return 0;
  return norm_p(c) + 2 * linear_p(c, c, true) + depth * block_p(c, ctx);
}

struct FlopCounter {
  const UNetConfig& c;
  std::int64_t ctx_tokens;
  FlopBreakdown f;

  void resnet(std::int64_t cin, std::int64_t cout, std::int64_t hw) {
    f.conv += conv_macs(3, cin, cout, 1, 1) * hw + conv_macs(3, cout, cout, 1, 1) * hw;
    if (cin != cout) f.conv += cin * cout * hw;
    f.linear += std::int64_t{c.time_embed_dim} * cout;
  }
  void attention(std::int64_t ch, int depth, std::int64_t n) {
    if (depth == 0) return;
    const std::int64_t ctx = c.context_dim;
    f.attention += 2 * n * ch * ch;
    for (int b = 0; b < depth; ++b) {
      f.attention += 4 * n * ch * ch + 2 * n * n * ch;
      f.attention += 2 * n * ch * ch + 2 * ctx_tokens * ctx * ch + 2 * n * ctx_tokens * ch;
      f.feedforward += n * ch * 8 * ch + n * 4 * ch * ch;
    }
  }
};

}  // namespace

const char* to_string(RemovalKind k) {
  switch (k) {
    case RemovalKind::TransformerBlocks: return "TransformerBlocks";
    case RemovalKind::MidAttention: return "MidAttention";
    case RemovalKind::MidSecondResnet: return "MidSecondResnet";
    case RemovalKind::WholeAttentionLayer: return "WholeAttentionLayer";
  }
  return "?";
}

RemovalKind removal_kind_from_string(const std::string& s) {
  for (auto k : {RemovalKind::TransformerBlocks, RemovalKind::MidAttention, RemovalKind::MidSecondResnet,
                 RemovalKind::WholeAttentionLayer}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown removal kind '" + s + "'", {"kind: '" + s + "' is not a removal kind"});
}

PruningPlan canonical_plan(CanonicalPlan which) {
  const std::set<int> ssd_deep{4, 5, 7, 8, 9, 10};
  const std::set<int> second{2};
  PruningPlan p;
  p.directives.push_back({RemovalKind::MidAttention, kMidSite, {}});
  p.directives.push_back({RemovalKind::MidSecondResnet, kMidSite, {}});
  if (which == CanonicalPlan::SSD_1B) {
    p.name = "SSD_1B";
    for (int j : {1, 2}) p.directives.push_back(blocks_directive(Section::down, 3, j, ssd_deep));
    for (int j : {1, 2}) p.directives.push_back(blocks_directive(Section::up, 1, j, ssd_deep));
    for (int j : {2, 3}) p.directives.push_back(blocks_directive(Section::up, 2, j, second));
  } else {
    p.name = "VEGA";
    const std::set<int> keep_two{3, 4, 5, 6, 7, 8, 9, 10};
    p.directives.push_back(blocks_directive(Section::down, 3, 1, keep_two));
    p.directives.push_back(blocks_directive(Section::down, 3, 2, {2, 4, 5, 6, 7, 8, 9, 10}));
    for (int j : {1, 2}) p.directives.push_back(blocks_directive(Section::down, 2, j, second));
    for (int j : {1, 2, 3}) p.directives.push_back(blocks_directive(Section::up, 1, j, keep_two));
    for (int j : {1, 2, 3}) p.directives.push_back(blocks_directive(Section::up, 2, j, second));
  }
  return p;
}

PruningPlan canonical_plan(const std::string& name) {
  std::string key;
  for (char ch : name) {
    if (ch != '_' && ch != '-') key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  if (key == "ssd1b") return canonical_plan(CanonicalPlan::SSD_1B);
  if (key == "vega") return canonical_plan(CanonicalPlan::VEGA);
  throw ConfigError("unknown canonical plan '" + name + "'", {"plan: expected SSD_1B or VEGA"});
}

nlohmann::json to_json(const PruningPlan& plan) {
  nlohmann::json ds = nlohmann::json::array();
  for (const auto& d : plan.directives) {
    ds.push_back({{"kind", to_string(d.kind)},
                  {"section", to_string(d.site.section)},
                  {"stage", d.site.stage},
                  {"attn_layer", d.site.attn_layer},
                  {"blocks", std::vector<int>(d.blocks.begin(), d.blocks.end())}});
  }
  return {{"name", plan.name}, {"directives", ds}};
}

PruningPlan plan_from_json(const nlohmann::json& j) {
  std::vector<std::string> errors;
  if (!j.is_object()) throw ConfigError("plan must be a JSON object", {"plan: not an object"});
  for (const auto& [k, _] : j.items()) {
    if (k != "name" && k != "directives") errors.push_back("plan: unknown key '" + k + "'");
  }
  PruningPlan plan;
  try {
    plan.name = j.value("name", std::string{});
    if (!j.contains("directives") || !j.at("directives").is_array()) {
      errors.push_back("directives: required array");
    } else {
      std::size_t i = 0;
      for (const auto& e : j.at("directives")) {
        const std::string where = "directives[" + std::to_string(i++) + "]";
        for (const auto& [k, _] : e.items()) {
          if (k != "kind" && k != "section" && k != "stage" && k != "attn_layer" && k != "blocks") {
            errors.push_back(where + ": unknown key '" + k + "'");
          }
        }
        if (!e.contains("kind") || !e.contains("section")) {
          errors.push_back(where + ": 'kind' and 'section' are required");
          continue;
        }
        RemovalDirective d;
        d.kind = removal_kind_from_string(e.at("kind").get<std::string>());
        d.site.section = section_from_string(e.at("section").get<std::string>());
        if (d.site.section == Section::mid) {
          d.site.stage = 1;
          d.site.attn_layer = 1;
        } else {
          if (!e.contains("stage") || !e.contains("attn_layer")) {
            errors.push_back(where + ": 'stage' and 'attn_layer' are required outside the mid block");
            continue;
          }
          d.site.stage = e.at("stage").get<int>();
          d.site.attn_layer = e.at("attn_layer").get<int>();
        }
        const auto blocks = e.value("blocks", std::vector<int>{});
        d.blocks.insert(blocks.begin(), blocks.end());
        if (d.blocks.size() != blocks.size()) errors.push_back(where + ": repeated block index");
        if (d.kind != RemovalKind::TransformerBlocks && !d.blocks.empty()) {
          errors.push_back(where + ": blocks only apply to TransformerBlocks");
        }
        plan.directives.push_back(std::move(d));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    errors.push_back(std::string("plan: ") + e.what());
  }
  if (!errors.empty()) throw ConfigError("malformed plan", std::move(errors));
  return plan;
}

std::vector<std::string> validate_plan(const UNetConfig& c, const PruningPlan& plan) {
  std::vector<std::string> v;
  std::set<std::pair<Site, RemovalKind>> seen;
  std::map<Site, std::set<int>> claimed;
  for (std::size_t i = 0; i < plan.directives.size(); ++i) {
    const auto& d = plan.directives[i];
    const std::string who = describe(i, d);
    if (!seen.insert({d.site, d.kind}).second) {
      v.push_back(who + ": duplicate directive");
      continue;
    }
    if (is_mid_kind(d.kind) && d.site.section != Section::mid) {
      v.push_back(who + ": mid-block removals must use section mid");
      continue;
    }
    if (d.kind == RemovalKind::WholeAttentionLayer && d.site.section == Section::mid) {
      v.push_back(who + ": use MidAttention for the mid block");
      continue;
    }
    if (d.kind == RemovalKind::MidSecondResnet) {
      if (!c.mid_block.has_second_resnet) v.push_back(who + ": mid block has no second resnet");
      continue;
    }
    if (d.kind != RemovalKind::TransformerBlocks && !d.blocks.empty()) {
      v.push_back(who + ": blocks only apply to TransformerBlocks");
    }
    const Site site = d.site.section == Section::mid ? kMidSite : d.site;
    const int depth = site_depth(c, site);
    if (depth < 0) {
      v.push_back(who + ": stage/layer out of range");
      continue;
    }
    if (depth == 0) {
      v.push_back(who + ": targets a layer with transformer depth 0");
      continue;
    }
    std::set<int> targets;
    if (d.kind == RemovalKind::TransformerBlocks) {
      if (d.blocks.empty()) v.push_back(who + ": empty block set");
      for (int b : d.blocks) {
        if (b < 1 || b > depth) {
          v.push_back(who + ": block " + std::to_string(b) + " outside [1, " + std::to_string(depth) + "]");
        } else {
          targets.insert(b);
        }
      }
    } else {
      for (int b = 1; b <= depth; ++b) targets.insert(b);
    }
    auto& mine = claimed[site];
    for (int b : targets) {
      if (!mine.insert(b).second) v.push_back(who + ": block " + std::to_string(b) + " already removed by another directive");
    }
  }
  return v;
}

UNetConfig apply_plan(const UNetConfig& config, const PruningPlan& plan) {
  require_valid_plan(config, plan);
  const Removals r = collect(config, plan);
  UNetConfig out = config;
  for (const auto& [site, removed] : r.blocks) {
    const int depth = site_depth(config, site) - static_cast<int>(removed.size());
    if (site.section == Section::mid) {
      out.mid_block.attention_depth = depth;
      out.mid_block.has_attention = depth > 0;
      continue;
    }
    const std::string key = attention_layer_path(site.section, site.stage, site.attn_layer);
    if (depth == config.stage_depth(config.encoder_stage(site.section, site.stage))) {
      out.attention_layer_depths.erase(key);
    } else {
      out.attention_layer_depths[key] = depth;
    }
  }
  if (r.mid_second_resnet) out.mid_block.has_second_resnet = false;
  return out;
}

UNetModel inherit_weights(const UNetModel& teacher, const PruningPlan& plan) {
  const UNetConfig& tc = teacher.config();
  UNetConfig sc = apply_plan(tc, plan);
  const Removals r = collect(tc, plan);

  static const std::regex block_re(R"(^((?:down|up|mid)\.\d+\.attn\.\d+)\.blocks\.(\d+)\.(.+)$)");
  std::map<std::string, std::vector<int>> keep;  // layer prefix -> surviving teacher blocks
  auto survivors_of = [&](const std::string& prefix, Section sec, int stage, int layer) -> const std::vector<int>& {
    auto it = keep.find(prefix);
    if (it != keep.end()) return it->second;
    const Site site = sec == Section::mid ? kMidSite : Site{sec, stage, layer};
    auto rit = r.blocks.find(site);
    static const std::set<int> none;
    return keep.emplace(prefix, survivors(site_depth(tc, site), rit == r.blocks.end() ? none : rit->second))
        .first->second;
  };

  std::map<std::string, Tensor<float>> tensors;
  std::map<std::string, std::string> provenance;
  for (const auto& spec : parameter_layout(sc)) {
    std::string src = spec.path;
    std::smatch m;
    if (std::regex_match(spec.path, m, block_re)) {
      const std::string prefix = m[1];
      const int b = std::stoi(m[2]);
      static const std::regex layer_re(R"(^(down|up|mid)\.(\d+)\.attn\.(\d+)$)");
      std::smatch lm;
      std::regex_match(prefix, lm, layer_re);
      const auto& surv = survivors_of(prefix, section_from_string(lm[1]), std::stoi(lm[2]), std::stoi(lm[3]));
      const std::string teacher_block = prefix + ".blocks." + std::to_string(surv.at(b - 1));
      src = teacher_block + "." + m[3].str();
      const std::string student_block = prefix + ".blocks." + std::to_string(b);
      auto pit = teacher.provenance.find(teacher_block);
      const std::string origin = pit == teacher.provenance.end() ? teacher_block : pit->second;
      if (origin != student_block) provenance[student_block] = origin;
    }
    const auto& t = teacher.parameter(src).value();
    if (t.shape() != spec.shape) {
      throw DimensionError("inherited tensor '" + src + "' has shape " + shape_str(t.shape()) + ", student expects " +
                           shape_str(spec.shape));
    }
    tensors.emplace(spec.path, t);
  }
  UNetModel student(std::move(sc), std::move(tensors));
  student.provenance = std::move(provenance);
  return student;
}

std::int64_t count_params(const UNetConfig& c) {
  if (auto v = validate_config(c); !v.empty()) throw ConfigError("invalid config", std::move(v));
  const std::int64_t temb = c.time_embed_dim;
  const std::int64_t ctx = c.context_dim;
  const std::int64_t base = c.base_channels;
  const int S = c.stages();
  std::int64_t n = conv_p(3, c.in_channels, base) + linear_p(base, temb, true) + linear_p(temb, temb, true);
  if (c.pooled_embed_dim > 0) n += linear_p(c.pooled_embed_dim, temb, true) + linear_p(temb, temb, true);
  std::int64_t ch = base;
  for (int s = 1; s <= S; ++s) {
    const std::int64_t out = c.channels(s);
    for (int j = 1; j <= c.resnets_per_down_stage; ++j) {
      n += resnet_p(j == 1 ? ch : out, out, temb) + attention_p(out, c.layer_depth(Section::down, s, j), ctx);
    }
    if (s < S) n += conv_p(3, out, out);
    ch = out;
  }
  const std::int64_t mid = c.channels(S);
  n += resnet_p(mid, mid, temb);
  if (c.mid_block.has_attention) n += attention_p(mid, c.mid_block.attention_depth, ctx);
  if (c.mid_block.has_second_resnet) n += resnet_p(mid, mid, temb);
  std::int64_t prev = mid;
  for (int u = 1; u <= S; ++u) {
    const int s = S + 1 - u;
    const std::int64_t out = c.channels(s);
    const std::int64_t skip_last = s >= 2 ? c.channels(s - 1) : base;
    for (int j = 1; j <= c.resnets_per_up_stage; ++j) {
      const std::int64_t skip = j == c.resnets_per_up_stage ? skip_last : out;
      n += resnet_p((j == 1 ? prev : out) + skip, out, temb) + attention_p(out, c.layer_depth(Section::up, u, j), ctx);
    }
    if (u < S) n += conv_p(3, out, out);
    prev = out;
  }
  n += norm_p(c.channels(1)) + conv_p(3, c.channels(1), c.out_channels);
  return n;
}

FlopBreakdown flop_breakdown(const UNetConfig& c, int height, int width, int context_tokens) {
  if (auto v = validate_config(c); !v.empty()) throw ConfigError("invalid config", std::move(v));
  const int S = c.stages();
  const int stride = 1 << (S - 1);
  if (height < 1 || width < 1 || height % stride != 0 || width % stride != 0) {
    throw DimensionError("latent " + std::to_string(height) + "x" + std::to_string(width) + " must be divisible by " +
                         std::to_string(stride));
  }
  FlopCounter fc{c, context_tokens, {}};
  auto hw = [&](int s) { return std::int64_t{height >> (s - 1)} * (width >> (s - 1)); };
  const std::int64_t temb = c.time_embed_dim;
  const std::int64_t base = c.base_channels;
  fc.f.conv += conv_macs(3, c.in_channels, base, height, width);
  fc.f.linear += base * temb + temb * temb;
  if (c.pooled_embed_dim > 0) fc.f.linear += std::int64_t{c.pooled_embed_dim} * temb + temb * temb;
  std::int64_t ch = base;
  for (int s = 1; s <= S; ++s) {
    const std::int64_t out = c.channels(s);
    for (int j = 1; j <= c.resnets_per_down_stage; ++j) {
      fc.resnet(j == 1 ? ch : out, out, hw(s));
      fc.attention(out, c.layer_depth(Section::down, s, j), hw(s));
    }
    if (s < S) fc.f.conv += conv_macs(3, out, out, 1, 1) * hw(s + 1);
    ch = out;
  }
  const std::int64_t mid = c.channels(S);
  fc.resnet(mid, mid, hw(S));
  if (c.mid_block.has_attention) fc.attention(mid, c.mid_block.attention_depth, hw(S));
  if (c.mid_block.has_second_resnet) fc.resnet(mid, mid, hw(S));
  std::int64_t prev = mid;
  for (int u = 1; u <= S; ++u) {
    const int s = S + 1 - u;
    const std::int64_t out = c.channels(s);
    const std::int64_t skip_last = s >= 2 ? c.channels(s - 1) : base;
    for (int j = 1; j <= c.resnets_per_up_stage; ++j) {
      const std::int64_t skip = j == c.resnets_per_up_stage ? skip_last : out;
      fc.resnet((j == 1 ? prev : out) + skip, out, hw(s));
      fc.attention(out, c.layer_depth(Section::up, u, j), hw(s));
    }
    if (u < S) fc.f.conv += conv_macs(3, out, out, 1, 1) * hw(s - 1);
    prev = out;
  }
  fc.f.conv += conv_macs(3, c.channels(1), c.out_channels, height, width);
  return fc.f;
}

std::int64_t estimate_flops(const UNetConfig& c, int height, int width, int context_tokens) {
  return flop_breakdown(c, height, width, context_tokens).total();
}

std::set<RemovalUnit> expand_plan(const UNetConfig& c, const PruningPlan& plan) {
  require_valid_plan(c, plan);
  const Removals r = collect(c, plan);
  std::set<RemovalUnit> units;
  for (const auto& [site, blocks] : r.blocks) {
    for (int b : blocks) units.insert({RemovalKind::TransformerBlocks, site, b});
  }
  if (r.mid_second_resnet) units.insert({RemovalKind::MidSecondResnet, kMidSite, 0});
  return units;
}

bool is_nested(const UNetConfig& c, const PruningPlan& inner, const PruningPlan& outer) {
  const auto a = expand_plan(c, inner);
  const auto b = expand_plan(c, outer);
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

std::vector<RemovalDirective> removal_candidates(const UNetConfig& c, RemovalOrder order) {
  if (auto v = validate_config(c); !v.empty()) throw ConfigError("invalid config", std::move(v));
  std::vector<RemovalDirective> steps;
  auto mid_steps = [&] {
    if (c.mid_block.has_attention) steps.push_back({RemovalKind::MidAttention, kMidSite, {}});
    if (c.mid_block.has_second_resnet) steps.push_back({RemovalKind::MidSecondResnet, kMidSite, {}});
  };
  const int S = c.stages();
  if (order == RemovalOrder::deepest_first) mid_steps();
  for (int k = 0; k < S; ++k) {
    const int s = order == RemovalOrder::deepest_first ? S - k : k + 1;
    const int u = S + 1 - s;
    const int layers = std::max(c.resnets_per_down_stage, c.resnets_per_up_stage);
    int deepest = 0;
    for (int j = 1; j <= layers; ++j) {
      if (j <= c.resnets_per_down_stage) deepest = std::max(deepest, c.layer_depth(Section::down, s, j));
      if (j <= c.resnets_per_up_stage) deepest = std::max(deepest, c.layer_depth(Section::up, u, j));
    }
    for (int b = deepest; b >= 1; --b) {
      for (int j = 1; j <= layers; ++j) {
        if (j <= c.resnets_per_down_stage && c.layer_depth(Section::down, s, j) >= b) {
          steps.push_back(blocks_directive(Section::down, s, j, {b}));
        }
        if (j <= c.resnets_per_up_stage && c.layer_depth(Section::up, u, j) >= b) {
          steps.push_back(blocks_directive(Section::up, u, j, {b}));
        }
      }
    }
  }
  if (order == RemovalOrder::shallowest_first) mid_steps();
  return steps;
}

std::vector<PruningPlan> progressive_plans(const UNetConfig& c, const std::vector<double>& fractions,
                                           RemovalOrder order) {
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] > 0.0 && fractions[i] < 1.0)) throw RangeError("fractions must lie in (0, 1)");
    if (i > 0 && !(fractions[i] > fractions[i - 1])) throw RangeError("fractions must be strictly increasing");
  }
  const auto steps = removal_candidates(c, order);
  const double total = static_cast<double>(count_params(c));
  std::vector<double> reached{0.0};  // reduction after each prefix length
  std::vector<RemovalDirective> prefix;
  for (const auto& s : steps) {
    prefix.push_back(s);
    reached.push_back(1.0 - static_cast<double>(count_params(apply_plan(c, merge_steps("", prefix)))) / total);
  }
  std::vector<PruningPlan> plans;
  std::size_t len = 0;
  for (double f : fractions) {
    while (len < steps.size() && reached[len] < f) ++len;
    if (reached[len] < f) {
      throw CapacityError("cannot remove " + std::to_string(f) + " of parameters; the candidate set reaches at most " +
                              std::to_string(reached.back()),
                          reached.back());
    }
    const int pct = static_cast<int>(std::lround(f * 100.0));
    plans.push_back(merge_steps("progressive_" + std::to_string(pct),
                                std::vector<RemovalDirective>(steps.begin(), steps.begin() + static_cast<long>(len))));
  }
  return plans;
}

PruningPlan relative_plan(const UNetConfig& c, const PruningPlan& inner, const PruningPlan& outer) {
  if (!is_nested(c, inner, outer)) {
    throw ConfigError("plans are not nested", {"plan '" + outer.name + "' does not contain '" + inner.name + "'"});
  }
  const Removals a = collect(c, inner);
  const Removals b = collect(c, outer);
  PruningPlan rel{outer.name, {}};
  for (const auto& [site, removed] : b.blocks) {
    static const std::set<int> none;
    auto it = a.blocks.find(site);
    const auto& before = it == a.blocks.end() ? none : it->second;
    const auto surv = survivors(site_depth(c, site), before);
    std::set<int> renumbered;
    for (std::size_t i = 0; i < surv.size(); ++i) {
      if (removed.count(surv[i])) renumbered.insert(static_cast<int>(i) + 1);
    }
    if (renumbered.empty()) continue;
    if (site.section == Section::mid && renumbered.size() == surv.size()) {
      rel.directives.push_back({RemovalKind::MidAttention, kMidSite, {}});
    } else {
      rel.directives.push_back({RemovalKind::TransformerBlocks, site, std::move(renumbered)});
    }
  }
  if (b.mid_second_resnet && !a.mid_second_resnet) rel.directives.push_back({RemovalKind::MidSecondResnet, kMidSite, {}});
  return rel;
}

}  // namespace slimunet
