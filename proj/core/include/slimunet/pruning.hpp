#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "slimunet/backbone.hpp"
#include "slimunet/config.hpp"

namespace slimunet {

enum class RemovalKind { TransformerBlocks, MidAttention, MidSecondResnet, WholeAttentionLayer };

const char* to_string(RemovalKind k);
RemovalKind removal_kind_from_string(const std::string& s);

/// Addresses one attention layer (or the mid block). 1-based.
struct Site {
  Section section = Section::down;
  int stage = 1;
  int attn_layer = 1;

  friend auto operator<=>(const Site&, const Site&) = default;
};

struct RemovalDirective {
  RemovalKind kind = RemovalKind::TransformerBlocks;
  Site site;
  std::set<int> blocks;  // TransformerBlocks only

  friend bool operator==(const RemovalDirective&, const RemovalDirective&) = default;
};

struct PruningPlan {
  std::string name;
  std::vector<RemovalDirective> directives;

  friend bool operator==(const PruningPlan&, const PruningPlan&) = default;
};

enum class CanonicalPlan { SSD_1B, VEGA };

PruningPlan canonical_plan(CanonicalPlan which);
/// Accepts "SSD_1B"/"ssd1b"/"ssd-1b" and "VEGA"/"vega".
PruningPlan canonical_plan(const std::string& name);

nlohmann::json to_json(const PruningPlan& plan);
PruningPlan plan_from_json(const nlohmann::json& j);

std::vector<std::string> validate_plan(const UNetConfig& config, const PruningPlan& plan);

UNetConfig apply_plan(const UNetConfig& config, const PruningPlan& plan);

/// Builds the student: surviving tensors are copied from the teacher and
/// surviving blocks renumbered densely; provenance is composed with the
/// teacher's own.
UNetModel inherit_weights(const UNetModel& teacher, const PruningPlan& plan);

/// Exact scalar parameter count, computed in closed form without building.
std::int64_t count_params(const UNetConfig& config);

struct FlopBreakdown {
  std::int64_t conv = 0;
  std::int64_t attention = 0;    // projections and score/value products
  std::int64_t feedforward = 0;
  std::int64_t linear = 0;       // embedding MLPs and per-resnet time projections
  std::int64_t total() const { return conv + attention + feedforward + linear; }
};

/// Multiply-accumulates of one k x k convolution producing an h x w map.
constexpr std::int64_t conv_macs(std::int64_t k, std::int64_t cin, std::int64_t cout, std::int64_t h, std::int64_t w) {
  return k * k * cin * cout * h * w;
}

/// Analytic MAC count for one single-sample forward pass on an h x w latent.
FlopBreakdown flop_breakdown(const UNetConfig& config, int height, int width, int context_tokens = 77);
std::int64_t estimate_flops(const UNetConfig& config, int height, int width, int context_tokens = 77);

/// A single removable unit: one transformer block of one layer (block is the
/// index in the config the plan is written against), or a mid-block element.
struct RemovalUnit {
  RemovalKind kind;
  Site site;
  int block = 0;

  friend auto operator<=>(const RemovalUnit&, const RemovalUnit&) = default;
};

/// Every unit a plan removes; whole-layer and mid directives expand to their blocks.
std::set<RemovalUnit> expand_plan(const UNetConfig& config, const PruningPlan& plan);

/// True when everything `inner` removes is also removed by `outer`.
bool is_nested(const UNetConfig& config, const PruningPlan& inner, const PruningPlan& outer);

enum class RemovalOrder {
  deepest_first,    // mid attention, mid second resnet, then deepest stage's highest blocks
  shallowest_first  // same rules with stages visited shallow to deep
};

/// Removal steps in heuristic order; each step is a single directive
/// (one block of one layer, or a mid-block element).
std::vector<RemovalDirective> removal_candidates(const UNetConfig& config, RemovalOrder order);

/// Nested plans, one per fraction, each removing at least that fraction of
/// count_params(config). Throws CapacityError when a fraction is unreachable.
std::vector<PruningPlan> progressive_plans(const UNetConfig& config, const std::vector<double>& fractions,
                                           RemovalOrder order = RemovalOrder::deepest_first);

/// Expresses `outer` minus `inner` against apply_plan(config, inner), with
/// block indices renumbered to the inner student's numbering.
PruningPlan relative_plan(const UNetConfig& config, const PruningPlan& inner, const PruningPlan& outer);

}  // namespace slimunet
