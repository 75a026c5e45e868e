#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace vlfuzz::taxonomy {

inline constexpr int kSubdimensionCount = 24;
inline constexpr int kRoleCount = 8;
inline constexpr int kGroupCount = 7;
inline constexpr int kContextCount = kSubdimensionCount * kRoleCount;

struct Subdimension {
  int id;  // 1..24, ordinal by table position
  std::string_view group;
  std::string_view name;
};

enum class RoleName : int {
  VisualPerturbation = 1,
  LinguisticParaphrasing,
  DiscourseLogic,
  ContextualBias,
  CompositionalReasoning,
  CounterfactualReasoning,
  SpatialReasoning,
  HypotheticalReasoning,
};

struct FuzzingRole {
  int id;  // 1..8
  RoleName role;
  std::string_view name;
  std::string_view stress_description;
};

struct SamplingPriors {
  std::vector<double> p_d;  // length 24
  std::vector<double> p_r;  // length 8

  static SamplingPriors uniform();
  // Throws std::invalid_argument naming the offending vector.
  void validate() const;
};

// Canonical (group, in-group) order.
std::span<const Subdimension> list_subdimensions();
std::span<const FuzzingRole> list_roles();

// Throws std::out_of_range for ids outside 1..24 / 1..8.
const Subdimension& subdimension(int id);
const FuzzingRole& role(int id);
const FuzzingRole& role(RoleName name);
// Lookup by exact display/enum name; throws std::out_of_range.
const Subdimension& subdimension_by_name(std::string_view name);
const FuzzingRole& role_by_name(std::string_view name);

bool valid_subdimension(int id);
bool valid_role(int id);
// Throws std::out_of_range unless (d, r) is in 1..24 x 1..8.
void require_context(int d, int r);

struct Context {
  int d;
  int r;
  friend bool operator==(const Context&, const Context&) = default;
};

// All 192 (d, r) pairs, lexicographic by (d, r).
std::vector<Context> enumerate_contexts();

// Row index of (d, r) in enumerate_contexts() order.
inline int context_index(int d, int r) { return (d - 1) * kRoleCount + (r - 1); }

Context sample_context(const SamplingPriors& priors, std::uint64_t rng_seed);

// Line-delimited export with fields id, group, name, stress_description.
std::string export_records();
void export_records(const std::filesystem::path& out);

}  // namespace vlfuzz::taxonomy
