#include "vlfuzz/taxonomy.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "vlfuzz/util.hpp"

namespace vlfuzz::taxonomy {
namespace {

constexpr std::string_view kExistence = "Existence & Recognition";
constexpr std::string_view kAttributes = "Attributes";
constexpr std::string_view kSpatial = "Spatial & Structural";
constexpr std::string_view kQuantity = "Quantity & Comparison";
constexpr std::string_view kRelations = "Relations & Interactions";
constexpr std::string_view kComposition = "Scene-semantic Composition & Abstract Reasoning";
constexpr std::string_view kSymbols = "Symbols & Pragmatics";

constexpr std::array<Subdimension, kSubdimensionCount> kSubdimensions{{
    {1, kExistence, "Object Presence"},
    {2, kExistence, "Scene Recognition"},
    {3, kExistence, "Person/Animal Presence"},
    {4, kAttributes, "Color"},
    {5, kAttributes, "Material"},
    {6, kAttributes, "Size (Relative)"},
    {7, kAttributes, "State/Action"},
    {8, kSpatial, "Position/Orientation"},
    {9, kSpatial, "Relative Relations"},
    {10, kSpatial, "Part–Whole Hierarchy"},
    {11, kSpatial, "Occlusion/Perspective"},
    {12, kQuantity, "Count (1,2,3…)"},
    {13, kQuantity, "Fuzzy Quantity (few/many/some)"},
    {14, kQuantity, "Comparison/Ranking"},
    {15, kRelations, "Human–Object Interaction"},
    {16, kRelations, "Human–Human Interaction"},
    {17, kRelations, "Event Recognition"},
    {18, kComposition, "Multi-object Reasoning"},
    {19, kComposition, "Task/Scene Identification"},
    {20, kComposition, "Causal/Temporal Reasoning"},
    {21, kComposition, "Intention/Goal Recognition"},
    {22, kSymbols, "Text (OCR) Recognition & Understanding"},
    {23, kSymbols, "Symbol/Sign Meaning"},
    {24, kSymbols, "Pragmatic/Social Cues"},
}};

constexpr std::array<FuzzingRole, kRoleCount> kRoles{{
    {1, RoleName::VisualPerturbation, "VisualPerturbation",
     "Robustness to light visual transforms; avoid superficial shortcuts."},
    {2, RoleName::LinguisticParaphrasing, "LinguisticParaphrasing",
     "Linguistic invariance without changing semantics (paraphrase/reorder robustness)."},
    {3, RoleName::DiscourseLogic, "DiscourseLogic",
     "Logical consistency under discourse cues (negation/entailment; polarity robustness)."},
    {4, RoleName::ContextualBias, "ContextualBias",
     "Separate visual grounding from world knowledge; resist prior-led guessing."},
    {5, RoleName::CompositionalReasoning, "CompositionalReasoning",
     "Compositionality across multiple attributes/relations within one query."},
    {6, RoleName::CounterfactualReasoning, "CounterfactualReasoning",
     "Overcoming strong priors with visual evidence; rare or prior-violating patterns."},
    {7, RoleName::SpatialReasoning, "SpatialReasoning",
     "3D/relative depth ordering, occlusion and perspective cues."},
    {8, RoleName::HypotheticalReasoning, "HypotheticalReasoning",
     "One–two-step numeric/logic reasoning over visible entities."},
}};

void validate_vector(const std::vector<double>& p, std::size_t expected, std::string_view what) {
  if (p.size() != expected) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(expected) +
                                " entries, got " + std::to_string(p.size()));
  }
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string(what) + ": entries must be finite and nonnegative");
    }
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument(std::string(what) + ": entries must sum to 1 (got " +
                                format_double(sum) + ")");
  }
}

}  // namespace

SamplingPriors SamplingPriors::uniform() {
  return SamplingPriors{std::vector<double>(kSubdimensionCount, 1.0 / kSubdimensionCount),
                        std::vector<double>(kRoleCount, 1.0 / kRoleCount)};
}

void SamplingPriors::validate() const {
  validate_vector(p_d, kSubdimensionCount, "priors.subdimensions");
  validate_vector(p_r, kRoleCount, "priors.roles");
}

std::span<const Subdimension> list_subdimensions() { return kSubdimensions; }
std::span<const FuzzingRole> list_roles() { return kRoles; }

bool valid_subdimension(int id) { return id >= 1 && id <= kSubdimensionCount; }
bool valid_role(int id) { return id >= 1 && id <= kRoleCount; }

const Subdimension& subdimension(int id) {
  if (!valid_subdimension(id)) {
    throw std::out_of_range("subdimension id out of range: " + std::to_string(id));
  }
  return kSubdimensions[static_cast<std::size_t>(id - 1)];
}

const FuzzingRole& role(int id) {
  if (!valid_role(id)) {
    throw std::out_of_range("role id out of range: " + std::to_string(id));
  }
  return kRoles[static_cast<std::size_t>(id - 1)];
}

const FuzzingRole& role(RoleName name) { return role(static_cast<int>(name)); }

const Subdimension& subdimension_by_name(std::string_view name) {
  for (const auto& s : kSubdimensions) {
    if (s.name == name) return s;
  }
  throw std::out_of_range("unknown subdimension: " + std::string(name));
}

const FuzzingRole& role_by_name(std::string_view name) {
  for (const auto& r : kRoles) {
    if (r.name == name) return r;
  }
  throw std::out_of_range("unknown fuzzing role: " + std::string(name));
}

void require_context(int d, int r) {
  if (!valid_subdimension(d) || !valid_role(r)) {
    throw std::out_of_range("context (" + std::to_string(d) + ", " + std::to_string(r) +
                            ") outside 1..24 x 1..8");
  }
}

std::vector<Context> enumerate_contexts() {
  std::vector<Context> out;
  out.reserve(kContextCount);
  for (int d = 1; d <= kSubdimensionCount; ++d) {
    for (int r = 1; r <= kRoleCount; ++r) {
      out.push_back({d, r});
    }
  }
  return out;
}

Context sample_context(const SamplingPriors& priors, std::uint64_t rng_seed) {
  priors.validate();
  Rng rng(rng_seed);
  const auto d = rng.categorical(priors.p_d);
  const auto r = rng.categorical(priors.p_r);
  return {static_cast<int>(d) + 1, static_cast<int>(r) + 1};
}

std::string export_records() {
  std::string out;
  for (const auto& s : kSubdimensions) {
    nlohmann::json j{{"id", s.id},
                     {"group", std::string(s.group)},
                     {"name", std::string(s.name)},
                     {"stress_description", nullptr}};
    out += j.dump() + "\n";
  }
  for (const auto& r : kRoles) {
    nlohmann::json j{{"id", r.id},
                     {"group", nullptr},
                     {"name", std::string(r.name)},
                     {"stress_description", std::string(r.stress_description)}};
    out += j.dump() + "\n";
  }
  return out;
}

void export_records(const std::filesystem::path& out) {
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) {
    throw std::runtime_error("cannot open " + out.string() + " for writing");
  }
  f << export_records();
}

}  // namespace vlfuzz::taxonomy
