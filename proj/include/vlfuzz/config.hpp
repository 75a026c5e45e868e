#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "vlfuzz/dpo_core.hpp"
#include "vlfuzz/gateway.hpp"
#include "vlfuzz/image_pool.hpp"
#include "vlfuzz/judge.hpp"
#include "vlfuzz/sim_models.hpp"
#include "vlfuzz/taxonomy.hpp"

namespace vlfuzz::config {

// Carries the dotted path of the offending field.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct Config {
  std::filesystem::path base_dir;  // directory of the config file

  std::uint64_t seed = 0;
  std::string runs_dir = "runs";
  bool deterministic_clock = true;

  std::string pool_dir = "images";
  std::array<double, 3> split_fractions{0.6, 0.2, 0.2};
  std::uint64_t pool_seed = 0;
  std::optional<std::string> fixtures;

  std::vector<gateway::ModelEndpoint> endpoints;
  std::vector<sim::TargetWeaknessProfile> sim_profiles;  // beyond the built-in ones

  std::string generator;
  std::string target;
  std::string judge;
  std::vector<std::string> heldout_targets;

  taxonomy::SamplingPriors priors = taxonomy::SamplingPriors::uniform();

  int n_per_context = 4;
  int images_per_iteration = 0;  // 0 = every train image
  bool with_role_exemplars = true;
  int max_in_flight = 8;
  images::PerturbationSpec perturbation;

  judge::GateConfig gate;
  int lease_seconds = 900;

  dpo::Granularity granularity = dpo::Granularity::SubdimensionRole;
  bool drive_generator = true;
  int sft_seed_images = 2;
  dpo::SftConfig sft;
  dpo::DpoConfig dpo;
  bool refresh_reference = false;

  int iterations = 4;
  std::string eval_split = "validation";

  std::filesystem::path resolve(const std::string& p) const;
  const gateway::ModelEndpoint& endpoint(const std::string& name) const;

  // Normalized document; this is what a run freezes into its manifest.
  nlohmann::json to_json() const;
};

Config parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
Config load_config(const std::filesystem::path& path);

}  // namespace vlfuzz::config
