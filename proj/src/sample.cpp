#include "vlfuzz/sample.hpp"

#include <cstdio>
#include <fstream>

#include "vlfuzz/image_pool.hpp"
#include "vlfuzz/sim_models.hpp"

namespace vlfuzz::sample {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json sim_endpoint(const std::string& name, const std::string& kind, const std::string& profile) {
  return {{"name", name}, {"kind", kind}, {"transport", "simulated"}, {"profile", profile}};
}

}  // namespace

json sample_config() {
  return {
      {"seed", 7},
      {"runs_dir", "runs"},
      {"deterministic_clock", true},
      {"pool", {{"dir", "images"}, {"split_fractions", {0.6, 0.2, 0.2}}, {"seed", 11}}},
      {"fixtures", "fixtures.jsonl"},
      {"endpoints",
       {sim_endpoint("sim-generator", "generator", "sim-generator"),
        sim_endpoint("target", "target", "default"),
        sim_endpoint("heldout-a", "target", "heldout-a"),
        sim_endpoint("heldout-b", "target", "heldout-b"),
        sim_endpoint("judge", "judge", "oracle")}},
      {"models",
       {{"generator", "sim-generator"},
        {"target", "target"},
        {"judge", "judge"},
        {"heldout_targets", {"heldout-a", "heldout-b"}}}},
      {"priors", {{"subdimensions", "uniform"}, {"roles", "uniform"}}},
      {"campaign",
       {{"n_per_context", 4},
        {"images_per_iteration", 0},
        {"with_role_exemplars", true},
        {"max_in_flight", 4},
        {"perturbation", {{"kind", "gaussian_noise"}, {"noise_sigma", 0.03}}}}},
      {"gate", {{"n_votes", 5}, {"agreement_min", 0.8}, {"confidence_min", 0.9}}},
      {"human", {{"lease_seconds", 900}}},
      {"policy", {{"granularity", "subdimension_role"}, {"drive_generator", true}}},
      {"sft", {{"seed_images", 2}, {"learning_rate", 40.0}, {"steps", 100}}},
      {"dpo",
       {{"beta", 0.1},
        {"lambda_kl", 0.01},
        {"learning_rate", 10.0},
        {"steps", 400},
        {"rng_seed", 0},
        {"refresh_reference", false}}},
      {"iterations", 4},
      {"eval", {{"split", "validation"}}},
  };
}

void write_workspace(const fs::path& dir, int n_images, std::uint64_t seed) {
  const auto scenes = sim::make_sample_world(n_images, seed);
  fs::create_directories(dir / "images");
  std::vector<sim::SimFixture> fixtures;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu.ppm", i);
    images::write_ppm(dir / "images" / name, scenes[i].image);
    fixtures.push_back(scenes[i].fixture);
  }
  sim::save_fixtures(dir / "fixtures.jsonl", fixtures);
  std::ofstream out(dir / "config.json", std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "config.json").string());
  out << sample_config().dump(2) << "\n";
}

}  // namespace vlfuzz::sample
