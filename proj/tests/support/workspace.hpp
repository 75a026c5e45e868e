#pragma once

#include <memory>
#include <vector>

#include "sim_env.hpp"
#include "temp_dir.hpp"
#include "vlfuzz/campaign.hpp"
#include "vlfuzz/image_pool.hpp"
#include "vlfuzz/sim_models.hpp"
#include "vlfuzz/store.hpp"

namespace vlfuzz::testing {

struct StoreAudit : gateway::AuditSink {
  store::RunStore* store = nullptr;
  void record_exchange(const nlohmann::json& j) override { store->append("exchanges", j); }
};

// Sample scenes on disk, a pool over them, a simulated gateway and a fresh run store.
struct MiniWorld {
  explicit MiniWorld(int n_images, std::uint64_t seed = 5, const std::string& tag = "mini")
      : dir(tag), scenes(sim::make_sample_world(n_images, seed)), env(fixtures_of(scenes)) {
    std::filesystem::create_directories(dir / "images");
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      images::write_ppm(dir / "images" / ("s" + std::to_string(i) + ".ppm"), scenes[i].image);
    }
    pool = images::ImagePool::load(dir / "images", {1.0, 0.0, 0.0}, 1);
    env.world->set_resolver([this](const std::string& id) { return pool.root_of(id); });
    store = std::make_unique<store::RunStore>(
        store::RunStore::create(dir / "run", nlohmann::json{{"tag", tag}}, dir.path(), true));
    for (const auto& ref : pool.images()) store->append("images", images::to_json(ref));
    payloads = std::make_unique<campaign::PayloadCache>(pool);
    audit.store = store.get();
    env.gw.set_audit(&audit);
  }

  static std::vector<sim::SimFixture> fixtures_of(const std::vector<sim::SampleScene>& s) {
    std::vector<sim::SimFixture> out;
    for (const auto& x : s) out.push_back(x.fixture);
    return out;
  }

  campaign::PassContext ctx() { return {env.gw, pool, *payloads, *store}; }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& r : pool.images()) out.push_back(r.id);
    return out;
  }

  campaign::PassConfig pass_config() const {
    campaign::PassConfig cfg;
    cfg.generator = "gen";
    cfg.target = "target";
    cfg.n_per_context = 3;
    cfg.max_in_flight = 4;
    cfg.seed = 99;
    cfg.perturbation = {images::PerturbationKind::GaussianNoise, 0.03, 0};
    return cfg;
  }

  TempDir dir;
  std::vector<sim::SampleScene> scenes;
  SimEnv env;
  images::ImagePool pool;
  std::unique_ptr<store::RunStore> store;
  std::unique_ptr<campaign::PayloadCache> payloads;
  StoreAudit audit;
};

}  // namespace vlfuzz::testing
