#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vlfuzz/gateway.hpp"
#include "vlfuzz/sim_models.hpp"
#include "vlfuzz/util.hpp"

namespace vlfuzz::testing {

inline sim::SimFixture two_dog_fixture(const std::string& image_id = "img-dogs") {
  sim::SimFixture f;
  f.image_id = image_id;
  f.scene = "park";
  f.event = "picnic";
  sim::SimObject dog;
  dog.category = "dog";
  dog.color = "brown";
  dog.count = 2;
  dog.relations = {"left_of:bench"};
  sim::SimObject bench;
  bench.category = "bench";
  bench.color = "green";
  bench.material = "wood";
  f.objects = {dog, bench};
  return f;
}

inline gateway::ModelEndpoint sim_endpoint(const std::string& name, gateway::EndpointKind kind,
                                           const std::string& profile) {
  gateway::ModelEndpoint e;
  e.name = name;
  e.kind = kind;
  e.transport = gateway::TransportKind::Simulated;
  e.profile = profile;
  e.decoding = kind == gateway::EndpointKind::Generator ? gateway::DecodingParams::generation_defaults()
                                                        : gateway::DecodingParams::answering_defaults();
  return e;
}

inline gateway::ImagePayload payload_for(const std::string& image_id) {
  return {"image/x-portable-pixmap", base64_encode("P6\n1 1\n255\n\x01\x02\x03"), image_id};
}

// Gateway with every simulator registered over the given fixtures, and one
// simulated endpoint per judge behaviour plus a default target.
struct SimEnv {
  explicit SimEnv(std::vector<sim::SimFixture> fixtures)
      : world(std::make_shared<sim::SimWorld>(std::move(fixtures))) {
    gw.set_sleeper([](std::chrono::milliseconds) {});
    sim::register_simulators(gw, world);
    gw.register_endpoint(sim_endpoint("gen", gateway::EndpointKind::Generator, "sim-generator"));
    gw.register_endpoint(sim_endpoint("target", gateway::EndpointKind::Target, "default"));
    for (const char* b : {"oracle", "split_3_2", "low_confidence", "always-confident-correct", "hard-down"}) {
      gw.register_endpoint(sim_endpoint(std::string("judge-") + b, gateway::EndpointKind::Judge, b));
    }
  }

  std::shared_ptr<sim::SimWorld> world;
  gateway::Gateway gw;
};

}  // namespace vlfuzz::testing
