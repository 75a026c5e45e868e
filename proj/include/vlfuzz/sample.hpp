#pragma once

#include <cstdint>
#include <filesystem>

#include "json.hpp"

// Self-contained all-simulated workspace: rendered P6 scenes, their fixtures,
// and a config wiring the simulated generator, targets and judge.
namespace vlfuzz::sample {

// Config document written by write_workspace (paths relative to the workspace).
nlohmann::json sample_config();

// Writes <dir>/images/*.ppm, <dir>/fixtures.jsonl and <dir>/config.json.
void write_workspace(const std::filesystem::path& dir, int n_images = 50, std::uint64_t seed = 2024);

}  // namespace vlfuzz::sample
