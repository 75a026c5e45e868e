#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace vlfuzz::preference {

// The fields of a judged candidate that pairing needs.
struct Candidate {
  std::string probe_id;
  std::string image_id;  // context image
  int d = 0;
  int r = 0;
  std::string question;
  std::string prompt_hash;
  int template_index = -1;  // column in the toy policy row, -1 when unknown
  std::optional<int> label;
};

struct ScoredCandidate {
  Candidate candidate;
  int score = 0;
};

class MissingVerdictError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// s_i = y_i, order preserved; throws MissingVerdictError naming the probe.
std::vector<ScoredCandidate> score(std::span<const Candidate> set);

struct PreferencePair {
  std::string pair_id;
  std::string image_id;
  int d = 0;
  Candidate winner;
  Candidate loser;
  int winner_score = 0;
  int loser_score = 0;
  int iteration = 0;
};

// Winner uniform among the argmax, loser uniform among the argmin; none when
// every score is equal. Candidates must share (image, d).
std::optional<PreferencePair> make_pair(std::span<const ScoredCandidate> scored,
                                        std::uint64_t rng_seed, int iteration = 0);

// Indices chosen by make_pair, exposed for property tests.
struct PairChoice {
  std::size_t winner;
  std::size_t loser;
};
std::optional<PairChoice> choose_pair(std::span<const int> scores, std::uint64_t rng_seed);

nlohmann::json to_json(const PreferencePair& p);
nlohmann::json to_json(const Candidate& c);
Candidate candidate_from_json(const nlohmann::json& j);
PreferencePair pair_from_json(const nlohmann::json& j);

struct SftExample {
  std::string image_id;
  int d = 0;
  int r = 0;
  std::string target_question;
  std::string batch;  // "A" or "B"
};

nlohmann::json to_json(const SftExample& e);

// Supplies q* for an (image, d, r) slot.
using ExemplarSource =
    std::function<std::string(const std::string& image_id, int d, int r, const std::string& batch)>;

struct SftBatches {
  std::vector<SftExample> batch_a;  // coverage: seed images x 192
  std::vector<SftExample> batch_b;  // preference hints: larger images x 24
};

SftBatches build_sft_batches(std::span<const std::string> seed_images,
                             std::span<const std::string> larger_images,
                             const ExemplarSource& exemplars);

// One line per pair; returns the record count.
std::size_t export_dpo_dataset(std::span<const PreferencePair> pairs,
                               const std::filesystem::path& out);
std::string dpo_record_line(const PreferencePair& p);

}  // namespace vlfuzz::preference
