#include "vlfuzz/preference.hpp"

#include <algorithm>
#include <fstream>

#include "vlfuzz/taxonomy.hpp"
#include "vlfuzz/template_bank.hpp"
#include "vlfuzz/util.hpp"

namespace vlfuzz::preference {

using nlohmann::json;

std::vector<ScoredCandidate> score(std::span<const Candidate> set) {
  std::vector<ScoredCandidate> out;
  out.reserve(set.size());
  for (const auto& c : set) {
    if (!c.label) throw MissingVerdictError("probe " + c.probe_id + " has no verdict");
    if (*c.label < -1 || *c.label > 1) {
      throw std::invalid_argument("probe " + c.probe_id + " has an out-of-range label");
    }
    out.push_back(ScoredCandidate{c, *c.label});
  }
  return out;
}

std::optional<PairChoice> choose_pair(std::span<const int> scores, std::uint64_t rng_seed) {
  if (scores.size() < 2) throw std::invalid_argument("pairing needs at least two candidates");
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  if (*lo == *hi) return std::nullopt;
  std::vector<std::size_t> top;
  std::vector<std::size_t> bottom;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] == *hi) top.push_back(i);
    if (scores[i] == *lo) bottom.push_back(i);
  }
  Rng rng(SeedBuilder(rng_seed).add("pair").seed());
  const std::size_t w = top[rng.index(top.size())];
  const std::size_t l = bottom[rng.index(bottom.size())];
  return PairChoice{w, l};
}

std::optional<PreferencePair> make_pair(std::span<const ScoredCandidate> scored,
                                        std::uint64_t rng_seed, int iteration) {
  if (scored.size() < 2) throw std::invalid_argument("pairing needs at least two candidates");
  const auto& first = scored.front().candidate;
  std::vector<int> scores;
  for (const auto& s : scored) {
    if (s.candidate.image_id != first.image_id || s.candidate.d != first.d) {
      throw std::invalid_argument("candidates of one set must share (image, d)");
    }
    scores.push_back(s.score);
  }
  const auto choice = choose_pair(scores, rng_seed);
  if (!choice) return std::nullopt;
  PreferencePair p;
  p.image_id = first.image_id;
  p.d = first.d;
  p.winner = scored[choice->winner].candidate;
  p.loser = scored[choice->loser].candidate;
  p.winner_score = scored[choice->winner].score;
  p.loser_score = scored[choice->loser].score;
  p.iteration = iteration;
  p.pair_id = "pair:" + p.winner.probe_id + ">" + p.loser.probe_id;
  return p;
}

json to_json(const Candidate& c) {
  json j{{"probe_id", c.probe_id},     {"image_id", c.image_id},
         {"d", c.d},                   {"r", c.r},
         {"question", c.question},     {"prompt_hash", c.prompt_hash},
         {"template_index", c.template_index}};
  j["label"] = c.label ? json(*c.label) : json(nullptr);
  return j;
}

Candidate candidate_from_json(const json& j) {
  Candidate c;
  c.probe_id = j.at("probe_id").get<std::string>();
  c.image_id = j.at("image_id").get<std::string>();
  c.d = j.at("d").get<int>();
  c.r = j.at("r").get<int>();
  c.question = j.at("question").get<std::string>();
  c.prompt_hash = j.at("prompt_hash").get<std::string>();
  c.template_index = j.at("template_index").get<int>();
  if (!j.at("label").is_null()) c.label = j.at("label").get<int>();
  return c;
}

json to_json(const PreferencePair& p) {
  return json{{"pair_id", p.pair_id},           {"image_id", p.image_id},
              {"d", p.d},                       {"winner", to_json(p.winner)},
              {"loser", to_json(p.loser)},      {"winner_score", p.winner_score},
              {"loser_score", p.loser_score},   {"iteration", p.iteration}};
}

PreferencePair pair_from_json(const json& j) {
  PreferencePair p;
  p.pair_id = j.at("pair_id").get<std::string>();
  p.image_id = j.at("image_id").get<std::string>();
  p.d = j.at("d").get<int>();
  p.winner = candidate_from_json(j.at("winner"));
  p.loser = candidate_from_json(j.at("loser"));
  p.winner_score = j.at("winner_score").get<int>();
  p.loser_score = j.at("loser_score").get<int>();
  p.iteration = j.at("iteration").get<int>();
  return p;
}

json to_json(const SftExample& e) {
  return json{{"image_id", e.image_id},
              {"d", e.d},
              {"r", e.r},
              {"target_question", e.target_question},
              {"batch", e.batch}};
}

SftBatches build_sft_batches(std::span<const std::string> seed_images,
                             std::span<const std::string> larger_images,
                             const ExemplarSource& exemplars) {
  if (seed_images.empty()) throw std::invalid_argument("SFT batch A needs seed images");
  if (larger_images.empty()) throw std::invalid_argument("SFT batch B needs images");
  SftBatches out;
  for (const auto& img : seed_images) {
    for (const auto& c : taxonomy::enumerate_contexts()) {
      std::string q = exemplars(img, c.d, c.r, "A");
      if (trim(q).empty()) throw std::invalid_argument("empty SFT target question");
      out.batch_a.push_back(SftExample{img, c.d, c.r, std::move(q), "A"});
    }
  }
  for (const auto& img : larger_images) {
    for (int d = 1; d <= taxonomy::kSubdimensionCount; ++d) {
      const int r = templates::preferred_role(d);
      std::string q = exemplars(img, d, r, "B");
      if (trim(q).empty()) throw std::invalid_argument("empty SFT target question");
      out.batch_b.push_back(SftExample{img, d, r, std::move(q), "B"});
    }
  }
  return out;
}

std::string dpo_record_line(const PreferencePair& p) {
  json j{{"image_id", p.image_id},
         {"d", p.d},
         {"prompt_hash", p.winner.prompt_hash},
         {"chosen", p.winner.question},
         {"rejected", p.loser.question},
         {"scores", {{"chosen", p.winner_score}, {"rejected", p.loser_score}}},
         {"iteration", p.iteration}};
  return j.dump();
}

std::size_t export_dpo_dataset(std::span<const PreferencePair> pairs,
                               const std::filesystem::path& out) {
  if (pairs.empty()) throw std::invalid_argument("no preference pairs to export");
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + out.string());
  for (const auto& p : pairs) f << dpo_record_line(p) << "\n";
  f.flush();
  if (!f) throw std::runtime_error("write failed for " + out.string());
  return pairs.size();
}

}  // namespace vlfuzz::preference
