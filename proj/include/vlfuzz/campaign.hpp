#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vlfuzz/dpo_core.hpp"
#include "vlfuzz/gateway.hpp"
#include "vlfuzz/image_pool.hpp"
#include "vlfuzz/store.hpp"
#include "vlfuzz/taxonomy.hpp"

// One fuzzing pass: generator prompts, candidate probes per (image, d), and
// target answers. Everything produced here is persisted before returning.
namespace vlfuzz::campaign {

struct GeneratorPrompt {
  std::string system;
  std::string text;
  gateway::ImagePayload image;
  std::string prompt_hash;  // over system, text and image id
};

// Prompt text only; the image is attached by the caller.
GeneratorPrompt build_generator_prompt(const gateway::ImagePayload& image, int d, int r,
                                       bool with_role_exemplars,
                                       const std::optional<std::string>& template_text = std::nullopt);

// Strips whitespace and surrounding quotes. Empty output and more than one
// '?' outside quoted text are rejected; `why` receives the reason.
std::optional<std::string> clean_question(std::string_view raw, std::string* why = nullptr);

// Base64 payloads of pool images, encoded once per id.
class PayloadCache {
 public:
  explicit PayloadCache(const images::ImagePool& pool) : pool_(pool) {}
  gateway::ImagePayload get(const std::string& image_id);

 private:
  const images::ImagePool& pool_;
  std::mutex mu_;
  std::map<std::string, gateway::ImagePayload> cache_;
};

struct Probe {
  std::string probe_id;
  std::string image_id;          // image posed to the target
  std::string context_image_id;  // image the question was generated from
  int d = 0;
  int r = 0;
  std::string question;
  int template_row = -1;  // -1 when the generator ran without a policy template
  int template_index = -1;
  std::string generator_endpoint;
  std::string prompt_hash;
  gateway::DecodingParams decoding;
  std::string created_at;
  int iteration = 0;
  std::string scope;  // "train" or "eval"
  std::optional<images::PerturbationSpec> perturbation;
};

nlohmann::json to_json(const Probe& p);
Probe probe_from_json(const nlohmann::json& j);

struct TargetAnswer {
  std::string answer_id;  // probe_id + ":" + target
  std::string probe_id;
  std::string target_endpoint;
  std::string answer;
  double latency_ms = 0.0;
  int iteration = 0;
  std::string scope;
};

nlohmann::json to_json(const TargetAnswer& a);
TargetAnswer answer_from_json(const nlohmann::json& j);

std::string answer_id_for(const std::string& probe_id, const std::string& target);

struct CandidateSet {
  std::string set_id;
  std::string image_id;
  int d = 0;
  int iteration = 0;
  std::vector<Probe> probes;
  std::vector<TargetAnswer> answers;  // positional with probes
  bool unpaired = false;              // fewer than two surviving candidates
};

nlohmann::json set_record(const CandidateSet& s);

// Template choice for one candidate slot.
struct PolicyView {
  const dpo::TemplateLibrary* library = nullptr;
  const dpo::ToyPolicy* policy = nullptr;  // null: the generator picks its own wording
};

struct PassConfig {
  std::string generator;
  std::string target;
  int n_per_context = 4;
  int images_per_iteration = 0;  // 0: every image of the split
  bool with_role_exemplars = true;
  int max_in_flight = 8;
  images::PerturbationSpec perturbation;
  taxonomy::SamplingPriors priors = taxonomy::SamplingPriors::uniform();
  std::uint64_t seed = 0;
  int iteration = 0;
  std::string eval_scope = "eval";  // scope tag of run_eval_pass records
};

struct PassContext {
  gateway::Gateway& gateway;
  images::ImagePool& pool;
  PayloadCache& payloads;
  store::RunStore& store;
};

// Candidate slots that were dropped, with the stage that failed.
struct Failure {
  std::string stage;  // "generate" | "answer"
  std::string image_id;
  int d = 0;
  int r = 0;
  std::string message;
};

nlohmann::json to_json(const Failure& f);

struct PassResult {
  std::vector<CandidateSet> sets;
  std::vector<Failure> failures;
};

// Images sampled for a training pass, in pool order.
std::vector<std::string> select_images(const std::vector<images::ImageRef>& split,
                                       int budget, std::uint64_t seed, int iteration);

PassResult generate_candidates(PassContext ctx, const std::vector<std::string>& image_ids,
                               const PolicyView& view, const PassConfig& cfg);

struct EvalResult {
  std::vector<Probe> probes;
  std::map<std::string, std::vector<TargetAnswer>> answers;  // by target
  std::set<std::string> incomplete;                          // targets with missing answers
  std::vector<Failure> failures;
};

// One probe per (image, d); the same probe set is posed to every target.
EvalResult run_eval_pass(PassContext ctx, const std::vector<std::string>& image_ids,
                         const std::vector<std::string>& targets, const PolicyView& view,
                         const PassConfig& cfg);

}  // namespace vlfuzz::campaign
