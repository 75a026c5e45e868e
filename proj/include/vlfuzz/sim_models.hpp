#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vlfuzz/gateway.hpp"
#include "vlfuzz/image_pool.hpp"

// Offline stand-ins for the generator, target and judge. The simulated target
// never looks at pixels: every image id resolves to a scene fixture, and
// answers are computed from that fixture.
namespace vlfuzz::sim {

struct SimObject {
  std::string category;  // single lowercase word; plural is category + "s"
  std::string color;
  int count = 1;
  // "left_of:<cat>", "closer_than:<cat>", "larger_than:<cat>", "part_of:<cat>",
  // "occludes:<cat>", "holding:<cat>", "talking_to:<cat>"
  std::vector<std::string> relations;
  std::optional<std::string> material;
  std::optional<std::string> state;
  std::optional<std::string> text;

  std::optional<std::string> related(std::string_view relation) const;
};

struct SimFixture {
  std::string image_id;
  std::string scene;
  std::string event;
  std::vector<SimObject> objects;

  const SimObject* find(std::string_view category) const;
};

nlohmann::json to_json(const SimFixture& f);
SimFixture fixture_from_json(const nlohmann::json& j);

std::vector<SimFixture> load_fixtures(const std::filesystem::path& path);
void save_fixtures(const std::filesystem::path& path, const std::vector<SimFixture>& fixtures);

// Vocabularies shared by the renderer, the parser and the sample world.
const std::vector<std::string>& object_categories();
const std::vector<std::string>& person_categories();
const std::vector<std::string>& colors();
const std::vector<std::string>& states();
const std::vector<std::string>& scenes();
const std::vector<std::string>& materials();

enum class QuestionKind {
  Presence,
  NegPresence,
  Count,
  CountTotal,
  CountAdd,
  CountRemove,
  ManyYn,
  MoreYn,
  Color,
  AttrYn,
  Material,
  State,
  Intent,
  Scene,
  SceneYn,
  Event,
  LeftYn,
  Closer,
  Larger,
  PartOf,
  Occludes,
  Holding,
  Talking,
  Text,
  Unanswerable,  // asks for something no image can show
};

std::string to_string(QuestionKind k);

struct ParsedQuestion {
  QuestionKind kind = QuestionKind::Unanswerable;
  std::vector<std::string> words;  // slot values; plurals already singularized
  int number = 0;
  std::string frame;  // Closer: "you", "camera" or "viewer"

  bool yes_no() const;
};

// Case-insensitive; leading sentences ending in ". " or ": " are dropped.
std::optional<ParsedQuestion> parse_question(std::string_view question);

struct GroundTruth {
  bool answerable = false;
  std::string answer;  // canonical lowercase form when answerable
};

GroundTruth ground_truth(const SimFixture& f, std::string_view question);

// Lowercase, trimmed, trailing period and a leading article removed.
std::string normalize_answer(std::string_view answer);

// Fills slot tokens from the fixture. Returns nothing when a slot has no
// admissible value in this scene.
std::optional<std::string> render_template(std::string_view tmpl, const SimFixture& f,
                                           std::uint64_t seed);

// Question emitted when a template cannot be instantiated for the fixture.
std::string_view fallback_question();

// Instantiates `tmpl` when given; otherwise the role's signature template
// (exemplars on) or the plain subdimension template (exemplars off).
std::string sim_generate(const SimFixture& f, int d, int r, std::uint64_t seed,
                         const std::optional<std::string>& tmpl = std::nullopt,
                         bool with_exemplars = true);

struct TargetWeaknessProfile {
  std::string name = "default";
  double yes_bias = 0.7;
  int count_ceiling = 5;
  double count_error = 0.9;
  double conditional_arithmetic_fail = 0.8;
  double subject_swap_sensitivity = 0.5;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TargetWeaknessProfile& p);
TargetWeaknessProfile profile_from_json(const nlohmann::json& j);

// Built-in profiles: "default", "heldout-a", "heldout-b".
TargetWeaknessProfile builtin_profile(const std::string& name);

// Count the target perceives for a category with true count n.
int perceived_count(int n, std::string_view category, const TargetWeaknessProfile& p,
                    std::uint64_t seed);

std::string sim_answer(const SimFixture& f, std::string_view question,
                       const TargetWeaknessProfile& profile, std::uint64_t seed);

enum class JudgeBehavior { Oracle, Split32, LowConfidence, AlwaysConfidentCorrect, HardDown };
std::string to_string(JudgeBehavior b);
JudgeBehavior judge_behavior_from_string(const std::string& s);

struct SimVote {
  int label = 0;
  double confidence = 0.0;
};

// Vote for one committee call; sample_index selects the call within a round.
SimVote sim_judge(const SimFixture& f, std::string_view question, std::string_view answer,
                  JudgeBehavior behavior, std::uint64_t seed, int sample_index);

// "LABEL=<name> CONFIDENCE=<x.xx>"
std::string format_vote(const SimVote& v);

// Fixture lookup shared by the simulated endpoints. Image ids of derived
// images are mapped to their originals through the resolver.
class SimWorld {
 public:
  explicit SimWorld(std::vector<SimFixture> fixtures);

  void set_resolver(std::function<std::string(const std::string&)> resolver) {
    resolver_ = std::move(resolver);
  }
  const SimFixture* find(const std::string& image_id) const;
  const SimFixture& require(const std::string& image_id) const;
  std::size_t size() const { return fixtures_.size(); }

 private:
  std::map<std::string, SimFixture> fixtures_;
  std::function<std::string(const std::string&)> resolver_;
};

std::shared_ptr<gateway::SimulatedModel> make_generator(std::shared_ptr<const SimWorld> world);
std::shared_ptr<gateway::SimulatedModel> make_target(std::shared_ptr<const SimWorld> world,
                                                     TargetWeaknessProfile profile);
std::shared_ptr<gateway::SimulatedModel> make_judge(std::shared_ptr<const SimWorld> world,
                                                    JudgeBehavior behavior);

// Registers "sim-generator", the three target profiles and every judge
// behavior under their names.
void register_simulators(gateway::Gateway& gw, std::shared_ptr<const SimWorld> world);

// Prompt fields the simulated generator reads.
struct GeneratorPromptFields {
  int d = 0;
  int r = 0;
  bool exemplars = false;
  std::optional<std::string> template_text;
};
std::optional<GeneratorPromptFields> parse_generator_prompt(std::string_view prompt);

struct JudgePromptFields {
  std::string question;
  std::string answer;
};
std::optional<JudgePromptFields> parse_judge_prompt(std::string_view prompt);

// Synthetic scenes with matching P6 renders.
struct SampleScene {
  images::Image image;
  SimFixture fixture;
};
std::vector<SampleScene> make_sample_world(int n, std::uint64_t seed);

}  // namespace vlfuzz::sim
