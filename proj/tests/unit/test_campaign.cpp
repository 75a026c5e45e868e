#include <set>

#include "doctest.h"
#include "vlfuzz/template_bank.hpp"
#include "workspace.hpp"

using namespace vlfuzz::campaign;
using vlfuzz::testing::MiniWorld;

namespace {

// Generator that always emits two questions at once.
class ChattyGenerator : public vlfuzz::gateway::SimulatedModel {
 public:
  std::string respond(const vlfuzz::gateway::ModelEndpoint&, const vlfuzz::gateway::ChatRequest&) override {
    return "Is it red? Or blue?";
  }
};

}  // namespace

TEST_CASE("generator prompt") {
  const vlfuzz::gateway::ImagePayload img{"image/x-portable-pixmap", "AAAA", "img-1"};
  const auto with = build_generator_prompt(img, 5, 3, true);
  const auto without = build_generator_prompt(img, 5, 3, false);
  for (auto ex : vlfuzz::templates::role_exemplars(3)) {
    CHECK(with.text.find(std::string(ex)) != std::string::npos);
    CHECK(without.text.find(std::string(ex)) == std::string::npos);
  }
  CHECK(with.text.find(std::string(vlfuzz::taxonomy::subdimension(5).name)) != std::string::npos);
  CHECK(with.text.find(std::string(vlfuzz::taxonomy::role(3).name)) != std::string::npos);
  CHECK(with.prompt_hash != without.prompt_hash);
  CHECK(with.prompt_hash == build_generator_prompt(img, 5, 3, true).prompt_hash);
  CHECK(with.image.base64 == "AAAA");

  auto other_pixels = img;
  other_pixels.base64 = "BBBB";
  CHECK(build_generator_prompt(other_pixels, 5, 3, true).prompt_hash == with.prompt_hash);
  auto other_id = img;
  other_id.image_id = "img-2";
  CHECK(build_generator_prompt(other_id, 5, 3, true).prompt_hash != with.prompt_hash);

  const auto templ = build_generator_prompt(img, 5, 3, true, std::string("How many {obj}s?"));
  CHECK(templ.text.find("How many {obj}s?") != std::string::npos);
  CHECK_THROWS(build_generator_prompt(img, 0, 3, true));
  CHECK_THROWS(build_generator_prompt(img, 5, 9, true));

  // the simulated generator reads back what the prompt carries
  const auto fields = vlfuzz::sim::parse_generator_prompt(templ.text);
  REQUIRE(fields);
  CHECK(fields->d == 5);
  CHECK(fields->r == 3);
  CHECK(fields->exemplars);
  CHECK(fields->template_text == std::string("How many {obj}s?"));
  CHECK_FALSE(vlfuzz::sim::parse_generator_prompt(without.text)->exemplars);
}

TEST_CASE("question hygiene") {
  CHECK(clean_question("  How many dogs?  ") == std::string("How many dogs?"));
  CHECK(clean_question("\"How many dogs?\"") == std::string("How many dogs?"));
  CHECK(clean_question("'\"How many dogs?\"'") == std::string("How many dogs?"));
  CHECK(clean_question("\xE2\x80\x9CHow many dogs?\xE2\x80\x9D") == std::string("How many dogs?"));
  CHECK(clean_question("What does the sign \"Open?\" mean?") == std::string("What does the sign \"Open?\" mean?"));
  std::string why;
  CHECK_FALSE(clean_question("   ", &why));
  CHECK(why == "empty output");
  CHECK_FALSE(clean_question("\"\"", &why));
  CHECK_FALSE(clean_question("Is it red? Is it blue?", &why));
  CHECK(why == "more than one question");
  CHECK_FALSE(clean_question("Line one?\nLine two", &why));
  CHECK(why == "multi-line output");
}

TEST_CASE("image selection") {
  std::vector<vlfuzz::images::ImageRef> split(10);
  for (int i = 0; i < 10; ++i) split[static_cast<std::size_t>(i)].id = "id" + std::to_string(i);
  CHECK(select_images(split, 0, 1, 0).size() == 10);
  CHECK(select_images(split, 20, 1, 0).size() == 10);
  const auto a = select_images(split, 4, 1, 0);
  CHECK(a.size() == 4);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(a == select_images(split, 4, 1, 0));
  bool differs = false;
  for (int it = 1; it < 6; ++it) differs |= select_images(split, 4, 1, it) != a;
  CHECK(differs);
}

TEST_CASE("training pass produces one candidate set per image and subdimension") {
  MiniWorld w(2, 5, "pass");
  auto cfg = w.pass_config();
  const auto res = generate_candidates(w.ctx(), w.ids(), PolicyView{}, cfg);
  CHECK(res.failures.empty());
  REQUIRE(res.sets.size() == 48);
  std::set<std::string> probe_ids;
  for (const auto& s : res.sets) {
    CHECK(s.probes.size() == 3);
    CHECK(s.answers.size() == 3);
    CHECK_FALSE(s.unpaired);
    for (std::size_t i = 0; i < s.probes.size(); ++i) {
      const auto& p = s.probes[i];
      CHECK(p.d == s.d);
      CHECK(p.context_image_id == s.image_id);
      CHECK(p.r >= 1);
      CHECK(p.r <= 8);
      CHECK(p.scope == "train");
      CHECK(s.answers[i].probe_id == p.probe_id);
      CHECK(s.answers[i].answer_id == answer_id_for(p.probe_id, "target"));
      CHECK(probe_ids.insert(p.probe_id).second);
      // perturbation probes are posed on a derived image of the context
      if (p.r == static_cast<int>(vlfuzz::taxonomy::RoleName::VisualPerturbation)) {
        CHECK(p.image_id != p.context_image_id);
        CHECK(w.pool.root_of(p.image_id) == p.context_image_id);
        CHECK(p.perturbation.has_value());
      } else {
        CHECK(p.image_id == p.context_image_id);
      }
      const auto rt = probe_from_json(to_json(p));
      CHECK(to_json(rt) == to_json(p));
    }
  }
  CHECK(w.store->count("probes") == 144);
  CHECK(w.store->count("answers") == 144);
  CHECK(w.store->count("candidate_sets") == 48);
  CHECK(w.store->verify().empty());
}

TEST_CASE("training pass is deterministic") {
  MiniWorld a(2, 5, "det-a"), b(2, 5, "det-b");
  generate_candidates(a.ctx(), a.ids(), PolicyView{}, a.pass_config());
  generate_candidates(b.ctx(), b.ids(), PolicyView{}, b.pass_config());
  for (const char* k : {"probes", "answers", "candidate_sets", "exchanges"}) {
    CHECK(a.store->read_all(k) == b.store->read_all(k));
  }
}

TEST_CASE("training pass argument checks") {
  MiniWorld w(1, 5, "args");
  auto cfg = w.pass_config();
  cfg.n_per_context = 1;
  CHECK_THROWS_AS(generate_candidates(w.ctx(), w.ids(), PolicyView{}, cfg), std::invalid_argument);
  cfg = w.pass_config();
  cfg.generator = "absent";
  CHECK_THROWS_AS(generate_candidates(w.ctx(), w.ids(), PolicyView{}, cfg), std::invalid_argument);
  cfg = w.pass_config();
  CHECK_THROWS_AS(run_eval_pass(w.ctx(), w.ids(), {}, PolicyView{}, cfg), std::invalid_argument);
}

TEST_CASE("hygiene failures drop candidates and are logged") {
  MiniWorld w(1, 5, "chatty");
  w.env.gw.register_simulator("chatty", std::make_shared<ChattyGenerator>());
  w.env.gw.register_endpoint(
      vlfuzz::testing::sim_endpoint("chatty", vlfuzz::gateway::EndpointKind::Generator, "chatty"));
  auto cfg = w.pass_config();
  cfg.generator = "chatty";
  const auto res = generate_candidates(w.ctx(), w.ids(), PolicyView{}, cfg);
  CHECK(res.sets.empty());
  CHECK(res.failures.size() == 72);
  CHECK(res.failures.front().stage == "generate");
  CHECK(res.failures.front().message.find("more than one question") != std::string::npos);
  CHECK(w.store->count("probes") == 0);
  CHECK(w.store->count("events") == 72);
  // each slot was attempted twice
  CHECK(w.store->count("exchanges") == 144);
}

TEST_CASE("eval pass poses one probe per context to every target") {
  MiniWorld w(5, 5, "eval");
  w.env.gw.register_endpoint(
      vlfuzz::testing::sim_endpoint("heldout-a", vlfuzz::gateway::EndpointKind::Target, "heldout-a"));
  auto cfg = w.pass_config();
  const auto res = run_eval_pass(w.ctx(), w.ids(), {"target", "heldout-a"}, PolicyView{}, cfg);
  CHECK(res.probes.size() == 120);
  CHECK(res.answers.at("target").size() == 120);
  CHECK(res.answers.at("heldout-a").size() == 120);
  CHECK(res.incomplete.empty());
  CHECK(w.store->count("answers") == 240);
  for (const auto& p : res.probes) CHECK(p.scope == "eval");
  // the same probes reach both targets
  for (std::size_t i = 0; i < 120; ++i) {
    CHECK(res.answers.at("target")[i].probe_id == res.answers.at("heldout-a")[i].probe_id);
  }
}

TEST_CASE("an unreachable target is marked incomplete") {
  MiniWorld w(1, 5, "dead");
  w.env.gw.register_endpoint(
      vlfuzz::testing::sim_endpoint("dead", vlfuzz::gateway::EndpointKind::Target, "no-such-profile"));
  auto cfg = w.pass_config();
  const auto res = run_eval_pass(w.ctx(), w.ids(), {"target", "dead"}, PolicyView{}, cfg);
  CHECK(res.answers.at("target").size() == 24);
  CHECK(res.answers.at("dead").empty());
  CHECK(res.incomplete == std::set<std::string>{"dead"});
  CHECK(res.failures.size() == 24);
  CHECK(res.failures.front().stage == "answer");
}
