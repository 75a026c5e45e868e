#include "vlfuzz/template_bank.hpp"

#include "vlfuzz/taxonomy.hpp"

namespace vlfuzz::templates {
namespace {

constexpr std::array<std::string_view, taxonomy::kSubdimensionCount> kPlainQuestions{{
    "Is there a {obj} in the image?",
    "What kind of place is shown in the image?",
    "Is there a {person} in the image?",
    "What color is the {obj}?",
    "What is the {made} made of?",
    "Which is larger, the {small} or the {big}?",
    "What is the {stateful} doing?",
    "Is the {left} to the left of the {right}?",
    "Which is closer to you, the {far} or the {near}?",
    "What is the {part} part of?",
    "What is the {occluder} partially hiding?",
    "How many {low}s are there?",
    "Are there many {high}s in the image?",
    "Are there more {high}s than {low}s?",
    "What is the {holder} holding?",
    "Who is the {talker} talking to?",
    "What event is taking place?",
    "How many {low}s and {low2}s are there in total?",
    "Is this a {scene} scene?",
    "What is the {stateful} doing right now?",
    "What is the {person} trying to do?",
    "What does the text on the {texted} say?",
    "What is written on the {texted}?",
    "Is the {person} {state}?",
}};

constexpr std::array<std::string_view, taxonomy::kRoleCount> kPrefix{{
    "",
    "Put simply: ",
    "Answer from the image alone. ",
    "Ignore what is typical. ",
    "Consider the whole scene. ",
    "Trust only what is visible. ",
    "Look at the layout. ",
    "As things stand now: ",
}};

// Signature, alternate and speculative templates per role.
constexpr std::array<std::array<std::string_view, 3>, taxonomy::kRoleCount> kRoleTemplates{{
    {{"How many {high}s are there?",
      "Is there a {absent} in the image?",
      "What is behind the photographer?"}},
    {{"What is the number of {high}s in the image?",
      "Which one is nearer to the camera, the {far} or the {near}?",
      "What will the {obj} do next?"}},
    {{"Is it true that there is no {obj} in the image?",
      "Is the {right} to the left of the {left}?",
      "Why was the {obj} placed here?"}},
    {{"Scenes like this often include a {absent}. Is there a {absent} in the image?",
      "Is this a {wrongscene} scene?",
      "What brand is the {obj}?"}},
    {{"How many {high}s and {low}s are there in total?",
      "Are there more {low}s than {high}s?",
      "What is the {absent} made of?"}},
    {{"Is the {obj} {wrongcolor}?",
      "Does the image contain a {absent}?",
      "What color is the {absent}?"}},
    {{"Which is closer to the camera, the {far} or the {near}?",
      "Which is closer to the viewer, the {near} or the {far}?",
      "What is inside the {obj}?"}},
    {{"If {more} more {obj}s were added, how many {obj}s would there be?",
      "If {one} {obj}s were removed, how many {obj}s would remain?",
      "If {more} {obj}s were removed, how many {obj}s would remain?"}},
}};

constexpr std::array<std::array<std::string_view, 2>, taxonomy::kRoleCount> kExemplars{{
    {{"How many people are waiting at the bus stop?",
      "What color is the umbrella on the left?"}},
    {{"What is the number of dogs lying on the grass?",
      "Which animal is the child petting?"}},
    {{"Is it true that there is no cat on the sofa?",
      "Is it false that the lamp is switched off?"}},
    {{"Kitchens usually have a kettle. Is there a kettle in this image?",
      "Buses are usually yellow. Is the bus yellow?"}},
    {{"Is the small red cup to the left of the laptop?",
      "How many bicycles and benches are there in total?"}},
    {{"Is the banana in this picture blue?",
      "How many fingers does the raised hand show?"}},
    {{"Which is closer to the camera, the bench or the tree?",
      "What is partially hidden behind the parked car?"}},
    {{"If two more apples were placed in the bowl, how many apples would there be?",
      "If one chair were removed, how many chairs would remain?"}},
}};

constexpr std::array<int, taxonomy::kSubdimensionCount> kPreferredRole{{
    4, 4, 6, 6, 2, 7, 3, 7, 7, 5, 7, 8, 2, 5, 5, 3, 4, 5, 4, 8, 3, 1, 1, 3,
}};

}  // namespace

std::string_view plain_question(int d) {
  taxonomy::require_context(d, 1);
  return kPlainQuestions[static_cast<std::size_t>(d - 1)];
}

std::string_view role_prefix(int r) {
  taxonomy::require_context(1, r);
  return kPrefix[static_cast<std::size_t>(r - 1)];
}

std::vector<std::string> templates_for(int d, int r) {
  taxonomy::require_context(d, r);
  const auto& role_templates = kRoleTemplates[static_cast<std::size_t>(r - 1)];
  std::vector<std::string> out;
  out.reserve(kPerRole);
  out.push_back(std::string(role_prefix(r)) + std::string(plain_question(d)));
  for (auto t : role_templates) {
    out.emplace_back(t);
  }
  return out;
}

std::array<std::string_view, 2> role_exemplars(int r) {
  taxonomy::require_context(1, r);
  return kExemplars[static_cast<std::size_t>(r - 1)];
}

int preferred_role(int d) {
  taxonomy::require_context(d, 1);
  return kPreferredRole[static_cast<std::size_t>(d - 1)];
}

}  // namespace vlfuzz::templates
