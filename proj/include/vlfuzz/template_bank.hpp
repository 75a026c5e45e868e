#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Shipped question templates, role exemplars, and the preferred-role table.
//
// A template is a question with slot tokens in braces ({obj}, {high}, {absent},
// {near}/{far}, ...). Slots are filled from a scene fixture when the template
// is realized; see sim_models for the slot semantics.
namespace vlfuzz::templates {

inline constexpr std::size_t kPerRole = 4;

// Position of a template within its (d, r) block.
enum Variant : std::size_t {
  kPlain = 0,        // direct question about the subdimension
  kSignature = 1,    // the role's characteristic stress probe
  kAlternate = 2,    // a second stress probe for the role
  kSpeculative = 3,  // asks for something the image cannot show
};

// The kPerRole templates of context (d, r); distinct within the block.
std::vector<std::string> templates_for(int d, int r);

std::string_view plain_question(int d);
std::string_view role_prefix(int r);

// Two curated exemplar questions per role.
std::array<std::string_view, 2> role_exemplars(int r);

// One plausible role per subdimension (preference-hint batch).
int preferred_role(int d);

}  // namespace vlfuzz::templates
