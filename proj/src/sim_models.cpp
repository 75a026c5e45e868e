#include "vlfuzz/sim_models.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <set>

#include "vlfuzz/judge.hpp"
#include "vlfuzz/taxonomy.hpp"
#include "vlfuzz/template_bank.hpp"
#include "vlfuzz/util.hpp"

namespace vlfuzz::sim {
namespace {

using nlohmann::json;

const std::vector<std::string> kObjects{
    "car",    "dog",   "cat",    "chair",   "bottle", "cup",    "book",    "apple",
    "bird",   "lamp",  "plate",  "phone",   "clock",  "bag",    "boat",    "kite",
    "umbrella", "bicycle", "table", "horse", "cow",   "tree",   "flower",  "balloon",
    "candle", "shoe",  "hat",    "cake",    "pillow", "laptop", "banana",  "bowl",
    "vase",   "window", "door",  "wheel",   "handle", "poster", "truck",   "duck"};
const std::vector<std::string> kPersons{"boy",     "girl",    "player", "worker", "chef",
                                        "tourist", "student", "driver", "vendor", "teacher"};
const std::vector<std::string> kColors{"red",  "blue",  "green", "yellow", "white",
                                       "black", "brown", "gray", "pink",  "purple"};
const std::vector<std::string> kStates{"standing", "sitting",  "walking", "running",
                                       "reading",  "eating",   "sleeping", "waving"};
const std::vector<std::string> kScenes{"kitchen",   "street", "park",   "office",
                                       "beach",     "classroom", "market", "station"};
const std::vector<std::string> kEvents{"cooking dinner",   "a parade",         "a picnic",
                                       "a meeting",        "a volleyball game", "a lecture",
                                       "grocery shopping", "boarding a train"};
const std::vector<std::string> kMaterials{"metal", "wood",    "plastic", "glass",
                                          "paper", "fabric", "ceramic", "leather"};
const std::vector<std::string> kTexts{"open", "exit", "sale", "welcome",
                                      "stop", "no parking", "fresh bread", "platform 3"};
const std::set<std::string> kAnimals{"dog", "cat", "bird", "horse", "cow", "duck"};

bool contains(const std::vector<std::string>& v, std::string_view s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

// ---------------------------------------------------------------------------
// Question parsing

struct PatternDef {
  QuestionKind kind;
  std::string_view text;
  std::string_view frame;
};

// Slots: {w} one word, {p} plural word (trailing s removed), {n} integer.
constexpr std::array<PatternDef, 38> kPatterns{{
    {QuestionKind::NegPresence, "is it true that there is no {w} in the image", ""},
    {QuestionKind::Presence, "is there a {w} in the image", ""},
    {QuestionKind::Presence, "is there an {w} in the image", ""},
    {QuestionKind::Presence, "does the image contain a {w}", ""},
    {QuestionKind::Presence, "does the image contain an {w}", ""},
    {QuestionKind::CountTotal, "how many {p} and {p} are there in total", ""},
    {QuestionKind::Count, "how many {p} are there", ""},
    {QuestionKind::Count, "how many {p} are in the image", ""},
    {QuestionKind::Count, "what is the number of {p} in the image", ""},
    {QuestionKind::Count, "how many {p}", ""},
    {QuestionKind::CountAdd, "if {n} more {p} were added, how many {p} would there be", ""},
    {QuestionKind::CountRemove, "if {n} {p} were removed, how many {p} would remain", ""},
    {QuestionKind::ManyYn, "are there many {p} in the image", ""},
    {QuestionKind::MoreYn, "are there more {p} than {p}", ""},
    {QuestionKind::Color, "what color is the {w}", ""},
    {QuestionKind::Material, "what is the {w} made of", ""},
    {QuestionKind::State, "what is the {w} doing right now", ""},
    {QuestionKind::State, "what is the {w} doing", ""},
    {QuestionKind::Intent, "what is the {w} trying to do", ""},
    {QuestionKind::Scene, "what kind of place is shown in the image", ""},
    {QuestionKind::SceneYn, "is this a {w} scene", ""},
    {QuestionKind::Event, "what event is taking place", ""},
    {QuestionKind::LeftYn, "is the {w} to the left of the {w}", ""},
    {QuestionKind::Closer, "which is closer to you, the {w} or the {w}", "you"},
    {QuestionKind::Closer, "which is closer to the camera, the {w} or the {w}", "camera"},
    {QuestionKind::Closer, "which is closer to the viewer, the {w} or the {w}", "viewer"},
    {QuestionKind::Closer, "which one is nearer to the camera, the {w} or the {w}", "camera"},
    {QuestionKind::Larger, "which is larger, the {w} or the {w}", ""},
    {QuestionKind::PartOf, "what is the {w} part of", ""},
    {QuestionKind::Occludes, "what is the {w} partially hiding", ""},
    {QuestionKind::Holding, "what is the {w} holding", ""},
    {QuestionKind::Talking, "who is the {w} talking to", ""},
    {QuestionKind::Text, "what does the text on the {w} say", ""},
    {QuestionKind::Text, "what is written on the {w}", ""},
    {QuestionKind::Unanswerable, "what is behind the photographer", ""},
    {QuestionKind::Unanswerable, "what will the {w} do next", ""},
    {QuestionKind::Unanswerable, "why was the {w} placed here", ""},
    {QuestionKind::AttrYn, "is the {w} {w}", ""},
}};

// Patterns only reachable by exact phrase, kept apart so the table above
// stays ordered from specific to general.
constexpr std::array<PatternDef, 2> kLatePatterns{{
    {QuestionKind::Unanswerable, "what brand is the {w}", ""},
    {QuestionKind::Unanswerable, "what is inside the {w}", ""},
}};

bool is_word_char(char c) { return c >= 'a' && c <= 'z'; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

bool match_pattern(std::string_view s, std::string_view pat, ParsedQuestion& out) {
  std::size_t i = 0;
  std::size_t j = 0;
  while (j < pat.size()) {
    if (pat[j] == '{') {
      const char slot = pat[j + 1];
      j += 3;
      const std::size_t start = i;
      if (slot == 'n') {
        while (i < s.size() && is_digit(s[i])) ++i;
        if (i == start || i - start > 6) return false;
        out.number = std::stoi(std::string(s.substr(start, i - start)));
      } else {
        while (i < s.size() && is_word_char(s[i])) ++i;
        if (i == start) return false;
        std::string w(s.substr(start, i - start));
        if (slot == 'p') {
          if (w.size() < 2 || w.back() != 's') return false;
          w.pop_back();
        }
        out.words.push_back(std::move(w));
      }
      continue;
    }
    if (i >= s.size() || s[i] != pat[j]) return false;
    ++i;
    ++j;
  }
  return i == s.size();
}

std::string strip_question(std::string_view question) {
  std::string s = to_lower(trim(question));
  while (!s.empty() && (s.back() == '?' || s.back() == ' ')) s.pop_back();
  std::size_t cut = 0;
  for (std::size_t k = 0; k + 1 < s.size(); ++k) {
    if ((s[k] == '.' || s[k] == ':') && s[k + 1] == ' ') cut = k + 2;
  }
  return trim(std::string_view(s).substr(cut));
}

GroundTruth yes_no(bool v) { return GroundTruth{true, v ? "yes" : "no"}; }
GroundTruth unanswerable() { return GroundTruth{false, ""}; }
GroundTruth answer(std::string a) { return GroundTruth{true, normalize_answer(a)}; }

int count_of(const SimFixture& f, const std::string& cat) {
  const SimObject* o = f.find(cat);
  return o == nullptr ? 0 : o->count;
}

GroundTruth pair_relation(const SimFixture& f, std::string_view rel, const std::string& a,
                          const std::string& b, bool as_yes_no) {
  const SimObject* oa = f.find(a);
  const SimObject* ob = f.find(b);
  if (oa == nullptr || ob == nullptr || a == b) return unanswerable();
  if (oa->related(rel) == b) return as_yes_no ? yes_no(true) : answer(a);
  if (ob->related(rel) == a) return as_yes_no ? yes_no(false) : answer(b);
  return unanswerable();
}

GroundTruth single_relation(const SimFixture& f, std::string_view rel, const std::string& a) {
  const SimObject* o = f.find(a);
  if (o == nullptr) return unanswerable();
  if (auto t = o->related(rel)) return answer(*t);
  return unanswerable();
}

GroundTruth truth_of(const SimFixture& f, const ParsedQuestion& q) {
  const auto& w = q.words;
  switch (q.kind) {
    case QuestionKind::Presence: return yes_no(count_of(f, w[0]) > 0);
    case QuestionKind::NegPresence: return yes_no(count_of(f, w[0]) == 0);
    case QuestionKind::Count: return answer(std::to_string(count_of(f, w[0])));
    case QuestionKind::CountTotal:
      if (w[0] == w[1]) return unanswerable();
      return answer(std::to_string(count_of(f, w[0]) + count_of(f, w[1])));
    case QuestionKind::CountAdd:
      if (w[0] != w[1]) return unanswerable();
      return answer(std::to_string(count_of(f, w[0]) + q.number));
    case QuestionKind::CountRemove: {
      if (w[0] != w[1]) return unanswerable();
      const int left = count_of(f, w[0]) - q.number;
      if (left < 0) return unanswerable();
      return answer(std::to_string(left));
    }
    case QuestionKind::ManyYn: return yes_no(count_of(f, w[0]) >= 6);
    case QuestionKind::MoreYn:
      if (w[0] == w[1]) return unanswerable();
      return yes_no(count_of(f, w[0]) > count_of(f, w[1]));
    case QuestionKind::Color: {
      const SimObject* o = f.find(w[0]);
      return o == nullptr ? unanswerable() : answer(o->color);
    }
    case QuestionKind::AttrYn: {
      const SimObject* o = f.find(w[0]);
      if (o == nullptr) return unanswerable();
      if (contains(kColors, w[1])) return yes_no(o->color == w[1]);
      if (contains(kStates, w[1])) return yes_no(o->state && *o->state == w[1]);
      return unanswerable();
    }
    case QuestionKind::Material: {
      const SimObject* o = f.find(w[0]);
      if (o == nullptr || !o->material) return unanswerable();
      return answer(*o->material);
    }
    case QuestionKind::State:
    case QuestionKind::Intent: {
      const SimObject* o = f.find(w[0]);
      if (o == nullptr || !o->state) return unanswerable();
      return answer(*o->state);
    }
    case QuestionKind::Scene: return answer(f.scene);
    case QuestionKind::SceneYn:
      if (!contains(kScenes, w[0])) return unanswerable();
      return yes_no(w[0] == f.scene);
    case QuestionKind::Event:
      if (f.event.empty()) return unanswerable();
      return answer(f.event);
    case QuestionKind::LeftYn: return pair_relation(f, "left_of", w[0], w[1], true);
    case QuestionKind::Closer: return pair_relation(f, "closer_than", w[0], w[1], false);
    case QuestionKind::Larger: return pair_relation(f, "larger_than", w[0], w[1], false);
    case QuestionKind::PartOf: return single_relation(f, "part_of", w[0]);
    case QuestionKind::Occludes: return single_relation(f, "occludes", w[0]);
    case QuestionKind::Holding: return single_relation(f, "holding", w[0]);
    case QuestionKind::Talking: return single_relation(f, "talking_to", w[0]);
    case QuestionKind::Text: {
      const SimObject* o = f.find(w[0]);
      if (o == nullptr || !o->text) return unanswerable();
      return answer(*o->text);
    }
    case QuestionKind::Unanswerable: return unanswerable();
  }
  return unanswerable();
}

// ---------------------------------------------------------------------------
// Template rendering

class SlotFiller {
 public:
  SlotFiller(const SimFixture& f, std::uint64_t seed) : f_(f), rng_(seed) {}

  std::optional<std::string> get(const std::string& token) {
    if (auto it = values_.find(token); it != values_.end()) return it->second;
    if (!resolve(token)) return std::nullopt;
    auto it = values_.find(token);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

 private:
  template <typename Pred>
  const SimObject* pick(Pred pred) {
    std::vector<const SimObject*> pool;
    for (const auto& o : f_.objects) {
      if (pred(o)) pool.push_back(&o);
    }
    if (pool.empty()) return nullptr;
    return pool[rng_.index(pool.size())];
  }

  const std::string* pick_word(const std::vector<std::string>& vocab,
                               const std::function<bool(const std::string&)>& ok) {
    std::vector<const std::string*> pool;
    for (const auto& w : vocab) {
      if (ok(w)) pool.push_back(&w);
    }
    if (pool.empty()) return nullptr;
    return pool[rng_.index(pool.size())];
  }

  bool set_pair(std::string_view rel, const char* first, const char* second, bool subject_first) {
    const SimObject* a = pick([&](const SimObject& o) { return o.related(rel).has_value(); });
    if (a == nullptr) return false;
    const std::string other = *a->related(rel);
    values_[first] = subject_first ? a->category : other;
    values_[second] = subject_first ? other : a->category;
    return true;
  }

  bool set_subject(std::string_view rel, const char* token) {
    const SimObject* a = pick([&](const SimObject& o) { return o.related(rel).has_value(); });
    if (a == nullptr) return false;
    values_[token] = a->category;
    return true;
  }

  bool resolve(const std::string& t) {
    if (t == "obj") {
      const SimObject* o = pick([](const SimObject&) { return true; });
      if (o == nullptr) return false;
      values_[t] = o->category;
      return true;
    }
    if (t == "low") {
      const SimObject* o = pick([](const SimObject& x) { return x.count <= 5; });
      if (o == nullptr) return false;
      values_[t] = o->category;
      return true;
    }
    if (t == "low2") {
      auto first = get("low");
      if (!first) return false;
      const SimObject* o =
          pick([&](const SimObject& x) { return x.count <= 5 && x.category != *first; });
      if (o == nullptr) return false;
      values_[t] = o->category;
      return true;
    }
    if (t == "high") {
      const SimObject* o = pick([](const SimObject& x) { return x.count >= 6; });
      if (o == nullptr) return false;
      values_[t] = o->category;
      return true;
    }
    if (t == "absent") {
      const std::string* w =
          pick_word(kObjects, [&](const std::string& c) { return f_.find(c) == nullptr; });
      if (w == nullptr) return false;
      values_[t] = *w;
      return true;
    }
    if (t == "more") {
      auto o = get("obj");
      if (!o) return false;
      values_[t] = std::to_string(count_of(f_, *o) + 1);
      return true;
    }
    if (t == "one") {
      values_[t] = "1";
      return true;
    }
    if (t == "left" || t == "right") return set_pair("left_of", "left", "right", true);
    if (t == "near" || t == "far") return set_pair("closer_than", "near", "far", true);
    if (t == "big" || t == "small") return set_pair("larger_than", "big", "small", true);
    if (t == "part") return set_subject("part_of", "part");
    if (t == "occluder") return set_subject("occludes", "occluder");
    if (t == "holder") return set_subject("holding", "holder");
    if (t == "talker") return set_subject("talking_to", "talker");
    if (t == "texted") {
      const SimObject* o = pick([](const SimObject& x) { return x.text.has_value(); });
      if (o == nullptr) return false;
      values_[t] = o->category;
      return true;
    }
    if (t == "stateful") {
      const SimObject* o = pick([](const SimObject& x) { return x.state.has_value(); });
      if (o == nullptr) return false;
      values_[t] = o->category;
      return true;
    }
    if (t == "made") {
      const SimObject* o = pick([](const SimObject& x) { return x.material.has_value(); });
      if (o == nullptr) return false;
      values_[t] = o->category;
      return true;
    }
    if (t == "person") {
      const SimObject* o = pick([](const SimObject& x) {
        return contains(kPersons, x.category) && x.state.has_value();
      });
      if (o == nullptr) return false;
      values_[t] = o->category;
      return true;
    }
    if (t == "state") {
      auto p = get("person");
      if (!p) return false;
      const SimObject* o = f_.find(*p);
      if (rng_.uniform() < 0.5) {
        values_[t] = *o->state;
      } else {
        const std::string* w =
            pick_word(kStates, [&](const std::string& s) { return s != *o->state; });
        values_[t] = *w;
      }
      return true;
    }
    if (t == "scene") {
      values_[t] = f_.scene;
      return true;
    }
    if (t == "wrongscene") {
      const std::string* w = pick_word(kScenes, [&](const std::string& s) { return s != f_.scene; });
      if (w == nullptr) return false;
      values_[t] = *w;
      return true;
    }
    if (t == "wrongcolor") {
      auto o = get("obj");
      if (!o) return false;
      const std::string color = f_.find(*o)->color;
      const std::string* w = pick_word(kColors, [&](const std::string& c) { return c != color; });
      values_[t] = *w;
      return true;
    }
    return false;
  }

  const SimFixture& f_;
  Rng rng_;
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Gateway bindings

class GeneratorModel : public gateway::SimulatedModel {
 public:
  explicit GeneratorModel(std::shared_ptr<const SimWorld> w) : world_(std::move(w)) {}

  std::string respond(const gateway::ModelEndpoint&, const gateway::ChatRequest& req) override {
    const auto fields = parse_generator_prompt(req.text());
    if (!fields) {
      throw gateway::GatewayError(gateway::ErrorKind::ProviderRejection,
                                  "simulated generator: prompt lacks subdimension/role lines");
    }
    if (!req.image) {
      throw gateway::GatewayError(gateway::ErrorKind::ProviderRejection,
                                  "simulated generator: request has no image");
    }
    const SimFixture& f = world_->require(req.image->image_id);
    return sim_generate(f, fields->d, fields->r, req.seed, fields->template_text, fields->exemplars);
  }

 private:
  std::shared_ptr<const SimWorld> world_;
};

class TargetModel : public gateway::SimulatedModel {
 public:
  TargetModel(std::shared_ptr<const SimWorld> w, TargetWeaknessProfile p)
      : world_(std::move(w)), profile_(std::move(p)) {}

  std::string respond(const gateway::ModelEndpoint&, const gateway::ChatRequest& req) override {
    if (!req.image) {
      throw gateway::GatewayError(gateway::ErrorKind::ProviderRejection,
                                  "simulated target: request has no image");
    }
    const SimFixture& f = world_->require(req.image->image_id);
    return sim_answer(f, req.text(), profile_, req.seed);
  }

 private:
  std::shared_ptr<const SimWorld> world_;
  TargetWeaknessProfile profile_;
};

class JudgeModel : public gateway::SimulatedModel {
 public:
  JudgeModel(std::shared_ptr<const SimWorld> w, JudgeBehavior b) : world_(std::move(w)), behavior_(b) {}

  std::string respond(const gateway::ModelEndpoint& ep, const gateway::ChatRequest& req) override {
    if (behavior_ == JudgeBehavior::HardDown) {
      throw gateway::GatewayError(gateway::ErrorKind::EndpointUnreachable,
                                  "simulated judge " + ep.name + " is down");
    }
    const auto fields = parse_judge_prompt(req.text());
    if (!fields || !req.image) {
      throw gateway::GatewayError(gateway::ErrorKind::ProviderRejection,
                                  "simulated judge: malformed judge prompt");
    }
    const SimFixture& f = world_->require(req.image->image_id);
    return format_vote(
        sim_judge(f, fields->question, fields->answer, behavior_, req.seed, req.sample_index));
  }

 private:
  std::shared_ptr<const SimWorld> world_;
  JudgeBehavior behavior_;
};

// ---------------------------------------------------------------------------
// Sample world

struct Rgb {
  std::uint8_t r, g, b;
};

Rgb color_rgb(const std::string& c) {
  static const std::map<std::string, Rgb> table{
      {"red", {200, 40, 40}},    {"blue", {40, 60, 200}},   {"green", {40, 160, 60}},
      {"yellow", {230, 210, 50}}, {"white", {240, 240, 240}}, {"black", {20, 20, 20}},
      {"brown", {120, 80, 40}},  {"gray", {128, 128, 128}}, {"pink", {240, 150, 180}},
      {"purple", {130, 50, 160}}};
  return table.at(c);
}

template <typename T>
const T& choose(Rng& rng, const std::vector<T>& v) {
  return v[rng.index(v.size())];
}

SimFixture make_fixture(Rng& rng) {
  SimFixture f;
  const std::size_t scene = rng.index(kScenes.size());
  f.scene = kScenes[scene];
  f.event = kEvents[scene];

  std::vector<std::string> cats = kObjects;
  rng.shuffle(cats);
  cats.resize(6);
  for (std::size_t i = 0; i < cats.size(); ++i) {
    SimObject o;
    o.category = cats[i];
    o.color = choose(rng, kColors);
    if (i == 0) {
      o.count = 6 + static_cast<int>(rng.index(7));
    } else if (i == 3 && rng.uniform() < 0.5) {
      o.count = 6 + static_cast<int>(rng.index(5));
    } else {
      o.count = 1 + static_cast<int>(rng.index(5));
    }
    if (kAnimals.count(o.category) > 0) {
      o.state = choose(rng, kStates);
    } else {
      o.material = choose(rng, kMaterials);
    }
    f.objects.push_back(std::move(o));
  }

  std::vector<std::string> people = kPersons;
  rng.shuffle(people);
  for (int i = 0; i < 2; ++i) {
    SimObject p;
    p.category = people[static_cast<std::size_t>(i)];
    p.color = choose(rng, kColors);
    p.count = 1;
    p.state = choose(rng, kStates);
    f.objects.push_back(std::move(p));
  }

  if (rng.uniform() < 0.85) {
    std::vector<std::size_t> carriers;
    for (std::size_t i = 0; i < 6; ++i) {
      if (kAnimals.count(f.objects[i].category) == 0) carriers.push_back(i);
    }
    if (!carriers.empty()) {
      f.objects[carriers[rng.index(carriers.size())]].text = choose(rng, kTexts);
    }
  }

  const std::size_t n = f.objects.size();
  auto relate = [&](const char* rel, std::size_t a, std::size_t b) {
    f.objects[a].relations.push_back(std::string(rel) + ":" + f.objects[b].category);
  };
  auto distinct_pair = [&](std::size_t limit) {
    const std::size_t a = rng.index(limit);
    std::size_t b = rng.index(limit - 1);
    if (b >= a) ++b;
    return std::pair{a, b};
  };
  for (const char* rel : {"left_of", "closer_than", "larger_than", "part_of", "occludes"}) {
    const auto [a, b] = distinct_pair(n);
    relate(rel, a, b);
  }
  relate("holding", 6, rng.index(6));
  relate("talking_to", 7, 6);
  return f;
}

images::Image render_scene(const SimFixture& f, Rng& rng) {
  constexpr int kW = 64;
  constexpr int kH = 48;
  images::Image img;
  img.width = kW;
  img.height = kH;
  img.pixels.assign(static_cast<std::size_t>(kW * kH * 3), '\0');
  const auto bg = static_cast<std::uint8_t>(60 + 20 * (SeedBuilder(0).add(f.scene).seed() % 5));
  for (int i = 0; i < kW * kH; ++i) {
    const auto jitter = static_cast<int>(rng.index(16));
    for (int c = 0; c < 3; ++c) {
      img.pixels[static_cast<std::size_t>(i * 3 + c)] =
          static_cast<char>(static_cast<std::uint8_t>(bg + jitter + c * 10));
    }
  }
  for (const auto& o : f.objects) {
    const Rgb col = color_rgb(o.color);
    for (int k = 0; k < o.count; ++k) {
      const int x0 = static_cast<int>(rng.index(kW - 4));
      const int y0 = static_cast<int>(rng.index(kH - 4));
      for (int y = y0; y < y0 + 4; ++y) {
        for (int x = x0; x < x0 + 4; ++x) {
          const auto p = static_cast<std::size_t>((y * kW + x) * 3);
          img.pixels[p] = static_cast<char>(col.r);
          img.pixels[p + 1] = static_cast<char>(col.g);
          img.pixels[p + 2] = static_cast<char>(col.b);
        }
      }
    }
  }
  return img;
}

}  // namespace

// ---------------------------------------------------------------------------

std::optional<std::string> SimObject::related(std::string_view relation) const {
  for (const auto& r : relations) {
    const auto colon = r.find(':');
    if (colon != std::string::npos && std::string_view(r).substr(0, colon) == relation) {
      return r.substr(colon + 1);
    }
  }
  return std::nullopt;
}

const SimObject* SimFixture::find(std::string_view category) const {
  for (const auto& o : objects) {
    if (o.category == category) return &o;
  }
  return nullptr;
}

json to_json(const SimFixture& f) {
  json objs = json::array();
  for (const auto& o : f.objects) {
    json j{{"category", o.category}, {"color", o.color}, {"count", o.count}, {"relations", o.relations}};
    if (o.material) j["material"] = *o.material;
    if (o.state) j["state"] = *o.state;
    if (o.text) j["text"] = *o.text;
    objs.push_back(std::move(j));
  }
  return json{{"image_id", f.image_id}, {"scene", f.scene}, {"event", f.event}, {"objects", objs}};
}

SimFixture fixture_from_json(const json& j) {
  SimFixture f;
  f.image_id = j.at("image_id").get<std::string>();
  f.scene = j.value("scene", std::string());
  f.event = j.value("event", std::string());
  std::set<std::string> seen;
  for (const auto& oj : j.at("objects")) {
    SimObject o;
    o.category = to_lower(oj.at("category").get<std::string>());
    if (o.category.empty() || !std::all_of(o.category.begin(), o.category.end(), is_word_char)) {
      throw std::invalid_argument("fixture category must be one lowercase word: " + o.category);
    }
    if (!seen.insert(o.category).second) {
      throw std::invalid_argument("duplicate fixture category: " + o.category);
    }
    o.color = oj.at("color").get<std::string>();
    o.count = oj.at("count").get<int>();
    if (o.count < 0) throw std::invalid_argument("fixture count must be nonnegative");
    o.relations = oj.value("relations", std::vector<std::string>{});
    if (oj.contains("material")) o.material = oj["material"].get<std::string>();
    if (oj.contains("state")) o.state = oj["state"].get<std::string>();
    if (oj.contains("text")) o.text = oj["text"].get<std::string>();
    f.objects.push_back(std::move(o));
  }
  return f;
}

std::vector<SimFixture> load_fixtures(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open fixtures file " + path.string());
  std::vector<SimFixture> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(fixture_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_fixtures(const std::filesystem::path& path, const std::vector<SimFixture>& fixtures) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& f : fixtures) out << to_json(f).dump() << "\n";
}

const std::vector<std::string>& object_categories() { return kObjects; }
const std::vector<std::string>& person_categories() { return kPersons; }
const std::vector<std::string>& colors() { return kColors; }
const std::vector<std::string>& states() { return kStates; }
const std::vector<std::string>& scenes() { return kScenes; }
const std::vector<std::string>& materials() { return kMaterials; }

std::string to_string(QuestionKind k) {
  switch (k) {
    case QuestionKind::Presence: return "presence";
    case QuestionKind::NegPresence: return "neg_presence";
    case QuestionKind::Count: return "count";
    case QuestionKind::CountTotal: return "count_total";
    case QuestionKind::CountAdd: return "count_add";
    case QuestionKind::CountRemove: return "count_remove";
    case QuestionKind::ManyYn: return "many_yn";
    case QuestionKind::MoreYn: return "more_yn";
    case QuestionKind::Color: return "color";
    case QuestionKind::AttrYn: return "attr_yn";
    case QuestionKind::Material: return "material";
    case QuestionKind::State: return "state";
    case QuestionKind::Intent: return "intent";
    case QuestionKind::Scene: return "scene";
    case QuestionKind::SceneYn: return "scene_yn";
    case QuestionKind::Event: return "event";
    case QuestionKind::LeftYn: return "left_yn";
    case QuestionKind::Closer: return "closer";
    case QuestionKind::Larger: return "larger";
    case QuestionKind::PartOf: return "part_of";
    case QuestionKind::Occludes: return "occludes";
    case QuestionKind::Holding: return "holding";
    case QuestionKind::Talking: return "talking";
    case QuestionKind::Text: return "text";
    case QuestionKind::Unanswerable: return "unanswerable";
  }
  return "unknown";
}

bool ParsedQuestion::yes_no() const {
  switch (kind) {
    case QuestionKind::Presence:
    case QuestionKind::NegPresence:
    case QuestionKind::ManyYn:
    case QuestionKind::MoreYn:
    case QuestionKind::AttrYn:
    case QuestionKind::SceneYn:
    case QuestionKind::LeftYn:
      return true;
    default:
      return false;
  }
}

std::optional<ParsedQuestion> parse_question(std::string_view question) {
  const std::string s = strip_question(question);
  if (s.empty()) return std::nullopt;
  auto try_table = [&](const auto& table) -> std::optional<ParsedQuestion> {
    for (const auto& p : table) {
      ParsedQuestion q;
      q.kind = p.kind;
      q.frame = std::string(p.frame);
      if (match_pattern(s, p.text, q)) return q;
    }
    return std::nullopt;
  };
  if (auto q = try_table(kLatePatterns)) return q;
  return try_table(kPatterns);
}

std::string normalize_answer(std::string_view a) {
  std::string s = to_lower(trim(a));
  while (!s.empty() && (s.back() == '.' || s.back() == '!')) s.pop_back();
  s = trim(s);
  for (std::string_view article : {"the ", "a ", "an "}) {
    if (s.rfind(article, 0) == 0) {
      s = s.substr(article.size());
      break;
    }
  }
  return trim(s);
}

GroundTruth ground_truth(const SimFixture& f, std::string_view question) {
  const auto q = parse_question(question);
  if (!q) return unanswerable();
  return truth_of(f, *q);
}

std::optional<std::string> render_template(std::string_view tmpl, const SimFixture& f,
                                           std::uint64_t seed) {
  SlotFiller filler(f, seed);
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      if (close == std::string_view::npos) return std::nullopt;
      auto v = filler.get(std::string(tmpl.substr(i + 1, close - i - 1)));
      if (!v) return std::nullopt;
      out += *v;
      i = close + 1;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

std::string_view fallback_question() { return "What is happening just outside the frame?"; }

std::string sim_generate(const SimFixture& f, int d, int r, std::uint64_t seed,
                         const std::optional<std::string>& tmpl, bool with_exemplars) {
  taxonomy::require_context(d, r);
  std::string chosen;
  if (tmpl) {
    chosen = *tmpl;
  } else {
    const auto block = templates::templates_for(d, r);
    chosen = block[with_exemplars ? templates::kSignature : templates::kPlain];
  }
  auto q = render_template(chosen, f, SeedBuilder(seed).add("render").seed());
  if (!q) return std::string(fallback_question());
  return *q;
}

void TargetWeaknessProfile::validate() const {
  for (const auto& [field, v] : {std::pair{"yes_bias", yes_bias},
                                 std::pair{"count_error", count_error},
                                 std::pair{"conditional_arithmetic_fail", conditional_arithmetic_fail},
                                 std::pair{"subject_swap_sensitivity", subject_swap_sensitivity}}) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument(std::string("profile.") + field + " must be in [0, 1]");
    }
  }
  if (count_ceiling < 0) throw std::invalid_argument("profile.count_ceiling must be nonnegative");
}

json to_json(const TargetWeaknessProfile& p) {
  return json{{"name", p.name},
              {"yes_bias", p.yes_bias},
              {"count_ceiling", p.count_ceiling},
              {"count_error", p.count_error},
              {"conditional_arithmetic_fail", p.conditional_arithmetic_fail},
              {"subject_swap_sensitivity", p.subject_swap_sensitivity},
              {"rng_seed", p.rng_seed}};
}

TargetWeaknessProfile profile_from_json(const json& j) {
  static const std::set<std::string> known{"name",
                                           "yes_bias",
                                           "count_ceiling",
                                           "count_error",
                                           "conditional_arithmetic_fail",
                                           "subject_swap_sensitivity",
                                           "rng_seed"};
  for (const auto& [k, v] : j.items()) {
    if (known.count(k) == 0) throw std::invalid_argument("profile: unknown field " + k);
  }
  TargetWeaknessProfile p;
  p.name = j.value("name", p.name);
  p.yes_bias = j.value("yes_bias", p.yes_bias);
  p.count_ceiling = j.value("count_ceiling", p.count_ceiling);
  p.count_error = j.value("count_error", p.count_error);
  p.conditional_arithmetic_fail = j.value("conditional_arithmetic_fail", p.conditional_arithmetic_fail);
  p.subject_swap_sensitivity = j.value("subject_swap_sensitivity", p.subject_swap_sensitivity);
  p.rng_seed = j.value("rng_seed", p.rng_seed);
  p.validate();
  return p;
}

TargetWeaknessProfile builtin_profile(const std::string& name) {
  TargetWeaknessProfile p;
  p.name = name;
  if (name == "default") return p;
  if (name == "heldout-a") {
    p.yes_bias = 0.4;
    p.count_ceiling = 8;
    p.conditional_arithmetic_fail = 0.5;
    p.subject_swap_sensitivity = 0.2;
    p.rng_seed = 101;
    return p;
  }
  if (name == "heldout-b") {
    p.yes_bias = 0.9;
    p.count_ceiling = 3;
    p.conditional_arithmetic_fail = 0.3;
    p.subject_swap_sensitivity = 0.7;
    p.rng_seed = 202;
    return p;
  }
  throw std::invalid_argument("unknown target profile: " + name);
}

int perceived_count(int n, std::string_view category, const TargetWeaknessProfile& p,
                    std::uint64_t seed) {
  if (n <= p.count_ceiling) return n;
  Rng rng(SeedBuilder(seed).add(p.rng_seed).add("count").add(category).seed());
  if (rng.uniform() >= p.count_error) return n;
  static constexpr std::array<int, 4> kOffsets{-2, -1, 1, 2};
  const int wrong = n + kOffsets[rng.index(kOffsets.size())];
  return wrong < 0 ? n + 1 : wrong;
}

std::string sim_answer(const SimFixture& f, std::string_view question,
                       const TargetWeaknessProfile& profile, std::uint64_t seed) {
  const auto q = parse_question(question);
  if (!q) return "I cannot tell from the image.";
  const GroundTruth gt = truth_of(f, *q);
  auto draw = [&](std::string_view tag) {
    return Rng(SeedBuilder(seed).add(profile.rng_seed).add(tag).seed()).uniform();
  };
  if (q->yes_no()) {
    if (draw("yes") < profile.yes_bias) return "yes";
    return gt.answerable ? gt.answer : "no";
  }
  switch (q->kind) {
    case QuestionKind::Count:
      return std::to_string(perceived_count(count_of(f, q->words[0]), q->words[0], profile, seed));
    case QuestionKind::CountTotal:
      return std::to_string(perceived_count(count_of(f, q->words[0]), q->words[0], profile, seed) +
                            perceived_count(count_of(f, q->words[1]), q->words[1], profile, seed));
    case QuestionKind::CountAdd:
    case QuestionKind::CountRemove: {
      const int seen = perceived_count(count_of(f, q->words[0]), q->words[0], profile, seed);
      if (draw("arith") < profile.conditional_arithmetic_fail) return std::to_string(seen);
      const int v = q->kind == QuestionKind::CountAdd ? seen + q->number : seen - q->number;
      return std::to_string(std::max(v, 0));
    }
    case QuestionKind::Closer:
      if (gt.answerable && q->frame != "you" && draw("swap") < profile.subject_swap_sensitivity) {
        return gt.answer == q->words[0] ? q->words[1] : q->words[0];
      }
      break;
    default:
      break;
  }
  if (!gt.answerable) return "I cannot tell from the image.";
  return gt.answer;
}

std::string to_string(JudgeBehavior b) {
  switch (b) {
    case JudgeBehavior::Oracle: return "oracle";
    case JudgeBehavior::Split32: return "split_3_2";
    case JudgeBehavior::LowConfidence: return "low_confidence";
    case JudgeBehavior::AlwaysConfidentCorrect: return "always-confident-correct";
    case JudgeBehavior::HardDown: return "hard-down";
  }
  return "unknown";
}

JudgeBehavior judge_behavior_from_string(const std::string& s) {
  if (s == "oracle") return JudgeBehavior::Oracle;
  if (s == "split_3_2" || s == "split-3-2") return JudgeBehavior::Split32;
  if (s == "low_confidence" || s == "low-confidence") return JudgeBehavior::LowConfidence;
  if (s == "always-confident-correct" || s == "always_confident_correct") {
    return JudgeBehavior::AlwaysConfidentCorrect;
  }
  if (s == "hard-down" || s == "hard_down") return JudgeBehavior::HardDown;
  throw std::invalid_argument("unknown judge behavior: " + s);
}

SimVote sim_judge(const SimFixture& f, std::string_view question, std::string_view answer,
                  JudgeBehavior behavior, std::uint64_t, int sample_index) {
  if (behavior == JudgeBehavior::HardDown) {
    throw gateway::GatewayError(gateway::ErrorKind::EndpointUnreachable, "judge is down");
  }
  if (behavior == JudgeBehavior::AlwaysConfidentCorrect) return SimVote{0, 0.99};
  const GroundTruth gt = ground_truth(f, question);
  int label = -1;
  if (gt.answerable) label = normalize_answer(answer) == gt.answer ? 0 : 1;
  switch (behavior) {
    case JudgeBehavior::Oracle: return SimVote{label, 0.99};
    case JudgeBehavior::LowConfidence: return SimVote{label, 0.5};
    case JudgeBehavior::Split32:
      if (sample_index % 5 < 3) return SimVote{label, 0.95};
      return SimVote{label == 1 ? 0 : 1, 0.95};
    default: break;
  }
  return SimVote{label, 0.99};
}

std::string format_vote(const SimVote& v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "LABEL=%s CONFIDENCE=%.2f", judge::label_name(v.label).c_str(),
                v.confidence);
  return buf;
}

SimWorld::SimWorld(std::vector<SimFixture> fixtures) {
  for (auto& f : fixtures) {
    const std::string id = f.image_id;
    if (!fixtures_.emplace(id, std::move(f)).second) {
      throw std::invalid_argument("duplicate fixture for image " + id);
    }
  }
}

const SimFixture* SimWorld::find(const std::string& image_id) const {
  if (auto it = fixtures_.find(image_id); it != fixtures_.end()) return &it->second;
  if (resolver_) {
    const std::string root = resolver_(image_id);
    if (auto it = fixtures_.find(root); it != fixtures_.end()) return &it->second;
  }
  return nullptr;
}

const SimFixture& SimWorld::require(const std::string& image_id) const {
  const SimFixture* f = find(image_id);
  if (f == nullptr) {
    throw gateway::GatewayError(gateway::ErrorKind::ProviderRejection,
                                "no fixture for image " + image_id);
  }
  return *f;
}

std::shared_ptr<gateway::SimulatedModel> make_generator(std::shared_ptr<const SimWorld> world) {
  return std::make_shared<GeneratorModel>(std::move(world));
}

std::shared_ptr<gateway::SimulatedModel> make_target(std::shared_ptr<const SimWorld> world,
                                                     TargetWeaknessProfile profile) {
  profile.validate();
  return std::make_shared<TargetModel>(std::move(world), std::move(profile));
}

std::shared_ptr<gateway::SimulatedModel> make_judge(std::shared_ptr<const SimWorld> world,
                                                    JudgeBehavior behavior) {
  return std::make_shared<JudgeModel>(std::move(world), behavior);
}

void register_simulators(gateway::Gateway& gw, std::shared_ptr<const SimWorld> world) {
  gw.register_simulator("sim-generator", make_generator(world));
  for (const char* p : {"default", "heldout-a", "heldout-b"}) {
    gw.register_simulator(p, make_target(world, builtin_profile(p)));
  }
  for (auto b : {JudgeBehavior::Oracle, JudgeBehavior::Split32, JudgeBehavior::LowConfidence,
                 JudgeBehavior::AlwaysConfidentCorrect, JudgeBehavior::HardDown}) {
    gw.register_simulator(to_string(b), make_judge(world, b));
  }
}

std::optional<GeneratorPromptFields> parse_generator_prompt(std::string_view prompt) {
  GeneratorPromptFields out;
  bool have_d = false;
  bool have_r = false;
  std::size_t pos = 0;
  while (pos <= prompt.size()) {
    auto end = prompt.find('\n', pos);
    if (end == std::string_view::npos) end = prompt.size();
    const std::string_view line = prompt.substr(pos, end - pos);
    auto bracket_int = [&](std::string_view prefix) -> std::optional<int> {
      if (line.rfind(prefix, 0) != 0) return std::nullopt;
      const auto close = line.find(']', prefix.size());
      if (close == std::string_view::npos) return std::nullopt;
      try {
        return std::stoi(std::string(line.substr(prefix.size(), close - prefix.size())));
      } catch (const std::exception&) {
        return std::nullopt;
      }
    };
    if (auto d = bracket_int("Subdimension [")) {
      out.d = *d;
      have_d = true;
    } else if (auto r = bracket_int("Role [")) {
      out.r = *r;
      have_r = true;
    } else if (line.rfind("Template: ", 0) == 0) {
      out.template_text = std::string(line.substr(10));
    } else if (line.rfind("Examples of this role:", 0) == 0) {
      out.exemplars = true;
    }
    pos = end + 1;
  }
  if (!have_d || !have_r || !taxonomy::valid_subdimension(out.d) || !taxonomy::valid_role(out.r)) {
    return std::nullopt;
  }
  return out;
}

std::optional<JudgePromptFields> parse_judge_prompt(std::string_view prompt) {
  auto between = [&](std::string_view head) -> std::optional<std::string> {
    const std::string open = std::string(head) + "\n" + std::string(judge::kBlockOpen) + "\n";
    const auto a = prompt.find(open);
    if (a == std::string_view::npos) return std::nullopt;
    const auto start = a + open.size();
    const std::string close = "\n" + std::string(judge::kBlockClose);
    const auto b = prompt.find(close, start);
    if (b == std::string_view::npos) return std::nullopt;
    return std::string(prompt.substr(start, b - start));
  };
  auto q = between(judge::kQuestionHeading);
  auto a = between(judge::kAnswerHeading);
  if (!q || !a) return std::nullopt;
  return JudgePromptFields{*q, *a};
}

std::vector<SampleScene> make_sample_world(int n, std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("sample world needs at least one scene");
  std::vector<SampleScene> out;
  std::set<std::string> ids;
  Rng rng(SeedBuilder(seed).add("sample-world").seed());
  while (static_cast<int>(out.size()) < n) {
    SampleScene s;
    s.fixture = make_fixture(rng);
    s.image = render_scene(s.fixture, rng);
    s.fixture.image_id = images::image_id(s.image);
    if (!ids.insert(s.fixture.image_id).second) continue;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace vlfuzz::sim
