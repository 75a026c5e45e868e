#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "temp_dir.hpp"
#include "vlfuzz/preference.hpp"
#include "vlfuzz/template_bank.hpp"

using namespace vlfuzz::preference;
namespace oracle = vlfuzz::oracle;

namespace {

std::vector<int> scores_of(const std::vector<ScoredCandidate>& s) {
  std::vector<int> out;
  for (const auto& c : s) out.push_back(c.score);
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("score is the label, order preserved") {
  const auto set = oracle::candidate_set({1, 0, -1, 0}, "img", 3);
  CHECK(scores_of(score(set)) == std::vector<int>{1, 0, -1, 0});
  CHECK(scores_of(score(oracle::candidate_set({0, 0, 0}, "img", 3))) == std::vector<int>{0, 0, 0});
  CHECK(score(oracle::candidate_set({1}, "img", 3)).size() == 1);

  auto missing = set;
  missing[2].label.reset();
  try {
    score(missing);
    FAIL("expected MissingVerdictError");
  } catch (const MissingVerdictError& e) {
    CHECK(std::string(e.what()).find(missing[2].probe_id) != std::string::npos);
  }
}

TEST_CASE("pair selection examples") {
  const auto unique = vlfuzz::preference::make_pair(score(oracle::candidate_set({1, 0, -1}, "img", 1)), 5);
  REQUIRE(unique);
  CHECK(unique->winner.probe_id == "img-d1-c0");
  CHECK(unique->loser.probe_id == "img-d1-c2");
  CHECK_FALSE(vlfuzz::preference::make_pair(score(oracle::candidate_set({0, 0, 0}, "img", 1)), 5));

  // ties: the winner is one of the argmax set and reproducible per seed
  const auto tied = score(oracle::candidate_set({1, 1, -1}, "img", 1));
  std::set<std::string> winners;
  for (std::uint64_t s = 0; s < 64; ++s) {
    const auto p = vlfuzz::preference::make_pair(tied, s);
    REQUIRE(p);
    CHECK((p->winner.probe_id == "img-d1-c0" || p->winner.probe_id == "img-d1-c1"));
    CHECK(p->loser.probe_id == "img-d1-c2");
    CHECK(vlfuzz::preference::make_pair(tied, s)->winner.probe_id == p->winner.probe_id);
    winners.insert(p->winner.probe_id);
  }
  CHECK(winners.size() == 2);

  CHECK_THROWS_AS(vlfuzz::preference::make_pair(score(oracle::candidate_set({1}, "img", 1)), 1), std::invalid_argument);
  auto mixed = oracle::candidate_set({1, 0}, "img", 1);
  mixed[1].d = 2;
  CHECK_THROWS_AS(vlfuzz::preference::make_pair(score(mixed), 1), std::invalid_argument);
}

TEST_CASE("tie breaking is uniform") {
  const std::vector<int> scores{1, 0, 1, 1, -1, -1};
  std::map<std::size_t, int> w, l;
  const int n = 30000;
  for (int s = 0; s < n; ++s) {
    const auto c = choose_pair(scores, static_cast<std::uint64_t>(s));
    REQUIRE(c);
    ++w[c->winner];
    ++l[c->loser];
  }
  CHECK(w.size() == 3);
  for (auto i : {0, 2, 3}) CHECK(std::abs(w[static_cast<std::size_t>(i)] / double(n) - 1.0 / 3) < 0.015);
  for (auto i : {4, 5}) CHECK(std::abs(l[static_cast<std::size_t>(i)] / double(n) - 0.5) < 0.015);
}

TEST_CASE("exhaustive contract for sets of size 2 to 4") {
  int cases = 0;
  for (int n = 2; n <= 4; ++n) {
    int total = 1;
    for (int i = 0; i < n; ++i) total *= 3;
    for (int code = 0; code < total; ++code) {
      std::vector<int> labels;
      for (int i = 0, c = code; i < n; ++i, c /= 3) labels.push_back(c % 3 - 1);
      const auto set = oracle::candidate_set(labels, "img" + std::to_string(n), 1 + code % 24);
      for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const auto v = oracle::pair_violation(set, vlfuzz::preference::make_pair(score(set), seed));
        CHECK_MESSAGE(!v, (v ? *v : ""));
        ++cases;
      }
    }
  }
  CHECK(cases == (9 + 27 + 81) * 8);
}

TEST_CASE("selection depends on the score order only") {
  vlfuzz::Rng rng(13);
  for (int t = 0; t < 2000; ++t) {
    std::vector<int> s(2 + rng.index(6));
    for (auto& v : s) v = static_cast<int>(rng.index(3)) - 1;
    std::vector<int> transformed;
    for (int v : s) transformed.push_back(v * v * v * 5 + 17);  // strictly increasing
    const auto a = choose_pair(s, static_cast<std::uint64_t>(t));
    const auto b = choose_pair(transformed, static_cast<std::uint64_t>(t));
    REQUIRE(a.has_value() == b.has_value());
    if (a) {
      CHECK(a->winner == b->winner);
      CHECK(a->loser == b->loser);
    }
  }
}

TEST_CASE("pair JSON round trip") {
  const auto p = vlfuzz::preference::make_pair(score(oracle::candidate_set({-1, 1, 0}, "img", 7)), 3, 2);
  REQUIRE(p);
  const auto back = pair_from_json(nlohmann::json::parse(to_json(*p).dump()));
  CHECK(to_json(back) == to_json(*p));
  CHECK(back.iteration == 2);
}

TEST_CASE("sft batches") {
  const std::vector<std::string> seeds{"s1", "s2"};
  std::vector<std::string> larger;
  for (int i = 0; i < 10; ++i) larger.push_back("L" + std::to_string(i));
  const ExemplarSource src = [](const std::string& img, int d, int r, const std::string& b) {
    return img + "/" + std::to_string(d) + "/" + std::to_string(r) + "/" + b;
  };
  const auto out = build_sft_batches(seeds, larger, src);
  CHECK(out.batch_a.size() == 384);
  CHECK(out.batch_b.size() == 240);
  std::map<std::pair<int, int>, int> seen;
  for (const auto& e : out.batch_a) ++seen[{e.d, e.r}];
  CHECK(seen.size() == 192);
  for (const auto& [k, n] : seen) CHECK(n == 2);
  for (const auto& e : out.batch_b) {
    CHECK(e.r == vlfuzz::templates::preferred_role(e.d));
    CHECK(e.batch == "B");
  }
  CHECK(to_json(out.batch_a[0])["target_question"] == "s1/1/1/A");

  CHECK_THROWS_AS(build_sft_batches({}, larger, src), std::invalid_argument);
  const ExemplarSource blank = [](const std::string&, int, int, const std::string&) { return std::string("  "); };
  CHECK_THROWS_AS(build_sft_batches(seeds, larger, blank), std::invalid_argument);
}

TEST_CASE("dpo export is one record per pair and byte-stable") {
  vlfuzz::testing::TempDir dir("pref");
  std::vector<PreferencePair> pairs;
  for (int i = 0; i < 3; ++i) {
    pairs.push_back(*vlfuzz::preference::make_pair(score(oracle::candidate_set({1, 0, -1}, "img" + std::to_string(i), 2)), 9, 1));
  }
  CHECK(export_dpo_dataset(pairs, dir / "a.jsonl") == 3);
  CHECK(export_dpo_dataset(pairs, dir / "b.jsonl") == 3);
  const auto a = slurp(dir / "a.jsonl");
  CHECK(a == slurp(dir / "b.jsonl"));
  std::istringstream in(a);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"image_id", "d", "prompt_hash", "chosen", "rejected", "scores", "iteration"}) {
      CHECK(j.contains(k));
    }
    CHECK(j["scores"]["chosen"] == 1);
    CHECK(j["scores"]["rejected"] == -1);
    ++n;
  }
  CHECK(n == 3);
  CHECK_THROWS_AS(export_dpo_dataset(std::vector<PreferencePair>{}, dir / "c.jsonl"), std::invalid_argument);
  CHECK_THROWS(export_dpo_dataset(pairs, dir / "missing" / "x.jsonl"));
}
