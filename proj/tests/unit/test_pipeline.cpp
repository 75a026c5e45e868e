#include "doctest.h"
#include "temp_dir.hpp"
#include "vlfuzz/pipeline.hpp"
#include "vlfuzz/sample.hpp"

using namespace vlfuzz;
using nlohmann::json;
using vlfuzz::testing::TempDir;

namespace {

// Small all-simulated workspace; judge profile and held-out panel are adjustable.
config::Config small_config(const TempDir& dir, const std::string& judge_profile = "oracle",
                            bool heldout = false) {
  sample::write_workspace(dir.path(), 8, 31);
  json doc = sample::sample_config();
  doc["campaign"]["images_per_iteration"] = 1;
  doc["campaign"]["n_per_context"] = 2;
  doc["sft"]["steps"] = 5;
  doc["dpo"]["steps"] = 5;
  doc["iterations"] = 1;
  doc["endpoints"][4]["profile"] = judge_profile;
  if (!heldout) doc["models"]["heldout_targets"] = json::array();
  return config::parse_config(doc, dir.path());
}

int count_events(store::RunStore& st, const std::string& name) {
  int n = 0;
  for (const auto& e : st.read_all("events")) n += e.value("event", "") == name;
  return n;
}

pipeline::Options no_human() {
  pipeline::Options o;
  o.no_human = true;
  return o;
}

}  // namespace

TEST_CASE("two iterations with an oracle judge") {
  TempDir dir("pipe");
  pipeline::Runtime rt(small_config(dir));
  CHECK(pipeline::oracle_judge(rt.config()));
  const auto res = pipeline::iterate(rt, 1, no_human());
  REQUIRE(res.iterations.size() == 2);
  CHECK(res.curve.points.size() == 2);
  for (const auto& it : res.iterations) {
    CHECK(it.candidate_sets == 24);
    CHECK(it.deferred == 0);
    CHECK(it.train.n_probes == 48);
    CHECK(it.policy_in != it.policy_out);
  }
  CHECK(res.iterations[1].policy_in == res.iterations[0].policy_out);
  CHECK(pipeline::next_iteration(rt) == 2);
  CHECK(rt.store().verify().empty());
  CHECK(pipeline::replay_metrics(rt.store()).empty());
  CHECK(pipeline::load_policy(rt.store(), res.iterations[1].policy_out).has_value());
  CHECK(pipeline::load_pairs(rt.store()).size() == static_cast<std::size_t>(res.iterations[0].pairs + res.iterations[1].pairs));
}

TEST_CASE("finished iterations are read back, not rerun") {
  TempDir dir("resume");
  std::string digest;
  pipeline::IterationSummary first;
  {
    pipeline::Runtime rt(small_config(dir));
    first = pipeline::run_iteration(rt, 0, no_human());
    digest = rt.store().content_digest();
  }
  pipeline::Runtime again(small_config(dir));
  CHECK(pipeline::next_iteration(again) == 1);
  const auto back = pipeline::run_iteration(again, 0, no_human());
  CHECK(pipeline::to_json(back) == pipeline::to_json(first));
  CHECK(again.store().content_digest() == digest);
  CHECK_THROWS_AS(pipeline::run_iteration(again, 3, no_human()), std::invalid_argument);

  auto reopened = pipeline::Runtime::open(again.store().dir());
  CHECK(reopened->config().to_json() == again.config().to_json());
}

TEST_CASE("no-human mode needs an oracle judge") {
  TempDir dir("nohuman");
  pipeline::Runtime rt(small_config(dir, "split_3_2"));
  CHECK_FALSE(pipeline::oracle_judge(rt.config()));
  CHECK_THROWS_AS(pipeline::run_iteration(rt, 0, no_human()), std::invalid_argument);
}

TEST_CASE("deferred items block the iteration") {
  TempDir dir("pending");
  pipeline::Runtime rt(small_config(dir, "split_3_2"));
  try {
    pipeline::run_iteration(rt, 0, pipeline::Options{});
    FAIL("expected pending labels");
  } catch (const pipeline::PendingLabelsError& e) {
    CHECK(e.pending() == 48);
  }
  CHECK(rt.queue().stats().pending == 48);
  CHECK(rt.store().count("deferred") == 48);
  CHECK(rt.store().count("verdicts") == 0);
  CHECK(pipeline::next_iteration(rt) == 0);

  // a fresh runtime picks the undecided items up again
  pipeline::Runtime again(small_config(dir, "split_3_2"));
  CHECK(again.queue().stats().pending == 0);
  CHECK(again.requeue_undecided() == 48);
  CHECK(again.queue().stats().pending == 48);
}

TEST_CASE("human labels unblock the iteration") {
  TempDir dir("human");
  pipeline::Runtime rt(small_config(dir, "low_confidence"));
  int waits = 0;
  auto annotate = [&](judge::AnnotationQueue& q) {
    ++waits;
    while (auto item = q.next_for("alice")) q.submit("alice", item->item_id, item->answer == "yes" ? 1 : 0);
  };
  const auto s = pipeline::run_iteration(rt, 0, pipeline::Options{}, annotate);
  CHECK(waits == 1);
  CHECK(s.deferred == 48);
  CHECK(s.train.n_probes == 48);
  CHECK(count_events(rt.store(), "awaiting_human") == 1);
  int human = 0;
  for (const auto& v : rt.store().read_all("verdicts")) human += v.value("source", "") == "human";
  CHECK(human == 48);
  CHECK(rt.store().verify().empty());
  CHECK(pipeline::replay_metrics(rt.store()).empty());
}

TEST_CASE("allow-partial scores what is labelled") {
  TempDir dir("partial");
  pipeline::Runtime rt(small_config(dir, "split_3_2"));
  pipeline::Options opt;
  opt.allow_partial = true;
  const auto s = pipeline::run_iteration(rt, 0, opt);
  CHECK(s.deferred == 48);
  CHECK(s.train.n_pending == 48);
  CHECK_FALSE(s.train.fr.has_value());
  CHECK(s.pairs == 0);
  CHECK(count_events(rt.store(), "partial_labels") >= 1);
  CHECK(pipeline::next_iteration(rt) == 1);
}

TEST_CASE("held-out panel and standalone evaluation") {
  TempDir dir("heldout");
  pipeline::Runtime rt(small_config(dir, "oracle", true));
  const auto s = pipeline::run_iteration(rt, 0, no_human());
  // the training target is measured next to the held-out panel
  REQUIRE(s.eval.size() == 3);
  CHECK(s.eval[0].target == "target");
  for (const auto& r : s.eval) {
    CHECK(r.scope == "eval");
    CHECK(r.n_probes == 24 * 2);  // validation split has two images
  }

  const auto reports = pipeline::evaluate(rt, s.policy_out, {"heldout-a"}, "holdout", no_human());
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].n_probes == 24);  // one holdout image
  CHECK(pipeline::evaluate(rt, "sim-generator", {"heldout-b"}, "holdout", no_human()).size() == 1);
  CHECK_THROWS(pipeline::evaluate(rt, "nobody", {"heldout-b"}, "holdout", no_human()));
  CHECK(rt.store().verify().empty());
}
