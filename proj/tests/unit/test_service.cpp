#include "doctest.h"
#include "httplib.h"
#include "temp_dir.hpp"
#include "vlfuzz/pipeline.hpp"
#include "vlfuzz/sample.hpp"
#include "vlfuzz/service.hpp"

using namespace vlfuzz;
using nlohmann::json;
using vlfuzz::testing::TempDir;

namespace {

judge::DeferredItem item(const std::string& id, const std::string& probe) {
  judge::DeferredItem d;
  d.item_id = id;
  d.probe_id = probe;
  d.question = "How many dogs?";
  d.answer = "3";
  d.target = "target";
  d.image_id = "img";
  d.image_base64 = "AAAA";
  return d;
}

service::Reply get(service::Service& s, const std::string& path, std::map<std::string, std::string> q = {}) {
  return s.handle("GET", path, q, "");
}

service::Reply post_label(service::Service& s, const json& body) {
  return s.handle("POST", "/api/labels", {}, body.dump());
}

}  // namespace

TEST_CASE("queue endpoints through handle()") {
  TempDir dir("svc");
  judge::AnnotationQueue q(std::chrono::seconds(900));
  q.enqueue(item("p1:target", "p1"));
  q.enqueue(item("p2:target", "p2"));
  service::Service svc(dir.path(), &q, "run-x");

  CHECK(get(svc, "/api/queue/next").status == 400);
  auto r = get(svc, "/api/queue/next", {{"annotator", "ann"}});
  REQUIRE(r.status == 200);
  auto j = json::parse(r.body);
  CHECK(j["item_id"] == "p1:target");
  CHECK(j["image_base64"] == "AAAA");
  CHECK(j["run_id"] == "run-x");
  CHECK(j["rubric"].get<std::string>() == judge::rubric_text());

  CHECK(post_label(svc, {{"probe_id", "p1"}, {"label", 1}, {"annotator", "bob"}}).status == 409);
  CHECK(post_label(svc, {{"probe_id", "p1"}, {"label", 5}, {"annotator", "ann"}}).status == 422);
  CHECK(post_label(svc, {{"probe_id", "p1"}, {"label", "1"}, {"annotator", "ann"}}).status == 422);
  CHECK(post_label(svc, {{"probe_id", "nope"}, {"label", 1}, {"annotator", "ann"}}).status == 404);
  CHECK(post_label(svc, {{"probe_id", "p1"}, {"label", 1}}).status == 400);
  CHECK(post_label(svc, {{"label", 1}, {"annotator", "ann"}}).status == 400);
  CHECK(svc.handle("POST", "/api/labels", {}, "not json").status == 400);
  CHECK(svc.handle("POST", "/api/labels", {}, "[1]").status == 400);

  r = post_label(svc, {{"probe_id", "p1"}, {"label", 1}, {"annotator", "ann"}});
  REQUIRE(r.status == 200);
  CHECK(json::parse(r.body)["source"] == "human");
  r = post_label(svc, {{"item_id", "p1:target"}, {"label", 0}, {"annotator", "ann"}});
  CHECK(r.status == 409);
  CHECK(json::parse(r.body)["error"] == "already_decided");

  j = json::parse(get(svc, "/api/queue/stats").body);
  CHECK(j["decided"] == 1);
  CHECK(j["pending"] == 1);
  CHECK(j["total"] == 2);

  CHECK(get(svc, "/api/queue/next", {{"annotator", "ann"}}).status == 200);
  CHECK(post_label(svc, {{"probe_id", "p2"}, {"label", -1}, {"annotator", "ann"}}).status == 200);
  r = get(svc, "/api/queue/next", {{"annotator", "ann"}});
  CHECK(r.status == 204);
  CHECK(r.body.empty());

  CHECK(get(svc, "/api/rubric").status == 200);
  CHECK(get(svc, "/api/nothing").status == 404);
  CHECK(svc.handle("DELETE", "/api/labels", {}, "").status == 404);
}

TEST_CASE("introspection without a queue") {
  TempDir dir("svc-noq");
  service::Service svc(dir.path(), nullptr);
  CHECK(get(svc, "/api/queue/next", {{"annotator", "a"}}).status == 404);
  CHECK(get(svc, "/api/queue/stats").status == 404);
  const auto r = get(svc, "/api/runs");
  CHECK(r.status == 200);
  CHECK(json::parse(r.body)["runs"].empty());
  CHECK(get(svc, "/api/runs/run-missing/metrics").status == 404);
  CHECK(get(svc, "/api/runs/../etc/metrics").status == 404);
}

TEST_CASE("runs and metrics of a finished iteration") {
  TempDir dir("svc-run");
  sample::write_workspace(dir.path(), 8, 31);
  json doc = sample::sample_config();
  doc["campaign"]["images_per_iteration"] = 1;
  doc["campaign"]["n_per_context"] = 2;
  doc["sft"]["steps"] = 5;
  doc["dpo"]["steps"] = 5;
  doc["models"]["heldout_targets"] = json::array();
  pipeline::Runtime rt(config::parse_config(doc, dir.path()));
  pipeline::Options opt;
  opt.no_human = true;
  pipeline::run_iteration(rt, 0, opt);

  service::Service svc(dir / "runs", nullptr);
  auto runs = json::parse(get(svc, "/api/runs").body)["runs"];
  REQUIRE(runs.size() == 1);
  CHECK(runs[0]["run_id"] == rt.store().run_id());
  CHECK(runs[0]["iterations_done"] == 1);
  const auto m = get(svc, "/api/runs/" + rt.store().run_id() + "/metrics");
  REQUIRE(m.status == 200);
  const auto body = json::parse(m.body);
  CHECK(body["metrics"].size() == rt.store().count("metrics"));
  CHECK(body["curve"]["points"].size() == 1);
}

TEST_CASE("real sockets") {
  TempDir dir("svc-http");
  judge::AnnotationQueue q(std::chrono::seconds(900));
  q.enqueue(item("p1:target", "p1"));
  service::Service svc(dir.path(), &q, "run-y");
  const int port = svc.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  svc.start();

  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Get("/api/queue/next");
  REQUIRE(res);
  CHECK(res->status == 400);
  res = cli.Get("/api/queue/next?annotator=ann");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Content-Type") == "application/json");
  CHECK(json::parse(res->body)["probe_id"] == "p1");

  res = cli.Post("/api/labels", json{{"probe_id", "p1"}, {"label", 7}, {"annotator", "ann"}}.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 422);
  res = cli.Post("/api/labels", json{{"probe_id", "p1"}, {"label", 1}, {"annotator", "zed"}}.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 409);
  res = cli.Post("/api/labels", json{{"probe_id", "p1"}, {"label", 1}, {"annotator", "ann"}}.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  res = cli.Post("/api/labels", json{{"probe_id", "p1"}, {"label", 1}, {"annotator", "ann"}}.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 409);
  res = cli.Get("/api/queue/next?annotator=ann");
  REQUIRE(res);
  CHECK(res->status == 204);
  res = cli.Get("/api/unknown");
  REQUIRE(res);
  CHECK(res->status == 404);
  svc.stop();
  CHECK(q.verdict_for("p1:target")->label == 1);
}
