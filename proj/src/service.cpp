#include "vlfuzz/service.hpp"

#include <regex>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "vlfuzz/metrics.hpp"
#include "vlfuzz/pipeline.hpp"
#include "vlfuzz/store.hpp"

namespace vlfuzz::service {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

Reply json_reply(int status, const json& body) { return {status, body.dump()}; }

Reply error_reply(int status, const std::string& kind, const std::string& message) {
  return json_reply(status, {{"error", kind}, {"message", message}});
}

int status_for(judge::QueueErrorKind k) {
  switch (k) {
    case judge::QueueErrorKind::UnknownItem:
      return 404;
    case judge::QueueErrorKind::AlreadyDecided:
      return 409;
    case judge::QueueErrorKind::LeaseConflict:
      return 409;
    case judge::QueueErrorKind::BadLabel:
      return 422;
    case judge::QueueErrorKind::Ambiguous:
      return 400;
  }
  return 500;
}

std::string kind_name(judge::QueueErrorKind k) {
  switch (k) {
    case judge::QueueErrorKind::UnknownItem:
      return "unknown_item";
    case judge::QueueErrorKind::AlreadyDecided:
      return "already_decided";
    case judge::QueueErrorKind::LeaseConflict:
      return "lease_conflict";
    case judge::QueueErrorKind::BadLabel:
      return "bad_label";
    case judge::QueueErrorKind::Ambiguous:
      return "ambiguous";
  }
  return "error";
}

const std::regex kRunMetrics(R"(^/api/runs/([A-Za-z0-9._-]+)/metrics$)");

}  // namespace

struct Service::Impl {
  fs::path runs_dir;
  judge::AnnotationQueue* queue = nullptr;
  std::string active_run;
  httplib::Server server;
  std::thread thread;

  Reply next(const std::map<std::string, std::string>& query) {
    if (queue == nullptr) return error_reply(404, "no_queue", "this service has no annotation queue");
    const auto it = query.find("annotator");
    if (it == query.end() || it->second.empty()) {
      return error_reply(400, "bad_request", "annotator query parameter is required");
    }
    const auto item = queue->next_for(it->second);
    if (!item) return {204, ""};
    json j = judge::to_json(*item, true);
    j["rubric"] = std::string(judge::rubric_text());
    j["run_id"] = active_run;
    return json_reply(200, j);
  }

  Reply label(const std::string& body) {
    if (queue == nullptr) return error_reply(404, "no_queue", "this service has no annotation queue");
    json j;
    try {
      j = json::parse(body);
    } catch (const json::parse_error&) {
      return error_reply(400, "bad_request", "body must be a JSON object");
    }
    if (!j.is_object()) return error_reply(400, "bad_request", "body must be a JSON object");
    if (!j.contains("annotator") || !j["annotator"].is_string() || j["annotator"].get<std::string>().empty()) {
      return error_reply(400, "bad_request", "annotator is required");
    }
    std::string key;
    for (const char* k : {"item_id", "probe_id"}) {
      if (j.contains(k) && j[k].is_string()) {
        key = j[k].get<std::string>();
        break;
      }
    }
    if (key.empty()) return error_reply(400, "bad_request", "probe_id or item_id is required");
    if (!j.contains("label") || !j["label"].is_number_integer()) {
      return error_reply(422, "bad_label", "label must be one of -1, 0, 1");
    }
    const auto label = j["label"].get<std::int64_t>();
    if (label < -1 || label > 1) return error_reply(422, "bad_label", "label must be one of -1, 0, 1");
    try {
      const auto v = queue->submit(j["annotator"].get<std::string>(), key, static_cast<int>(label));
      return json_reply(200, judge::to_json(v));
    } catch (const judge::QueueError& e) {
      return error_reply(status_for(e.kind()), kind_name(e.kind()), e.what());
    }
  }

  Reply stats() {
    if (queue == nullptr) return error_reply(404, "no_queue", "this service has no annotation queue");
    const auto s = queue->stats();
    return json_reply(200, {{"pending", s.pending},
                            {"leased", s.leased},
                            {"decided", s.decided},
                            {"total", s.total},
                            {"run_id", active_run}});
  }

  Reply runs() {
    json out = json::array();
    std::vector<fs::path> dirs;
    std::error_code ec;
    if (fs::is_directory(runs_dir, ec)) {
      for (const auto& e : fs::directory_iterator(runs_dir)) {
        if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
      }
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      try {
        const auto st = store::RunStore::open(d);
        int done = 0;
        for (const auto& e : st.read_all("events")) done += e.value("event", "") == "iteration_done";
        out.push_back({{"run_id", st.run_id()}, {"status", st.status()}, {"iterations_done", done}});
      } catch (const std::exception& e) {
        out.push_back({{"run_id", d.filename().string()}, {"error", e.what()}});
      }
    }
    return json_reply(200, {{"runs", out}});
  }

  Reply run_metrics(const std::string& id) {
    const fs::path dir = runs_dir / id;
    if (!fs::exists(dir / "manifest.json")) return error_reply(404, "unknown_run", "no run " + id);
    try {
      const auto st = store::RunStore::open(dir);
      return json_reply(200, {{"run_id", st.run_id()},
                              {"metrics", st.read_all("metrics")},
                              {"curve", metrics::to_json(pipeline::load_curve(st))}});
    } catch (const std::exception& e) {
      return error_reply(500, "store_error", e.what());
    }
  }
};

Service::Service(fs::path runs_dir, judge::AnnotationQueue* queue, std::string active_run)
    : impl_(std::make_unique<Impl>()) {
  impl_->runs_dir = std::move(runs_dir);
  impl_->queue = queue;
  impl_->active_run = std::move(active_run);

  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    const Reply r = handle(req.method, req.path, query, req.body);
    res.status = r.status;
    if (r.status != 204) res.set_content(r.body, "application/json");
  };
  impl_->server.Get(".*", route);
  impl_->server.Post(".*", route);
}

Service::~Service() { stop(); }

Reply Service::handle(const std::string& method, const std::string& path,
                      const std::map<std::string, std::string>& query, const std::string& body) {
  try {
    if (method == "GET" && path == "/api/queue/next") return impl_->next(query);
    if (method == "POST" && path == "/api/labels") return impl_->label(body);
    if (method == "GET" && path == "/api/queue/stats") return impl_->stats();
    if (method == "GET" && path == "/api/runs") return impl_->runs();
    if (method == "GET" && path == "/api/rubric") {
      return json_reply(200, {{"rubric", std::string(judge::rubric_text())}});
    }
    std::smatch m;
    if (method == "GET" && std::regex_match(path, m, kRunMetrics)) return impl_->run_metrics(m[1]);
    return error_reply(404, "not_found", method + " " + path);
  } catch (const std::exception& e) {
    return error_reply(500, "internal", e.what());
  }
}

int Service::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p <= 0) throw std::runtime_error("cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void Service::start() {
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void Service::run() { impl_->server.listen_after_bind(); }

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace vlfuzz::service
