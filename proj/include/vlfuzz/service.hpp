#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "vlfuzz/judge.hpp"

// HTTP+JSON front for the annotation queue and run introspection.
//
//   GET  /api/queue/next?annotator=ID   lease the next deferred item (204 when empty)
//   POST /api/labels                    {probe_id | item_id, label, annotator}
//   GET  /api/queue/stats
//   GET  /api/runs
//   GET  /api/runs/{id}/metrics
//   GET  /api/rubric
namespace vlfuzz::service {

struct Reply {
  int status = 200;
  std::string body;  // JSON unless status is 204
};

class Service {
 public:
  // queue may be null when only run introspection is served.
  Service(std::filesystem::path runs_dir, judge::AnnotationQueue* queue, std::string active_run = "");
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Transport-free entry point; the HTTP server routes every request here.
  Reply handle(const std::string& method, const std::string& path,
               const std::map<std::string, std::string>& query, const std::string& body);

  // Binds the listener; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  void start();  // serve on a background thread
  void run();    // serve on the calling thread until stop()
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace vlfuzz::service
