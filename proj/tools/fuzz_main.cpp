// fuzz: command-line front end for the harness.
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "vlfuzz/config.hpp"
#include "vlfuzz/pipeline.hpp"
#include "vlfuzz/preference.hpp"
#include "vlfuzz/sample.hpp"
#include "vlfuzz/service.hpp"
#include "vlfuzz/store.hpp"
#include "vlfuzz/taxonomy.hpp"

namespace {

namespace fs = std::filesystem;
using namespace vlfuzz;

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;
constexpr int kVerification = 3;

// Thrown by subcommands that found integrity problems.
struct VerificationFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

std::string pct(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", *v * 100.0);
  return buf;
}

void print_metric_lines(const metrics::MetricsReport& r) {
  std::cout << "FR " << pct(r.fr) << " (incorrect " << r.n_incorrect << " / answerable "
            << r.n_answerable << ")\n";
  std::cout << "UR " << pct(r.n_probes > 0 ? std::optional<double>(r.ur) : std::nullopt)
            << " (unanswerable " << r.n_unanswerable << " / probes " << r.n_probes << ")\n";
  std::cout << "DR " << pct(r.dr) << "\n";
}

// Serves the queue until every item is decided or the process is interrupted.
pipeline::HumanWait serve_until_drained(const std::string& host, int port, const fs::path& runs_dir,
                                        const std::string& run_id) {
  return [=](judge::AnnotationQueue& q) {
    service::Service svc(runs_dir, &q, run_id);
    const int bound = svc.bind(host, port);
    svc.start();
    std::cerr << q.stats().pending << " item(s) await a human label; annotate via http://" << host
              << ":" << bound << "/api/queue/next?annotator=<id>\n";
    while (!q.drained() && !g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(200));
    svc.stop();
  };
}

fs::path run_dir_for(const std::string& run, const std::string& runs_dir) {
  if (fs::exists(fs::path(run) / "manifest.json")) return run;
  const fs::path p = fs::path(runs_dir) / run;
  if (!fs::exists(p / "manifest.json")) throw std::invalid_argument("--run: no run at " + p.string());
  return p;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct HumanFlags {
  bool no_human = false;
  bool allow_partial = false;
  std::string host = "127.0.0.1";
  int port = 8700;

  void add(CLI::App* app) {
    app->add_flag("--no-human", no_human, "never wait on people (needs a simulated oracle judge)");
    app->add_flag("--allow-partial", allow_partial, "pair and score with pending labels left out");
    app->add_option("--host", host, "annotation service host while waiting");
    app->add_option("--port", port, "annotation service port while waiting");
  }
  pipeline::Options options() const { return {no_human, allow_partial}; }
};

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  CLI::App app{"Adversarial fuzz-testing harness for vision-language models"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run;
  std::string runs_dir = "runs";

  // run
  HumanFlags run_flags;
  auto* run_cmd = app.add_subcommand("run", "execute the next iteration of the loop");
  run_cmd->add_option("--config", config_path, "config file")->required();
  run_flags.add(run_cmd);

  // iterate
  HumanFlags it_flags;
  int iterations = -1;
  auto* it_cmd = app.add_subcommand("iterate", "run iterations 0..k and select a checkpoint");
  it_cmd->add_option("--config", config_path, "config file")->required();
  it_cmd->add_option("--iterations", iterations, "last iteration index (default: config iterations)");
  it_flags.add(it_cmd);

  // eval
  HumanFlags ev_flags;
  std::string generator;
  std::string targets;
  std::string split = "holdout";
  auto* ev_cmd = app.add_subcommand("eval", "pose one probe per (image, d) to several targets");
  ev_cmd->add_option("--config", config_path, "config file")->required();
  ev_cmd->add_option("--generator", generator, "policy snapshot id or generator endpoint")->required();
  ev_cmd->add_option("--targets", targets, "comma-separated target endpoints")->required();
  ev_cmd->add_option("--split", split, "train, validation or holdout");
  ev_flags.add(ev_cmd);

  // judge-drain
  std::string host = "127.0.0.1";
  int port = 8700;
  auto* drain_cmd = app.add_subcommand("judge-drain", "serve deferred items until all are labeled");
  drain_cmd->add_option("--config", config_path, "config file");
  drain_cmd->add_option("--run", run, "run id or directory");
  drain_cmd->add_option("--runs-dir", runs_dir, "directory holding runs");
  drain_cmd->add_option("--host", host);
  drain_cmd->add_option("--port", port);

  // report
  std::string jsonl_out;
  auto* report_cmd = app.add_subcommand("report", "render the metrics of a run");
  report_cmd->add_option("--run", run, "run id or directory")->required();
  report_cmd->add_option("--runs-dir", runs_dir, "directory holding runs");
  report_cmd->add_option("--jsonl", jsonl_out, "also write the reports as line-delimited records");

  // export-dpo
  std::string out_path;
  auto* export_cmd = app.add_subcommand("export-dpo", "write preference pairs for external trainers");
  export_cmd->add_option("--run", run, "run id or directory")->required();
  export_cmd->add_option("--runs-dir", runs_dir, "directory holding runs");
  export_cmd->add_option("--out", out_path, "output file")->required();

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "HTTP API for annotators and dashboards");
  serve_cmd->add_option("--runs-dir", runs_dir, "directory holding runs");
  serve_cmd->add_option("--run", run, "run whose deferred items are served");
  serve_cmd->add_option("--host", host);
  serve_cmd->add_option("--port", port);

  // verify
  std::string golden;
  auto* verify_cmd = app.add_subcommand("verify", "check checksums, references and metric replay");
  verify_cmd->add_option("--run", run, "run id or directory")->required();
  verify_cmd->add_option("--runs-dir", runs_dir, "directory holding runs");
  verify_cmd->add_option("--golden", golden, "expected content digest, or a file holding it");

  // init-sample
  int n_images = 50;
  std::uint64_t sample_seed = 2024;
  auto* init_cmd = app.add_subcommand("init-sample", "write an all-simulated sample workspace");
  init_cmd->add_option("--out", out_path, "workspace directory")->required();
  init_cmd->add_option("--images", n_images, "number of scenes");
  init_cmd->add_option("--seed", sample_seed, "scene seed");

  // taxonomy
  auto* tax_cmd = app.add_subcommand("taxonomy", "export subdimensions and roles");
  tax_cmd->add_option("--out", out_path, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidation;
  }

  try {
    if (run_cmd->parsed()) {
      pipeline::Runtime rt(config::load_config(config_path));
      const int i = pipeline::next_iteration(rt);
      const auto s = pipeline::run_iteration(
          rt, i, run_flags.options(),
          serve_until_drained(run_flags.host, run_flags.port, rt.store().dir().parent_path(),
                              rt.store().run_id()));
      std::cout << "run " << rt.store().run_id() << " iteration " << i << " target "
                << s.train.target << " pairs " << s.pairs << "\n";
      print_metric_lines(s.train);
      return kOk;
    }
    if (it_cmd->parsed()) {
      pipeline::Runtime rt(config::load_config(config_path));
      const int k = iterations >= 0 ? iterations : rt.config().iterations;
      const auto res = pipeline::iterate(
          rt, k, it_flags.options(),
          serve_until_drained(it_flags.host, it_flags.port, rt.store().dir().parent_path(),
                              rt.store().run_id()));
      std::cout << "run " << rt.store().run_id() << "\n";
      for (const auto& s : res.iterations) {
        std::cout << "iteration " << s.iteration << " FR " << pct(s.train.fr) << " UR "
                  << pct(s.train.ur) << " DR " << pct(s.train.dr) << " pairs " << s.pairs;
        for (const auto& e : s.eval) {
          if (e.target != rt.config().target) std::cout << " " << e.target << " " << pct(e.fr);
        }
        std::cout << "\n";
      }
      if (res.curve.chosen) std::cout << "checkpoint iteration " << *res.curve.chosen << "\n";
      return kOk;
    }
    if (ev_cmd->parsed()) {
      pipeline::Runtime rt(config::load_config(config_path));
      const auto reports = pipeline::evaluate(
          rt, generator, split_list(targets), split, ev_flags.options(),
          serve_until_drained(ev_flags.host, ev_flags.port, rt.store().dir().parent_path(),
                              rt.store().run_id()));
      std::cout << metrics::render_table(reports);
      return kOk;
    }
    if (drain_cmd->parsed()) {
      std::unique_ptr<pipeline::Runtime> rt;
      if (!run.empty()) {
        rt = pipeline::Runtime::open(run_dir_for(run, runs_dir));
      } else if (!config_path.empty()) {
        rt = std::make_unique<pipeline::Runtime>(config::load_config(config_path));
      } else {
        throw std::invalid_argument("judge-drain needs --run or --config");
      }
      const int n = rt->requeue_undecided();
      if (n == 0) {
        std::cout << "queue empty\n";
        return kOk;
      }
      serve_until_drained(host, port, rt->store().dir().parent_path(), rt->store().run_id())(rt->queue());
      const auto st = rt->queue().stats();
      std::cout << "decided " << st.decided << " of " << st.total << "\n";
      return rt->queue().drained() ? kOk : kRuntime;
    }
    if (report_cmd->parsed()) {
      const auto st = store::RunStore::open(run_dir_for(run, runs_dir));
      std::vector<metrics::MetricsReport> reports;
      for (const auto& j : st.read_all("metrics")) reports.push_back(metrics::report_from_json(j));
      std::cout << metrics::render_table(reports);
      const auto curve = pipeline::load_curve(st);
      for (const auto& p : curve.points) {
        std::cout << "curve " << p.iteration << " target " << pct(p.target_fr);
        for (const auto& [t, fr] : p.heldout_fr) std::cout << " " << t << " " << pct(fr);
        std::cout << "\n";
      }
      if (curve.chosen) std::cout << "checkpoint iteration " << *curve.chosen << "\n";
      if (!jsonl_out.empty()) {
        std::ofstream out(jsonl_out, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + jsonl_out);
        for (const auto& r : reports) out << metrics::to_json(r).dump() << "\n";
      }
      return kOk;
    }
    if (export_cmd->parsed()) {
      const auto st = store::RunStore::open(run_dir_for(run, runs_dir));
      const auto pairs = pipeline::load_pairs(st);
      const auto n = preference::export_dpo_dataset(pairs, out_path);
      std::cout << n << " records written to " << out_path << "\n";
      return kOk;
    }
    if (serve_cmd->parsed()) {
      std::unique_ptr<pipeline::Runtime> rt;
      std::string run_id;
      if (!run.empty()) {
        rt = pipeline::Runtime::open(run_dir_for(run, runs_dir));
        rt->requeue_undecided();
        run_id = rt->store().run_id();
      }
      service::Service svc(runs_dir, rt ? &rt->queue() : nullptr, run_id);
      const int bound = svc.bind(host, port);
      svc.start();
      std::cerr << "serving on http://" << host << ":" << bound << "\n";
      while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(200));
      svc.stop();
      return kOk;
    }
    if (verify_cmd->parsed()) {
      const auto st = store::RunStore::open(run_dir_for(run, runs_dir));
      const auto violations = st.verify();
      for (const auto& v : violations) std::cout << store::format_violation(v) << "\n";
      std::vector<pipeline::ReplayMismatch> mismatches;
      bool replayed = true;
      try {
        mismatches = pipeline::replay_metrics(st);
      } catch (const store::StoreError& e) {
        replayed = false;
        std::cout << "metric replay skipped: " << e.what() << "\n";
      }
      for (const auto& m : mismatches) {
        std::cout << "metrics.jsonl:" << m.line << ": replay differs\n  stored   " << m.stored
                  << "\n  replayed " << m.replayed << "\n";
      }
      const std::string digest = st.content_digest();
      std::cout << "content digest " << digest << "\n";
      bool ok = replayed && violations.empty() && mismatches.empty();
      if (!golden.empty()) {
        std::string expected = golden;
        if (fs::exists(golden)) {
          std::ifstream in(golden);
          in >> expected;
        }
        const bool match = expected == digest;
        std::cout << "golden " << (match ? "match" : "MISMATCH (expected " + expected + ")") << "\n";
        ok = ok && match;
      }
      std::cout << violations.size() << " violation(s), " << mismatches.size()
                << " metric replay mismatch(es)\n";
      return ok ? kOk : kVerification;
    }
    if (init_cmd->parsed()) {
      sample::write_workspace(out_path, n_images, sample_seed);
      std::cout << "sample workspace written to " << out_path << "\n";
      return kOk;
    }
    if (tax_cmd->parsed()) {
      if (out_path.empty()) {
        std::cout << taxonomy::export_records();
      } else {
        taxonomy::export_records(fs::path(out_path));
      }
      return kOk;
    }
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const VerificationFailed& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return kVerification;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
