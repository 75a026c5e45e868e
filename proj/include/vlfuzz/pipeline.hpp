#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "vlfuzz/campaign.hpp"
#include "vlfuzz/config.hpp"
#include "vlfuzz/dpo_core.hpp"
#include "vlfuzz/gateway.hpp"
#include "vlfuzz/image_pool.hpp"
#include "vlfuzz/judge.hpp"
#include "vlfuzz/metrics.hpp"
#include "vlfuzz/preference.hpp"
#include "vlfuzz/sim_models.hpp"
#include "vlfuzz/store.hpp"

// The fuzzing loop: bootstrap, iterate, evaluate, select a checkpoint.
namespace vlfuzz::pipeline {

// Judging is incomplete and the caller did not allow partial pairing.
class PendingLabelsError : public std::runtime_error {
 public:
  PendingLabelsError(const std::string& msg, int pending)
      : std::runtime_error(msg), pending_(pending) {}
  int pending() const { return pending_; }

 private:
  int pending_;
};

// Everything a run needs, wired from one config.
class Runtime {
 public:
  // Creates (or reopens) the run directory derived from the config.
  explicit Runtime(config::Config cfg);
  // Reopens an existing run directory using its frozen config.
  static std::unique_ptr<Runtime> open(const std::filesystem::path& run_dir);

  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;
  ~Runtime();

  const config::Config& config() const { return cfg_; }
  store::RunStore& store() { return *store_; }
  gateway::Gateway& gateway() { return gateway_; }
  images::ImagePool& pool() { return pool_; }
  campaign::PayloadCache& payloads() { return *payloads_; }
  judge::AnnotationQueue& queue() { return *queue_; }
  const dpo::TemplateLibrary& library() const { return library_; }

  campaign::PassContext pass_context();
  campaign::PassConfig pass_config(int iteration) const;

  // Loads deferred items of this run that still lack a verdict.
  int requeue_undecided();

 private:
  Runtime(config::Config cfg, std::unique_ptr<store::RunStore> st);
  void wire();

  class Audit;

  config::Config cfg_;
  std::unique_ptr<store::RunStore> store_;
  images::ImagePool pool_;
  gateway::Gateway gateway_;
  std::unique_ptr<Audit> audit_;
  std::shared_ptr<sim::SimWorld> world_;
  std::unique_ptr<campaign::PayloadCache> payloads_;
  std::unique_ptr<judge::AnnotationQueue> queue_;
  dpo::TemplateLibrary library_;
};

struct Options {
  bool no_human = false;       // requires an oracle judge; never waits on people
  bool allow_partial = false;  // pair and score with pending labels left out
};

// Called when deferred items are waiting; should return once the queue is
// drained (or give up, in which case the iteration fails).
using HumanWait = std::function<void(judge::AnnotationQueue&)>;

// True when the judge endpoint is a simulated oracle.
bool oracle_judge(const config::Config& cfg);

// SFT bootstrap to pi_0; no-op when a policy already exists.
dpo::Snapshot bootstrap(Runtime& rt);

struct IterationSummary {
  int iteration = 0;
  metrics::MetricsReport train;
  std::vector<metrics::MetricsReport> eval;
  int candidate_sets = 0;
  int pairs = 0;
  int deferred = 0;
  std::string policy_in;
  std::string policy_out;
};

nlohmann::json to_json(const IterationSummary& s);

// Measures pi_i on the train split (and the eval panel), then runs DPO to
// produce pi_{i+1}. A finished iteration is read back instead of rerun.
IterationSummary run_iteration(Runtime& rt, int iteration, const Options& opt,
                               const HumanWait& wait = {});

// Next iteration index that has not finished.
int next_iteration(Runtime& rt);

struct IterateResult {
  std::vector<IterationSummary> iterations;
  metrics::IterationCurve curve;
};

// Runs iterations 0..k and records the selected checkpoint.
IterateResult iterate(Runtime& rt, int k, const Options& opt, const HumanWait& wait = {});

// Standalone transfer evaluation: one probe per (image, d) on a split, posed
// to every target. generator is a policy snapshot id or an endpoint name.
std::vector<metrics::MetricsReport> evaluate(Runtime& rt, const std::string& generator,
                                             const std::vector<std::string>& targets,
                                             const std::string& split, const Options& opt,
                                             const HumanWait& wait = {});

// Latest stored snapshot with this id, or the newest one when id is empty.
std::optional<dpo::Snapshot> load_policy(const store::RunStore& st, const std::string& id = "");

// Recomputes every stored metrics record from probes, answers and verdicts.
struct ReplayMismatch {
  std::size_t line = 0;
  std::string stored;
  std::string replayed;
};
std::vector<ReplayMismatch> replay_metrics(const store::RunStore& st);

metrics::IterationCurve load_curve(const store::RunStore& st);

// Preference pairs recorded in the run, in order.
std::vector<preference::PreferencePair> load_pairs(const store::RunStore& st);

}  // namespace vlfuzz::pipeline
