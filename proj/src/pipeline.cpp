#include "vlfuzz/pipeline.hpp"

#include <algorithm>
#include <set>

#include "vlfuzz/template_bank.hpp"
#include "vlfuzz/util.hpp"

namespace vlfuzz::pipeline {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string policy_id(int i) { return "policy-" + std::to_string(i); }

json event(store::RunStore& st, const std::string& name, json body = json::object()) {
  body["event"] = name;
  body["at"] = st.now();
  st.append("events", body);
  return body;
}

bool stage_done(const store::RunStore& st, int iteration, const std::string& stage) {
  for (const auto& e : st.read_all("events")) {
    if (e.value("event", "") == "stage" && e.value("iteration", -1) == iteration &&
        e.value("stage", "") == stage) {
      return true;
    }
  }
  return false;
}

void mark_stage(store::RunStore& st, int iteration, const std::string& stage) {
  event(st, "stage", {{"iteration", iteration}, {"stage", stage}});
}

bool any_probe(const store::RunStore& st, int iteration, const std::string& scope) {
  for (const auto& p : st.read_all("probes")) {
    if (p.at("iteration").get<int>() == iteration && p.at("scope").get<std::string>() == scope) {
      return true;
    }
  }
  return false;
}

// Probes and answers of one (iteration, scope), in file order.
struct Stored {
  std::vector<campaign::Probe> probes;
  std::vector<campaign::TargetAnswer> answers;
};

Stored load_scope(const store::RunStore& st, int iteration, const std::string& scope) {
  Stored s;
  for (const auto& j : st.read_all("probes")) {
    if (j.at("iteration").get<int>() == iteration && j.at("scope").get<std::string>() == scope) {
      s.probes.push_back(campaign::probe_from_json(j));
    }
  }
  for (const auto& j : st.read_all("answers")) {
    if (j.at("iteration").get<int>() == iteration && j.at("scope").get<std::string>() == scope) {
      s.answers.push_back(campaign::answer_from_json(j));
    }
  }
  return s;
}

std::vector<campaign::CandidateSet> load_sets(const store::RunStore& st, int iteration) {
  const Stored s = load_scope(st, iteration, "train");
  std::map<std::string, const campaign::Probe*> probes;
  for (const auto& p : s.probes) probes[p.probe_id] = &p;
  std::map<std::string, const campaign::TargetAnswer*> answers;
  for (const auto& a : s.answers) answers[a.probe_id] = &a;
  std::vector<campaign::CandidateSet> out;
  for (const auto& j : st.read_all("candidate_sets")) {
    if (j.at("iteration").get<int>() != iteration) continue;
    campaign::CandidateSet set;
    set.set_id = j.at("set_id").get<std::string>();
    set.image_id = j.at("image_id").get<std::string>();
    set.d = j.at("d").get<int>();
    set.iteration = iteration;
    set.unpaired = j.at("unpaired").get<bool>();
    for (const auto& id : j.at("probe_ids")) {
      const std::string pid = id.get<std::string>();
      if (!probes.count(pid) || !answers.count(pid)) {
        throw store::StoreError("candidate set " + set.set_id + " references missing probe " + pid);
      }
      set.probes.push_back(*probes[pid]);
      set.answers.push_back(*answers[pid]);
    }
    out.push_back(std::move(set));
  }
  return out;
}

std::map<std::string, int> verdict_labels(const store::RunStore& st) {
  std::map<std::string, int> out;
  for (const auto& j : st.read_all("verdicts")) {
    out[j.at("item_id").get<std::string>()] = j.at("label").get<int>();
  }
  return out;
}

void append_votes(store::RunStore& st, const std::string& item_id,
                  const std::vector<judge::JudgeVote>& votes) {
  for (const auto& v : votes) {
    json j = judge::to_json(v);
    j["item_id"] = item_id;
    st.append("votes", j);
  }
}

// Judges every answer that has neither a verdict nor a deferral yet.
// Returns the number of newly deferred items.
int judge_pending(Runtime& rt, const std::vector<const campaign::Probe*>& probes,
                  const std::vector<const campaign::TargetAnswer*>& answers) {
  auto& st = rt.store();
  const auto& cfg = rt.config();
  std::set<std::string> seen;
  for (const auto& j : st.read_all("verdicts")) seen.insert(j.at("item_id").get<std::string>());
  for (const auto& j : st.read_all("deferred")) seen.insert(j.at("item_id").get<std::string>());

  std::vector<judge::JudgeRequest> reqs;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    const auto& a = *answers[i];
    if (seen.count(a.answer_id)) continue;
    judge::JudgeRequest r;
    r.item_id = a.answer_id;
    r.probe_id = a.probe_id;
    r.question = probes[i]->question;
    r.answer = a.answer;
    r.target = a.target_endpoint;
    r.image = rt.payloads().get(probes[i]->image_id);
    r.seed = SeedBuilder(cfg.seed).add("judge").add(a.answer_id).seed();
    reqs.push_back(std::move(r));
  }
  if (reqs.empty()) return 0;
  const std::string decided_at = st.now();
  const auto outcomes =
      judge::judge_answers(rt.gateway(), cfg.judge, reqs, cfg.gate, cfg.max_in_flight, decided_at);
  int deferred = 0;
  for (const auto& o : outcomes) {
    if (const auto* v = std::get_if<judge::Verdict>(&o)) {
      append_votes(st, v->item_id, v->votes);
      st.append("verdicts", judge::to_json(*v));
    } else {
      const auto& d = std::get<judge::DeferredItem>(o);
      append_votes(st, d.item_id, d.votes);
      st.append("deferred", judge::to_json(d, false));
      rt.queue().enqueue(d);
      ++deferred;
    }
  }
  return deferred;
}

// Blocks on the human queue when items of this batch are undecided.
void settle(Runtime& rt, const std::vector<const campaign::TargetAnswer*>& answers,
            const Options& opt, const HumanWait& wait, int iteration, const std::string& scope) {
  auto count_open = [&] {
    const auto labels = verdict_labels(rt.store());
    int open = 0;
    for (const auto* a : answers) open += labels.count(a->answer_id) ? 0 : 1;
    return open;
  };
  int open = count_open();
  if (open == 0) return;
  if (!opt.no_human && !opt.allow_partial && wait) {
    event(rt.store(), "awaiting_human", {{"iteration", iteration}, {"scope", scope}, {"pending", open}});
    wait(rt.queue());
    open = count_open();
  }
  if (open == 0) return;
  if (opt.allow_partial) {
    event(rt.store(), "partial_labels", {{"iteration", iteration}, {"scope", scope}, {"pending", open}});
    return;
  }
  throw PendingLabelsError(std::to_string(open) + " " + scope + " items of iteration " +
                               std::to_string(iteration) +
                               " await a human label; drain the queue or pass --allow-partial",
                           open);
}

std::vector<metrics::JudgedProbe> judged(const std::vector<const campaign::Probe*>& probes,
                                         const std::vector<const campaign::TargetAnswer*>& answers,
                                         const std::map<std::string, int>& labels) {
  std::vector<metrics::JudgedProbe> out;
  out.reserve(answers.size());
  for (std::size_t i = 0; i < answers.size(); ++i) {
    metrics::JudgedProbe jp;
    jp.probe_id = probes[i]->probe_id;
    jp.image_id = probes[i]->context_image_id;
    jp.d = probes[i]->d;
    jp.r = probes[i]->r;
    jp.question = probes[i]->question;
    if (auto it = labels.find(answers[i]->answer_id); it != labels.end()) jp.label = it->second;
    out.push_back(std::move(jp));
  }
  return out;
}

// Eval answers for one target, with their probes, in probe order.
struct TargetView {
  std::vector<const campaign::Probe*> probes;
  std::vector<const campaign::TargetAnswer*> answers;
};

std::map<std::string, TargetView> by_target(const Stored& s) {
  std::map<std::string, const campaign::Probe*> probes;
  for (const auto& p : s.probes) probes[p.probe_id] = &p;
  std::map<std::string, TargetView> out;
  for (const auto& a : s.answers) {
    auto& v = out[a.target_endpoint];
    v.probes.push_back(probes.at(a.probe_id));
    v.answers.push_back(&a);
  }
  return out;
}

// Generates (or reloads), judges and scores one eval-style pass.
std::vector<metrics::MetricsReport> eval_scope(Runtime& rt, int iteration, const std::string& scope,
                                               const std::vector<std::string>& image_ids,
                                               const std::vector<std::string>& targets,
                                               const campaign::PolicyView& view,
                                               const std::string& generator, const Options& opt,
                                               const HumanWait& wait) {
  auto& st = rt.store();
  const std::string stage = scope + "_generated";
  if (!stage_done(st, iteration, stage)) {
    if (any_probe(st, iteration, scope)) {
      throw store::StoreError(scope + " pass of iteration " + std::to_string(iteration) +
                              " was interrupted mid-generation; start a fresh run");
    }
    auto pc = rt.pass_config(iteration);
    pc.generator = generator;
    pc.eval_scope = scope;
    const auto ev = campaign::run_eval_pass(rt.pass_context(), image_ids, targets, view, pc);
    for (const auto& t : ev.incomplete) {
      event(st, "target_incomplete", {{"iteration", iteration}, {"scope", scope}, {"target", t}});
    }
    mark_stage(st, iteration, stage);
  }
  const Stored stored = load_scope(st, iteration, scope);
  auto views = by_target(stored);
  std::vector<const campaign::Probe*> all_p;
  std::vector<const campaign::TargetAnswer*> all_a;
  for (const auto& t : targets) {
    auto& v = views[t];
    all_p.insert(all_p.end(), v.probes.begin(), v.probes.end());
    all_a.insert(all_a.end(), v.answers.begin(), v.answers.end());
  }
  judge_pending(rt, all_p, all_a);
  settle(rt, all_a, opt, wait, iteration, scope);
  const auto labels = verdict_labels(st);
  std::vector<metrics::MetricsReport> reports;
  for (const auto& t : targets) {
    const auto& v = views[t];
    const auto jp = judged(v.probes, v.answers, labels);
    auto report = metrics::compute_report(t, iteration, scope, jp);
    st.append("metrics", metrics::to_json(report));
    reports.push_back(std::move(report));
  }
  return reports;
}

json point_json(const metrics::IterationPoint& p) {
  json h = json::object();
  for (const auto& [k, v] : p.heldout_fr) h[k] = v;
  return {{"iteration", p.iteration},
          {"target_fr", p.target_fr ? json(*p.target_fr) : json(nullptr)},
          {"heldout_fr", h}};
}

IterationSummary summary_from_json(const json& j) {
  IterationSummary s;
  s.iteration = j.at("iteration").get<int>();
  s.train = metrics::report_from_json(j.at("train"));
  for (const auto& e : j.at("eval")) s.eval.push_back(metrics::report_from_json(e));
  s.candidate_sets = j.at("candidate_sets").get<int>();
  s.pairs = j.at("pairs").get<int>();
  s.deferred = j.at("deferred").get<int>();
  s.policy_in = j.at("policy_in").get<std::string>();
  s.policy_out = j.at("policy_out").get<std::string>();
  return s;
}

std::optional<IterationSummary> finished(const store::RunStore& st, int iteration) {
  for (const auto& e : st.read_all("events")) {
    if (e.value("event", "") == "iteration_done" && e.at("iteration").get<int>() == iteration) {
      return summary_from_json(e.at("summary"));
    }
  }
  return std::nullopt;
}

}  // namespace

class Runtime::Audit : public gateway::AuditSink {
 public:
  explicit Audit(store::RunStore& st) : st_(st) {}
  void record_exchange(const json& exchange) override { st_.append("exchanges", exchange); }

 private:
  store::RunStore& st_;
};

Runtime::Runtime(config::Config cfg) : cfg_(std::move(cfg)) {
  const json cj = cfg_.to_json();
  const fs::path dir = cfg_.resolve(cfg_.runs_dir) / store::run_id_for(cj);
  store_ = std::make_unique<store::RunStore>(
      store::RunStore::create(dir, cj, cfg_.base_dir, cfg_.deterministic_clock));
  wire();
}

Runtime::Runtime(config::Config cfg, std::unique_ptr<store::RunStore> st)
    : cfg_(std::move(cfg)), store_(std::move(st)) {
  wire();
}

Runtime::~Runtime() = default;

std::unique_ptr<Runtime> Runtime::open(const fs::path& run_dir) {
  auto st = std::make_unique<store::RunStore>(store::RunStore::open(run_dir));
  config::Config cfg = config::parse_config(st->config(), st->config_dir());
  return std::unique_ptr<Runtime>(new Runtime(std::move(cfg), std::move(st)));
}

void Runtime::wire() {
  library_ = dpo::make_template_library(cfg_.granularity);

  images::LoadStats stats;
  pool_ = images::ImagePool::load(cfg_.resolve(cfg_.pool_dir), cfg_.split_fractions, cfg_.pool_seed,
                                  &stats);
  const fs::path config_dir = store_->config_dir();
  if (store_->count("images") == 0) {
    for (auto ref : pool_.images()) {
      ref.path = fs::path(ref.path).lexically_relative(config_dir).generic_string();
      store_->append("images", images::to_json(ref));
    }
    for (const auto& w : stats.warnings) event(*store_, "pool_warning", {{"message", w}});
  } else {
    for (const auto& j : store_->read_all("images")) {
      const auto ref = images::image_ref_from_json(j);
      if (ref.parent_id && ref.perturbation) {
        pool_.register_derived(*ref.parent_id, *ref.perturbation, store_->blob_dir());
      } else if (!pool_.find(ref.id)) {
        throw store::StoreError("image " + ref.id + " of this run is missing from the pool");
      }
    }
  }

  for (const auto& ep : cfg_.endpoints) gateway_.register_endpoint(ep);
  if (cfg_.fixtures) {
    world_ = std::make_shared<sim::SimWorld>(sim::load_fixtures(cfg_.resolve(*cfg_.fixtures)));
    world_->set_resolver([this](const std::string& id) {
      try {
        return pool_.root_of(id);
      } catch (const std::exception&) {
        return id;
      }
    });
    sim::register_simulators(gateway_, world_);
    for (const auto& p : cfg_.sim_profiles) gateway_.register_simulator(p.name, sim::make_target(world_, p));
  }
  audit_ = std::make_unique<Audit>(*store_);
  gateway_.set_audit(audit_.get());

  payloads_ = std::make_unique<campaign::PayloadCache>(pool_);
  queue_ = std::make_unique<judge::AnnotationQueue>(std::chrono::seconds(cfg_.lease_seconds));
  queue_->set_wall_clock([this] { return store_->now(); });
  queue_->set_on_decided([this](const judge::Verdict& v) {
    store_->append("verdicts", judge::to_json(v));
  });
}

campaign::PassContext Runtime::pass_context() {
  return campaign::PassContext{gateway_, pool_, *payloads_, *store_};
}

campaign::PassConfig Runtime::pass_config(int iteration) const {
  campaign::PassConfig pc;
  pc.generator = cfg_.generator;
  pc.target = cfg_.target;
  pc.n_per_context = cfg_.n_per_context;
  pc.images_per_iteration = cfg_.images_per_iteration;
  pc.with_role_exemplars = cfg_.with_role_exemplars;
  pc.max_in_flight = cfg_.max_in_flight;
  pc.perturbation = cfg_.perturbation;
  pc.priors = cfg_.priors;
  pc.seed = cfg_.seed;
  pc.iteration = iteration;
  return pc;
}

int Runtime::requeue_undecided() {
  const auto labels = verdict_labels(*store_);
  int n = 0;
  for (const auto& j : store_->read_all("deferred")) {
    auto item = judge::deferred_from_json(j);
    if (labels.count(item.item_id)) continue;
    const auto payload = payloads_->get(item.image_id);
    item.image_media_type = payload.media_type;
    item.image_base64 = payload.base64;
    queue_->enqueue(std::move(item));
    ++n;
  }
  return n;
}

bool oracle_judge(const config::Config& cfg) {
  const auto& ep = cfg.endpoint(cfg.judge);
  if (ep.transport != gateway::TransportKind::Simulated) return false;
  try {
    return sim::judge_behavior_from_string(ep.profile) == sim::JudgeBehavior::Oracle;
  } catch (const std::invalid_argument&) {
    return false;
  }
}

std::optional<dpo::Snapshot> load_policy(const store::RunStore& st, const std::string& id) {
  std::optional<dpo::Snapshot> out;
  for (const auto& j : st.read_all("policies")) {
    if (id.empty() || j.at("snapshot_id").get<std::string>() == id) out = dpo::snapshot_from_json(j);
  }
  return out;
}

dpo::Snapshot bootstrap(Runtime& rt) {
  auto& st = rt.store();
  if (auto existing = load_policy(st, policy_id(0))) return *existing;
  const auto& cfg = rt.config();
  const auto& lib = rt.library();

  const auto train = rt.pool().split(images::Split::Train);
  if (train.empty()) throw std::invalid_argument("the train split is empty; add images or adjust pool.split_fractions");
  std::vector<std::string> larger;
  for (const auto& ref : train) larger.push_back(ref.id);
  const std::size_t n_seed = std::min<std::size_t>(static_cast<std::size_t>(cfg.sft_seed_images), larger.size());
  const std::vector<std::string> seed_images(larger.begin(), larger.begin() + static_cast<std::ptrdiff_t>(n_seed));

  // Curated exemplars: plain wording for coverage, the role signature for hints.
  const preference::ExemplarSource source = [](const std::string&, int d, int r, const std::string& batch) {
    const auto k = batch == "A" ? templates::kPlain : templates::kSignature;
    return templates::templates_for(d, r)[k];
  };
  const auto batches = preference::build_sft_batches(seed_images, larger, source);

  std::vector<dpo::SftTarget> targets;
  auto add = [&](const preference::SftExample& e) {
    st.append("sft", preference::to_json(e));
    const std::size_t row = lib.row_for(e.d, e.r);
    const auto& row_templates = lib.templates[row];
    const auto it = std::find(row_templates.begin(), row_templates.end(), e.target_question);
    if (it == row_templates.end()) {
      throw std::logic_error("SFT target is not in the template library: " + e.target_question);
    }
    targets.push_back({row, static_cast<std::size_t>(it - row_templates.begin())});
  };
  for (const auto& e : batches.batch_a) add(e);
  for (const auto& e : batches.batch_b) add(e);

  const dpo::ToyPolicy uniform(lib.rows(), lib.width());
  const auto fit = dpo::fit_sft(uniform, targets, cfg.sft);
  const json meta{{"stage", "sft"},
                  {"examples", targets.size()},
                  {"learning_rate", cfg.sft.learning_rate},
                  {"steps", cfg.sft.steps},
                  {"initial_loss", fit.losses.front()},
                  {"final_loss", fit.losses.back()}};
  st.append("policies", dpo::snapshot_to_json(policy_id(0), "", lib, fit.policy, meta));
  event(st, "sft_done", meta);
  return dpo::Snapshot{policy_id(0), "", lib, fit.policy, meta};
}

json to_json(const IterationSummary& s) {
  json ev = json::array();
  for (const auto& r : s.eval) ev.push_back(metrics::to_json(r));
  return {{"iteration", s.iteration},          {"train", metrics::to_json(s.train)},
          {"eval", ev},                        {"candidate_sets", s.candidate_sets},
          {"pairs", s.pairs},                  {"deferred", s.deferred},
          {"policy_in", s.policy_in},          {"policy_out", s.policy_out}};
}

int next_iteration(Runtime& rt) {
  int i = 0;
  while (finished(rt.store(), i)) ++i;
  return i;
}

IterationSummary run_iteration(Runtime& rt, int iteration, const Options& opt, const HumanWait& wait) {
  auto& st = rt.store();
  if (auto done = finished(st, iteration)) return *done;
  const auto& cfg = rt.config();
  if (opt.no_human && !oracle_judge(cfg)) {
    throw std::invalid_argument("--no-human needs a simulated oracle judge; " + cfg.judge + " is not one");
  }
  bootstrap(rt);
  const auto snap = load_policy(st, policy_id(iteration));
  if (!snap) {
    throw std::invalid_argument("no policy snapshot " + policy_id(iteration) +
                                "; iterations run in order starting at 0");
  }
  campaign::PolicyView view{&rt.library(), cfg.drive_generator ? &snap->policy : nullptr};

  IterationSummary summary;
  summary.iteration = iteration;
  summary.policy_in = snap->snapshot_id;

  // Candidates.
  if (!stage_done(st, iteration, "train_generated")) {
    if (any_probe(st, iteration, "train")) {
      throw store::StoreError("iteration " + std::to_string(iteration) +
                              " was interrupted mid-generation; start a fresh run");
    }
    const auto ids = campaign::select_images(rt.pool().split(images::Split::Train),
                                             cfg.images_per_iteration, cfg.seed, iteration);
    campaign::generate_candidates(rt.pass_context(), ids, view, rt.pass_config(iteration));
    mark_stage(st, iteration, "train_generated");
  }
  const auto sets = load_sets(st, iteration);
  summary.candidate_sets = static_cast<int>(sets.size());

  std::vector<const campaign::Probe*> probes;
  std::vector<const campaign::TargetAnswer*> answers;
  for (const auto& s : sets) {
    for (std::size_t k = 0; k < s.probes.size(); ++k) {
      probes.push_back(&s.probes[k]);
      answers.push_back(&s.answers[k]);
    }
  }

  // Judge, then wait for people if anything was deferred.
  const int before = static_cast<int>(st.count("deferred"));
  judge_pending(rt, probes, answers);
  rt.requeue_undecided();
  settle(rt, answers, opt, wait, iteration, "train");
  const auto labels = verdict_labels(st);
  summary.deferred = static_cast<int>(st.count("deferred")) - before;

  summary.train = metrics::compute_report(cfg.target, iteration, "train", judged(probes, answers, labels));
  st.append("metrics", metrics::to_json(summary.train));

  // Transfer panel on the eval split.
  metrics::IterationPoint point;
  point.iteration = iteration;
  point.target_fr = summary.train.fr;
  if (!cfg.heldout_targets.empty()) {
    std::vector<std::string> targets{cfg.target};
    for (const auto& t : cfg.heldout_targets) {
      if (t != cfg.target) targets.push_back(t);
    }
    const auto ids = campaign::select_images(
        rt.pool().split(images::split_from_string(cfg.eval_split)), 0, cfg.seed, iteration);
    summary.eval = eval_scope(rt, iteration, "eval", ids, targets, view, cfg.generator, opt, wait);
    for (const auto& r : summary.eval) {
      if (r.target != cfg.target && r.fr) point.heldout_fr[r.target] = *r.fr;
    }
  }
  st.append("curve", point_json(point));

  // Pairs.
  std::vector<dpo::PolicyPair> policy_pairs;
  for (const auto& s : sets) {
    if (s.unpaired) continue;
    std::vector<preference::Candidate> cands;
    std::map<std::string, const campaign::Probe*> by_id;
    for (std::size_t k = 0; k < s.probes.size(); ++k) {
      const auto it = labels.find(s.answers[k].answer_id);
      if (it == labels.end()) continue;
      const auto& p = s.probes[k];
      by_id[p.probe_id] = &p;
      cands.push_back({p.probe_id, p.context_image_id, p.d, p.r, p.question, p.prompt_hash,
                       p.template_index, it->second});
    }
    if (cands.size() < 2) continue;
    const auto scored = preference::score(cands);
    const auto pair = preference::make_pair(
        scored, SeedBuilder(cfg.seed).add("pair").add(s.set_id).seed(), iteration);
    if (!pair) continue;
    st.append("pairs", preference::to_json(*pair));
    ++summary.pairs;
    const auto* w = by_id.at(pair->winner.probe_id);
    const auto* l = by_id.at(pair->loser.probe_id);
    if (w->template_row >= 0 && l->template_row >= 0) {
      policy_pairs.push_back({static_cast<std::size_t>(w->template_row),
                              static_cast<std::size_t>(w->template_index),
                              static_cast<std::size_t>(l->template_row),
                              static_cast<std::size_t>(l->template_index)});
    }
  }

  // DPO toward pi_{i+1}.
  const auto ref_snap = cfg.refresh_reference ? snap : load_policy(st, policy_id(0));
  const dpo::RefPolicy ref(ref_snap->policy);
  dpo::ToyPolicy next = snap->policy;
  json meta{{"stage", "dpo"}, {"iteration", iteration}, {"pairs", policy_pairs.size()},
            {"reference", ref_snap->snapshot_id}, {"beta", cfg.dpo.beta},
            {"lambda_kl", cfg.dpo.lambda_kl}, {"learning_rate", cfg.dpo.learning_rate},
            {"steps", cfg.dpo.steps}, {"rng_seed", cfg.dpo.rng_seed}};
  if (!policy_pairs.empty()) {
    const auto trained = dpo::optimize(snap->policy, ref, policy_pairs, cfg.dpo);
    next = trained.policy;
    meta["initial_loss"] = trained.losses.front();
    meta["final_loss"] = trained.losses.back();
  }
  summary.policy_out = policy_id(iteration + 1);
  st.append("policies", dpo::snapshot_to_json(summary.policy_out, summary.policy_in, rt.library(), next, meta));

  event(st, "iteration_done", {{"iteration", iteration}, {"summary", to_json(summary)}});
  st.set_status("open");
  return summary;
}

IterateResult iterate(Runtime& rt, int k, const Options& opt, const HumanWait& wait) {
  if (k < 0) throw std::invalid_argument("iterations must be nonnegative");
  IterateResult out;
  for (int i = 0; i <= k; ++i) out.iterations.push_back(run_iteration(rt, i, opt, wait));
  for (const auto& p : load_curve(rt.store()).points) {
    if (p.iteration <= k) out.curve.points.push_back(p);
  }
  const bool panel = std::any_of(out.curve.points.begin(), out.curve.points.end(),
                                 [](const auto& p) { return !p.heldout_fr.empty(); });
  if (panel) {
    const int chosen = metrics::select_checkpoint(out.curve);
    out.curve.chosen = chosen;
    event(rt.store(), "checkpoint_selected",
          {{"iteration", chosen}, {"policy_id", policy_id(chosen)}, {"through", k}});
  }
  return out;
}

std::vector<metrics::MetricsReport> evaluate(Runtime& rt, const std::string& generator,
                                             const std::vector<std::string>& targets,
                                             const std::string& split, const Options& opt,
                                             const HumanWait& wait) {
  if (targets.empty()) throw std::invalid_argument("eval needs at least one target");
  const auto& cfg = rt.config();
  if (opt.no_human && !oracle_judge(cfg)) {
    throw std::invalid_argument("--no-human needs a simulated oracle judge; " + cfg.judge + " is not one");
  }
  std::optional<dpo::Snapshot> snap;
  std::string endpoint = cfg.generator;
  if (rt.gateway().has_endpoint(generator) &&
      rt.gateway().endpoint(generator).kind == gateway::EndpointKind::Generator) {
    endpoint = generator;
  } else {
    snap = load_policy(rt.store(), generator);
    if (!snap) throw std::invalid_argument("no generator endpoint or policy snapshot named " + generator);
  }
  campaign::PolicyView view{&rt.library(), snap ? &snap->policy : nullptr};

  int n = 0;
  for (const auto& e : rt.store().read_all("events")) n += e.value("event", "") == "transfer_eval" ? 1 : 0;
  event(rt.store(), "transfer_eval",
        {{"iteration", n}, {"generator", generator}, {"split", split}, {"targets", targets}});
  const auto ids = campaign::select_images(rt.pool().split(images::split_from_string(split)), 0, cfg.seed, n);
  if (ids.empty()) throw std::invalid_argument("split " + split + " has no images");
  return eval_scope(rt, n, "transfer", ids, targets, view, endpoint, opt, wait);
}

std::vector<ReplayMismatch> replay_metrics(const store::RunStore& st) {
  std::vector<campaign::Probe> probes;
  for (const auto& j : st.read_all("probes")) probes.push_back(campaign::probe_from_json(j));
  std::map<std::string, const campaign::Probe*> by_id;
  for (const auto& p : probes) by_id[p.probe_id] = &p;
  std::vector<campaign::TargetAnswer> answers;
  for (const auto& j : st.read_all("answers")) answers.push_back(campaign::answer_from_json(j));
  const auto labels = verdict_labels(st);

  std::vector<ReplayMismatch> out;
  const auto stored = st.read_all("metrics");
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const auto& m = stored[i];
    const std::string target = m.at("target").get<std::string>();
    const int iteration = m.at("iteration").get<int>();
    const std::string scope = m.at("scope").get<std::string>();
    std::vector<const campaign::Probe*> ps;
    std::vector<const campaign::TargetAnswer*> as;
    for (const auto& a : answers) {
      if (a.target_endpoint == target && a.iteration == iteration && a.scope == scope) {
        ps.push_back(by_id.at(a.probe_id));
        as.push_back(&a);
      }
    }
    const auto report = metrics::compute_report(target, iteration, scope, judged(ps, as, labels));
    const std::string replayed = metrics::to_json(report).dump();
    if (replayed != m.dump()) out.push_back({i + 1, m.dump(), replayed});
  }
  return out;
}

metrics::IterationCurve load_curve(const store::RunStore& st) {
  std::map<int, metrics::IterationPoint> points;
  for (const auto& j : st.read_all("curve")) {
    metrics::IterationPoint p;
    p.iteration = j.at("iteration").get<int>();
    if (!j.at("target_fr").is_null()) p.target_fr = j.at("target_fr").get<double>();
    for (const auto& [k, v] : j.at("heldout_fr").items()) p.heldout_fr[k] = v.get<double>();
    points[p.iteration] = p;
  }
  metrics::IterationCurve c;
  for (auto& [i, p] : points) c.points.push_back(p);
  for (const auto& e : st.read_all("events")) {
    if (e.value("event", "") == "checkpoint_selected") c.chosen = e.at("iteration").get<int>();
  }
  return c;
}

std::vector<preference::PreferencePair> load_pairs(const store::RunStore& st) {
  std::vector<preference::PreferencePair> out;
  for (const auto& j : st.read_all("pairs")) out.push_back(preference::pair_from_json(j));
  return out;
}

}  // namespace vlfuzz::pipeline
