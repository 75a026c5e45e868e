#include "vlfuzz/campaign.hpp"

#include <algorithm>
#include <array>

#include "vlfuzz/template_bank.hpp"
#include "vlfuzz/util.hpp"

namespace vlfuzz::campaign {
namespace {

using nlohmann::json;

constexpr std::string_view kGeneratorSystem =
    "You write probe questions that stress-test a vision-language model. Reply with the "
    "question only: one sentence ending in a question mark, no preamble, no quotes.";

constexpr std::string_view kTargetSystem =
    "Answer the question about the attached image. Reply with a short answer: a word, a "
    "number, or yes/no.";

// Quote pairs recognized around a whole question.
constexpr std::array<std::pair<std::string_view, std::string_view>, 4> kQuotes{{
    {"\"", "\""},
    {"'", "'"},
    {"\xE2\x80\x9C", "\xE2\x80\x9D"},
    {"\xE2\x80\x98", "\xE2\x80\x99"},
}};

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }
bool ends_with(std::string_view s, std::string_view p) {
  return s.size() >= p.size() && s.substr(s.size() - p.size()) == p;
}

std::string short_id(const std::string& id) { return id.substr(0, 16); }

std::optional<images::PerturbationSpec> spec_from(const json& j) {
  if (!j.contains("perturbation") || j.at("perturbation").is_null()) return std::nullopt;
  return images::perturbation_from_json(j.at("perturbation"));
}

struct Slot {
  std::string context_image;
  std::string pose_image;
  std::optional<images::PerturbationSpec> perturbation;
  int d = 0;
  int r = 0;
  int j = 0;
  int row = -1;
  int k = -1;
  std::optional<std::string> template_text;
  std::uint64_t seed = 0;
  std::string probe_id;
};

std::string probe_id_for(const std::string& scope, int iteration, const std::string& image, int d,
                         int j) {
  return scope + "-i" + std::to_string(iteration) + "-" + short_id(image) + "-d" +
         std::to_string(d) + "-c" + std::to_string(j);
}

Slot make_slot(PassContext& ctx, std::set<std::string>& known, const std::string& scope,
               const std::string& image, int d, int j, const PolicyView& view,
               const PassConfig& cfg) {
  Slot s;
  s.context_image = image;
  s.pose_image = image;
  s.d = d;
  s.j = j;
  s.seed = SeedBuilder(cfg.seed).add(scope).add(static_cast<std::uint64_t>(cfg.iteration))
               .add(image).add(static_cast<std::uint64_t>(d)).add(static_cast<std::uint64_t>(j))
               .seed();
  s.probe_id = probe_id_for(scope, cfg.iteration, image, d, j);

  const auto sub = [&](std::string_view tag) { return SeedBuilder(s.seed).add(tag).seed(); };
  const bool by_subdimension =
      view.policy != nullptr && view.library->granularity == dpo::Granularity::Subdimension;
  if (by_subdimension) {
    s.row = d - 1;
    s.k = static_cast<int>(view.policy->sample(static_cast<std::size_t>(s.row), sub("template")));
    s.r = view.library->template_roles[static_cast<std::size_t>(s.row)][static_cast<std::size_t>(s.k)];
  } else {
    Rng rng(sub("role"));
    s.r = 1 + static_cast<int>(rng.categorical(cfg.priors.p_r));
    if (view.policy != nullptr) {
      s.row = static_cast<int>(view.library->row_for(d, s.r));
      s.k = static_cast<int>(view.policy->sample(static_cast<std::size_t>(s.row), sub("template")));
    }
  }
  if (s.row >= 0) {
    s.template_text =
        view.library->templates[static_cast<std::size_t>(s.row)][static_cast<std::size_t>(s.k)];
  }

  if (s.r == static_cast<int>(taxonomy::RoleName::VisualPerturbation)) {
    images::PerturbationSpec spec = cfg.perturbation;
    spec.rng_seed = SeedBuilder(cfg.seed).add("perturb").add(image).seed();
    const images::ImageRef derived = ctx.pool.register_derived(image, spec, ctx.store.blob_dir());
    if (known.insert(derived.id).second) {
      images::ImageRef rec = derived;
      rec.path = std::filesystem::path(derived.path).lexically_relative(ctx.store.dir()).generic_string();
      ctx.store.append("images", images::to_json(rec));
    }
    s.pose_image = derived.id;
    s.perturbation = spec;
  }
  return s;
}

// Runs generation for every slot with one retry; nullopt marks a dropped slot.
std::vector<std::optional<Probe>> generate(PassContext& ctx, std::vector<Slot>& slots,
                                           const std::string& scope, const PassConfig& cfg,
                                           std::vector<Failure>& failures) {
  const gateway::ModelEndpoint& ep = ctx.gateway.endpoint(cfg.generator);
  std::vector<GeneratorPrompt> prompts;
  prompts.reserve(slots.size());
  for (const auto& s : slots) {
    prompts.push_back(build_generator_prompt(ctx.payloads.get(s.context_image), s.d, s.r,
                                             cfg.with_role_exemplars, s.template_text));
  }

  std::vector<std::optional<std::string>> questions(slots.size());
  std::vector<std::string> last_error(slots.size());
  std::vector<std::size_t> todo(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) todo[i] = i;

  for (int attempt = 0; attempt < 2 && !todo.empty(); ++attempt) {
    std::vector<gateway::ChatRequest> reqs;
    reqs.reserve(todo.size());
    for (std::size_t i : todo) {
      gateway::ChatRequest req;
      req.endpoint = cfg.generator;
      req.system = prompts[i].system;
      req.text_parts = {prompts[i].text};
      req.image = prompts[i].image;
      req.seed = SeedBuilder(slots[i].seed).add("generate").add(static_cast<std::uint64_t>(attempt)).seed();
      req.sample_index = attempt;
      reqs.push_back(std::move(req));
    }
    const auto outcomes = ctx.gateway.complete_many(reqs, cfg.max_in_flight);
    std::vector<std::size_t> retry;
    for (std::size_t n = 0; n < todo.size(); ++n) {
      const std::size_t i = todo[n];
      if (const auto* err = std::get_if<gateway::GatewayError>(&outcomes[n])) {
        last_error[i] = gateway::to_string(err->kind()) + ": " + err->what();
        retry.push_back(i);
        continue;
      }
      std::string why;
      auto q = clean_question(std::get<gateway::ChatResponse>(outcomes[n]).text, &why);
      if (!q) {
        last_error[i] = "hygiene: " + why;
        retry.push_back(i);
        continue;
      }
      questions[i] = std::move(q);
    }
    todo = std::move(retry);
  }

  std::vector<std::optional<Probe>> out(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Slot& s = slots[i];
    if (!questions[i]) {
      failures.push_back({"generate", s.context_image, s.d, s.r, last_error[i]});
      continue;
    }
    Probe p;
    p.probe_id = s.probe_id;
    p.image_id = s.pose_image;
    p.context_image_id = s.context_image;
    p.d = s.d;
    p.r = s.r;
    p.question = *questions[i];
    p.template_row = s.row;
    p.template_index = s.k;
    p.generator_endpoint = cfg.generator;
    p.prompt_hash = prompts[i].prompt_hash;
    p.decoding = ep.decoding;
    p.iteration = cfg.iteration;
    p.scope = scope;
    p.perturbation = s.perturbation;
    out[i] = std::move(p);
  }
  return out;
}

std::vector<std::optional<TargetAnswer>> answer(PassContext& ctx, const std::vector<const Probe*>& probes,
                                                const std::string& target, const PassConfig& cfg,
                                                std::vector<Failure>& failures) {
  std::vector<gateway::ChatRequest> reqs;
  reqs.reserve(probes.size());
  for (const Probe* p : probes) {
    gateway::ChatRequest req;
    req.endpoint = target;
    req.system = std::string(kTargetSystem);
    req.text_parts = {p->question};
    req.image = ctx.payloads.get(p->image_id);
    req.seed = SeedBuilder(cfg.seed).add("answer").add(p->probe_id).add(target).seed();
    reqs.push_back(std::move(req));
  }
  const auto outcomes = ctx.gateway.complete_many(reqs, cfg.max_in_flight);
  std::vector<std::optional<TargetAnswer>> out(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const Probe& p = *probes[i];
    if (const auto* err = std::get_if<gateway::GatewayError>(&outcomes[i])) {
      failures.push_back({"answer", p.context_image_id, p.d, p.r,
                          target + ": " + gateway::to_string(err->kind()) + ": " + err->what()});
      continue;
    }
    const auto& resp = std::get<gateway::ChatResponse>(outcomes[i]);
    TargetAnswer a;
    a.answer_id = answer_id_for(p.probe_id, target);
    a.probe_id = p.probe_id;
    a.target_endpoint = target;
    a.answer = trim(resp.text);
    a.latency_ms = resp.latency_ms;
    a.iteration = p.iteration;
    a.scope = p.scope;
    out[i] = std::move(a);
  }
  return out;
}

void log_failures(store::RunStore& st, const std::vector<Failure>& failures, std::size_t from,
                  const std::string& scope, int iteration) {
  for (std::size_t i = from; i < failures.size(); ++i) {
    json e = to_json(failures[i]);
    e["event"] = "candidate_dropped";
    e["scope"] = scope;
    e["iteration"] = iteration;
    e["at"] = st.now();
    st.append("events", e);
  }
}

}  // namespace

GeneratorPrompt build_generator_prompt(const gateway::ImagePayload& image, int d, int r,
                                       bool with_role_exemplars,
                                       const std::optional<std::string>& template_text) {
  taxonomy::require_context(d, r);
  const auto& sd = taxonomy::subdimension(d);
  const auto& role = taxonomy::role(r);
  std::string text;
  text += "Write exactly one question about the attached image.\n";
  text += "It must be answerable from the image alone and grounded in what is visible.\n";
  text += "Subdimension [" + std::to_string(d) + "]: " + std::string(sd.name) + " (" +
          std::string(sd.group) + ")\n";
  text += "Role [" + std::to_string(r) + "]: " + std::string(role.name) + "\n";
  text += "Role focus: " + std::string(role.stress_description) + "\n";
  if (with_role_exemplars) {
    text += "Examples of this role:\n";
    for (auto ex : templates::role_exemplars(r)) text += "- " + std::string(ex) + "\n";
  }
  if (template_text) {
    text += "Template: " + *template_text + "\n";
    text += "Fill each braced slot with something visible in the image.\n";
  }
  text += "Output the bare question only.";

  GeneratorPrompt p;
  p.system = std::string(kGeneratorSystem);
  p.text = std::move(text);
  p.image = image;
  p.prompt_hash = sha256_hex(p.system + "\x1f" + p.text + "\x1f" + image.image_id);
  return p;
}

std::optional<std::string> clean_question(std::string_view raw, std::string* why) {
  auto fail = [&](const char* reason) -> std::optional<std::string> {
    if (why != nullptr) *why = reason;
    return std::nullopt;
  };
  std::string s = trim(raw);
  for (bool stripped = true; stripped;) {
    stripped = false;
    for (const auto& [open, close] : kQuotes) {
      if (s.size() >= open.size() + close.size() && starts_with(s, open) && ends_with(s, close)) {
        s = trim(std::string_view(s).substr(open.size(), s.size() - open.size() - close.size()));
        stripped = true;
        break;
      }
    }
  }
  if (s.empty()) return fail("empty output");
  if (s.find('\n') != std::string::npos) return fail("multi-line output");

  int marks = 0;
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::string_view rest = std::string_view(s).substr(i);
    if (s[i] == '"') {
      quoted = !quoted;
    } else if (starts_with(rest, "\xE2\x80\x9C")) {
      quoted = true;
    } else if (starts_with(rest, "\xE2\x80\x9D")) {
      quoted = false;
    } else if (s[i] == '?' && !quoted) {
      ++marks;
    }
  }
  if (marks > 1) return fail("more than one question");
  return s;
}

gateway::ImagePayload PayloadCache::get(const std::string& image_id) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (auto it = cache_.find(image_id); it != cache_.end()) return it->second;
  }
  gateway::ImagePayload p;
  p.media_type = "image/x-portable-pixmap";
  p.base64 = base64_encode(images::encode_ppm(pool_.pixels(image_id)));
  p.image_id = image_id;
  std::lock_guard<std::mutex> lock(mu_);
  return cache_.emplace(image_id, std::move(p)).first->second;
}

json to_json(const Probe& p) {
  return {{"probe_id", p.probe_id},
          {"image_id", p.image_id},
          {"context_image_id", p.context_image_id},
          {"d", p.d},
          {"r", p.r},
          {"question", p.question},
          {"template_row", p.template_row},
          {"template_index", p.template_index},
          {"generator_endpoint", p.generator_endpoint},
          {"prompt_hash", p.prompt_hash},
          {"decoding", gateway::to_json(p.decoding)},
          {"created_at", p.created_at},
          {"iteration", p.iteration},
          {"scope", p.scope},
          {"perturbation", p.perturbation ? images::to_json(*p.perturbation) : json(nullptr)}};
}

Probe probe_from_json(const json& j) {
  Probe p;
  p.probe_id = j.at("probe_id").get<std::string>();
  p.image_id = j.at("image_id").get<std::string>();
  p.context_image_id = j.at("context_image_id").get<std::string>();
  p.d = j.at("d").get<int>();
  p.r = j.at("r").get<int>();
  p.question = j.at("question").get<std::string>();
  p.template_row = j.at("template_row").get<int>();
  p.template_index = j.at("template_index").get<int>();
  p.generator_endpoint = j.at("generator_endpoint").get<std::string>();
  p.prompt_hash = j.at("prompt_hash").get<std::string>();
  const json& dec = j.at("decoding");
  p.decoding.temperature = dec.at("temperature").get<double>();
  p.decoding.top_p = dec.at("top_p").get<double>();
  p.decoding.max_tokens = dec.at("max_tokens").get<int>();
  p.decoding.n_samples = dec.at("n_samples").get<int>();
  p.created_at = j.at("created_at").get<std::string>();
  p.iteration = j.at("iteration").get<int>();
  p.scope = j.at("scope").get<std::string>();
  p.perturbation = spec_from(j);
  return p;
}

json to_json(const TargetAnswer& a) {
  return {{"answer_id", a.answer_id},   {"probe_id", a.probe_id},
          {"target_endpoint", a.target_endpoint}, {"answer", a.answer},
          {"latency_ms", a.latency_ms}, {"iteration", a.iteration},
          {"scope", a.scope}};
}

TargetAnswer answer_from_json(const json& j) {
  TargetAnswer a;
  a.answer_id = j.at("answer_id").get<std::string>();
  a.probe_id = j.at("probe_id").get<std::string>();
  a.target_endpoint = j.at("target_endpoint").get<std::string>();
  a.answer = j.at("answer").get<std::string>();
  a.latency_ms = j.at("latency_ms").get<double>();
  a.iteration = j.at("iteration").get<int>();
  a.scope = j.at("scope").get<std::string>();
  return a;
}

std::string answer_id_for(const std::string& probe_id, const std::string& target) {
  return probe_id + ":" + target;
}

json set_record(const CandidateSet& s) {
  json ids = json::array();
  for (const auto& p : s.probes) ids.push_back(p.probe_id);
  return {{"set_id", s.set_id}, {"image_id", s.image_id}, {"d", s.d},
          {"iteration", s.iteration}, {"probe_ids", ids}, {"unpaired", s.unpaired}};
}

json to_json(const Failure& f) {
  return {{"stage", f.stage}, {"image_id", f.image_id}, {"d", f.d}, {"r", f.r},
          {"message", f.message}};
}

std::vector<std::string> select_images(const std::vector<images::ImageRef>& split, int budget,
                                       std::uint64_t seed, int iteration) {
  std::vector<std::size_t> idx(split.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (budget > 0 && static_cast<std::size_t>(budget) < split.size()) {
    Rng rng(SeedBuilder(seed).add("images").add(static_cast<std::uint64_t>(iteration)).seed());
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(budget));
    std::sort(idx.begin(), idx.end());
  }
  std::vector<std::string> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(split[i].id);
  return out;
}

PassResult generate_candidates(PassContext ctx, const std::vector<std::string>& image_ids,
                               const PolicyView& view, const PassConfig& cfg) {
  if (cfg.n_per_context < 2) throw std::invalid_argument("n_per_context must be at least 2");
  if (!ctx.gateway.has_endpoint(cfg.generator)) {
    throw std::invalid_argument("generator endpoint not registered: " + cfg.generator);
  }
  if (!ctx.gateway.has_endpoint(cfg.target)) {
    throw std::invalid_argument("target endpoint not registered: " + cfg.target);
  }
  std::set<std::string> known;
  for (const auto& ref : ctx.pool.images()) known.insert(ref.id);

  std::vector<Slot> slots;
  for (const auto& image : image_ids) {
    for (int d = 1; d <= taxonomy::kSubdimensionCount; ++d) {
      for (int j = 0; j < cfg.n_per_context; ++j) {
        slots.push_back(make_slot(ctx, known, "train", image, d, j, view, cfg));
      }
    }
  }

  PassResult result;
  auto probes = generate(ctx, slots, "train", cfg, result.failures);
  std::vector<const Probe*> live;
  std::vector<std::size_t> live_index;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (probes[i]) {
      live.push_back(&*probes[i]);
      live_index.push_back(i);
    }
  }
  auto answers = answer(ctx, live, cfg.target, cfg, result.failures);
  std::vector<std::optional<TargetAnswer>> by_slot(slots.size());
  for (std::size_t n = 0; n < live.size(); ++n) by_slot[live_index[n]] = std::move(answers[n]);

  // Persist in slot order, one candidate set per (image, d).
  const std::size_t per = static_cast<std::size_t>(cfg.n_per_context);
  for (std::size_t base = 0; base < slots.size(); base += per) {
    CandidateSet set;
    set.image_id = slots[base].context_image;
    set.d = slots[base].d;
    set.iteration = cfg.iteration;
    set.set_id = "set-i" + std::to_string(cfg.iteration) + "-" + short_id(set.image_id) + "-d" +
                 std::to_string(set.d);
    for (std::size_t i = base; i < base + per; ++i) {
      if (!probes[i] || !by_slot[i]) continue;
      probes[i]->created_at = ctx.store.now();
      ctx.store.append("probes", to_json(*probes[i]));
      ctx.store.append("answers", to_json(*by_slot[i]));
      set.probes.push_back(std::move(*probes[i]));
      set.answers.push_back(std::move(*by_slot[i]));
    }
    set.unpaired = set.probes.size() < 2;
    if (set.probes.empty()) continue;
    ctx.store.append("candidate_sets", set_record(set));
    result.sets.push_back(std::move(set));
  }
  log_failures(ctx.store, result.failures, 0, "train", cfg.iteration);
  return result;
}

EvalResult run_eval_pass(PassContext ctx, const std::vector<std::string>& image_ids,
                         const std::vector<std::string>& targets, const PolicyView& view,
                         const PassConfig& cfg) {
  if (targets.empty()) throw std::invalid_argument("eval pass needs at least one target");
  if (!ctx.gateway.has_endpoint(cfg.generator)) {
    throw std::invalid_argument("generator endpoint not registered: " + cfg.generator);
  }
  for (const auto& t : targets) {
    if (!ctx.gateway.has_endpoint(t)) throw std::invalid_argument("target endpoint not registered: " + t);
  }
  std::set<std::string> known;
  for (const auto& ref : ctx.pool.images()) known.insert(ref.id);

  std::vector<Slot> slots;
  for (const auto& image : image_ids) {
    for (int d = 1; d <= taxonomy::kSubdimensionCount; ++d) {
      slots.push_back(make_slot(ctx, known, cfg.eval_scope, image, d, 0, view, cfg));
    }
  }
  EvalResult result;
  auto probes = generate(ctx, slots, cfg.eval_scope, cfg, result.failures);
  for (auto& p : probes) {
    if (!p) continue;
    p->created_at = ctx.store.now();
    ctx.store.append("probes", to_json(*p));
    result.probes.push_back(std::move(*p));
  }
  std::vector<const Probe*> live;
  for (const auto& p : result.probes) live.push_back(&p);

  for (const auto& t : targets) {
    const std::size_t before = result.failures.size();
    auto answers = answer(ctx, live, t, cfg, result.failures);
    auto& bucket = result.answers[t];
    for (auto& a : answers) {
      if (!a) continue;
      ctx.store.append("answers", to_json(*a));
      bucket.push_back(std::move(*a));
    }
    if (result.failures.size() > before) result.incomplete.insert(t);
  }
  log_failures(ctx.store, result.failures, 0, cfg.eval_scope, cfg.iteration);
  return result;
}

}  // namespace vlfuzz::campaign
