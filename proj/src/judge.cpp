#include "vlfuzz/judge.hpp"

#include <algorithm>
#include <cmath>

#include "vlfuzz/util.hpp"

namespace vlfuzz::judge {
namespace {

using nlohmann::json;

std::string strip_spaces(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c != ' ' && c != '\t' && c != '\r') out += c;
  }
  return out;
}

std::optional<ParsedVote> parse_line(std::string_view raw) {
  const std::string line = to_lower(strip_spaces(raw));
  constexpr std::string_view kLabel = "label=";
  constexpr std::string_view kConf = "confidence=";
  if (line.rfind(kLabel, 0) != 0) return std::nullopt;
  const auto conf_at = line.find(kConf);
  if (conf_at == std::string::npos) return std::nullopt;
  const auto name = label_from_name(std::string_view(line).substr(kLabel.size(), conf_at - kLabel.size()));
  if (!name) return std::nullopt;
  const std::string num = line.substr(conf_at + kConf.size());
  if (num.empty() || num.find_first_not_of("0123456789.") != std::string::npos) return std::nullopt;
  double conf = 0.0;
  try {
    std::size_t used = 0;
    conf = std::stod(num, &used);
    if (used != num.size()) return std::nullopt;
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (!(conf >= 0.0 && conf <= 1.0)) return std::nullopt;
  return ParsedVote{*name, conf};
}

std::optional<int> modal_label(std::span<const JudgeVote> votes) {
  std::map<int, int> counts;
  for (const auto& v : votes) ++counts[v.label];
  int best = 0;
  std::optional<int> label;
  bool tie = false;
  for (const auto& [l, c] : counts) {
    if (c > best) {
      best = c;
      label = l;
      tie = false;
    } else if (c == best) {
      tie = true;
    }
  }
  if (tie) return std::nullopt;
  return label;
}

void tally(AgreementStratum& s, int label, const std::string& probe_id,
           const std::map<std::string, int>& ref) {
  auto it = ref.find(probe_id);
  if (it == ref.end()) {
    ++s.missing_reference;
    return;
  }
  ++s.compared;
  if (it->second == label) ++s.matched;
}

void finish(AgreementStratum& s) {
  if (s.compared > 0) s.agreement = static_cast<double>(s.matched) / s.compared;
}

}  // namespace

std::string label_name(int label) {
  switch (label) {
    case kUnanswerable: return "unanswerable";
    case kCorrect: return "correct";
    case kIncorrect: return "incorrect";
  }
  throw std::invalid_argument("label out of range: " + std::to_string(label));
}

std::optional<int> label_from_name(std::string_view name) {
  const std::string n = to_lower(trim(name));
  if (n == "unanswerable") return kUnanswerable;
  if (n == "correct") return kCorrect;
  if (n == "incorrect") return kIncorrect;
  return std::nullopt;
}

bool valid_label(int label) { return label >= -1 && label <= 1; }

std::string_view rubric_text() {
  return "If the question can be answered from the image alone, judge whether the target "
         "answer is right: label it correct or incorrect. If the image does not contain "
         "enough information to answer the question, label it unanswerable, whatever the "
         "target said.";
}

JudgePrompt build_judge_prompt(std::string_view question, std::string_view target_answer) {
  JudgePrompt p;
  p.system = "You grade answers of a vision-language model about the attached image.";
  std::string t;
  t += std::string(rubric_text()) + "\n\n";
  t += std::string(kQuestionHeading) + "\n" + std::string(kBlockOpen) + "\n";
  t += std::string(question) + "\n" + std::string(kBlockClose) + "\n";
  t += std::string(kAnswerHeading) + "\n" + std::string(kBlockOpen) + "\n";
  t += std::string(target_answer) + "\n" + std::string(kBlockClose) + "\n\n";
  t += "Reply with exactly one line and nothing else:\n";
  t += "LABEL=<unanswerable|correct|incorrect> CONFIDENCE=<0.00-1.00>\n";
  t += "CONFIDENCE is your probability that the label is right.";
  p.text = std::move(t);
  return p;
}

std::optional<ParsedVote> parse_vote(std::string_view text) {
  std::optional<ParsedVote> found;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    if (!trim(line).empty()) {
      auto v = parse_line(line);
      if (!v) return std::nullopt;
      if (found) return std::nullopt;
      found = v;
    }
    pos = end + 1;
  }
  return found;
}

json to_json(const JudgeVote& v) {
  return json{{"probe_id", v.probe_id},
              {"label", v.label},
              {"confidence", v.confidence},
              {"judge_endpoint", v.judge_endpoint},
              {"raw_payload_hash", v.raw_payload_hash}};
}

JudgeVote vote_from_json(const json& j) {
  JudgeVote v;
  v.probe_id = j.at("probe_id").get<std::string>();
  v.label = j.at("label").get<int>();
  v.confidence = j.at("confidence").get<double>();
  v.judge_endpoint = j.at("judge_endpoint").get<std::string>();
  v.raw_payload_hash = j.at("raw_payload_hash").get<std::string>();
  return v;
}

void GateConfig::validate() const {
  if (n_votes <= 0) throw std::invalid_argument("gate.n_votes must be positive");
  if (!(agreement_min > 0.0 && agreement_min <= 1.0)) {
    throw std::invalid_argument("gate.agreement_min must be in (0, 1]");
  }
  if (!(confidence_min >= 0.0 && confidence_min <= 1.0)) {
    throw std::invalid_argument("gate.confidence_min must be in [0, 1]");
  }
}

json to_json(const GateConfig& g) {
  return json{{"n_votes", g.n_votes},
              {"agreement_min", g.agreement_min},
              {"confidence_min", g.confidence_min}};
}

GateDecision gate(std::span<const JudgeVote> votes, const GateConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(votes.size()) != cfg.n_votes) {
    return {std::nullopt, "expected " + std::to_string(cfg.n_votes) + " parsed votes, got " +
                              std::to_string(votes.size())};
  }
  for (const auto& v : votes) {
    if (!valid_label(v.label)) return {std::nullopt, "vote label out of range"};
  }
  const auto m = modal_label(votes);
  if (!m) return {std::nullopt, "no unique modal label"};
  int count = 0;
  for (const auto& v : votes) {
    if (v.label != *m) continue;
    ++count;
    if (v.confidence < cfg.confidence_min) {
      return {std::nullopt, "a majority vote has confidence below threshold"};
    }
  }
  const double agreement = static_cast<double>(count) / static_cast<double>(cfg.n_votes);
  if (agreement < cfg.agreement_min) return {std::nullopt, "agreement below threshold"};
  return {*m, "accepted"};
}

json to_json(const Verdict& v) {
  json votes = json::array();
  for (const auto& x : v.votes) votes.push_back(to_json(x));
  return json{{"verdict_id", v.verdict_id},
              {"probe_id", v.probe_id},
              {"item_id", v.item_id},
              {"label", v.label},
              {"source", v.source},
              {"votes", votes},
              {"annotator_id", v.annotator_id},
              {"decided_at", v.decided_at}};
}

Verdict verdict_from_json(const json& j) {
  Verdict v;
  v.verdict_id = j.at("verdict_id").get<std::string>();
  v.probe_id = j.at("probe_id").get<std::string>();
  v.item_id = j.at("item_id").get<std::string>();
  v.label = j.at("label").get<int>();
  v.source = j.at("source").get<std::string>();
  for (const auto& x : j.at("votes")) v.votes.push_back(vote_from_json(x));
  v.annotator_id = j.at("annotator_id").get<std::string>();
  v.decided_at = j.at("decided_at").get<std::string>();
  return v;
}

json to_json(const DeferredItem& d, bool include_image) {
  json votes = json::array();
  for (const auto& x : d.votes) votes.push_back(to_json(x));
  json j{{"item_id", d.item_id},   {"probe_id", d.probe_id}, {"image_id", d.image_id},
         {"image_media_type", d.image_media_type},          {"question", d.question},
         {"answer", d.answer},     {"target", d.target},     {"note", d.note},
         {"votes", votes}};
  if (include_image) j["image_base64"] = d.image_base64;
  return j;
}

DeferredItem deferred_from_json(const json& j) {
  DeferredItem d;
  d.item_id = j.at("item_id").get<std::string>();
  d.probe_id = j.at("probe_id").get<std::string>();
  d.image_id = j.at("image_id").get<std::string>();
  d.image_media_type = j.at("image_media_type").get<std::string>();
  d.question = j.at("question").get<std::string>();
  d.answer = j.at("answer").get<std::string>();
  d.target = j.at("target").get<std::string>();
  d.note = j.at("note").get<std::string>();
  for (const auto& x : j.at("votes")) d.votes.push_back(vote_from_json(x));
  d.image_base64 = j.value("image_base64", std::string());
  return d;
}

std::string verdict_id_for(const std::string& item_id) { return "v:" + item_id; }

std::vector<JudgeOutcome> judge_answers(gateway::Gateway& gw, const std::string& judge_endpoint,
                                        std::span<const JudgeRequest> reqs, const GateConfig& cfg,
                                        int max_in_flight, const std::string& decided_at) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(cfg.n_votes);
  std::vector<gateway::ChatRequest> calls;
  calls.reserve(reqs.size() * n);
  for (const auto& r : reqs) {
    const JudgePrompt p = build_judge_prompt(r.question, r.answer);
    for (std::size_t k = 0; k < n; ++k) {
      gateway::ChatRequest c;
      c.endpoint = judge_endpoint;
      c.system = p.system;
      c.text_parts = {p.text};
      c.image = r.image;
      c.seed = SeedBuilder(r.seed).add(k).seed();
      c.sample_index = static_cast<int>(k);
      calls.push_back(std::move(c));
    }
  }
  const auto results = gw.complete_many(calls, max_in_flight);

  std::vector<JudgeOutcome> out;
  out.reserve(reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    const auto& r = reqs[i];
    std::vector<JudgeVote> votes;
    std::string note;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& res = results[i * n + k];
      if (const auto* err = std::get_if<gateway::GatewayError>(&res)) {
        note = "judge call failed: " + gateway::to_string(err->kind()) + ": " + err->what();
        continue;
      }
      const auto& resp = std::get<gateway::ChatResponse>(res);
      const auto parsed = parse_vote(resp.text);
      if (!parsed) {
        note = "unparseable judge output";
        continue;
      }
      votes.push_back(JudgeVote{r.probe_id, parsed->label, parsed->confidence, judge_endpoint,
                                resp.response_hash});
    }
    const GateDecision d = gate(votes, cfg);
    if (d.label) {
      Verdict v;
      v.verdict_id = verdict_id_for(r.item_id);
      v.probe_id = r.probe_id;
      v.item_id = r.item_id;
      v.label = *d.label;
      v.source = "machine_gate";
      v.votes = std::move(votes);
      v.decided_at = decided_at;
      out.emplace_back(std::move(v));
      continue;
    }
    DeferredItem item;
    item.item_id = r.item_id;
    item.probe_id = r.probe_id;
    item.image_id = r.image.image_id;
    item.image_media_type = r.image.media_type;
    item.image_base64 = r.image.base64;
    item.question = r.question;
    item.answer = r.answer;
    item.target = r.target;
    item.note = note.empty() ? d.reason : note + "; " + d.reason;
    item.votes = std::move(votes);
    out.emplace_back(std::move(item));
  }
  return out;
}

JudgeOutcome judge_answer(gateway::Gateway& gw, const std::string& judge_endpoint,
                          const JudgeRequest& req, const GateConfig& cfg, int max_in_flight,
                          const std::string& decided_at) {
  auto out = judge_answers(gw, judge_endpoint, std::span<const JudgeRequest>(&req, 1), cfg,
                           max_in_flight, decided_at);
  return std::move(out.front());
}

AnnotationQueue::AnnotationQueue(std::chrono::seconds lease)
    : lease_(lease),
      clock_([] { return std::chrono::steady_clock::now(); }),
      wall_([] { return std::string(); }) {}

void AnnotationQueue::set_clock(Clock c) {
  std::lock_guard<std::mutex> lock(mu_);
  clock_ = std::move(c);
}

void AnnotationQueue::set_wall_clock(WallClock c) {
  std::lock_guard<std::mutex> lock(mu_);
  wall_ = std::move(c);
}

void AnnotationQueue::set_on_decided(DecidedHook h) {
  std::lock_guard<std::mutex> lock(mu_);
  on_decided_ = std::move(h);
}

void AnnotationQueue::enqueue(DeferredItem item) {
  std::lock_guard<std::mutex> lock(mu_);
  const std::string id = item.item_id;
  if (entries_.count(id) > 0) return;
  order_.push_back(id);
  entries_.emplace(id, Entry{std::move(item), std::nullopt, {}, std::nullopt});
}

bool AnnotationQueue::lease_valid(const Entry& e, std::chrono::steady_clock::time_point now) const {
  return e.lessee.has_value() && now < e.lease_until;
}

std::optional<DeferredItem> AnnotationQueue::next_for(const std::string& annotator_id) {
  std::lock_guard<std::mutex> lock(mu_);
  const auto now = clock_();
  for (const auto& id : order_) {
    const Entry& e = entries_.at(id);
    if (!e.verdict && lease_valid(e, now) && *e.lessee == annotator_id) return e.item;
  }
  for (const auto& id : order_) {
    Entry& e = entries_.at(id);
    if (e.verdict || lease_valid(e, now)) continue;
    e.lessee = annotator_id;
    e.lease_until = now + lease_;
    return e.item;
  }
  return std::nullopt;
}

std::string AnnotationQueue::resolve_key(const std::string& key) const {
  if (entries_.count(key) > 0) return key;
  std::vector<std::string> matches;
  for (const auto& id : order_) {
    if (entries_.at(id).item.probe_id == key) matches.push_back(id);
  }
  if (matches.empty()) throw QueueError(QueueErrorKind::UnknownItem, "unknown item: " + key);
  if (matches.size() == 1) return matches.front();
  std::vector<std::string> open;
  for (const auto& id : matches) {
    if (!entries_.at(id).verdict) open.push_back(id);
  }
  if (open.size() == 1) return open.front();
  if (open.empty()) return matches.front();
  throw QueueError(QueueErrorKind::Ambiguous, "probe " + key + " has several open items; pass item_id");
}

Verdict AnnotationQueue::submit(const std::string& annotator_id, const std::string& item_key,
                                int label) {
  Verdict v;
  DecidedHook hook;
  {
    std::lock_guard<std::mutex> lock(mu_);
    const std::string id = resolve_key(item_key);
    Entry& e = entries_.at(id);
    if (e.verdict) throw QueueError(QueueErrorKind::AlreadyDecided, "item " + id + " is already decided");
    if (!valid_label(label)) {
      throw QueueError(QueueErrorKind::BadLabel, "label must be -1, 0 or 1");
    }
    const auto now = clock_();
    if (lease_valid(e, now) && *e.lessee != annotator_id) {
      throw QueueError(QueueErrorKind::LeaseConflict, "item " + id + " is leased to another annotator");
    }
    if (!lease_valid(e, now) || *e.lessee != annotator_id) {
      throw QueueError(QueueErrorKind::LeaseConflict,
                       "item " + id + " is not leased to " + annotator_id + " (lease missing or expired)");
    }
    v.verdict_id = verdict_id_for(id);
    v.probe_id = e.item.probe_id;
    v.item_id = id;
    v.label = label;
    v.source = "human";
    v.votes = e.item.votes;
    v.annotator_id = annotator_id;
    v.decided_at = wall_();
    e.verdict = v;
    e.lessee.reset();
    hook = on_decided_;
  }
  if (hook) hook(v);
  return v;
}

QueueStats AnnotationQueue::stats() const {
  std::lock_guard<std::mutex> lock(mu_);
  QueueStats s;
  const auto now = clock_();
  for (const auto& id : order_) {
    const Entry& e = entries_.at(id);
    ++s.total;
    if (e.verdict) {
      ++s.decided;
    } else if (lease_valid(e, now)) {
      ++s.leased;
    } else {
      ++s.pending;
    }
  }
  return s;
}

bool AnnotationQueue::drained() const {
  std::lock_guard<std::mutex> lock(mu_);
  for (const auto& [id, e] : entries_) {
    if (!e.verdict) return false;
  }
  return true;
}

std::vector<std::string> AnnotationQueue::undecided() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<std::string> out;
  for (const auto& id : order_) {
    if (!entries_.at(id).verdict) out.push_back(id);
  }
  return out;
}

std::optional<Verdict> AnnotationQueue::verdict_for(const std::string& item_id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = entries_.find(item_id);
  if (it == entries_.end()) return std::nullopt;
  return it->second.verdict;
}

AgreementReport judge_agreement(std::span<const Verdict> verdicts,
                                const std::map<std::string, int>& human_reference) {
  AgreementReport r;
  for (const auto& v : verdicts) {
    if (v.source == "machine_gate") {
      tally(r.high_confidence_accepted, v.label, v.probe_id, human_reference);
    } else {
      const auto m = modal_label(v.votes);
      if (!m) continue;
      tally(r.deferred_then_humaned, *m, v.probe_id, human_reference);
    }
  }
  finish(r.high_confidence_accepted);
  finish(r.deferred_then_humaned);
  return r;
}

}  // namespace vlfuzz::judge
