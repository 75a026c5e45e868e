#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "vlfuzz/gateway.hpp"

namespace vlfuzz::judge {

inline constexpr int kUnanswerable = -1;
inline constexpr int kCorrect = 0;
inline constexpr int kIncorrect = 1;

std::string label_name(int label);                   // "unanswerable" | "correct" | "incorrect"
std::optional<int> label_from_name(std::string_view name);
bool valid_label(int label);

inline constexpr std::string_view kQuestionHeading = "Question:";
inline constexpr std::string_view kAnswerHeading = "Target answer:";
inline constexpr std::string_view kBlockOpen = "<<<";
inline constexpr std::string_view kBlockClose = ">>>";

// Rubric shown to human annotators and embedded in machine prompts.
std::string_view rubric_text();

struct JudgePrompt {
  std::string system;
  std::string text;
};

// Question and answer appear verbatim between <<< and >>> markers.
JudgePrompt build_judge_prompt(std::string_view question, std::string_view target_answer);

struct ParsedVote {
  int label = 0;
  double confidence = 0.0;
};

// Accepts exactly one "LABEL=<name> CONFIDENCE=<x>" line among the output
// lines; case-insensitive, tolerant of surrounding whitespace.
std::optional<ParsedVote> parse_vote(std::string_view text);

struct JudgeVote {
  std::string probe_id;
  int label = 0;
  double confidence = 0.0;
  std::string judge_endpoint;
  std::string raw_payload_hash;
};

nlohmann::json to_json(const JudgeVote& v);
JudgeVote vote_from_json(const nlohmann::json& j);

struct GateConfig {
  int n_votes = 5;
  double agreement_min = 0.80;
  double confidence_min = 0.90;

  void validate() const;
};

nlohmann::json to_json(const GateConfig& g);

struct GateDecision {
  std::optional<int> label;  // absent on defer
  std::string reason;
};

// Modal label m (ties defer) is accepted iff count(m)/n_votes >= agreement_min
// and every vote for m has confidence >= confidence_min. Fewer than n_votes
// parsed votes defers.
GateDecision gate(std::span<const JudgeVote> votes, const GateConfig& cfg);

struct Verdict {
  std::string verdict_id;
  std::string probe_id;
  std::string item_id;  // the judged answer
  int label = 0;
  std::string source;  // "machine_gate" | "human"
  std::vector<JudgeVote> votes;
  std::string annotator_id;
  std::string decided_at;
};

nlohmann::json to_json(const Verdict& v);
Verdict verdict_from_json(const nlohmann::json& j);

struct DeferredItem {
  std::string item_id;  // answer id; unique per (probe, target)
  std::string probe_id;
  std::string image_id;
  std::string image_media_type;
  std::string image_base64;
  std::string question;
  std::string answer;
  std::string target;
  std::string note;
  std::vector<JudgeVote> votes;
};

nlohmann::json to_json(const DeferredItem& d, bool include_image);
DeferredItem deferred_from_json(const nlohmann::json& j);

struct JudgeRequest {
  std::string item_id;
  std::string probe_id;
  std::string question;
  std::string answer;
  std::string target;
  gateway::ImagePayload image;
  std::uint64_t seed = 0;
};

using JudgeOutcome = std::variant<Verdict, DeferredItem>;

// Collects cfg.n_votes votes through the gateway and applies the gate.
// Endpoint failures and unparseable votes defer.
JudgeOutcome judge_answer(gateway::Gateway& gw, const std::string& judge_endpoint,
                          const JudgeRequest& req, const GateConfig& cfg, int max_in_flight,
                          const std::string& decided_at);

// Batch form; one committee round per request, results positional.
std::vector<JudgeOutcome> judge_answers(gateway::Gateway& gw, const std::string& judge_endpoint,
                                        std::span<const JudgeRequest> reqs, const GateConfig& cfg,
                                        int max_in_flight, const std::string& decided_at);

std::string verdict_id_for(const std::string& item_id);

enum class QueueErrorKind { UnknownItem, AlreadyDecided, LeaseConflict, BadLabel, Ambiguous };

class QueueError : public std::runtime_error {
 public:
  QueueError(QueueErrorKind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
  QueueErrorKind kind() const { return kind_; }

 private:
  QueueErrorKind kind_;
};

struct QueueStats {
  int pending = 0;  // waiting, not leased
  int leased = 0;
  int decided = 0;
  int total = 0;
};

// FIFO of deferred items with per-annotator leases.
class AnnotationQueue {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;
  using DecidedHook = std::function<void(const Verdict&)>;
  using WallClock = std::function<std::string()>;

  explicit AnnotationQueue(std::chrono::seconds lease = std::chrono::minutes(15));

  void set_clock(Clock c);
  void set_wall_clock(WallClock c);
  void set_on_decided(DecidedHook h);

  // Ignores items already present (same item_id).
  void enqueue(DeferredItem item);
  // The annotator's current lease if still valid, else the oldest free item.
  std::optional<DeferredItem> next_for(const std::string& annotator_id);
  // item_key is an item id or a probe id (when the probe has one open item).
  Verdict submit(const std::string& annotator_id, const std::string& item_key, int label);

  QueueStats stats() const;
  bool drained() const;
  std::vector<std::string> undecided() const;
  std::optional<Verdict> verdict_for(const std::string& item_id) const;

 private:
  struct Entry {
    DeferredItem item;
    std::optional<std::string> lessee;
    std::chrono::steady_clock::time_point lease_until{};
    std::optional<Verdict> verdict;
  };

  std::string resolve_key(const std::string& key) const;
  bool lease_valid(const Entry& e, std::chrono::steady_clock::time_point now) const;

  mutable std::mutex mu_;
  std::chrono::seconds lease_;
  Clock clock_;
  WallClock wall_;
  DecidedHook on_decided_;
  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
};

struct AgreementStratum {
  std::optional<double> agreement;  // absent on empty intersection
  int compared = 0;
  int matched = 0;
  int missing_reference = 0;
};

struct AgreementReport {
  AgreementStratum high_confidence_accepted;
  AgreementStratum deferred_then_humaned;
};

// Machine verdicts land in the first stratum; human verdicts in the second.
AgreementReport judge_agreement(std::span<const Verdict> verdicts,
                                const std::map<std::string, int>& human_reference);

}  // namespace vlfuzz::judge
