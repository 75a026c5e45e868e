#include "vlfuzz/store.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "vlfuzz/image_pool.hpp"
#include "vlfuzz/util.hpp"

namespace vlfuzz::store {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kManifest = "manifest.json";
constexpr const char* kFormat = "vlfuzz.run";

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path kind_path(const fs::path& dir, const std::string& kind) { return dir / (kind + ".jsonl"); }

void require_kind(const std::string& kind) {
  for (const auto& k : record_kinds()) {
    if (k == kind) return;
  }
  throw StoreError("unknown record kind: " + kind);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return {};
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct ParsedLine {
  int lineno;
  json record;
};

// Parses a record file; hash or syntax problems become violations.
std::vector<ParsedLine> scan(const fs::path& file, std::vector<Violation>* violations) {
  std::vector<ParsedLine> out;
  std::ifstream in(file, std::ios::binary);
  if (!in) return out;
  std::string line;
  int lineno = 0;
  const std::string name = file.filename().string();
  while (std::getline(in, line)) {
    ++lineno;
    if (line.size() < 66 || line[64] != ' ') {
      if (violations) violations->push_back({name, lineno, "malformed line envelope"});
      continue;
    }
    const std::string digest = line.substr(0, 64);
    const std::string body = line.substr(65);
    if (sha256_hex(body) != digest) {
      if (violations) violations->push_back({name, lineno, "checksum mismatch"});
      continue;
    }
    try {
      out.push_back({lineno, json::parse(body)});
    } catch (const json::parse_error& e) {
      if (violations) violations->push_back({name, lineno, std::string("unparseable record: ") + e.what()});
    }
  }
  return out;
}

std::string str_field(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) return {};
  return j[key].get<std::string>();
}

}  // namespace

const std::vector<std::string>& record_kinds() {
  static const std::vector<std::string> kinds{
      "images", "exchanges", "probes", "answers", "candidate_sets", "votes", "verdicts",
      "deferred", "sft", "pairs", "policies", "metrics", "curve", "events"};
  return kinds;
}

std::string format_violation(const Violation& v) {
  if (v.line > 0) return v.file + ":" + std::to_string(v.line) + ": " + v.message;
  return v.file + ": " + v.message;
}

std::string run_id_for(const json& config) {
  return "run-" + sha256_hex(config.dump()).substr(0, 16);
}

RunStore::RunStore(RunStore&& o) noexcept {
  std::lock_guard<std::mutex> lock(o.mu_);
  dir_ = std::move(o.dir_);
  run_id_ = std::move(o.run_id_);
  config_ = std::move(o.config_);
  config_dir_ = std::move(o.config_dir_);
  deterministic_ = o.deterministic_;
  clock_ = o.clock_;
  status_ = std::move(o.status_);
  created_at_ = std::move(o.created_at_);
  counts_ = std::move(o.counts_);
}

RunStore RunStore::create(const fs::path& dir, const json& config, const fs::path& config_dir,
                          bool deterministic_clock) {
  if (fs::exists(dir / kManifest)) {
    RunStore existing = open(dir);
    if (existing.config_ != config) {
      throw StoreError("run directory " + dir.string() + " holds a run with a different config");
    }
    {
      std::lock_guard<std::mutex> lock(existing.mu_);
      existing.status_ = "open";
      existing.write_manifest_locked();
    }
    return existing;
  }
  fs::create_directories(dir);
  RunStore s;
  s.dir_ = dir;
  s.config_ = config;
  s.run_id_ = run_id_for(config);
  s.config_dir_ = fs::absolute(config_dir).lexically_normal().string();
  s.deterministic_ = deterministic_clock;
  s.created_at_ = deterministic_clock ? "logical:0" : iso_now();
  for (const auto& k : record_kinds()) {
    std::ofstream(kind_path(dir, k), std::ios::app);
    s.counts_[k] = 0;
  }
  {
    std::lock_guard<std::mutex> lock(s.mu_);
    s.write_manifest_locked();
  }
  return s;
}

RunStore RunStore::open(const fs::path& dir) {
  const std::string text = read_text(dir / kManifest);
  if (text.empty()) throw StoreError("no run manifest in " + dir.string());
  json m;
  try {
    m = json::parse(text);
  } catch (const json::parse_error& e) {
    throw StoreError("corrupt manifest in " + dir.string() + ": " + e.what());
  }
  if (m.value("format", "") != kFormat) throw StoreError("not a run manifest: " + dir.string());
  RunStore s;
  s.dir_ = dir;
  s.run_id_ = m.at("run_id").get<std::string>();
  s.config_ = m.at("config");
  s.config_dir_ = m.at("config_dir").get<std::string>();
  s.deterministic_ = m.at("deterministic_clock").get<bool>();
  s.clock_ = m.at("clock").get<std::uint64_t>();
  s.status_ = m.at("status").get<std::string>();
  s.created_at_ = m.at("created_at").get<std::string>();
  s.load_counts();
  return s;
}

void RunStore::load_counts() {
  for (const auto& k : record_kinds()) {
    std::ifstream in(kind_path(dir_, k), std::ios::binary);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line)) ++n;
    counts_[k] = n;
  }
}

fs::path RunStore::config_dir() const { return config_dir_; }

bool RunStore::is_open() const {
  std::lock_guard<std::mutex> lock(mu_);
  return status_ != "closed";
}

std::string RunStore::status() const {
  std::lock_guard<std::mutex> lock(mu_);
  return status_;
}

void RunStore::write_manifest_locked() const {
  json files = json::object();
  for (const auto& k : record_kinds()) {
    files[k] = json{{"path", k + ".jsonl"}, {"records", counts_.at(k)}};
  }
  json m{{"format", kFormat},
         {"version", 1},
         {"run_id", run_id_},
         {"config", config_},
         {"config_dir", config_dir_},
         {"deterministic_clock", deterministic_},
         {"clock", clock_},
         {"status", status_},
         {"created_at", created_at_},
         {"files", files}};
  const fs::path tmp = dir_ / (std::string(kManifest) + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw StoreError("cannot write manifest in " + dir_.string());
    out << m.dump(2) << "\n";
  }
  fs::rename(tmp, dir_ / kManifest);
}

std::size_t RunStore::append(const std::string& kind, const json& record) {
  require_kind(kind);
  std::lock_guard<std::mutex> lock(mu_);
  if (status_ == "closed") throw StoreError("append to closed run " + run_id_);
  const std::string body = record.dump();
  const std::string line = sha256_hex(body) + " " + body + "\n";
  std::ofstream out(kind_path(dir_, kind), std::ios::binary | std::ios::app);
  if (!out) throw StoreError("cannot append to " + kind);
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.flush();
  if (!out) throw StoreError("short write to " + kind);
  return counts_[kind]++;
}

std::vector<json> RunStore::read_all(const std::string& kind) const {
  require_kind(kind);
  std::vector<Violation> v;
  auto lines = scan(kind_path(dir_, kind), &v);
  if (!v.empty()) throw StoreError(format_violation(v.front()));
  std::vector<json> out;
  out.reserve(lines.size());
  for (auto& l : lines) out.push_back(std::move(l.record));
  return out;
}

std::size_t RunStore::count(const std::string& kind) const {
  require_kind(kind);
  std::lock_guard<std::mutex> lock(mu_);
  return counts_.at(kind);
}

std::string RunStore::now() {
  std::lock_guard<std::mutex> lock(mu_);
  ++clock_;
  if (deterministic_) return "logical:" + std::to_string(clock_);
  return iso_now();
}

void RunStore::set_status(const std::string& status) {
  std::lock_guard<std::mutex> lock(mu_);
  status_ = status;
  write_manifest_locked();
}

void RunStore::close() { set_status("closed"); }

std::vector<Violation> RunStore::verify() const {
  std::vector<Violation> out;
  std::map<std::string, std::vector<ParsedLine>> recs;
  for (const auto& k : record_kinds()) {
    const fs::path p = kind_path(dir_, k);
    if (!fs::exists(p)) {
      out.push_back({k + ".jsonl", 0, "record file missing"});
      continue;
    }
    recs[k] = scan(p, &out);
  }

  auto ids = [&](const std::string& kind, const char* key) {
    std::set<std::string> s;
    for (const auto& l : recs[kind]) s.insert(str_field(l.record, key));
    return s;
  };
  const auto image_ids = ids("images", "id");
  const auto probe_ids = ids("probes", "probe_id");
  const auto answer_ids = ids("answers", "answer_id");
  const auto policy_ids = ids("policies", "snapshot_id");

  auto dangling = [&](const std::string& kind, int line, const std::string& what,
                      const std::string& id) {
    out.push_back({kind + ".jsonl", line, "dangling reference " + what + "=" + id});
  };

  for (const auto& l : recs["images"]) {
    const auto ref = images::image_ref_from_json(l.record);
    fs::path p = ref.path;
    if (p.is_relative()) p = (ref.parent_id ? dir_ : fs::path(config_dir_)) / p;
    if (ref.parent_id && image_ids.count(*ref.parent_id) == 0) {
      dangling("images", l.lineno, "parent_id", *ref.parent_id);
    }
    try {
      if (images::image_id(images::read_ppm(p)) != ref.id) {
        out.push_back({"images.jsonl", l.lineno, "image content does not match id " + ref.id});
      }
    } catch (const std::exception& e) {
      out.push_back({"images.jsonl", l.lineno, std::string("image unreadable: ") + e.what()});
    }
  }
  for (const auto& l : recs["probes"]) {
    for (const char* key : {"image_id", "context_image_id"}) {
      const std::string id = str_field(l.record, key);
      if (image_ids.count(id) == 0) dangling("probes", l.lineno, key, id);
    }
  }
  for (const auto& l : recs["answers"]) {
    const std::string id = str_field(l.record, "probe_id");
    if (probe_ids.count(id) == 0) dangling("answers", l.lineno, "probe_id", id);
  }
  for (const auto& l : recs["candidate_sets"]) {
    for (const auto& p : l.record.value("probe_ids", json::array())) {
      if (probe_ids.count(p.get<std::string>()) == 0) {
        dangling("candidate_sets", l.lineno, "probe_id", p.get<std::string>());
      }
    }
  }
  for (const char* kind : {"votes", "deferred"}) {
    for (const auto& l : recs[kind]) {
      const std::string id = str_field(l.record, "item_id");
      if (answer_ids.count(id) == 0) dangling(kind, l.lineno, "item_id", id);
    }
  }
  std::set<std::string> decided;
  for (const auto& l : recs["verdicts"]) {
    const std::string id = str_field(l.record, "item_id");
    if (answer_ids.count(id) == 0) dangling("verdicts", l.lineno, "item_id", id);
    if (!decided.insert(id).second) {
      out.push_back({"verdicts.jsonl", l.lineno, "second verdict for item " + id});
    }
  }
  for (const auto& l : recs["pairs"]) {
    for (const char* side : {"winner", "loser"}) {
      const std::string id = l.record.contains(side) ? str_field(l.record[side], "probe_id") : "";
      if (probe_ids.count(id) == 0) dangling("pairs", l.lineno, std::string(side) + ".probe_id", id);
    }
  }
  for (const auto& l : recs["policies"]) {
    const std::string parent = str_field(l.record, "parent_id");
    if (!parent.empty() && policy_ids.count(parent) == 0) {
      dangling("policies", l.lineno, "parent_id", parent);
    }
  }
  return out;
}

std::string RunStore::content_digest() const {
  std::string acc;
  for (const auto& k : record_kinds()) {
    acc += k + " " + sha256_hex(read_text(kind_path(dir_, k))) + "\n";
  }
  return sha256_hex(acc);
}

}  // namespace vlfuzz::store
