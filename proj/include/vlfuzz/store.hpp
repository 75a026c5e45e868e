#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

// Append-only run directory. Each record kind lives in <kind>.jsonl, one
// record per line as "<sha256 of json> <json>". manifest.json carries the
// frozen config and run metadata.
namespace vlfuzz::store {

const std::vector<std::string>& record_kinds();

struct Violation {
  std::string file;
  int line = 0;  // 1-based; 0 when not line-specific
  std::string message;
};

std::string format_violation(const Violation& v);

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// "run-" + 16 hex chars of the canonical config hash.
std::string run_id_for(const nlohmann::json& config);

class RunStore {
 public:
  // Creates the directory and manifest. An existing run with the same
  // config is reopened instead; a different config is an error.
  static RunStore create(const std::filesystem::path& dir, const nlohmann::json& config,
                         const std::filesystem::path& config_dir, bool deterministic_clock);
  static RunStore open(const std::filesystem::path& dir);

  RunStore(RunStore&& other) noexcept;
  RunStore(const RunStore&) = delete;
  RunStore& operator=(const RunStore&) = delete;

  const std::string& run_id() const { return run_id_; }
  const nlohmann::json& config() const { return config_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path config_dir() const;
  std::filesystem::path blob_dir() const { return dir_ / "blobs"; }
  bool is_open() const;
  std::string status() const;

  // Returns the 0-based line index of the new record.
  std::size_t append(const std::string& kind, const nlohmann::json& record);
  std::vector<nlohmann::json> read_all(const std::string& kind) const;
  std::size_t count(const std::string& kind) const;

  // Timestamp for records: ISO-8601 UTC, or "logical:<n>" in deterministic mode.
  std::string now();

  void set_status(const std::string& status);
  void close();

  std::vector<Violation> verify() const;
  // SHA-256 over the per-kind file hashes in kind order.
  std::string content_digest() const;

 private:
  RunStore() = default;
  void write_manifest_locked() const;
  void load_counts();

  std::filesystem::path dir_;
  std::string run_id_;
  nlohmann::json config_;
  std::string config_dir_;
  bool deterministic_ = true;
  std::uint64_t clock_ = 0;
  std::string status_ = "open";
  std::string created_at_;
  std::map<std::string, std::size_t> counts_;
  mutable std::mutex mu_;
};

}  // namespace vlfuzz::store
