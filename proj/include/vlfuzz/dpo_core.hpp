#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace vlfuzz::dpo {

// Which conditioning the toy policy uses: one row per (d, r) pair (192 rows)
// or one row per subdimension (24 rows, templates of all roles concatenated).
enum class Granularity { SubdimensionRole, Subdimension };

std::string to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

// Finite question space of the toy policy. Every row has the same width.
struct TemplateLibrary {
  Granularity granularity = Granularity::SubdimensionRole;
  std::vector<std::string> context_labels;          // one per row
  std::vector<std::vector<std::string>> templates;  // [row][k]
  std::vector<std::vector<int>> template_roles;     // role id of templates[row][k]

  std::size_t rows() const { return templates.size(); }
  std::size_t width() const { return templates.empty() ? 0 : templates.front().size(); }
  std::size_t row_for(int d, int r) const;
  // Index of the k-th template of role r within row_for(d, r).
  std::size_t column_for(int r, std::size_t k_in_role) const;
  std::size_t templates_per_role() const;

  // Every row has >= 2 distinct templates and widths agree.
  void validate() const;
};

// Library built from the shipped template bank.
TemplateLibrary make_template_library(Granularity g);

// Softmax policy over templates, one logit row per context.
class ToyPolicy {
 public:
  ToyPolicy() = default;
  ToyPolicy(std::size_t rows, std::size_t width);  // all-zero logits (uniform)
  ToyPolicy(std::size_t rows, std::size_t width, std::vector<double> theta);

  std::size_t rows() const { return rows_; }
  std::size_t width() const { return width_; }

  double logit(std::size_t row, std::size_t k) const { return theta_[row * width_ + k]; }
  double& logit(std::size_t row, std::size_t k) { return theta_[row * width_ + k]; }
  std::span<const double> theta() const { return theta_; }
  std::span<double> theta() { return theta_; }

  std::vector<double> probs(std::size_t row) const;
  std::vector<double> log_probs(std::size_t row) const;
  double log_prob(std::size_t row, std::size_t k) const;

  std::size_t sample(std::size_t row, std::uint64_t seed) const;

 private:
  std::size_t rows_ = 0;
  std::size_t width_ = 0;
  std::vector<double> theta_;
};

// Frozen reference copy; immutable after construction.
class RefPolicy {
 public:
  explicit RefPolicy(ToyPolicy p) : policy_(std::move(p)) {}
  const ToyPolicy& policy() const { return policy_; }

 private:
  ToyPolicy policy_;
};

struct SftTarget {
  std::size_t row;
  std::size_t index;
};

struct PolicyPair {
  std::size_t winner_row;
  std::size_t winner_index;
  std::size_t loser_row;
  std::size_t loser_index;
};

struct DpoConfig {
  double beta = 0.1;
  double lambda_kl = 0.01;
  double learning_rate = 0.05;
  int steps = 500;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct SftConfig {
  double learning_rate = 20.0;
  int steps = 60;
  void validate() const;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mean negative log-likelihood of the target templates.
double sft_loss(const ToyPolicy& policy, std::span<const SftTarget> batch);
std::vector<double> grad_sft(const ToyPolicy& policy, std::span<const SftTarget> batch);

// Log-ratio margin of the winner over the loser, relative to the reference.
double dpo_delta(const ToyPolicy& policy, const RefPolicy& ref, const PolicyPair& pair);
double dpo_delta(const ToyPolicy& policy, const RefPolicy& ref, std::size_t row,
                 std::size_t winner, std::size_t loser);

// Exact KL(policy(.|row) || ref(.|row)) over the finite support.
double kl_row(const ToyPolicy& policy, const RefPolicy& ref, std::size_t row);

// Distinct rows touched by the pairs, ascending.
std::vector<std::size_t> pair_rows(std::span<const PolicyPair> pairs);

double dpo_loss(const ToyPolicy& policy, const RefPolicy& ref, std::span<const PolicyPair> pairs,
                const DpoConfig& cfg);
std::vector<double> grad_dpo(const ToyPolicy& policy, const RefPolicy& ref,
                             std::span<const PolicyPair> pairs, const DpoConfig& cfg);

struct TrainResult {
  ToyPolicy policy;
  std::vector<double> losses;  // loss before each step, then the final loss
};

TrainResult optimize(const ToyPolicy& policy, const RefPolicy& ref,
                     std::span<const PolicyPair> pairs, const DpoConfig& cfg);
TrainResult fit_sft(const ToyPolicy& policy, std::span<const SftTarget> batch,
                    const SftConfig& cfg);

// Versioned snapshot record: labels, templates, logits, config, parent.
nlohmann::json snapshot_to_json(const std::string& snapshot_id, const std::string& parent_id,
                                const TemplateLibrary& library, const ToyPolicy& policy,
                                const nlohmann::json& config);
struct Snapshot {
  std::string snapshot_id;
  std::string parent_id;
  TemplateLibrary library;
  ToyPolicy policy;
  nlohmann::json config;
};
Snapshot snapshot_from_json(const nlohmann::json& j);

}  // namespace vlfuzz::dpo
