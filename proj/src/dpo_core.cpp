#include "vlfuzz/dpo_core.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "vlfuzz/taxonomy.hpp"
#include "vlfuzz/template_bank.hpp"
#include "vlfuzz/util.hpp"

namespace vlfuzz::dpo {
namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) {
  if (x > 0.0) {
    return x + std::log1p(std::exp(-x));
  }
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_index(const ToyPolicy& p, std::size_t row, std::size_t k) {
  if (row >= p.rows() || k >= p.width()) {
    throw std::out_of_range("template index (" + std::to_string(row) + ", " + std::to_string(k) +
                            ") outside policy shape " + std::to_string(p.rows()) + "x" +
                            std::to_string(p.width()));
  }
}

void check_shapes(const ToyPolicy& policy, const RefPolicy& ref) {
  if (policy.rows() != ref.policy().rows() || policy.width() != ref.policy().width()) {
    throw std::invalid_argument("policy and reference shapes differ");
  }
}

}  // namespace

std::string to_string(Granularity g) {
  return g == Granularity::SubdimensionRole ? "subdimension_role" : "subdimension";
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "subdimension_role") return Granularity::SubdimensionRole;
  if (s == "subdimension") return Granularity::Subdimension;
  throw std::invalid_argument("unknown policy granularity: " + s);
}

std::size_t TemplateLibrary::templates_per_role() const {
  return granularity == Granularity::SubdimensionRole ? width() : width() / taxonomy::kRoleCount;
}

std::size_t TemplateLibrary::row_for(int d, int r) const {
  taxonomy::require_context(d, r);
  if (granularity == Granularity::SubdimensionRole) {
    return static_cast<std::size_t>(taxonomy::context_index(d, r));
  }
  return static_cast<std::size_t>(d - 1);
}

std::size_t TemplateLibrary::column_for(int r, std::size_t k_in_role) const {
  if (granularity == Granularity::SubdimensionRole) {
    return k_in_role;
  }
  return static_cast<std::size_t>(r - 1) * templates_per_role() + k_in_role;
}

void TemplateLibrary::validate() const {
  if (templates.empty()) {
    throw std::invalid_argument("template library is empty");
  }
  if (context_labels.size() != templates.size() || template_roles.size() != templates.size()) {
    throw std::invalid_argument("template library rows disagree in length");
  }
  const std::size_t k = width();
  if (k < 2) {
    throw std::invalid_argument("every context needs at least 2 templates");
  }
  for (std::size_t row = 0; row < templates.size(); ++row) {
    if (templates[row].size() != k || template_roles[row].size() != k) {
      throw std::invalid_argument("context " + context_labels[row] + " has a different width");
    }
    std::set<std::string> seen(templates[row].begin(), templates[row].end());
    if (seen.size() != k) {
      throw std::invalid_argument("context " + context_labels[row] + " has duplicate templates");
    }
  }
}

TemplateLibrary make_template_library(Granularity g) {
  TemplateLibrary lib;
  lib.granularity = g;
  if (g == Granularity::SubdimensionRole) {
    for (const auto& c : taxonomy::enumerate_contexts()) {
      lib.context_labels.push_back(std::to_string(c.d) + "/" +
                                   std::string(taxonomy::role(c.r).name));
      lib.templates.push_back(templates::templates_for(c.d, c.r));
      lib.template_roles.emplace_back(templates::kPerRole, c.r);
    }
  } else {
    for (int d = 1; d <= taxonomy::kSubdimensionCount; ++d) {
      lib.context_labels.push_back(std::to_string(d));
      std::vector<std::string> row;
      std::vector<int> roles;
      for (int r = 1; r <= taxonomy::kRoleCount; ++r) {
        for (auto& t : templates::templates_for(d, r)) {
          row.push_back(std::move(t));
          roles.push_back(r);
        }
      }
      lib.templates.push_back(std::move(row));
      lib.template_roles.push_back(std::move(roles));
    }
  }
  lib.validate();
  return lib;
}

ToyPolicy::ToyPolicy(std::size_t rows, std::size_t width)
    : rows_(rows), width_(width), theta_(rows * width, 0.0) {}

ToyPolicy::ToyPolicy(std::size_t rows, std::size_t width, std::vector<double> theta)
    : rows_(rows), width_(width), theta_(std::move(theta)) {
  if (theta_.size() != rows_ * width_) {
    throw std::invalid_argument("theta size does not match policy shape");
  }
}

std::vector<double> ToyPolicy::log_probs(std::size_t row) const {
  check_index(*this, row, 0);
  const double* z = theta_.data() + row * width_;
  const double m = *std::max_element(z, z + width_);
  double s = 0.0;
  for (std::size_t k = 0; k < width_; ++k) s += std::exp(z[k] - m);
  const double lse = m + std::log(s);
  std::vector<double> out(width_);
  for (std::size_t k = 0; k < width_; ++k) out[k] = z[k] - lse;
  return out;
}

std::vector<double> ToyPolicy::probs(std::size_t row) const {
  auto lp = log_probs(row);
  for (auto& v : lp) v = std::exp(v);
  return lp;
}

double ToyPolicy::log_prob(std::size_t row, std::size_t k) const {
  check_index(*this, row, k);
  return log_probs(row)[k];
}

std::size_t ToyPolicy::sample(std::size_t row, std::uint64_t seed) const {
  Rng rng(seed);
  const auto p = probs(row);
  return rng.categorical(p);
}

void DpoConfig::validate() const {
  if (!(beta > 0.0)) throw std::invalid_argument("dpo.beta must be positive");
  if (!(lambda_kl >= 0.0)) throw std::invalid_argument("dpo.lambda_kl must be nonnegative");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("dpo.learning_rate must be positive");
  if (steps < 0) throw std::invalid_argument("dpo.steps must be nonnegative");
}

void SftConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("sft.learning_rate must be positive");
  if (steps < 0) throw std::invalid_argument("sft.steps must be nonnegative");
}

double sft_loss(const ToyPolicy& policy, std::span<const SftTarget> batch) {
  if (batch.empty()) {
    throw std::invalid_argument("sft batch is empty");
  }
  double total = 0.0;
  for (const auto& ex : batch) {
    check_index(policy, ex.row, ex.index);
    total -= policy.log_prob(ex.row, ex.index);
  }
  return total / static_cast<double>(batch.size());
}

std::vector<double> grad_sft(const ToyPolicy& policy, std::span<const SftTarget> batch) {
  if (batch.empty()) {
    throw std::invalid_argument("sft batch is empty");
  }
  std::vector<double> g(policy.theta().size(), 0.0);
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    check_index(policy, ex.row, ex.index);
    const auto p = policy.probs(ex.row);
    double* row = g.data() + ex.row * policy.width();
    for (std::size_t k = 0; k < p.size(); ++k) row[k] += w * p[k];
    row[ex.index] -= w;
  }
  return g;
}

double dpo_delta(const ToyPolicy& policy, const RefPolicy& ref, const PolicyPair& pair) {
  check_shapes(policy, ref);
  check_index(policy, pair.winner_row, pair.winner_index);
  check_index(policy, pair.loser_row, pair.loser_index);
  const auto& r = ref.policy();
  const double lhs = policy.log_prob(pair.winner_row, pair.winner_index) -
                     policy.log_prob(pair.loser_row, pair.loser_index);
  const double rhs = r.log_prob(pair.winner_row, pair.winner_index) -
                     r.log_prob(pair.loser_row, pair.loser_index);
  return lhs - rhs;
}

double dpo_delta(const ToyPolicy& policy, const RefPolicy& ref, std::size_t row,
                 std::size_t winner, std::size_t loser) {
  if (winner == loser) {
    throw std::invalid_argument("winner and loser must differ");
  }
  return dpo_delta(policy, ref, PolicyPair{row, winner, row, loser});
}

double kl_row(const ToyPolicy& policy, const RefPolicy& ref, std::size_t row) {
  check_shapes(policy, ref);
  const auto lp = policy.log_probs(row);
  const auto lq = ref.policy().log_probs(row);
  double kl = 0.0;
  for (std::size_t k = 0; k < lp.size(); ++k) {
    kl += std::exp(lp[k]) * (lp[k] - lq[k]);
  }
  // Exact zero when the distributions coincide; clamp rounding noise.
  return std::max(kl, 0.0);
}

std::vector<std::size_t> pair_rows(std::span<const PolicyPair> pairs) {
  std::set<std::size_t> rows;
  for (const auto& p : pairs) {
    rows.insert(p.winner_row);
    rows.insert(p.loser_row);
  }
  return {rows.begin(), rows.end()};
}

double dpo_loss(const ToyPolicy& policy, const RefPolicy& ref, std::span<const PolicyPair> pairs,
                const DpoConfig& cfg) {
  if (pairs.empty()) {
    throw std::invalid_argument("dpo loss needs at least one pair");
  }
  double pref = 0.0;
  for (const auto& p : pairs) {
    pref += softplus(-cfg.beta * dpo_delta(policy, ref, p));
  }
  pref /= static_cast<double>(pairs.size());
  if (cfg.lambda_kl == 0.0) {
    return pref;
  }
  const auto rows = pair_rows(pairs);
  double kl = 0.0;
  for (auto row : rows) kl += kl_row(policy, ref, row);
  return pref + cfg.lambda_kl * kl / static_cast<double>(rows.size());
}

std::vector<double> grad_dpo(const ToyPolicy& policy, const RefPolicy& ref,
                             std::span<const PolicyPair> pairs, const DpoConfig& cfg) {
  if (pairs.empty()) {
    throw std::invalid_argument("dpo gradient needs at least one pair");
  }
  const std::size_t w = policy.width();
  std::vector<double> g(policy.theta().size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  for (const auto& p : pairs) {
    const double delta = dpo_delta(policy, ref, p);
    // d/dDelta of softplus(-beta * Delta).
    const double coeff = -cfg.beta * sigmoid(-cfg.beta * delta) * inv_n;
    const auto pw = policy.probs(p.winner_row);
    const auto pl = policy.probs(p.loser_row);
    double* gw = g.data() + p.winner_row * w;
    double* gl = g.data() + p.loser_row * w;
    for (std::size_t k = 0; k < w; ++k) {
      gw[k] -= coeff * pw[k];
      gl[k] += coeff * pl[k];
    }
    gw[p.winner_index] += coeff;
    gl[p.loser_index] -= coeff;
  }
  if (cfg.lambda_kl != 0.0) {
    const auto rows = pair_rows(pairs);
    const double scale = cfg.lambda_kl / static_cast<double>(rows.size());
    for (auto row : rows) {
      const auto lp = policy.log_probs(row);
      const auto lq = ref.policy().log_probs(row);
      double kl = 0.0;
      for (std::size_t k = 0; k < w; ++k) kl += std::exp(lp[k]) * (lp[k] - lq[k]);
      double* gr = g.data() + row * w;
      for (std::size_t k = 0; k < w; ++k) {
        gr[k] += scale * std::exp(lp[k]) * (lp[k] - lq[k] - kl);
      }
    }
  }
  return g;
}

TrainResult optimize(const ToyPolicy& policy, const RefPolicy& ref,
                     std::span<const PolicyPair> pairs, const DpoConfig& cfg) {
  cfg.validate();
  check_shapes(policy, ref);
  TrainResult result{policy, {}};
  if (cfg.steps == 0) {
    return result;
  }
  result.losses.reserve(static_cast<std::size_t>(cfg.steps) + 1);
  const double initial = dpo_loss(result.policy, ref, pairs, cfg);
  result.losses.push_back(initial);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto g = grad_dpo(result.policy, ref, pairs, cfg);
    auto theta = result.policy.theta();
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= cfg.learning_rate * g[i];
    const double loss = dpo_loss(result.policy, ref, pairs, cfg);
    if (!std::isfinite(loss) || loss > 10.0 * initial) {
      std::ostringstream msg;
      msg << "dpo optimization diverged at step " << step + 1 << ": loss " << format_double(loss)
          << " vs initial " << format_double(initial) << " (learning_rate "
          << format_double(cfg.learning_rate) << ", beta " << format_double(cfg.beta) << ")";
      throw DivergenceError(msg.str());
    }
    result.losses.push_back(loss);
  }
  return result;
}

TrainResult fit_sft(const ToyPolicy& policy, std::span<const SftTarget> batch,
                    const SftConfig& cfg) {
  cfg.validate();
  TrainResult result{policy, {}};
  result.losses.push_back(sft_loss(result.policy, batch));
  for (int step = 0; step < cfg.steps; ++step) {
    const auto g = grad_sft(result.policy, batch);
    auto theta = result.policy.theta();
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= cfg.learning_rate * g[i];
    result.losses.push_back(sft_loss(result.policy, batch));
  }
  return result;
}

nlohmann::json snapshot_to_json(const std::string& snapshot_id, const std::string& parent_id,
                                const TemplateLibrary& library, const ToyPolicy& policy,
                                const nlohmann::json& config) {
  if (library.rows() != policy.rows() || library.width() != policy.width()) {
    throw std::invalid_argument("policy shape does not match its template library");
  }
  nlohmann::json j;
  j["format"] = "vlfuzz.policy";
  j["version"] = 1;
  j["snapshot_id"] = snapshot_id;
  j["parent_id"] = parent_id.empty() ? nlohmann::json(nullptr) : nlohmann::json(parent_id);
  j["granularity"] = to_string(library.granularity);
  j["rows"] = policy.rows();
  j["width"] = policy.width();
  j["context_labels"] = library.context_labels;
  j["templates"] = library.templates;
  j["template_roles"] = library.template_roles;
  j["theta"] = std::vector<double>(policy.theta().begin(), policy.theta().end());
  j["config"] = config;
  return j;
}

Snapshot snapshot_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "vlfuzz.policy" || j.value("version", 0) != 1) {
    throw std::invalid_argument("not a version-1 policy snapshot");
  }
  Snapshot s;
  s.snapshot_id = j.at("snapshot_id").get<std::string>();
  s.parent_id = j.at("parent_id").is_null() ? "" : j.at("parent_id").get<std::string>();
  s.library.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  s.library.context_labels = j.at("context_labels").get<std::vector<std::string>>();
  s.library.templates = j.at("templates").get<std::vector<std::vector<std::string>>>();
  s.library.template_roles = j.at("template_roles").get<std::vector<std::vector<int>>>();
  s.library.validate();
  s.policy = ToyPolicy(j.at("rows").get<std::size_t>(), j.at("width").get<std::size_t>(),
                       j.at("theta").get<std::vector<double>>());
  s.config = j.at("config");
  return s;
}

}  // namespace vlfuzz::dpo
