#include "vlfuzz/metrics.hpp"

#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "vlfuzz/taxonomy.hpp"
#include "vlfuzz/util.hpp"

namespace vlfuzz::metrics {
namespace {

void check_label(int label) {
  if (label < -1 || label > 1) {
    throw std::invalid_argument("label out of range: " + std::to_string(label));
  }
}

void tally(Cell& c, int label) {
  ++c.n;
  if (label == -1) {
    ++c.unanswerable;
  } else {
    ++c.answerable;
    if (label == 1) ++c.incorrect;
  }
}

void finish(Cell& c, int min_count) {
  if (c.answerable > 0) {
    c.fr = static_cast<double>(c.incorrect) / static_cast<double>(c.answerable);
  }
  c.low_confidence = c.answerable < min_count;
}

nlohmann::json cell_json(const Cell& c) {
  nlohmann::json j{{"n", c.n},
                   {"answerable", c.answerable},
                   {"incorrect", c.incorrect},
                   {"unanswerable", c.unanswerable},
                   {"low_confidence", c.low_confidence}};
  j["fr"] = c.fr ? nlohmann::json(*c.fr) : nlohmann::json(nullptr);
  return j;
}

Cell cell_from_json(const nlohmann::json& j) {
  Cell c;
  c.n = j.at("n").get<int>();
  c.answerable = j.at("answerable").get<int>();
  c.incorrect = j.at("incorrect").get<int>();
  c.unanswerable = j.at("unanswerable").get<int>();
  c.low_confidence = j.at("low_confidence").get<bool>();
  if (!j.at("fr").is_null()) c.fr = j.at("fr").get<double>();
  return c;
}

std::string pct(const std::optional<double>& v) {
  if (!v) return "--";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << (*v * 100.0) << "%";
  return os.str();
}

}  // namespace

Ratio Ratio::make(std::int64_t num, std::int64_t den) {
  if (den <= 0 || num < 0) {
    throw std::invalid_argument("ratio requires num >= 0 and den > 0");
  }
  const auto g = std::gcd(num, den);
  return Ratio{num / g, den / g};
}

Ratio compute_fr(std::span<const int> labels) {
  std::int64_t answerable = 0;
  std::int64_t incorrect = 0;
  for (int l : labels) {
    check_label(l);
    if (l == -1) continue;
    ++answerable;
    if (l == 1) ++incorrect;
  }
  if (answerable == 0) {
    throw EmptyInputError("fooling rate is undefined without answerable probes");
  }
  return Ratio::make(incorrect, answerable);
}

Ratio compute_ur(std::span<const int> labels) {
  if (labels.empty()) {
    throw EmptyInputError("unanswerable rate is undefined without probes");
  }
  std::int64_t unanswerable = 0;
  for (int l : labels) {
    check_label(l);
    if (l == -1) ++unanswerable;
  }
  return Ratio::make(unanswerable, static_cast<std::int64_t>(labels.size()));
}

std::string normalize_question(const std::string& q) { return to_lower(trim(q)); }

Ratio compute_dr(const std::map<std::string, std::vector<std::string>>& questions_by_image) {
  if (questions_by_image.empty()) {
    throw EmptyInputError("distinct ratio is undefined without images");
  }
  Ratio sum{0, 1};
  for (const auto& [image, qs] : questions_by_image) {
    if (qs.empty()) {
      throw EmptyInputError("image " + image + " has no questions");
    }
    std::set<std::string> uniq;
    for (const auto& q : qs) uniq.insert(normalize_question(q));
    const auto u = static_cast<std::int64_t>(uniq.size());
    const auto n = static_cast<std::int64_t>(qs.size());
    const auto g = std::gcd(sum.den, n);
    sum = Ratio::make(sum.num * (n / g) + u * (sum.den / g), sum.den / g * n);
  }
  return Ratio::make(sum.num, sum.den * static_cast<std::int64_t>(questions_by_image.size()));
}

AttributionTable attribute_failures(std::span<const JudgedProbe> probes, int min_count) {
  AttributionTable t;
  t.min_count = min_count;
  for (const auto& c : taxonomy::enumerate_contexts()) t.cells[{c.d, c.r}] = Cell{};
  for (int d = 1; d <= taxonomy::kSubdimensionCount; ++d) t.by_subdimension[d] = Cell{};
  for (int r = 1; r <= taxonomy::kRoleCount; ++r) t.by_role[r] = Cell{};
  for (const auto& p : probes) {
    taxonomy::require_context(p.d, p.r);
    if (!p.label) continue;
    check_label(*p.label);
    tally(t.cells[{p.d, p.r}], *p.label);
    tally(t.by_subdimension[p.d], *p.label);
    tally(t.by_role[p.r], *p.label);
  }
  for (auto& [k, c] : t.cells) finish(c, min_count);
  for (auto& [k, c] : t.by_subdimension) finish(c, min_count);
  for (auto& [k, c] : t.by_role) finish(c, min_count);
  return t;
}

MetricsReport compute_report(const std::string& target, int iteration, const std::string& scope,
                             std::span<const JudgedProbe> probes) {
  MetricsReport r;
  r.target = target;
  r.iteration = iteration;
  r.scope = scope;
  std::vector<int> labels;
  std::map<std::string, std::vector<std::string>> by_image;
  for (const auto& p : probes) {
    if (!p.label) {
      ++r.n_pending;
      continue;
    }
    labels.push_back(*p.label);
    by_image[p.image_id].push_back(p.question);
  }
  r.n_probes = static_cast<int>(labels.size());
  for (int l : labels) {
    check_label(l);
    if (l == -1) {
      ++r.n_unanswerable;
    } else {
      ++r.n_answerable;
      if (l == 1) ++r.n_incorrect;
    }
  }
  if (r.n_answerable > 0) r.fr = compute_fr(labels).value();
  if (!labels.empty()) r.ur = compute_ur(labels).value();
  // DR is reported only when annotators-pass items exist.
  if (r.n_answerable > 0) r.dr = compute_dr(by_image).value();
  const auto table = attribute_failures(probes);
  r.per_subdimension = table.by_subdimension;
  r.per_role = table.by_role;
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["target"] = r.target;
  j["iteration"] = r.iteration;
  j["scope"] = r.scope;
  j["fr"] = r.fr ? nlohmann::json(*r.fr) : nlohmann::json(nullptr);
  j["ur"] = r.ur;
  j["dr"] = r.dr ? nlohmann::json(*r.dr) : nlohmann::json(nullptr);
  j["n_probes"] = r.n_probes;
  j["n_answerable"] = r.n_answerable;
  j["n_incorrect"] = r.n_incorrect;
  j["n_unanswerable"] = r.n_unanswerable;
  j["n_pending"] = r.n_pending;
  nlohmann::json sub = nlohmann::json::object();
  for (const auto& [d, c] : r.per_subdimension) sub[std::to_string(d)] = cell_json(c);
  nlohmann::json role = nlohmann::json::object();
  for (const auto& [k, c] : r.per_role) role[std::to_string(k)] = cell_json(c);
  j["per_subdimension"] = sub;
  j["per_role"] = role;
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.target = j.at("target").get<std::string>();
  r.iteration = j.at("iteration").get<int>();
  r.scope = j.at("scope").get<std::string>();
  if (!j.at("fr").is_null()) r.fr = j.at("fr").get<double>();
  r.ur = j.at("ur").get<double>();
  if (!j.at("dr").is_null()) r.dr = j.at("dr").get<double>();
  r.n_probes = j.at("n_probes").get<int>();
  r.n_answerable = j.at("n_answerable").get<int>();
  r.n_incorrect = j.at("n_incorrect").get<int>();
  r.n_unanswerable = j.at("n_unanswerable").get<int>();
  r.n_pending = j.at("n_pending").get<int>();
  for (const auto& [k, v] : j.at("per_subdimension").items()) {
    r.per_subdimension[std::stoi(k)] = cell_from_json(v);
  }
  for (const auto& [k, v] : j.at("per_role").items()) r.per_role[std::stoi(k)] = cell_from_json(v);
  return r;
}

std::string render_table(std::span<const MetricsReport> reports) {
  std::ostringstream os;
  os << std::left << std::setw(6) << "iter" << std::setw(10) << "scope" << std::setw(22) << "target"
     << std::setw(10) << "FR" << std::setw(10) << "UR" << std::setw(10) << "DR" << std::setw(8)
     << "probes" << "pending\n";
  for (const auto& r : reports) {
    os << std::left << std::setw(6) << r.iteration << std::setw(10) << r.scope << std::setw(22)
       << r.target << std::setw(10) << pct(r.fr) << std::setw(10)
       << pct(r.n_probes > 0 ? std::optional<double>(r.ur) : std::nullopt) << std::setw(10)
       << pct(r.dr) << std::setw(8) << r.n_probes << r.n_pending << "\n";
  }
  return os.str();
}

int select_checkpoint(const IterationCurve& curve) {
  std::optional<int> best;
  double best_mean = 0.0;
  for (const auto& p : curve.points) {
    if (p.heldout_fr.empty()) continue;
    double sum = 0.0;
    for (const auto& [name, fr] : p.heldout_fr) sum += fr;
    const double mean = sum / static_cast<double>(p.heldout_fr.size());
    if (!best || mean > best_mean) {
      best = p.iteration;
      best_mean = mean;
    }
  }
  if (!best) {
    throw EmptyInputError("iteration curve has no held-out results");
  }
  return *best;
}

nlohmann::json to_json(const IterationCurve& c) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : c.points) {
    nlohmann::json j;
    j["iteration"] = p.iteration;
    j["target_fr"] = p.target_fr ? nlohmann::json(*p.target_fr) : nlohmann::json(nullptr);
    j["heldout_fr"] = p.heldout_fr;
    points.push_back(j);
  }
  return nlohmann::json{{"points", points},
                        {"chosen", c.chosen ? nlohmann::json(*c.chosen) : nlohmann::json(nullptr)}};
}

}  // namespace vlfuzz::metrics
