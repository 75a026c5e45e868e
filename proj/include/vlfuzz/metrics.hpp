#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace vlfuzz::metrics {

// Exact nonnegative fraction, kept in lowest terms.
struct Ratio {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Ratio make(std::int64_t num, std::int64_t den);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Ratio&, const Ratio&) = default;
};

class EmptyInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Fooling rate over answerable labels: #1 / #{0,1}. Labels of -1 are skipped.
Ratio compute_fr(std::span<const int> labels);
// Unanswerable rate over all labels: #-1 / #all.
Ratio compute_ur(std::span<const int> labels);
// Distinct ratio: mean over images of |uniq(Q_i)| / |Q_i|, with uniqueness
// by exact match after trimming and lowercasing.
Ratio compute_dr(const std::map<std::string, std::vector<std::string>>& questions_by_image);

std::string normalize_question(const std::string& q);

// One judged probe as seen by the aggregations below.
struct JudgedProbe {
  std::string probe_id;
  std::string image_id;  // context image (parent of any perturbed copy)
  int d = 0;
  int r = 0;
  std::string question;
  std::optional<int> label;  // absent while awaiting a human verdict
};

struct Cell {
  int n = 0;  // labeled probes in the cell
  int answerable = 0;
  int incorrect = 0;
  int unanswerable = 0;
  std::optional<double> fr;
  bool low_confidence = false;
};

struct AttributionTable {
  int min_count = 5;
  std::map<std::pair<int, int>, Cell> cells;  // keyed by (d, r), all 192 present
  std::map<int, Cell> by_subdimension;
  std::map<int, Cell> by_role;
};

AttributionTable attribute_failures(std::span<const JudgedProbe> probes, int min_count = 5);

struct MetricsReport {
  std::string target;
  int iteration = 0;
  std::string scope;  // "train" or "eval"
  std::optional<double> fr;
  double ur = 0.0;
  std::optional<double> dr;
  int n_probes = 0;
  int n_answerable = 0;
  int n_incorrect = 0;
  int n_unanswerable = 0;
  int n_pending = 0;
  std::map<int, Cell> per_subdimension;
  std::map<int, Cell> per_role;
};

MetricsReport compute_report(const std::string& target, int iteration, const std::string& scope,
                             std::span<const JudgedProbe> probes);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);
std::string render_table(std::span<const MetricsReport> reports);

struct IterationPoint {
  int iteration = 0;
  std::optional<double> target_fr;
  std::map<std::string, double> heldout_fr;
};

struct IterationCurve {
  std::vector<IterationPoint> points;
  std::optional<int> chosen;
};

// Iteration with the highest mean held-out FR; ties go to the earliest.
int select_checkpoint(const IterationCurve& curve);

nlohmann::json to_json(const IterationCurve& c);

}  // namespace vlfuzz::metrics
