#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stainfuse/aggregation.hpp"

namespace stainfuse {

struct CohortEntry {
  std::string slide_id;
  double score = 0.0;
  BinaryLabel label = BinaryLabel::Nevus;
};

struct CohortPredictions {
  std::string cohort_id;
  std::vector<CohortEntry> entries;

  /// Throws on duplicate slide ids or scores outside [0, 1].
  void validate() const;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  bool operator==(const RocPoint&) const = default;
};

/// Mann-Whitney AUROC, ties credited one half. O(n log n).
/// Throws "AUROC undefined" unless both classes are present.
double auroc(std::span<const CohortEntry> entries);
inline double auroc(const CohortPredictions& cohort) { return auroc(cohort.entries); }

/// Threshold sweep from the highest score down, ties grouped. Starts at
/// (0,0), ends at (1,1).
std::vector<RocPoint> roc_curve(std::span<const CohortEntry> entries);

double trapezoid_area(std::span<const RocPoint> curve);

struct AurocInterval {
  double low = 0.0;
  double high = 0.0;
  int n_dropped = 0;
};

/// Percentile bootstrap over slides. Entries are put in slide_id order
/// before resampling so the interval does not depend on input order.
/// Single-class replicates are dropped and counted; more than half dropped
/// is an error.
AurocInterval auroc_ci(const CohortPredictions& cohort, const BootstrapConfig& config,
                       unsigned workers = 1);

struct RocResult {
  std::string model_id;
  std::string cohort_id;
  double auroc = 0.5;
  std::vector<RocPoint> curve;
  double ci_low = 0.0;
  double ci_high = 1.0;
  int n = 0;
  int n_boot = 0;
  std::uint64_t seed = 0;
  int n_dropped_replicates = 0;
};

RocResult evaluate_cohort(const CohortPredictions& cohort, const BootstrapConfig& config,
                          std::string model_id = {}, unsigned workers = 1);

struct DecisionThreshold {
  double value = 0.5;
  std::string method = "youden";
  std::string source_cohort;
  double youden_j = 0.0;
};

/// Candidate thresholds that select_threshold scans: the low sentinel,
/// midpoints between consecutive distinct scores, and the high sentinel.
std::vector<double> threshold_candidates(std::span<const CohortEntry> entries);

/// TPR - FPR when predicting melanoma for score >= threshold.
double youden_j(std::span<const CohortEntry> entries, double threshold);

/// Youden-optimal threshold; ties broken toward the smallest threshold.
DecisionThreshold select_threshold(const CohortPredictions& cohort);

/// True iff 0.5 lies outside [ci_low, ci_high].
bool significance_vs_random(const RocResult& result) noexcept;

/// "0.96 [0.94;0.99]"
std::string format_cell(double auroc, double low, double high);

/// Row of the summary table: internal model id and the label shown.
struct ReportRowSpec {
  std::string model_id;
  std::string display_name;
};

/// Fixed-width text table: one row per spec, one column per cohort. Missing
/// (model, cohort) pairs render as "-".
std::string render_report_table(std::span<const RocResult> results,
                                std::span<const ReportRowSpec> rows,
                                std::span<const std::string> cohorts);

inline constexpr std::string_view kReportHeader =
    "model_id,cohort_id,auroc,ci_low,ci_high,n,n_boot,seed,significant";
inline constexpr std::string_view kRocPointsHeader = "model_id,cohort_id,fpr,tpr";
inline constexpr std::string_view kCohortHeader = "slide_id,score,label";

void write_report_csv(std::ostream& out, std::span<const RocResult> results);
void write_roc_points_csv(std::ostream& out, std::span<const RocResult> results);

struct ReportCsvRow {
  std::string model_id;
  std::string cohort_id;
  double auroc = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n = 0;
  int n_boot = 0;
  std::uint64_t seed = 0;
  bool significant = false;
};
std::vector<ReportCsvRow> read_report_csv(std::istream& in);

CohortPredictions read_cohort_csv(std::istream& in, std::string cohort_id);
CohortPredictions read_cohort_csv(const std::filesystem::path& path);
void write_cohort_csv(std::ostream& out, const CohortPredictions& cohort);

}  // namespace stainfuse
