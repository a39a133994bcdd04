#include "stainfuse/evaluation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include "stainfuse/csv.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/parallel.hpp"
#include "stainfuse/random.hpp"

namespace stainfuse {

void CohortPredictions::validate() const {
  std::set<std::string_view> ids;
  for (const CohortEntry& e : entries) {
    if (!ids.insert(e.slide_id).second) {
      throw ConfigError(fmt::format("cohort '{}': duplicate slide_id '{}'", cohort_id, e.slide_id));
    }
    if (!(e.score >= 0.0 && e.score <= 1.0)) {
      throw ConfigError(fmt::format("cohort '{}': score of '{}' outside [0, 1]", cohort_id, e.slide_id));
    }
  }
}

namespace {

struct Counts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

Counts count_classes(std::span<const CohortEntry> entries) {
  Counts c;
  for (const CohortEntry& e : entries) (e.label == BinaryLabel::Melanoma ? c.pos : c.neg)++;
  return c;
}

void require_both_classes(const Counts& c) {
  if (c.pos == 0 || c.neg == 0) {
    throw Error("AUROC undefined: cohort needs at least one melanoma and one nevus");
  }
}

// AUROC over (score, is_positive) pairs sorted ascending by score.
double auroc_sorted(std::span<const std::pair<double, bool>> sorted, std::size_t n_pos,
                    std::size_t n_neg) {
  // Sum over positives of (#neg below + 0.5 * #neg tied).
  double credit = 0.0;
  std::size_t neg_below = 0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    std::size_t pos_tied = 0, neg_tied = 0;
    while (j < sorted.size() && sorted[j].first == sorted[i].first) {
      (sorted[j].second ? pos_tied : neg_tied)++;
      ++j;
    }
    credit += static_cast<double>(pos_tied) *
              (static_cast<double>(neg_below) + 0.5 * static_cast<double>(neg_tied));
    neg_below += neg_tied;
    i = j;
  }
  return credit / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace

double auroc(std::span<const CohortEntry> entries) {
  const Counts c = count_classes(entries);
  require_both_classes(c);
  std::vector<std::pair<double, bool>> sorted;
  sorted.reserve(entries.size());
  for (const CohortEntry& e : entries) sorted.emplace_back(e.score, e.label == BinaryLabel::Melanoma);
  std::sort(sorted.begin(), sorted.end());
  return auroc_sorted(sorted, c.pos, c.neg);
}

std::vector<RocPoint> roc_curve(std::span<const CohortEntry> entries) {
  const Counts c = count_classes(entries);
  require_both_classes(c);
  std::vector<std::pair<double, bool>> sorted;
  for (const CohortEntry& e : entries) sorted.emplace_back(e.score, e.label == BinaryLabel::Melanoma);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  std::vector<RocPoint> curve{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < sorted.size()) {
    const double s = sorted[i].first;
    while (i < sorted.size() && sorted[i].first == s) {
      (sorted[i].second ? tp : fp)++;
      ++i;
    }
    curve.push_back({static_cast<double>(fp) / static_cast<double>(c.neg),
                     static_cast<double>(tp) / static_cast<double>(c.pos)});
  }
  return curve;
}

double trapezoid_area(std::span<const RocPoint> curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) * 0.5;
  }
  return area;
}

AurocInterval auroc_ci(const CohortPredictions& cohort, const BootstrapConfig& config,
                       unsigned workers) {
  config.validate();
  require_both_classes(count_classes(cohort.entries));

  std::vector<CohortEntry> canonical = cohort.entries;
  std::sort(canonical.begin(), canonical.end(),
            [](const CohortEntry& a, const CohortEntry& b) { return a.slide_id < b.slide_id; });
  const std::size_t n = canonical.size();

  std::vector<double> values(static_cast<std::size_t>(config.n_boot));
  std::vector<std::uint8_t> dropped(values.size(), 0);
  parallel_for(values.size(), workers, [&](std::size_t r) {
    Engine engine = make_engine(config.seed, 0, r);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::pair<double, bool>> sample(n);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const CohortEntry& e = canonical[pick(engine)];
      sample[i] = {e.score, e.label == BinaryLabel::Melanoma};
      pos += sample[i].second;
    }
    if (pos == 0 || pos == n) {
      dropped[r] = 1;
      return;
    }
    std::sort(sample.begin(), sample.end());
    values[r] = auroc_sorted(sample, pos, n - pos);
  });

  std::vector<double> kept;
  kept.reserve(values.size());
  for (std::size_t r = 0; r < values.size(); ++r) {
    if (!dropped[r]) kept.push_back(values[r]);
  }
  AurocInterval out;
  out.n_dropped = static_cast<int>(values.size() - kept.size());
  if (2 * static_cast<std::size_t>(out.n_dropped) > values.size()) {
    throw Error(fmt::format(
        "cohort '{}' too small/imbalanced for bootstrap: {} of {} replicates single-class",
        cohort.cohort_id, out.n_dropped, values.size()));
  }
  std::sort(kept.begin(), kept.end());
  out.low = quantile_linear(kept, config.alpha / 2.0);
  out.high = quantile_linear(kept, 1.0 - config.alpha / 2.0);
  return out;
}

RocResult evaluate_cohort(const CohortPredictions& cohort, const BootstrapConfig& config,
                          std::string model_id, unsigned workers) {
  cohort.validate();
  RocResult r;
  r.model_id = std::move(model_id);
  r.cohort_id = cohort.cohort_id;
  r.auroc = auroc(cohort);
  r.curve = roc_curve(cohort.entries);
  const AurocInterval ci = auroc_ci(cohort, config, workers);
  r.ci_low = ci.low;
  r.ci_high = ci.high;
  r.n = static_cast<int>(cohort.entries.size());
  r.n_boot = config.n_boot;
  r.seed = config.seed;
  r.n_dropped_replicates = ci.n_dropped;
  return r;
}

std::vector<double> threshold_candidates(std::span<const CohortEntry> entries) {
  std::vector<double> scores;
  for (const CohortEntry& e : entries) scores.push_back(e.score);
  std::sort(scores.begin(), scores.end());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());

  std::vector<double> candidates;
  // Sentinels stand in for -inf / +inf, clamped into (0, 1).
  candidates.push_back(1e-6);
  for (std::size_t i = 1; i < scores.size(); ++i) {
    candidates.push_back(0.5 * (scores[i - 1] + scores[i]));
  }
  candidates.push_back(1.0 - 1e-6);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  return candidates;
}

double youden_j(std::span<const CohortEntry> entries, double threshold) {
  const Counts c = count_classes(entries);
  require_both_classes(c);
  std::size_t tp = 0, fp = 0;
  for (const CohortEntry& e : entries) {
    if (e.score >= threshold) (e.label == BinaryLabel::Melanoma ? tp : fp)++;
  }
  return static_cast<double>(tp) / static_cast<double>(c.pos) -
         static_cast<double>(fp) / static_cast<double>(c.neg);
}

DecisionThreshold select_threshold(const CohortPredictions& cohort) {
  require_both_classes(count_classes(cohort.entries));
  DecisionThreshold best;
  best.source_cohort = cohort.cohort_id;
  bool first = true;
  for (double t : threshold_candidates(cohort.entries)) {
    const double j = youden_j(cohort.entries, t);
    if (first || j > best.youden_j) {
      best.value = t;
      best.youden_j = j;
      first = false;
    }
  }
  return best;
}

bool significance_vs_random(const RocResult& result) noexcept {
  return !(0.5 >= result.ci_low && 0.5 <= result.ci_high);
}

std::string format_cell(double auroc_value, double low, double high) {
  return fmt::format("{:.2f} [{:.2f};{:.2f}]", auroc_value, low, high);
}

std::string render_report_table(std::span<const RocResult> results,
                                std::span<const ReportRowSpec> rows,
                                std::span<const std::string> cohorts) {
  std::map<std::pair<std::string, std::string>, const RocResult*> index;
  for (const RocResult& r : results) index[{r.model_id, r.cohort_id}] = &r;

  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"Model"};
  for (const std::string& c : cohorts) header.push_back("AUROC (" + c + ")");
  cells.push_back(header);
  for (const ReportRowSpec& row : rows) {
    std::vector<std::string> line{row.display_name.empty() ? row.model_id : row.display_name};
    for (const std::string& c : cohorts) {
      const auto it = index.find({row.model_id, c});
      line.push_back(it == index.end()
                         ? std::string("-")
                         : format_cell(it->second->auroc, it->second->ci_low, it->second->ci_high));
    }
    cells.push_back(std::move(line));
  }

  // Width in code points so labels such as "µm/px" align.
  auto display_width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], display_width(line[i]));
  }
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      out += cells[r][i];
      if (i + 1 < cells[r].size()) out += std::string(widths[i] - display_width(cells[r][i]) + 2, ' ');
    }
    out += '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t w : widths) total += w + 2;
      out += std::string(total - 2, '-') + '\n';
    }
  }
  return out;
}

void write_report_csv(std::ostream& out, std::span<const RocResult> results) {
  out << kReportHeader << '\n';
  for (const RocResult& r : results) {
    out << r.model_id << ',' << r.cohort_id << ',' << csv::format_double(r.auroc) << ','
        << csv::format_double(r.ci_low) << ',' << csv::format_double(r.ci_high) << ',' << r.n
        << ',' << r.n_boot << ',' << r.seed << ','
        << (significance_vs_random(r) ? "true" : "false") << '\n';
  }
}

void write_roc_points_csv(std::ostream& out, std::span<const RocResult> results) {
  out << kRocPointsHeader << '\n';
  for (const RocResult& r : results) {
    for (const RocPoint& p : r.curve) {
      out << r.model_id << ',' << r.cohort_id << ',' << csv::format_double(p.fpr) << ','
          << csv::format_double(p.tpr) << '\n';
    }
  }
}

std::vector<ReportCsvRow> read_report_csv(std::istream& in) {
  csv::expect_header(in, kReportHeader, "report CSV");
  std::vector<ReportCsvRow> rows;
  std::string line;
  std::size_t row = 0;
  while (csv::read_line(in, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string what = fmt::format("report CSV row {}", row);
    const auto f = csv::split(line);
    if (f.size() != 9) throw ConfigError(what + ": expected 9 fields");
    ReportCsvRow r;
    r.model_id = f[0];
    r.cohort_id = f[1];
    r.auroc = csv::parse_double(f[2], what);
    r.ci_low = csv::parse_double(f[3], what);
    r.ci_high = csv::parse_double(f[4], what);
    r.n = static_cast<int>(csv::parse_int(f[5], what));
    r.n_boot = static_cast<int>(csv::parse_int(f[6], what));
    r.seed = std::stoull(f[7]);
    if (f[8] != "true" && f[8] != "false") throw ConfigError(what + ": significant must be true/false");
    r.significant = f[8] == "true";
    rows.push_back(std::move(r));
  }
  return rows;
}

CohortPredictions read_cohort_csv(std::istream& in, std::string cohort_id) {
  csv::expect_header(in, kCohortHeader, "cohort CSV");
  CohortPredictions cohort;
  cohort.cohort_id = std::move(cohort_id);
  std::string line;
  std::size_t row = 0;
  while (csv::read_line(in, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string what = fmt::format("cohort CSV row {}", row);
    const auto f = csv::split(line);
    if (f.size() != 3) throw ConfigError(what + ": expected 3 fields");
    CohortEntry e;
    e.slide_id = f[0];
    e.score = csv::parse_double(f[1], what);
    try {
      e.label = parse_binary_label(f[2]);
    } catch (const ConfigError& err) {
      throw ConfigError(what + ": " + err.what());
    }
    cohort.entries.push_back(std::move(e));
  }
  cohort.validate();
  return cohort;
}

CohortPredictions read_cohort_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open cohort predictions '" + path.string() + "'");
  return read_cohort_csv(in, path.stem().string());
}

void write_cohort_csv(std::ostream& out, const CohortPredictions& cohort) {
  out << kCohortHeader << '\n';
  for (const CohortEntry& e : cohort.entries) {
    out << e.slide_id << ',' << csv::format_double(e.score) << ',' << to_string(e.label) << '\n';
  }
}

}  // namespace stainfuse
