#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

// Patient-level evaluation: confusion counts, Wilson score intervals,
// Mann-Whitney AUC with the Hanley-McNeil interval, and the cutoff sweep
// behind report.csv / auc.txt / roc.csv.

namespace ctcaps {

struct ConfusionCounts {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t tn = 0;
  int64_t fn = 0;
  int64_t total() const { return tp + fp + tn + fn; }
};

// preds and truths are 0/1 with class 1 positive.
ConfusionCounts confusion(const std::vector<int>& preds, const std::vector<int>& truths);

// Zero-denominator metrics come back disengaged, never as a silent 0.
struct PointMetrics {
  std::optional<double> accuracy;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
};

PointMetrics point_metrics(const ConfusionCounts& c);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Wilson score interval, z pinned to 1.959964; only confidence 0.95 is
// supported. successes == 0 or == n hit the closed-form boundary values
// exactly (lo = 0, hi = z^2/(n+z^2) and lo = n/(n+z^2), hi = 1).
Interval wilson_ci(int64_t successes, int64_t n, double confidence = 0.95);

// Mann-Whitney statistic: (concordant + 0.5 * tied) / (n_pos * n_neg).
double roc_auc(const std::vector<double>& scores, const std::vector<int>& truths);

struct RocPoint {
  double threshold = 0.0;  // +inf sentinel on the (0, 0) anchor
  double fpr = 0.0;
  double tpr = 0.0;
};

// One point per distinct score, descending, anchored at (0,0); the final
// point is (1,1). Trapezoidal area equals roc_auc.
std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<int>& truths);

// Hanley-McNeil interval around an AUC estimate, clamped to [0, 1].
Interval auc_ci(double auc, int64_t n_pos, int64_t n_neg, double confidence = 0.95);

struct MetricCi {
  bool defined = false;
  double value = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

struct CutoffRow {
  double cutoff = 0.0;
  ConfusionCounts counts;
  MetricCi accuracy;
  MetricCi sensitivity;
  MetricCi specificity;
};

struct EvaluationReport {
  std::vector<CutoffRow> rows;
  MetricCi auc;
  std::vector<RocPoint> roc;
};

const std::vector<double>& default_cutoffs();  // {0.3, 0.4, 0.5, 0.6, 0.7}

// Predicts positive at score >= cutoff, one row per cutoff, plus AUC.
EvaluationReport cutoff_sweep(const std::vector<double>& scores, const std::vector<int>& truths,
                              const std::vector<double>& cutoffs = default_cutoffs());

// report.csv: cutoff,accuracy,acc_lo,acc_hi,sensitivity,sens_lo,sens_hi,
// specificity,spec_lo,spec_hi with percentages to one decimal and
// "undefined" spelled out. auc.txt: auc,lo,hi. roc.csv: threshold,fpr,tpr.
void write_report_csv(const EvaluationReport& report, const std::filesystem::path& path);
void write_auc_txt(const EvaluationReport& report, const std::filesystem::path& path);
void write_roc_csv(const std::vector<RocPoint>& roc, const std::filesystem::path& path);

}  // namespace ctcaps
