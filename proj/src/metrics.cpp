#include "ctcaps/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

#include "ctcaps/errors.hpp"
#include "ctcaps/util.hpp"

namespace ctcaps {
namespace {

constexpr double kZ95 = 1.959964;

void validate_pair(const std::vector<double>& scores, const std::vector<int>& truths) {
  if (scores.size() != truths.size())
    throw UsageError("got " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(truths.size()) + " truths");
  if (scores.empty()) throw UsageError("need at least one scored patient");
  for (double s : scores)
    if (!std::isfinite(s)) throw UsageError("scores must be finite");
  for (int t : truths)
    if (t != 0 && t != 1) throw UsageError("truth labels must be 0 or 1");
}

std::pair<int64_t, int64_t> class_counts(const std::vector<int>& truths) {
  int64_t pos = 0;
  for (int t : truths) pos += t;
  return {pos, static_cast<int64_t>(truths.size()) - pos};
}

MetricCi with_wilson(int64_t successes, int64_t n) {
  MetricCi m;
  if (n == 0) return m;
  m.defined = true;
  m.value = static_cast<double>(successes) / static_cast<double>(n);
  const Interval ci = wilson_ci(successes, n);
  m.lo = ci.lo;
  m.hi = ci.hi;
  return m;
}

void append_metric(std::string& out, const MetricCi& m) {
  if (!m.defined) {
    out += ",undefined,undefined,undefined";
    return;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), ",%.1f,%.1f,%.1f", m.value * 100.0, m.lo * 100.0,
                m.hi * 100.0);
  out += buf;
}

}  // namespace

ConfusionCounts confusion(const std::vector<int>& preds, const std::vector<int>& truths) {
  if (preds.size() != truths.size())
    throw UsageError("got " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(truths.size()) + " truths");
  if (preds.empty()) throw UsageError("need at least one prediction");
  ConfusionCounts c;
  for (size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], t = truths[i];
    if ((p != 0 && p != 1) || (t != 0 && t != 1))
      throw UsageError("labels must be 0 or 1");
    if (t == 1)
      (p == 1 ? c.tp : c.fn)++;
    else
      (p == 1 ? c.fp : c.tn)++;
  }
  return c;
}

PointMetrics point_metrics(const ConfusionCounts& c) {
  PointMetrics m;
  if (c.total() > 0)
    m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  if (c.tp + c.fn > 0)
    m.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0)
    m.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return m;
}

Interval wilson_ci(int64_t successes, int64_t n, double confidence) {
  if (n < 1) throw UsageError("wilson_ci needs at least one trial");
  if (successes < 0 || successes > n)
    throw UsageError("successes must lie in [0, n], got " + std::to_string(successes) + "/" +
                     std::to_string(n));
  if (confidence != 0.95)
    throw UsageError("only the 95% interval is supported (z is pinned)");
  const double z = kZ95;
  const double nn = static_cast<double>(n);
  const double z2 = z * z;
  // The boundary cases collapse to closed forms; computing them directly
  // keeps the endpoints exact instead of one rounding step away.
  if (successes == 0) return {0.0, z2 / (nn + z2)};
  if (successes == n) return {nn / (nn + z2), 1.0};
  const double p = static_cast<double>(successes) / nn;
  const double denom = 1.0 + z2 / nn;
  const double center = p + z2 / (2.0 * nn);
  const double spread = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn));
  Interval ci{(center - spread) / denom, (center + spread) / denom};
  ci.lo = std::clamp(ci.lo, 0.0, 1.0);
  ci.hi = std::clamp(ci.hi, 0.0, 1.0);
  return ci;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& truths) {
  validate_pair(scores, truths);
  const auto [pos, neg] = class_counts(truths);
  if (pos == 0 || neg == 0) throw UsageError("roc_auc needs both classes present");
  // Pair counts are exact in doubles far beyond any real cohort size, so
  // the quadratic Mann-Whitney form is both simple and deterministic.
  double concordant = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (truths[i] != 1) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (truths[j] != 0) continue;
      if (scores[i] > scores[j])
        concordant += 1.0;
      else if (scores[i] == scores[j])
        concordant += 0.5;
    }
  }
  return concordant / (static_cast<double>(pos) * static_cast<double>(neg));
}

std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<int>& truths) {
  validate_pair(scores, truths);
  const auto [pos, neg] = class_counts(truths);
  if (pos == 0 || neg == 0) throw UsageError("roc_points needs both classes present");
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> out;
  out.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    const double t = scores[order[i]];
    while (i < order.size() && scores[order[i]] == t) {
      (truths[order[i]] == 1 ? tp : fp)++;
      ++i;
    }
    out.push_back({t, static_cast<double>(fp) / static_cast<double>(neg),
                   static_cast<double>(tp) / static_cast<double>(pos)});
  }
  return out;
}

Interval auc_ci(double auc, int64_t n_pos, int64_t n_neg, double confidence) {
  if (!(auc >= 0.0 && auc <= 1.0))
    throw UsageError("auc must lie in [0, 1], got " + std::to_string(auc));
  if (n_pos < 1 || n_neg < 1) throw UsageError("auc_ci needs at least one of each class");
  if (confidence != 0.95)
    throw UsageError("only the 95% interval is supported (z is pinned)");
  const double a = auc;
  const double q1 = a / (2.0 - a);
  const double q2 = 2.0 * a * a / (1.0 + a);
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  const double var =
      (a * (1.0 - a) + (np - 1.0) * (q1 - a * a) + (nn - 1.0) * (q2 - a * a)) / (np * nn);
  const double se = std::sqrt(std::max(var, 0.0));
  return {std::clamp(a - kZ95 * se, 0.0, 1.0), std::clamp(a + kZ95 * se, 0.0, 1.0)};
}

const std::vector<double>& default_cutoffs() {
  static const std::vector<double> cutoffs{0.3, 0.4, 0.5, 0.6, 0.7};
  return cutoffs;
}

EvaluationReport cutoff_sweep(const std::vector<double>& scores, const std::vector<int>& truths,
                              const std::vector<double>& cutoffs) {
  validate_pair(scores, truths);
  if (cutoffs.empty()) throw UsageError("cutoff list is empty");
  const auto [pos, neg] = class_counts(truths);
  if (pos == 0 || neg == 0) throw UsageError("cutoff_sweep needs both classes present");
  EvaluationReport rep;
  std::vector<int> preds(scores.size());
  for (double cutoff : cutoffs) {
    for (size_t i = 0; i < scores.size(); ++i) preds[i] = scores[i] >= cutoff ? 1 : 0;
    CutoffRow row;
    row.cutoff = cutoff;
    row.counts = confusion(preds, truths);
    row.accuracy = with_wilson(row.counts.tp + row.counts.tn, row.counts.total());
    row.sensitivity = with_wilson(row.counts.tp, row.counts.tp + row.counts.fn);
    row.specificity = with_wilson(row.counts.tn, row.counts.tn + row.counts.fp);
    rep.rows.push_back(row);
  }
  const double auc = roc_auc(scores, truths);
  const Interval ci = auc_ci(auc, pos, neg);
  rep.auc = {true, auc, ci.lo, ci.hi};
  rep.roc = roc_points(scores, truths);
  return rep;
}

void write_report_csv(const EvaluationReport& report, const std::filesystem::path& path) {
  std::string out =
      "cutoff,accuracy,acc_lo,acc_hi,sensitivity,sens_lo,sens_hi,specificity,spec_lo,spec_hi\n";
  char buf[32];
  for (const CutoffRow& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%.10g", row.cutoff);
    out += buf;
    append_metric(out, row.accuracy);
    append_metric(out, row.sensitivity);
    append_metric(out, row.specificity);
    out += "\n";
  }
  util::write_file_atomic(path, out);
}

void write_auc_txt(const EvaluationReport& report, const std::filesystem::path& path) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "auc,lo,hi\n%.4f,%.4f,%.4f\n", report.auc.value,
                report.auc.lo, report.auc.hi);
  util::write_file_atomic(path, std::string(buf));
}

void write_roc_csv(const std::vector<RocPoint>& roc, const std::filesystem::path& path) {
  std::string out = "threshold,fpr,tpr\n";
  char buf[96];
  for (const RocPoint& p : roc) {
    if (std::isinf(p.threshold))
      std::snprintf(buf, sizeof(buf), "inf,%.9g,%.9g\n", p.fpr, p.tpr);
    else
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g\n", p.threshold, p.fpr, p.tpr);
    out += buf;
  }
  util::write_file_atomic(path, out);
}

}  // namespace ctcaps
