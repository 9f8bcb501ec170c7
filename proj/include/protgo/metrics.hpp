#pragma once

// Evaluation: micro confusion counts, precision / recall / F1, subset and
// per-label accuracy, micro-averaged ROC, and accuracy by sequence length.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protgo/error.hpp"

namespace protgo {

using ScoreMatrix = std::vector<std::vector<double>>;
using TargetMatrix = std::vector<std::vector<std::uint8_t>>;

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionCounts&) const = default;
};

struct Prf1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

namespace detail {

inline void check_aligned(const ScoreMatrix& scores, const TargetMatrix& targets) {
  if (scores.size() != targets.size()) {
    throw ShapeError("score rows (" + std::to_string(scores.size()) + ") and target rows (" +
                     std::to_string(targets.size()) + ") differ");
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != targets[i].size()) {
      throw ShapeError("row " + std::to_string(i) + ": " + std::to_string(scores[i].size()) + " scores but " +
                       std::to_string(targets[i].size()) + " targets");
    }
  }
}

inline double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace detail

inline ConfusionCounts confusion(const ScoreMatrix& scores, const TargetMatrix& targets, double threshold) {
  detail::check_aligned(scores, targets);
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::size_t j = 0; j < scores[i].size(); ++j) {
      const bool pred = scores[i][j] >= threshold;
      const bool truth = targets[i][j] != 0;
      if (pred && truth) ++c.tp;
      else if (pred) ++c.fp;
      else if (truth) ++c.fn;
      else ++c.tn;
    }
  }
  return c;
}

// 0/0 anywhere evaluates to 0.
inline Prf1 prf1(const ConfusionCounts& c) {
  Prf1 r;
  r.precision = detail::ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fp));
  r.recall = detail::ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fn));
  r.f1 = detail::ratio(2.0 * r.precision * r.recall, r.precision + r.recall);
  return r;
}

// Fraction of rows whose thresholded vector equals the target vector exactly.
inline double subset_accuracy(const ScoreMatrix& scores, const TargetMatrix& targets, double threshold) {
  detail::check_aligned(scores, targets);
  if (scores.empty()) return 0.0;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool all = true;
    for (std::size_t j = 0; j < scores[i].size() && all; ++j) all = (scores[i][j] >= threshold) == (targets[i][j] != 0);
    exact += all;
  }
  return static_cast<double>(exact) / static_cast<double>(scores.size());
}

// Per-cell accuracy over all (sample, label) pairs.
inline double micro_accuracy(const ConfusionCounts& c) {
  return detail::ratio(static_cast<double>(c.tp + c.tn), static_cast<double>(c.total()));
}

// ---------------------------------------------------------------------------
// ROC.

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // +inf for the origin
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

// Every (sample, label) cell pooled; one curve point per distinct score,
// swept from high to low, equal scores entering together.
inline RocCurve micro_roc(const ScoreMatrix& scores, const TargetMatrix& targets) {
  detail::check_aligned(scores, targets);
  std::vector<std::pair<double, bool>> cells;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::size_t j = 0; j < scores[i].size(); ++j) cells.emplace_back(scores[i][j], targets[i][j] != 0);
  }
  const auto positives = static_cast<double>(std::count_if(cells.begin(), cells.end(), [](auto& c) { return c.second; }));
  const auto negatives = static_cast<double>(cells.size()) - positives;
  if (positives == 0.0 || negatives == 0.0) throw Error("ROC undefined: targets need both positive and negative cells");
  std::sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  RocCurve roc;
  roc.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < cells.size();) {
    const double s = cells[i].first;
    for (; i < cells.size() && cells[i].first == s; ++i) (cells[i].second ? tp : fp) += 1.0;
    const RocPoint next{fp / negatives, tp / positives, s};
    const auto& prev = roc.points.back();
    roc.auc += (next.fpr - prev.fpr) * (next.tpr + prev.tpr) / 2.0;
    roc.points.push_back(next);
  }
  return roc;
}

// ---------------------------------------------------------------------------
// Accuracy by sequence length.

struct LengthBucket {
  std::size_t lo = 0;
  std::optional<std::size_t> hi;  // exclusive; absent for the overflow bucket
  std::size_t count = 0;
  std::optional<double> accuracy;  // absent for empty buckets
};

struct LengthBucketReport {
  std::size_t bucket_width = 100;
  std::size_t max_length = 2000;
  std::vector<LengthBucket> buckets;
};

// Buckets [0,w), [w,2w), ... up to max_length, then [max_length, inf).
// `lengths` are original (pre-truncation) residue counts, aligned with the rows.
inline LengthBucketReport length_analysis(const std::vector<std::size_t>& lengths, const ScoreMatrix& scores,
                                          const TargetMatrix& targets, double threshold,
                                          std::size_t bucket_width = 100, std::size_t max_length = 2000) {
  detail::check_aligned(scores, targets);
  if (lengths.size() != scores.size()) {
    throw ShapeError(std::to_string(lengths.size()) + " lengths for " + std::to_string(scores.size()) + " score rows");
  }
  if (bucket_width == 0) throw Error("bucket width must be positive");
  LengthBucketReport r;
  r.bucket_width = bucket_width;
  r.max_length = max_length;
  for (std::size_t lo = 0; lo < max_length; lo += bucket_width) r.buckets.push_back({lo, std::min(lo + bucket_width, max_length), 0, {}});
  r.buckets.push_back({max_length, std::nullopt, 0, {}});

  std::vector<std::size_t> correct(r.buckets.size(), 0);
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const std::size_t b = lengths[i] >= max_length ? r.buckets.size() - 1 : lengths[i] / bucket_width;
    r.buckets[b].count += 1;
    bool all = true;
    for (std::size_t j = 0; j < scores[i].size() && all; ++j) all = (scores[i][j] >= threshold) == (targets[i][j] != 0);
    correct[b] += all;
  }
  for (std::size_t b = 0; b < r.buckets.size(); ++b) {
    if (r.buckets[b].count) r.buckets[b].accuracy = static_cast<double>(correct[b]) / static_cast<double>(r.buckets[b].count);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reports.

struct AspectEvaluation {
  std::string aspect;
  double threshold = 0.5;
  std::size_t samples = 0;
  std::size_t labels = 0;
  ConfusionCounts counts;
  double subset_accuracy = 0.0;
  double micro_accuracy = 0.0;
  Prf1 scores;
  std::optional<RocCurve> roc;  // absent when the targets make ROC undefined
  LengthBucketReport lengths;
};

inline AspectEvaluation evaluate_aspect(const std::string& aspect, const std::vector<std::size_t>& lengths,
                                        const ScoreMatrix& scores, const TargetMatrix& targets, double threshold,
                                        std::size_t bucket_width = 100) {
  if (scores.empty()) throw Error("empty test split for aspect " + aspect);
  AspectEvaluation e;
  e.aspect = aspect;
  e.threshold = threshold;
  e.samples = scores.size();
  e.labels = scores.front().size();
  e.counts = confusion(scores, targets, threshold);
  e.subset_accuracy = subset_accuracy(scores, targets, threshold);
  e.micro_accuracy = micro_accuracy(e.counts);
  e.scores = prf1(e.counts);
  if (e.counts.tp + e.counts.fn > 0 && e.counts.fp + e.counts.tn > 0) e.roc = micro_roc(scores, targets);
  e.lengths = length_analysis(lengths, scores, targets, threshold, bucket_width);
  return e;
}

inline nlohmann::json to_json(const AspectEvaluation& e) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& b : e.lengths.buckets) {
    buckets.push_back({{"lo", b.lo},
                       {"hi", b.hi ? nlohmann::json(*b.hi) : nlohmann::json()},
                       {"count", b.count},
                       {"accuracy", b.accuracy ? nlohmann::json(*b.accuracy) : nlohmann::json()}});
  }
  return {{"aspect", e.aspect},
          {"threshold", e.threshold},
          {"samples", e.samples},
          {"labels", e.labels},
          {"confusion", {{"tp", e.counts.tp}, {"fp", e.counts.fp}, {"fn", e.counts.fn}, {"tn", e.counts.tn}}},
          {"accuracy", e.subset_accuracy},
          {"micro_accuracy", e.micro_accuracy},
          {"precision", e.scores.precision},
          {"recall", e.scores.recall},
          {"f1", e.scores.f1},
          {"auc", e.roc ? nlohmann::json(e.roc->auc) : nlohmann::json()},
          {"length_buckets", buckets}};
}

namespace detail {

inline std::string fmt_g(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace detail

inline void write_roc_csv(const RocCurve& roc, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << "fpr,tpr,threshold\n";
  for (const auto& p : roc.points) out << detail::fmt_g(p.fpr) << ',' << detail::fmt_g(p.tpr) << ',' << detail::fmt_g(p.threshold) << '\n';
}

inline void write_sla_csv(const LengthBucketReport& r, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << "bucket_lo,bucket_hi,count,accuracy\n";
  for (const auto& b : r.buckets) {
    out << b.lo << ',' << (b.hi ? std::to_string(*b.hi) : "") << ',' << b.count << ','
        << (b.accuracy ? detail::fmt_g(*b.accuracy) : "") << '\n';
  }
}

// Aspect x {Accuracy, F1, Precision, Recall}, percentages for accuracy.
inline std::string format_table(const std::vector<AspectEvaluation>& evals) {
  std::string out = "Aspect  Accuracy      F1  Precision  Recall\n";
  char line[128];
  for (const auto& e : evals) {
    std::snprintf(line, sizeof line, "%-6s  %7.2f%%  %6.4f  %9.4f  %6.4f\n", e.aspect.c_str(), 100.0 * e.subset_accuracy,
                  e.scores.f1, e.scores.precision, e.scores.recall);
    out += line;
  }
  return out;
}

}  // namespace protgo
