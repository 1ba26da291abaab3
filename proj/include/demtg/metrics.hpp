#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "demtg/common.hpp"
#include "demtg/task_spec.hpp"

namespace demtg {

// All accumulators support merge(): evaluating disjoint sample sets and
// merging equals sequential evaluation exactly.

// Confusion-matrix mIoU. Per-class IoU = TP/(TP+FP+FN) over the accumulated
// matrix, averaged over classes present in the ground truth.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int k) : k_(k), m_(static_cast<std::size_t>(k) * k, 0) {}

  void add(int gt, int pred) {
    if (gt < 0 || gt >= k_ || pred < 0 || pred >= k_) return;  // out of range: skip
    m_[static_cast<std::size_t>(gt) * k_ + pred]++;
  }

  void add_map(const std::vector<std::uint16_t>& gt, const std::vector<std::uint16_t>& pred,
               int ignore_label = -1) {
    if (gt.size() != pred.size()) throw ContractError("confusion: map size mismatch");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (static_cast<int>(gt[i]) == ignore_label) continue;
      add(gt[i], pred[i]);
    }
  }

  void merge(const ConfusionMatrix& o) {
    if (o.k_ != k_) throw ContractError("confusion: class count mismatch");
    for (std::size_t i = 0; i < m_.size(); ++i) m_[i] += o.m_[i];
  }

  double miou() const {
    double total = 0.0;
    int present = 0;
    for (int c = 0; c < k_; ++c) {
      long long tp = m_[static_cast<std::size_t>(c) * k_ + c];
      long long fn = 0, fp = 0;
      for (int j = 0; j < k_; ++j) {
        if (j != c) {
          fn += m_[static_cast<std::size_t>(c) * k_ + j];
          fp += m_[static_cast<std::size_t>(j) * k_ + c];
        }
      }
      if (tp + fn == 0) continue;  // class absent from gt
      present++;
      total += static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    }
    return present == 0 ? 0.0 : total / present;
  }

 private:
  int k_;
  std::vector<long long> m_;
};

// rmse / aErr over scalars, mErr (mean angular error in degrees) over
// 3-vectors; zero-norm vectors are excluded from the mErr mean. Partial sums
// are kept per sample (end_sample seals one) and value() folds them in
// order, so merging disjoint sample ranges reproduces sequential evaluation
// bit for bit despite non-associative float addition.
class RegressionAccum {
 public:
  explicit RegressionAccum(MetricKind kind) : kind_(kind) {}

  void add(double pred, double gt) {
    if (kind_ == MetricKind::kMErr) throw ContractError("mErr needs add_vec");
    const double d = pred - gt;
    cur_sum_ += kind_ == MetricKind::kRmse ? d * d : std::fabs(d);
    cur_n_++;
  }

  void add_vec(const double* pred, const double* gt) {
    if (kind_ != MetricKind::kMErr) throw ContractError("add_vec is for mErr");
    const double np = std::sqrt(pred[0] * pred[0] + pred[1] * pred[1] + pred[2] * pred[2]);
    const double ng = std::sqrt(gt[0] * gt[0] + gt[1] * gt[1] + gt[2] * gt[2]);
    if (np == 0.0 || ng == 0.0) return;
    double dot = (pred[0] * gt[0] + pred[1] * gt[1] + pred[2] * gt[2]) / (np * ng);
    dot = std::min(1.0, std::max(-1.0, dot));
    cur_sum_ += std::acos(dot) * 57.29577951308232;
    cur_n_++;
  }

  void end_sample() {
    sample_sums_.push_back(cur_sum_);
    sample_counts_.push_back(cur_n_);
    cur_sum_ = 0.0;
    cur_n_ = 0;
  }

  void merge(const RegressionAccum& o) {
    if (o.kind_ != kind_) throw ContractError("regression accum kind mismatch");
    if (cur_n_ != 0 || o.cur_n_ != 0) throw ContractError("merge requires sealed samples");
    sample_sums_.insert(sample_sums_.end(), o.sample_sums_.begin(), o.sample_sums_.end());
    sample_counts_.insert(sample_counts_.end(), o.sample_counts_.begin(), o.sample_counts_.end());
  }

  double value() const {
    double sum = cur_sum_;
    long long n = cur_n_;
    for (std::size_t i = 0; i < sample_sums_.size(); ++i) {
      sum += sample_sums_[i];
      n += sample_counts_[i];
    }
    if (n == 0) throw DegenerateError("regression metric over empty set");
    const double m = sum / static_cast<double>(n);
    return kind_ == MetricKind::kRmse ? std::sqrt(m) : m;
  }

 private:
  MetricKind kind_;
  std::vector<double> sample_sums_;
  std::vector<long long> sample_counts_;
  double cur_sum_ = 0.0;
  long long cur_n_ = 0;
};

// Dataset-level F-measure over a sweep of 255 uniform thresholds t_i = i/256.
// A pixel counts positive when prob >= t. odsF-simplified and maxF share the
// sweep; both report the best dataset-level F1 (F1 = 0 when P = R = 0).
class FMeasureAccum {
 public:
  static constexpr int kThresholds = 255;

  FMeasureAccum() : tp_(kThresholds, 0), fp_(kThresholds, 0), fn_(kThresholds, 0) {}

  static double threshold(int i) { return (i + 1) / 256.0; }

  void add(double prob, bool positive) {
    if (prob < 0.0 || prob > 1.0) {
      throw DataError("f_measure probability outside [0,1]: " + std::to_string(prob));
    }
    for (int i = 0; i < kThresholds; ++i) {
      const bool pred = prob >= threshold(i);
      if (pred && positive) tp_[static_cast<std::size_t>(i)]++;
      else if (pred && !positive) fp_[static_cast<std::size_t>(i)]++;
      else if (!pred && positive) fn_[static_cast<std::size_t>(i)]++;
    }
  }

  void add_map(const std::vector<double>& prob, const std::vector<std::uint16_t>& gt) {
    if (prob.size() != gt.size()) throw ContractError("f_measure: map size mismatch");
    for (std::size_t i = 0; i < prob.size(); ++i) add(prob[i], gt[i] != 0);
  }

  void merge(const FMeasureAccum& o) {
    for (int i = 0; i < kThresholds; ++i) {
      tp_[static_cast<std::size_t>(i)] += o.tp_[static_cast<std::size_t>(i)];
      fp_[static_cast<std::size_t>(i)] += o.fp_[static_cast<std::size_t>(i)];
      fn_[static_cast<std::size_t>(i)] += o.fn_[static_cast<std::size_t>(i)];
    }
  }

  double best_f1() const {
    double best = 0.0;
    for (int i = 0; i < kThresholds; ++i) {
      const double tp = static_cast<double>(tp_[static_cast<std::size_t>(i)]);
      const double fp = static_cast<double>(fp_[static_cast<std::size_t>(i)]);
      const double fn = static_cast<double>(fn_[static_cast<std::size_t>(i)]);
      const double denom = 2.0 * tp + fp + fn;
      const double f1 = denom == 0.0 ? 0.0 : 2.0 * tp / denom;
      best = std::max(best, f1);
    }
    return best;
  }

 private:
  std::vector<long long> tp_, fp_, fn_;
};

// Average per-task performance change vs single-task baselines, in percent:
// mean over tasks of (F_m - F_s)/F_s * 100, sign-flipped for lower-is-better
// metrics so improvement is always positive.
inline double delta_m(const std::vector<double>& multi, const std::vector<double>& single,
                      const std::vector<bool>& higher_better) {
  if (multi.size() != single.size() || multi.size() != higher_better.size() || multi.empty()) {
    throw ContractError("delta_m: mismatched score vectors");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < multi.size(); ++i) {
    if (single[i] == 0.0) throw DataError("delta_m: single-task score is zero at index " + std::to_string(i));
    double term = (multi[i] - single[i]) / single[i] * 100.0;
    if (!higher_better[i]) term = -term;
    acc += term;
  }
  return acc / static_cast<double>(multi.size());
}

struct MetricReport {
  struct Entry {
    std::string task;
    std::string metric;
    double score;
  };
  std::vector<Entry> entries;
  std::optional<double> delta_m;

  // Fixed-schema JSON with 4-decimal scores.
  std::string to_json() const {
    std::string out = "{\n  \"tasks\": [\n";
    char buf[128];
    for (std::size_t i = 0; i < entries.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "    {\"name\": \"%s\", \"metric\": \"%s\", \"score\": %.4f}%s\n",
                    entries[i].task.c_str(), entries[i].metric.c_str(), entries[i].score,
                    i + 1 < entries.size() ? "," : "");
      out += buf;
    }
    out += "  ]";
    if (delta_m.has_value()) {
      std::snprintf(buf, sizeof(buf), ",\n  \"delta_m\": %.4f", *delta_m);
      out += buf;
    }
    out += "\n}\n";
    return out;
  }
};

}  // namespace demtg
