#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "demtg/data.hpp"
#include "demtg/metrics.hpp"
#include "demtg/model.hpp"
#include "demtg/task_spec.hpp"

namespace demtg {

struct BaselineScore {
  double score = 0.0;
  bool higher_better = true;
};

// Per-task metric accumulation over a dataset. Kept as one object per task so
// disjoint sample ranges can be evaluated separately and merged.
class TaskEvaluator {
 public:
  explicit TaskEvaluator(const TaskSpec& spec) : spec_(spec) {
    switch (spec.metric) {
      case MetricKind::kMiou:
        confusion_ = std::make_unique<ConfusionMatrix>(spec.out_channels);
        break;
      case MetricKind::kRmse:
      case MetricKind::kAErr:
      case MetricKind::kMErr:
        regression_ = std::make_unique<RegressionAccum>(spec.metric);
        break;
      case MetricKind::kOdsF:
      case MetricKind::kMaxF:
        fmeasure_ = std::make_unique<FMeasureAccum>();
        break;
    }
  }

  // prediction: raw head output [H,W,out_channels].
  void add(const Tensor& prediction, const Sample& sample) {
    const int h = prediction.dim(0), w = prediction.dim(1), ch = prediction.dim(2);
    switch (spec_.kind) {
      case TaskKind::kMulticlassSeg: {
        const auto& gt = sample.int_labels.at(spec_.name);
        std::vector<std::uint16_t> pred(static_cast<std::size_t>(h) * w, 0);
        for (int i = 0; i < h * w; ++i) {
          int best = 0;
          double bv = prediction[static_cast<long long>(i) * ch];
          for (int c = 1; c < ch; ++c) {
            const double v = prediction[static_cast<long long>(i) * ch + c];
            if (v > bv) {
              bv = v;
              best = c;
            }
          }
          pred[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(best);
        }
        confusion_->add_map(gt, pred, spec_.ignore_label);
        break;
      }
      case TaskKind::kBinaryMap: {
        const auto& gt = sample.int_labels.at(spec_.name);
        std::vector<double> prob(static_cast<std::size_t>(h) * w);
        for (int i = 0; i < h * w; ++i) {
          prob[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-prediction[i]));
        }
        fmeasure_->add_map(prob, gt);
        break;
      }
      case TaskKind::kRegression1: {
        const Tensor& gt = sample.real_labels.at(spec_.name);
        for (long long i = 0; i < prediction.size(); ++i) regression_->add(prediction[i], gt[i]);
        regression_->end_sample();
        break;
      }
      case TaskKind::kRegression3: {
        const Tensor& gt = sample.real_labels.at(spec_.name);
        for (int i = 0; i < h * w; ++i) {
          double pv[3], gv[3];
          for (int c = 0; c < 3; ++c) {
            pv[c] = prediction[static_cast<long long>(i) * 3 + c];
            gv[c] = gt[static_cast<long long>(i) * 3 + c];
          }
          regression_->add_vec(pv, gv);
        }
        regression_->end_sample();
        break;
      }
    }
  }

  void merge(const TaskEvaluator& o) {
    if (confusion_) confusion_->merge(*o.confusion_);
    if (regression_) regression_->merge(*o.regression_);
    if (fmeasure_) fmeasure_->merge(*o.fmeasure_);
  }

  double score() const {
    if (confusion_) return confusion_->miou();
    if (regression_) return regression_->value();
    return fmeasure_->best_f1();
  }

  const TaskSpec& spec() const { return spec_; }

 private:
  TaskSpec spec_;
  std::unique_ptr<ConfusionMatrix> confusion_;
  std::unique_ptr<RegressionAccum> regression_;
  std::unique_ptr<FMeasureAccum> fmeasure_;
};

inline MetricReport evaluate_model(Model& model, const Dataset& data,
                                   const std::vector<TaskSpec>& specs,
                                   const std::vector<BaselineScore>* baseline = nullptr) {
  if (specs.size() != model.config().task_out_channels.size()) {
    throw ContractError("evaluate: task specs do not match model heads");
  }
  std::vector<TaskEvaluator> evals;
  evals.reserve(specs.size());
  for (const TaskSpec& s : specs) evals.emplace_back(s);
  for (const Sample& sample : data.samples) {
    Tape tape;
    BoundParams bp(tape, model.params());
    std::vector<Tensor> preds = model.forward(bp, sample.image, Mode::kEval);
    for (std::size_t t = 0; t < specs.size(); ++t) evals[t].add(preds[t], sample);
  }
  MetricReport report;
  std::vector<double> scores;
  for (const TaskEvaluator& e : evals) {
    const double s = e.score();
    scores.push_back(s);
    report.entries.push_back({e.spec().name, metric_name(e.spec().metric), s});
  }
  if (baseline) {
    if (baseline->size() != specs.size()) {
      throw ContractError("baseline score count " + std::to_string(baseline->size()) +
                          " does not match task count " + std::to_string(specs.size()));
    }
    std::vector<double> single;
    std::vector<bool> dirs;
    for (const BaselineScore& b : *baseline) {
      single.push_back(b.score);
      dirs.push_back(b.higher_better);
    }
    report.delta_m = delta_m(scores, single, dirs);
  }
  return report;
}

}  // namespace demtg
