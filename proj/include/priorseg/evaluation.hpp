#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "priorseg/core.hpp"

namespace priorseg {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

struct DiceValue {
  double value = 0.0;
  /// The class is absent from both masks; value is 1 by convention.
  bool both_empty = false;
};

inline ConfusionCounts confusion(std::span<const std::uint8_t> pred,
                                 std::span<const std::uint8_t> truth, std::uint8_t cls) {
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls, t = truth[i] == cls;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  return c;
}

/// DSC = 2TP / (2TP + FP + FN).
inline DiceValue dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                      int class_id) {
  if (pred.size() != truth.size())
    throw Error("dice: prediction has " + std::to_string(pred.size()) + " elements, truth has " +
                std::to_string(truth.size()));
  if (class_id < 0 || class_id >= kNumClasses)
    throw Error("dice: class " + std::to_string(class_id) + " out of range");
  const auto c = confusion(pred, truth, static_cast<std::uint8_t>(class_id));
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return {1.0, true};
  return {2.0 * static_cast<double>(c.tp) / static_cast<double>(denom), false};
}

template <class A>
DiceValue dice(const A& pred, const A& truth, int class_id) {
  if (!pred.same_shape(truth)) throw Error("dice: prediction and truth shapes differ");
  return dice(std::span<const std::uint8_t>(pred.data), std::span<const std::uint8_t>(truth.data),
              class_id);
}

inline DiceValue dice(const LabelMap& pred, const LabelMap& truth, int class_id) {
  return dice(pred.array(), truth.array(), class_id);
}

/// Per-class DSC of one prediction, all six classes indexed by class id.
struct DiceScores {
  std::array<double, kNumClasses> value{};
  std::array<bool, kNumClasses> both_empty{};

  double operator[](Tissue t) const { return value[static_cast<std::size_t>(t)]; }
  /// Unweighted mean over the evaluated CSF/GM/WM classes.
  double evaluated_mean() const {
    double s = 0.0;
    for (auto t : kEvaluatedTissues) s += (*this)[t];
    return s / static_cast<double>(kEvaluatedTissues.size());
  }
};

template <class A>
DiceScores evaluate_volume(const A& pred, const A& truth) {
  if (!pred.same_shape(truth)) throw Error("evaluate_volume: prediction and truth shapes differ");
  DiceScores s;
  for (int k = 0; k < kNumClasses; ++k) {
    const auto d = dice(pred, truth, k);
    s.value[static_cast<std::size_t>(k)] = d.value;
    s.both_empty[static_cast<std::size_t>(k)] = d.both_empty;
  }
  return s;
}

/// Mean of per-subject scores; both_empty only when empty in every subject.
inline DiceScores average_scores(const std::vector<DiceScores>& all) {
  if (all.empty()) throw Error("average_scores: no scores");
  DiceScores out;
  out.both_empty.fill(true);
  for (const auto& s : all)
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      out.value[k] += s.value[k] / static_cast<double>(all.size());
      out.both_empty[k] = out.both_empty[k] && s.both_empty[k];
    }
  return out;
}

/// One training run and its test-set outcome.
struct RunRecord {
  int run_index = 0;
  std::uint64_t seed = 0;
  std::vector<double> epoch_loss;
  std::string checkpoint;
  DiceScores test_dice;
};

/// Top-k runs by mean CSF/GM/WM DSC, descending; ties keep lower run index first.
inline std::vector<RunRecord> select_best(const std::vector<RunRecord>& records, std::size_t k) {
  if (records.empty()) throw Error("select_best: no records");
  if (k > records.size())
    throw Error("select_best: k=" + std::to_string(k) + " exceeds " + std::to_string(records.size()) +
                " records");
  std::vector<RunRecord> sorted = records;
  std::stable_sort(sorted.begin(), sorted.end(), [](const RunRecord& a, const RunRecord& b) {
    const double ma = a.test_dice.evaluated_mean(), mb = b.test_dice.evaluated_mean();
    if (ma != mb) return ma > mb;
    return a.run_index < b.run_index;
  });
  sorted.resize(k);
  return sorted;
}

struct ClassSummary {
  Tissue tissue = Tissue::Background;
  std::vector<double> per_run;
  double mean = 0.0;
  double std = 0.0;  // population
  bool any_both_empty = false;
};

struct DiceReport {
  std::vector<ClassSummary> classes;

  const ClassSummary& of(Tissue t) const {
    for (const auto& c : classes)
      if (c.tissue == t) return c;
    throw Error("report has no entry for " + std::string(tissue_name(t)));
  }
};

inline std::string format_mean_std(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f±%.4f", mean, std);
  return buf;
}

/// Per-class mean and population standard deviation across runs.
inline DiceReport summarize(const std::vector<RunRecord>& records,
                            std::span<const Tissue> tissues = kEvaluatedTissues) {
  if (records.empty()) throw Error("summarize: no records");
  DiceReport report;
  for (auto t : tissues) {
    ClassSummary s;
    s.tissue = t;
    for (const auto& r : records) {
      s.per_run.push_back(r.test_dice[t]);
      s.any_both_empty = s.any_both_empty || r.test_dice.both_empty[static_cast<std::size_t>(t)];
    }
    const double n = static_cast<double>(s.per_run.size());
    s.mean = std::accumulate(s.per_run.begin(), s.per_run.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : s.per_run) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / n);
    report.classes.push_back(std::move(s));
  }
  return report;
}

}  // namespace priorseg
