#pragma once

// Ranking and threshold metrics for multi-class probability outputs:
// one-vs-rest ROC-AUC, average precision, and macro F1 at threshold 0.5.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdpd/errors.hpp"

namespace rdpd {

namespace detail {

inline void check_binary_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("metric inputs differ in length: " + std::to_string(scores.size()) + " vs " +
                     std::to_string(labels.size()));
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError("binary labels must be 0 or 1");
  }
}

// Indices ordered by descending score.
inline std::vector<std::size_t> order_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace detail

// Probability that a random positive outscores a random negative, ties
// counted one half.
inline double roc_auc_binary(std::span<const double> scores, std::span<const int> labels) {
  detail::check_binary_inputs(scores, labels);
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw UndefinedMetricError("ROC-AUC needs both positive and negative labels");
  }
  // Walk tie groups in descending order; each positive earns the negatives
  // strictly below it plus half of those tied with it.
  const auto idx = detail::order_desc(scores);
  double correct = 0;
  std::size_t neg_above = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::size_t pos = 0, neg = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? pos : neg)++;
      ++j;
    }
    const double neg_below = static_cast<double>(n_neg - neg_above - neg);
    correct += static_cast<double>(pos) * (neg_below + 0.5 * static_cast<double>(neg));
    neg_above += neg;
    i = j;
  }
  return correct / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k.
inline double pr_auc_binary(std::span<const double> scores, std::span<const int> labels) {
  detail::check_binary_inputs(scores, labels);
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (n_pos == 0) throw UndefinedMetricError("PR-AUC needs at least one positive label");
  const auto idx = detail::order_desc(scores);
  double ap = 0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::size_t pos = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      pos += labels[idx[j]] == 1;
      ++j;
    }
    tp += pos;
    seen = j;
    if (pos) {
      ap += (static_cast<double>(pos) / static_cast<double>(n_pos)) *
            (static_cast<double>(tp) / static_cast<double>(seen));
    }
    i = j;
  }
  return ap;
}

struct ClassMetrics {
  std::size_t cls = 0;
  std::size_t support = 0;       // positives in the evaluated set
  std::optional<double> roc_auc;  // absent when the class is absent or universal
  std::optional<double> pr_auc;
  double f1 = 0;
};

struct EvalResult {
  double roc_auc = 0;
  double pr_auc = 0;
  double macro_f1 = 0;
  std::vector<ClassMetrics> per_class;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;

  bool operator==(const EvalResult& o) const {
    if (roc_auc != o.roc_auc || pr_auc != o.pr_auc || macro_f1 != o.macro_f1 ||
        n_samples != o.n_samples || seed != o.seed || per_class.size() != o.per_class.size()) {
      return false;
    }
    for (std::size_t i = 0; i < per_class.size(); ++i) {
      const auto& a = per_class[i];
      const auto& b = o.per_class[i];
      if (a.cls != b.cls || a.support != b.support || a.roc_auc != b.roc_auc ||
          a.pr_auc != b.pr_auc || a.f1 != b.f1) {
        return false;
      }
    }
    return true;
  }
};

namespace detail {

inline void check_prob_matrix(std::span<const double> probs, std::size_t n_classes,
                              std::span<const std::size_t> labels) {
  if (n_classes == 0) throw ShapeError("metrics need at least one class");
  if (probs.size() != labels.size() * n_classes) {
    throw ShapeError("probability matrix has " + std::to_string(probs.size()) +
                     " entries for " + std::to_string(labels.size()) + " samples x " +
                     std::to_string(n_classes) + " classes");
  }
  for (auto l : labels) {
    if (l >= n_classes) throw DataError("label " + std::to_string(l) + " out of range");
  }
}

inline double f1_for_class(std::span<const double> probs, std::size_t n_classes,
                           std::span<const std::size_t> labels, std::size_t c) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = probs[i * n_classes + c] > 0.5;
    const bool actual = labels[i] == c;
    tp += pred && actual;
    fp += pred && !actual;
    fn += !pred && actual;
  }
  if (tp == 0) return 0.0;  // also covers precision + recall == 0
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2 * precision * recall / (precision + recall);
}

}  // namespace detail

// probs is row-major [n x C]. Each class is thresholded independently at 0.5.
inline double macro_f1(std::span<const double> probs, std::size_t n_classes,
                       std::span<const std::size_t> labels) {
  detail::check_prob_matrix(probs, n_classes, labels);
  double total = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    total += detail::f1_for_class(probs, n_classes, labels, c);
  }
  return total / static_cast<double>(n_classes);
}

// Macro one-vs-rest metrics. AUCs average over classes with both outcomes
// present; F1 averages over every class.
inline EvalResult multiclass_aggregate(std::span<const double> probs, std::size_t n_classes,
                                       std::span<const std::size_t> labels) {
  detail::check_prob_matrix(probs, n_classes, labels);
  EvalResult r;
  r.n_samples = labels.size();
  std::vector<double> scores(labels.size());
  std::vector<int> binary(labels.size());
  double roc_sum = 0, pr_sum = 0, f1_sum = 0;
  std::size_t ranked = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    ClassMetrics m;
    m.cls = c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      scores[i] = probs[i * n_classes + c];
      binary[i] = labels[i] == c ? 1 : 0;
      m.support += static_cast<std::size_t>(binary[i]);
    }
    if (m.support > 0 && m.support < labels.size()) {
      m.roc_auc = roc_auc_binary(scores, binary);
      m.pr_auc = pr_auc_binary(scores, binary);
      roc_sum += *m.roc_auc;
      pr_sum += *m.pr_auc;
      ++ranked;
    }
    m.f1 = detail::f1_for_class(probs, n_classes, labels, c);
    f1_sum += m.f1;
    r.per_class.push_back(m);
  }
  if (ranked == 0) throw UndefinedMetricError("no class has both outcomes present");
  r.roc_auc = roc_sum / static_cast<double>(ranked);
  r.pr_auc = pr_sum / static_cast<double>(ranked);
  r.macro_f1 = f1_sum / static_cast<double>(n_classes);
  return r;
}

inline void to_json(nlohmann::json& j, const ClassMetrics& m) {
  j = nlohmann::json{{"class", m.cls}, {"support", m.support}, {"f1", m.f1}};
  j["roc_auc"] = m.roc_auc ? nlohmann::json(*m.roc_auc) : nlohmann::json(nullptr);
  j["pr_auc"] = m.pr_auc ? nlohmann::json(*m.pr_auc) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, ClassMetrics& m) {
  j.at("class").get_to(m.cls);
  j.at("support").get_to(m.support);
  j.at("f1").get_to(m.f1);
  if (!j.at("roc_auc").is_null()) m.roc_auc = j.at("roc_auc").get<double>();
  if (!j.at("pr_auc").is_null()) m.pr_auc = j.at("pr_auc").get<double>();
}

inline void to_json(nlohmann::json& j, const EvalResult& r) {
  j = nlohmann::json{{"roc_auc", r.roc_auc},     {"pr_auc", r.pr_auc},
                     {"macro_f1", r.macro_f1},   {"n_samples", r.n_samples},
                     {"seed", r.seed},           {"per_class", r.per_class}};
}

inline void from_json(const nlohmann::json& j, EvalResult& r) {
  j.at("roc_auc").get_to(r.roc_auc);
  j.at("pr_auc").get_to(r.pr_auc);
  j.at("macro_f1").get_to(r.macro_f1);
  j.at("n_samples").get_to(r.n_samples);
  j.at("seed").get_to(r.seed);
  j.at("per_class").get_to(r.per_class);
}

}  // namespace rdpd
