#pragma once

// Two-phase optimization: fit the teacher on rich data, freeze its soft
// labels and attention into a DistillBundle, then fit the student on the
// poor view under a chosen set of loss terms. Both phases use Adam with
// shuffled mini-batches and keep the parameters from the best validation
// epoch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdpd/autodiff.hpp"
#include "rdpd/data.hpp"
#include "rdpd/distill.hpp"
#include "rdpd/errors.hpp"
#include "rdpd/layers.hpp"
#include "rdpd/metrics.hpp"
#include "rdpd/optim.hpp"

namespace rdpd {

enum class IterationUnit { kEpochs, kSteps };
enum class EarlyStopMetric { kPrAuc, kRocAuc };

NLOHMANN_JSON_SERIALIZE_ENUM(IterationUnit, {{IterationUnit::kEpochs, "epochs"},
                                             {IterationUnit::kSteps, "steps"}})
NLOHMANN_JSON_SERIALIZE_ENUM(EarlyStopMetric, {{EarlyStopMetric::kPrAuc, "pr_auc"},
                                               {EarlyStopMetric::kRocAuc, "roc_auc"}})

struct RunConfig {
  LossTermSet terms = LossTermSet::rdpd();
  double temperature = 5.0;
  double lr = 1e-3;
  std::size_t batch_size = 128;
  std::size_t max_iterations = 200;  // epochs by default, optimizer steps with kSteps
  IterationUnit unit = IterationUnit::kEpochs;
  EarlyStopMetric early_stop_metric = EarlyStopMetric::kPrAuc;
  std::size_t patience = 20;
  std::size_t warmup = 0;  // epochs (or steps) before patience starts counting
  std::vector<std::uint64_t> seeds{0};
  ChannelProjection projection;
  ModelSpec teacher_spec;
  ModelSpec student_spec;
  bool teacher_t1 = false;      // fit the teacher at T = 1 instead of T
  bool broadcast_bias = false;  // scalar b in the combine head
  std::uint64_t teacher_seed = 0;

  double teacher_temperature() const { return teacher_t1 ? 1.0 : temperature; }

  void validate() const {
    terms.validate();
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (max_iterations == 0) throw ConfigError("max_iterations must be at least 1");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"terms", c.terms},
                     {"temperature", c.temperature},
                     {"lr", c.lr},
                     {"batch_size", c.batch_size},
                     {"max_iterations", c.max_iterations},
                     {"unit", c.unit},
                     {"early_stop_metric", c.early_stop_metric},
                     {"patience", c.patience},
                     {"warmup", c.warmup},
                     {"seeds", c.seeds},
                     {"projection", {{"name", c.projection.name}, {"indices", c.projection.indices}}},
                     {"teacher_spec", c.teacher_spec},
                     {"student_spec", c.student_spec},
                     {"teacher_t1", c.teacher_t1},
                     {"broadcast_bias", c.broadcast_bias},
                     {"teacher_seed", c.teacher_seed}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  j.at("terms").get_to(c.terms);
  j.at("temperature").get_to(c.temperature);
  j.at("lr").get_to(c.lr);
  j.at("batch_size").get_to(c.batch_size);
  j.at("max_iterations").get_to(c.max_iterations);
  j.at("unit").get_to(c.unit);
  j.at("early_stop_metric").get_to(c.early_stop_metric);
  j.at("patience").get_to(c.patience);
  if (j.contains("warmup")) j.at("warmup").get_to(c.warmup);
  j.at("seeds").get_to(c.seeds);
  j.at("projection").at("name").get_to(c.projection.name);
  j.at("projection").at("indices").get_to(c.projection.indices);
  j.at("teacher_spec").get_to(c.teacher_spec);
  j.at("student_spec").get_to(c.student_spec);
  j.at("teacher_t1").get_to(c.teacher_t1);
  j.at("broadcast_bias").get_to(c.broadcast_bias);
  j.at("teacher_seed").get_to(c.teacher_seed);
}

inline std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string json_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  return hex64(fnv1a({reinterpret_cast<const unsigned char*>(s.data()), s.size()}));
}

inline std::string config_hash(const RunConfig& c) { return json_hash(nlohmann::json(c)); }

// Per-epoch record. Term values are sample-weighted means over the epoch;
// the teacher's loss is logged under `hard` (a hard-label cross-entropy).
struct EpochLog {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double att = 0;
  double hard = 0;
  double soft = 0;
  double comb = 0;
  double total = 0;
  double valid_metric = 0;
};

inline void to_json(nlohmann::json& j, const EpochLog& e) {
  j = nlohmann::json{{"epoch", e.epoch}, {"steps", e.steps},   {"L_att", e.att},
                     {"L_hard", e.hard}, {"L_soft", e.soft},   {"L_comb", e.comb},
                     {"L_total", e.total}, {"valid_metric", e.valid_metric}};
}

struct TrainingLog {
  std::string role;
  std::uint64_t seed = 0;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_metric = 0;
};

inline void to_json(nlohmann::json& j, const TrainingLog& l) {
  j = nlohmann::json{{"role", l.role},
                     {"seed", l.seed},
                     {"epochs", l.epochs},
                     {"best_epoch", l.best_epoch},
                     {"best_metric", l.best_metric}};
}

// One JSON record per epoch, newline separated.
inline std::string log_lines(const TrainingLog& l) {
  std::string out;
  for (const auto& e : l.epochs) {
    nlohmann::json j = e;
    j["role"] = l.role;
    j["seed"] = l.seed;
    out += j.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching and inference

template <class Real>
struct Batch {
  Tensor<Real> x;  // [B x M x S x D]
  Tensor<Real> y;  // [B x C]
  std::vector<std::uint64_t> ids;
};

template <class Real>
Batch<Real> make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  if (indices.empty()) throw UsageError("empty batch");
  const auto& first = d.samples.at(indices.front());
  const std::size_t M = first.n_segments, S = first.segment_len, D = first.n_channels;
  const std::size_t C = first.n_classes;
  const std::size_t B = indices.size();
  std::vector<Real> x;
  std::vector<Real> y(B * C, Real(0));
  x.reserve(B * M * S * D);
  Batch<Real> out;
  out.ids.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = d.samples.at(indices[b]);
    if (s.n_segments != M || s.segment_len != S || s.n_channels != D || s.n_classes != C) {
      throw ShapeError("batch mixes samples of different layouts");
    }
    for (double v : s.values) x.push_back(static_cast<Real>(v));
    y[b * C + s.label] = Real(1);
    out.ids.push_back(s.id);
  }
  out.x = Tensor<Real>::constant({B, M, S, D}, std::move(x));
  out.y = Tensor<Real>::constant({B, C}, std::move(y));
  return out;
}

struct Predictions {
  std::size_t n_classes = 0;
  std::size_t n_segments = 0;
  std::vector<double> probs;      // [n x C], softmax(O, 1)
  std::vector<double> attention;  // [n x M]
  std::vector<double> logits;     // [n x C]
};

template <class Real>
Predictions predict(const Model<Real>& model, const Dataset& d, std::size_t batch_size = 256) {
  NoGradScope<Real> no_grad(nullptr);
  Predictions p;
  p.n_classes = model.spec().n_classes;
  p.n_segments = model.spec().n_segments;
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(idx.size(), start + batch_size);
    auto batch = make_batch<Real>(d, std::span<const std::size_t>(idx).subspan(start, end - start));
    auto out = forward(batch.x, model);
    auto probs = softmax(out.logits, Real(1));
    for (Real v : probs.data()) p.probs.push_back(static_cast<double>(v));
    for (Real v : out.attention.data()) p.attention.push_back(static_cast<double>(v));
    for (Real v : out.logits.data()) p.logits.push_back(static_cast<double>(v));
  }
  return p;
}

template <class Real>
EvalResult evaluate(const Model<Real>& model, const Dataset& d, std::uint64_t seed = 0) {
  if (d.size() == 0) throw DataError("cannot evaluate on an empty split");
  const auto p = predict(model, d);
  const auto labels = d.labels();
  EvalResult r = multiclass_aggregate(p.probs, p.n_classes, labels);
  r.seed = seed;
  return r;
}

inline double select_metric(const EvalResult& r, EarlyStopMetric m) {
  return m == EarlyStopMetric::kPrAuc ? r.pr_auc : r.roc_auc;
}

// ---------------------------------------------------------------------------
// Optimization loop

struct TermValues {
  double att = 0, hard = 0, soft = 0, comb = 0, total = 0;
};

namespace detail {

template <class Real>
std::vector<std::vector<Real>> snapshot(const std::vector<Tensor<Real>>& params) {
  std::vector<std::vector<Real>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

template <class Real>
void restore(std::vector<Tensor<Real>>& params, const std::vector<std::vector<Real>>& values) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::copy(values[k].begin(), values[k].end(), params[k].mutable_data().begin());
  }
}

// `step(batch)` records the loss on the active tape, runs backward, and
// returns the batch-mean term values. `valid_metric()` scores the current
// parameters on the validation split.
template <class Real, class StepFn, class MetricFn>
TrainingLog fit(const Dataset& train, const RunConfig& cfg, std::uint64_t seed,
                std::vector<Tensor<Real>> params, AdamState<Real>& adam, const std::string& role,
                StepFn&& step, MetricFn&& valid_metric) {
  if (train.size() == 0) throw DataError(role + ": empty training split");
  TrainingLog log;
  log.role = role;
  log.seed = seed;
  const AdamConfig adam_cfg{cfg.lr};
  std::mt19937_64 rng(mix_seed(seed, 0x5eed0b));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  double best = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<Real>> best_params = snapshot(params);
  std::size_t since_best = 0;
  std::size_t steps = 0;
  const bool by_steps = cfg.unit == IterationUnit::kSteps;

  for (std::size_t epoch = 1;; ++epoch) {
    if (!by_steps && epoch > cfg.max_iterations) break;
    std::shuffle(order.begin(), order.end(), rng);
    TermValues sum;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (by_steps && steps >= cfg.max_iterations) break;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      auto batch = make_batch<Real>(train, std::span<const std::size_t>(order).subspan(start, end - start));
      for (auto& p : params) p.zero_grad();
      TermValues tv;
      try {
        Tape<Real> tape;
        TapeScope<Real> scope(&tape);
        tv = step(batch);
        adam_step(params, adam, adam_cfg);
      } catch (const NumericError& e) {
        throw DivergenceError(role + " diverged (seed " + std::to_string(seed) + ", epoch " +
                              std::to_string(epoch) + ", step " + std::to_string(steps + 1) +
                              "): " + e.what());
      }
      if (!std::isfinite(tv.total)) {
        throw DivergenceError(role + " loss is not finite (seed " + std::to_string(seed) +
                              ", step " + std::to_string(steps + 1) + ")");
      }
      ++steps;
      const auto n = static_cast<double>(end - start);
      sum.att += n * tv.att;
      sum.hard += n * tv.hard;
      sum.soft += n * tv.soft;
      sum.comb += n * tv.comb;
      sum.total += n * tv.total;
      seen += end - start;
    }
    if (seen == 0) break;
    const auto inv = 1.0 / static_cast<double>(seen);
    EpochLog e{epoch, steps, sum.att * inv, sum.hard * inv, sum.soft * inv,
               sum.comb * inv, sum.total * inv, valid_metric()};
    log.epochs.push_back(e);
    if (e.valid_metric > best) {
      best = e.valid_metric;
      best_params = snapshot(params);
      log.best_epoch = epoch;
      log.best_metric = best;
      since_best = 0;
    } else if ((by_steps ? steps : epoch) > cfg.warmup && ++since_best >= cfg.patience) {
      break;
    }
    if (by_steps && steps >= cfg.max_iterations) break;
  }
  restore(params, best_params);
  return log;
}

template <class Real>
std::vector<Tensor<Real>> tensors_of(const std::vector<NamedParameter<Real>>& named) {
  std::vector<Tensor<Real>> out;
  for (const auto& p : named) out.push_back(p.tensor);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Teacher

template <class Real>
struct TeacherResult {
  Model<Real> model;
  TrainingLog log;
  AdamState<Real> optimizer;
};

template <class Real>
TeacherResult<Real> train_teacher(const Dataset& train, const Dataset& valid, const RunConfig& cfg,
                                  std::uint64_t seed) {
  cfg.validate();
  if (cfg.teacher_spec.n_channels != train.n_channels()) {
    throw ConfigError("teacher spec expects " + std::to_string(cfg.teacher_spec.n_channels) +
                      " channels, data has " + std::to_string(train.n_channels()));
  }
  Model<Real> model(cfg.teacher_spec, mix_seed(seed, 0x7eac));
  const Real T = static_cast<Real>(cfg.teacher_temperature());
  AdamState<Real> adam;
  auto log = detail::fit<Real>(
      train, cfg, seed, detail::tensors_of(model.parameters()), adam, "teacher",
      [&](Batch<Real>& batch) {
        auto out = forward(batch.x, model);
        auto loss = teacher_loss(out.logits, batch.y, T);
        backward(loss);
        TermValues tv;
        tv.hard = tv.total = static_cast<double>(loss.item());
        return tv;
      },
      [&] { return select_metric(evaluate(model, valid), cfg.early_stop_metric); });
  return {std::move(model), std::move(log), std::move(adam)};
}

// Frozen P_{r,T} = softmax(O_r, T) and A_r for every sample in `parts`.
template <class Real>
DistillBundle build_bundle(const Model<Real>& teacher, const std::vector<const Dataset*>& parts,
                           double temperature) {
  DistillBundle bundle(temperature);
  NoGradScope<Real> no_grad(nullptr);
  for (const Dataset* d : parts) {
    const auto p = predict(teacher, *d);
    const std::size_t C = p.n_classes, M = p.n_segments;
    for (std::size_t i = 0; i < d->size(); ++i) {
      auto logits = Tensor<Real>::constant(
          {C}, std::vector<Real>(p.logits.begin() + static_cast<std::ptrdiff_t>(i * C),
                                 p.logits.begin() + static_cast<std::ptrdiff_t>((i + 1) * C)));
      auto soft = softmax(logits, static_cast<Real>(temperature));
      BundleEntry e;
      e.soft.assign(soft.data().begin(), soft.data().end());
      e.attention.assign(p.attention.begin() + static_cast<std::ptrdiff_t>(i * M),
                         p.attention.begin() + static_cast<std::ptrdiff_t>((i + 1) * M));
      bundle.insert(d->samples[i].id, std::move(e));
    }
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Student

template <class Real>
struct StudentResult {
  Model<Real> model;
  CombineHead<Real> head;
  TrainingLog log;
  AdamState<Real> optimizer;
};

template <class Real>
StudentResult<Real> train_student(const Dataset& train, const Dataset& valid,
                                  const DistillBundle* bundle, const RunConfig& cfg,
                                  std::uint64_t seed) {
  cfg.validate();
  const LossTermSet& terms = cfg.terms;
  if (cfg.student_spec.n_channels != train.n_channels()) {
    throw ConfigError("student spec expects " + std::to_string(cfg.student_spec.n_channels) +
                      " channels, data has " + std::to_string(train.n_channels()));
  }
  if (terms.needs_bundle()) {
    if (!bundle) throw ConfigError("loss terms " + terms.describe() + " require a distillation bundle");
    const auto gaps = bundle->missing(train.ids());
    if (!gaps.empty()) {
      std::string msg = "bundle is missing " + std::to_string(gaps.size()) + " training sample(s):";
      for (std::size_t i = 0; i < gaps.size() && i < 20; ++i) msg += " " + std::to_string(gaps[i]);
      if (gaps.size() > 20) msg += " ...";
      throw ConfigError(msg);
    }
    if (std::abs(bundle->temperature() - cfg.temperature) > 1e-9) {
      throw ConfigError("bundle temperature " + std::to_string(bundle->temperature()) +
                        " differs from run temperature " + std::to_string(cfg.temperature));
    }
  }
  const DistillBundle* active_bundle = terms.needs_bundle() ? bundle : nullptr;

  Model<Real> model(cfg.student_spec, mix_seed(seed, 0x57d0));
  CombineHead<Real> head(cfg.student_spec.n_classes, cfg.broadcast_bias);
  auto params = detail::tensors_of(model.parameters());
  if (terms.comb) {
    for (auto& p : head.parameters()) params.push_back(p.tensor);
  }
  const Real T = static_cast<Real>(cfg.temperature);
  AdamState<Real> adam;
  auto log = detail::fit<Real>(
      train, cfg, seed, params, adam, "student",
      [&](Batch<Real>& batch) {
        auto out = forward(batch.x, model);
        std::optional<BundleBatch<Real>> bb;
        if (active_bundle) {
          bb = active_bundle->gather<Real>(batch.ids);
          if (bb->attention.dim(1) != model.spec().n_segments) {
            throw AlignmentError("teacher attention covers " + std::to_string(bb->attention.dim(1)) +
                                 " segments, student has " + std::to_string(model.spec().n_segments));
          }
        }
        auto loss = student_loss(out, batch.y, bb ? &*bb : nullptr, &head, terms, T);
        backward(loss.total);
        return TermValues{loss.att, loss.hard, loss.soft, loss.comb,
                          static_cast<double>(loss.total.item())};
      },
      [&] { return select_metric(evaluate(model, valid), cfg.early_stop_metric); });
  return {std::move(model), std::move(head), std::move(log), std::move(adam)};
}

}  // namespace rdpd
