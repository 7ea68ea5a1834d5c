#pragma once

// Experiment drivers shared by the command-line tool and the acceptance
// suite: data preparation, the (mode x seed) matrix, sweeps over rich-data
// fraction, noise amplitude and temperature, and attention dumps.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdpd/data.hpp"
#include "rdpd/distill.hpp"
#include "rdpd/errors.hpp"
#include "rdpd/layers.hpp"
#include "rdpd/metrics.hpp"
#include "rdpd/parallel.hpp"
#include "rdpd/training.hpp"

namespace rdpd {

enum class SweepAxis { kNone, kRichFraction, kNoiseAmp, kTemperature };

inline std::string axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::kNone: return "none";
    case SweepAxis::kRichFraction: return "rich-fraction";
    case SweepAxis::kNoiseAmp: return "noise-amp";
    case SweepAxis::kTemperature: return "temperature";
  }
  return "none";
}

inline SweepAxis parse_axis(const std::string& s) {
  for (auto a : {SweepAxis::kNone, SweepAxis::kRichFraction, SweepAxis::kNoiseAmp,
                 SweepAxis::kTemperature}) {
    if (axis_name(a) == s) return a;
  }
  throw ConfigError("unknown sweep axis '" + s + "' (none, rich-fraction, noise-amp, temperature)");
}

inline std::vector<double> default_sweep_values(SweepAxis a) {
  switch (a) {
    case SweepAxis::kRichFraction: return {0.25, 0.5, 0.75, 1.0};
    case SweepAxis::kNoiseAmp: return {0.0, 0.5, 1.0, 2.0};
    case SweepAxis::kTemperature: return {1, 2, 5, 10, 20};
    case SweepAxis::kNone: break;
  }
  return {};
}

inline void validate_sweep_values(SweepAxis a, const std::vector<double>& values) {
  if (a == SweepAxis::kNone) return;
  if (values.empty()) throw ConfigError("sweep " + axis_name(a) + " needs at least one value");
  for (double v : values) {
    const bool ok = a == SweepAxis::kRichFraction ? (v > 0 && v <= 1)
                    : a == SweepAxis::kNoiseAmp   ? v >= 0 && std::isfinite(v)
                                                  : v > 0 && std::isfinite(v);
    if (!ok) {
      throw ConfigError("invalid " + axis_name(a) + " value " + std::to_string(v));
    }
  }
}

// ---------------------------------------------------------------------------
// Data

// Subject-disjoint splits standardized with training statistics, in the rich
// view and in the projected poor view. Sample ids agree across views.
struct ExperimentData {
  Splits rich;
  Splits poor;
  ChannelProjection projection;
};

inline ExperimentData prepare_data(const Dataset& full, const SplitSpec& split,
                                   const std::string& group) {
  auto projection = full.group(group);
  projection.validate(full.n_channels());
  if (!projection.strict_subset_of(full.n_channels())) {
    throw ConfigError("group '" + group + "' must be a strict subset of the rich channels");
  }
  ExperimentData d;
  d.rich = split_by_subject(full, split);
  const auto z = Standardizer::fit(d.rich.train);
  z.apply(d.rich.train);
  z.apply(d.rich.valid);
  z.apply(d.rich.test);
  d.poor = {project_dataset(d.rich.train, projection), project_dataset(d.rich.valid, projection),
            project_dataset(d.rich.test, projection)};
  d.projection = projection;
  return d;
}

inline std::string dataset_hash(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    h = fnv1a({static_cast<const unsigned char*>(p), n}, h);
  };
  for (const auto& s : d.samples) {
    mix(&s.id, sizeof s.id);
    mix(&s.label, sizeof s.label);
    mix(s.values.data(), s.values.size() * sizeof(double));
  }
  return hex64(h);
}

// Teacher architecture used when none is given: 64 filters of width 8 (or
// the segment length if shorter), stride 2, 64 hidden units.
inline ModelSpec default_teacher_spec(const Dataset& d) {
  ModelSpec s;
  s.n_channels = d.n_channels();
  s.n_segments = d.n_segments;
  s.segment_len = d.segment_len;
  s.n_filters = 64;
  s.filter_width = std::min<std::size_t>(8, d.segment_len);
  s.stride = 2;
  s.n_hidden = 64;
  s.n_classes = d.n_classes();
  return s;
}

// Run settings used when no flag overrides them. The built-in synthetic task
// runs at T = 2.5 and starts counting patience after 50 epochs, since students
// sit near chance for their first epochs there.
inline RunConfig default_run_config(const ExperimentData& d, bool synthetic) {
  RunConfig cfg;
  cfg.teacher_spec = default_teacher_spec(d.rich.train);
  cfg.student_spec = derive_student_spec(cfg.teacher_spec, d.projection.indices.size());
  cfg.projection = d.projection;
  cfg.temperature = synthetic ? 2.5 : 5.0;
  cfg.warmup = synthetic ? 50 : 0;
  return cfg;
}

// ---------------------------------------------------------------------------
// Results

struct CellResult {
  std::string mode;
  std::uint64_t seed = 0;
  std::string axis = "none";
  double value = 0;
  EvalResult test;
  double attention_kl = 0;  // mean KL(A_model || A_teacher) over test samples
  TrainingLog log;
  std::string config_hash;
  std::string eval_data_hash;  // valid + test splits seen by this cell
};

inline void to_json(nlohmann::json& j, const CellResult& c) {
  j = nlohmann::json{{"mode", c.mode},
                     {"seed", c.seed},
                     {"axis", c.axis},
                     {"value", c.value},
                     {"roc_auc", c.test.roc_auc},
                     {"pr_auc", c.test.pr_auc},
                     {"macro_f1", c.test.macro_f1},
                     {"attention_kl", c.attention_kl},
                     {"best_epoch", c.log.best_epoch},
                     {"epochs", c.log.epochs.size()},
                     {"config_hash", c.config_hash},
                     {"eval_data_hash", c.eval_data_hash},
                     {"eval", c.test}};
}

struct Summary {
  std::string mode;
  std::string axis = "none";
  double value = 0;
  std::size_t n = 0;
  double roc_mean = 0, roc_std = 0;
  double pr_mean = 0, pr_std = 0;
  double f1_mean = 0, f1_std = 0;
  double attention_kl_mean = 0;
};

inline void to_json(nlohmann::json& j, const Summary& s) {
  j = nlohmann::json{{"mode", s.mode},         {"axis", s.axis},         {"value", s.value},
                     {"n", s.n},               {"roc_auc_mean", s.roc_mean},
                     {"roc_auc_std", s.roc_std}, {"pr_auc_mean", s.pr_mean},
                     {"pr_auc_std", s.pr_std}, {"macro_f1_mean", s.f1_mean},
                     {"macro_f1_std", s.f1_std}, {"attention_kl_mean", s.attention_kl_mean}};
}

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0};
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace detail

// Mean and sample standard deviation per (axis value, mode), in order of
// first appearance.
inline std::vector<Summary> summarize(const std::vector<CellResult>& cells) {
  std::vector<Summary> out;
  std::vector<std::vector<const CellResult*>> groups;
  for (const auto& c : cells) {
    std::size_t g = 0;
    while (g < out.size() &&
           !(out[g].mode == c.mode && out[g].axis == c.axis && out[g].value == c.value)) {
      ++g;
    }
    if (g == out.size()) {
      Summary s;
      s.mode = c.mode;
      s.axis = c.axis;
      s.value = c.value;
      out.push_back(s);
      groups.emplace_back();
    }
    groups[g].push_back(&c);
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    std::vector<double> roc, pr, f1;
    double kl = 0;
    for (const auto* c : groups[g]) {
      roc.push_back(c->test.roc_auc);
      pr.push_back(c->test.pr_auc);
      f1.push_back(c->test.macro_f1);
      kl += c->attention_kl;
    }
    auto& s = out[g];
    s.n = groups[g].size();
    std::tie(s.roc_mean, s.roc_std) = detail::mean_std(roc);
    std::tie(s.pr_mean, s.pr_std) = detail::mean_std(pr);
    std::tie(s.f1_mean, s.f1_std) = detail::mean_std(f1);
    s.attention_kl_mean = kl / static_cast<double>(s.n);
  }
  return out;
}

// Mean per-sample KL(A_a || A_b) between two prediction sets over the same samples.
inline double mean_attention_kl(const Predictions& a, const Predictions& b) {
  if (a.attention.size() != b.attention.size() || a.n_segments != b.n_segments) {
    throw AlignmentError("attention dumps cover different samples or segment counts");
  }
  const std::size_t M = a.n_segments;
  const std::size_t n = a.attention.size() / M;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < M; ++m) {
      const double p = a.attention[i * M + m];
      if (p <= 0) continue;
      total += p * (std::log(p) - std::log(std::max(b.attention[i * M + m], kProbEpsilon)));
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// Aligned, '|'-delimited text table.
inline std::string aligned_table(const std::vector<std::string>& header,
                                 const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) {
      width[c] = std::max(width[c], r[c].size());
    }
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string& v = c < cells.size() ? cells[c] : std::string();
      os << (c ? " | " : "") << v << std::string(width[c] - v.size(), ' ');
    }
    os << '\n';
  };
  line(header);
  std::vector<std::string> rule;
  for (auto w : width) rule.push_back(std::string(w, '-'));
  line(rule);
  for (const auto& r : rows) line(r);
  return os.str();
}

inline std::string fmt_num(double v, int precision = 6) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

inline std::string cells_table(const std::vector<CellResult>& cells) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& c : cells) {
    rows.push_back({c.axis, fmt_num(c.value, 4), c.mode, std::to_string(c.seed),
                    fmt_num(c.test.roc_auc), fmt_num(c.test.pr_auc), fmt_num(c.test.macro_f1),
                    fmt_num(c.attention_kl)});
  }
  return aligned_table({"axis", "value", "mode", "seed", "roc_auc", "pr_auc", "macro_f1", "att_kl"},
                       rows);
}

inline std::string eval_table(const EvalResult& r) {
  auto opt = [](const std::optional<double>& v) { return v ? fmt_num(*v) : std::string("n/a"); };
  std::vector<std::vector<std::string>> rows;
  for (const auto& c : r.per_class) {
    rows.push_back({std::to_string(c.cls), std::to_string(c.support), opt(c.roc_auc), opt(c.pr_auc),
                    fmt_num(c.f1)});
  }
  rows.push_back({"macro", std::to_string(r.n_samples), fmt_num(r.roc_auc), fmt_num(r.pr_auc),
                  fmt_num(r.macro_f1)});
  return aligned_table({"class", "support", "roc_auc", "pr_auc", "f1"}, rows);
}

inline std::string epochs_table(const TrainingLog& log) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : log.epochs) {
    rows.push_back({std::to_string(e.epoch), std::to_string(e.steps), fmt_num(e.att), fmt_num(e.hard),
                    fmt_num(e.soft), fmt_num(e.comb), fmt_num(e.total), fmt_num(e.valid_metric)});
  }
  return aligned_table({"epoch", "steps", "L_att", "L_hard", "L_soft", "L_comb", "L_total", "valid"},
                       rows);
}

inline std::string summary_table(const std::vector<Summary>& sums) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : sums) {
    rows.push_back({s.axis, fmt_num(s.value, 4), s.mode, std::to_string(s.n),
                    fmt_num(s.roc_mean) + " +- " + fmt_num(s.roc_std),
                    fmt_num(s.pr_mean) + " +- " + fmt_num(s.pr_std),
                    fmt_num(s.f1_mean) + " +- " + fmt_num(s.f1_std), fmt_num(s.attention_kl_mean)});
  }
  return aligned_table({"axis", "value", "mode", "n", "roc_auc", "pr_auc", "macro_f1", "att_kl"},
                       rows);
}

// ---------------------------------------------------------------------------
// Runs

struct ExperimentOptions {
  std::size_t jobs = 1;
  bool retrain_teacher_per_seed = false;
  NoiseKind noise_kind = NoiseKind::kNormal;
};

template <class Real>
struct TeacherArtifacts {
  Model<Real> model;
  TrainingLog log;
  AdamState<Real> optimizer;
  DistillBundle bundle;
  Predictions test_predictions;  // rich test split
  EvalResult test;
  std::uint64_t seed = 0;
};

template <class Real>
TeacherArtifacts<Real> prepare_teacher(const ExperimentData& data, const RunConfig& cfg,
                                       std::uint64_t seed) {
  auto t = train_teacher<Real>(data.rich.train, data.rich.valid, cfg, seed);
  auto bundle = build_bundle(t.model, {&data.rich.train, &data.rich.valid}, cfg.temperature);
  auto preds = predict(t.model, data.rich.test);
  auto eval = evaluate(t.model, data.rich.test, seed);
  return {std::move(t.model), std::move(t.log), std::move(t.optimizer), std::move(bundle),
          std::move(preds), eval, seed};
}

// Invoked once per finished student cell with its trained state.
template <class Real>
using StudentSink = std::function<void(const CellResult&, const StudentResult<Real>&)>;

// Every (mode, seed) cell. The teacher and bundle are trained once (with
// cfg.teacher_seed) and shared across seeds unless retrain_teacher_per_seed.
// Rows come back mode-major in the order given, independent of `jobs`.
template <class Real>
std::vector<CellResult> run_matrix(const ExperimentData& data, const RunConfig& base,
                                   const std::vector<Mode>& modes,
                                   const std::vector<std::uint64_t>& seeds,
                                   const ExperimentOptions& opt,
                                   const TeacherArtifacts<Real>* shared = nullptr,
                                   const StudentSink<Real>& sink = {}) {
  if (modes.empty()) throw ConfigError("no modes requested");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  const std::string eval_hash = dataset_hash(data.poor.valid) + dataset_hash(data.poor.test);

  std::vector<std::optional<TeacherArtifacts<Real>>> own;
  std::vector<const TeacherArtifacts<Real>*> teacher_for(seeds.size(), shared);
  if (opt.retrain_teacher_per_seed) {
    own.resize(seeds.size());
    parallel_for(seeds.size(), opt.jobs, [&](std::size_t i) {
      own[i].emplace(prepare_teacher<Real>(data, base, seeds[i]));
    });
    for (std::size_t i = 0; i < seeds.size(); ++i) teacher_for[i] = &*own[i];
  } else if (!shared) {
    own.resize(1);
    own[0].emplace(prepare_teacher<Real>(data, base, base.teacher_seed));
    for (auto& t : teacher_for) t = &*own[0];
  }

  std::vector<CellResult> cells(modes.size() * seeds.size());
  parallel_for(cells.size(), opt.jobs, [&](std::size_t idx) {
    const Mode mode = modes[idx / seeds.size()];
    const std::size_t si = idx % seeds.size();
    const std::uint64_t seed = seeds[si];
    const auto& teacher = *teacher_for[si];
    CellResult c;
    c.mode = mode_name(mode);
    c.seed = seed;
    c.eval_data_hash = eval_hash;
    RunConfig cfg = base;
    cfg.seeds = {seed};
    if (mode == Mode::kTeacher) {
      cfg.terms = LossTermSet::direct();
      cfg.teacher_seed = teacher.seed;
      c.test = teacher.test;
      c.test.seed = seed;
      c.log = teacher.log;
      c.attention_kl = 0;
      c.config_hash = json_hash({{"mode", c.mode}, {"config", cfg}});
    } else {
      cfg.terms = LossTermSet::for_mode(mode);
      cfg.teacher_seed = teacher.seed;
      c.config_hash = json_hash({{"mode", c.mode}, {"config", cfg}});
      auto st = train_student<Real>(data.poor.train, data.poor.valid, &teacher.bundle, cfg, seed);
      c.log = st.log;
      c.test = evaluate(st.model, data.poor.test, seed);
      c.attention_kl = mean_attention_kl(predict(st.model, data.poor.test), teacher.test_predictions);
      if (sink) sink(c, st);
    }
    cells[idx] = std::move(c);
  });
  return cells;
}

// One run_matrix per sweep value, rows annotated with the axis and value.
//   rich-fraction: the rich training set is subsampled per subject; teacher
//                  and students train on the same subset, valid/test fixed.
//   noise-amp:     noise is added to every split of the poor view; the
//                  teacher (clean rich data) is shared across amplitudes.
//   temperature:   the teacher is refit and the bundle rebuilt at each T.
template <class Real>
std::vector<CellResult> run_sweep(const ExperimentData& data, const RunConfig& base, SweepAxis axis,
                                  const std::vector<double>& values, const std::vector<Mode>& modes,
                                  const std::vector<std::uint64_t>& seeds,
                                  const ExperimentOptions& opt, const StudentSink<Real>& sink = {}) {
  validate_sweep_values(axis, values);
  if (axis == SweepAxis::kNone) return run_matrix<Real>(data, base, modes, seeds, opt, nullptr, sink);
  std::vector<CellResult> out;
  std::optional<TeacherArtifacts<Real>> clean_teacher;
  for (double v : values) {
    std::vector<CellResult> cells;
    if (axis == SweepAxis::kRichFraction) {
      ExperimentData d = data;
      d.rich.train = subsample_rich(data.rich.train, v, mix_seed(base.teacher_seed, 0xf7ac));
      d.poor.train = project_dataset(d.rich.train, data.projection);
      cells = run_matrix<Real>(d, base, modes, seeds, opt, nullptr, sink);
    } else if (axis == SweepAxis::kNoiseAmp) {
      if (!clean_teacher && !opt.retrain_teacher_per_seed) {
        clean_teacher.emplace(prepare_teacher<Real>(data, base, base.teacher_seed));
      }
      ExperimentData d = data;
      std::vector<std::size_t> all(data.projection.indices.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      const std::uint64_t ns = mix_seed(base.teacher_seed, 0x401e);
      d.poor.train = inject_noise(data.poor.train, v, ns, all, opt.noise_kind);
      d.poor.valid = inject_noise(data.poor.valid, v, ns, all, opt.noise_kind);
      d.poor.test = inject_noise(data.poor.test, v, ns, all, opt.noise_kind);
      cells = run_matrix<Real>(d, base, modes, seeds, opt,
                               clean_teacher ? &*clean_teacher : nullptr, sink);
    } else {
      RunConfig cfg = base;
      cfg.temperature = v;
      cells = run_matrix<Real>(data, cfg, modes, seeds, opt, nullptr, sink);
    }
    for (auto& c : cells) {
      c.axis = axis_name(axis);
      c.value = v;
      out.push_back(std::move(c));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention dumps

struct AttentionRow {
  std::string model;
  std::uint64_t sample_id = 0;
  std::size_t label = 0;
  std::vector<double> attention;
  std::vector<double> probs;
};

inline void to_json(nlohmann::json& j, const AttentionRow& r) {
  j = nlohmann::json{{"model", r.model},
                     {"sample_id", r.sample_id},
                     {"label", r.label},
                     {"attention", r.attention},
                     {"probs", r.probs}};
}

// One row per (sample, model), samples in the order requested. Model i reads
// its inputs from views[i], which must contain every requested id.
template <class Real>
std::vector<AttentionRow> dump_attention(
    const std::vector<std::pair<std::string, const Model<Real>*>>& models,
    const std::vector<const Dataset*>& views, const std::vector<std::uint64_t>& ids) {
  if (models.size() != views.size()) throw UsageError("one data view per model is required");
  std::vector<Predictions> preds;
  std::vector<std::map<std::uint64_t, std::size_t>> index(models.size());
  std::vector<std::vector<std::size_t>> labels(models.size());
  for (std::size_t m = 0; m < models.size(); ++m) {
    Dataset subset = views[m]->empty_like();
    for (auto id : ids) {
      auto it = std::find_if(views[m]->samples.begin(), views[m]->samples.end(),
                             [id](const SegmentedSeries& s) { return s.id == id; });
      if (it == views[m]->samples.end()) {
        throw DataError("sample " + std::to_string(id) + " not found for model " + models[m].first);
      }
      index[m][id] = subset.samples.size();
      subset.samples.push_back(*it);
    }
    labels[m] = subset.labels();
    preds.push_back(predict(*models[m].second, subset));
  }
  std::vector<AttentionRow> rows;
  for (auto id : ids) {
    for (std::size_t m = 0; m < models.size(); ++m) {
      const std::size_t i = index[m].at(id);
      const auto& p = preds[m];
      AttentionRow r;
      r.model = models[m].first;
      r.sample_id = id;
      r.label = labels[m][i];
      r.attention.assign(p.attention.begin() + static_cast<std::ptrdiff_t>(i * p.n_segments),
                         p.attention.begin() + static_cast<std::ptrdiff_t>((i + 1) * p.n_segments));
      r.probs.assign(p.probs.begin() + static_cast<std::ptrdiff_t>(i * p.n_classes),
                     p.probs.begin() + static_cast<std::ptrdiff_t>((i + 1) * p.n_classes));
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

}  // namespace rdpd
