// rdpd: train teachers and students, run sweeps, dump attention, evaluate.
//
// Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
// 3 data or file-format error, 4 numeric divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rdpd/checkpoint.hpp"
#include "rdpd/experiment.hpp"

namespace fs = std::filesystem;
using namespace rdpd;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0, kExitInternal = 1, kExitConfig = 2, kExitData = 3, kExitNumeric = 4;

// ---------------------------------------------------------------------------
// Options

struct DataOptions {
  std::string manifest;
  bool synth = false;
  std::string synth_config;
  std::string group;
  std::uint64_t split_seed = 0;
};

struct ArchOptions {
  std::optional<std::size_t> filters, width, stride, hidden;
};

struct TrainOptions {
  std::optional<double> temperature;
  std::size_t iterations = 200;
  std::string unit = "epochs";
  std::size_t patience = 20;
  std::optional<std::size_t> warmup;
  double lr = 1e-3;
  std::size_t batch = 128;
  std::string metric = "pr_auc";
  bool teacher_t1 = false;
};

void add_data_options(CLI::App* app, DataOptions& o) {
  app->add_option("--manifest", o.manifest, "Dataset manifest (JSON)");
  app->add_flag("--synth", o.synth, "Use the built-in synthetic rich/poor task");
  app->add_option("--synth-config", o.synth_config, "JSON file overriding synthetic task fields");
  app->add_option("--group", o.group, "Channel group forming the poor view (synthetic: poor)");
  app->add_option("--split-seed", o.split_seed, "Seed of the subject split when the manifest fixes none");
}

void add_arch_options(CLI::App* app, ArchOptions& o) {
  app->add_option("--filters", o.filters, "Teacher conv filters K (default 64)");
  app->add_option("--width", o.width, "Conv filter width w (default min(8, S))");
  app->add_option("--stride", o.stride, "Conv stride (default 2)");
  app->add_option("--hidden", o.hidden, "Teacher BiLSTM units U (default 64)");
}

void add_train_options(CLI::App* app, TrainOptions& o) {
  app->add_option("--temperature,-T", o.temperature, "Distillation temperature (synthetic 2.5, else 5)");
  app->add_option("--iterations", o.iterations, "Training length (default 200)");
  app->add_option("--unit", o.unit, "Unit of --iterations")->check(CLI::IsMember({"epochs", "steps"}));
  app->add_option("--patience", o.patience, "Early-stopping patience in epochs (default 20)");
  app->add_option("--warmup", o.warmup, "Epochs before patience counts (synthetic 50, else 0)");
  app->add_option("--lr", o.lr, "Adam learning rate (default 0.001)");
  app->add_option("--batch", o.batch, "Mini-batch size (default 128)");
  app->add_option("--metric", o.metric, "Early-stopping metric")->check(CLI::IsMember({"pr_auc", "roc_auc"}));
  app->add_flag("--teacher-t1", o.teacher_t1, "Fit the teacher at T = 1 instead of T");
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto dash = tok.find('-');
    try {
      if (dash != std::string::npos && dash > 0) {
        const auto a = std::stoull(tok.substr(0, dash)), b = std::stoull(tok.substr(dash + 1));
        if (b < a) throw ConfigError("empty seed range " + tok);
        for (auto v = a; v <= b; ++v) out.push_back(v);
      } else {
        out.push_back(std::stoull(tok));
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad seed list '" + s + "' (use e.g. 0-9 or 1,4,7)");
    }
  }
  if (out.empty()) throw ConfigError("at least one seed is required");
  return out;
}

unsigned precision_from_env() {
  const char* v = std::getenv("DISTILL_PRECISION");
  if (!v || std::string(v).empty()) return 32;
  const std::string s(v);
  if (s == "32") return 32;
  if (s == "64") return 64;
  throw ConfigError("DISTILL_PRECISION must be 32 or 64, got '" + s + "'");
}

// ---------------------------------------------------------------------------
// Data and configuration

struct Loaded {
  json ref;
  ExperimentData data;
  bool synthetic = false;
};

Loaded load_data(const DataOptions& o, const std::string& fallback_group = "") {
  if (o.synth == !o.manifest.empty()) throw UsageError("give exactly one of --manifest or --synth");
  Loaded L;
  L.synthetic = o.synth;
  Dataset full;
  SplitSpec split = SplitSpec::ratio(o.split_seed);
  std::string group = o.group.empty() ? fallback_group : o.group;
  if (o.synth) {
    SynthConfig c;
    if (!o.synth_config.empty()) {
      std::ifstream in(o.synth_config);
      if (!in) throw ConfigError("cannot open synthetic config " + o.synth_config);
      json j = c;
      try {
        j.merge_patch(json::parse(in));
        c = j.get<SynthConfig>();
      } catch (const json::exception& e) {
        throw ConfigError("synthetic config " + o.synth_config + ": " + e.what());
      }
    }
    full = synth_generate(c);
    if (group.empty()) group = "poor";
    L.ref = {{"synth", c}};
  } else {
    if (!fs::exists(o.manifest)) throw ConfigError("manifest not found: " + o.manifest);
    const auto m = load_manifest(o.manifest);
    std::vector<std::string> warnings;
    full = load_dataset(m, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
    split = m.split_spec(o.split_seed);
    if (group.empty()) throw ConfigError("--group is required with --manifest");
    L.ref = {{"manifest", fs::absolute(o.manifest).string()}};
  }
  L.ref["group"] = group;
  L.ref["split_seed"] = o.split_seed;
  L.data = prepare_data(full, split, group);
  return L;
}

RunConfig make_config(const Loaded& L, const ArchOptions& a, const TrainOptions& t,
                      const std::optional<ModelSpec>& teacher_spec = std::nullopt) {
  RunConfig cfg = default_run_config(L.data, L.synthetic);
  if (teacher_spec) {
    cfg.teacher_spec = *teacher_spec;
  } else {
    if (a.filters) cfg.teacher_spec.n_filters = *a.filters;
    if (a.width) cfg.teacher_spec.filter_width = *a.width;
    if (a.stride) cfg.teacher_spec.stride = *a.stride;
    if (a.hidden) cfg.teacher_spec.n_hidden = *a.hidden;
  }
  cfg.teacher_spec.validate();
  if (cfg.teacher_spec.n_channels != L.data.rich.train.n_channels() ||
      cfg.teacher_spec.n_segments != L.data.rich.train.n_segments ||
      cfg.teacher_spec.segment_len != L.data.rich.train.segment_len ||
      cfg.teacher_spec.n_classes != L.data.rich.train.n_classes()) {
    throw AlignmentError("teacher spec does not match the dataset shape");
  }
  cfg.student_spec = derive_student_spec(cfg.teacher_spec, L.data.projection.indices.size());
  if (t.temperature) cfg.temperature = *t.temperature;
  cfg.max_iterations = t.iterations;
  cfg.unit = t.unit == "steps" ? IterationUnit::kSteps : IterationUnit::kEpochs;
  cfg.patience = t.patience;
  if (t.warmup) cfg.warmup = *t.warmup;
  cfg.lr = t.lr;
  cfg.batch_size = t.batch;
  cfg.early_stop_metric = t.metric == "roc_auc" ? EarlyStopMetric::kRocAuc : EarlyStopMetric::kPrAuc;
  cfg.teacher_t1 = t.teacher_t1;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Output

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

fs::path ensure_dir(const std::string& out) {
  if (out.empty()) throw UsageError("--out is required");
  fs::create_directories(out);
  return out;
}

json run_record(const std::string& command, const std::vector<std::string>& argv, const Loaded& L,
                const RunConfig& cfg, unsigned precision) {
  return {{"command", command}, {"argv", argv},       {"precision", precision},
          {"data", L.ref},      {"config", cfg},      {"config_hash", config_hash(cfg)}};
}

const Dataset& split_of(const Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "valid") return s.valid;
  if (name == "test") return s.test;
  throw ConfigError("unknown split '" + name + "' (train, valid, test)");
}

// Rich view for checkpoints with the rich channel count, poor view otherwise.
const Splits& view_for(const ModelSpec& spec, const ExperimentData& d) {
  if (spec.n_channels == d.rich.train.n_channels()) return d.rich;
  if (spec.n_channels == d.poor.train.n_channels()) return d.poor;
  throw AlignmentError("checkpoint expects " + std::to_string(spec.n_channels) +
                       " channels, data offers " + std::to_string(d.rich.train.n_channels()) +
                       " (rich) or " + std::to_string(d.poor.train.n_channels()) + " (poor)");
}

std::string ckpt_group(const fs::path& path) {
  const auto header = peek_checkpoint_header(read_file_bytes(path), path.string());
  const auto& extra = header.at("extra");
  return extra.is_object() && extra.contains("group") ? extra.at("group").get<std::string>() : "";
}

// ---------------------------------------------------------------------------
// Commands

struct TeacherCmd {
  DataOptions data;
  ArchOptions arch;
  TrainOptions train;
  std::uint64_t seed = 0;
  std::string out;
};

template <class Real>
int train_teacher_cmd(const TeacherCmd& o, const std::vector<std::string>& argv, unsigned precision) {
  const auto L = load_data(o.data);
  auto cfg = make_config(L, o.arch, o.train);
  cfg.teacher_seed = o.seed;
  const auto dir = ensure_dir(o.out);
  auto t = train_teacher<Real>(L.data.rich.train, L.data.rich.valid, cfg, o.seed);
  const auto bundle = build_bundle(t.model, {&L.data.rich.train, &L.data.rich.valid}, cfg.temperature);
  auto eval = evaluate(t.model, L.data.rich.test, o.seed);

  auto ckpt = make_checkpoint<Real>(t.model, nullptr, &t.optimizer, "teacher", "teacher");
  ckpt.config_hash = config_hash(cfg);
  ckpt.seed = o.seed;
  ckpt.rng_seed = o.seed;
  ckpt.extra = {{"group", L.ref["group"]}, {"temperature", cfg.temperature},
                {"eval_data_hash", dataset_hash(L.data.rich.test)}};
  save_checkpoint(dir / "teacher.ckpt", ckpt);
  bundle.save((dir / "bundle.json").string());
  write_file(dir / "teacher_log.jsonl", log_lines(t.log));
  write_file(dir / "teacher_log.txt", epochs_table(t.log));
  write_json(dir / "teacher_eval.json", eval);
  write_file(dir / "teacher_eval.txt", eval_table(eval));
  write_json(dir / "run.json", run_record("train-teacher", argv, L, cfg, precision));
  std::cout << "teacher: " << t.log.epochs.size() << " epochs, best " << t.log.best_epoch
            << ", test roc_auc " << fmt_num(eval.roc_auc) << " pr_auc " << fmt_num(eval.pr_auc)
            << "\nwrote " << (dir / "teacher.ckpt").string() << ", " << (dir / "bundle.json").string() << '\n';
  return kExitOk;
}

struct StudentCmd {
  DataOptions data;
  ArchOptions arch;
  TrainOptions train;
  std::string mode;
  std::string bundle;
  std::string teacher;
  std::string seeds = "0";
  std::size_t jobs = 1;
  std::string out;
};

template <class Real>
int train_student_cmd(const StudentCmd& o, const std::vector<std::string>& argv, unsigned precision) {
  const Mode mode = parse_mode(o.mode);
  if (mode == Mode::kTeacher) throw UsageError("use train-teacher for the teacher");
  const auto terms = LossTermSet::for_mode(mode);
  if (!terms.needs_bundle() && !o.bundle.empty()) {
    throw ConfigError("mode " + o.mode + " trains on labels only and does not take --bundle");
  }
  if (terms.needs_bundle() && o.bundle.empty()) {
    throw ConfigError("mode " + o.mode + " requires --bundle (the teacher's distillation bundle)");
  }
  const auto seeds = parse_seeds(o.seeds);
  std::optional<Checkpoint<Real>> teacher;
  if (!o.teacher.empty()) teacher = load_checkpoint<Real>(o.teacher);
  const auto L = load_data(o.data, o.teacher.empty() ? "" : ckpt_group(o.teacher));
  std::optional<DistillBundle> bundle;
  if (!o.bundle.empty()) bundle = DistillBundle::load(o.bundle);
  TrainOptions train = o.train;
  if (!train.temperature && bundle) train.temperature = bundle->temperature();
  auto cfg = make_config(L, o.arch, train, teacher ? std::optional<ModelSpec>(teacher->spec) : std::nullopt);
  cfg.terms = terms;
  if (teacher) cfg.teacher_seed = teacher->seed;
  const auto dir = ensure_dir(o.out);

  std::optional<Predictions> teacher_preds;
  if (teacher) teacher_preds = predict(restore_model(*teacher), L.data.rich.test);
  const std::string eval_hash = dataset_hash(L.data.poor.valid) + dataset_hash(L.data.poor.test);

  std::vector<CellResult> cells(seeds.size());
  parallel_for(seeds.size(), o.jobs, [&](std::size_t i) {
    RunConfig c = cfg;
    c.seeds = {seeds[i]};
    auto st = train_student<Real>(L.data.poor.train, L.data.poor.valid, bundle ? &*bundle : nullptr, c, seeds[i]);
    CellResult cell;
    cell.mode = o.mode;
    cell.seed = seeds[i];
    cell.config_hash = json_hash({{"mode", o.mode}, {"config", c}});
    cell.eval_data_hash = eval_hash;
    cell.log = st.log;
    cell.test = evaluate(st.model, L.data.poor.test, seeds[i]);
    if (teacher_preds) cell.attention_kl = mean_attention_kl(predict(st.model, L.data.poor.test), *teacher_preds);
    const std::string stem = o.mode + "-seed" + std::to_string(seeds[i]) + "-" + cell.config_hash.substr(0, 8);
    auto ckpt = make_checkpoint(st.model, terms.comb ? &st.head : nullptr, &st.optimizer, "student", o.mode);
    ckpt.config_hash = cell.config_hash;
    ckpt.seed = seeds[i];
    ckpt.rng_seed = seeds[i];
    ckpt.extra = {{"group", L.ref["group"]}, {"temperature", c.temperature},
                  {"eval_data_hash", dataset_hash(L.data.poor.test)}};
    save_checkpoint(dir / (stem + ".ckpt"), ckpt);
    write_file(dir / (stem + "_log.jsonl"), log_lines(st.log));
    write_file(dir / (stem + "_log.txt"), epochs_table(st.log));
    cells[i] = std::move(cell);
  });

  const auto sums = summarize(cells);
  write_json(dir / "results.json", {{"cells", cells}, {"summary", sums}});
  write_file(dir / "results.txt", cells_table(cells) + "\n" + summary_table(sums));
  write_json(dir / "run.json", run_record("train-student", argv, L, cfg, precision));
  std::cout << cells_table(cells) << '\n' << summary_table(sums);
  return kExitOk;
}

struct SweepCmd {
  DataOptions data;
  ArchOptions arch;
  TrainOptions train;
  std::string modes = "teacher,direct,kd,rdpd-r1,rdpd-r2,rdpd";
  std::string axis = "none";
  std::vector<double> values;
  std::string seeds = "0";
  std::size_t jobs = 1;
  bool retrain_teacher = false;
  std::string noise = "normal";
  std::uint64_t teacher_seed = 0;
  std::string out;
};

std::vector<Mode> parse_modes(const std::string& s) {
  std::vector<Mode> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(parse_mode(tok));
  }
  if (out.empty()) throw ConfigError("no modes requested");
  return out;
}

template <class Real>
int sweep_cmd(const SweepCmd& o, const std::vector<std::string>& argv, unsigned precision) {
  const auto axis = parse_axis(o.axis);
  const auto values = o.values.empty() ? default_sweep_values(axis) : o.values;
  validate_sweep_values(axis, values);
  const auto modes = parse_modes(o.modes);
  const auto seeds = parse_seeds(o.seeds);
  const auto L = load_data(o.data);
  auto cfg = make_config(L, o.arch, o.train);
  cfg.teacher_seed = o.teacher_seed;
  const auto dir = ensure_dir(o.out);
  fs::create_directories(dir / "cells");

  ExperimentOptions opt;
  opt.jobs = o.jobs;
  opt.retrain_teacher_per_seed = o.retrain_teacher;
  opt.noise_kind = o.noise == "uniform" ? NoiseKind::kUniform : NoiseKind::kNormal;
  StudentSink<Real> sink = [&](const CellResult& c, const StudentResult<Real>&) {
    const std::string stem = c.mode + "-seed" + std::to_string(c.seed) + "-" + c.config_hash.substr(0, 12);
    write_file(dir / "cells" / (stem + "_log.jsonl"), log_lines(c.log));
  };
  const auto cells = run_sweep<Real>(L.data, cfg, axis, values, modes, seeds, opt, sink);
  const auto sums = summarize(cells);

  std::string jsonl;
  for (const auto& c : cells) jsonl += json(c).dump() + '\n';
  write_file(dir / "cells.jsonl", jsonl);
  write_file(dir / "cells.txt", cells_table(cells));
  write_json(dir / "summary.json", sums);
  write_file(dir / "summary.txt", summary_table(sums));
  write_json(dir / "run.json", run_record("sweep", argv, L, cfg, precision));
  std::cout << summary_table(sums);
  return kExitOk;
}

struct DumpCmd {
  DataOptions data;
  std::vector<std::string> ckpts;
  std::string split = "test";
  std::vector<std::uint64_t> ids;
  std::size_t first = 5;
  std::string out;
};

template <class Real>
int dump_attention_cmd(const DumpCmd& o) {
  std::vector<Checkpoint<Real>> ckpts;
  for (const auto& p : o.ckpts) ckpts.push_back(load_checkpoint<Real>(p));
  std::string group;
  for (const auto& p : o.ckpts) {
    if (group.empty()) group = ckpt_group(p);
  }
  const auto L = load_data(o.data, group);
  std::vector<Model<Real>> models;
  for (const auto& c : ckpts) models.push_back(restore_model(c));
  std::vector<std::pair<std::string, const Model<Real>*>> named;
  std::vector<const Dataset*> views;
  for (std::size_t i = 0; i < models.size(); ++i) {
    named.emplace_back(fs::path(o.ckpts[i]).stem().string(), &models[i]);
    views.push_back(&split_of(view_for(ckpts[i].spec, L.data), o.split));
  }
  auto ids = o.ids;
  if (ids.empty()) {
    const auto all = split_of(L.data.poor, o.split).ids();
    ids.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min(o.first, all.size())));
  }
  const auto rows = dump_attention<Real>(named, views, ids);

  std::vector<std::vector<std::string>> table;
  for (const auto& r : rows) {
    std::string att, probs;
    for (double a : r.attention) att += (att.empty() ? "" : " ") + fmt_num(a);
    for (double p : r.probs) probs += (probs.empty() ? "" : " ") + fmt_num(p);
    table.push_back({std::to_string(r.sample_id), r.model, std::to_string(r.label), att, probs});
  }
  const auto text = aligned_table({"sample", "model", "label", "attention", "probs"}, table);
  if (!o.out.empty()) {
    const auto dir = ensure_dir(o.out);
    write_json(dir / "attention.json", rows);
    write_file(dir / "attention.txt", text);
  }
  std::cout << text;
  return kExitOk;
}

struct EvalCmd {
  DataOptions data;
  std::string ckpt;
  std::string split = "test";
  std::string out;
};

template <class Real>
int eval_cmd(const EvalCmd& o) {
  const auto c = load_checkpoint<Real>(o.ckpt);
  const auto L = load_data(o.data, ckpt_group(o.ckpt));
  const auto stored_group = ckpt_group(o.ckpt);
  if (!stored_group.empty() && stored_group != L.ref["group"].get<std::string>()) {
    throw ConfigError("checkpoint was trained on group '" + stored_group + "', not '" +
                      L.ref["group"].get<std::string>() + "'");
  }
  const auto& d = split_of(view_for(c.spec, L.data), o.split);
  if (o.split == "test" && c.extra.contains("eval_data_hash") && c.extra["eval_data_hash"] != dataset_hash(d)) {
    std::cerr << "warning: test split differs from the one seen at training time\n";
  }
  const auto r = evaluate(restore_model(c), d, c.seed);
  if (!o.out.empty()) {
    const auto dir = ensure_dir(o.out);
    write_json(dir / "eval.json", r);
    write_file(dir / "eval.txt", eval_table(r));
  }
  std::cout << eval_table(r);
  return kExitOk;
}

template <class F>
int dispatch(unsigned precision, F&& f) {
  return precision == 64 ? f(double{}) : f(float{});
}

std::string modes_help() {
  std::string s = "Modes and the loss terms they train with:\n";
  for (Mode m : all_modes()) {
    s += "  " + mode_name(m) + std::string(10 - mode_name(m).size(), ' ') +
         (m == Mode::kTeacher ? std::string("cross-entropy on rich data") : LossTermSet::for_mode(m).describe()) +
         "\n";
  }
  return s + "Environment: DISTILL_PRECISION=32|64 (default 32).\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher/student distillation from rich to poor multichannel time series"};
  app.footer(modes_help());
  app.require_subcommand(1);
  const std::vector<std::string> args(argv, argv + argc);

  TeacherCmd tc;
  auto* t = app.add_subcommand("train-teacher", "Train the teacher on the rich view and build its bundle");
  add_data_options(t, tc.data);
  add_arch_options(t, tc.arch);
  add_train_options(t, tc.train);
  t->add_option("--seed", tc.seed, "Teacher seed");
  t->add_option("--out", tc.out, "Output directory")->required();

  StudentCmd sc;
  auto* s = app.add_subcommand("train-student", "Train students on the poor view");
  add_data_options(s, sc.data);
  add_arch_options(s, sc.arch);
  add_train_options(s, sc.train);
  s->add_option("--mode", sc.mode, "direct, kd, rdpd-r1, rdpd-r2 or rdpd")->required();
  s->add_option("--bundle", sc.bundle, "Distillation bundle from train-teacher");
  s->add_option("--teacher", sc.teacher, "Teacher checkpoint (architecture and attention KL)");
  s->add_option("--seeds", sc.seeds, "Seeds, e.g. 0-9 or 1,3");
  s->add_option("--jobs", sc.jobs, "Parallel seeds");
  s->add_option("--out", sc.out, "Output directory")->required();

  SweepCmd wc;
  auto* w = app.add_subcommand("sweep", "Run the (sweep value x mode x seed) matrix");
  add_data_options(w, wc.data);
  add_arch_options(w, wc.arch);
  add_train_options(w, wc.train);
  w->add_option("--modes,--mode", wc.modes, "Comma-separated modes");
  w->add_option("--sweep", wc.axis, "none, rich-fraction, noise-amp or temperature");
  w->add_option("--values", wc.values, "Sweep values (defaults per axis)");
  w->add_option("--seeds", wc.seeds, "Seeds, e.g. 0-9 or 1,3");
  w->add_option("--jobs", wc.jobs, "Parallel cells");
  w->add_flag("--retrain-teacher", wc.retrain_teacher, "Retrain the teacher for every seed");
  w->add_option("--noise", wc.noise, "Noise distribution")->check(CLI::IsMember({"normal", "uniform"}));
  w->add_option("--teacher-seed", wc.teacher_seed, "Seed of the shared teacher");
  w->add_option("--out", wc.out, "Output directory")->required();

  DumpCmd dc;
  auto* d = app.add_subcommand("dump-attention", "Attention weights and probabilities per sample and model");
  add_data_options(d, dc.data);
  d->add_option("--ckpt", dc.ckpts, "Checkpoints (teacher and/or students)")->required();
  d->add_option("--split", dc.split, "train, valid or test");
  d->add_option("--ids", dc.ids, "Sample ids (default: the first --first of the split)");
  d->add_option("--first", dc.first, "Samples to dump when no ids are given");
  d->add_option("--out", dc.out, "Output directory");

  EvalCmd ec;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  add_data_options(e, ec.data);
  e->add_option("--ckpt", ec.ckpt, "Checkpoint")->required();
  e->add_option("--split", ec.split, "train, valid or test");
  e->add_option("--out", ec.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const unsigned precision = precision_from_env();
    auto with_precision = [&](auto&& run) { return dispatch(precision, run); };
    if (*t) return with_precision([&](auto r) { return train_teacher_cmd<decltype(r)>(tc, args, precision); });
    if (*s) return with_precision([&](auto r) { return train_student_cmd<decltype(r)>(sc, args, precision); });
    if (*w) return with_precision([&](auto r) { return sweep_cmd<decltype(r)>(wc, args, precision); });
    if (*d || *e) {
      const std::string path = *d ? dc.ckpts.front() : ec.ckpt;
      const unsigned stored = checkpoint_precision(path);
      if (*d) return dispatch(stored, [&](auto r) { return dump_attention_cmd<decltype(r)>(dc); });
      return dispatch(stored, [&](auto r) { return eval_cmd<decltype(r)>(ec); });
    }
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const DataError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  } catch (const FormatError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  } catch (const UndefinedMetricError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "internal error: " << err.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}
