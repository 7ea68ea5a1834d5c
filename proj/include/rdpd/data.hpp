#pragma once

// Dataset ingestion and preparation: sliding-window framing, segmentation,
// channel projection to the poor view, noise injection, rich-data
// subsampling, subject-disjoint splits, and a synthetic rich/poor generator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdpd/errors.hpp"

namespace rdpd {

// ---------------------------------------------------------------------------
// Core types

struct RawRecording {
  std::string subject_id;
  std::vector<std::string> channel_names;
  std::vector<std::vector<double>> channels;  // D series of equal length; NaN = missing
  double sample_rate_hz = 1;
  std::vector<int> labels;  // one per time step; negative = unlabeled

  std::size_t length() const { return channels.empty() ? 0 : channels.front().size(); }

  void validate(std::size_t n_classes) const {
    for (const auto& c : channels) {
      if (c.size() != length()) throw DataError(subject_id + ": channels differ in length");
    }
    if (labels.size() != length()) throw DataError(subject_id + ": label column length mismatch");
    for (int l : labels) {
      if (l >= static_cast<int>(n_classes)) {
        throw DataError(subject_id + ": label " + std::to_string(l) + " out of range");
      }
    }
  }
};

// A framed window, row-major [length x n_channels].
struct Window {
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t n_channels = 0;
  std::vector<double> values;
  std::size_t label = 0;
};

// One sample: [M x S x D] row-major plus its class.
struct SegmentedSeries {
  std::vector<double> values;
  std::size_t n_segments = 0;
  std::size_t segment_len = 0;
  std::size_t n_channels = 0;
  std::size_t label = 0;
  std::size_t n_classes = 0;
  std::string subject_id;
  std::size_t window_index = 0;
  std::uint64_t id = 0;

  std::size_t numel() const { return n_segments * segment_len * n_channels; }

  double at(std::size_t m, std::size_t s, std::size_t d) const {
    return values[(m * segment_len + s) * n_channels + d];
  }

  std::vector<double> one_hot() const {
    std::vector<double> y(n_classes, 0.0);
    y.at(label) = 1.0;
    return y;
  }

  void validate() const {
    if (values.size() != numel()) throw ShapeError("segmented series element count mismatch");
    if (label >= n_classes) throw DataError("segmented series label out of range");
  }
};

struct ChannelProjection {
  std::string name;
  std::vector<std::size_t> indices;

  static ChannelProjection from_names(const std::string& name,
                                      const std::vector<std::string>& wanted,
                                      const std::vector<std::string>& available) {
    ChannelProjection p{name, {}};
    for (const auto& w : wanted) {
      auto it = std::find(available.begin(), available.end(), w);
      if (it == available.end()) throw DataError("unknown channel '" + w + "'");
      p.indices.push_back(static_cast<std::size_t>(it - available.begin()));
    }
    return p;
  }

  void validate(std::size_t n_channels) const {
    if (indices.empty()) throw ConfigError("channel projection '" + name + "' is empty");
    std::set<std::size_t> seen;
    for (auto i : indices) {
      if (i >= n_channels) {
        throw DataError("projection '" + name + "' references channel " + std::to_string(i) +
                        " of " + std::to_string(n_channels));
      }
      if (!seen.insert(i).second) throw ConfigError("projection '" + name + "' repeats a channel");
    }
  }

  bool strict_subset_of(std::size_t n_channels) const { return indices.size() < n_channels; }
};

struct Dataset {
  std::vector<SegmentedSeries> samples;
  std::vector<std::string> channel_names;
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<std::string>> groups;
  std::size_t n_segments = 0;
  std::size_t segment_len = 0;

  std::size_t size() const { return samples.size(); }
  std::size_t n_channels() const { return channel_names.size(); }
  std::size_t n_classes() const { return class_names.size(); }

  std::vector<std::string> subjects() const {
    std::vector<std::string> out;
    for (const auto& s : samples) {
      if (std::find(out.begin(), out.end(), s.subject_id) == out.end()) out.push_back(s.subject_id);
    }
    return out;
  }

  std::vector<std::uint64_t> ids() const {
    std::vector<std::uint64_t> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.id);
    return out;
  }

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }

  // Same metadata, no samples.
  Dataset empty_like() const {
    Dataset d = *this;
    d.samples.clear();
    return d;
  }

  ChannelProjection group(const std::string& name) const {
    auto it = groups.find(name);
    if (it == groups.end()) throw ConfigError("unknown channel group '" + name + "'");
    return ChannelProjection::from_names(name, it->second, channel_names);
  }
};

// ---------------------------------------------------------------------------
// Framing and segmentation

namespace detail {

// Fills NaN gaps by linear interpolation; leading/trailing gaps take the
// nearest observed value. Returns false if nothing was observed.
inline bool interpolate_gaps(std::vector<double>& v) {
  std::vector<std::size_t> known;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isnan(v[i])) known.push_back(i);
  }
  if (known.empty()) return false;
  for (std::size_t i = 0; i < known.front(); ++i) v[i] = v[known.front()];
  for (std::size_t i = known.back() + 1; i < v.size(); ++i) v[i] = v[known.back()];
  for (std::size_t k = 0; k + 1 < known.size(); ++k) {
    const std::size_t a = known[k], b = known[k + 1];
    for (std::size_t i = a + 1; i < b; ++i) {
      const double t = static_cast<double>(i - a) / static_cast<double>(b - a);
      v[i] = v[a] + t * (v[b] - v[a]);
    }
  }
  return true;
}

}  // namespace detail

inline constexpr double kMaxMissingFraction = 0.2;

// Every fully contained window at offsets 0, step, 2*step, ... Windows whose
// labels lack a strict majority, or with more than 20% missing values in any
// channel, are dropped. A window longer than the recording yields no windows
// and a warning.
inline std::vector<Window> frame_windows(const RawRecording& rec, std::size_t window_len,
                                         std::size_t step,
                                         std::vector<std::string>* warnings = nullptr) {
  if (window_len == 0 || step == 0) throw ConfigError("window length and step must be positive");
  std::vector<Window> out;
  const std::size_t len = rec.length();
  if (window_len > len) {
    const std::string msg = "recording '" + rec.subject_id + "' (" + std::to_string(len) +
                            " samples) is shorter than one window (" +
                            std::to_string(window_len) + ")";
    if (warnings) {
      warnings->push_back(msg);
    } else {
      std::clog << "warning: " << msg << '\n';
    }
    return out;
  }
  const std::size_t D = rec.channels.size();
  const auto max_missing =
      static_cast<std::size_t>(std::floor(kMaxMissingFraction * static_cast<double>(window_len)));
  for (std::size_t off = 0; off + window_len <= len; off += step) {
    std::map<int, std::size_t> votes;
    for (std::size_t t = off; t < off + window_len; ++t) {
      if (rec.labels[t] >= 0) ++votes[rec.labels[t]];
    }
    int label = -1;
    for (const auto& [l, n] : votes) {
      if (2 * n > window_len) label = l;
    }
    if (label < 0) continue;

    Window w{off, window_len, D, std::vector<double>(window_len * D), static_cast<std::size_t>(label)};
    bool keep = true;
    for (std::size_t d = 0; d < D && keep; ++d) {
      std::vector<double> col(rec.channels[d].begin() + static_cast<std::ptrdiff_t>(off),
                              rec.channels[d].begin() + static_cast<std::ptrdiff_t>(off + window_len));
      const auto missing = static_cast<std::size_t>(
          std::count_if(col.begin(), col.end(), [](double x) { return std::isnan(x); }));
      if (missing > max_missing || !detail::interpolate_gaps(col)) {
        keep = false;
        break;
      }
      for (std::size_t t = 0; t < window_len; ++t) w.values[t * D + d] = col[t];
    }
    if (keep) out.push_back(std::move(w));
  }
  return out;
}

// [l x D] -> [M x S x D] with M = l / S. Row-major layouts coincide, so the
// values are reinterpreted in place.
inline SegmentedSeries segment(const Window& w, std::size_t segment_len, std::size_t n_classes) {
  if (segment_len == 0 || w.length % segment_len != 0) {
    throw ConfigError("window length " + std::to_string(w.length) +
                      " is not divisible by segment length " + std::to_string(segment_len));
  }
  SegmentedSeries s;
  s.values = w.values;
  s.n_segments = w.length / segment_len;
  s.segment_len = segment_len;
  s.n_channels = w.n_channels;
  s.label = w.label;
  s.n_classes = n_classes;
  s.validate();
  return s;
}

inline SegmentedSeries project_channels(const SegmentedSeries& x, const ChannelProjection& proj) {
  proj.validate(x.n_channels);
  SegmentedSeries out = x;
  const std::size_t rows = x.n_segments * x.segment_len;
  const std::size_t Dp = proj.indices.size();
  out.n_channels = Dp;
  out.values.assign(rows * Dp, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < Dp; ++k) {
      out.values[r * Dp + k] = x.values[r * x.n_channels + proj.indices[k]];
    }
  }
  return out;
}

inline Dataset project_dataset(const Dataset& d, const ChannelProjection& proj) {
  proj.validate(d.n_channels());
  Dataset out = d.empty_like();
  out.channel_names.clear();
  for (auto i : proj.indices) out.channel_names.push_back(d.channel_names[i]);
  out.groups.clear();
  out.samples.reserve(d.samples.size());
  for (const auto& s : d.samples) out.samples.push_back(project_channels(s, proj));
  return out;
}

// ---------------------------------------------------------------------------
// Noise and subsampling

// "random_normal(-1,1)" is read as a standard normal by default; kUniform
// draws from U(-1, 1) instead.
enum class NoiseKind { kNormal, kUniform };

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline SegmentedSeries inject_noise(const SegmentedSeries& x, double amp, std::uint64_t seed,
                                    NoiseKind kind = NoiseKind::kNormal) {
  if (!(amp >= 0)) throw ConfigError("noise amplitude must be non-negative");
  SegmentedSeries out = x;
  if (amp == 0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  for (auto& v : out.values) v += amp * (kind == NoiseKind::kNormal ? normal(rng) : uniform(rng));
  return out;
}

// Noise on the listed channels of every sample, seeded per sample id.
inline Dataset inject_noise(const Dataset& d, double amp, std::uint64_t seed,
                            const std::vector<std::size_t>& channels,
                            NoiseKind kind = NoiseKind::kNormal) {
  Dataset out = d;
  if (amp == 0) return out;
  for (auto& s : out.samples) {
    SegmentedSeries noise = s;
    std::fill(noise.values.begin(), noise.values.end(), 0.0);
    noise = inject_noise(noise, amp, mix_seed(seed, s.id), kind);
    for (std::size_t r = 0; r < s.n_segments * s.segment_len; ++r) {
      for (auto c : channels) s.values[r * s.n_channels + c] += noise.values[r * s.n_channels + c];
    }
  }
  return out;
}

// Keeps round(fraction * n_s) windows of each subject s (at least one),
// chosen by a seeded shuffle; surviving windows keep their original order.
inline Dataset subsample_rich(const Dataset& train, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw ConfigError("rich-data fraction must be in (0, 1]");
  if (fraction == 1) return train;
  std::mt19937_64 rng(seed);
  std::vector<bool> keep(train.size(), false);
  for (const auto& subject : train.subjects()) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (train.samples[i].subject_id == subject) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size()))));
    for (std::size_t k = 0; k < n && k < idx.size(); ++k) keep[idx[k]] = true;
  }
  Dataset out = train.empty_like();
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (keep[i]) out.samples.push_back(train.samples[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  enum class Kind { kFixed, kRatio };
  Kind kind = Kind::kRatio;
  std::vector<std::string> valid_subjects;  // fixed mode
  std::vector<std::string> test_subjects;   // fixed mode
  double train_ratio = 0.8;
  double valid_ratio = 0.1;
  double test_ratio = 0.1;
  std::uint64_t seed = 0;

  static SplitSpec fixed(std::vector<std::string> valid, std::vector<std::string> test) {
    SplitSpec s;
    s.kind = Kind::kFixed;
    s.valid_subjects = std::move(valid);
    s.test_subjects = std::move(test);
    return s;
  }

  static SplitSpec ratio(std::uint64_t seed, double train = 0.8, double valid = 0.1,
                         double test = 0.1) {
    SplitSpec s;
    s.seed = seed;
    s.train_ratio = train;
    s.valid_ratio = valid;
    s.test_ratio = test;
    return s;
  }
};

struct Splits {
  Dataset train;
  Dataset valid;
  Dataset test;
};

inline Splits split_by_subject(const Dataset& d, const SplitSpec& spec) {
  const auto subjects = d.subjects();
  std::set<std::string> valid, test;
  if (spec.kind == SplitSpec::Kind::kFixed) {
    valid.insert(spec.valid_subjects.begin(), spec.valid_subjects.end());
    test.insert(spec.test_subjects.begin(), spec.test_subjects.end());
    for (const auto& s : valid) {
      if (test.count(s)) throw ConfigError("subject '" + s + "' assigned to both valid and test");
    }
    for (const auto& set : {valid, test}) {
      for (const auto& s : set) {
        if (std::find(subjects.begin(), subjects.end(), s) == subjects.end()) {
          throw ConfigError("split names unknown subject '" + s + "'");
        }
      }
    }
  } else {
    const double total = spec.train_ratio + spec.valid_ratio + spec.test_ratio;
    if (std::abs(total - 1.0) > 1e-9 || spec.train_ratio <= 0 || spec.valid_ratio <= 0 ||
        spec.test_ratio <= 0) {
      throw ConfigError("split ratios must be positive and sum to 1");
    }
    if (subjects.size() < 3) {
      throw ConfigError("subject-disjoint split needs at least 3 subjects, found " +
                        std::to_string(subjects.size()));
    }
    std::vector<std::string> order = subjects;
    std::sort(order.begin(), order.end());
    std::mt19937_64 rng(spec.seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n = static_cast<double>(order.size());
    auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.test_ratio * n)));
    auto n_valid =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.valid_ratio * n)));
    if (n_test + n_valid >= order.size()) {
      throw ConfigError("too few subjects for the requested split ratios");
    }
    for (std::size_t i = 0; i < n_test; ++i) test.insert(order[i]);
    for (std::size_t i = n_test; i < n_test + n_valid; ++i) valid.insert(order[i]);
  }
  Splits out{d.empty_like(), d.empty_like(), d.empty_like()};
  for (const auto& s : d.samples) {
    if (test.count(s.subject_id)) {
      out.test.samples.push_back(s);
    } else if (valid.count(s.subject_id)) {
      out.valid.samples.push_back(s);
    } else {
      out.train.samples.push_back(s);
    }
  }
  if (out.train.size() == 0 || out.valid.size() == 0 || out.test.size() == 0) {
    throw ConfigError("split leaves an empty partition");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standardization

// Per-channel z-scoring with statistics from the training split only.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Dataset& train) {
    const std::size_t D = train.n_channels();
    Standardizer z{std::vector<double>(D, 0.0), std::vector<double>(D, 1.0)};
    std::vector<double> sum(D, 0.0), sq(D, 0.0);
    std::size_t n = 0;
    for (const auto& s : train.samples) {
      const std::size_t rows = s.n_segments * s.segment_len;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t d = 0; d < D; ++d) {
          const double v = s.values[r * D + d];
          sum[d] += v;
          sq[d] += v * v;
        }
      }
      n += rows;
    }
    if (n == 0) return z;
    for (std::size_t d = 0; d < D; ++d) {
      z.mean[d] = sum[d] / static_cast<double>(n);
      const double var = sq[d] / static_cast<double>(n) - z.mean[d] * z.mean[d];
      z.stddev[d] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return z;
  }

  void apply(Dataset& d) const {
    const std::size_t D = mean.size();
    if (d.n_channels() != D) throw ShapeError("standardizer channel count mismatch");
    for (auto& s : d.samples) {
      for (std::size_t i = 0; i < s.values.size(); ++i) {
        const std::size_t c = i % D;
        s.values[i] = (s.values[i] - mean[c]) / stddev[c];
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Manifest-driven ingestion

struct Manifest {
  std::string name;
  double sample_rate_hz = 1;
  double window_seconds = 1;
  double step_seconds = 1;
  std::size_t segment_len = 1;
  std::vector<std::string> channels;
  std::map<std::string, std::vector<std::string>> groups;
  std::vector<std::string> classes;
  std::vector<std::string> valid_subjects;  // optional fixed split
  std::vector<std::string> test_subjects;
  std::filesystem::path data_dir;

  std::size_t window_len() const {
    return static_cast<std::size_t>(std::llround(window_seconds * sample_rate_hz));
  }
  std::size_t step_len() const {
    return static_cast<std::size_t>(std::llround(step_seconds * sample_rate_hz));
  }

  void validate() const {
    if (channels.empty()) throw ConfigError("manifest lists no channels");
    if (classes.size() < 2) throw ConfigError("manifest needs at least two classes");
    if (!(sample_rate_hz > 0) || !(window_seconds > 0) || !(step_seconds > 0)) {
      throw ConfigError("manifest rates and durations must be positive");
    }
    if (window_len() == 0 || step_len() == 0) throw ConfigError("window or step rounds to zero samples");
    if (segment_len == 0 || window_len() % segment_len != 0) {
      throw ConfigError("window of " + std::to_string(window_len()) +
                        " samples is not divisible by S = " + std::to_string(segment_len));
    }
    for (const auto& [g, names] : groups) {
      for (const auto& n : names) {
        if (std::find(channels.begin(), channels.end(), n) == channels.end()) {
          throw ConfigError("group '" + g + "' names unknown channel '" + n + "'");
        }
      }
    }
  }

  SplitSpec split_spec(std::uint64_t seed) const {
    if (!valid_subjects.empty() || !test_subjects.empty()) {
      return SplitSpec::fixed(valid_subjects, test_subjects);
    }
    return SplitSpec::ratio(seed);
  }
};

inline Manifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  Manifest m;
  try {
    m.name = j.value("name", "dataset");
    j.at("sample_rate_hz").get_to(m.sample_rate_hz);
    j.at("window_seconds").get_to(m.window_seconds);
    j.at("step_seconds").get_to(m.step_seconds);
    j.at("S").get_to(m.segment_len);
    j.at("channels").get_to(m.channels);
    if (j.contains("groups")) j.at("groups").get_to(m.groups);
    j.at("classes").get_to(m.classes);
    if (j.contains("split")) {
      m.valid_subjects = j["split"].value("valid", std::vector<std::string>{});
      m.test_subjects = j["split"].value("test", std::vector<std::string>{});
    }
    m.data_dir = base_dir / j.value("data_dir", std::string("."));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
  m.validate();
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
  return parse_manifest(j, path.parent_path());
}

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, delim)) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
    while (!field.empty() && field.front() == ' ') field.erase(field.begin());
    out.push_back(field);
  }
  if (!line.empty() && line.back() == delim) out.emplace_back();
  return out;
}

inline bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NaN" || s == "nan" || s == "NA" || s == "?";
}

}  // namespace detail

// Reads one subject file: a header row naming the columns, then one row per
// time step. Channel columns may appear in any order; `label` holds a class
// name or index.
inline RawRecording read_subject_file(const std::filesystem::path& path, const Manifest& m) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open subject file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  const char delim = line.find('\t') != std::string::npos ? '\t' : ',';
  const auto header = detail::split_fields(line, delim);
  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(path.string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> cols;
  for (const auto& c : m.channels) cols.push_back(column(c));
  const std::size_t label_col = column("label");

  RawRecording rec;
  rec.subject_id = path.stem().string();
  rec.channel_names = m.channels;
  rec.channels.assign(m.channels.size(), {});
  rec.sample_rate_hz = m.sample_rate_hz;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_fields(line, delim);
    if (f.size() != header.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields");
    }
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const auto& tok = f[cols[k]];
      double v = std::numeric_limits<double>::quiet_NaN();
      if (!detail::is_missing_token(tok)) {
        try {
          v = std::stod(tok);
        } catch (const std::exception&) {
          throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad value '" + tok + "'");
        }
      }
      rec.channels[k].push_back(v);
    }
    const auto& lt = f[label_col];
    int label = -1;
    if (!detail::is_missing_token(lt)) {
      auto it = std::find(m.classes.begin(), m.classes.end(), lt);
      if (it != m.classes.end()) {
        label = static_cast<int>(it - m.classes.begin());
      } else {
        try {
          label = std::stoi(lt);
        } catch (const std::exception&) {
          throw DataError(path.string() + ":" + std::to_string(line_no) + ": unknown label '" + lt + "'");
        }
      }
    }
    rec.labels.push_back(label);
  }
  rec.validate(m.classes.size());
  return rec;
}

// Frames and segments every `*.csv` / `*.tsv` file in the manifest's data
// directory, one subject per file, in sorted filename order.
inline Dataset load_dataset(const Manifest& m, std::vector<std::string>* warnings = nullptr) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(m.data_dir)) {
    throw DataError("data directory " + m.data_dir.string() + " does not exist");
  }
  for (const auto& e : std::filesystem::directory_iterator(m.data_dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".csv" || ext == ".tsv")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no subject files in " + m.data_dir.string());

  Dataset d;
  d.channel_names = m.channels;
  d.class_names = m.classes;
  d.groups = m.groups;
  d.segment_len = m.segment_len;
  d.n_segments = m.window_len() / m.segment_len;
  std::uint64_t next_id = 0;
  for (const auto& f : files) {
    const auto rec = read_subject_file(f, m);
    const auto windows = frame_windows(rec, m.window_len(), m.step_len(), warnings);
    for (std::size_t k = 0; k < windows.size(); ++k) {
      auto s = segment(windows[k], m.segment_len, m.classes.size());
      s.subject_id = rec.subject_id;
      s.window_index = k;
      s.id = next_id++;
      d.samples.push_back(std::move(s));
    }
  }
  if (d.samples.empty()) throw DataError("no usable windows in " + m.data_dir.string());
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic rich/poor task

// Each window carries one class event in a random segment. The informative
// channels hold the class template there at amplitude `snr` and distractor
// templates of random classes in the other segments. The poor channel sees
// the event only through `leak` times a blend of the templates, plus a
// class-agnostic marker of amplitude `marker` that locates it, and its other
// segments carry distractors at the leak amplitude. With probability
// `label_noise` the recorded label is redrawn at random. The rich view is
// strictly more informative than the poor one.
struct SynthConfig {
  std::size_t n_subjects = 10;
  std::size_t windows_per_subject = 200;
  std::size_t n_channels = 4;  // D_rich
  std::vector<std::size_t> informative_channels{0, 1, 2};
  std::size_t poor_channel = 3;
  double snr = 1.5;
  double leak = 1.5;
  double marker = 1.0;
  double distractor = 1.0;       // poor-channel distractor amplitude relative to leak
  double rich_distractor = 1.0;  // informative-channel distractor amplitude relative to snr
  double label_noise = 0.3;      // probability a recorded label is redrawn at random
  double subject_gain_spread = 0.2;
  std::size_t n_segments = 4;
  std::size_t segment_len = 32;
  std::size_t n_classes = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_subjects == 0 || windows_per_subject == 0) throw ConfigError("synth: empty dataset");
    if (n_channels < 2) throw ConfigError("synth: need at least two channels");
    if (poor_channel >= n_channels) throw ConfigError("synth: poor channel out of range");
    if (informative_channels.empty()) throw ConfigError("synth: no informative channels");
    for (auto c : informative_channels) {
      if (c >= n_channels || c == poor_channel) {
        throw ConfigError("synth: informative channels must be rich-only channels");
      }
    }
    if (n_classes < 2 || n_segments == 0 || segment_len < 2) throw ConfigError("synth: bad shape");
    if (!(snr >= 0) || !(leak >= 0) || !(marker >= 0)) throw ConfigError("synth: negative amplitude");
    if (!(label_noise >= 0 && label_noise <= 1)) throw ConfigError("synth: label_noise must be in [0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"n_subjects", c.n_subjects},
                     {"windows_per_subject", c.windows_per_subject},
                     {"n_channels", c.n_channels},
                     {"informative_channels", c.informative_channels},
                     {"poor_channel", c.poor_channel},
                     {"snr", c.snr},
                     {"leak", c.leak},
                     {"marker", c.marker},
                     {"distractor", c.distractor},
                     {"rich_distractor", c.rich_distractor},
                     {"label_noise", c.label_noise},
                     {"subject_gain_spread", c.subject_gain_spread},
                     {"n_segments", c.n_segments},
                     {"S", c.segment_len},
                     {"n_classes", c.n_classes},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.n_subjects = j.value("n_subjects", d.n_subjects);
  c.windows_per_subject = j.value("windows_per_subject", d.windows_per_subject);
  c.n_channels = j.value("n_channels", d.n_channels);
  c.informative_channels = j.value("informative_channels", d.informative_channels);
  c.poor_channel = j.value("poor_channel", d.poor_channel);
  c.snr = j.value("snr", d.snr);
  c.leak = j.value("leak", d.leak);
  c.marker = j.value("marker", d.marker);
  c.distractor = j.value("distractor", d.distractor);
  c.rich_distractor = j.value("rich_distractor", d.rich_distractor);
  c.label_noise = j.value("label_noise", d.label_noise);
  c.subject_gain_spread = j.value("subject_gain_spread", d.subject_gain_spread);
  c.n_segments = j.value("n_segments", d.n_segments);
  c.segment_len = j.value("S", d.segment_len);
  c.n_classes = j.value("n_classes", d.n_classes);
  c.seed = j.value("seed", d.seed);
}

namespace detail {

// Class templates over one segment: Hann-windowed sinusoids, one frequency
// per class and a class/channel-specific phase. Returns [C][n_inf][S].
inline std::vector<std::vector<std::vector<double>>> synth_templates(const SynthConfig& c) {
  std::mt19937_64 rng(mix_seed(c.seed, 0x7e3a));
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
  const std::size_t S = c.segment_len;
  std::vector<std::vector<std::vector<double>>> t(c.n_classes);
  for (std::size_t k = 0; k < c.n_classes; ++k) {
    const double freq = 2.0 + 2.0 * static_cast<double>(k);  // cycles per segment
    for (std::size_t ch = 0; ch < c.informative_channels.size(); ++ch) {
      const double ph = phase(rng);
      std::vector<double> v(S);
      for (std::size_t s = 0; s < S; ++s) {
        const double u = static_cast<double>(s) / static_cast<double>(S - 1);
        const double env = std::pow(std::sin(std::numbers::pi * u), 2);
        v[s] = env * std::sqrt(2.0) *
               std::sin(2 * std::numbers::pi * freq * static_cast<double>(s) / static_cast<double>(S) + ph);
      }
      t[k].push_back(std::move(v));
    }
  }
  return t;
}

}  // namespace detail

inline Dataset synth_generate(const SynthConfig& c) {
  c.validate();
  const auto templates = detail::synth_templates(c);
  const std::size_t D = c.n_channels, M = c.n_segments, S = c.segment_len;
  const std::size_t n_inf = c.informative_channels.size();

  Dataset d;
  for (std::size_t ch = 0; ch < D; ++ch) {
    d.channel_names.push_back(ch == c.poor_channel ? "poor" : "ch" + std::to_string(ch));
  }
  for (std::size_t k = 0; k < c.n_classes; ++k) d.class_names.push_back("class" + std::to_string(k));
  d.groups["poor"] = {"poor"};
  d.groups["all"] = d.channel_names;
  d.n_segments = M;
  d.segment_len = S;

  std::uint64_t next_id = 0;
  for (std::size_t subj = 0; subj < c.n_subjects; ++subj) {
    std::mt19937_64 rng(mix_seed(c.seed, 1000 + subj));
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double gain = 1.0 + c.subject_gain_spread * unit(rng);
    // Balanced labels: each class equally often, shuffled.
    std::vector<std::size_t> labels(c.windows_per_subject);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % c.n_classes;
    std::shuffle(labels.begin(), labels.end(), rng);
    for (std::size_t w = 0; w < c.windows_per_subject; ++w) {
      SegmentedSeries s;
      s.n_segments = M;
      s.segment_len = S;
      s.n_channels = D;
      s.n_classes = c.n_classes;
      s.label = labels[w];
      s.subject_id = "s" + std::to_string(subj);
      s.window_index = w;
      s.id = next_id++;
      s.values.resize(M * S * D);
      for (auto& v : s.values) v = noise(rng);
      const std::size_t event = std::uniform_int_distribution<std::size_t>(0, M - 1)(rng);
      for (std::size_t m = 0; m < M; ++m) {
        const bool is_event = m == event;
        const std::size_t cls =
            is_event ? s.label : std::uniform_int_distribution<std::size_t>(0, c.n_classes - 1)(rng);
        for (std::size_t t = 0; t < S; ++t) {
          const std::size_t row = m * S + t;
          double blend = 0;
          for (std::size_t k = 0; k < n_inf; ++k) {
            const double v = templates[cls][k][t];
            blend += v;
            const double amp = is_event ? 1.0 : c.rich_distractor;
            s.values[row * D + c.informative_channels[k]] += gain * c.snr * amp * v;
          }
          blend /= std::sqrt(static_cast<double>(n_inf));
          double poor = c.leak * blend * (is_event ? 1.0 : c.distractor);
          if (is_event) {
            const double u = static_cast<double>(t) / static_cast<double>(S - 1);
            poor += c.marker * std::pow(std::sin(std::numbers::pi * u), 2);
          }
          s.values[row * D + c.poor_channel] += gain * poor;
        }
      }
      // Annotation noise: the signal follows the true class, the recorded
      // label is redrawn uniformly with probability label_noise.
      if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < c.label_noise) {
        s.label = std::uniform_int_distribution<std::size_t>(0, c.n_classes - 1)(rng);
      }
      d.samples.push_back(std::move(s));
    }
  }
  return d;
}

}  // namespace rdpd
