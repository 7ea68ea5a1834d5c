#pragma once

// Imitation losses for teacher -> student transfer and the learnable
// combined-label head. All losses take batched rows and return the batch
// mean as a [1] tensor.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdpd/autodiff.hpp"
#include "rdpd/errors.hpp"
#include "rdpd/layers.hpp"

namespace rdpd {

enum class Mode { kTeacher, kDirect, kKd, kRdpdR1, kRdpdR2, kRdpd };

inline const std::vector<Mode>& all_modes() {
  static const std::vector<Mode> modes{Mode::kTeacher, Mode::kDirect, Mode::kKd,
                                       Mode::kRdpdR1,  Mode::kRdpdR2, Mode::kRdpd};
  return modes;
}

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kTeacher: return "teacher";
    case Mode::kDirect: return "direct";
    case Mode::kKd: return "kd";
    case Mode::kRdpdR1: return "rdpd-r1";
    case Mode::kRdpdR2: return "rdpd-r2";
    case Mode::kRdpd: return "rdpd";
  }
  return "?";
}

inline Mode parse_mode(const std::string& name) {
  for (Mode m : all_modes()) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown mode '" + name + "'");
}

struct LossTermSet {
  bool att = false;
  bool hard = false;
  bool soft = false;
  bool comb = false;

  static LossTermSet direct() { return {false, true, false, false}; }
  static LossTermSet kd() { return {false, true, true, false}; }
  static LossTermSet rdpd_r1() { return {false, true, true, true}; }
  static LossTermSet rdpd_r2() { return {true, true, true, false}; }
  static LossTermSet rdpd() { return {true, true, true, true}; }

  static LossTermSet for_mode(Mode m) {
    switch (m) {
      case Mode::kDirect: return direct();
      case Mode::kKd: return kd();
      case Mode::kRdpdR1: return rdpd_r1();
      case Mode::kRdpdR2: return rdpd_r2();
      case Mode::kRdpd: return rdpd();
      case Mode::kTeacher: break;
    }
    throw ConfigError("teacher mode has no student loss terms");
  }

  bool needs_bundle() const { return att || soft || comb; }

  void validate() const {
    if (!(att || hard || soft || comb)) throw ConfigError("at least one loss term must be enabled");
  }

  std::string describe() const {
    std::string s;
    auto add = [&s](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += " + ";
      s += name;
    };
    add(att, "L_att");
    add(hard, "L_hard");
    add(soft, "L_soft");
    add(comb, "L_comb");
    return s;
  }

  bool operator==(const LossTermSet&) const = default;
};

inline void to_json(nlohmann::json& j, const LossTermSet& t) {
  j = nlohmann::json{{"att", t.att}, {"hard", t.hard}, {"soft", t.soft}, {"comb", t.comb}};
}

inline void from_json(const nlohmann::json& j, LossTermSet& t) {
  j.at("att").get_to(t.att);
  j.at("hard").get_to(t.hard);
  j.at("soft").get_to(t.soft);
  j.at("comb").get_to(t.comb);
}

// P_comb = softmax(w1 * P_p1 + w2 * P_pT + b). b is per class unless
// broadcast_bias, in which case a single scalar is shared by all classes.
template <class Real>
struct CombineHead {
  Tensor<Real> w1;
  Tensor<Real> w2;
  Tensor<Real> b;

  explicit CombineHead(std::size_t n_classes, bool broadcast_bias = false)
      : w1(Tensor<Real>::parameter({1}, {Real(0.5)})),
        w2(Tensor<Real>::parameter({1}, {Real(0.5)})),
        b(Tensor<Real>::parameter({broadcast_bias ? std::size_t{1} : n_classes},
                                  std::vector<Real>(broadcast_bias ? 1 : n_classes, Real(0)))) {}

  std::vector<NamedParameter<Real>> parameters() const {
    return {{"combine.w1", w1}, {"combine.w2", w2}, {"combine.b", b}};
  }

  void zero_grad() {
    w1.zero_grad();
    w2.zero_grad();
    b.zero_grad();
  }
};

namespace detail {

inline bool is_distribution(const std::vector<double>& v, double tol = 1e-6) {
  double s = 0;
  for (double x : v) {
    if (!(x >= 0) || !std::isfinite(x)) return false;
    s += x;
  }
  return std::abs(s - 1.0) <= tol;
}

template <class Real>
void check_one_hot(const Tensor<Real>& y) {
  const auto [rows, cols] = rows_cols(y.shape());
  const auto v = y.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const Real x = v[r * cols + c];
      if (x == Real(1)) {
        ++ones;
      } else if (x != Real(0)) {
        throw DataError("label row " + std::to_string(r) + " is not one-hot");
      }
    }
    if (ones != 1) throw DataError("label row " + std::to_string(r) + " is not one-hot");
  }
}

}  // namespace detail

// Teacher soft labels and attention for one sample, frozen after teacher
// training.
struct BundleEntry {
  std::vector<double> soft;       // P_{r,T}, length C
  std::vector<double> attention;  // A_r, length M
};

template <class Real>
struct BundleBatch {
  Tensor<Real> soft;       // [B x C]
  Tensor<Real> attention;  // [B x M]
  double temperature = 1;
};

class DistillBundle {
 public:
  DistillBundle() = default;
  explicit DistillBundle(double temperature) : temperature_(temperature) {
    if (!(temperature > 0)) throw ConfigError("bundle temperature must be positive");
  }
  DistillBundle(const DistillBundle& o)
      : temperature_(o.temperature_), entries_(o.entries_), accesses_(o.accesses_.load()) {}
  DistillBundle& operator=(const DistillBundle& o) {
    temperature_ = o.temperature_;
    entries_ = o.entries_;
    accesses_ = o.accesses_.load();
    return *this;
  }

  double temperature() const { return temperature_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(std::uint64_t id) const { return entries_.count(id) != 0; }
  std::size_t access_count() const { return accesses_.load(); }

  void insert(std::uint64_t id, BundleEntry e) {
    if (!detail::is_distribution(e.soft) || !detail::is_distribution(e.attention)) {
      throw DataError("bundle entry " + std::to_string(id) + " is not a valid distribution");
    }
    entries_[id] = std::move(e);
  }

  const BundleEntry& at(std::uint64_t id) const {
    ++accesses_;
    auto it = entries_.find(id);
    if (it == entries_.end()) throw ConfigError("bundle has no entry for sample " + std::to_string(id));
    return it->second;
  }

  const std::map<std::uint64_t, BundleEntry>& entries() const { return entries_; }

  // Sample ids in `ids` that have no entry.
  std::vector<std::uint64_t> missing(const std::vector<std::uint64_t>& ids) const {
    std::vector<std::uint64_t> out;
    for (auto id : ids) {
      if (!contains(id)) out.push_back(id);
    }
    return out;
  }

  template <class Real>
  BundleBatch<Real> gather(const std::vector<std::uint64_t>& ids) const {
    if (ids.empty()) throw UsageError("gather of an empty batch");
    const auto gaps = missing(ids);
    if (!gaps.empty()) {
      std::ostringstream os;
      os << "bundle is missing entries for sample ids:";
      for (auto id : gaps) os << ' ' << id;
      throw ConfigError(os.str());
    }
    const std::size_t C = at(ids.front()).soft.size();
    const std::size_t M = at(ids.front()).attention.size();
    std::vector<Real> soft, att;
    soft.reserve(ids.size() * C);
    att.reserve(ids.size() * M);
    for (auto id : ids) {
      const auto& e = at(id);
      if (e.soft.size() != C || e.attention.size() != M) {
        throw DataError("bundle entries have inconsistent lengths");
      }
      soft.insert(soft.end(), e.soft.begin(), e.soft.end());
      att.insert(att.end(), e.attention.begin(), e.attention.end());
    }
    const std::size_t B = ids.size();
    return {Tensor<Real>::constant({B, C}, std::move(soft)),
            Tensor<Real>::constant({B, M}, std::move(att)), temperature_};
  }

  nlohmann::json to_json() const {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& [id, e] : entries_) {
      items.push_back({{"id", id}, {"soft", e.soft}, {"attention", e.attention}});
    }
    return {{"format", "rdpd-bundle"}, {"version", 1}, {"temperature", temperature_},
            {"entries", items}};
  }

  static DistillBundle from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "rdpd-bundle") throw FormatError("not a distillation bundle");
    if (j.value("version", 0) > 1) throw VersionError("unsupported bundle version");
    DistillBundle b(j.at("temperature").get<double>());
    for (const auto& item : j.at("entries")) {
      b.insert(item.at("id").get<std::uint64_t>(),
               {item.at("soft").get<std::vector<double>>(),
                item.at("attention").get<std::vector<double>>()});
    }
    return b;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write bundle " + path);
    out << to_json().dump() << '\n';
  }

  static DistillBundle load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open bundle " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("bundle " + path + ": " + e.what());
    }
    return from_json(j);
  }

 private:
  double temperature_ = 1;
  std::map<std::uint64_t, BundleEntry> entries_;
  mutable std::atomic<std::size_t> accesses_{0};
};

// ---------------------------------------------------------------------------
// Losses

// CE(Y, softmax(O_r, T)): the teacher is fit against hard labels at the
// distillation temperature.
template <class Real>
Tensor<Real> teacher_loss(const Tensor<Real>& logits, const Tensor<Real>& y, Real temperature) {
  detail::check_one_hot(y);
  return mean(cross_entropy(y, softmax(logits, temperature)));
}

// KL(A_p || A_r) with the teacher attention held fixed.
template <class Real>
Tensor<Real> attention_loss(const Tensor<Real>& student_att, const Tensor<Real>& teacher_att) {
  if (student_att.shape() != teacher_att.shape()) {
    throw AlignmentError("attention shapes differ: student " + shape_str(student_att.shape()) +
                         " vs teacher " + shape_str(teacher_att.shape()) +
                         " (segmentation configs must match)");
  }
  return mean(kl_divergence(student_att, teacher_att.detach()));
}

template <class Real>
Tensor<Real> hard_loss(const Tensor<Real>& logits, const Tensor<Real>& y) {
  detail::check_one_hot(y);
  return mean(cross_entropy(y, softmax(logits, Real(1))));
}

// T^2 * CE(P_rT, softmax(O_p, T)).
template <class Real>
Tensor<Real> soft_loss(const Tensor<Real>& logits, const Tensor<Real>& teacher_soft, Real temperature,
                       double bundle_temperature) {
  if (std::abs(static_cast<double>(temperature) - bundle_temperature) > 1e-9) {
    throw ConfigError("soft loss temperature " + std::to_string(temperature) +
                      " differs from the bundle temperature " + std::to_string(bundle_temperature));
  }
  return scale(mean(cross_entropy(teacher_soft.detach(), softmax(logits, temperature))),
               temperature * temperature);
}

template <class Real>
Tensor<Real> combined_label(const Tensor<Real>& p1, const Tensor<Real>& pt,
                            const CombineHead<Real>& head) {
  if (p1.shape() != pt.shape()) throw ShapeError("combined_label: P_p1 and P_pT shapes differ");
  auto z = add(add(mul(p1, head.w1), mul(pt, head.w2)), head.b);
  return softmax(z, Real(1));
}

template <class Real>
Tensor<Real> comb_loss(const Tensor<Real>& p_comb, const Tensor<Real>& y) {
  detail::check_one_hot(y);
  return mean(cross_entropy(y, p_comb));
}

template <class Real>
struct StudentLoss {
  Tensor<Real> total;
  double att = 0;
  double hard = 0;
  double soft = 0;
  double comb = 0;
};

// Unweighted sum of the enabled terms. Disabled terms record nothing.
template <class Real>
StudentLoss<Real> student_loss(const ForwardOutput<Real>& fwd, const Tensor<Real>& y,
                               const BundleBatch<Real>* bundle, const CombineHead<Real>* head,
                               const LossTermSet& terms, Real temperature) {
  terms.validate();
  if (terms.needs_bundle() && !bundle) {
    throw ConfigError("loss terms " + terms.describe() + " require a distillation bundle");
  }
  if (terms.comb && !head) throw ConfigError("L_comb requires a combine head");
  StudentLoss<Real> out;
  std::vector<Tensor<Real>> parts;
  Tensor<Real> p1, pt;
  if (terms.hard || terms.comb) {
    detail::check_one_hot(y);
    p1 = softmax(fwd.logits, Real(1));
  }
  if (terms.soft || terms.comb) {
    if (std::abs(static_cast<double>(temperature) - bundle->temperature) > 1e-9) {
      throw ConfigError("run temperature differs from the bundle temperature");
    }
    pt = softmax(fwd.logits, temperature);
  }
  if (terms.att) {
    auto l = attention_loss(fwd.attention, bundle->attention);
    out.att = static_cast<double>(l.item());
    parts.push_back(l);
  }
  if (terms.hard) {
    auto l = mean(cross_entropy(y, p1));
    out.hard = static_cast<double>(l.item());
    parts.push_back(l);
  }
  if (terms.soft) {
    auto l = scale(mean(cross_entropy(bundle->soft.detach(), pt)), temperature * temperature);
    out.soft = static_cast<double>(l.item());
    parts.push_back(l);
  }
  if (terms.comb) {
    auto l = mean(cross_entropy(y, combined_label(p1, pt, *head)));
    out.comb = static_cast<double>(l.item());
    parts.push_back(l);
  }
  out.total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out.total = add(out.total, parts[i]);
  return out;
}

}  // namespace rdpd
