#pragma once

// Property checks over the distillation losses, shared by unit tests and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "rdpd/distill.hpp"
#include "rdpd/layers.hpp"
#include "support/gradcheck.hpp"

namespace rdpd::oracle {

struct LossFixture {
  Model<double> model;
  CombineHead<double> head;
  Tensor<double> x, y;
  BundleBatch<double> bundle;
  double temperature;
};

inline LossFixture make_loss_fixture(std::uint64_t seed, double temperature = 3.0) {
  ModelSpec s;
  s.n_channels = 1;
  s.n_segments = 3;
  s.segment_len = 5;
  s.n_filters = 2;
  s.filter_width = 2;
  s.stride = 1;
  s.n_hidden = 4;
  s.n_classes = 4;
  std::mt19937_64 rng(seed);
  const std::size_t B = 5;
  std::vector<double> y(B * 4, 0.0);
  for (std::size_t b = 0; b < B; ++b) y[b * 4 + rng() % 4] = 1.0;
  LossFixture f{Model<double>(s, seed),
                CombineHead<double>(4),
                Tensor<double>::constant({B, 3, 5, 1}, random_values(B * 15, rng)),
                Tensor<double>::constant({B, 4}, y),
                {random_distribution(B, 4, rng, false), random_distribution(B, 3, rng, false),
                 temperature},
                temperature};
  f.head.w1.mutable_data()[0] = std::uniform_real_distribution<>(-1, 1)(rng);
  f.head.w2.mutable_data()[0] = std::uniform_real_distribution<>(-1, 1)(rng);
  for (auto& b : f.head.b.mutable_data()) b = std::uniform_real_distribution<>(-1, 1)(rng);
  return f;
}

// Largest |student_loss - sum of separately computed enabled terms| over
// every preset.
inline double additivity_error(std::uint64_t seed) {
  auto f = make_loss_fixture(seed);
  const auto fwd = forward(f.x, f.model);
  const double T = f.temperature;
  const double att = attention_loss(fwd.attention, f.bundle.attention).item();
  const double hard = hard_loss(fwd.logits, f.y).item();
  const double soft = soft_loss(fwd.logits, f.bundle.soft, T, T).item();
  const double comb =
      comb_loss(combined_label(softmax(fwd.logits, 1.0), softmax(fwd.logits, T), f.head), f.y).item();
  double worst = 0;
  for (const auto& terms : {LossTermSet::direct(), LossTermSet::kd(), LossTermSet::rdpd_r1(),
                            LossTermSet::rdpd_r2(), LossTermSet::rdpd()}) {
    const auto l = student_loss(fwd, f.y, &f.bundle, &f.head, terms, T);
    const double want = (terms.att ? att : 0) + (terms.hard ? hard : 0) + (terms.soft ? soft : 0) +
                        (terms.comb ? comb : 0);
    worst = std::max(worst, std::abs(l.total.item() - want));
    worst = std::max(worst, std::abs(l.att + l.hard + l.soft + l.comb - want));
  }
  return worst;
}

// Counts violations of KL >= 0 and CE(y, p) >= CE(y, y) on random pairs,
// including pairs with exact zeros.
inline std::size_t divergence_violations(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t C = 2 + rng() % 6;
    auto draw = [&] {
      std::vector<double> v(C);
      double s = 0;
      for (auto& x : v) s += x = (rng() % 5 == 0) ? 0.0 : std::uniform_real_distribution<>(0, 1)(rng);
      if (s == 0) v[0] = s = 1;
      for (auto& x : v) x /= s;
      return Tensor<double>::constant({C}, v);
    };
    auto p = draw(), q = draw();
    if (kl_divergence(p, q).item() < 0) ++bad;
    if (cross_entropy(p, q).item() < cross_entropy(p, p).item() - 1e-12) ++bad;
  }
  return bad;
}

// |d soft_loss / d O_p| for student logits [1, -1] against the teacher
// distribution softmax([0.5, -0.5], T).
inline double soft_gradient_norm(double T) {
  Tape<double> tape;
  TapeScope<double> scope(&tape);
  auto o = Tensor<double>::parameter({1, 2}, {1, -1});
  auto target = softmax(Tensor<double>::constant({1, 2}, {0.5, -0.5}), T);
  backward(soft_loss(o, target, T, T));
  return std::hypot(o.grad()[0], o.grad()[1]);
}

inline double soft_gradient_spread(const std::vector<double>& temps) {
  double lo = INFINITY, hi = 0;
  for (double t : temps) {
    const double g = soft_gradient_norm(t);
    lo = std::min(lo, g);
    hi = std::max(hi, g);
  }
  return hi / lo;
}

}  // namespace rdpd::oracle
