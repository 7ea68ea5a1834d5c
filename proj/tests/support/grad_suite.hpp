#pragma once

// Named finite-difference cases over every primitive, the layer stack and
// the distillation losses. Each case builds a random instance from a seed and
// returns the worst relative gradient error.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rdpd/autodiff.hpp"
#include "rdpd/distill.hpp"
#include "rdpd/layers.hpp"
#include "support/gradcheck.hpp"

namespace rdpd::oracle {

inline constexpr double kFdStep = 1e-5;

struct GradCase {
  std::string name;
  std::function<double(std::uint64_t)> run;
};

inline ModelSpec tiny_spec(std::size_t channels = 2) {
  ModelSpec s;
  s.n_channels = channels;
  s.n_segments = 3;
  s.segment_len = 6;
  s.n_filters = 3;
  s.filter_width = 3;
  s.stride = 1;
  s.n_hidden = 4;
  s.n_classes = 3;
  return s;
}

inline Tensor<double> one_hot_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::vector<double> v(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    v[r * cols + std::uniform_int_distribution<std::size_t>(0, cols - 1)(rng)] = 1.0;
  }
  return Tensor<double>::constant({rows, cols}, v);
}

inline std::vector<Tensor<double>> model_tensors(const Model<double>& m) {
  std::vector<Tensor<double>> out;
  for (const auto& p : m.parameters()) out.push_back(p.tensor);
  return out;
}

inline std::vector<GradCase> gradient_cases() {
  using T = Tensor<double>;
  std::vector<GradCase> cases;
  auto unary = [&cases](std::string name, std::function<T(const T&)> f, double lo, double hi) {
    cases.push_back({name, [f, lo, hi](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       auto x = random_param({3, 4}, rng, lo, hi);
                       return gradcheck({x}, [&] { return project(f(x), seed + 1); }, kFdStep);
                     }});
  };
  unary("tanh", [](const T& x) { return tanh(x); }, -2, 2);
  unary("sigmoid", [](const T& x) { return sigmoid(x); }, -3, 3);
  unary("exp", [](const T& x) { return exp(x); }, -1, 1);
  unary("log", [](const T& x) { return log(x); }, 0.2, 2);
  unary("scale", [](const T& x) { return scale(x, 2.5); }, -1, 1);
  // Inputs kept away from the kink at zero.
  unary("relu", [](const T& x) { return relu(x); }, 0.05, 1);
  unary("relu_negative", [](const T& x) { return add(relu(scale(x, -1.0)), x); }, 0.05, 1);
  unary("sum", [](const T& x) { return sum(x); }, -1, 1);
  unary("mean", [](const T& x) { return mean(x); }, -1, 1);
  unary("reshape", [](const T& x) { return reshape(x, {2, 6}); }, -1, 1);
  unary("slice_rows", [](const T& x) { return slice(x, 0, 1, 3); }, -1, 1);
  unary("slice_cols", [](const T& x) { return slice(x, 1, 1, 3); }, -1, 1);
  unary("softmax_T1", [](const T& x) { return softmax(x, 1.0); }, -2, 2);
  unary("softmax_T5", [](const T& x) { return softmax(x, 5.0); }, -2, 2);
  unary("mean_pool", [](const T& x) { return mean_pool(x); }, -1, 1);

  auto binary = [&cases](std::string name, std::function<T(const T&, const T&)> f, Shape sa,
                         Shape sb) {
    cases.push_back({name, [f, sa, sb](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       auto a = random_param(sa, rng);
                       auto b = random_param(sb, rng);
                       return gradcheck({a, b}, [&] { return project(f(a, b), seed + 7); }, kFdStep);
                     }});
  };
  binary("add", [](const T& a, const T& b) { return add(a, b); }, {3, 4}, {3, 4});
  binary("add_broadcast_row", [](const T& a, const T& b) { return add(a, b); }, {3, 4}, {4});
  binary("add_broadcast_scalar", [](const T& a, const T& b) { return add(a, b); }, {3, 4}, {1});
  binary("sub", [](const T& a, const T& b) { return sub(a, b); }, {3, 4}, {3, 4});
  binary("mul", [](const T& a, const T& b) { return mul(a, b); }, {3, 4}, {3, 4});
  binary("mul_broadcast_scalar", [](const T& a, const T& b) { return mul(a, b); }, {3, 4}, {1});
  binary("matmul", [](const T& a, const T& b) { return matmul(a, b); }, {3, 4}, {4, 2});
  binary("bmm", [](const T& a, const T& b) { return bmm(a, b); }, {2, 3, 4}, {2, 4, 2});
  binary("concat_axis0", [](const T& a, const T& b) { return concat<double>({a, b}, 0); }, {2, 3},
         {1, 3});
  binary("concat_axis1", [](const T& a, const T& b) { return concat<double>({a, b}, 1); }, {2, 3},
         {2, 2});

  cases.push_back({"conv1d", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = random_param({7, 2}, rng);
                     auto f = random_param({3, 3, 2}, rng);
                     auto b = random_param({3}, rng);
                     return gradcheck({x, f, b}, [&] { return project(conv1d(x, f, b, 2), seed); },
                                      kFdStep);
                   }});
  cases.push_back({"conv1d_batched", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = random_param({2, 6, 2}, rng);
                     auto f = random_param({2, 2, 2}, rng);
                     auto b = random_param({2}, rng);
                     return gradcheck({x, f, b}, [&] { return project(conv1d(x, f, b, 1), seed); },
                                      kFdStep);
                   }});
  cases.push_back({"cross_entropy", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto y = random_distribution(3, 4, rng, true);
                     auto p = random_distribution(3, 4, rng, true);
                     return gradcheck({y, p}, [&] { return project(cross_entropy(y, p), seed); },
                                      kFdStep);
                   }});
  cases.push_back({"kl_divergence", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto p = random_distribution(3, 4, rng, true);
                     auto q = random_distribution(3, 4, rng, false);
                     return gradcheck({p}, [&] { return project(kl_divergence(p, q), seed); },
                                      kFdStep);
                   }});

  cases.push_back({"bilstm", [](std::uint64_t seed) {
                     ModelSpec s = tiny_spec();
                     s.n_segments = 3;
                     s.n_filters = 2;
                     s.n_hidden = 4;
                     Model<double> m(s, seed);
                     std::mt19937_64 rng(seed + 3);
                     auto h = random_param({2, 3, 2}, rng);
                     auto params = model_tensors(m);
                     params.push_back(h);
                     return gradcheck(params, [&] { return project(bilstm(h, m), seed); }, kFdStep);
                   }});
  cases.push_back({"attend", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto q = random_param({2, 3, 4}, rng);
                     auto w = random_param({4, 1}, rng);
                     return gradcheck({q, w},
                                      [&] {
                                        auto [a, g] = attend(q, w);
                                        return add(project(a, seed), project(g, seed + 1));
                                      },
                                      kFdStep);
                   }});
  cases.push_back({"model_forward", [](std::uint64_t seed) {
                     Model<double> m(tiny_spec(), seed);
                     std::mt19937_64 rng(seed + 11);
                     auto x = T::constant({2, 3, 6, 2}, random_values(72, rng));
                     return gradcheck(model_tensors(m),
                                      [&] {
                                        auto out = forward(x, m);
                                        return add(project(out.logits, seed),
                                                   project(out.attention, seed + 1));
                                      },
                                      kFdStep);
                   }});
  cases.push_back({"teacher_loss", [](std::uint64_t seed) {
                     Model<double> m(tiny_spec(), seed);
                     std::mt19937_64 rng(seed + 5);
                     auto x = T::constant({3, 3, 6, 2}, random_values(108, rng));
                     auto y = one_hot_rows(3, 3, rng);
                     return gradcheck(model_tensors(m),
                                      [&] { return teacher_loss(forward(x, m).logits, y, 2.5); },
                                      kFdStep);
                   }});
  cases.push_back({"student_loss_all_terms", [](std::uint64_t seed) {
                     Model<double> m(tiny_spec(1), seed);
                     CombineHead<double> head(3);
                     std::mt19937_64 rng(seed + 9);
                     head.w1.mutable_data()[0] = 0.3 + 0.4 * std::uniform_real_distribution<>(0, 1)(rng);
                     for (auto& b : head.b.mutable_data()) b = std::uniform_real_distribution<>(-0.3, 0.3)(rng);
                     auto x = T::constant({3, 3, 6, 1}, random_values(54, rng));
                     auto y = one_hot_rows(3, 3, rng);
                     BundleBatch<double> bundle{random_distribution(3, 3, rng, false),
                                                random_distribution(3, 3, rng, false), 2.0};
                     auto params = model_tensors(m);
                     for (const auto& p : head.parameters()) params.push_back(p.tensor);
                     return gradcheck(params,
                                      [&] {
                                        return student_loss(forward(x, m), y, &bundle, &head,
                                                            LossTermSet::rdpd(), 2.0)
                                            .total;
                                      },
                                      kFdStep);
                   }});
  return cases;
}

}  // namespace rdpd::oracle
