#pragma once

// CNN -> bidirectional LSTM -> segment attention -> dense classifier, shared
// by teacher and student. Inputs are batches shaped [B x M x S x D]: B windows,
// M segments of S steps, D channels.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdpd/autodiff.hpp"
#include "rdpd/errors.hpp"

namespace rdpd {

struct ModelSpec {
  std::size_t n_channels = 1;    // D
  std::size_t n_segments = 1;    // M
  std::size_t segment_len = 1;   // S
  std::size_t n_filters = 1;     // K
  std::size_t filter_width = 1;  // w
  std::size_t stride = 1;
  std::size_t n_hidden = 2;  // U, split evenly across the two LSTM directions
  std::size_t n_classes = 2; // C
  bool dense_bias = true;

  std::size_t conv_out_len() const { return (segment_len - filter_width) / stride + 1; }
  std::size_t hidden_per_direction() const { return n_hidden / 2; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model spec: ") + name + " must be positive");
    };
    positive(n_channels, "n_channels");
    positive(n_segments, "n_segments");
    positive(segment_len, "segment_len");
    positive(n_filters, "n_filters");
    positive(filter_width, "filter_width");
    positive(stride, "stride");
    positive(n_hidden, "n_hidden");
    positive(n_classes, "n_classes");
    if (filter_width > segment_len) {
      throw ConfigError("model spec: filter_width exceeds segment_len");
    }
    if (n_hidden % 2 != 0) throw ConfigError("model spec: n_hidden must be even");
  }

  bool operator==(const ModelSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"n_channels", s.n_channels},   {"n_segments", s.n_segments},
                     {"segment_len", s.segment_len}, {"n_filters", s.n_filters},
                     {"filter_width", s.filter_width}, {"stride", s.stride},
                     {"n_hidden", s.n_hidden},       {"n_classes", s.n_classes},
                     {"dense_bias", s.dense_bias}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  j.at("n_channels").get_to(s.n_channels);
  j.at("n_segments").get_to(s.n_segments);
  j.at("segment_len").get_to(s.segment_len);
  j.at("n_filters").get_to(s.n_filters);
  j.at("filter_width").get_to(s.filter_width);
  j.at("stride").get_to(s.stride);
  j.at("n_hidden").get_to(s.n_hidden);
  j.at("n_classes").get_to(s.n_classes);
  s.dense_bias = j.value("dense_bias", true);
}

// Student architecture for a D_p-channel view: filters and hidden units scale
// with D_p / D_r, everything tied to the window layout stays fixed.
inline ModelSpec derive_student_spec(const ModelSpec& teacher, std::size_t poor_channels) {
  if (poor_channels == 0 || poor_channels >= teacher.n_channels) {
    throw UsageError("student channel count must satisfy 0 < D_p < D_r (D_r = " +
                     std::to_string(teacher.n_channels) + ", D_p = " +
                     std::to_string(poor_channels) + ")");
  }
  const double ratio = static_cast<double>(poor_channels) / static_cast<double>(teacher.n_channels);
  ModelSpec s = teacher;
  s.n_channels = poor_channels;
  s.n_filters = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(static_cast<double>(teacher.n_filters) * ratio)));
  const auto u = std::llround(static_cast<double>(teacher.n_hidden) * ratio);
  // Nearest even value, ties upward, never below 2.
  auto even = static_cast<std::size_t>(2 * std::llround(static_cast<double>(u) / 2.0));
  s.n_hidden = std::max<std::size_t>(2, even);
  return s;
}

struct ParamBreakdown {
  std::size_t conv = 0;
  std::size_t lstm = 0;
  std::size_t attention = 0;
  std::size_t dense = 0;

  std::size_t total() const { return conv + lstm + attention + dense; }
};

inline ParamBreakdown param_breakdown(const ModelSpec& s) {
  const std::size_t H = s.hidden_per_direction();
  ParamBreakdown b;
  b.conv = s.n_filters * s.filter_width * s.n_channels + s.n_filters;
  b.lstm = 2 * (s.n_filters * 4 * H + H * 4 * H + 4 * H);
  b.attention = s.n_hidden;
  b.dense = s.n_hidden * s.n_classes + (s.dense_bias ? s.n_classes : 0);
  return b;
}

inline std::size_t param_count(const ModelSpec& s) { return param_breakdown(s).total(); }

template <class Real>
struct NamedParameter {
  std::string name;
  Tensor<Real> tensor;
};

template <class Real>
struct LstmDirection {
  Tensor<Real> w_x;   // [K x 4H], gate order i, f, g, o
  Tensor<Real> w_h;   // [H x 4H]
  Tensor<Real> bias;  // [4H]
};

template <class Real>
struct ForwardOutput {
  Tensor<Real> attention;  // A: [B x M]
  Tensor<Real> logits;     // O: [B x C]
  Tensor<Real> hidden;     // Q: [B x M x U]
  Tensor<Real> pooled;     // G: [B x U]
};

// Trainable parameters for one ModelSpec. Tensors are shared handles, so
// copies are explicit through clone().
template <class Real>
class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t D = spec_.n_channels, K = spec_.n_filters, w = spec_.filter_width;
    const std::size_t H = spec_.hidden_per_direction(), U = spec_.n_hidden, C = spec_.n_classes;
    conv_w_ = xavier({K, w, D}, w * D, w * K, rng);
    conv_b_ = Tensor<Real>::parameter({K}, std::vector<Real>(K, Real(0)));
    for (auto* dir : {&forward_, &backward_}) {
      dir->w_x = xavier({K, 4 * H}, K, 4 * H, rng);
      dir->w_h = xavier({H, 4 * H}, H, 4 * H, rng);
      std::vector<Real> b(4 * H, Real(0));
      for (std::size_t i = H; i < 2 * H; ++i) b[i] = Real(1);  // forget gate
      dir->bias = Tensor<Real>::parameter({4 * H}, std::move(b));
    }
    att_w_ = xavier({U, 1}, U, 1, rng);
    dense_w_ = xavier({U, C}, U, C, rng);
    if (spec_.dense_bias) dense_b_ = Tensor<Real>::parameter({C}, std::vector<Real>(C, Real(0)));
  }

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Model clone() const {
    Model m(spec_, 0);
    auto dst = m.parameters();
    auto src = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(),
                dst[i].tensor.mutable_data().begin());
    }
    return m;
  }

  const ModelSpec& spec() const { return spec_; }

  std::vector<NamedParameter<Real>> parameters() const {
    std::vector<NamedParameter<Real>> out{{"conv.weight", conv_w_},
                                          {"conv.bias", conv_b_},
                                          {"lstm.forward.w_x", forward_.w_x},
                                          {"lstm.forward.w_h", forward_.w_h},
                                          {"lstm.forward.bias", forward_.bias},
                                          {"lstm.backward.w_x", backward_.w_x},
                                          {"lstm.backward.w_h", backward_.w_h},
                                          {"lstm.backward.bias", backward_.bias},
                                          {"attention.weight", att_w_},
                                          {"dense.weight", dense_w_}};
    if (spec_.dense_bias) out.push_back({"dense.bias", dense_b_});
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  const Tensor<Real>& conv_weight() const { return conv_w_; }
  const Tensor<Real>& conv_bias() const { return conv_b_; }
  const LstmDirection<Real>& lstm_forward() const { return forward_; }
  const LstmDirection<Real>& lstm_backward() const { return backward_; }
  const Tensor<Real>& attention_weight() const { return att_w_; }
  const Tensor<Real>& dense_weight() const { return dense_w_; }
  const Tensor<Real>& dense_bias() const { return dense_b_; }

 private:
  static Tensor<Real> xavier(Shape shape, std::size_t fan_in, std::size_t fan_out,
                             std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<Real> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<Real>(dist(rng));
    return Tensor<Real>::parameter(std::move(shape), std::move(v));
  }

  ModelSpec spec_;
  Tensor<Real> conv_w_, conv_b_;
  LstmDirection<Real> forward_, backward_;
  Tensor<Real> att_w_;
  Tensor<Real> dense_w_, dense_b_;
};

// Shared CNN (ReLU) + mean pooling applied to every segment: [B x M x S x D] -> [B x M x K].
template <class Real>
Tensor<Real> encode_segments(const Tensor<Real>& x, const Model<Real>& model) {
  const ModelSpec& s = model.spec();
  if (x.rank() != 4 || x.dim(1) != s.n_segments || x.dim(2) != s.segment_len ||
      x.dim(3) != s.n_channels) {
    throw ShapeError("encode_segments expects [B x " + std::to_string(s.n_segments) + " x " +
                     std::to_string(s.segment_len) + " x " + std::to_string(s.n_channels) +
                     "], got " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), M = s.n_segments;
  auto flat = reshape(x, {B * M, s.segment_len, s.n_channels});
  auto pooled = mean_pool(relu(conv1d(flat, model.conv_weight(), model.conv_bias(), s.stride)));
  return reshape(pooled, {B, M, s.n_filters});
}

namespace detail {

// One LSTM direction over the segment axis of [B x M x K]; returns the hidden
// state per step, each [B x H], in segment order.
template <class Real>
std::vector<Tensor<Real>> lstm_direction(const Tensor<Real>& h_in, const LstmDirection<Real>& p,
                                         std::size_t H, bool reverse) {
  const std::size_t B = h_in.dim(0), M = h_in.dim(1), K = h_in.dim(2);
  std::vector<Tensor<Real>> outputs(M);
  Tensor<Real> h, c;
  for (std::size_t step = 0; step < M; ++step) {
    const std::size_t j = reverse ? M - 1 - step : step;
    auto x_j = reshape(slice(h_in, 1, j, j + 1), {B, K});
    auto gates = add(matmul(x_j, p.w_x), p.bias);
    if (step > 0) gates = add(gates, matmul(h, p.w_h));
    auto i = sigmoid(slice(gates, 1, 0, H));
    auto g = tanh(slice(gates, 1, 2 * H, 3 * H));
    auto o = sigmoid(slice(gates, 1, 3 * H, 4 * H));
    if (step == 0) {
      c = mul(i, g);  // zero initial cell state
    } else {
      auto f = sigmoid(slice(gates, 1, H, 2 * H));
      c = add(mul(f, c), mul(i, g));
    }
    h = mul(o, tanh(c));
    outputs[j] = h;
  }
  return outputs;
}

}  // namespace detail

// Bidirectional LSTM: [B x M x K] -> Q [B x M x U], forward half first.
template <class Real>
Tensor<Real> bilstm(const Tensor<Real>& h_in, const Model<Real>& model) {
  const ModelSpec& s = model.spec();
  if (h_in.rank() != 3 || h_in.dim(2) != s.n_filters) {
    throw ShapeError("bilstm expects [B x M x " + std::to_string(s.n_filters) + "], got " +
                     shape_str(h_in.shape()));
  }
  const std::size_t B = h_in.dim(0), M = h_in.dim(1), H = s.hidden_per_direction();
  auto fw = detail::lstm_direction(h_in, model.lstm_forward(), H, false);
  auto bw = detail::lstm_direction(h_in, model.lstm_backward(), H, true);
  std::vector<Tensor<Real>> steps;
  steps.reserve(M);
  for (std::size_t j = 0; j < M; ++j) {
    steps.push_back(reshape(concat<Real>({fw[j], bw[j]}, 1), {B, 1, 2 * H}));
  }
  return concat(steps, 1);
}

// A = softmax(Q W) over segments, G = A^T Q. Q: [B x M x U], W: [U x 1].
// Returns {A [B x M], G [B x U]}.
template <class Real>
std::pair<Tensor<Real>, Tensor<Real>> attend(const Tensor<Real>& q, const Tensor<Real>& w) {
  if (q.rank() != 3 || w.rank() != 2 || w.dim(1) != 1 || w.dim(0) != q.dim(2)) {
    throw ShapeError("attend: Q " + shape_str(q.shape()) + " with W " + shape_str(w.shape()));
  }
  const std::size_t B = q.dim(0), M = q.dim(1), U = q.dim(2);
  auto scores = reshape(matmul(reshape(q, {B * M, U}), w), {B, M});
  auto a = softmax(scores, Real(1));
  auto g = reshape(bmm(reshape(a, {B, 1, M}), q), {B, U});
  return {a, g};
}

template <class Real>
ForwardOutput<Real> forward(const Tensor<Real>& x, const Model<Real>& model) {
  auto h = encode_segments(x, model);
  auto q = bilstm(h, model);
  auto [a, g] = attend(q, model.attention_weight());
  auto o = matmul(g, model.dense_weight());
  if (model.spec().dense_bias) o = add(o, model.dense_bias());
  return {a, o, q, g};
}

}  // namespace rdpd
