#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "rdpd/distill.hpp"
#include "support/loss_checks.hpp"

using namespace rdpd;
using T = Tensor<double>;

namespace {

T row(std::vector<double> v) {
  const auto n = v.size();
  return T::constant({1, n}, std::move(v));
}

double entropy(const T& p) {
  double h = 0;
  for (double v : p.data()) h -= v > 0 ? v * std::log(v) : 0;
  return h;
}

}  // namespace

TEST(TeacherLoss, UniformLogitsGiveLogC) {
  EXPECT_NEAR(teacher_loss(row({0, 0, 0, 0}), row({0, 0, 1, 0}), 1.0).item(), std::log(4.0), 1e-12);
}

TEST(TeacherLoss, ConfidentCorrectIsNearZero) {
  EXPECT_LT(teacher_loss(row({40, 0, 0}), row({1, 0, 0}), 1.0).item(), 1e-12);
}

TEST(TeacherLoss, GrowsWithTemperature) {
  auto o = row({2.0, 0.5, -1.0});
  auto y = row({1, 0, 0});
  double prev = teacher_loss(o, y, 0.5).item();
  for (double t : {1.0, 2.0, 5.0, 10.0}) {
    const double cur = teacher_loss(o, y, t).item();
    EXPECT_GT(cur, prev);
    prev = cur;
  }
}

TEST(TeacherLoss, RejectsNonOneHotLabels) {
  EXPECT_THROW(teacher_loss(row({0, 0}), row({0.5, 0.5}), 1.0), DataError);
  EXPECT_THROW(teacher_loss(row({0, 0}), row({1, 1}), 1.0), DataError);
}

TEST(AttentionLoss, HandCases) {
  EXPECT_NEAR(attention_loss(row({0.2, 0.8}), row({0.2, 0.8})).item(), 0.0, 1e-15);
  EXPECT_NEAR(attention_loss(row({0.5, 0.5}), row({0.25, 0.75})).item(), 0.14384, 5e-6);
}

TEST(AttentionLoss, SegmentMismatchIsAlignmentError) {
  EXPECT_THROW(attention_loss(row({0.5, 0.5}), row({0.2, 0.3, 0.5})), AlignmentError);
}

TEST(AttentionLoss, TeacherGradientStaysZero) {
  Tape<double> tape;
  TapeScope<double> scope(&tape);
  auto ap = T::parameter({1, 3}, {0.2, 0.3, 0.5});
  auto ar = T::parameter({1, 3}, {0.6, 0.3, 0.1});
  backward(attention_loss(ap, ar));
  for (double g : ar.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_NE(ap.grad()[0], 0.0);
}

TEST(HardLoss, InheritsCrossEntropyCases) {
  EXPECT_LT(hard_loss(row({50, 0}), row({1, 0})).item(), 1e-15);
  EXPECT_NEAR(hard_loss(row({0, 0}), row({1, 0})).item(), std::log(2.0), 1e-12);
}

TEST(SoftLoss, MatchedLogitsGiveScaledTeacherEntropy) {
  auto o = row({1.0, -0.5, 0.25});
  for (double t : {1.0, 2.0, 5.0}) {
    auto target = softmax(o, t);
    EXPECT_NEAR(soft_loss(o, target, t, t).item(), t * t * entropy(target), 1e-12);
  }
}

TEST(SoftLoss, UnitTemperatureIsPlainCrossEntropy) {
  auto o = row({0.3, 1.2});
  auto target = row({0.4, 0.6});
  EXPECT_NEAR(soft_loss(o, target, 1.0, 1.0).item(),
              cross_entropy(target, softmax(o, 1.0)).item(), 1e-15);
}

TEST(SoftLoss, TemperatureMismatchIsConfigError) {
  EXPECT_THROW(soft_loss(row({0, 0}), row({0.5, 0.5}), 2.0, 3.0), ConfigError);
}

TEST(SoftLoss, GradientScaleStableAcrossTemperatures) {
  EXPECT_LT(oracle::soft_gradient_spread({1, 2, 5, 10}), 2.0);
}

TEST(SoftLoss, MinimumAtTeacherDistribution) {
  const double t = 2.0;
  auto target = row({0.6, 0.3, 0.1});
  auto o = T::parameter({1, 3}, {0, 0, 0});
  for (int step = 0; step < 4000; ++step) {
    o.zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(&tape);
    backward(soft_loss(o, target, t, t));
    for (std::size_t c = 0; c < 3; ++c) o.mutable_data()[c] -= 0.5 * o.grad()[c];
  }
  NoGradScope<double> off(nullptr);
  auto p = softmax(o, t);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p[c], target[c], 1e-4);
}

TEST(CombinedLabel, ZeroHeadIsUniform) {
  CombineHead<double> h(3);
  h.w1.mutable_data()[0] = 0;
  h.w2.mutable_data()[0] = 0;
  auto p = combined_label(row({0.7, 0.2, 0.1}), row({0.4, 0.4, 0.2}), h);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p[c], 1.0 / 3, 1e-15);
}

TEST(CombinedLabel, ClosedFormSoftmaxOfP1) {
  CombineHead<double> h(2);
  h.w1.mutable_data()[0] = 1;
  h.w2.mutable_data()[0] = 0;
  auto p = combined_label(row({0.9, 0.1}), row({0.5, 0.5}), h);
  EXPECT_NEAR(p[0], 0.6900, 5e-5);
  EXPECT_NEAR(p[1], 0.3100, 5e-5);
}

TEST(CombinedLabel, BiasShiftInvariance) {
  CombineHead<double> h(3);
  h.b.mutable_data()[0] = 0.3;
  h.b.mutable_data()[1] = -0.2;
  auto p1 = row({0.7, 0.2, 0.1});
  auto pt = row({0.4, 0.4, 0.2});
  auto a = combined_label(p1, pt, h);
  for (auto& b : h.b.mutable_data()) b += 4.5;
  auto b = combined_label(p1, pt, h);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a[c], b[c], 1e-14);
}

TEST(CombinedLabel, BroadcastBiasIsScalar) {
  CombineHead<double> h(5, true);
  EXPECT_EQ(h.b.numel(), 1u);
  auto p = combined_label(row({0.2, 0.2, 0.2, 0.2, 0.2}), row({0.1, 0.1, 0.1, 0.1, 0.6}), h);
  double s = 0;
  for (double v : p.data()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(CombinedLabel, AlwaysADistribution) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    CombineHead<double> h(4);
    h.w1.mutable_data()[0] = std::uniform_real_distribution<>(-50, 50)(rng);
    h.w2.mutable_data()[0] = std::uniform_real_distribution<>(-50, 50)(rng);
    for (auto& b : h.b.mutable_data()) b = std::uniform_real_distribution<>(-50, 50)(rng);
    auto p = combined_label(oracle::random_distribution(1, 4, rng, false),
                            oracle::random_distribution(1, 4, rng, false), h);
    double s = 0;
    for (double v : p.data()) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CombinedLabel, GradientReachesHeadAndInputs) {
  std::mt19937_64 rng(8);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CombineHead<double> h(3);
    auto p1 = oracle::random_distribution(2, 3, rng, true);
    auto pt = oracle::random_distribution(2, 3, rng, true);
    const double err = oracle::gradcheck(
        {h.w1, h.w2, h.b, p1, pt},
        [&] { return oracle::project(combined_label(p1, pt, h), seed); }, 1e-5);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(StudentLoss, DirectEqualsHardLossExactly) {
  auto f = oracle::make_loss_fixture(1);
  auto fwd = forward(f.x, f.model);
  auto l = student_loss(fwd, f.y, static_cast<const BundleBatch<double>*>(nullptr),
                        static_cast<const CombineHead<double>*>(nullptr), LossTermSet::direct(), 3.0);
  EXPECT_EQ(l.total.item(), hard_loss(fwd.logits, f.y).item());
  EXPECT_EQ(l.att, 0.0);
  EXPECT_EQ(l.soft, 0.0);
  EXPECT_EQ(l.comb, 0.0);
}

TEST(StudentLoss, AdditivityAcrossPresets) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_LT(oracle::additivity_error(seed), 1e-12);
}

TEST(StudentLoss, KdOnMatchedLogits) {
  auto o = row({0.8, -0.3, 0.1});
  auto y = row({0, 1, 0});
  const double t = 4.0;
  BundleBatch<double> bundle{softmax(o, t), row({1.0}), t};
  ForwardOutput<double> fwd{row({1.0}), o, {}, {}};
  auto l = student_loss(fwd, y, &bundle, static_cast<const CombineHead<double>*>(nullptr),
                        LossTermSet::kd(), t);
  EXPECT_NEAR(l.total.item(), t * t * entropy(softmax(o, t)) + hard_loss(o, y).item(), 1e-12);
}

TEST(StudentLoss, DisabledTermsAllocateNoNodes) {
  auto f = oracle::make_loss_fixture(2);
  Tape<double> tape;
  TapeScope<double> scope(&tape);
  auto fwd = forward(f.x, f.model);
  const auto base = tape.size();
  student_loss(fwd, f.y, &f.bundle, &f.head, LossTermSet::direct(), f.temperature);
  const auto direct_nodes = tape.size() - base;
  tape.clear();
  auto fwd2 = forward(f.x, f.model);
  const auto base2 = tape.size();
  student_loss(fwd2, f.y, &f.bundle, &f.head, LossTermSet::rdpd(), f.temperature);
  EXPECT_GT(tape.size() - base2, direct_nodes);
  // hard: softmax, cross_entropy, then sum and scale for the batch mean.
  EXPECT_EQ(direct_nodes, 4u);
}

TEST(StudentLoss, MissingBundleOrHeadIsConfigError) {
  auto f = oracle::make_loss_fixture(3);
  auto fwd = forward(f.x, f.model);
  const BundleBatch<double>* none = nullptr;
  for (auto terms : {LossTermSet::kd(), LossTermSet::rdpd_r2(), LossTermSet::rdpd()}) {
    EXPECT_THROW(student_loss(fwd, f.y, none, &f.head, terms, f.temperature), ConfigError);
  }
  EXPECT_THROW(student_loss(fwd, f.y, &f.bundle, static_cast<const CombineHead<double>*>(nullptr),
                            LossTermSet::rdpd_r1(), f.temperature),
               ConfigError);
  EXPECT_THROW(student_loss(fwd, f.y, &f.bundle, &f.head, LossTermSet{}, f.temperature), ConfigError);
}

TEST(StudentLoss, BundleTemperatureMismatchIsConfigError) {
  auto f = oracle::make_loss_fixture(3, 2.0);
  auto fwd = forward(f.x, f.model);
  EXPECT_THROW(student_loss(fwd, f.y, &f.bundle, &f.head, LossTermSet::kd(), 5.0), ConfigError);
}

TEST(StudentLoss, AllTermsNonNegative) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto f = oracle::make_loss_fixture(seed);
    auto l = student_loss(forward(f.x, f.model), f.y, &f.bundle, &f.head, LossTermSet::rdpd(),
                          f.temperature);
    EXPECT_GE(l.att, 0.0);
    EXPECT_GE(l.hard, 0.0);
    EXPECT_GE(l.soft, 0.0);
    EXPECT_GE(l.comb, 0.0);
  }
}

TEST(StudentLoss, FrozenBundleReceivesNoGradient) {
  auto f = oracle::make_loss_fixture(5);
  auto soft = T::parameter(f.bundle.soft.shape(), {f.bundle.soft.data().begin(), f.bundle.soft.data().end()});
  auto att = T::parameter(f.bundle.attention.shape(),
                          {f.bundle.attention.data().begin(), f.bundle.attention.data().end()});
  BundleBatch<double> bundle{soft, att, f.temperature};
  Tape<double> tape;
  TapeScope<double> scope(&tape);
  backward(student_loss(forward(f.x, f.model), f.y, &bundle, &f.head, LossTermSet::rdpd(),
                        f.temperature)
               .total);
  for (double g : soft.grad()) EXPECT_EQ(g, 0.0);
  for (double g : att.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_NE(f.head.w1.grad()[0], 0.0);
}

TEST(Divergences, NonNegativityAndGibbsOnRandomDistributions) {
  EXPECT_EQ(oracle::divergence_violations(1000, 17), 0u);
}

TEST(LossTermSet, PresetsAndModeMapping) {
  EXPECT_EQ(LossTermSet::for_mode(Mode::kDirect).describe(), "L_hard");
  EXPECT_EQ(LossTermSet::for_mode(Mode::kKd).describe(), "L_hard + L_soft");
  EXPECT_EQ(LossTermSet::for_mode(Mode::kRdpdR1).describe(), "L_hard + L_soft + L_comb");
  EXPECT_EQ(LossTermSet::for_mode(Mode::kRdpdR2).describe(), "L_att + L_hard + L_soft");
  EXPECT_EQ(LossTermSet::for_mode(Mode::kRdpd).describe(), "L_att + L_hard + L_soft + L_comb");
  EXPECT_THROW(LossTermSet::for_mode(Mode::kTeacher), ConfigError);
  for (Mode m : all_modes()) EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_THROW(parse_mode("bogus"), ConfigError);
  EXPECT_FALSE(LossTermSet::direct().needs_bundle());
  EXPECT_TRUE(LossTermSet::rdpd_r2().needs_bundle());
}

TEST(DistillBundle, RejectsInvalidEntries) {
  DistillBundle b(2.0);
  EXPECT_THROW(b.insert(1, {{0.5, 0.6}, {1.0}}), DataError);
  EXPECT_THROW(b.insert(1, {{0.5, 0.5}, {0.9}}), DataError);
  EXPECT_THROW(b.insert(1, {{-0.5, 1.5}, {1.0}}), DataError);
  EXPECT_THROW(DistillBundle(0.0), ConfigError);
}

TEST(DistillBundle, GatherAlignsByIdAndReportsMissing) {
  DistillBundle b(2.0);
  b.insert(10, {{0.1, 0.9}, {0.5, 0.5}});
  b.insert(20, {{0.7, 0.3}, {0.2, 0.8}});
  auto batch = b.gather<double>({20, 10});
  EXPECT_EQ(batch.soft[0], 0.7);
  EXPECT_EQ(batch.soft[2], 0.1);
  EXPECT_EQ(batch.attention[1], 0.8);
  EXPECT_EQ(batch.temperature, 2.0);
  try {
    b.gather<double>({10, 30, 40});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("30 40"), std::string::npos);
  }
}

TEST(DistillBundle, SaveLoadRoundTrip) {
  DistillBundle b(2.5);
  b.insert(3, {{0.1, 0.2, 0.7}, {0.25, 0.75}});
  b.insert(9, {{1.0 / 3, 1.0 / 3, 1.0 / 3}, {0.6, 0.4}});
  const auto path = std::filesystem::temp_directory_path() / "rdpd_bundle_roundtrip.json";
  b.save(path.string());
  auto c = DistillBundle::load(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(c.temperature(), 2.5);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.at(9).soft, b.at(9).soft);
  EXPECT_EQ(c.at(3).attention, b.at(3).attention);
}

TEST(DistillBundle, RejectsForeignOrNewerFiles) {
  EXPECT_THROW(DistillBundle::from_json({{"format", "other"}}), FormatError);
  EXPECT_THROW(DistillBundle::from_json({{"format", "rdpd-bundle"}, {"version", 9}, {"temperature", 1}}),
               VersionError);
}
