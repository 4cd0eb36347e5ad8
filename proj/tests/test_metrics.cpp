#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "echoxflow/metrics.hpp"
#include "support.hpp"

using namespace exfl;

namespace {

double brute_alias(double a, double b, double nu) {
  double best = INFINITY;
  for (int k = -10; k <= 10; ++k) best = std::min(best, std::abs(a - b + 2.0 * k * nu));
  return best / nu;
}

Tensor<float> random_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<float>(u(rng));
  return t;
}

// 9-value population std at each pixel with replicated edges.
double window_std(const Tensor<float>& v, std::size_t t, long i, long j) {
  const long h = static_cast<long>(v.dim(1)), w = static_cast<long>(v.dim(2));
  double vals[9];
  int n = 0;
  for (long a = i - 1; a <= i + 1; ++a)
    for (long b = j - 1; b <= j + 1; ++b)
      vals[n++] = v(t, std::clamp(a, 0L, h - 1), std::clamp(b, 0L, w - 1));
  double m = 0;
  for (double x : vals) m += x / 9;
  double s = 0;
  for (double x : vals) s += (x - m) * (x - m) / 9;
  return std::sqrt(s);
}

}  // namespace

TEST(AliasDistance, Examples) {
  EXPECT_EQ(alias_distance(0.3, 0.3, 0.6), 0.0);
  EXPECT_NEAR(alias_distance(0.6, -0.6, 0.6), 0.0, 1e-15);
  EXPECT_NEAR(alias_distance(0.5, -0.4, 0.6), 0.5, 1e-12);
  EXPECT_NEAR(brute_alias(0.5, -0.4, 0.6), 0.5, 1e-12);
  EXPECT_THROW(alias_distance(0, 0, 0), Error);
}

TEST(AliasDistance, MatchesBruteForceAndSymmetries) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> nu_d(0.05, 2.0), u(-1.0, 1.0);
  for (int k = 0; k < 20000; ++k) {
    const double nu = nu_d(rng), a = 4 * nu * u(rng), b = 4 * nu * u(rng);
    const double d = alias_distance(a, b, nu);
    ASSERT_NEAR(d, brute_alias(a, b, nu), 1e-12);
    ASSERT_NEAR(d, alias_distance(b, a, nu), 1e-12);
    ASSERT_NEAR(d, alias_distance(a + 2 * nu, b, nu), 1e-12);
    ASSERT_GE(d, 0.0);
    ASSERT_LE(d, 1.0 + 1e-15);
  }
}

TEST(Task1Loss, IdentityAndGlobalShift) {
  std::mt19937_64 rng(2);
  const auto t = random_tensor(rng, {3, 5, 4}, -0.16, 0.16);
  EXPECT_EQ(task1_loss(t, t, 0.16), 0.0);
  Tensor<float> shifted = t;
  for (auto& v : shifted.storage()) v += 0.32f;
  EXPECT_NEAR(task1_loss(shifted, t, 0.16), 0.0, 1e-6);
}

TEST(Task1Loss, MatchesScalarLoop) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 200; ++k) {
    const Shape s{1 + rng() % 4, 1 + rng() % 8, 1 + rng() % 8};
    const double nu = 0.1 + (rng() % 100) / 100.0;
    const auto p = random_tensor(rng, s, -3 * nu, 3 * nu), t = random_tensor(rng, s, -nu, nu);
    double sum = 0;
    for (std::size_t i = 0; i < p.size(); ++i) sum += brute_alias(p[i], t[i], nu);
    ASSERT_NEAR(task1_loss(p, t, nu), sum / p.size(), 1e-9);
  }
}

TEST(Task1Loss, RegionRestrictsPixels) {
  Tensor<float> p(Shape{2, 1, 2}, 0.0f), t(Shape{2, 1, 2}, 0.0f);
  p(0, 0, 1) = 0.5f;
  p(1, 0, 1) = 0.5f;
  ValidityMask region(Shape{1, 2}, 0);
  region(0, 0) = 1;
  EXPECT_EQ(task1_loss(p, t, 1.0, &region), 0.0);
  EXPECT_NEAR(task1_loss(p, t, 1.0), 0.25, 1e-12);
}

TEST(Turbulence, ConstantAndSinglePixel) {
  const Tensor<float> c(Shape{2, 4, 4}, 0.7f);
  const auto z = turbulence_proxy(c);
  for (float v : z.flat()) EXPECT_NEAR(v, 0.0f, 1e-7);
  Tensor<float> f(Shape{1, 5, 5}, 0.0f);
  f(0, 2, 2) = 0.9f;
  // std of {0.9, 0 x 8}: mean 0.1, variance (0.64 + 8 * 0.01) / 9 = 0.08
  EXPECT_NEAR(turbulence_proxy(f)(0, 2, 2), std::sqrt(0.08), 1e-7);
  EXPECT_NEAR(turbulence_proxy(f)(0, 0, 0), 0.0, 1e-7);
}

TEST(Turbulence, MatchesWindowEnumeration) {
  std::mt19937_64 rng(4);
  for (int k = 0; k < 20; ++k) {
    const auto v = random_tensor(rng, {2, 6, 6}, -1, 1);
    const auto s = turbulence_proxy(v);
    for (std::size_t t = 0; t < 2; ++t)
      for (long i = 0; i < 6; ++i)
        for (long j = 0; j < 6; ++j) ASSERT_NEAR(s(t, i, j), window_std(v, t, i, j), 1e-6);
  }
}

TEST(VelocityMask, Examples) {
  const Tensor<std::uint8_t> box(Shape{2, 2}, 1);
  const auto on = valid_velocity_mask(box, Tensor<float>(Shape{1, 2, 2}, 1.0f), Tensor<float>(Shape{1, 2, 2}, 0.0f));
  for (auto m : on.mask.flat()) EXPECT_EQ(m, 1);
  Tensor<std::uint8_t> half = box;
  half(0, 0) = 0;
  const auto off = valid_velocity_mask(half, Tensor<float>(Shape{1, 2, 2}, 0.0f), Tensor<float>(Shape{1, 2, 2}, 0.0f));
  for (auto m : off.mask.flat()) EXPECT_EQ(m, 0);
  EXPECT_FLOAT_EQ(off.weight(0, 0, 0), 0.01f);  // outside the box
  EXPECT_FLOAT_EQ(off.weight(0, 1, 1), 0.01f);  // floor inside the box
}

TEST(VelocityMask, ThresholdsInclusiveUnlessStrict) {
  const Tensor<std::uint8_t> box(Shape{1, 1}, 1);
  const Tensor<float> p(Shape{1, 1, 1}, 0.3f), b(Shape{1, 1, 1}, 0.4f);
  MaskParams params;
  params.tau_power = 0.3;
  params.tau_bmode = 0.4;
  EXPECT_EQ(valid_velocity_mask(box, p, b, params).mask[0], 1);
  params.strict = true;
  EXPECT_EQ(valid_velocity_mask(box, p, b, params).mask[0], 0);
}

TEST(VelocityMask, TruthTable) {
  std::mt19937_64 rng(5);
  const MaskParams params;
  for (int k = 0; k < 50; ++k) {
    Tensor<std::uint8_t> box(Shape{4, 4});
    for (auto& v : box.storage()) v = rng() % 2;
    const auto p = random_tensor(rng, {1, 4, 4}, 0, 1), b = random_tensor(rng, {1, 4, 4}, 0, 1);
    const auto vm = valid_velocity_mask(box, p, b, params);
    for (std::size_t i = 0; i < 16; ++i) {
      const int row = (box[i] ? 4 : 0) + (p[i] >= 0.3 ? 2 : 0) + (b[i] <= 0.4 ? 1 : 0);
      const bool m = row == 7;
      const double w = row >= 4 ? (m ? 1.01 : 0.01) : 0.01;
      ASSERT_EQ(vm.mask[i], m);
      ASSERT_FLOAT_EQ(vm.weight[i], static_cast<float>(w));
    }
  }
}

TEST(Task2Loss, PerfectAndEmptyMask) {
  std::mt19937_64 rng(6);
  const auto v = random_tensor(rng, {2, 3, 3}, -1, 1), p = random_tensor(rng, {2, 3, 3}, 0, 1);
  const auto s = turbulence_proxy(v);
  Tensor<std::uint8_t> m(v.shape(), 1);
  auto r = task2_loss(v, p, s, v, p, s, m);
  EXPECT_EQ(r.power, 0.0);
  EXPECT_EQ(*r.velocity, 0.0);
  EXPECT_EQ(*r.variation, 0.0);
  const Tensor<std::uint8_t> none(v.shape(), 0);
  const Tensor<float> zero(v.shape(), 0.0f);
  r = task2_loss(zero, zero, zero, v, p, s, none);
  EXPECT_GT(r.power, 0.0);
  EXPECT_FALSE(r.velocity);
  EXPECT_FALSE(r.variation);
}

TEST(Task2Loss, MatchesScalarLoop) {
  std::mt19937_64 rng(7);
  for (int k = 0; k < 200; ++k) {
    const Shape sh{1 + rng() % 4, 1 + rng() % 8, 1 + rng() % 8};
    const auto pv = random_tensor(rng, sh, -1, 1), pp = random_tensor(rng, sh, 0, 1), ps = random_tensor(rng, sh, 0, 1);
    const auto tv = random_tensor(rng, sh, -1, 1), tp = random_tensor(rng, sh, 0, 1), ts = random_tensor(rng, sh, 0, 1);
    Tensor<std::uint8_t> m(sh);
    for (auto& x : m.storage()) x = rng() % 3 == 0;
    double a = 0, b = 0, c = 0;
    int n = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      a += std::abs(double(pp[i]) - tp[i]);
      if (m[i]) {
        b += std::abs(double(pv[i]) - tv[i]);
        c += std::abs(double(ps[i]) - ts[i]);
        ++n;
      }
    }
    const auto r = task2_loss(pv, pp, ps, tv, tp, ts, m);
    ASSERT_NEAR(r.power, a / pv.size(), 1e-9);
    ASSERT_EQ(r.velocity.has_value(), n > 0);
    if (n) {
      ASSERT_NEAR(*r.velocity, b / n, 1e-9);
      ASSERT_NEAR(*r.variation, c / n, 1e-9);
    }
  }
}

TEST(DiceLoss, OneHotAndDisjoint) {
  Tensor<std::uint8_t> ref(Shape{1, 4, 4}, 0);
  for (std::size_t i = 0; i < 4; ++i) ref(0, 1, i) = 1, ref(0, 2, i) = 2;
  auto one_hot = [](const Tensor<std::uint8_t>& lab) {
    Tensor<float> p(Shape{3, lab.dim(0), lab.dim(1), lab.dim(2)}, 0.0f);
    for (std::size_t i = 0; i < lab.size(); ++i) p[lab[i] * lab.size() + i] = 1.0f;
    return p;
  };
  EXPECT_NEAR(masked_dice_loss(one_hot(ref), ref, {true}), 0.0, 1e-6);
  Tensor<std::uint8_t> other(Shape{1, 4, 4}, 0);
  for (std::size_t i = 0; i < 4; ++i) other(0, 0, i) = 1, other(0, 3, i) = 2;
  EXPECT_NEAR(masked_dice_loss(one_hot(other), ref, {true}), 1.0, 1e-6);
  Tensor<float> bad = one_hot(ref);
  bad[0] = 0.5f;
  EXPECT_THROW(masked_dice_loss(bad, ref, {true}), Error);
  EXPECT_THROW(masked_dice_loss(one_hot(ref), ref, {false}), Error);
}

TEST(DiceLoss, MatchesSetCardinalityForHardLabels) {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 100; ++k) {
    Tensor<std::uint8_t> ref(Shape{1, 8, 8}), pred(Shape{1, 8, 8});
    for (auto& v : ref.storage()) v = rng() % 3;
    for (auto& v : pred.storage()) v = rng() % 3;
    Tensor<float> probs(Shape{3, 1, 8, 8}, 0.0f);
    for (std::size_t i = 0; i < 64; ++i) probs[pred[i] * 64 + i] = 1.0f;
    double dice = 0;
    for (int c = 1; c <= 2; ++c) {
      std::set<int> a, b, both;
      for (int i = 0; i < 64; ++i) {
        if (pred[i] == c) a.insert(i);
        if (ref[i] == c) b.insert(i);
        if (pred[i] == c && ref[i] == c) both.insert(i);
      }
      dice += a.size() + b.size() ? 2.0 * both.size() / double(a.size() + b.size()) : 1.0;
    }
    ASSERT_NEAR(masked_dice_loss(probs, ref, {true}), 1.0 - dice / 2, 1e-6);
  }
}

TEST(DiceLoss, SoftMatchesScalarLoopWithWeights) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int k = 0; k < 100; ++k) {
    const std::size_t nt = 1 + rng() % 4, nh = 1 + rng() % 8, nw = 2 + rng() % 7;
    Tensor<std::uint8_t> ref(Shape{nt, nh, nw});
    for (auto& v : ref.storage()) v = rng() % 3;
    Tensor<double> probs(Shape{3, nt, nh, nw});
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const double a = u(rng), b = u(rng), c = u(rng);
      probs(0, i / (nh * nw), (i / nw) % nh, i % nw) = a / (a + b + c);
      probs(1, i / (nh * nw), (i / nw) % nh, i % nw) = b / (a + b + c);
      probs(2, i / (nh * nw), (i / nw) % nh, i % nw) = c / (a + b + c);
    }
    std::vector<bool> ann(nt);
    for (std::size_t t = 0; t < nt; ++t) ann[t] = rng() % 2;
    ann[rng() % nt] = true;
    const auto w = radial_weights(nw);
    double total = 0;
    int frames = 0;
    for (std::size_t t = 0; t < nt; ++t) {
      if (!ann[t]) continue;
      double d = 0;
      for (int c = 1; c <= 2; ++c) {
        double num = 0, den = 0;
        for (std::size_t i = 0; i < nh; ++i)
          for (std::size_t j = 0; j < nw; ++j) {
            const double g = ref(t, i, j) == c;
            num += w[j] * probs(c, t, i, j) * g;
            den += w[j] * (probs(c, t, i, j) + g);
          }
        d += (2 * num + 1e-6) / (den + 1e-6);
      }
      total += 1 - d / 2;
      ++frames;
    }
    ASSERT_NEAR(masked_dice_loss(probs, ref, ann, w), total / frames, 1e-9);
  }
}

TEST(DiceScore, Examples) {
  Tensor<std::uint8_t> a(Shape{1, 4, 4}, 0), b(Shape{1, 4, 4}, 0);
  EXPECT_EQ(dice_score(a, a, {true}), 100.0);  // no foreground in either
  for (int i = 0; i < 4; ++i) a(0, 0, i) = 2;
  b(0, 0, 0) = b(0, 0, 1) = b(0, 1, 0) = b(0, 1, 1) = 2;
  EXPECT_DOUBLE_EQ(dice_score(a, b, {true}), 50.0);
  EXPECT_DOUBLE_EQ(dice_score(a, a, {true}), 100.0);
  Tensor<std::uint8_t> c(Shape{1, 4, 4}, 0);
  for (int i = 0; i < 4; ++i) c(0, 3, i) = 2;
  EXPECT_DOUBLE_EQ(dice_score(a, c, {true}), 0.0);
}

TEST(RadialWeights, Examples) {
  EXPECT_EQ(radial_weights(2), (std::vector<double>{0.001, 1.999}));
  const auto w3 = radial_weights(3);
  EXPECT_EQ(w3, (std::vector<double>{0.001, 1.0, 1.999}));
  for (std::size_t n : {2u, 5u, 64u, 255u, 256u, 4096u}) {
    const auto w = radial_weights(n);
    double m = 0;
    for (double x : w) m += x;
    EXPECT_NEAR(m / n, 1.0, 8 * std::numeric_limits<double>::epsilon());
    for (std::size_t i = 1; i < n; ++i) EXPECT_GT(w[i], w[i - 1]);
    // Linear ramp between the endpoints.
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(w[i], 0.001 + 1.998 * i / (n - 1.0), 1e-12);
  }
  EXPECT_THROW(radial_weights(1), Error);
}

TEST(Baselines, TemporalMean) {
  Tensor<float> s(Shape{2, 1, 3});
  s(1, 0, 0) = 2, s(1, 0, 1) = 2, s(1, 0, 2) = 2;
  const auto mean = temporal_mean_baseline(s);
  for (float v : mean.flat()) EXPECT_EQ(v, 1.0f);
  const Tensor<float> c(Shape{3, 2}, 0.25f);
  EXPECT_EQ(temporal_mean_baseline(c), c);
  const auto tr = training_set_mean_baseline(std::vector<Tensor<float>>{s, Tensor<float>(Shape{1, 1, 3}, 4.0f)}, 5);
  EXPECT_EQ(tr.shape(), (Shape{5, 1, 3}));
  EXPECT_FLOAT_EQ(tr(4, 0, 0), 2.0f);  // (0 + 2 + 4) / 3
}

TEST(VelocityScale, Examples) {
  EXPECT_NEAR(velocity_scale(0.0005, 30), 0.015, 1e-15);
  EXPECT_THROW(velocity_scale(0.0005, 0), Error);
}

TEST(Folds, Aggregate) {
  const std::vector<double> v = {1, 2, 3, 4, 5};
  const auto s = aggregate_folds(v);
  EXPECT_EQ(s.mean, 3.0);
  EXPECT_NEAR(s.std, std::sqrt(2.5), 1e-15);
  EXPECT_NEAR(s.std, 1.5811388300841898, 1e-15);
  const std::vector<double> same(5, 0.7);
  EXPECT_EQ(aggregate_folds(same).std, 0.0);
  EXPECT_THROW(aggregate_folds(std::vector<double>{1, 2, 3, 4}), Error);
}

TEST(Folds, PatientGrouping) {
  std::vector<ExamManifest> ms;
  for (int p = 0; p < 10; ++p) ms.push_back({"e" + std::to_string(p), {"r"}, "p" + std::to_string(p), std::nullopt});
  ms.push_back({"e10", {"r"}, "p3", std::nullopt});
  const auto f = make_patient_folds(ms, 5, 1);
  std::map<int, int> per_fold;
  for (const auto& [pk, fold] : f.by_patient) ++per_fold[fold];
  for (int k = 0; k < 5; ++k) EXPECT_EQ(per_fold[k], 2);
  EXPECT_EQ(f.by_exam.at("e10"), f.by_exam.at("e3"));
  EXPECT_EQ(make_patient_folds(ms, 5, 1).by_exam, f.by_exam);
  ms.push_back({"e11", {"r"}, "", std::nullopt});
  EXPECT_THROW(make_patient_folds(ms, 5, 1), Error);
}

TEST(Filters, Table4Fixtures) {
  auto tissue = test::filter_fixture(Modality::tdi2d, 30, 64);
  EXPECT_TRUE(filter_recording(tissue, Task::tissue).accept);
  auto fast = test::filter_fixture(Modality::tdi2d, 50, 64);
  auto r = filter_recording(fast, Task::tissue);
  EXPECT_FALSE(r.accept);
  EXPECT_EQ(r.reasons, (std::vector<std::string>{"FPS out of [26,33]"}));
  auto short_clip = test::filter_fixture(Modality::tdi2d, 30, 31);
  r = filter_recording(short_clip, Task::tissue);
  EXPECT_FALSE(r.accept);
  EXPECT_EQ(r.reasons.front(), "below 32 frames");
  EXPECT_TRUE(filter_recording(test::filter_fixture(Modality::tdi2d, 30, 32), Task::tissue).accept);

  EXPECT_TRUE(filter_recording(test::filter_fixture(Modality::color2d, 11, 40), Task::color).accept);
  EXPECT_FALSE(filter_recording(test::filter_fixture(Modality::color2d, 11, 40, 0.7), Task::color).accept);
  EXPECT_FALSE(filter_recording(test::filter_fixture(Modality::color2d, 11, 40, 0.605, 10), Task::color).accept);
  EXPECT_TRUE(filter_recording(test::filter_fixture(Modality::color2d, 11, 40, 0.605, 20), Task::color).accept);
  EXPECT_FALSE(filter_recording(test::filter_fixture(Modality::color2d, 20, 40), Task::color).accept);
  EXPECT_THROW(filter_recording(tissue, Task::color), Error);
  EXPECT_FALSE(filter_recording(tissue, Task::segmentation).accept);
}

TEST(Clips, Enumeration) {
  EXPECT_EQ(sample_clips(64), (std::vector<ClipRange>{{0, 32}, {16, 48}, {32, 64}}));
  EXPECT_EQ(sample_clips(32), (std::vector<ClipRange>{{0, 32}}));
  EXPECT_TRUE(sample_clips(31).empty());
}
