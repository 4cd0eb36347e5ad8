#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "echoxflow/metrics.hpp"
#include "echoxflow/phantom.hpp"
#include "support.hpp"

using namespace exfl;
using phantom::PhantomConfig;

namespace {

PhantomConfig quiet(PhantomConfig cfg = {}) {
  cfg.snr_db = INFINITY;
  cfg.include_3d = false;
  cfg.include_stitching = false;
  return cfg;
}

// Contraction fraction written out from the configuration alone (regular rhythm).
double alpha_at(const PhantomConfig& cfg, double t) {
  const double rr = 60.0 / cfg.heart_rate;
  double ph = std::fmod(t - cfg.first_peak, rr) / rr;
  if (ph < 0) ph += 1.0;
  return cfg.motion_amplitude / 0.022 * 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * ph));
}

}  // namespace

TEST(Phantom, ConfigValidation) {
  PhantomConfig cfg;
  cfg.heart_rate = 200;
  EXPECT_THROW(phantom::generate_exam(cfg), Error);
  cfg = {};
  cfg.heart_rate = 29;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.heart_rate = 180;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Phantom, WrapVelocityIntoHalfOpenInterval) {
  EXPECT_EQ(phantom::wrap_velocity(0.6, 0.6), -0.6);
  EXPECT_EQ(phantom::wrap_velocity(-0.6, 0.6), -0.6);
  EXPECT_NEAR(phantom::wrap_velocity(1.0, 0.6), -0.2, 1e-15);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int k = 0; k < 1000; ++k) {
    const double v = u(rng), w = phantom::wrap_velocity(v, 0.6);
    EXPECT_GE(w, -0.6);
    EXPECT_LT(w, 0.6);
    EXPECT_NEAR(alias_distance(v, w, 0.6), 0.0, 1e-12);
  }
}

TEST(Phantom, StaticPhantomHasZeroTdiAndStrain) {
  PhantomConfig cfg = quiet();
  cfg.motion_amplitude = 0.0;
  cfg.snr_db = 30;  // noise is power-relative, so a zero field stays zero
  const auto ex = phantom::generate_exam(cfg);
  for (double v : ex.truth.tissue_velocity_clean.flat()) ASSERT_EQ(v, 0.0);
  for (float v : ex.truth.tissue_velocity_stored.flat()) ASSERT_EQ(v, 0.0f);
  for (double s : ex.truth.endo_strain_percent) ASSERT_EQ(s, 0.0);
  const auto& endo = ex.recordings[0].annotations.contours[0];
  std::vector<Contour2D> frames;
  for (const auto& f : endo.frames) frames.push_back({f, true});
  for (double s : strain_curve(frames)) EXPECT_NEAR(s, 0.0, 1e-9);
}

TEST(Phantom, TissueDopplerIsRadialProjectionOfMotion) {
  const PhantomConfig cfg = quiet();
  const auto ex = phantom::generate_exam(cfg);
  const auto& gt = ex.truth;
  const auto& g = gt.geometry;
  const Point2 c{0.0, 0.065};
  std::size_t in_tissue = 0;
  for (std::size_t f = 0; f < gt.tissue_times.size(); f += 5) {
    const double t = gt.tissue_times[f], h = 1e-6;
    // Material point at x is c + (x - c) / s(t); its velocity is d/dt of
    // c + s(t) (m - c), taken by central difference.
    const double s = 1.0 - alpha_at(cfg, t);
    const double ds = (alpha_at(cfg, t - h) - alpha_at(cfg, t + h)) / (2 * h);
    for (std::size_t b = 0; b < g.n_beams; b += 3)
      for (std::size_t k = 0; k < g.n_samples; k += 3) {
        const Point2 x = beam_to_cartesian(g, b, k);
        const double rho = std::hypot(x.x - c.x, x.z - c.z) / s;
        double expect = 0.0;
        if (rho >= 0.022 && rho <= 0.032) {
          ++in_tissue;
          const double vx = ds / s * (x.x - c.x), vz = ds / s * (x.z - c.z);
          expect = -(vx * x.x + vz * x.z) / std::hypot(x.x, x.z);
        }
        ASSERT_NEAR(gt.tissue_velocity_clean(f, b, k), expect, 1e-6);
        ASSERT_NEAR(gt.tissue_velocity_stored(f, b, k), phantom::wrap_velocity(expect, cfg.tissue_nyquist), 1e-6);
      }
  }
  EXPECT_GT(in_tissue, 1000u);
}

TEST(Phantom, ColorJetWrapsAndUnwraps) {
  const PhantomConfig cfg = quiet();
  const auto ex = phantom::generate_exam(cfg);
  const auto& gt = ex.truth;
  std::size_t wrapped = 0;
  for (std::size_t i = 0; i < gt.color_velocity_clean.size(); ++i) {
    const double clean = gt.color_velocity_clean[i], stored = gt.color_velocity_stored[i];
    ASSERT_GE(stored, -cfg.nyquist);
    ASSERT_LT(stored, cfg.nyquist);
    if (std::abs(clean) >= cfg.nyquist) ++wrapped;
    double best = INFINITY;
    for (int k = -3; k <= 3; ++k) best = std::min(best, std::abs(stored + 2 * k * cfg.nyquist - clean));
    ASSERT_LT(best, 1e-6);
  }
  EXPECT_GT(wrapped, 100u);
}

TEST(Phantom, InterleaveTimestampsExact) {
  PhantomConfig cfg = quiet();
  cfg.tissue_doppler_ratio = 2;
  const auto ex = phantom::generate_exam(cfg);
  const auto& rec = ex.recordings[0];
  const auto& bts = rec.find(Modality::bmode2d)->header.timestamps;
  const auto& dts = rec.find(Modality::tdi2d)->header.timestamps;
  ASSERT_EQ(dts.size(), 2 * bts.size());
  for (std::size_t k = 0; k < bts.size(); ++k) {
    EXPECT_DOUBLE_EQ(bts[k], k / 30.0);
    EXPECT_DOUBLE_EQ(dts[2 * k], bts[k] + 0.4 / 60.0);
    EXPECT_DOUBLE_EQ(dts[2 * k + 1], bts[k] + 1.4 / 60.0);
  }
  const auto p = pair_interleaved(bts, dts, 1.5);
  EXPECT_EQ(p.unmatched, 0u);
}

TEST(Phantom, RPeakTruthAtEcgMaxima) {
  for (double hr : {40.0, 75.0, 120.0}) {
    PhantomConfig cfg = quiet();
    cfg.heart_rate = hr;
    const phantom::BeatSchedule sched(cfg);
    phantom::Rng rng(1);
    const EcgTrace ecg = phantom::synthesize_ecg(cfg, sched, rng);
    const RPeakList truth = sched.within(0.0, cfg.duration());
    ASSERT_FALSE(truth.empty());
    for (double p : truth.times) {
      const long c = std::lround(p * ecg.rate);
      long best = c;
      for (long i = std::max(0L, c - 30); i <= std::min<long>(ecg.samples.size() - 1, c + 30); ++i)
        if (ecg.samples[i] > ecg.samples[best]) best = i;
      EXPECT_LE(std::abs(best - c), 1) << "hr " << hr << " peak " << p;
    }
  }
}

TEST(Phantom, PowerLowWhereTissueIsBright) {
  const PhantomConfig cfg;  // default noise
  auto c2 = cfg;
  c2.include_3d = c2.include_stitching = false;
  const auto ex = phantom::generate_exam(c2);
  const auto& gt = ex.truth;
  const phantom::HeartModel heart(c2);
  const auto& g = gt.geometry;
  std::size_t checked = 0;
  for (std::size_t f = 0; f < gt.color_times.size(); ++f)
    for (std::size_t b = 0; b < g.n_beams; ++b)
      for (std::size_t s = 0; s < g.n_samples; ++s) {
        if (!heart.in_tissue(beam_to_cartesian(g, b, s), gt.color_times[f])) continue;
        if (gt.color_bmode_paired(f, b, s) <= 0.4f) continue;
        ++checked;
        ASSERT_LT(gt.color_power_stored(f, b, s), 0.3f);
      }
  EXPECT_GT(checked, 1000u);
}

TEST(Phantom, DeterministicSerialization) {
  PhantomConfig cfg;
  cfg.n_beats = 4;
  const auto a = phantom::generate_exam(cfg);
  const auto b = phantom::generate_exam(cfg);
  ASSERT_EQ(a.recordings.size(), b.recordings.size());
  test::TempDir da, db;
  for (std::size_t i = 0; i < a.recordings.size(); ++i) {
    write_recording(a.recordings[i], da / a.recordings[i].id);
    write_recording(b.recordings[i], db / b.recordings[i].id);
    for (const auto& e : std::filesystem::directory_iterator(da / a.recordings[i].id))
      ASSERT_EQ(io::read_file(e.path()), io::read_file(db / a.recordings[i].id / e.path().filename()));
  }
  cfg.seed = 8;
  const auto c = phantom::generate_exam(cfg);
  EXPECT_NE(c.truth.tissue_velocity_stored, a.truth.tissue_velocity_stored);
}

TEST(Phantom, RecordingsAreValidAndRoundTrip) {
  const auto ex = phantom::generate_exam(PhantomConfig{});
  EXPECT_TRUE(validate_exam_manifest(ex.manifest).empty());
  test::TempDir d;
  for (const auto& r : ex.recordings) {
    ASSERT_TRUE(validate_recording(r).empty()) << r.id;
    write_recording(r, d / r.id);
    EXPECT_EQ(read_recording(d / r.id), r);
  }
}

TEST(Phantom, StrainTruthMatchesContours) {
  const auto ex = phantom::generate_exam(quiet());
  const auto& endo = ex.recordings[0].annotations.contours[0];
  std::vector<Contour2D> frames;
  for (const auto& f : endo.frames) frames.push_back({f, true});
  // Reference at the first frame at or after the first R-peak (end-diastole).
  const auto& bts = ex.truth.tissue_bmode_times;
  std::size_t ref = 0;
  while (bts[ref] < ex.truth.r_peaks.times.front()) ++ref;
  const auto s = strain_curve(frames, ref);
  const double s_ref = ex.truth.endo_strain_percent[ref];
  for (std::size_t f = 0; f < s.size(); ++f) {
    // Uniform scaling: L(t)/L(ref) = (1 - a(t)) / (1 - a(ref)).
    const double expect = 100.0 * ((100.0 + ex.truth.endo_strain_percent[f]) / (100.0 + s_ref) - 1.0);
    EXPECT_NEAR(s[f], expect, 1e-9);
  }
}

TEST(Phantom, VolumeTruthMatchesMeshes) {
  const auto ex = phantom::generate_exam(PhantomConfig{});
  const Recording* vol = nullptr;
  for (const auto& r : ex.recordings)
    if (r.id == "volume") vol = &r;
  ASSERT_NE(vol, nullptr);
  const auto& meshes = vol->annotations.meshes[0].frames;
  ASSERT_EQ(meshes.size(), ex.truth.lv_volume_ml.size());
  for (std::size_t f = 0; f < meshes.size(); ++f)
    EXPECT_LT(std::abs(mesh_volume(meshes[f]).milliliters - ex.truth.lv_volume_ml[f]) / ex.truth.lv_volume_ml[f], 0.02);
}

TEST(GroundTruthLoss, PerfectAndAliasShift) {
  const auto ex = phantom::generate_exam(quiet());
  const auto& gt = ex.truth;
  for (auto domain : {phantom::Domain::beamspace, phantom::Domain::cartesian}) {
    const auto tg = phantom::phantom_targets(gt, domain, 64);
    phantom::PhantomPrediction pred{tg.tissue_velocity, tg.color_velocity, tg.color_power, tg.color_variation};
    auto l = phantom::ground_truth_loss(gt, pred, domain, 64);
    EXPECT_EQ(l.task1, 0.0);
    EXPECT_EQ(l.task2_power, 0.0);
    ASSERT_TRUE(l.task2_velocity);
    EXPECT_EQ(*l.task2_velocity, 0.0);
    EXPECT_EQ(*l.task2_variation, 0.0);

    for (auto& v : pred.tissue_velocity.storage()) v += static_cast<float>(2 * gt.tissue_nyquist);
    for (auto& v : pred.color_velocity.storage()) v += static_cast<float>(2 * gt.color_nyquist);
    l = phantom::ground_truth_loss(gt, pred, domain, 64);
    EXPECT_NEAR(l.task1, 0.0, 1e-6);
    EXPECT_NEAR(*l.task2_velocity, 2 * gt.color_nyquist, 1e-6);
  }
}

TEST(GroundTruthLoss, BaselineMatchesMetricsModule) {
  const auto ex = phantom::generate_exam(quiet());
  const auto& gt = ex.truth;
  const auto dom = phantom::Domain::beamspace;
  const auto tg = phantom::phantom_targets(gt, dom);
  phantom::PhantomPrediction pred{temporal_mean_baseline(tg.tissue_velocity), temporal_mean_baseline(tg.color_velocity),
                                  temporal_mean_baseline(tg.color_power), Tensor<float>()};
  pred.color_variation = turbulence_proxy(pred.color_velocity);
  const auto l = phantom::ground_truth_loss(gt, pred, dom);
  EXPECT_NEAR(l.task1, task1_loss(pred.tissue_velocity, tg.tissue_velocity, gt.tissue_nyquist), 1e-9);
  const auto vm = valid_velocity_mask(gt.color_box, tg.color_power, gt.color_bmode_paired);
  const auto t2 = task2_loss(pred.color_velocity, pred.color_power, pred.color_variation, tg.color_velocity,
                             tg.color_power, turbulence_proxy(tg.color_velocity), vm.mask);
  EXPECT_NEAR(l.task2_power, t2.power, 1e-9);
  EXPECT_NEAR(*l.task2_velocity, *t2.velocity, 1e-9);
  EXPECT_NEAR(*l.task2_variation, *t2.variation, 1e-9);
  EXPECT_THROW(phantom::ground_truth_loss(gt, phantom::PhantomPrediction{}, dom), Error);
}
