#pragma once

// Synthetic exams with analytic ground truth.
//
// The heart is a contracting annulus (2D) / ellipsoidal shell (3D) centred
// below the probe. Contraction follows alpha(t) = alpha_max (1 - cos 2 pi
// phase) / 2, so end-diastole falls on every R-peak. Material point X moves
// to c + (1 - alpha)(X - c). Doppler values are the component of velocity
// pointing toward the probe (positive = toward the transducer).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "echoxflow/annotations.hpp"
#include "echoxflow/container.hpp"
#include "echoxflow/core.hpp"
#include "echoxflow/geometry.hpp"
#include "echoxflow/timing.hpp"

namespace exfl::phantom {

inline constexpr double kDeg = std::numbers::pi / 180.0;

struct PhantomConfig {
  SectorGeometry2D geometry{-40.0 * kDeg, 80.0 * kDeg / 95.0, 96, 0.005, 0.0006, 192};
  std::optional<SphericalGeometry3D> geometry3d =
      SphericalGeometry3D{{-30.0 * kDeg, 60.0 * kDeg / 23.0, 24, 0.01, 0.0024, 48}, -25.0 * kDeg, 50.0 * kDeg / 15.0, 16};
  double heart_rate = 60.0;  // bpm
  int n_beats = 4;
  double first_peak = 0.15;    // s, time of the first R-peak
  double rr_variation = 0.0;   // alternating +/- fraction of the nominal RR

  double tissue_bmode_fps = 30.0;
  int tissue_doppler_ratio = 1;  // Doppler frames per B-mode frame
  double color_bmode_fps = 11.0;
  int color_doppler_ratio = 1;
  double volume_fps = 20.0;

  double motion_amplitude = 0.006;  // m, endocardial excursion at end-systole
  double tissue_nyquist = 0.16;     // m/s
  double jet_peak_velocity = 1.2;   // m/s
  double nyquist = 0.6;             // m/s, color Doppler
  double snr_db = 30.0;             // infinity disables noise
  std::uint64_t seed = 7;

  bool include_3d = true;
  bool include_stitching = true;
  std::size_t stitch_segments = 3;
  double stitch_fps = 25.0;

  std::string exam_id = "phantom-exam";
  std::string patient_key = "P000";

  void validate() const {
    geometry.validate();
    if (geometry3d) geometry3d->validate();
    if (!(heart_rate >= 30.0 && heart_rate <= 180.0)) throw usage_error("PhantomConfig.heart_rate must be in [30, 180]");
    if (n_beats < 1) throw usage_error("PhantomConfig.n_beats must be >= 1");
    if (tissue_doppler_ratio < 1 || color_doppler_ratio < 1) throw usage_error("PhantomConfig Doppler ratio must be >= 1");
    for (double f : {tissue_bmode_fps, color_bmode_fps, volume_fps, stitch_fps})
      if (!(f > 0.0)) throw usage_error("PhantomConfig frame rates must be > 0");
    if (!(nyquist > 0.0) || !(tissue_nyquist > 0.0)) throw usage_error("PhantomConfig nyquist must be > 0");
    if (!(motion_amplitude >= 0.0)) throw usage_error("PhantomConfig.motion_amplitude must be >= 0");
    if (!(rr_variation >= 0.0 && rr_variation < 0.75)) throw usage_error("PhantomConfig.rr_variation must be in [0, 0.75)");
    if (stitch_segments < 1 || stitch_segments > 6) throw usage_error("PhantomConfig.stitch_segments must be in [1, 6]");
  }

  double rr_nominal() const { return 60.0 / heart_rate; }
  double duration() const { return n_beats * rr_nominal(); }
};

/// Wraps v into [-nu, nu).
inline double wrap_velocity(double v, double nu) { return v - 2.0 * nu * std::floor((v + nu) / (2.0 * nu)); }

// ---------------------------------------------------------------------------
// Deterministic randomness (fixed algorithms, independent of the standard
// library's distribution implementations).

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    if (spare_) {
      const double v = *spare_;
      spare_.reset();
      return v;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 eng_;
  std::optional<double> spare_;
};

/// Adds band-limited Gaussian noise ([1 2 1]/4 smoothing along the last
/// axis) scaled so that mean-square(signal) / mean-square(noise) = SNR.
inline void add_band_limited_noise(std::vector<float>& data, std::size_t row_length, double snr_db, Rng& rng) {
  if (!std::isfinite(snr_db) || data.empty()) return;
  double ms = 0.0;
  for (float v : data) ms += static_cast<double>(v) * v;
  ms /= static_cast<double>(data.size());
  if (ms == 0.0) return;
  std::vector<double> white(data.size());
  for (auto& w : white) w = rng.normal();
  std::vector<double> noise(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t c = i % row_length;
    const double l = c > 0 ? white[i - 1] : white[i];
    const double r = c + 1 < row_length ? white[i + 1] : white[i];
    noise[i] = 0.25 * l + 0.5 * white[i] + 0.25 * r;
  }
  double nms = 0.0;
  for (double v : noise) nms += v * v;
  nms /= static_cast<double>(noise.size());
  const double scale = std::sqrt(ms / std::pow(10.0, snr_db / 10.0) / nms);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(data[i] + scale * noise[i]);
}

// ---------------------------------------------------------------------------
// Cardiac timing

/// R-peak schedule extended one beat either side of the recording so the
/// phase is defined at every recording instant.
struct BeatSchedule {
  std::vector<double> peaks;

  BeatSchedule(const PhantomConfig& cfg) {
    const double rr = cfg.rr_nominal();
    auto interval = [&](long k) { return rr * (1.0 + cfg.rr_variation * ((k % 2 == 0) ? -1.0 : 1.0)); };
    double t = cfg.first_peak;
    long k = 0;
    std::vector<double> before;
    for (double s = t; s > -2.0 * rr;) {
      s -= interval(--k + 1000);
      before.push_back(s);
    }
    peaks.assign(before.rbegin(), before.rend());
    k = 0;
    while (t < cfg.duration() + 2.0 * rr) {
      peaks.push_back(t);
      t += interval(k++ + 1000);
    }
  }

  std::size_t beat(double t) const {
    return static_cast<std::size_t>(std::upper_bound(peaks.begin(), peaks.end(), t) - peaks.begin()) - 1;
  }
  double phase(double t) const {
    const std::size_t k = beat(t);
    return (t - peaks[k]) / (peaks[k + 1] - peaks[k]);
  }
  double phase_rate(double t) const {
    const std::size_t k = beat(t);
    return 1.0 / (peaks[k + 1] - peaks[k]);
  }
  RPeakList within(double t0, double t1) const {
    RPeakList out;
    for (double p : peaks)
      if (p >= t0 && p < t1) out.times.push_back(p);
    return out;
  }
};

/// Analytic 2D heart: contracting annulus centred at `center`.
struct HeartModel {
  Point2 center{0.0, 0.065};
  double r_endo = 0.022;  // end-diastolic endocardial radius
  double r_epi = 0.032;
  double alpha_max = 0.0;
  BeatSchedule schedule;

  explicit HeartModel(const PhantomConfig& cfg)
      : alpha_max(cfg.motion_amplitude / 0.022), schedule(cfg) {}

  double alpha(double t) const { return alpha_max * 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * schedule.phase(t))); }
  double alpha_rate(double t) const {
    return alpha_max * std::numbers::pi * std::sin(2.0 * std::numbers::pi * schedule.phase(t)) * schedule.phase_rate(t);
  }

  Point2 position(const Point2& material, double t) const {
    const double s = 1.0 - alpha(t);
    return {center.x + s * (material.x - center.x), center.z + s * (material.z - center.z)};
  }
  Point2 material(const Point2& x, double t) const {
    const double s = 1.0 - alpha(t);
    return {center.x + (x.x - center.x) / s, center.z + (x.z - center.z) / s};
  }
  /// Material radius of the point currently at x.
  double material_radius(const Point2& x, double t) const {
    const Point2 m = material(x, t);
    return std::hypot(m.x - center.x, m.z - center.z);
  }
  bool in_tissue(const Point2& x, double t) const {
    const double rho = material_radius(x, t);
    return rho >= r_endo && rho <= r_epi;
  }
  bool in_cavity(const Point2& x, double t) const { return material_radius(x, t) < r_endo; }

  Point2 velocity(const Point2& x, double t) const {
    const double k = -alpha_rate(t) / (1.0 - alpha(t));
    return {k * (x.x - center.x), k * (x.z - center.z)};
  }
  /// Velocity component toward the probe apex.
  double doppler(const Point2& x, double t) const {
    const double r = std::hypot(x.x, x.z);
    if (r == 0.0) return 0.0;
    const Point2 v = velocity(x, t);
    return -(v.x * x.x + v.z * x.z) / r;
  }
};

/// Sum of random plane waves in material coordinates, roughly in [-1, 1].
class Texture {
 public:
  Texture(Rng& rng, int waves = 8) {
    for (int i = 0; i < waves; ++i) {
      const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double k = 2.0 * std::numbers::pi / rng.uniform(0.003, 0.008);
      waves_.push_back({k * std::cos(a), k * std::sin(a), rng.uniform(0.0, 2.0 * std::numbers::pi)});
    }
  }
  double operator()(double x, double z) const {
    double s = 0.0;
    for (const auto& w : waves_) s += std::cos(w[0] * x + w[1] * z + w[2]);
    return s / std::sqrt(2.0 * static_cast<double>(waves_.size()));
  }

 private:
  std::vector<std::array<double, 3>> waves_;
};

/// Color-Doppler jet: a parabolic profile along the vertical axis through
/// the cavity, flowing toward the probe, gated in time by sin^2(pi phase).
struct JetModel {
  double half_width = 0.006;
  double peak = 1.2;

  double speed(const HeartModel& heart, const Point2& x, double t) const {
    if (!heart.in_cavity(x, t)) return 0.0;
    const double d = std::abs(x.x - heart.center.x);
    if (d >= half_width) return 0.0;
    const double s = std::sin(std::numbers::pi * heart.schedule.phase(t));
    return peak * (1.0 - (d / half_width) * (d / half_width)) * s * s;
  }
  bool in_jet(const HeartModel& heart, const Point2& x, double t) const {
    return heart.in_cavity(x, t) && std::abs(x.x - heart.center.x) < half_width;
  }
  /// Doppler velocity: the jet flows in -z (toward the probe).
  double doppler(const HeartModel& heart, const Point2& x, double t) const {
    const double r = std::hypot(x.x, x.z);
    return r == 0.0 ? 0.0 : speed(heart, x, t) * x.z / r;
  }
};

inline std::vector<double> frame_times(double fps, double duration) {
  std::vector<double> ts;
  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) / fps;
    if (t >= duration) break;
    ts.push_back(t);
  }
  return ts;
}

/// Doppler frames interleaved after each B-mode frame at the given ratio.
inline std::vector<double> interleaved_times(const std::vector<double>& bmode_times, double fps, int ratio) {
  std::vector<double> ts;
  for (double t : bmode_times)
    for (int j = 0; j < ratio; ++j) ts.push_back(t + (j + 0.4) / (ratio * fps));
  return ts;
}

inline EcgTrace synthesize_ecg(const PhantomConfig& cfg, const BeatSchedule& sched, Rng& rng, double rate = 600.0) {
  EcgTrace ecg;
  ecg.rate = rate;
  ecg.t0 = 0.0;
  const auto n = static_cast<std::size_t>(std::floor(cfg.duration() * rate));
  ecg.samples.assign(n, 0.0f);
  struct Wave {
    double offset, amp, sigma;
  };
  for (std::size_t k = 0; k + 1 < sched.peaks.size(); ++k) {
    const double p = sched.peaks[k];
    const double rr = sched.peaks[k + 1] - p;
    const Wave waves[] = {{-0.16, 0.12, 0.025}, {-0.03, -0.12, 0.008}, {0.0, 1.0, 0.010},
                          {0.03, -0.25, 0.009}, {0.3 * std::sqrt(rr), 0.3, 0.045}};
    for (const auto& w : waves) {
      const double c = p + w.offset;
      const auto lo = static_cast<long>(std::floor((c - 5 * w.sigma) * rate));
      const auto hi = static_cast<long>(std::ceil((c + 5 * w.sigma) * rate));
      for (long i = std::max(0L, lo); i <= std::min(static_cast<long>(n) - 1, hi); ++i) {
        const double dt = static_cast<double>(i) / rate - c;
        ecg.samples[static_cast<std::size_t>(i)] += static_cast<float>(w.amp * std::exp(-0.5 * dt * dt / (w.sigma * w.sigma)));
      }
    }
  }
  if (std::isfinite(cfg.snr_db)) {
    // Zero-mean signal power, Gaussian-smoothed (sigma = 2 samples) noise.
    double mean = 0.0;
    for (float v : ecg.samples) mean += v;
    mean /= static_cast<double>(n);
    double ms = 0.0;
    for (float v : ecg.samples) ms += (v - mean) * (v - mean);
    ms /= static_cast<double>(n);
    std::vector<double> white(n);
    for (auto& w : white) w = rng.normal();
    std::vector<double> kernel;
    for (int j = -6; j <= 6; ++j) kernel.push_back(std::exp(-0.5 * j * j / 4.0));
    std::vector<double> noise(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (int j = -6; j <= 6; ++j) {
        const long idx = std::clamp<long>(static_cast<long>(i) + j, 0, static_cast<long>(n) - 1);
        noise[i] += kernel[static_cast<std::size_t>(j + 6)] * white[static_cast<std::size_t>(idx)];
      }
    double nms = 0.0;
    for (double v : noise) nms += v * v;
    nms /= static_cast<double>(n);
    const double scale = std::sqrt(ms / std::pow(10.0, cfg.snr_db / 10.0) / nms);
    for (std::size_t i = 0; i < n; ++i) ecg.samples[i] = static_cast<float>(ecg.samples[i] + scale * noise[i]);
  }
  return ecg;
}

// ---------------------------------------------------------------------------
// Ground truth

struct GroundTruth {
  RPeakList r_peaks;
  SectorGeometry2D geometry;

  // Tissue recording: Doppler frames (frame, beam, sample).
  std::vector<double> tissue_times;
  Tensor<double> tissue_velocity_clean;  // unwrapped, noise-free
  Tensor<float> tissue_velocity_stored;  // as written to the container
  double tissue_nyquist = 0.0;

  // Color recording: Doppler frames (frame, beam, sample).
  std::vector<double> color_times;
  Tensor<double> color_velocity_clean;
  Tensor<float> color_velocity_stored;
  Tensor<float> color_power_stored;
  Tensor<float> color_bmode_paired;        // B-mode frame paired with each Doppler frame
  Tensor<std::uint8_t> color_box;          // (beam, sample)
  double color_nyquist = 0.0;

  std::vector<double> tissue_bmode_times;
  std::vector<double> endo_strain_percent;  // per tissue B-mode frame

  std::vector<double> volume_times;
  std::vector<double> lv_volume_ml;          // analytic ellipsoid volume per 3D frame
};

struct PhantomExam {
  ExamManifest manifest;
  std::vector<Recording> recordings;
  GroundTruth truth;
};

inline constexpr std::uint32_t kSectorGeometryId = 0;
inline constexpr std::uint32_t kVolumeGeometryId = 1;

namespace detail {

inline ContourTrack ring_track(const HeartModel& heart, double radius, ContourLayer layer,
                               const std::vector<double>& times, std::size_t n_vertices = 48) {
  ContourTrack t;
  t.chamber = Chamber::lv;
  t.layer = layer;
  t.view = ViewTag::a4c;
  t.closed = true;
  for (std::size_t f = 0; f < times.size(); ++f) {
    std::vector<Point2> pts;
    for (std::size_t k = 0; k < n_vertices; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n_vertices);
      pts.push_back(heart.position({heart.center.x + radius * std::cos(a), heart.center.z + radius * std::sin(a)}, times[f]));
    }
    t.frames.push_back(std::move(pts));
    t.frame_indices.push_back(static_cast<std::uint32_t>(f));
  }
  return t;
}

inline Tensor<float> bmode_series(const HeartModel& heart, const Texture& tex, const SectorGeometry2D& g,
                                  const std::vector<double>& times) {
  Tensor<float> out(Shape{times.size(), g.n_beams, g.n_samples});
  for (std::size_t f = 0; f < times.size(); ++f)
    for (std::size_t b = 0; b < g.n_beams; ++b)
      for (std::size_t s = 0; s < g.n_samples; ++s) {
        const Point2 x = beam_to_cartesian(g, static_cast<double>(b), static_cast<double>(s));
        const Point2 m = heart.material(x, times[f]);
        const double rho = std::hypot(m.x - heart.center.x, m.z - heart.center.z);
        const double tx = tex(m.x, m.z);
        double v;
        if (rho < heart.r_endo)
          v = 0.06 + 0.03 * tx;
        else if (rho <= heart.r_epi)
          v = 0.72 + 0.12 * tx;
        else
          v = 0.2 + 0.06 * tx;
        out(f, b, s) = static_cast<float>(v);
      }
  return out;
}

inline void clamp01(std::vector<float>& v) {
  for (auto& x : v) x = std::clamp(x, 0.0f, 1.0f);
}

}  // namespace detail

/// Smooth analytic field used for scan-conversion round trips.
inline double smooth_field(double x, double z) {
  return 0.5 + 0.25 * std::sin(60.0 * x + 0.3) * std::cos(45.0 * z) + 0.15 * std::cos(35.0 * x - 25.0 * z);
}

inline Tensor<float> sample_smooth_field(const SectorGeometry2D& g) {
  Tensor<float> out(Shape{g.n_beams, g.n_samples});
  for (std::size_t b = 0; b < g.n_beams; ++b)
    for (std::size_t s = 0; s < g.n_samples; ++s) {
      const Point2 p = beam_to_cartesian(g, static_cast<double>(b), static_cast<double>(s));
      out(b, s) = static_cast<float>(smooth_field(p.x, p.z));
    }
  return out;
}

/// Analytic ellipse contour sequence for strain checks: semi-axes shrink as
/// a(t) = a0 (1 - alpha), b(t) = b0 (1 - alpha / 2).
struct EllipseSequence {
  double a0 = 0.020, b0 = 0.035;
  std::vector<double> alphas;

  std::pair<double, double> axes(std::size_t f) const { return {a0 * (1.0 - alphas[f]), b0 * (1.0 - 0.5 * alphas[f])}; }

  std::vector<Contour2D> contours(std::size_t n_vertices = 720) const {
    std::vector<Contour2D> out;
    for (std::size_t f = 0; f < alphas.size(); ++f) {
      const auto [a, b] = axes(f);
      Contour2D c;
      for (std::size_t k = 0; k < n_vertices; ++k) {
        const double t = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n_vertices);
        c.vertices.push_back({a * std::cos(t), 0.06 + b * std::sin(t)});
      }
      out.push_back(std::move(c));
    }
    return out;
  }
};

inline Recording make_stitching_recording(const PhantomConfig& cfg, const BeatSchedule& sched, Rng& rng);

/// Builds the full phantom exam. Deterministic for a fixed config.
inline PhantomExam generate_exam(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const HeartModel heart(cfg);
  const Texture tex(rng);
  const JetModel jet{0.006, cfg.jet_peak_velocity};
  const auto& g = cfg.geometry;
  const double dur = cfg.duration();

  PhantomExam exam;
  GroundTruth& gt = exam.truth;
  gt.geometry = g;
  gt.r_peaks = heart.schedule.within(0.0, dur);
  gt.tissue_nyquist = cfg.tissue_nyquist;
  gt.color_nyquist = cfg.nyquist;
  const ExamInfo info{cfg.exam_id, cfg.patient_key, std::nullopt};

  auto base_recording = [&](const std::string& id) {
    Recording r;
    r.id = id;
    r.exam = info;
    r.geometries[kSectorGeometryId] = g;
    r.ecg = synthesize_ecg(cfg, heart.schedule, rng);
    return r;
  };

  // (a, b) Tissue recording: B-mode + tissue Doppler, contours.
  {
    Recording r = base_recording("tissue");
    const auto bts = frame_times(cfg.tissue_bmode_fps, dur);
    const auto dts = interleaved_times(bts, cfg.tissue_bmode_fps, cfg.tissue_doppler_ratio);
    Tensor<float> bmode = detail::bmode_series(heart, tex, g, bts);
    detail::clamp01(bmode.storage());
    add_band_limited_noise(bmode.storage(), g.n_samples, cfg.snr_db, rng);
    detail::clamp01(bmode.storage());

    Tensor<double> clean(Shape{dts.size(), g.n_beams, g.n_samples});
    for (std::size_t f = 0; f < dts.size(); ++f)
      for (std::size_t b = 0; b < g.n_beams; ++b)
        for (std::size_t s = 0; s < g.n_samples; ++s) {
          const Point2 x = beam_to_cartesian(g, static_cast<double>(b), static_cast<double>(s));
          clean(f, b, s) = heart.in_tissue(x, dts[f]) ? heart.doppler(x, dts[f]) : 0.0;
        }
    std::vector<float> noisy(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) noisy[i] = static_cast<float>(clean[i]);
    add_band_limited_noise(noisy, g.n_samples, cfg.snr_db, rng);
    Tensor<float> stored(clean.shape());
    for (std::size_t i = 0; i < clean.size(); ++i)
      stored[i] = static_cast<float>(wrap_velocity(noisy[i], cfg.tissue_nyquist));

    StreamHeader hb{Modality::bmode2d, DType::f32, {}, bts, std::nullopt, kSectorGeometryId, std::nullopt};
    StreamHeader hd{Modality::tdi2d, DType::f32, {}, dts, cfg.tissue_nyquist, kSectorGeometryId, std::nullopt};
    r.streams.push_back(Stream::from_tensor(hb, bmode));
    r.streams.push_back(Stream::from_tensor(hd, stored));

    r.annotations.contours.push_back(detail::ring_track(heart, heart.r_endo, ContourLayer::endocardial, bts));
    r.annotations.contours.push_back(detail::ring_track(heart, heart.r_epi, ContourLayer::epicardial, bts));
    r.annotations.markers.push_back({MarkerKind::sample_volume, MarkerFrame::cartesian,
                                     {heart.center.x + heart.r_endo, heart.center.z}, "MV E' septal"});

    gt.tissue_times = dts;
    gt.tissue_velocity_clean = std::move(clean);
    gt.tissue_velocity_stored = std::move(stored);
    gt.tissue_bmode_times = bts;
    for (double t : bts) gt.endo_strain_percent.push_back(-100.0 * heart.alpha(t));
    exam.recordings.push_back(std::move(r));
  }

  // (c) Color recording: B-mode + color Doppler (velocity, power), box.
  {
    Recording r = base_recording("color");
    const auto bts = frame_times(cfg.color_bmode_fps, dur);
    const auto dts = interleaved_times(bts, cfg.color_bmode_fps, cfg.color_doppler_ratio);
    Tensor<float> bmode = detail::bmode_series(heart, tex, g, bts);
    detail::clamp01(bmode.storage());
    add_band_limited_noise(bmode.storage(), g.n_samples, cfg.snr_db, rng);
    detail::clamp01(bmode.storage());

    const std::size_t nb = g.n_beams, ns = g.n_samples, nf = dts.size();
    Tensor<double> clean(Shape{nf, nb, ns});
    std::vector<float> vel(nf * nb * ns), pow(nf * nb * ns);
    for (std::size_t f = 0; f < nf; ++f)
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t s = 0; s < ns; ++s) {
          const Point2 x = beam_to_cartesian(g, static_cast<double>(b), static_cast<double>(s));
          const double v = jet.doppler(heart, x, dts[f]);
          clean(f, b, s) = v;
          const std::size_t i = (f * nb + b) * ns + s;
          vel[i] = static_cast<float>(v);
          pow[i] = jet.in_jet(heart, x, dts[f]) ? 0.8f : 0.05f;
        }
    add_band_limited_noise(vel, ns, cfg.snr_db, rng);
    add_band_limited_noise(pow, ns, cfg.snr_db, rng);
    detail::clamp01(pow);
    for (auto& v : vel) v = static_cast<float>(wrap_velocity(v, cfg.nyquist));

    // Operator box around the jet and cavity.
    const double half_angle = std::atan2(jet.half_width + 0.004, heart.center.z);
    const BeamCoord lo = cartesian_to_beam(g, -(heart.center.z) * std::tan(half_angle), heart.center.z);
    const BeamCoord hi = cartesian_to_beam(g, (heart.center.z) * std::tan(half_angle), heart.center.z);
    const double r_lo = heart.center.z - heart.r_endo - 0.004, r_hi = heart.center.z + heart.r_endo + 0.004;
    BeamBox box;
    box.beam_begin = static_cast<std::uint32_t>(std::clamp(std::floor(std::min(lo.beam, hi.beam)), 0.0, nb - 1.0));
    box.beam_end = static_cast<std::uint32_t>(std::clamp(std::ceil(std::max(lo.beam, hi.beam)) + 1.0, 1.0, 1.0 * nb));
    box.sample_begin = static_cast<std::uint32_t>(std::clamp(std::floor((r_lo - g.r0) / g.dr), 0.0, ns - 1.0));
    box.sample_end = static_cast<std::uint32_t>(std::clamp(std::ceil((r_hi - g.r0) / g.dr) + 1.0, 1.0, 1.0 * ns));

    Tensor<float> color(Shape{nf, 2, nb, ns});
    for (std::size_t f = 0; f < nf; ++f)
      for (std::size_t i = 0; i < nb * ns; ++i) {
        color[(f * 2 + 0) * nb * ns + i] = vel[f * nb * ns + i];
        color[(f * 2 + 1) * nb * ns + i] = pow[f * nb * ns + i];
      }

    StreamHeader hb{Modality::bmode2d, DType::f32, {}, bts, std::nullopt, kSectorGeometryId, std::nullopt};
    StreamHeader hc{Modality::color2d, DType::f32, {}, dts, cfg.nyquist, kSectorGeometryId, box};
    r.streams.push_back(Stream::from_tensor(hb, bmode));
    r.streams.push_back(Stream::from_tensor(hc, color));

    gt.color_times = dts;
    gt.color_velocity_clean = std::move(clean);
    gt.color_velocity_stored = Tensor<float>(Shape{nf, nb, ns}, vel);
    gt.color_power_stored = Tensor<float>(Shape{nf, nb, ns}, pow);
    gt.color_box = Tensor<std::uint8_t>(Shape{nb, ns}, 0);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t s = 0; s < ns; ++s) gt.color_box(b, s) = box.contains(b, s) ? 1 : 0;
    const auto pairing = pair_interleaved(bts, dts, 1e9);
    gt.color_bmode_paired = Tensor<float>(Shape{nf, nb, ns});
    for (std::size_t f = 0; f < nf; ++f) {
      auto src = bmode.frame(*pairing.match[f]);
      std::copy(src.begin(), src.end(), gt.color_bmode_paired.frame(f).begin());
    }
    exam.recordings.push_back(std::move(r));
  }

  // (e) Volumetric recording: 3D B-mode of an ellipsoidal LV plus meshes.
  if (cfg.include_3d && cfg.geometry3d) {
    const auto& g3 = *cfg.geometry3d;
    Recording r;
    r.id = "volume";
    r.exam = info;
    r.geometries[kVolumeGeometryId] = g3;
    r.ecg = synthesize_ecg(cfg, heart.schedule, rng);
    const auto vts = frame_times(cfg.volume_fps, dur);
    const Point3 c3{0.0, 0.0, 0.065};
    const double a0 = 0.02, c0 = 0.035, shell = 0.008;
    const std::size_t np = g3.n_planes, nb = g3.sector.n_beams, ns = g3.sector.n_samples;
    Tensor<float> vol(Shape{vts.size(), np, nb, ns});
    MeshTrack meshes;
    for (std::size_t f = 0; f < vts.size(); ++f) {
      const double s = 1.0 - heart.alpha(vts[f]);
      const Point3 axes{a0 * s, a0 * s, c0 * (1.0 - 0.5 * heart.alpha(vts[f]))};
      for (std::size_t p = 0; p < np; ++p)
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t k = 0; k < ns; ++k) {
            const Point3 x = beam_to_cartesian(g3, static_cast<double>(p), static_cast<double>(b), static_cast<double>(k));
            const double q = std::sqrt(std::pow((x.x - c3.x) / axes.x, 2) + std::pow((x.y - c3.y) / axes.y, 2) +
                                       std::pow((x.z - c3.z) / axes.z, 2));
            const double outer = 1.0 + shell / axes.x;
            vol(f, p, b, k) = static_cast<float>(q < 1.0 ? 0.06 : (q <= outer ? 0.75 : 0.2));
          }
      meshes.frames.push_back(ellipsoid_mesh(axes, 3, c3));
      meshes.frame_indices.push_back(static_cast<std::uint32_t>(f));
      gt.lv_volume_ml.push_back(4.0 / 3.0 * std::numbers::pi * axes.x * axes.y * axes.z * 1e6);
    }
    add_band_limited_noise(vol.storage(), ns, cfg.snr_db, rng);
    detail::clamp01(vol.storage());
    StreamHeader hv{Modality::bmode3d, DType::f32, {}, vts, std::nullopt, kVolumeGeometryId, std::nullopt};
    r.streams.push_back(Stream::from_tensor(hv, vol));
    r.annotations.meshes.push_back(std::move(meshes));
    gt.volume_times = vts;
    exam.recordings.push_back(std::move(r));
  }

  // (f) Gated sub-acquisitions for multi-beat stitching.
  if (cfg.include_stitching && cfg.geometry3d) exam.recordings.push_back(make_stitching_recording(cfg, heart.schedule, rng));

  exam.manifest.exam_id = cfg.exam_id;
  exam.manifest.patient_key = cfg.patient_key;
  for (const auto& r : exam.recordings) exam.manifest.recording_ids.push_back(r.id);
  return exam;
}

// ---------------------------------------------------------------------------
// Stitching

/// Smooth periodic field over (azimuth, elevation, radius, phase).
inline double stitch_field(double theta, double phi, double r, double phase) {
  return 0.5 + 0.3 * std::sin(2.0 * std::numbers::pi * phase + 3.0 * theta) * std::cos(2.0 * phi) +
         0.1 * std::cos(40.0 * r - 2.0 * std::numbers::pi * phase);
}

struct StitchingCase {
  SphericalGeometry3D wide;
  std::vector<GatedSubAcquisition> subacqs;
  std::vector<SphericalGeometry3D> sub_geometries;
  RPeakList peaks;
  EcgTrace ecg;
  Tensor<float> direct;  // wide-sector acquisition at the common phase axis
};

inline StitchingCase generate_stitching_case(const PhantomConfig& cfg, const BeatSchedule& sched, Rng& rng) {
  if (!cfg.geometry3d) throw usage_error("stitching requires a 3D geometry");
  StitchingCase sc;
  sc.wide = *cfg.geometry3d;
  const auto& g = sc.wide;
  const std::size_t nseg = cfg.stitch_segments;
  const std::size_t nb = g.sector.n_beams, np = g.n_planes, ns = g.sector.n_samples;
  if (nb % nseg) throw usage_error("stitching: beam count must divide evenly into segments");
  const std::size_t seg = nb / nseg;
  sc.peaks = sched.within(0.0, cfg.duration());
  sc.ecg = synthesize_ecg(cfg, sched, rng);
  if (sc.peaks.size() < nseg + 1) throw usage_error("stitching: not enough beats for the requested segments");

  std::size_t frames_max = 0;
  for (std::size_t k = 0; k < nseg; ++k) {
    SphericalGeometry3D sub = g;
    sub.sector.theta0 = g.sector.theta_at(static_cast<double>(k * seg));
    sub.sector.n_beams = static_cast<std::uint32_t>(seg);
    const double p0 = sc.peaks.times[k], p1 = sc.peaks.times[k + 1];
    GatedSubAcquisition sa;
    sa.beam_offset = k * seg;
    for (double t = p0 + rng.uniform(0.0, 1.0 / cfg.stitch_fps); t < p1; t += 1.0 / cfg.stitch_fps) sa.timestamps.push_back(t);
    sa.frames = Tensor<float>(Shape{sa.timestamps.size(), np, seg, ns});
    for (std::size_t f = 0; f < sa.timestamps.size(); ++f) {
      const double ph = (sa.timestamps[f] - p0) / (p1 - p0);
      for (std::size_t p = 0; p < np; ++p)
        for (std::size_t b = 0; b < seg; ++b)
          for (std::size_t s = 0; s < ns; ++s)
            sa.frames(f, p, b, s) = static_cast<float>(
                stitch_field(sub.sector.theta_at(static_cast<double>(b)), sub.phi_at(static_cast<double>(p)),
                             sub.sector.r_at(static_cast<double>(s)), ph));
    }
    frames_max = std::max(frames_max, sa.timestamps.size());
    sc.sub_geometries.push_back(sub);
    sc.subacqs.push_back(std::move(sa));
  }
  sc.direct = Tensor<float>(Shape{frames_max, np, nb, ns});
  for (std::size_t j = 0; j < frames_max; ++j) {
    const double ph = static_cast<double>(j) / static_cast<double>(frames_max);
    for (std::size_t p = 0; p < np; ++p)
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t s = 0; s < ns; ++s)
          sc.direct(j, p, b, s) = static_cast<float>(stitch_field(g.sector.theta_at(static_cast<double>(b)),
                                                                  g.phi_at(static_cast<double>(p)),
                                                                  g.sector.r_at(static_cast<double>(s)), ph));
  }
  return sc;
}

inline StitchingCase generate_stitching_case(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed ^ 0x5717C4ULL);
  return generate_stitching_case(cfg, BeatSchedule(cfg), rng);
}

/// Sub-acquisitions as a recording: one bmode3d stream per azimuth segment,
/// each with its own spherical geometry (ids 10, 11, ...).
inline Recording make_stitching_recording(const PhantomConfig& cfg, const BeatSchedule& sched, Rng& rng) {
  const StitchingCase sc = generate_stitching_case(cfg, sched, rng);
  Recording r;
  r.id = "stitch";
  r.exam = {cfg.exam_id, cfg.patient_key, std::nullopt};
  r.ecg = sc.ecg;
  for (std::size_t k = 0; k < sc.subacqs.size(); ++k) {
    const auto id = static_cast<std::uint32_t>(10 + k);
    r.geometries[id] = sc.sub_geometries[k];
    StreamHeader h{Modality::bmode3d, DType::f32, {}, sc.subacqs[k].timestamps, std::nullopt, id, std::nullopt};
    r.streams.push_back(Stream::from_tensor(h, sc.subacqs[k].frames));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Independent loss computation against phantom truth.
//
// Deliberately naive scalar loops sharing no code with the metrics module;
// used to cross-check it.

enum class Domain { beamspace, cartesian };

struct PhantomPrediction {
  Tensor<float> tissue_velocity;   // (frame, ·, ·) in the scoring domain
  Tensor<float> color_velocity;
  Tensor<float> color_power;
  Tensor<float> color_variation;
};

struct GroundTruthLoss {
  double task1 = 0.0;
  double task2_power = 0.0;
  std::optional<double> task2_velocity;
  std::optional<double> task2_variation;
};

/// Targets of the tissue and color tasks in the requested domain.
struct PhantomTargets {
  Tensor<float> tissue_velocity;
  Tensor<float> color_velocity;
  Tensor<float> color_power;
  Tensor<float> color_variation;
  Tensor<std::uint8_t> color_mask;
  ValidityMask region;  // frame-shaped pixels that count
};

inline PhantomTargets phantom_targets(const GroundTruth& gt, Domain domain, std::size_t grid_size = 256) {
  PhantomTargets out;
  if (domain == Domain::beamspace) {
    out.tissue_velocity = gt.tissue_velocity_stored;
    out.color_velocity = gt.color_velocity_stored;
    out.color_power = gt.color_power_stored;
    out.region = ValidityMask(Shape{gt.geometry.n_beams, gt.geometry.n_samples}, 1);
  } else {
    const ScanConverter2D conv(gt.geometry, default_grid_for(gt.geometry, grid_size));
    out.tissue_velocity = conv.convert_series(gt.tissue_velocity_stored);
    out.color_velocity = conv.convert_series(gt.color_velocity_stored);
    out.color_power = conv.convert_series(gt.color_power_stored);
    out.region = conv.mask();
  }
  Tensor<float> bmode = gt.color_bmode_paired;
  Tensor<std::uint8_t> box = gt.color_box;
  if (domain == Domain::cartesian) {
    const ScanConverter2D conv(gt.geometry, default_grid_for(gt.geometry, grid_size));
    bmode = conv.convert_series(bmode);
    Tensor<std::uint8_t> b3(Shape{1, box.dim(0), box.dim(1)}, box.storage());
    auto c = conv.convert_series(b3, true);
    box = Tensor<std::uint8_t>(Shape{c.dim(1), c.dim(2)}, c.storage());
  }

  // Turbulence proxy: 3x3 population std, replicated edges.
  const auto& v = out.color_velocity;
  const std::size_t nt = v.dim(0), nh = v.dim(1), nw = v.dim(2);
  out.color_variation = Tensor<float>(v.shape());
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t i = 0; i < nh; ++i)
      for (std::size_t j = 0; j < nw; ++j) {
        std::vector<double> w;
        for (long di = -1; di <= 1; ++di)
          for (long dj = -1; dj <= 1; ++dj) {
            long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
            ii = ii < 0 ? 0 : (ii >= static_cast<long>(nh) ? static_cast<long>(nh) - 1 : ii);
            jj = jj < 0 ? 0 : (jj >= static_cast<long>(nw) ? static_cast<long>(nw) - 1 : jj);
            w.push_back(v(t, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)));
          }
        double m = 0.0;
        for (double x : w) m += x;
        m /= 9.0;
        double ss = 0.0;
        for (double x : w) ss += (x - m) * (x - m);
        out.color_variation(t, i, j) = static_cast<float>(std::sqrt(ss / 9.0));
      }

  out.color_mask = Tensor<std::uint8_t>(v.shape(), 0);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t i = 0; i < nh; ++i)
      for (std::size_t j = 0; j < nw; ++j)
        out.color_mask(t, i, j) = box(i, j) && out.color_power(t, i, j) >= 0.3f && bmode(t, i, j) <= 0.4f ? 1 : 0;
  return out;
}

inline GroundTruthLoss ground_truth_loss(const GroundTruth& gt, const PhantomPrediction& pred, Domain domain,
                                         std::size_t grid_size = 256) {
  const PhantomTargets tg = phantom_targets(gt, domain, grid_size);
  auto same = [](const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape()) throw usage_error("ground_truth_loss: shape mismatch");
  };
  same(pred.tissue_velocity, tg.tissue_velocity);
  same(pred.color_velocity, tg.color_velocity);
  same(pred.color_power, tg.color_power);
  same(pred.color_variation, tg.color_variation);

  GroundTruthLoss out;
  const std::size_t fs = tg.region.size();
  {
    const double nu = gt.tissue_nyquist;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < tg.tissue_velocity.size(); ++i) {
      if (!tg.region[i % fs]) continue;
      double best = std::numeric_limits<double>::infinity();
      const double d = static_cast<double>(pred.tissue_velocity[i]) - static_cast<double>(tg.tissue_velocity[i]);
      const double k0 = std::round(-d / (2.0 * nu));
      for (double k = k0 - 1; k <= k0 + 1; k += 1.0) best = std::min(best, std::abs(d + 2.0 * k * nu));
      sum += best / nu;
      ++n;
    }
    out.task1 = sum / static_cast<double>(n);
  }
  {
    double sp = 0.0, sv = 0.0, ss = 0.0;
    std::size_t np = 0, nm = 0;
    for (std::size_t i = 0; i < tg.color_velocity.size(); ++i) {
      if (!tg.region[i % fs]) continue;
      sp += std::abs(static_cast<double>(pred.color_power[i]) - static_cast<double>(tg.color_power[i]));
      ++np;
      if (tg.color_mask[i]) {
        sv += std::abs(static_cast<double>(pred.color_velocity[i]) - static_cast<double>(tg.color_velocity[i]));
        ss += std::abs(static_cast<double>(pred.color_variation[i]) - static_cast<double>(tg.color_variation[i]));
        ++nm;
      }
    }
    out.task2_power = sp / static_cast<double>(np);
    if (nm) {
      out.task2_velocity = sv / static_cast<double>(nm);
      out.task2_variation = ss / static_cast<double>(nm);
    }
  }
  return out;
}

}  // namespace exfl::phantom
