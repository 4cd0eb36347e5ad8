#pragma once

// Benchmark losses and their masking, weighting, baseline and reporting
// rules: the Nyquist-periodic L1 for tissue Doppler, the masked L1 triple
// for color Doppler, and the masked foreground Dice for segmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "echoxflow/container.hpp"
#include "echoxflow/core.hpp"
#include "echoxflow/timing.hpp"

namespace exfl {

struct AliasParams {
  double nyquist = 0.0;  // m/s
};

struct MaskParams {
  double tau_power = 0.3;
  double tau_bmode = 0.4;
  double inside_floor = 0.01;
  double outside_weight = 0.01;
  bool strict = false;  // P > tau_P and B < tau_B instead of >= / <=

  void validate() const {
    for (double v : {tau_power, tau_bmode, inside_floor, outside_weight})
      if (!(v >= 0.0 && v <= 1.0)) throw usage_error("MaskParams values must lie in [0, 1]");
  }
};

/// Nyquist-normalised periodic distance: min_k |a - b + 2k nu| / nu.
inline double alias_distance(double a, double b, double nyquist) {
  if (!(nyquist > 0.0)) throw usage_error("alias_distance: nyquist must be > 0");
  const double period = 2.0 * nyquist;
  const double r = std::abs(std::fmod(a - b, period));
  return std::min(r, period - r) / nyquist;
}

namespace detail {

// Frame-shaped region restricting which pixels count; null means all.
inline bool counts(const ValidityMask* region, std::size_t flat, std::size_t frame_size) {
  return region == nullptr || (*region)[flat % frame_size] != 0;
}

template <typename A, typename B>
void check_region(const Tensor<A>& series, const ValidityMask* region, const char* what) {
  if (region && series.rank() >= 1 && region->shape() != series.frame_shape())
    throw usage_error(std::string(what) + ": region shape does not match frame shape");
}

}  // namespace detail

/// Mean alias distance over every pixel and frame (or over the pixels of
/// `region` in every frame).
template <typename T>
double task1_loss(const Tensor<T>& pred, const Tensor<T>& target, double nyquist,
                  const ValidityMask* region = nullptr) {
  require_same_shape(pred, target, "task1_loss");
  detail::check_region<T, T>(pred, region, "task1_loss");
  if (!(nyquist > 0.0)) throw usage_error("task1_loss: nyquist must be > 0");
  const std::size_t fs = std::max<std::size_t>(1, pred.frame_size());
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!detail::counts(region, i, fs)) continue;
    sum += alias_distance(pred[i], target[i], nyquist);
    ++n;
  }
  if (n == 0) throw usage_error("task1_loss: no pixels to average");
  return sum / static_cast<double>(n);
}

/// Population standard deviation over each pixel's 3x3 neighbourhood,
/// with replicated edges. Input and output are (frame, row, col).
template <typename T>
Tensor<T> turbulence_proxy(const Tensor<T>& v) {
  if (v.rank() != 3) throw usage_error("turbulence_proxy: expected (frame, row, col)");
  const std::size_t nt = v.dim(0), nh = v.dim(1), nw = v.dim(2);
  Tensor<T> out(v.shape());
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t r = 0; r < nh; ++r)
      for (std::size_t c = 0; c < nw; ++c) {
        double win[9];
        int k = 0;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const auto rr = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(r) + dr, 0, static_cast<long>(nh) - 1));
            const auto cc = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(c) + dc, 0, static_cast<long>(nw) - 1));
            win[k++] = v(t, rr, cc);
          }
        double mean = 0.0;
        for (double x : win) mean += x;
        mean /= 9.0;
        double ss = 0.0;
        for (double x : win) ss += (x - mean) * (x - mean);
        out(t, r, c) = static_cast<T>(std::sqrt(ss / 9.0));
      }
  return out;
}

struct VelocityMask {
  Tensor<std::uint8_t> mask;  // binary m = C * 1{P >= tau_P} * 1{B <= tau_B}
  Tensor<float> weight;       // m + floor inside the box, outside_weight outside
};

/// `box` is either frame-shaped (static) or series-shaped (per frame).
template <typename T>
VelocityMask valid_velocity_mask(const Tensor<std::uint8_t>& box, const Tensor<T>& power, const Tensor<T>& bmode,
                                 const MaskParams& params = {}) {
  params.validate();
  require_same_shape(power, bmode, "valid_velocity_mask");
  const bool per_frame = box.shape() == power.shape();
  if (!per_frame && box.shape() != power.frame_shape())
    throw usage_error("valid_velocity_mask: box shape matches neither the frame nor the series");
  const std::size_t fs = std::max<std::size_t>(1, power.frame_size());
  VelocityMask out{Tensor<std::uint8_t>(power.shape(), 0), Tensor<float>(power.shape(), 0.0f)};
  for (std::size_t i = 0; i < power.size(); ++i) {
    const bool in_box = box[per_frame ? i : i % fs] != 0;
    // Thresholds are compared in the data's precision.
    const T p = power[i], b = bmode[i];
    const T tp = static_cast<T>(params.tau_power), tb = static_cast<T>(params.tau_bmode);
    const bool p_ok = params.strict ? p > tp : p >= tp;
    const bool b_ok = params.strict ? b < tb : b <= tb;
    const bool m = in_box && p_ok && b_ok;
    out.mask[i] = m ? 1 : 0;
    out.weight[i] = static_cast<float>(in_box ? (m ? 1.0 : 0.0) + params.inside_floor : params.outside_weight);
  }
  return out;
}

struct Task2Terms {
  double power = 0.0;
  std::optional<double> velocity;   // absent when the mask is empty
  std::optional<double> variation;
};

/// Power: unmasked mean L1. Velocity and variation: L1 averaged over m = 1.
template <typename T>
Task2Terms task2_loss(const Tensor<T>& pred_v, const Tensor<T>& pred_p, const Tensor<T>& pred_s,
                      const Tensor<T>& target_v, const Tensor<T>& target_p, const Tensor<T>& target_s,
                      const Tensor<std::uint8_t>& mask, const ValidityMask* region = nullptr) {
  for (const Tensor<T>* t : {&pred_p, &pred_s, &target_v, &target_p, &target_s})
    require_same_shape(pred_v, *t, "task2_loss");
  require_same_shape(pred_v, mask, "task2_loss");
  detail::check_region<T, T>(pred_v, region, "task2_loss");
  const std::size_t fs = std::max<std::size_t>(1, pred_v.frame_size());
  double sp = 0.0, sv = 0.0, ss = 0.0;
  std::size_t np = 0, nm = 0;
  for (std::size_t i = 0; i < pred_v.size(); ++i) {
    if (!detail::counts(region, i, fs)) continue;
    sp += std::abs(static_cast<double>(pred_p[i]) - target_p[i]);
    ++np;
    if (mask[i]) {
      sv += std::abs(static_cast<double>(pred_v[i]) - target_v[i]);
      ss += std::abs(static_cast<double>(pred_s[i]) - target_s[i]);
      ++nm;
    }
  }
  if (np == 0) throw usage_error("task2_loss: no pixels to average");
  Task2Terms out;
  out.power = sp / static_cast<double>(np);
  if (nm) {
    out.velocity = sv / static_cast<double>(nm);
    out.variation = ss / static_cast<double>(nm);
  }
  return out;
}

inline constexpr double kDiceSmoothing = 1e-6;

/// Foreground-only soft Dice loss averaged over annotated frames.
/// `probs` is (channel=3, frame, row, col); `ref` is (frame, row, col) with
/// labels {0, 1, 2}. Optional `col_weights` weight every pixel by its column
/// (the radial axis of a beamspace frame).
template <typename T>
double masked_dice_loss(const Tensor<T>& probs, const Tensor<std::uint8_t>& ref, const std::vector<bool>& annotated,
                        std::span<const double> col_weights = {}) {
  if (probs.rank() != 4 || probs.dim(0) != 3) throw usage_error("masked_dice_loss: probs must be (3, frame, row, col)");
  if (ref.rank() != 3 || Shape(probs.shape().begin() + 1, probs.shape().end()) != ref.shape())
    throw usage_error("masked_dice_loss: shape mismatch between probs and reference");
  const std::size_t nt = ref.dim(0), nh = ref.dim(1), nw = ref.dim(2), plane = nt * nh * nw;
  if (annotated.size() != nt) throw usage_error("masked_dice_loss: annotated flag count != frame count");
  if (!col_weights.empty() && col_weights.size() != nw) throw usage_error("masked_dice_loss: weight count != columns");
  for (std::size_t i = 0; i < plane; ++i) {
    const double s = static_cast<double>(probs[i]) + probs[plane + i] + probs[2 * plane + i];
    if (std::abs(s - 1.0) > 1e-4) throw usage_error("masked_dice_loss: channel probabilities must sum to 1");
  }
  double total = 0.0;
  std::size_t frames = 0;
  for (std::size_t t = 0; t < nt; ++t) {
    if (!annotated[t]) continue;
    double dice_sum = 0.0;
    for (std::uint8_t cls : {kMyocardium, kCavity}) {
      double inter = 0.0, p_sum = 0.0, r_sum = 0.0;
      for (std::size_t r = 0; r < nh; ++r)
        for (std::size_t c = 0; c < nw; ++c) {
          const double w = col_weights.empty() ? 1.0 : col_weights[c];
          const std::size_t i = (t * nh + r) * nw + c;
          const double p = probs[cls * plane + i];
          const double g = ref[i] == cls ? 1.0 : 0.0;
          inter += w * p * g;
          p_sum += w * p;
          r_sum += w * g;
        }
      dice_sum += (2.0 * inter + kDiceSmoothing) / (p_sum + r_sum + kDiceSmoothing);
    }
    total += 1.0 - dice_sum / 2.0;
    ++frames;
  }
  if (frames == 0) throw usage_error("masked_dice_loss: no annotated frames");
  return total / static_cast<double>(frames);
}

/// Hard-label foreground Dice in percent, averaged over annotated frames and
/// over the foreground classes present in either labelling. A frame where
/// neither labelling has any foreground scores 100.
inline double dice_score(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& ref,
                         const std::vector<bool>& annotated) {
  require_same_shape(pred, ref, "dice_score");
  if (ref.rank() < 1 || annotated.size() != ref.dim(0)) throw usage_error("dice_score: annotated flag count != frame count");
  double total = 0.0;
  std::size_t terms = 0;
  bool any = false;
  for (std::size_t t = 0; t < ref.dim(0); ++t) {
    if (!annotated[t]) continue;
    any = true;
    auto p = pred.frame(t);
    auto g = ref.frame(t);
    bool scored = false;
    for (std::uint8_t cls : {kMyocardium, kCavity}) {
      std::size_t inter = 0, a = 0, b = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        a += p[i] == cls;
        b += g[i] == cls;
        inter += p[i] == cls && g[i] == cls;
      }
      if (a + b == 0) continue;
      total += 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
      ++terms;
      scored = true;
    }
    if (!scored) {
      total += 100.0;
      ++terms;
    }
  }
  if (!any) throw usage_error("dice_score: no annotated frames");
  return total / static_cast<double>(terms);
}

/// Loss weights growing linearly with depth from 0.001 to 1.999; the ramp is
/// built symmetric about 1 so its mean is 1.
inline std::vector<double> radial_weights(std::size_t n_rows) {
  if (n_rows < 2) throw usage_error("radial_weights: need at least 2 rows");
  std::vector<double> w(n_rows);
  const double span = static_cast<double>(n_rows - 1);
  for (std::size_t i = 0; i < n_rows / 2; ++i) {
    w[i] = 0.001 + 1.998 * (static_cast<double>(i) / span);
    w[n_rows - 1 - i] = 2.0 - w[i];
  }
  if (n_rows % 2) w[n_rows / 2] = 1.0;
  w.front() = 0.001;
  w.back() = 1.999;
  return w;
}

/// Per-case baseline: every frame is the per-pixel mean over all frames.
template <typename T>
Tensor<T> temporal_mean_baseline(const Tensor<T>& series) {
  if (series.rank() < 1 || series.dim(0) < 1) throw usage_error("temporal_mean_baseline: need at least one frame");
  const std::size_t nt = series.dim(0), fs = series.frame_size();
  std::vector<double> mean(fs, 0.0);
  for (std::size_t t = 0; t < nt; ++t) {
    auto f = series.frame(t);
    for (std::size_t i = 0; i < fs; ++i) mean[i] += f[i];
  }
  for (double& m : mean) m /= static_cast<double>(nt);
  Tensor<T> out(series.shape());
  for (std::size_t t = 0; t < nt; ++t) {
    auto f = out.frame(t);
    for (std::size_t i = 0; i < fs; ++i) f[i] = static_cast<T>(mean[i]);
  }
  return out;
}

/// Training-set variant: per-pixel mean over every frame of every training
/// series, broadcast to `n_frames` frames.
template <typename T>
Tensor<T> training_set_mean_baseline(const std::vector<Tensor<T>>& corpus, std::size_t n_frames) {
  if (corpus.empty()) throw usage_error("training_set_mean_baseline: empty corpus");
  const Shape frame_shape = corpus[0].frame_shape();
  std::vector<double> mean(element_count(frame_shape), 0.0);
  std::size_t frames = 0;
  for (const auto& s : corpus) {
    if (s.frame_shape() != frame_shape) throw usage_error("training_set_mean_baseline: frame shapes differ");
    for (std::size_t t = 0; t < s.dim(0); ++t) {
      auto f = s.frame(t);
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += f[i];
    }
    frames += s.dim(0);
  }
  if (frames == 0) throw usage_error("training_set_mean_baseline: corpus has no frames");
  Shape shape = frame_shape;
  shape.insert(shape.begin(), n_frames);
  Tensor<T> out(shape);
  for (std::size_t t = 0; t < n_frames; ++t) {
    auto f = out.frame(t);
    for (std::size_t i = 0; i < mean.size(); ++i) f[i] = static_cast<T>(mean[i] / static_cast<double>(frames));
  }
  return out;
}

/// Converts radial displacement in samples/frame to m/s.
inline double velocity_scale(double dr, double fps) {
  if (!(dr > 0.0) || !(fps > 0.0)) throw usage_error("velocity_scale: dr and fps must be > 0");
  return dr * fps;
}

struct FoldSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
};

inline FoldSummary aggregate_folds(std::span<const double> per_fold, std::size_t n_folds = 5) {
  if (per_fold.size() != n_folds)
    throw usage_error("aggregate_folds: expected " + std::to_string(n_folds) + " values, got " +
                      std::to_string(per_fold.size()));
  FoldSummary s;
  for (double v : per_fold) s.mean += v;
  s.mean /= static_cast<double>(n_folds);
  if (n_folds > 1) {
    double ss = 0.0;
    for (double v : per_fold) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(n_folds - 1));
  }
  return s;
}

namespace detail {

// Unbiased bounded draw from a fixed-algorithm engine, so fold assignment is
// identical across standard library implementations.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do x = rng(); while (x >= limit);
  return x % n;
}

}  // namespace detail

struct FoldAssignment {
  std::map<std::string, int> by_exam;     // exam_id -> fold
  std::map<std::string, int> by_patient;  // patient_key -> fold
};

/// Patient-grouped folds: distinct patient keys are sorted, shuffled with a
/// seeded Fisher-Yates pass and dealt round-robin.
inline FoldAssignment make_patient_folds(std::span<const ExamManifest> manifests, int n_folds = 5,
                                         std::uint64_t seed = 0) {
  if (n_folds < 1) throw usage_error("make_patient_folds: n_folds must be >= 1");
  std::set<std::string> keys;
  for (const auto& m : manifests) {
    if (m.patient_key.empty()) throw usage_error("make_patient_folds: exam '" + m.exam_id + "' has no patient_key");
    keys.insert(m.patient_key);
  }
  std::vector<std::string> patients(keys.begin(), keys.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = patients.size(); i > 1; --i)
    std::swap(patients[i - 1], patients[detail::bounded(rng, i)]);
  FoldAssignment out;
  for (std::size_t i = 0; i < patients.size(); ++i) out.by_patient[patients[i]] = static_cast<int>(i % n_folds);
  for (const auto& m : manifests) out.by_exam[m.exam_id] = out.by_patient.at(m.patient_key);
  return out;
}

enum class Task : int { tissue = 1, color = 2, segmentation = 3 };

struct FilterResult {
  bool accept = true;
  std::vector<std::string> reasons;  // failing predicates
};

inline constexpr std::size_t kClipLength = 32;

inline double stream_fps(const StreamHeader& h) {
  const double dt = median_spacing(h.timestamps);
  return dt > 0.0 ? 1.0 / dt : 0.0;
}

/// Per-task recording filters: frame rate, Doppler:B-mode frame ratio,
/// Nyquist range, timestamp slack and minimum length.
inline FilterResult filter_recording(const Recording& rec, Task task, double slack_factor = kDefaultSlackFactor) {
  const Stream* bmode = rec.find(Modality::bmode2d);
  if (!bmode) throw data_error("filter_recording: required stream bmode2d absent");
  FilterResult r;
  auto fail = [&r](std::string why) {
    r.accept = false;
    r.reasons.push_back(std::move(why));
  };
  const double fps = stream_fps(bmode->header);
  if (bmode->header.frames() < kClipLength) fail("below 32 frames");

  if (task == Task::tissue) {
    const Stream* tdi = rec.find(Modality::tdi2d);
    if (!tdi) throw data_error("filter_recording: required stream tdi2d absent");
    if (fps < 26.0 || fps > 33.0) fail("FPS out of [26,33]");
    const auto pairing = pair_interleaved(bmode->header.timestamps, tdi->header.timestamps, slack_factor);
    if (pairing.unmatched) fail("timestamp slack exceeds " + std::to_string(slack_factor) + "x median dt");
  } else if (task == Task::color) {
    const Stream* color = rec.find(Modality::color2d);
    if (!color) throw data_error("filter_recording: required stream color2d absent");
    const double ratio = static_cast<double>(color->header.frames()) / static_cast<double>(bmode->header.frames());
    if (ratio < 0.45 || ratio > 1.1) fail("Doppler:B-mode frame ratio out of [0.45,1.1]");
    if (fps < 9.0 || fps > 13.0) fail("FPS out of [9,13]");
    const double nyq = color->header.nyquist_velocity.value_or(0.0);
    if (nyq < 0.60 || nyq > 0.61) fail("Nyquist out of [0.60,0.61]");
  } else {
    const bool has_masks = std::any_of(rec.annotations.contours.begin(), rec.annotations.contours.end(),
                                       [](const ContourTrack& t) { return !t.frames.empty(); });
    if (!has_masks) fail("no segmentation annotation");
  }
  return r;
}

struct ClipRange {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  friend bool operator==(const ClipRange&, const ClipRange&) = default;
};

inline std::vector<ClipRange> sample_clips(std::size_t n_frames, std::size_t clip_len = kClipLength,
                                           std::size_t stride = 16) {
  if (clip_len < 1 || stride < 1) throw usage_error("sample_clips: clip_len and stride must be >= 1");
  std::vector<ClipRange> out;
  for (std::size_t s = 0; s + clip_len <= n_frames; s += stride) out.push_back({s, s + clip_len});
  return out;
}

}  // namespace exfl
