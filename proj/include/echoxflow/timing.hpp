#pragma once

// ECG beat detection, cardiac phase, interleaved-stream pairing, multi-beat
// stitching and single-cycle annotation propagation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "echoxflow/core.hpp"

namespace exfl {

inline constexpr double kRefractorySeconds = 0.25;
inline constexpr double kDefaultMaxCv = 0.10;
inline constexpr double kDefaultSlackFactor = 1.5;

struct EcgTrace {
  std::vector<float> samples;  // millivolts
  double rate = 600.0;         // Hz
  double t0 = 0.0;             // seconds

  double duration() const { return static_cast<double>(samples.size()) / rate; }
  double time_of(std::size_t i) const { return t0 + static_cast<double>(i) / rate; }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (!(rate > 0.0)) out.push_back("EcgTrace.rate must be > 0");
    if (samples.empty()) out.push_back("EcgTrace.samples must be non-empty");
    return out;
  }

  friend bool operator==(const EcgTrace&, const EcgTrace&) = default;
};

struct RPeakList {
  std::vector<double> times;  // seconds, ascending

  std::size_t size() const { return times.size(); }
  bool empty() const { return times.empty(); }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    for (std::size_t i = 1; i < times.size(); ++i) {
      if (!(times[i] > times[i - 1])) {
        out.push_back("RPeakList.times not strictly increasing");
        break;
      }
      if (times[i] - times[i - 1] < kRefractorySeconds - 1e-12) {
        out.push_back("RPeakList gap shorter than refractory period");
        break;
      }
    }
    return out;
  }

  friend bool operator==(const RPeakList&, const RPeakList&) = default;
};

struct RPeakDetection {
  RPeakList peaks;
  bool no_peaks_warning = false;
};

/// Derivative / square / moving-window-integrate detector with an adaptive
/// threshold at half the running median of accepted peak energies and a
/// 250 ms refractory period. Scale invariant in amplitude.
inline RPeakDetection detect_r_peaks(const EcgTrace& ecg) {
  if (auto v = ecg.violations(); !v.empty()) throw usage_error(v.front());
  if (ecg.duration() < 1.0) throw usage_error("detect_r_peaks: trace too short (< 1 s)");

  const std::size_t n = ecg.samples.size();
  const double mean = std::accumulate(ecg.samples.begin(), ecg.samples.end(), 0.0) / static_cast<double>(n);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = ecg.samples[i] - mean;

  // Five-point derivative, squared.
  std::vector<double> sq(n, 0.0);
  for (std::size_t i = 2; i + 2 < n; ++i) {
    const double d = (2.0 * x[i + 2] + x[i + 1] - x[i - 1] - 2.0 * x[i - 2]) / 8.0;
    sq[i] = d * d;
  }

  // Centered 150 ms moving-window integration via prefix sums.
  const auto half = static_cast<std::size_t>(std::max(1.0, std::round(0.075 * ecg.rate)));
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + sq[i];
  std::vector<double> integ(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n, i + half + 1);
    integ[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(2 * half + 1);
  }

  RPeakDetection result;
  const double global_max = *std::max_element(integ.begin(), integ.end());
  if (!(global_max > 0.0)) {
    result.no_peaks_warning = true;
    return result;
  }

  const auto learn = std::min(n, static_cast<std::size_t>(2.0 * ecg.rate));
  std::vector<double> history = {*std::max_element(integ.begin(), integ.begin() + learn)};
  auto threshold = [&history] {
    std::vector<double> h(history.end() - static_cast<std::ptrdiff_t>(std::min<std::size_t>(history.size(), 8)),
                          history.end());
    std::nth_element(h.begin(), h.begin() + h.size() / 2, h.end());
    double med = h[h.size() / 2];
    if (h.size() % 2 == 0) {
      const double lower = *std::max_element(h.begin(), h.begin() + h.size() / 2);
      med = 0.5 * (med + lower);
    }
    return 0.5 * med;
  };

  const auto refractory = static_cast<std::size_t>(std::round(kRefractorySeconds * ecg.rate));
  std::vector<std::size_t> accepted;
  std::vector<double> accepted_energy;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (!(integ[i] > integ[i - 1] && integ[i] >= integ[i + 1])) continue;
    if (integ[i] < threshold()) continue;
    if (!accepted.empty() && i - accepted.back() < refractory) {
      if (integ[i] > accepted_energy.back()) {
        accepted.back() = i;
        accepted_energy.back() = integ[i];
        history.back() = integ[i];
      }
      continue;
    }
    accepted.push_back(i);
    accepted_energy.push_back(integ[i]);
    history.push_back(integ[i]);
  }
  // Refine each detection to the raw-signal maximum nearby.
  std::vector<std::size_t> located;
  for (std::size_t c : accepted) {
    const std::size_t lo = c >= half ? c - half : 0;
    const std::size_t hi = std::min(n - 1, c + half);
    std::size_t best = lo;
    for (std::size_t i = lo; i <= hi; ++i)
      if (x[i] > x[best]) best = i;
    if (!located.empty() && best - located.back() < refractory) {
      if (x[best] > x[located.back()]) located.back() = best;
      continue;
    }
    located.push_back(best);
  }
  for (std::size_t i : located) result.peaks.times.push_back(ecg.time_of(i));
  result.no_peaks_warning = result.peaks.empty();
  return result;
}

/// Coefficient of variation of the RR intervals (sample standard deviation).
inline double rr_regularity(const RPeakList& peaks) {
  if (peaks.size() < 3) throw usage_error("rr_regularity: need at least 3 peaks");
  std::vector<double> rr;
  for (std::size_t i = 1; i < peaks.size(); ++i) rr.push_back(peaks.times[i] - peaks.times[i - 1]);
  const double m = std::accumulate(rr.begin(), rr.end(), 0.0) / static_cast<double>(rr.size());
  double ss = 0.0;
  for (double v : rr) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(rr.size() - 1)) / m;
}

/// Cardiac phase in [0, 1) within the enclosing RR interval; nullopt
/// outside [first peak, last peak).
inline std::optional<double> phase_of(double t, const RPeakList& peaks) {
  if (peaks.size() < 2) return std::nullopt;
  const auto& p = peaks.times;
  if (t < p.front() || t >= p.back()) return std::nullopt;
  const auto it = std::upper_bound(p.begin(), p.end(), t);
  const std::size_t k = static_cast<std::size_t>(it - p.begin()) - 1;
  return (t - p[k]) / (p[k + 1] - p[k]);
}

/// Index of the RR interval containing t, or nullopt.
inline std::optional<std::size_t> beat_of(double t, const RPeakList& peaks) {
  const auto& p = peaks.times;
  if (p.size() < 2 || t < p.front() || t >= p.back()) return std::nullopt;
  return static_cast<std::size_t>(std::upper_bound(p.begin(), p.end(), t) - p.begin()) - 1;
}

inline double median_spacing(std::span<const double> ts) {
  if (ts.size() < 2) return 0.0;
  std::vector<double> d;
  for (std::size_t i = 1; i < ts.size(); ++i) d.push_back(ts[i] - ts[i - 1]);
  std::sort(d.begin(), d.end());
  const std::size_t m = d.size() / 2;
  return d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
}

struct StreamPairing {
  std::vector<std::optional<std::size_t>> match;  // per frame of B: index into A
  std::vector<double> delta;                       // t_B - t_A for matched frames, NaN otherwise
  double bound = 0.0;                              // slack bound in seconds
  double max_abs_delta = 0.0;
  double mean_abs_delta = 0.0;
  std::size_t unmatched = 0;
};

/// Matches every frame of stream B to the nearest frame of stream A when
/// the gap is within slack_factor times A's median frame spacing.
inline StreamPairing pair_interleaved(std::span<const double> ts_a, std::span<const double> ts_b,
                                      double slack_factor = kDefaultSlackFactor) {
  if (ts_a.empty() || ts_b.empty()) throw usage_error("pair_interleaved: empty timestamp list");
  for (auto ts : {ts_a, ts_b})
    for (std::size_t i = 1; i < ts.size(); ++i)
      if (!(ts[i] > ts[i - 1])) throw usage_error("pair_interleaved: timestamps not strictly increasing");

  StreamPairing out;
  const double spacing = ts_a.size() >= 2 ? median_spacing(ts_a) : median_spacing(ts_b);
  out.bound = slack_factor * spacing;
  double sum = 0.0;
  std::size_t matched = 0;
  for (double tb : ts_b) {
    const auto it = std::lower_bound(ts_a.begin(), ts_a.end(), tb);
    std::size_t best = it == ts_a.end() ? ts_a.size() - 1 : static_cast<std::size_t>(it - ts_a.begin());
    if (best > 0 && std::abs(ts_a[best - 1] - tb) <= std::abs(ts_a[best] - tb)) --best;
    const double d = tb - ts_a[best];
    if (std::abs(d) <= out.bound) {
      out.match.emplace_back(best);
      out.delta.push_back(d);
      out.max_abs_delta = std::max(out.max_abs_delta, std::abs(d));
      sum += std::abs(d);
      ++matched;
    } else {
      out.match.emplace_back(std::nullopt);
      out.delta.push_back(std::nan(""));
      ++out.unmatched;
    }
  }
  out.mean_abs_delta = matched ? sum / static_cast<double>(matched) : 0.0;
  return out;
}

/// One ECG-gated sub-acquisition covering a contiguous azimuth sub-range
/// of the full sector. Frames are laid out (frame, plane, beam, sample).
struct GatedSubAcquisition {
  std::size_t beam_offset = 0;
  Tensor<float> frames;
  std::vector<double> timestamps;
};

struct StitchedSeries {
  Tensor<float> frames;         // (phase, plane, beam, sample)
  std::vector<double> phases;   // common phase axis
};

namespace detail {

// Cyclic linear interpolation of a frame series sampled at the given
// phases, evaluated at phase `target` in [0, 1).
inline void interpolate_phase(const Tensor<float>& frames, const std::vector<double>& phases,
                              const std::vector<std::size_t>& order, double target, std::span<float> out) {
  const std::size_t n = order.size();
  if (n == 1) {
    auto src = frames.frame(order[0]);
    std::copy(src.begin(), src.end(), out.begin());
    return;
  }
  std::size_t lo = n - 1, hi = 0;
  double p_lo = phases[order[n - 1]] - 1.0, p_hi = phases[order[0]];
  for (std::size_t k = 0; k + 1 < n; ++k) {
    if (phases[order[k]] <= target && target < phases[order[k + 1]]) {
      lo = k;
      hi = k + 1;
      p_lo = phases[order[k]];
      p_hi = phases[order[k + 1]];
      break;
    }
  }
  if (target >= phases[order[n - 1]]) {
    lo = n - 1;
    hi = 0;
    p_lo = phases[order[n - 1]];
    p_hi = phases[order[0]] + 1.0;
  }
  const double w = p_hi > p_lo ? (target - p_lo) / (p_hi - p_lo) : 0.0;
  auto a = frames.frame(order[lo]);
  auto b = frames.frame(order[hi]);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(a[i]) + w * (static_cast<double>(b[i]) - a[i]));
}

}  // namespace detail

/// Assembles ECG-gated sub-acquisitions into one wide-sector series over a
/// single cardiac cycle. Each sub-acquisition is phase-normalised against
/// its own beat and resampled onto a common phase axis whose length is the
/// largest sub-acquisition frame count.
inline StitchedSeries stitch_multibeat(std::span<const GatedSubAcquisition> subacqs, const RPeakList& peaks,
                                       double max_cv = kDefaultMaxCv) {
  if (subacqs.empty()) throw usage_error("stitch_multibeat: no sub-acquisitions");
  if (subacqs.size() > 6) throw usage_error("stitch_multibeat: at most 6 sub-acquisitions are supported");
  for (const auto& s : subacqs) {
    if (s.frames.rank() != 4) throw usage_error("stitch_multibeat: frames must be (frame, plane, beam, sample)");
    if (s.frames.dim(0) != s.timestamps.size() || s.timestamps.empty())
      throw usage_error("stitch_multibeat: frame count does not match timestamps");
  }
  if (subacqs.size() == 1) {
    if (subacqs[0].beam_offset != 0) throw usage_error("stitch_multibeat: azimuth range does not start at beam 0");
    StitchedSeries out{subacqs[0].frames, {}};
    for (double t : subacqs[0].timestamps) out.phases.push_back(phase_of(t, peaks).value_or(std::nan("")));
    return out;
  }

  if (peaks.size() < 3) throw data_error("stitch_multibeat: need at least 3 R-peaks to verify rhythm regularity");
  const double cv = rr_regularity(peaks);
  if (cv > max_cv)
    throw refusal("stitch_multibeat: RR coefficient of variation " + std::to_string(cv) + " exceeds " +
                  std::to_string(max_cv) + "; refusing to stitch an irregular rhythm");

  std::vector<std::size_t> order(subacqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return subacqs[a].beam_offset < subacqs[b].beam_offset; });
  const std::size_t planes = subacqs[0].frames.dim(1), samples = subacqs[0].frames.dim(3);
  std::size_t next = 0, frames_max = 0;
  for (std::size_t k : order) {
    const auto& s = subacqs[k];
    if (s.frames.dim(1) != planes || s.frames.dim(3) != samples)
      throw usage_error("stitch_multibeat: sub-acquisitions disagree on plane or sample count");
    if (s.beam_offset < next) throw usage_error("stitch_multibeat: overlapping azimuth ranges");
    if (s.beam_offset > next) throw usage_error("stitch_multibeat: gap between azimuth ranges");
    next += s.frames.dim(2);
    frames_max = std::max(frames_max, s.frames.dim(0));
  }
  const std::size_t total_beams = next;

  StitchedSeries out;
  out.frames = Tensor<float>(Shape{frames_max, planes, total_beams, samples});
  for (std::size_t j = 0; j < frames_max; ++j) out.phases.push_back(static_cast<double>(j) / frames_max);

  for (const auto& s : subacqs) {
    std::vector<double> ph;
    for (double t : s.timestamps) {
      const auto p = phase_of(t, peaks);
      if (!p) throw data_error("stitch_multibeat: sub-acquisition frame outside the R-peak span");
      ph.push_back(*p);
    }
    std::vector<std::size_t> idx(ph.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return ph[a] < ph[b]; });

    const std::size_t nb = s.frames.dim(2);
    std::vector<float> buf(s.frames.frame_size());
    for (std::size_t j = 0; j < frames_max; ++j) {
      detail::interpolate_phase(s.frames, ph, idx, out.phases[j], buf);
      auto dst = out.frames.frame(j);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t b = 0; b < nb; ++b)
          std::copy_n(buf.begin() + static_cast<std::ptrdiff_t>((p * nb + b) * samples), samples,
                      dst.begin() + static_cast<std::ptrdiff_t>((p * total_beams + s.beam_offset + b) * samples));
    }
  }
  return out;
}

/// Where each recording frame takes its annotation from.
struct PropagatedFrame {
  std::optional<std::size_t> source;  // annotation frame index
  double source_phase = std::nan("");
  double phase = std::nan("");        // phase of the recording frame
};

/// Replicates an annotation drawn over a single beat onto every beat of the
/// recording by matching cardiac phase (nearest, cyclic).
inline std::vector<PropagatedFrame> propagate_cycle_annotation(std::span<const double> annotation_times,
                                                               const RPeakList& peaks,
                                                               std::span<const double> recording_times,
                                                               double max_cv = kDefaultMaxCv) {
  if (annotation_times.empty()) throw usage_error("propagate_cycle_annotation: empty annotation");
  if (peaks.size() < 3) throw data_error("propagate_cycle_annotation: need at least 3 R-peaks");
  const double cv = rr_regularity(peaks);
  if (cv > max_cv)
    throw refusal("propagate_cycle_annotation: RR coefficient of variation " + std::to_string(cv) +
                  " exceeds " + std::to_string(max_cv));

  const auto beat = beat_of(annotation_times[0], peaks);
  std::vector<double> src_phase;
  for (double t : annotation_times) {
    const auto b = beat_of(t, peaks);
    if (!b || b != beat) throw usage_error("propagate_cycle_annotation: annotation must cover exactly one beat");
    src_phase.push_back(*phase_of(t, peaks));
  }

  std::vector<PropagatedFrame> out(recording_times.size());
  for (std::size_t i = 0; i < recording_times.size(); ++i) {
    const auto p = phase_of(recording_times[i], peaks);
    if (!p) continue;
    std::size_t best = 0;
    double best_d = 2.0;
    for (std::size_t k = 0; k < src_phase.size(); ++k) {
      double d = std::abs(src_phase[k] - *p);
      d = std::min(d, 1.0 - d);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out[i] = {best, src_phase[best], *p};
  }
  return out;
}

/// Builds the full-recording annotation series from a propagation plan.
/// Frames without a source stay zero.
template <typename T>
Tensor<T> materialize_propagation(const Tensor<T>& annotation_frames, const std::vector<PropagatedFrame>& plan) {
  Shape shape = annotation_frames.shape();
  shape[0] = plan.size();
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (!plan[i].source) continue;
    auto src = annotation_frames.frame(*plan[i].source);
    std::copy(src.begin(), src.end(), out.frame(i).begin());
  }
  return out;
}

}  // namespace exfl
