#pragma once

// Per-recording scoring for the three benchmark tasks. Everything is scored
// in Cartesian space over the scan-converter validity region; beamspace
// inputs are converted first.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "echoxflow/annotations.hpp"
#include "echoxflow/container.hpp"
#include "echoxflow/core.hpp"
#include "echoxflow/geometry.hpp"
#include "echoxflow/metrics.hpp"
#include "echoxflow/timing.hpp"

namespace exfl::eval {

enum class Domain { beamspace, cartesian };

inline Domain domain_from_string(const std::string& s) {
  if (s == "beamspace") return Domain::beamspace;
  if (s == "cartesian") return Domain::cartesian;
  throw usage_error("unknown domain '" + s + "' (expected beamspace or cartesian)");
}

struct EvalConfig {
  std::size_t grid_size = 256;
  double slack_factor = kDefaultSlackFactor;
  MaskParams mask;
  Domain baseline_domain = Domain::beamspace;  // where the temporal mean is taken
  bool convert_predictions = false;            // allow beamspace predictions by converting them
};

struct Term {
  std::string name;
  std::optional<double> value;  // absent = undefined (e.g. empty velocity mask)
};

struct CaseResult {
  std::string exam_id;
  std::string recording_id;
  int task = 0;
  std::vector<Term> terms;

  std::string case_id() const { return exam_id + "/" + recording_id; }
};

// ---------------------------------------------------------------------------
// Task inputs (targets on the scoring grid)

struct SectorContext {
  SectorGeometry2D geometry;
  CartesianGrid2D grid;
  ScanConverter2D converter;

  SectorContext(const SectorGeometry2D& g, std::size_t size)
      : geometry(g), grid(default_grid_for(g, size)), converter(g, grid) {}
  const ValidityMask& region() const { return converter.mask(); }
};

inline const SectorGeometry2D& sector_of(const Recording& rec, const Stream& s) {
  const auto* g = rec.geometry<SectorGeometry2D>(s.header.geometry_id);
  if (!g) throw data_error(rec.id + ": " + to_string(s.header.modality) + " stream has no 2D sector geometry");
  return *g;
}

inline const Stream& require_stream(const Recording& rec, Modality m) {
  const Stream* s = rec.find(m);
  if (!s) throw data_error(rec.id + ": required stream " + std::string(to_string(m)) + " absent");
  return *s;
}

/// Channel c of a (frame, channel, ...) tensor as (frame, ...).
inline Tensor<float> channel(const Tensor<float>& t, std::size_t c) {
  if (t.rank() < 2 || c >= t.dim(1)) throw data_error("channel index out of range for shape " + shape_string(t.shape()));
  Shape s = t.shape();
  s.erase(s.begin() + 1);
  Tensor<float> out(s);
  const std::size_t plane = out.frame_size();
  for (std::size_t f = 0; f < t.dim(0); ++f) {
    auto src = t.flat().subspan((f * t.dim(1) + c) * plane, plane);
    std::copy(src.begin(), src.end(), out.frame(f).begin());
  }
  return out;
}

/// Stacks (frame, ...) tensors into (frame, channel, ...).
inline Tensor<float> stack_channels(const std::vector<const Tensor<float>*>& chans) {
  const Tensor<float>& first = *chans.front();
  Shape s = first.shape();
  s.insert(s.begin() + 1, chans.size());
  Tensor<float> out(s);
  const std::size_t plane = first.frame_size();
  for (std::size_t f = 0; f < first.dim(0); ++f)
    for (std::size_t c = 0; c < chans.size(); ++c) {
      require_same_shape(first, *chans[c], "stack_channels");
      auto src = chans[c]->frame(f);
      std::copy(src.begin(), src.end(), out.flat().begin() + static_cast<std::ptrdiff_t>((f * chans.size() + c) * plane));
    }
  return out;
}

struct Task1Inputs {
  SectorContext ctx;
  Tensor<float> beam_target;  // (frame, beam, sample)
  Tensor<float> target;       // (frame, row, col)
  double nyquist = 0.0;
  std::vector<double> times;
};

inline Task1Inputs task1_inputs(const Recording& rec, const EvalConfig& cfg) {
  const Stream& s = require_stream(rec, Modality::tdi2d);
  Task1Inputs in{SectorContext(sector_of(rec, s), cfg.grid_size), s.as_f32(), {}, *s.header.nyquist_velocity,
                 s.header.timestamps};
  if (in.beam_target.rank() != 3) throw data_error(rec.id + ": tdi2d stream must be (frame, beam, sample)");
  in.target = in.ctx.converter.convert_series(in.beam_target);
  return in;
}

struct Task2Inputs {
  SectorContext ctx;
  Tensor<float> beam_v, beam_p, beam_s;  // beamspace velocity, power, turbulence
  Tensor<float> v, p, s;                 // Cartesian targets; s is the turbulence of Cartesian v
  VelocityMask mask;                     // Cartesian, per frame
  double nyquist = 0.0;
  std::vector<double> times;
  StreamPairing pairing;
};

/// Operator box as a per-frame beamspace series; frames without a paired
/// B-mode frame get an empty box so they never enter the velocity mask.
inline Tensor<std::uint8_t> box_series(const StreamHeader& h, std::size_t nb, std::size_t ns,
                                       const StreamPairing& pairing) {
  const std::size_t nf = h.frames();
  Tensor<std::uint8_t> out(Shape{nf, nb, ns}, 0);
  for (std::size_t f = 0; f < nf; ++f) {
    if (!pairing.match[f]) continue;
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t s = 0; s < ns; ++s) out(f, b, s) = !h.color_box || h.color_box->contains(b, s) ? 1 : 0;
  }
  return out;
}

inline Task2Inputs task2_inputs(const Recording& rec, const EvalConfig& cfg) {
  const Stream& cs = require_stream(rec, Modality::color2d);
  const Stream& bs = require_stream(rec, Modality::bmode2d);
  const SectorGeometry2D& g = sector_of(rec, cs);
  if (sector_of(rec, bs) != g) throw data_error(rec.id + ": color and B-mode streams use different geometries");
  const Tensor<float> color = cs.as_f32();
  if (color.rank() != 4 || color.dim(1) != 2)
    throw data_error(rec.id + ": color2d stream must be (frame, 2, beam, sample), got " + shape_string(color.shape()));

  Task2Inputs in{SectorContext(g, cfg.grid_size), channel(color, 0), channel(color, 1), {}, {}, {}, {}, {},
                 *cs.header.nyquist_velocity, cs.header.timestamps,
                 pair_interleaved(bs.header.timestamps, cs.header.timestamps, cfg.slack_factor)};
  in.beam_s = turbulence_proxy(in.beam_v);
  const auto& conv = in.ctx.converter;
  in.v = conv.convert_series(in.beam_v);
  in.p = conv.convert_series(in.beam_p);
  in.s = turbulence_proxy(in.v);

  const Tensor<float> bmode = bs.as_f32();
  const std::size_t nf = color.dim(0);
  Tensor<float> paired(Shape{nf, g.n_beams, g.n_samples}, 1.0f);
  for (std::size_t f = 0; f < nf; ++f)
    if (in.pairing.match[f]) {
      auto src = bmode.frame(*in.pairing.match[f]);
      std::copy(src.begin(), src.end(), paired.frame(f).begin());
    }
  const Tensor<std::uint8_t> box = conv.convert_series(box_series(cs.header, g.n_beams, g.n_samples, in.pairing), true);
  in.mask = valid_velocity_mask(box, in.p, conv.convert_series(paired), cfg.mask);
  return in;
}

struct Task3Inputs {
  SectorContext ctx;
  Tensor<std::uint8_t> labels;       // (frame, row, col) on the grid
  Tensor<std::uint8_t> beam_labels;  // (frame, beam, sample)
  std::vector<bool> annotated;
};

/// LV endocardial and (optional) epicardial tracks of a recording.
inline std::pair<const ContourTrack*, const ContourTrack*> lv_tracks(const Recording& rec) {
  const ContourTrack *endo = nullptr, *epi = nullptr;
  for (const auto& t : rec.annotations.contours) {
    if (t.chamber != Chamber::lv) continue;
    if (t.layer == ContourLayer::endocardial && !endo) endo = &t;
    if (t.layer == ContourLayer::epicardial && !epi) epi = &t;
  }
  return {endo, epi};
}

inline Task3Inputs task3_inputs(const Recording& rec, const EvalConfig& cfg) {
  const Stream& bs = require_stream(rec, Modality::bmode2d);
  const SectorGeometry2D& g = sector_of(rec, bs);
  const auto [endo, epi] = lv_tracks(rec);
  if (!endo) throw data_error(rec.id + ": no LV endocardial contour track");
  const std::size_t nf = bs.header.frames();
  Task3Inputs in{SectorContext(g, cfg.grid_size), {}, Tensor<std::uint8_t>(Shape{nf, g.n_beams, g.n_samples}, 0),
                 std::vector<bool>(nf, false)};
  in.labels = Tensor<std::uint8_t>(Shape{nf, in.ctx.grid.height, in.ctx.grid.width}, 0);

  std::map<std::uint32_t, std::size_t> epi_at;
  if (epi)
    for (std::size_t k = 0; k < epi->frame_indices.size(); ++k) epi_at[epi->frame_indices[k]] = k;
  for (std::size_t k = 0; k < endo->frame_indices.size(); ++k) {
    const std::uint32_t f = endo->frame_indices[k];
    if (f >= nf) throw data_error(rec.id + ": contour frame index beyond the B-mode stream");
    const Contour2D ce = endo->contour(k);
    std::optional<Contour2D> cp;
    if (auto it = epi_at.find(f); it != epi_at.end()) cp = epi->contour(it->second);
    const auto lab = rasterize_contours(ce, cp, in.ctx.grid);
    std::copy(lab.flat().begin(), lab.flat().end(), in.labels.frame(f).begin());
    const auto& outer = cp ? cp->vertices : ce.vertices;
    double x0 = outer[0].x, x1 = x0, z0 = outer[0].z, z1 = z0;
    for (const auto& v : outer) {
      x0 = std::min(x0, v.x), x1 = std::max(x1, v.x);
      z0 = std::min(z0, v.z), z1 = std::max(z1, v.z);
    }
    for (std::size_t b = 0; b < g.n_beams; ++b)
      for (std::size_t s = 0; s < g.n_samples; ++s) {
        const Point2 p = beam_to_cartesian(g, static_cast<double>(b), static_cast<double>(s));
        if (p.x < x0 || p.x > x1 || p.z < z0 || p.z > z1) continue;
        std::uint8_t l = kBackground;
        if (point_in_polygon(p, ce.vertices))
          l = kCavity;
        else if (cp && point_in_polygon(p, cp->vertices))
          l = kMyocardium;
        in.beam_labels(f, b, s) = l;
      }
    in.annotated[f] = true;
  }
  return in;
}

// ---------------------------------------------------------------------------
// Baselines (per-case temporal mean), returned on the scoring grid.

inline Tensor<float> task1_baseline(const Task1Inputs& in, Domain domain) {
  if (domain == Domain::cartesian) return temporal_mean_baseline(in.target);
  return in.ctx.converter.convert_series(temporal_mean_baseline(in.beam_target));
}

struct Task2Prediction {
  Tensor<float> v, p, s;
};

inline Task2Prediction task2_baseline(const Task2Inputs& in, Domain domain) {
  if (domain == Domain::cartesian)
    return {temporal_mean_baseline(in.v), temporal_mean_baseline(in.p), temporal_mean_baseline(in.s)};
  const auto& c = in.ctx.converter;
  return {c.convert_series(temporal_mean_baseline(in.beam_v)), c.convert_series(temporal_mean_baseline(in.beam_p)),
          c.convert_series(temporal_mean_baseline(in.beam_s))};
}

/// Mean one-hot label over the annotated frames, as (3, frame, ...).
inline Tensor<float> mean_one_hot(const Tensor<std::uint8_t>& labels, const std::vector<bool>& annotated) {
  const std::size_t nf = labels.dim(0), fs = labels.frame_size();
  std::vector<double> acc(3 * fs, 0.0);
  std::size_t n = 0;
  for (std::size_t f = 0; f < nf; ++f) {
    if (!annotated[f]) continue;
    ++n;
    auto lab = labels.frame(f);
    for (std::size_t i = 0; i < fs; ++i) acc[lab[i] * fs + i] += 1.0;
  }
  if (n == 0) throw data_error("segmentation baseline: no annotated frames");
  Shape s = labels.shape();
  s.insert(s.begin(), 3);
  Tensor<float> out(s);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t f = 0; f < nf; ++f)
      for (std::size_t i = 0; i < fs; ++i) out[(c * nf + f) * fs + i] = static_cast<float>(acc[c * fs + i] / n);
  return out;
}

/// Class probabilities (3, frame, row, col).
inline Tensor<float> task3_baseline(const Task3Inputs& in, Domain domain) {
  if (domain == Domain::cartesian) return mean_one_hot(in.labels, in.annotated);
  const Tensor<float> beam = mean_one_hot(in.beam_labels, in.annotated);
  const std::size_t nf = in.labels.dim(0);
  Tensor<float> out(Shape{3, nf, in.ctx.grid.height, in.ctx.grid.width});
  const std::size_t bfs = in.beam_labels.frame_size(), cfs = in.labels.frame_size();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t f = 0; f < nf; ++f)
      in.ctx.converter.convert_frame<float>(beam.flat().subspan((c * nf + f) * bfs, bfs),
                                            out.flat().subspan((c * nf + f) * cfs, cfs));
  // Outside the sector there is no image: call it background.
  const ValidityMask& region = in.ctx.region();
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t i = 0; i < cfs; ++i)
      if (!region[i]) out[f * cfs + i] = 1.0f;
  return out;
}

/// Per-pixel argmax over the class axis; ties go to the lower class.
inline Tensor<std::uint8_t> argmax_labels(const Tensor<float>& probs) {
  const std::size_t plane = probs.size() / 3;
  Shape s(probs.shape().begin() + 1, probs.shape().end());
  Tensor<std::uint8_t> out(s, 0);
  for (std::size_t i = 0; i < plane; ++i) {
    std::uint8_t best = 0;
    for (std::uint8_t c = 1; c < 3; ++c)
      if (probs[c * plane + i] > probs[best * plane + i]) best = c;
    out[i] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scoring

inline std::vector<Term> score_task1(const Task1Inputs& in, const Tensor<float>& pred) {
  return {{"alias_l1", task1_loss(pred, in.target, in.nyquist, &in.ctx.region())}};
}

inline std::vector<Term> score_task2(const Task2Inputs& in, const Task2Prediction& pred) {
  const Task2Terms t = task2_loss(pred.v, pred.p, pred.s, in.v, in.p, in.s, in.mask.mask, &in.ctx.region());
  return {{"power", t.power}, {"velocity", t.velocity}, {"variation", t.variation}};
}

inline std::vector<Term> score_task3(const Task3Inputs& in, const Tensor<float>& probs) {
  return {{"dice", dice_score(argmax_labels(probs), in.labels, in.annotated)},
          {"dice_loss", masked_dice_loss(probs, in.labels, in.annotated)}};
}

/// Whether a recording carries what the task needs.
inline bool applies(const Recording& rec, Task task) {
  switch (task) {
    case Task::tissue:
      return rec.find(Modality::tdi2d) != nullptr;
    case Task::color:
      return rec.find(Modality::color2d) != nullptr && rec.find(Modality::bmode2d) != nullptr;
    case Task::segmentation:
      return rec.find(Modality::bmode2d) != nullptr && lv_tracks(rec).first != nullptr;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Prediction recordings
//
// Task 1: tdi2d (frame, row, col). Task 2: color2d (frame, 3, row, col) with
// channels velocity, power, variation. Task 3: bmode2d (frame, 3, row, col)
// class probabilities. Geometry cartesian2d for scored predictions; a sector
// geometry marks beamspace output.

inline Modality prediction_modality(Task task) {
  switch (task) {
    case Task::tissue:
      return Modality::tdi2d;
    case Task::color:
      return Modality::color2d;
    case Task::segmentation:
      return Modality::bmode2d;
  }
  throw usage_error("unknown task");
}

/// Prediction tensor on the scoring grid. Beamspace predictions are refused
/// unless conversion was requested.
inline Tensor<float> prediction_on_grid(const Recording& pred, Task task, const SectorContext& ctx,
                                        const EvalConfig& cfg) {
  const Stream& s = require_stream(pred, prediction_modality(task));
  Tensor<float> t = s.as_f32();
  const bool channels = task != Task::tissue;
  if (const auto* grid = pred.geometry<CartesianGrid2D>(s.header.geometry_id)) {
    if (!(*grid == ctx.grid)) throw data_error(pred.id + ": prediction grid differs from the scoring grid");
    Shape want = {t.dim(0), ctx.grid.height, ctx.grid.width};
    if (channels) want.insert(want.begin() + 1, 3);
    if (t.shape() != want) throw data_error(pred.id + ": prediction shape " + shape_string(t.shape()) + ", expected " + shape_string(want));
    return t;
  }
  const auto* sector = pred.geometry<SectorGeometry2D>(s.header.geometry_id);
  if (!sector) throw data_error(pred.id + ": prediction has no geometry");
  if (!cfg.convert_predictions)
    throw refusal(pred.id + ": beamspace predictions must be scan-converted before scoring (pass --convert-predictions)");
  if (!(*sector == ctx.geometry)) throw data_error(pred.id + ": prediction sector differs from the target sector");
  if (!channels) return ctx.converter.convert_series(t);
  std::vector<Tensor<float>> conv;
  for (std::size_t c = 0; c < 3; ++c) conv.push_back(ctx.converter.convert_series(channel(t, c)));
  return stack_channels({&conv[0], &conv[1], &conv[2]});
}

/// (frame, 3, ...) -> (3, frame, ...)
inline Tensor<float> channels_first(const Tensor<float>& t) {
  const std::size_t nf = t.dim(0), plane = t.frame_size() / 3;
  Shape s = t.shape();
  s.erase(s.begin() + 1);
  s.insert(s.begin(), 3);
  Tensor<float> out(s);
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t c = 0; c < 3; ++c) {
      auto src = t.flat().subspan((f * 3 + c) * plane, plane);
      std::copy(src.begin(), src.end(), out.flat().begin() + static_cast<std::ptrdiff_t>((c * nf + f) * plane));
    }
  return out;
}

/// (3, frame, ...) -> (frame, 3, ...)
inline Tensor<float> channels_last(const Tensor<float>& t) {
  const std::size_t nf = t.dim(1), plane = t.size() / (3 * nf);
  Shape s(t.shape().begin() + 1, t.shape().end());
  s.insert(s.begin() + 1, 3);
  Tensor<float> out(s);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t f = 0; f < nf; ++f) {
      auto src = t.flat().subspan((c * nf + f) * plane, plane);
      std::copy(src.begin(), src.end(), out.flat().begin() + static_cast<std::ptrdiff_t>((f * 3 + c) * plane));
    }
  return out;
}

/// Scores one recording. `pred` == nullptr scores the temporal-mean baseline.
inline CaseResult evaluate_recording(const Recording& rec, Task task, const Recording* pred, const EvalConfig& cfg) {
  CaseResult r{rec.exam.exam_id, rec.id, static_cast<int>(task), {}};
  switch (task) {
    case Task::tissue: {
      const Task1Inputs in = task1_inputs(rec, cfg);
      const Tensor<float> p = pred ? prediction_on_grid(*pred, task, in.ctx, cfg) : task1_baseline(in, cfg.baseline_domain);
      if (p.shape() != in.target.shape()) throw data_error(rec.id + ": prediction frame count differs from target");
      r.terms = score_task1(in, p);
      break;
    }
    case Task::color: {
      const Task2Inputs in = task2_inputs(rec, cfg);
      Task2Prediction p;
      if (pred) {
        const Tensor<float> t = prediction_on_grid(*pred, task, in.ctx, cfg);
        p = {channel(t, 0), channel(t, 1), channel(t, 2)};
      } else {
        p = task2_baseline(in, cfg.baseline_domain);
      }
      if (p.v.shape() != in.v.shape()) throw data_error(rec.id + ": prediction frame count differs from target");
      r.terms = score_task2(in, p);
      break;
    }
    case Task::segmentation: {
      const Task3Inputs in = task3_inputs(rec, cfg);
      const Tensor<float> p =
          pred ? channels_first(prediction_on_grid(*pred, task, in.ctx, cfg)) : task3_baseline(in, cfg.baseline_domain);
      if (p.dim(1) != in.labels.dim(0)) throw data_error(rec.id + ": prediction frame count differs from target");
      r.terms = score_task3(in, p);
      break;
    }
  }
  return r;
}

/// Baseline prediction recording in the prediction layout above, on the
/// Cartesian scoring grid.
inline Recording baseline_recording(const Recording& rec, Task task, const EvalConfig& cfg) {
  Recording out;
  out.id = rec.id;
  out.exam = rec.exam;
  out.ecg = rec.ecg;
  Tensor<float> data;
  std::vector<double> times;
  std::optional<double> nyquist;
  CartesianGrid2D grid;
  switch (task) {
    case Task::tissue: {
      const Task1Inputs in = task1_inputs(rec, cfg);
      data = task1_baseline(in, cfg.baseline_domain);
      times = in.times;
      nyquist = in.nyquist;
      grid = in.ctx.grid;
      break;
    }
    case Task::color: {
      const Task2Inputs in = task2_inputs(rec, cfg);
      const Task2Prediction p = task2_baseline(in, cfg.baseline_domain);
      data = stack_channels({&p.v, &p.p, &p.s});
      times = in.times;
      nyquist = in.nyquist;
      grid = in.ctx.grid;
      break;
    }
    case Task::segmentation: {
      const Task3Inputs in = task3_inputs(rec, cfg);
      data = channels_last(task3_baseline(in, cfg.baseline_domain));
      times = require_stream(rec, Modality::bmode2d).header.timestamps;
      grid = in.ctx.grid;
      break;
    }
  }
  out.geometries[0] = grid;
  StreamHeader h{prediction_modality(task), DType::f32, {}, times, nyquist, 0, std::nullopt};
  out.streams.push_back(Stream::from_tensor(h, data));
  return out;
}

// ---------------------------------------------------------------------------
// Fold summaries

struct FoldRow {
  std::string fold;  // fold index or "all"
  std::string term;
  double mean = 0.0;
  std::optional<double> std;
};

/// Per-fold mean and sample std of each term over cases, plus an "all" row
/// (mean and std across fold means) once every fold is populated.
inline std::vector<FoldRow> fold_summary(const std::vector<CaseResult>& cases, const std::map<std::string, int>& fold_of_exam,
                                         int n_folds) {
  std::map<std::string, std::map<int, std::vector<double>>> by_term;
  std::vector<std::string> term_order;
  for (const auto& c : cases) {
    const auto it = fold_of_exam.find(c.exam_id);
    if (it == fold_of_exam.end()) throw usage_error("fold_summary: exam " + c.exam_id + " has no fold");
    for (const auto& t : c.terms) {
      if (!by_term.count(t.name)) term_order.push_back(t.name);
      auto& slot = by_term[t.name][it->second];
      if (t.value) slot.push_back(*t.value);
    }
  }
  std::vector<FoldRow> rows;
  for (const auto& name : term_order) {
    std::vector<double> fold_means;
    for (const auto& [fold, values] : by_term[name]) {
      if (values.empty()) continue;
      FoldRow r{std::to_string(fold), name, 0.0, std::nullopt};
      for (double v : values) r.mean += v;
      r.mean /= static_cast<double>(values.size());
      if (values.size() >= 2) {
        double ss = 0.0;
        for (double v : values) ss += (v - r.mean) * (v - r.mean);
        r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
      }
      fold_means.push_back(r.mean);
      rows.push_back(r);
    }
    if (static_cast<int>(fold_means.size()) == n_folds) {
      const FoldSummary s = aggregate_folds(fold_means, static_cast<std::size_t>(n_folds));
      rows.push_back({"all", name, s.mean, s.std});
    }
  }
  return rows;
}

}  // namespace exfl::eval
