#pragma once

// Command-line front end. `run` is the whole program; tools/exfl.cpp only
// forwards argv so the same entry point can be driven in-process by tests.
//
// Exit codes: 0 success, 2 usage, 3 data/validation (and I/O), 4 refusal.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "echoxflow/annotations.hpp"
#include "echoxflow/container.hpp"
#include "echoxflow/evaluate.hpp"
#include "echoxflow/geometry.hpp"
#include "echoxflow/io.hpp"
#include "echoxflow/metrics.hpp"
#include "echoxflow/phantom.hpp"
#include "echoxflow/timing.hpp"

namespace exfl::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitRefusal = 4;
inline constexpr const char* kOutputEnv = "EXFL_OUTPUT_DIR";

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage:
      return kExitUsage;
    case ErrorKind::refusal:
      return kExitRefusal;
    case ErrorKind::data:
    case ErrorKind::io:
      return kExitData;
  }
  return kExitData;
}

/// Shortest decimal that round-trips the double.
inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }

// ---------------------------------------------------------------------------
// Input discovery

struct RecordingRef {
  ExamManifest exam;
  fs::path dir;
};

struct Inputs {
  std::vector<ExamManifest> exams;
  std::vector<RecordingRef> recordings;
};

/// Accepts exam directories, recording directories, or directories whose
/// children are exams; children are visited in sorted order.
inline Inputs discover(const std::vector<std::string>& paths) {
  Inputs in;
  auto add_exam = [&](const fs::path& dir) {
    ExamManifest e = read_exam_manifest(dir);
    for (const auto& id : e.recording_ids) in.recordings.push_back({e, dir / id});
    in.exams.push_back(std::move(e));
  };
  for (const auto& p : paths) {
    const fs::path dir(p);
    if (!fs::exists(dir)) throw io_error("no such path: " + p);
    if (is_exam_directory(dir)) {
      add_exam(dir);
    } else if (is_recording_directory(dir)) {
      const Recording r = read_recording(dir);
      ExamManifest e{r.exam.exam_id, {r.id}, r.exam.patient_key, r.exam.fold};
      in.recordings.push_back({e, dir});
      in.exams.push_back(std::move(e));
    } else if (fs::is_directory(dir)) {
      std::vector<fs::path> kids;
      for (const auto& ent : fs::directory_iterator(dir))
        if (ent.is_directory() && is_exam_directory(ent.path())) kids.push_back(ent.path());
      std::sort(kids.begin(), kids.end());
      if (kids.empty()) throw data_error(p + ": not an exam, recording, or directory of exams");
      for (const auto& k : kids) add_exam(k);
    } else {
      throw data_error(p + ": not a directory");
    }
  }
  return in;
}

inline fs::path output_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
  throw usage_error(std::string("no output directory (pass -o or set ") + kOutputEnv + ")");
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the error of
/// the lowest failing index.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t t = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), 1, std::max<std::size_t>(n, 1));
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < t; ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Raster output

inline std::string pgm(const std::vector<std::uint8_t>& px, std::size_t width, std::size_t height) {
  std::string s = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  s.append(px.begin(), px.end());
  return s;
}

struct Range {
  double lo = 0.0, hi = 0.0;
};

/// Min and max over the valid pixels of every frame.
inline Range valid_range(const Tensor<float>& series, const ValidityMask& mask) {
  Range r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  const std::size_t fs = mask.size();
  for (std::size_t i = 0; i < series.size(); ++i)
    if (mask[i % fs]) {
      r.lo = std::min(r.lo, static_cast<double>(series[i]));
      r.hi = std::max(r.hi, static_cast<double>(series[i]));
    }
  if (r.lo > r.hi) r = {0.0, 0.0};
  return r;
}

inline std::vector<std::uint8_t> quantize(std::span<const float> frame, const ValidityMask& mask, const Range& r) {
  std::vector<std::uint8_t> px(frame.size(), 0);
  const double span = r.hi - r.lo;
  for (std::size_t i = 0; i < frame.size(); ++i) {
    if (!mask[i] || span <= 0.0) continue;
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp((frame[i] - r.lo) / span, 0.0, 1.0) * 255.0));
  }
  return px;
}

inline void write_series_pgm(const fs::path& dir, const Tensor<float>& series, const ValidityMask& mask,
                             const CartesianGrid2D& grid) {
  io::ensure_directory(dir);
  const Range r = valid_range(series, mask);
  for (std::size_t f = 0; f < series.dim(0); ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.pgm", f);
    io::write_text_atomic(dir / name, pgm(quantize(series.frame(f), mask, r), grid.width, grid.height));
  }
  std::vector<std::uint8_t> m(mask.flat().begin(), mask.flat().end());
  for (auto& v : m) v = v ? 255 : 0;
  io::write_text_atomic(dir / "mask.pgm", pgm(m, grid.width, grid.height));
  io::write_text_atomic(dir / "range.txt", "min " + fmt(r.lo) + "\nmax " + fmt(r.hi) + "\n");
}

inline void write_curve_csv(const fs::path& path, const std::vector<std::size_t>& frames, const std::vector<double>& times,
                            const std::vector<double>& values) {
  std::string s = "frame,time_s,value\n";
  for (std::size_t i = 0; i < values.size(); ++i)
    s += std::to_string(frames[i]) + "," + fmt(times[i]) + "," + fmt(values[i]) + "\n";
  io::write_text_atomic(path, s);
}

// ---------------------------------------------------------------------------
// Subcommands

inline void cmd_inspect(const std::vector<std::string>& paths, std::ostream& out) {
  const Inputs in = discover(paths);
  out << "exam,patient_key,fold,recording,stream,modality,dtype,shape,frames,rate_hz,nyquist_m_s,geometry\n";
  for (const auto& ref : in.recordings) {
    const Recording rec = read_recording(ref.dir);
    for (std::size_t i = 0; i < rec.streams.size(); ++i) {
      const auto& h = rec.streams[i].header;
      std::string geom = "none";
      if (auto it = rec.geometries.find(h.geometry_id); it != rec.geometries.end())
        geom = std::visit([](const auto& g) -> std::string {
          using G = std::decay_t<decltype(g)>;
          if constexpr (std::is_same_v<G, SectorGeometry2D>) return "sector2d";
          else if constexpr (std::is_same_v<G, SphericalGeometry3D>) return "spherical3d";
          else return "cartesian2d";
        }, it->second);
      std::string shape;
      for (std::size_t d = 0; d < h.shape.size(); ++d) shape += (d ? "x" : "") + std::to_string(h.shape[d]);
      char rate[32] = "NA";
      if (h.frames() >= 2) std::snprintf(rate, sizeof rate, "%.6g", stream_fps(h));
      out << ref.exam.exam_id << "," << ref.exam.patient_key << "," << (ref.exam.fold ? std::to_string(*ref.exam.fold) : "NA")
          << "," << rec.id << "," << i << "," << to_string(h.modality) << "," << to_string(h.dtype) << "," << shape << ","
          << h.frames() << "," << rate << "," << fmt(h.nyquist_velocity) << ","
          << geom << "\n";
    }
  }
}

inline void cmd_convert(const std::vector<std::string>& paths, const fs::path& out_dir, std::size_t size, int jobs,
                        std::ostream& err) {
  const Inputs in = discover(paths);
  std::mutex err_mu;
  parallel_for(in.recordings.size(), jobs, [&](std::size_t k) {
    const Recording rec = read_recording(in.recordings[k].dir);
    for (std::size_t i = 0; i < rec.streams.size(); ++i) {
      const Stream& s = rec.streams[i];
      const auto* g = rec.geometry<SectorGeometry2D>(s.header.geometry_id);
      if (!g) {
        std::lock_guard lock(err_mu);
        err << "note: " << rec.id << " stream " << i << " (" << to_string(s.header.modality)
            << ") has no 2D sector geometry; skipped\n";
        continue;
      }
      const ScanConverter2D conv(*g, default_grid_for(*g, size));
      const Tensor<float> data = s.as_f32();
      char name[48];
      std::snprintf(name, sizeof name, "stream_%02zu_%s", i, to_string(s.header.modality));
      const fs::path base = out_dir / in.recordings[k].exam.exam_id / rec.id / name;
      if (data.rank() == 3) {
        write_series_pgm(base, conv.convert_series(data), conv.mask(), conv.grid());
      } else if (data.rank() == 4) {
        for (std::size_t c = 0; c < data.dim(1); ++c)
          write_series_pgm(base / ("channel_" + std::to_string(c)), conv.convert_series(eval::channel(data, c)),
                           conv.mask(), conv.grid());
      } else {
        throw data_error(rec.id + ": stream " + std::to_string(i) + " has unexpected shape " + shape_string(data.shape()));
      }
    }
  });
}

inline void cmd_align(const std::vector<std::string>& paths, const fs::path& out_dir, double slack, std::ostream& out,
                      std::ostream& err) {
  const Inputs in = discover(paths);
  out << "recording,peaks,rr_cv,stream,matched,unmatched,max_abs_delta_s,bound_s\n";
  for (const auto& ref : in.recordings) {
    const Recording rec = read_recording(ref.dir);
    const fs::path dir = out_dir / ref.exam.exam_id / rec.id;
    io::ensure_directory(dir);
    const RPeakDetection det = detect_r_peaks(rec.ecg);
    if (det.no_peaks_warning) err << "warning: " << rec.id << ": no R-peaks detected\n";
    std::string csv = "time_s\n";
    for (double t : det.peaks.times) csv += fmt(t) + "\n";
    io::write_text_atomic(dir / "rpeaks.csv", csv);
    const std::string cv = det.peaks.size() >= 3 ? fmt(rr_regularity(det.peaks)) : "NA";

    const Stream* bmode = rec.find(Modality::bmode2d);
    for (std::size_t i = 0; i < rec.streams.size(); ++i) {
      const auto& h = rec.streams[i].header;
      if (!bmode || !is_doppler(h.modality)) continue;
      const StreamPairing p = pair_interleaved(bmode->header.timestamps, h.timestamps, slack);
      std::string pc = "frame,bmode_frame,delta_s\n";
      for (std::size_t f = 0; f < p.match.size(); ++f)
        pc += std::to_string(f) + "," + (p.match[f] ? std::to_string(*p.match[f]) : "") + "," +
              (p.match[f] ? fmt(p.delta[f]) : "") + "\n";
      char name[48];
      std::snprintf(name, sizeof name, "pairing_stream_%02zu.csv", i);
      io::write_text_atomic(dir / name, pc);
      if (p.unmatched) err << "warning: " << rec.id << " stream " << i << ": " << p.unmatched << " unmatched frames\n";
      out << rec.id << "," << det.peaks.size() << "," << cv << "," << i << "," << (p.match.size() - p.unmatched) << ","
          << p.unmatched << "," << fmt(p.max_abs_delta) << "," << fmt(p.bound) << "\n";
    }
  }
}

/// Stitches the bmode3d sub-sector streams of one recording.
inline Recording stitch_recording(const Recording& rec, double max_cv) {
  std::vector<GatedSubAcquisition> subs;
  std::vector<const SphericalGeometry3D*> geoms;
  for (const auto& s : rec.streams) {
    if (s.header.modality != Modality::bmode3d) continue;
    const auto* g = rec.geometry<SphericalGeometry3D>(s.header.geometry_id);
    if (!g) throw data_error(rec.id + ": bmode3d stream without spherical geometry");
    geoms.push_back(g);
    subs.push_back({0, s.as_f32(), s.header.timestamps});
  }
  if (subs.empty()) throw data_error(rec.id + ": no bmode3d sub-acquisitions to stitch");
  double theta_min = geoms[0]->sector.theta0;
  for (const auto* g : geoms) theta_min = std::min(theta_min, g->sector.theta0);
  const auto& ref = *geoms[0];
  for (std::size_t k = 0; k < subs.size(); ++k) {
    const auto& g = *geoms[k];
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)); };
    if (!close(g.sector.dtheta, ref.sector.dtheta) || !close(g.phi0, ref.phi0) || !close(g.dphi, ref.dphi) ||
        g.n_planes != ref.n_planes || !close(g.sector.r0, ref.sector.r0) || !close(g.sector.dr, ref.sector.dr) ||
        g.sector.n_samples != ref.sector.n_samples)
      throw data_error(rec.id + ": sub-acquisitions differ in elevation/range sampling");
    const double off = (g.sector.theta0 - theta_min) / ref.sector.dtheta;
    if (std::abs(off - std::round(off)) > 1e-6) throw data_error(rec.id + ": sub-sector azimuth not on the beam lattice");
    subs[k].beam_offset = static_cast<std::size_t>(std::llround(off));
  }
  const RPeakDetection det = detect_r_peaks(rec.ecg);
  const StitchedSeries st = stitch_multibeat(subs, det.peaks, max_cv);

  const double mean_rr = (det.peaks.times.back() - det.peaks.times.front()) / static_cast<double>(det.peaks.size() - 1);
  Recording out;
  out.id = rec.id;
  out.exam = rec.exam;
  out.ecg = rec.ecg;
  SphericalGeometry3D wide = ref;
  wide.sector.theta0 = theta_min;
  wide.sector.n_beams = static_cast<std::uint32_t>(st.frames.dim(2));
  out.geometries[0] = wide;
  std::vector<double> ts;
  for (double ph : st.phases) ts.push_back(ph * mean_rr);
  StreamHeader h{Modality::bmode3d, DType::f32, {}, ts, std::nullopt, 0, std::nullopt};
  out.streams.push_back(Stream::from_tensor(h, st.frames));
  return out;
}

inline void cmd_stitch(const std::vector<std::string>& paths, const fs::path& out_dir, double max_cv, std::ostream& out) {
  const Inputs in = discover(paths);
  for (const auto& ref : in.recordings) {
    const Recording rec = read_recording(ref.dir);
    if (!rec.find(Modality::bmode3d)) continue;
    const Recording st = stitch_recording(rec, max_cv);
    write_recording(st, out_dir / ref.exam.exam_id / rec.id);
    out << rec.id << ": stitched " << shape_string(st.streams[0].header.shape) << "\n";
  }
}

inline void cmd_rasterize(const std::vector<std::string>& paths, const fs::path& out_dir, std::size_t size, int jobs) {
  const Inputs in = discover(paths);
  parallel_for(in.recordings.size(), jobs, [&](std::size_t k) {
    const Recording rec = read_recording(in.recordings[k].dir);
    const fs::path dir = out_dir / in.recordings[k].exam.exam_id / rec.id;
    const auto [endo, epi] = eval::lv_tracks(rec);
    const Stream* bmode = rec.find(Modality::bmode2d);
    if (endo && bmode) {
      const auto* g = rec.geometry<SectorGeometry2D>(bmode->header.geometry_id);
      if (!g) throw data_error(rec.id + ": bmode2d stream has no 2D sector geometry");
      const CartesianGrid2D grid = default_grid_for(*g, size);
      io::ensure_directory(dir / "labels");
      std::map<std::uint32_t, std::size_t> epi_at;
      if (epi)
        for (std::size_t i = 0; i < epi->frame_indices.size(); ++i) epi_at[epi->frame_indices[i]] = i;
      std::vector<Contour2D> frames;
      std::vector<std::size_t> idx;
      std::vector<double> times;
      for (std::size_t i = 0; i < endo->frame_indices.size(); ++i) {
        const std::uint32_t f = endo->frame_indices[i];
        if (f >= bmode->header.frames()) throw data_error(rec.id + ": contour frame index beyond the B-mode stream");
        std::optional<Contour2D> cp;
        if (auto it = epi_at.find(f); it != epi_at.end()) cp = epi->contour(it->second);
        const auto lab = rasterize_contours(endo->contour(i), cp, grid);
        std::vector<std::uint8_t> px(lab.flat().begin(), lab.flat().end());
        for (auto& v : px) v = static_cast<std::uint8_t>(v * 127);
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04u.pgm", f);
        io::write_text_atomic(dir / "labels" / name, pgm(px, grid.width, grid.height));
        frames.push_back(endo->contour(i));
        idx.push_back(f);
        times.push_back(bmode->header.timestamps[f]);
      }
      // Reference at end-diastole: the first annotated frame on or after the first R-peak.
      std::size_t ref = 0;
      if (const RPeakDetection det = detect_r_peaks(rec.ecg); !det.peaks.empty())
        for (std::size_t i = 0; i < times.size(); ++i)
          if (times[i] >= det.peaks.times.front()) {
            ref = i;
            break;
          }
      if (!frames.empty()) write_curve_csv(dir / "strain.csv", idx, times, strain_curve(frames, ref));
    }
    for (std::size_t m = 0; m < rec.annotations.meshes.size(); ++m) {
      const MeshTrack& t = rec.annotations.meshes[m];
      const Stream* host = rec.find(Modality::bmode3d);
      if (!host) throw data_error(rec.id + ": mesh track without a bmode3d stream");
      std::vector<double> times;
      std::vector<std::size_t> idx;
      for (std::uint32_t f : t.frame_indices) {
        if (f >= host->header.frames()) throw data_error(rec.id + ": mesh frame index beyond the bmode3d stream");
        times.push_back(host->header.timestamps[f]);
        idx.push_back(f);
      }
      const RPeakDetection det = detect_r_peaks(rec.ecg);
      const VolumeCurve vc = volume_curve(t.frames, times, det.peaks);
      io::ensure_directory(dir);
      write_curve_csv(dir / (m == 0 ? std::string("volume.csv") : "volume_" + std::to_string(m) + ".csv"), idx, times,
                      vc.milliliters);
      std::string beats = "beat,end_diastole_frame,end_systole_frame,edv_ml,esv_ml\n";
      for (std::size_t b = 0; b < vc.beats.size(); ++b)
        beats += std::to_string(b) + "," + std::to_string(idx[vc.beats[b].end_diastole]) + "," +
                 std::to_string(idx[vc.beats[b].end_systole]) + "," + fmt(vc.milliliters[vc.beats[b].end_diastole]) + "," +
                 fmt(vc.milliliters[vc.beats[b].end_systole]) + "\n";
      io::write_text_atomic(dir / (m == 0 ? std::string("volume_beats.csv") : "volume_beats_" + std::to_string(m) + ".csv"),
                            beats);
    }
  });
}

/// Fold per exam: the manifest's own fold when every exam has one,
/// otherwise a seeded patient-grouped assignment.
inline std::map<std::string, int> fold_map(const std::vector<ExamManifest>& exams, int n_folds, std::uint64_t seed) {
  std::map<std::string, int> out;
  const bool all_assigned = std::all_of(exams.begin(), exams.end(), [](const auto& e) { return e.fold.has_value(); });
  if (all_assigned) {
    for (const auto& e : exams) out[e.exam_id] = *e.fold;
    return out;
  }
  return make_patient_folds(exams, n_folds, seed).by_exam;
}

struct EvaluateOptions {
  Task task = Task::tissue;
  std::string pred = "baseline";
  eval::EvalConfig config;
  int n_folds = 5;
  std::uint64_t seed = 7;
  int jobs = 1;
};

inline std::vector<eval::CaseResult> evaluate_inputs(const Inputs& in, const EvaluateOptions& opt) {
  std::vector<const RecordingRef*> refs;
  std::vector<Recording> recs;
  for (const auto& ref : in.recordings) refs.push_back(&ref);
  std::vector<std::optional<eval::CaseResult>> results(refs.size());
  parallel_for(refs.size(), opt.jobs, [&](std::size_t k) {
    const Recording rec = read_recording(refs[k]->dir);
    if (!eval::applies(rec, opt.task)) return;
    if (opt.pred == "baseline") {
      results[k] = eval::evaluate_recording(rec, opt.task, nullptr, opt.config);
    } else {
      const fs::path pdir = fs::path(opt.pred) / refs[k]->exam.exam_id / rec.id;
      if (!is_recording_directory(pdir)) throw data_error("missing prediction " + pdir.string());
      const Recording pred = read_recording(pdir);
      results[k] = eval::evaluate_recording(rec, opt.task, &pred, opt.config);
    }
  });
  std::vector<eval::CaseResult> out;
  for (auto& r : results)
    if (r) out.push_back(std::move(*r));
  return out;
}

inline void cmd_evaluate(const std::vector<std::string>& paths, const fs::path& out_dir, const EvaluateOptions& opt,
                         std::ostream& out) {
  const Inputs in = discover(paths);
  const auto cases = evaluate_inputs(in, opt);
  if (cases.empty()) throw data_error("no recording carries the streams task " + std::to_string(static_cast<int>(opt.task)) + " needs");
  const int task = static_cast<int>(opt.task);
  std::string csv = "case_id,task,term,value\n";
  for (const auto& c : cases)
    for (const auto& t : c.terms) csv += c.case_id() + "," + std::to_string(c.task) + "," + t.name + "," + fmt(t.value) + "\n";
  io::ensure_directory(out_dir);
  io::write_text_atomic(out_dir / ("task" + std::to_string(task) + "_cases.csv"), csv);

  const auto rows = eval::fold_summary(cases, fold_map(in.exams, opt.n_folds, opt.seed), opt.n_folds);
  std::string fcsv = "fold,term,mean,std\n";
  for (const auto& r : rows) fcsv += r.fold + "," + r.term + "," + fmt(r.mean) + "," + fmt(r.std) + "\n";
  io::write_text_atomic(out_dir / ("task" + std::to_string(task) + "_folds.csv"), fcsv);
  out << csv;
}

inline void cmd_baseline(const std::vector<std::string>& paths, const fs::path& out_dir, const EvaluateOptions& opt) {
  const Inputs in = discover(paths);
  parallel_for(in.recordings.size(), opt.jobs, [&](std::size_t k) {
    const Recording rec = read_recording(in.recordings[k].dir);
    if (!eval::applies(rec, opt.task)) return;
    write_recording(eval::baseline_recording(rec, opt.task, opt.config), out_dir / in.recordings[k].exam.exam_id / rec.id);
  });
}

inline void cmd_folds(const std::vector<std::string>& paths, const fs::path& out_dir, int n_folds, std::uint64_t seed,
                      std::ostream& out) {
  const Inputs in = discover(paths);
  const FoldAssignment fa = make_patient_folds(in.exams, n_folds, seed);
  std::string csv = "exam_id,patient_key,fold\n";
  for (const auto& e : in.exams) csv += e.exam_id + "," + e.patient_key + "," + std::to_string(fa.by_exam.at(e.exam_id)) + "\n";
  io::ensure_directory(out_dir);
  io::write_text_atomic(out_dir / "folds.csv", csv);
  out << csv;
}

// ---------------------------------------------------------------------------
// Phantom

inline Stream truth_stream(Modality m, const Tensor<double>& clean, const std::vector<double>& times, double nyquist) {
  Tensor<float> f(clean.shape());
  for (std::size_t i = 0; i < clean.size(); ++i) f[i] = static_cast<float>(clean[i]);
  return Stream::from_tensor({m, DType::f32, {}, times, nyquist, phantom::kSectorGeometryId, std::nullopt}, f);
}

inline void write_phantom(const phantom::PhantomExam& exam, const fs::path& dir) {
  write_exam_manifest(exam.manifest, dir);
  for (const auto& r : exam.recordings) write_recording(r, dir / r.id);
  const auto& gt = exam.truth;
  const fs::path t = dir / "truth";
  io::ensure_directory(t);
  std::string peaks = "time_s\n";
  for (double p : gt.r_peaks.times) peaks += fmt(p) + "\n";
  io::write_text_atomic(t / "rpeaks.csv", peaks);
  io::write_file_atomic(t / "tissue_velocity.exfl",
                        encode_stream(truth_stream(Modality::tdi2d, gt.tissue_velocity_clean, gt.tissue_times, gt.tissue_nyquist)));
  io::write_file_atomic(t / "color_velocity.exfl",
                        encode_stream(truth_stream(Modality::color2d, gt.color_velocity_clean, gt.color_times, gt.color_nyquist)));
  std::vector<std::size_t> idx(gt.endo_strain_percent.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  write_curve_csv(t / "strain.csv", idx, gt.tissue_bmode_times, gt.endo_strain_percent);
  if (!gt.lv_volume_ml.empty()) {
    idx.resize(gt.lv_volume_ml.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    write_curve_csv(t / "volume.csv", idx, gt.volume_times, gt.lv_volume_ml);
  }
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"EchoXFlow tooling: container I/O, scan conversion, timing, annotations, metrics, phantoms", "exfl"};
  app.require_subcommand(1);

  std::vector<std::string> paths;
  std::string out_flag;
  std::size_t size = 256;
  double slack = kDefaultSlackFactor;
  double max_cv = kDefaultMaxCv;
  int n_folds = 5;
  std::uint64_t seed = 7;
  int jobs = 1;
  int task = 1;
  std::string pred = "baseline";
  std::string domain = "beamspace";
  bool convert_predictions = false;
  MaskParams mask;
  phantom::PhantomConfig pcfg;
  bool no_3d = false, no_stitching = false;

  auto add_paths = [&](CLI::App* c) { c->add_option("paths", paths, "Exam, recording, or exam-collection directories")->required(); };
  auto add_out = [&](CLI::App* c) { c->add_option("-o,--output", out_flag, std::string("Output directory (default $") + kOutputEnv + ")"); };
  auto add_size = [&](CLI::App* c) { c->add_option("--size", size, "Cartesian grid side in pixels")->check(CLI::Range(2, 8192)); };
  auto add_jobs = [&](CLI::App* c) { c->add_option("--jobs", jobs, "Recordings processed in parallel")->check(CLI::Range(1, 1024)); };
  auto add_task = [&](CLI::App* c) {
    c->add_option("--task", task, "1 tissue velocity, 2 color Doppler, 3 segmentation")->required()->check(CLI::Range(1, 3));
    c->add_option("--domain", domain, "Where the temporal-mean baseline is taken: beamspace or cartesian")
        ->check(CLI::IsMember({"beamspace", "cartesian"}));
    c->add_option("--slack", slack, "Pairing slack in multiples of the median B-mode frame spacing");
    c->add_option("--tau-power", mask.tau_power, "Doppler power threshold");
    c->add_option("--tau-bmode", mask.tau_bmode, "B-mode threshold");
    c->add_option("--inside-floor", mask.inside_floor, "Training-weight floor inside the color box");
    c->add_option("--outside-weight", mask.outside_weight, "Training weight outside the color box");
    c->add_flag("--strict-thresholds", mask.strict, "Use P > tau_P and B < tau_B");
    add_size(c);
    add_jobs(c);
  };

  auto* inspect = app.add_subcommand("inspect", "Per-stream table of one or more exams");
  add_paths(inspect);
  auto* convert = app.add_subcommand("convert", "Scan-convert 2D streams to PGM frames with validity masks");
  add_paths(convert);
  add_out(convert);
  add_size(convert);
  add_jobs(convert);
  auto* align = app.add_subcommand("align", "Detect R-peaks and pair Doppler frames with B-mode frames");
  add_paths(align);
  add_out(align);
  align->add_option("--slack", slack, "Pairing slack in multiples of the median B-mode frame spacing");
  auto* stitch = app.add_subcommand("stitch", "Stitch ECG-gated 3D sub-acquisitions into one wide sector");
  add_paths(stitch);
  add_out(stitch);
  stitch->add_option("--max-cv", max_cv, "Largest RR coefficient of variation accepted");
  auto* rasterize = app.add_subcommand("rasterize", "Label masks, strain and volume curves from annotations");
  add_paths(rasterize);
  add_out(rasterize);
  add_size(rasterize);
  add_jobs(rasterize);
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions (or the temporal-mean baseline)");
  add_paths(evaluate);
  add_out(evaluate);
  add_task(evaluate);
  evaluate->add_option("--pred", pred, "'baseline' or a directory of prediction recordings (<dir>/<exam>/<recording>)");
  evaluate->add_flag("--convert-predictions", convert_predictions, "Scan-convert beamspace predictions before scoring");
  evaluate->add_option("--folds", n_folds, "Fold count")->check(CLI::Range(1, 1000));
  evaluate->add_option("--seed", seed, "Seed for the fold assignment when exams carry none");
  auto* phantom_cmd = app.add_subcommand("phantom", "Write a synthetic exam with analytic ground truth");
  add_out(phantom_cmd);
  phantom_cmd->add_option("--seed", pcfg.seed, "Random seed");
  phantom_cmd->add_option("--heart-rate", pcfg.heart_rate, "Beats per minute");
  phantom_cmd->add_option("--beats", pcfg.n_beats, "Number of beats");
  phantom_cmd->add_option("--snr", pcfg.snr_db, "Noise SNR in dB (inf disables noise)");
  phantom_cmd->add_option("--rr-variation", pcfg.rr_variation, "Alternating RR deviation as a fraction");
  phantom_cmd->add_option("--jet-peak", pcfg.jet_peak_velocity, "Jet peak velocity in m/s");
  phantom_cmd->add_option("--nyquist", pcfg.nyquist, "Color Doppler Nyquist velocity in m/s");
  phantom_cmd->add_option("--tissue-nyquist", pcfg.tissue_nyquist, "Tissue Doppler Nyquist velocity in m/s");
  phantom_cmd->add_option("--motion", pcfg.motion_amplitude, "Endocardial excursion in m");
  phantom_cmd->add_option("--color-ratio", pcfg.color_doppler_ratio, "Color Doppler frames per B-mode frame");
  phantom_cmd->add_option("--tissue-ratio", pcfg.tissue_doppler_ratio, "Tissue Doppler frames per B-mode frame");
  phantom_cmd->add_option("--exam-id", pcfg.exam_id, "Exam identifier");
  phantom_cmd->add_option("--patient", pcfg.patient_key, "Opaque patient key");
  phantom_cmd->add_flag("--no-3d", no_3d, "Skip the volumetric recording");
  phantom_cmd->add_flag("--no-stitching", no_stitching, "Skip the gated sub-acquisition recording");
  auto* baseline = app.add_subcommand("baseline", "Write temporal-mean baseline predictions on the scoring grid");
  add_paths(baseline);
  add_out(baseline);
  add_task(baseline);
  auto* folds = app.add_subcommand("folds", "Patient-grouped fold assignment");
  add_paths(folds);
  add_out(folds);
  folds->add_option("--folds", n_folds, "Fold count")->check(CLI::Range(1, 1000));
  folds->add_option("--seed", seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    EvaluateOptions eo;
    eo.task = static_cast<Task>(task);
    eo.pred = pred;
    eo.config.grid_size = size;
    eo.config.slack_factor = slack;
    eo.config.mask = mask;
    eo.config.baseline_domain = eval::domain_from_string(domain);
    eo.config.convert_predictions = convert_predictions;
    eo.n_folds = n_folds;
    eo.seed = seed;
    eo.jobs = jobs;
    mask.validate();

    if (*inspect) cmd_inspect(paths, out);
    else if (*convert) cmd_convert(paths, output_dir(out_flag), size, jobs, err);
    else if (*align) cmd_align(paths, output_dir(out_flag), slack, out, err);
    else if (*stitch) cmd_stitch(paths, output_dir(out_flag), max_cv, out);
    else if (*rasterize) cmd_rasterize(paths, output_dir(out_flag), size, jobs);
    else if (*evaluate) cmd_evaluate(paths, output_dir(out_flag), eo, out);
    else if (*baseline) cmd_baseline(paths, output_dir(out_flag), eo);
    else if (*folds) cmd_folds(paths, output_dir(out_flag), n_folds, seed, out);
    else if (*phantom_cmd) {
      pcfg.include_3d = !no_3d;
      pcfg.include_stitching = !no_stitching;
      write_phantom(phantom::generate_exam(pcfg), output_dir(out_flag));
    }
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace exfl::cli
