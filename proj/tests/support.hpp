#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "echoxflow/container.hpp"
#include "echoxflow/metrics.hpp"

namespace exfl::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("exfl_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::vector<double> increasing_times(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> step(0.001, 0.1);
  std::vector<double> t;
  double x = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  for (std::size_t i = 0; i < n; ++i) t.push_back(x += step(rng));
  return t;
}

/// A small random recording satisfying every container invariant.
inline Recording random_recording(std::mt19937_64& rng, const std::string& id) {
  std::uniform_int_distribution<int> small(1, 4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Recording r;
  r.id = id;
  r.exam = {"exam-" + id, "patient-" + std::to_string(rng() % 50), std::nullopt};
  if (rng() % 2) r.exam.fold = static_cast<int>(rng() % 5);
  r.geometries[3] = SectorGeometry2D{u(rng), 0.01 + 0.01 * (u(rng) + 1), 4, 0.001, 0.0005, 5};
  r.geometries[9] = CartesianGrid2D{{u(rng), u(rng)}, 0.001, 3, 2};
  r.geometries[11] = SphericalGeometry3D{{-0.2, 0.1, 3, 0.0, 0.001, 4}, -0.1, 0.05, 2};

  const std::size_t n_streams = static_cast<std::size_t>(small(rng));
  for (std::size_t k = 0; k < n_streams; ++k) {
    const auto m = static_cast<Modality>(rng() % 7);
    StreamHeader h;
    h.modality = m;
    const std::size_t nf = static_cast<std::size_t>(small(rng));
    h.shape = {nf};
    for (int d = 0, nd = small(rng) % 3; d < nd; ++d) h.shape.push_back(static_cast<std::size_t>(small(rng)));
    h.timestamps = increasing_times(rng, nf);
    if (is_doppler(m)) h.nyquist_velocity = 0.1 + (u(rng) + 1.0);
    h.geometry_id = std::array<std::uint32_t, 4>{3, 9, 11, kNoGeometry}[rng() % 4];
    if (m == Modality::color2d && rng() % 2) h.color_box = BeamBox{0, 2, 1, 4};
    const std::size_t n = element_count(h.shape);
    if (rng() % 2) {
      h.dtype = DType::f32;
      std::vector<float> p(n);
      for (auto& v : p) v = static_cast<float>(u(rng));
      r.streams.push_back({h, p});
    } else {
      h.dtype = DType::u8;
      std::vector<std::uint8_t> p(n);
      for (auto& v : p) v = static_cast<std::uint8_t>(rng() % 256);
      r.streams.push_back({h, p});
    }
  }
  r.ecg.rate = 600.0;
  r.ecg.t0 = u(rng);
  r.ecg.samples.resize(static_cast<std::size_t>(small(rng)) * 7);
  for (auto& v : r.ecg.samples) v = static_cast<float>(u(rng));

  if (rng() % 2) {
    ContourTrack t;
    t.chamber = static_cast<Chamber>(rng() % 3);
    t.layer = static_cast<ContourLayer>(rng() % 2);
    t.view = static_cast<ViewTag>(rng() % 4);
    t.closed = rng() % 2;
    for (std::uint32_t f = 0, nf = static_cast<std::uint32_t>(small(rng)); f < nf; ++f) {
      t.frame_indices.push_back(f * 2);
      std::vector<Point2> pts;
      for (int i = 0; i < 3 + small(rng); ++i) pts.push_back({u(rng), u(rng)});
      t.frames.push_back(pts);
    }
    r.annotations.contours.push_back(t);
  }
  if (rng() % 2) {
    MeshTrack t;
    t.chamber = Chamber::lv;
    t.frame_indices = {0};
    Mesh3D m;
    m.vertices = {{0, 0, 0}, {u(rng), 0, 0}, {0, u(rng), 0}, {0, 0, u(rng)}};
    m.triangles = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
    t.frames.push_back(m);
    r.annotations.meshes.push_back(t);
  }
  if (rng() % 2)
    r.annotations.markers.push_back({MarkerKind::sample_volume, MarkerFrame::beamspace, {u(rng), u(rng)}, "MV E' septal"});
  return r;
}

/// Tissue or color recording with B-mode at `fps` and a paired Doppler
/// stream for the filter fixtures.
inline Recording filter_fixture(Modality doppler, double fps, std::size_t frames, double nyquist = 0.605,
                                std::size_t doppler_frames = 0) {
  Recording r;
  r.id = "fixture";
  r.exam = {"exam", "pk", std::nullopt};
  r.geometries[0] = SectorGeometry2D{-0.5, 0.5, 3, 0.01, 0.001, 4};
  auto stream = [&](Modality m, std::size_t n, double offset) {
    StreamHeader h;
    h.modality = m;
    h.shape = {n, 3, 4};
    for (std::size_t k = 0; k < n; ++k) h.timestamps.push_back(offset + static_cast<double>(k) / fps);
    if (is_doppler(m)) h.nyquist_velocity = nyquist;
    h.geometry_id = 0;
    return Stream{h, std::vector<float>(n * 12, 0.0f)};
  };
  r.streams.push_back(stream(Modality::bmode2d, frames, 0.0));
  r.streams.push_back(stream(doppler, doppler_frames ? doppler_frames : frames, 0.3 / fps));
  r.ecg.samples.assign(60, 0.0f);
  return r;
}

}  // namespace exfl::test
