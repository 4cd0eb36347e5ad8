#pragma once

// Probe-centered (beamspace) geometry and scan conversion.
//
// Conventions: the probe apex sits at the origin, z is depth and x is
// lateral. A 2D beamspace frame is laid out (beam, sample); a 3D volume
// frame is laid out (plane, beam, sample). Cartesian images are laid out
// (row = z, column = x); Cartesian volumes are laid out (y, z, x) so each
// elevation slice is an ordinary 2D image.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "echoxflow/core.hpp"

namespace exfl {

struct SectorGeometry2D {
  double theta0 = 0.0;  // radians, steering angle of beam 0
  double dtheta = 0.0;  // radians per beam
  std::uint32_t n_beams = 0;
  double r0 = 0.0;  // meters, depth of sample 0
  double dr = 0.0;  // meters per sample
  std::uint32_t n_samples = 0;

  double theta_at(double beam) const { return theta0 + beam * dtheta; }
  double r_at(double sample) const { return r0 + sample * dr; }
  double theta_min() const { return std::min(theta0, theta_at(n_beams - 1.0)); }
  double theta_max() const { return std::max(theta0, theta_at(n_beams - 1.0)); }
  double max_depth() const { return r_at(n_samples - 1.0); }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (!(dtheta != 0.0) || !std::isfinite(dtheta)) out.push_back("SectorGeometry2D.dtheta must be nonzero");
    if (!(dr > 0.0)) out.push_back("SectorGeometry2D.dr must be > 0");
    if (!(r0 >= 0.0)) out.push_back("SectorGeometry2D.r0 must be >= 0");
    if (n_beams < 2) out.push_back("SectorGeometry2D.n_beams must be >= 2");
    if (n_samples < 2) out.push_back("SectorGeometry2D.n_samples must be >= 2");
    if (!(std::abs(dtheta) * (n_beams - 1.0) < std::numbers::pi))
      out.push_back("SectorGeometry2D angular span must be < pi");
    return out;
  }
  void validate() const {
    if (auto v = violations(); !v.empty()) throw usage_error(v.front());
  }

  friend bool operator==(const SectorGeometry2D&, const SectorGeometry2D&) = default;
};

struct SphericalGeometry3D {
  SectorGeometry2D sector;  // azimuth and radius
  double phi0 = 0.0;        // radians, elevation of plane 0
  double dphi = 0.0;        // radians per plane
  std::uint32_t n_planes = 0;

  double phi_at(double plane) const { return phi0 + plane * dphi; }
  double phi_min() const { return std::min(phi0, phi_at(n_planes - 1.0)); }
  double phi_max() const { return std::max(phi0, phi_at(n_planes - 1.0)); }

  std::vector<std::string> violations() const {
    auto out = sector.violations();
    if (!(dphi != 0.0) || !std::isfinite(dphi)) out.push_back("SphericalGeometry3D.dphi must be nonzero");
    if (n_planes < 2) out.push_back("SphericalGeometry3D.n_planes must be >= 2");
    if (!(std::abs(dphi) * (n_planes - 1.0) < std::numbers::pi))
      out.push_back("SphericalGeometry3D elevation span must be < pi");
    return out;
  }
  void validate() const {
    if (auto v = violations(); !v.empty()) throw usage_error(v.front());
  }

  friend bool operator==(const SphericalGeometry3D&, const SphericalGeometry3D&) = default;
};

struct CartesianGrid2D {
  Point2 origin;  // center of pixel (0, 0)
  double spacing = 0.0;
  std::size_t width = 0;
  std::size_t height = 0;

  Point2 center(std::size_t row, std::size_t col) const {
    return {origin.x + static_cast<double>(col) * spacing, origin.z + static_cast<double>(row) * spacing};
  }
  Shape image_shape() const { return {height, width}; }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (!(spacing > 0.0)) out.push_back("CartesianGrid2D.spacing must be > 0");
    if (width < 1 || height < 1) out.push_back("CartesianGrid2D.width/height must be >= 1");
    return out;
  }
  void validate() const {
    if (auto v = violations(); !v.empty()) throw usage_error(v.front());
  }

  friend bool operator==(const CartesianGrid2D&, const CartesianGrid2D&) = default;
};

struct CartesianGrid3D {
  Point3 origin;  // center of voxel (0, 0, 0)
  double spacing = 0.0;
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::size_t nz = 0;

  Point3 center(std::size_t iy, std::size_t iz, std::size_t ix) const {
    return {origin.x + static_cast<double>(ix) * spacing, origin.y + static_cast<double>(iy) * spacing,
            origin.z + static_cast<double>(iz) * spacing};
  }
  Shape volume_shape() const { return {ny, nz, nx}; }
  double voxel_volume() const { return spacing * spacing * spacing; }

  /// The 2D grid of the elevation slice at index iy.
  CartesianGrid2D slice(std::size_t /*iy*/) const { return {{origin.x, origin.z}, spacing, nx, nz}; }

  void validate() const {
    if (!(spacing > 0.0)) throw usage_error("CartesianGrid3D.spacing must be > 0");
    if (nx < 1 || ny < 1 || nz < 1) throw usage_error("CartesianGrid3D dimensions must be >= 1");
  }

  friend bool operator==(const CartesianGrid3D&, const CartesianGrid3D&) = default;
};

/// True where the Cartesian point lies inside the acquired sector.
using ValidityMask = Tensor<std::uint8_t>;

inline Point2 beam_to_cartesian(const SectorGeometry2D& geom, double beam_idx, double sample_idx) {
  const double theta = geom.theta_at(beam_idx);
  const double r = geom.r_at(sample_idx);
  return {r * std::sin(theta), r * std::cos(theta)};
}

struct BeamCoord {
  double beam = 0.0;
  double sample = 0.0;
  bool inside = false;
};

inline BeamCoord cartesian_to_beam(const SectorGeometry2D& geom, double x, double z) {
  const double r = std::hypot(x, z);
  const double theta = std::atan2(x, z);
  BeamCoord c;
  c.beam = (theta - geom.theta0) / geom.dtheta;
  c.sample = (r - geom.r0) / geom.dr;
  c.inside = c.beam >= 0.0 && c.beam <= geom.n_beams - 1.0 && c.sample >= 0.0 &&
             c.sample <= geom.n_samples - 1.0;
  return c;
}

inline Point3 beam_to_cartesian(const SphericalGeometry3D& geom, double plane_idx, double beam_idx,
                                double sample_idx) {
  const double theta = geom.sector.theta_at(beam_idx);
  const double phi = geom.phi_at(plane_idx);
  const double r = geom.sector.r_at(sample_idx);
  return {r * std::sin(theta) * std::cos(phi), r * std::sin(phi), r * std::cos(theta) * std::cos(phi)};
}

struct VolumeCoord {
  double plane = 0.0;
  double beam = 0.0;
  double sample = 0.0;
  bool inside = false;
};

inline VolumeCoord cartesian_to_beam(const SphericalGeometry3D& geom, const Point3& p) {
  const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
  const double phi = r > 0.0 ? std::asin(std::clamp(p.y / r, -1.0, 1.0)) : 0.0;
  const double theta = std::atan2(p.x, p.z);
  const auto& s = geom.sector;
  VolumeCoord c;
  c.plane = (phi - geom.phi0) / geom.dphi;
  c.beam = (theta - s.theta0) / s.dtheta;
  c.sample = (r - s.r0) / s.dr;
  c.inside = c.plane >= 0.0 && c.plane <= geom.n_planes - 1.0 && c.beam >= 0.0 &&
             c.beam <= s.n_beams - 1.0 && c.sample >= 0.0 && c.sample <= s.n_samples - 1.0;
  return c;
}

namespace detail {

// Fractional index within half a cell of [0, n-1] is clamped into range;
// anything further out is invalid.
inline bool clamp_index(double idx, std::size_t n, std::size_t& i0, double& frac) {
  const double hi = static_cast<double>(n) - 1.0;
  if (!(idx >= -0.5 && idx <= hi + 0.5)) return false;
  idx = std::clamp(idx, 0.0, hi);
  double base = std::floor(idx);
  if (base >= hi) base = hi;
  i0 = static_cast<std::size_t>(base);
  frac = idx - base;
  return true;
}

inline double lerp(double a, double b, double t) { return a + t * (b - a); }

}  // namespace detail

/// Per-pixel interpolation plan from a beamspace sector onto a Cartesian
/// grid. Built once per (geometry, grid) and applied to every frame.
class ScanConverter2D {
 public:
  ScanConverter2D(const SectorGeometry2D& geom, const CartesianGrid2D& grid) : geom_(geom), grid_(grid) {
    geom.validate();
    grid.validate();
    const std::size_t n = grid.width * grid.height;
    mask_ = ValidityMask(grid.image_shape(), 0);
    taps_.reserve(n);
    for (std::size_t row = 0; row < grid.height; ++row) {
      for (std::size_t col = 0; col < grid.width; ++col) {
        const Point2 p = grid.center(row, col);
        const BeamCoord bc = cartesian_to_beam(geom, p.x, p.z);
        Tap tap;
        if (detail::clamp_index(bc.beam, geom.n_beams, tap.beam, tap.fb) &&
            detail::clamp_index(bc.sample, geom.n_samples, tap.sample, tap.fs)) {
          tap.pixel = row * grid.width + col;
          mask_[tap.pixel] = 1;
          taps_.push_back(tap);
        }
      }
    }
  }

  const SectorGeometry2D& geometry() const { return geom_; }
  const CartesianGrid2D& grid() const { return grid_; }
  const ValidityMask& mask() const { return mask_; }

  /// Bilinear interpolation of one (beam, sample) frame.
  template <typename T>
  void convert_frame(std::span<const T> frame, std::span<T> out) const {
    const std::size_t ns = geom_.n_samples;
    const std::size_t nb = geom_.n_beams;
    std::fill(out.begin(), out.end(), T{});
    for (const Tap& t : taps_) {
      const std::size_t b1 = std::min(t.beam + 1, nb - 1);
      const std::size_t s1 = std::min(t.sample + 1, ns - 1);
      const double v00 = frame[t.beam * ns + t.sample];
      const double v01 = frame[t.beam * ns + s1];
      const double v10 = frame[b1 * ns + t.sample];
      const double v11 = frame[b1 * ns + s1];
      const double a = detail::lerp(v00, v01, t.fs);
      const double b = detail::lerp(v10, v11, t.fs);
      out[t.pixel] = static_cast<T>(detail::lerp(a, b, t.fb));
    }
  }

  /// Nearest-neighbour lookup, for label maps and boolean regions.
  template <typename T>
  void convert_frame_nearest(std::span<const T> frame, std::span<T> out) const {
    const std::size_t ns = geom_.n_samples;
    const std::size_t nb = geom_.n_beams;
    std::fill(out.begin(), out.end(), T{});
    for (const Tap& t : taps_) {
      const std::size_t b = t.fb >= 0.5 ? std::min(t.beam + 1, nb - 1) : t.beam;
      const std::size_t s = t.fs >= 0.5 ? std::min(t.sample + 1, ns - 1) : t.sample;
      out[t.pixel] = frame[b * ns + s];
    }
  }

  template <typename T>
  Tensor<T> convert_series(const Tensor<T>& series, bool nearest = false) const {
    check_series(series.shape());
    const std::size_t frames = series.dim(0);
    Tensor<T> out(Shape{frames, grid_.height, grid_.width});
    for (std::size_t f = 0; f < frames; ++f) {
      if (nearest)
        convert_frame_nearest<T>(series.frame(f), out.frame(f));
      else
        convert_frame<T>(series.frame(f), out.frame(f));
    }
    return out;
  }

 private:
  struct Tap {
    std::size_t pixel = 0;
    std::size_t beam = 0;
    std::size_t sample = 0;
    double fb = 0.0;
    double fs = 0.0;
  };

  void check_series(const Shape& s) const {
    if (s.size() != 3 || s[1] != geom_.n_beams || s[2] != geom_.n_samples)
      throw usage_error("scan conversion: series shape " + shape_string(s) + " does not match geometry (" +
                        std::to_string(geom_.n_beams) + " beams, " + std::to_string(geom_.n_samples) +
                        " samples)");
  }

  SectorGeometry2D geom_;
  CartesianGrid2D grid_;
  ValidityMask mask_;
  std::vector<Tap> taps_;
};

template <typename T>
struct ConvertedImage {
  Tensor<T> image;
  ValidityMask mask;
};

/// Converts a single (n_beams, n_samples) frame.
template <typename T>
ConvertedImage<T> scan_convert_2d(const Tensor<T>& frame, const SectorGeometry2D& geom,
                                  const CartesianGrid2D& grid) {
  if (frame.shape() != Shape{geom.n_beams, geom.n_samples})
    throw usage_error("scan_convert_2d: frame shape " + shape_string(frame.shape()) + " does not match geometry");
  ScanConverter2D conv(geom, grid);
  ConvertedImage<T> out{Tensor<T>(grid.image_shape()), conv.mask()};
  conv.convert_frame<T>(frame.flat(), out.image.flat());
  return out;
}

/// Resamples a Cartesian image back onto beamspace. Only pixels flagged in
/// `mask` contribute; weights are renormalised over the valid taps.
template <typename T>
Tensor<T> inverse_scan_convert_2d(const Tensor<T>& image, const ValidityMask& mask, const SectorGeometry2D& geom,
                                  const CartesianGrid2D& grid) {
  geom.validate();
  grid.validate();
  if (image.shape() != grid.image_shape() || mask.shape() != grid.image_shape())
    throw usage_error("inverse_scan_convert_2d: image/mask shape does not match grid");
  Tensor<T> out(Shape{geom.n_beams, geom.n_samples});
  for (std::size_t b = 0; b < geom.n_beams; ++b) {
    for (std::size_t s = 0; s < geom.n_samples; ++s) {
      const Point2 p = beam_to_cartesian(geom, static_cast<double>(b), static_cast<double>(s));
      std::size_t c0 = 0, r0 = 0;
      double fc = 0.0, fr = 0.0;
      if (!detail::clamp_index((p.x - grid.origin.x) / grid.spacing, grid.width, c0, fc) ||
          !detail::clamp_index((p.z - grid.origin.z) / grid.spacing, grid.height, r0, fr))
        continue;
      const std::size_t c1 = std::min(c0 + 1, grid.width - 1);
      const std::size_t r1 = std::min(r0 + 1, grid.height - 1);
      const std::array<std::size_t, 4> idx = {r0 * grid.width + c0, r0 * grid.width + c1, r1 * grid.width + c0,
                                              r1 * grid.width + c1};
      const std::array<double, 4> w = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
      if (mask[idx[0]] && mask[idx[1]] && mask[idx[2]] && mask[idx[3]]) {
        const double top = detail::lerp(image[idx[0]], image[idx[1]], fc);
        const double bot = detail::lerp(image[idx[2]], image[idx[3]], fc);
        out(b, s) = static_cast<T>(detail::lerp(top, bot, fr));
        continue;
      }
      double acc = 0.0, wsum = 0.0;
      for (std::size_t k = 0; k < 4; ++k) {
        if (!mask[idx[k]] || w[k] == 0.0) continue;
        acc += w[k] * static_cast<double>(image[idx[k]]);
        wsum += w[k];
      }
      if (wsum > 0.0) out(b, s) = static_cast<T>(acc / wsum);
    }
  }
  return out;
}

struct SectorBounds {
  double x_min = 0.0, x_max = 0.0, z_min = 0.0, z_max = 0.0;
};

/// Bounding box of the annular sector spanned by the geometry.
inline SectorBounds sector_bounds(const SectorGeometry2D& geom) {
  const double t_lo = geom.theta_min(), t_hi = geom.theta_max();
  const double r_lo = geom.r0, r_hi = geom.max_depth();
  std::vector<double> angles = {t_lo, t_hi};
  for (double a : {-std::numbers::pi / 2, 0.0, std::numbers::pi / 2})
    if (a > t_lo && a < t_hi) angles.push_back(a);
  SectorBounds b{1e300, -1e300, 1e300, -1e300};
  for (double a : angles) {
    for (double r : {r_lo, r_hi}) {
      const double x = r * std::sin(a), z = r * std::cos(a);
      b.x_min = std::min(b.x_min, x);
      b.x_max = std::max(b.x_max, x);
      b.z_min = std::min(b.z_min, z);
      b.z_max = std::max(b.z_max, z);
    }
  }
  return b;
}

/// Square grid of `size` pixels per side covering the sector bounding box,
/// centered on it, with the smallest isotropic spacing that fits.
inline CartesianGrid2D default_grid_for(const SectorGeometry2D& geom, std::size_t size) {
  geom.validate();
  if (size < 2) throw usage_error("default_grid_for: size must be >= 2");
  const SectorBounds b = sector_bounds(geom);
  const double extent = std::max(b.x_max - b.x_min, b.z_max - b.z_min);
  CartesianGrid2D g;
  g.spacing = extent / static_cast<double>(size - 1);
  g.width = g.height = size;
  const double half = 0.5 * g.spacing * static_cast<double>(size - 1);
  g.origin = {0.5 * (b.x_min + b.x_max) - half, 0.5 * (b.z_min + b.z_max) - half};
  return g;
}

/// Per-voxel trilinear interpolation plan from a spherical volume onto a
/// Cartesian grid.
class ScanConverter3D {
 public:
  ScanConverter3D(const SphericalGeometry3D& geom, const CartesianGrid3D& grid) : geom_(geom), grid_(grid) {
    geom.validate();
    grid.validate();
    mask_ = ValidityMask(grid.volume_shape(), 0);
    for (std::size_t iy = 0; iy < grid.ny; ++iy)
      for (std::size_t iz = 0; iz < grid.nz; ++iz)
        for (std::size_t ix = 0; ix < grid.nx; ++ix) {
          const VolumeCoord vc = cartesian_to_beam(geom, grid.center(iy, iz, ix));
          Tap t;
          if (detail::clamp_index(vc.plane, geom.n_planes, t.plane, t.fp) &&
              detail::clamp_index(vc.beam, geom.sector.n_beams, t.beam, t.fb) &&
              detail::clamp_index(vc.sample, geom.sector.n_samples, t.sample, t.fs)) {
            t.voxel = (iy * grid.nz + iz) * grid.nx + ix;
            mask_[t.voxel] = 1;
            taps_.push_back(t);
          }
        }
  }

  const ValidityMask& mask() const { return mask_; }
  const CartesianGrid3D& grid() const { return grid_; }

  template <typename T>
  void convert_frame(std::span<const T> vol, std::span<T> out) const {
    const std::size_t np = geom_.n_planes, nb = geom_.sector.n_beams, ns = geom_.sector.n_samples;
    std::fill(out.begin(), out.end(), T{});
    auto at = [&](std::size_t p, std::size_t b, std::size_t s) -> double { return vol[(p * nb + b) * ns + s]; };
    for (const Tap& t : taps_) {
      const std::size_t p1 = std::min(t.plane + 1, np - 1);
      const std::size_t b1 = std::min(t.beam + 1, nb - 1);
      const std::size_t s1 = std::min(t.sample + 1, ns - 1);
      auto plane_value = [&](std::size_t p) {
        const double a = detail::lerp(at(p, t.beam, t.sample), at(p, t.beam, s1), t.fs);
        const double b = detail::lerp(at(p, b1, t.sample), at(p, b1, s1), t.fs);
        return detail::lerp(a, b, t.fb);
      };
      out[t.voxel] = static_cast<T>(detail::lerp(plane_value(t.plane), plane_value(p1), t.fp));
    }
  }

 private:
  struct Tap {
    std::size_t voxel = 0;
    std::size_t plane = 0, beam = 0, sample = 0;
    double fp = 0.0, fb = 0.0, fs = 0.0;
  };

  SphericalGeometry3D geom_;
  CartesianGrid3D grid_;
  ValidityMask mask_;
  std::vector<Tap> taps_;
};

template <typename T>
ConvertedImage<T> scan_convert_3d(const Tensor<T>& volume, const SphericalGeometry3D& geom,
                                  const CartesianGrid3D& grid) {
  if (volume.shape() != Shape{geom.n_planes, geom.sector.n_beams, geom.sector.n_samples})
    throw usage_error("scan_convert_3d: volume shape " + shape_string(volume.shape()) +
                      " does not match geometry");
  ScanConverter3D conv(geom, grid);
  ConvertedImage<T> out{Tensor<T>(grid.volume_shape()), conv.mask()};
  conv.convert_frame<T>(volume.flat(), out.image.flat());
  return out;
}

}  // namespace exfl
