#pragma once

// Clinical annotations: speckle-tracking contours, endocardial surface
// meshes and sparse markers, plus their conversion to label masks, strain
// curves and volume-time curves.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "echoxflow/core.hpp"
#include "echoxflow/geometry.hpp"
#include "echoxflow/timing.hpp"

namespace exfl {

enum class Chamber : std::uint8_t { lv, la, rv };
enum class ContourLayer : std::uint8_t { endocardial, epicardial };
enum class ViewTag : std::uint8_t { a2c, a4c, alax, none };

/// Label values of a rasterized segmentation mask.
enum Label : std::uint8_t { kBackground = 0, kMyocardium = 1, kCavity = 2 };

struct Contour2D {
  std::vector<Point2> vertices;  // meters, (x, z)
  bool closed = true;

  friend bool operator==(const Contour2D&, const Contour2D&) = default;
};

/// A point-corresponded contour sequence, one polyline per annotated frame.
struct ContourTrack {
  Chamber chamber = Chamber::lv;
  ContourLayer layer = ContourLayer::endocardial;
  ViewTag view = ViewTag::none;
  bool closed = true;
  std::vector<std::uint32_t> frame_indices;        // frames of the host B-mode stream
  std::vector<std::vector<Point2>> frames;

  Contour2D contour(std::size_t k) const { return {frames.at(k), closed}; }

  friend bool operator==(const ContourTrack&, const ContourTrack&) = default;
};

struct Mesh3D {
  std::vector<Point3> vertices;  // meters
  std::vector<std::array<std::uint32_t, 3>> triangles;

  friend bool operator==(const Mesh3D&, const Mesh3D&) = default;
};

struct MeshTrack {
  Chamber chamber = Chamber::lv;
  std::vector<std::uint32_t> frame_indices;
  std::vector<Mesh3D> frames;

  friend bool operator==(const MeshTrack&, const MeshTrack&) = default;
};

enum class MarkerKind : std::uint8_t { point, line, sample_volume };
enum class MarkerFrame : std::uint8_t { cartesian, beamspace };

struct SparseMarker {
  MarkerKind kind = MarkerKind::point;
  MarkerFrame frame = MarkerFrame::cartesian;
  std::vector<double> coordinates;
  std::string label;

  friend bool operator==(const SparseMarker&, const SparseMarker&) = default;
};

struct AnnotationSet {
  std::vector<ContourTrack> contours;
  std::vector<MeshTrack> meshes;
  std::vector<SparseMarker> markers;

  bool empty() const { return contours.empty() && meshes.empty() && markers.empty(); }
  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

// ---------------------------------------------------------------------------
// Planar polygon predicates

namespace detail {

inline double cross(const Point2& o, const Point2& a, const Point2& b) {
  return (a.x - o.x) * (b.z - o.z) - (a.z - o.z) * (b.x - o.x);
}

inline bool on_segment(const Point2& p, const Point2& a, const Point2& b) {
  const double scale = std::max({std::abs(a.x), std::abs(a.z), std::abs(b.x), std::abs(b.z), 1e-300});
  if (std::abs(cross(a, b, p)) > 1e-12 * scale * scale) return false;
  return p.x >= std::min(a.x, b.x) && p.x <= std::max(a.x, b.x) && p.z >= std::min(a.z, b.z) &&
         p.z <= std::max(a.z, b.z);
}

inline int orientation(const Point2& a, const Point2& b, const Point2& c) {
  const double v = cross(a, b, c);
  return v > 0 ? 1 : (v < 0 ? -1 : 0);
}

inline bool segments_intersect(const Point2& a, const Point2& b, const Point2& c, const Point2& d) {
  const int o1 = orientation(a, b, c), o2 = orientation(a, b, d);
  const int o3 = orientation(c, d, a), o4 = orientation(c, d, b);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(c, a, b)) return true;
  if (o2 == 0 && on_segment(d, a, b)) return true;
  if (o3 == 0 && on_segment(a, c, d)) return true;
  if (o4 == 0 && on_segment(b, c, d)) return true;
  return false;
}

}  // namespace detail

/// True when no two non-adjacent edges of the closed polygon touch.
inline bool is_simple_polygon(const std::vector<Point2>& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
      if (adjacent) continue;
      if (detail::segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n])) return false;
    }
  }
  return true;
}

/// Even-odd membership; points on an edge count as inside.
inline bool point_in_polygon(const Point2& p, const std::vector<Point2>& poly) {
  const std::size_t n = poly.size();
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point2& a = poly[i];
    const Point2& b = poly[j];
    if (detail::on_segment(p, a, b)) return true;
    if ((a.z > p.z) != (b.z > p.z)) {
      const double x = a.x + (p.z - a.z) * (b.x - a.x) / (b.z - a.z);
      if (p.x < x) inside = !inside;
    }
  }
  return inside;
}

namespace detail {

// Scanline fill of a closed polygon at pixel centers (even-odd, half-open
// in z), followed by a pass that claims pixels lying exactly on an edge.
inline void fill_polygon(const std::vector<Point2>& poly, const CartesianGrid2D& grid, std::vector<std::uint8_t>& hit) {
  const std::size_t n = poly.size();
  std::vector<double> xs;
  for (std::size_t row = 0; row < grid.height; ++row) {
    const double z = grid.origin.z + static_cast<double>(row) * grid.spacing;
    xs.clear();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const Point2& a = poly[i];
      const Point2& b = poly[j];
      if ((a.z > z) != (b.z > z)) xs.push_back(a.x + (z - a.z) * (b.x - a.x) / (b.z - a.z));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      const double c_lo = std::ceil((xs[k] - grid.origin.x) / grid.spacing);
      const double c_hi = std::floor((xs[k + 1] - grid.origin.x) / grid.spacing);
      const double lo = std::max(c_lo, 0.0);
      const double hi = std::min(c_hi, static_cast<double>(grid.width) - 1.0);
      for (double c = lo; c <= hi; c += 1.0) hit[row * grid.width + static_cast<std::size_t>(c)] = 1;
    }
  }
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point2& a = poly[i];
    const Point2& b = poly[j];
    const double c0 = std::max(0.0, std::floor((std::min(a.x, b.x) - grid.origin.x) / grid.spacing));
    const double c1 = std::min(static_cast<double>(grid.width) - 1.0,
                               std::ceil((std::max(a.x, b.x) - grid.origin.x) / grid.spacing));
    const double r0 = std::max(0.0, std::floor((std::min(a.z, b.z) - grid.origin.z) / grid.spacing));
    const double r1 = std::min(static_cast<double>(grid.height) - 1.0,
                               std::ceil((std::max(a.z, b.z) - grid.origin.z) / grid.spacing));
    for (double r = r0; r <= r1; r += 1.0)
      for (double c = c0; c <= c1; c += 1.0) {
        const auto row = static_cast<std::size_t>(r), col = static_cast<std::size_t>(c);
        if (on_segment(grid.center(row, col), a, b)) hit[row * grid.width + col] = 1;
      }
  }
}

}  // namespace detail

/// Label mask {0 background, 1 myocardium, 2 cavity} from an endocardial
/// contour and an optional enclosing epicardial contour.
inline Tensor<std::uint8_t> rasterize_contours(const Contour2D& endo, const std::optional<Contour2D>& epi,
                                               const CartesianGrid2D& grid) {
  grid.validate();
  auto check = [](const Contour2D& c, const char* name) {
    if (c.vertices.size() < 3) throw data_error(std::string(name) + " contour needs at least 3 vertices");
    if (!is_simple_polygon(c.vertices)) throw data_error(std::string(name) + " contour is self-intersecting");
  };
  check(endo, "endocardial");
  if (epi) {
    check(*epi, "epicardial");
    for (const auto& v : endo.vertices)
      if (!point_in_polygon(v, epi->vertices)) throw data_error("epicardial contour does not enclose endocardial");
    const auto& a = endo.vertices;
    const auto& b = epi->vertices;
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < b.size(); ++j)
        if (detail::segments_intersect(a[i], a[(i + 1) % a.size()], b[j], b[(j + 1) % b.size()]) &&
            !detail::on_segment(a[i], b[j], b[(j + 1) % b.size()]) &&
            !detail::on_segment(a[(i + 1) % a.size()], b[j], b[(j + 1) % b.size()]))
          throw data_error("epicardial contour does not enclose endocardial");
  }

  const std::size_t n = grid.width * grid.height;
  std::vector<std::uint8_t> cavity(n, 0), outer(n, 0);
  detail::fill_polygon(endo.vertices, grid, cavity);
  if (epi) detail::fill_polygon(epi->vertices, grid, outer);

  Tensor<std::uint8_t> mask(grid.image_shape(), kBackground);
  for (std::size_t i = 0; i < n; ++i) {
    if (cavity[i])
      mask[i] = kCavity;
    else if (outer[i])
      mask[i] = kMyocardium;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Strain

inline double arc_length(const std::vector<Point2>& pts, bool closed) {
  double len = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) len += std::hypot(pts[i].x - pts[i - 1].x, pts[i].z - pts[i - 1].z);
  if (closed && pts.size() > 2) len += std::hypot(pts.front().x - pts.back().x, pts.front().z - pts.back().z);
  return len;
}

/// Global strain in percent: 100 * (L(t) - L(ref)) / L(ref), L = arc length.
inline std::vector<double> strain_curve(const std::vector<Contour2D>& frames, std::size_t reference_frame = 0) {
  if (frames.empty()) return {};
  if (reference_frame >= frames.size()) throw usage_error("strain_curve: reference frame out of range");
  const std::size_t nv = frames[0].vertices.size();
  for (const auto& f : frames)
    if (f.vertices.size() != nv) throw usage_error("strain_curve: vertex-count mismatch across frames");
  const double ref = arc_length(frames[reference_frame].vertices, frames[reference_frame].closed);
  if (!(ref > 0.0)) throw data_error("strain_curve: reference contour has zero length");
  std::vector<double> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(100.0 * (arc_length(f.vertices, f.closed) - ref) / ref);
  return out;
}

/// Segmental strain: the open polyline is cut into `n_segments` pieces of
/// equal arc length on the reference frame; cut points follow the tracked
/// vertices (index + fraction) into every other frame.
inline std::vector<std::vector<double>> segmental_strain(const std::vector<Contour2D>& frames,
                                                         std::size_t reference_frame = 0,
                                                         std::size_t n_segments = 6) {
  if (frames.empty()) return {};
  if (reference_frame >= frames.size()) throw usage_error("segmental_strain: reference frame out of range");
  const std::size_t nv = frames[0].vertices.size();
  if (nv < 2) throw usage_error("segmental_strain: need at least 2 vertices");
  for (const auto& f : frames)
    if (f.vertices.size() != nv) throw usage_error("segmental_strain: vertex-count mismatch across frames");

  const auto& ref = frames[reference_frame].vertices;
  std::vector<double> cum(nv, 0.0);
  for (std::size_t i = 1; i < nv; ++i) cum[i] = cum[i - 1] + std::hypot(ref[i].x - ref[i - 1].x, ref[i].z - ref[i - 1].z);
  // Cut positions as (segment start vertex, fraction along that edge).
  std::vector<std::pair<std::size_t, double>> cuts;
  for (std::size_t k = 0; k <= n_segments; ++k) {
    const double target = cum.back() * static_cast<double>(k) / static_cast<double>(n_segments);
    std::size_t e = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), target) - cum.begin());
    e = std::clamp<std::size_t>(e, 1, nv - 1) - 1;
    const double edge = cum[e + 1] - cum[e];
    cuts.emplace_back(e, edge > 0.0 ? std::clamp((target - cum[e]) / edge, 0.0, 1.0) : 0.0);
  }
  auto piece_length = [&](const std::vector<Point2>& v, std::size_t k) {
    auto point = [&](std::pair<std::size_t, double> c) {
      const Point2& a = v[c.first];
      const Point2& b = v[c.first + 1];
      return Point2{a.x + c.second * (b.x - a.x), a.z + c.second * (b.z - a.z)};
    };
    std::vector<Point2> pts = {point(cuts[k])};
    for (std::size_t i = cuts[k].first + 1; i <= cuts[k + 1].first; ++i) pts.push_back(v[i]);
    pts.push_back(point(cuts[k + 1]));
    return arc_length(pts, false);
  };

  std::vector<std::vector<double>> out(n_segments);
  for (std::size_t k = 0; k < n_segments; ++k) {
    const double l_ref = piece_length(ref, k);
    for (const auto& f : frames) out[k].push_back(100.0 * (piece_length(f.vertices, k) - l_ref) / l_ref);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Meshes

struct MeshVolume {
  double milliliters = 0.0;         // absolute enclosed volume
  bool outward_oriented = true;     // signed volume was positive
};

/// Checks that every edge is shared by exactly two triangles with opposite
/// directions. Returns an error message, or empty when closed and consistent.
inline std::string mesh_topology_error(const Mesh3D& mesh) {
  if (mesh.triangles.empty()) return "open mesh: no triangles";
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> directed;
  for (const auto& t : mesh.triangles) {
    for (int k = 0; k < 3; ++k) {
      const std::uint32_t a = t[k], b = t[(k + 1) % 3];
      if (a >= mesh.vertices.size() || b >= mesh.vertices.size()) return "triangle references missing vertex";
      if (a == b) return "degenerate triangle";
      if (++directed[{a, b}] > 1) return "inconsistent winding (edge traversed twice in one direction)";
    }
  }
  for (const auto& [edge, count] : directed)
    if (!directed.count({edge.second, edge.first})) return "open mesh: boundary edge found";
  return {};
}

/// Divergence-theorem volume: sum of det(v0, v1, v2) / 6 over triangles.
inline MeshVolume mesh_volume(const Mesh3D& mesh) {
  if (auto err = mesh_topology_error(mesh); !err.empty()) throw data_error(err);
  // Accumulate relative to the centroid for translation invariance.
  Point3 c{};
  for (const auto& v : mesh.vertices) {
    c.x += v.x;
    c.y += v.y;
    c.z += v.z;
  }
  const double inv = 1.0 / static_cast<double>(mesh.vertices.size());
  c = {c.x * inv, c.y * inv, c.z * inv};
  double six_v = 0.0;
  for (const auto& t : mesh.triangles) {
    const Point3& p0 = mesh.vertices[t[0]];
    const Point3& p1 = mesh.vertices[t[1]];
    const Point3& p2 = mesh.vertices[t[2]];
    const double ax = p0.x - c.x, ay = p0.y - c.y, az = p0.z - c.z;
    const double bx = p1.x - c.x, by = p1.y - c.y, bz = p1.z - c.z;
    const double cx = p2.x - c.x, cy = p2.y - c.y, cz = p2.z - c.z;
    six_v += ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx);
  }
  const double m3 = six_v / 6.0;
  return {std::abs(m3) * 1e6, m3 >= 0.0};
}

namespace detail {

// Sign of the 2D edge function of point (py, pz) against edge a->b in the
// (y, z) plane, evaluated on a canonical endpoint order so both triangles
// sharing an edge see the same value. Exact zeros are resolved by a
// symbolic perturbation of the point, so every point is strictly on one side.
inline int edge_side(double ay, double az, double by, double bz, double py, double pz) {
  bool flip = false;
  if (by < ay || (by == ay && bz < az)) {
    std::swap(ay, by);
    std::swap(az, bz);
    flip = true;
  }
  const double e = (by - ay) * (pz - az) - (bz - az) * (py - ay);
  int s;
  if (e != 0.0) {
    s = e > 0.0 ? 1 : -1;
  } else {
    // Perturb the point by (eps, eps^2) in (y, z).
    const double dy = by - ay, dz = bz - az;
    s = dz != 0.0 ? (dz > 0.0 ? -1 : 1) : (dy > 0.0 ? 1 : -1);
  }
  return flip ? -s : s;
}

}  // namespace detail

/// Binary volume with voxel centers inside the closed surface set to 1,
/// decided by ray parity along +x.
inline Tensor<std::uint8_t> voxelize_mesh(const Mesh3D& mesh, const CartesianGrid3D& grid) {
  if (auto err = mesh_topology_error(mesh); !err.empty()) throw data_error(err);
  grid.validate();
  const double h = grid.spacing;
  for (const auto& v : mesh.vertices) {
    const bool in = v.x >= grid.origin.x - 0.5 * h && v.x <= grid.origin.x + (grid.nx - 0.5) * h &&
                    v.y >= grid.origin.y - 0.5 * h && v.y <= grid.origin.y + (grid.ny - 0.5) * h &&
                    v.z >= grid.origin.z - 0.5 * h && v.z <= grid.origin.z + (grid.nz - 0.5) * h;
    if (!in) throw usage_error("voxelize_mesh: mesh exceeds grid bounds");
  }

  struct Tri {
    std::array<Point3, 3> p;
    int orient;
    double ymin, ymax, zmin, zmax;
  };
  std::vector<Tri> tris;
  for (const auto& t : mesh.triangles) {
    Tri tr{{mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]}, 0, 0, 0, 0, 0};
    const auto& p = tr.p;
    const double area = (p[1].y - p[0].y) * (p[2].z - p[0].z) - (p[1].z - p[0].z) * (p[2].y - p[0].y);
    if (area == 0.0) continue;  // edge-on in projection; neighbours carry the parity
    tr.orient = area > 0.0 ? 1 : -1;
    tr.ymin = std::min({p[0].y, p[1].y, p[2].y});
    tr.ymax = std::max({p[0].y, p[1].y, p[2].y});
    tr.zmin = std::min({p[0].z, p[1].z, p[2].z});
    tr.zmax = std::max({p[0].z, p[1].z, p[2].z});
    tris.push_back(tr);
  }

  Tensor<std::uint8_t> vol(grid.volume_shape(), 0);
  std::vector<double> xs;
  for (std::size_t iy = 0; iy < grid.ny; ++iy) {
    const double y = grid.origin.y + static_cast<double>(iy) * h;
    for (std::size_t iz = 0; iz < grid.nz; ++iz) {
      const double z = grid.origin.z + static_cast<double>(iz) * h;
      xs.clear();
      for (const Tri& tr : tris) {
        if (y < tr.ymin || y > tr.ymax || z < tr.zmin || z > tr.zmax) continue;
        const auto& p = tr.p;
        bool inside = true;
        for (int k = 0; k < 3 && inside; ++k) {
          const Point3& a = p[k];
          const Point3& b = p[(k + 1) % 3];
          inside = detail::edge_side(a.y, a.z, b.y, b.z, y, z) == tr.orient;
        }
        if (!inside) continue;
        // Barycentric interpolation of x at (y, z).
        const double det = (p[1].y - p[0].y) * (p[2].z - p[0].z) - (p[1].z - p[0].z) * (p[2].y - p[0].y);
        const double l1 = ((y - p[0].y) * (p[2].z - p[0].z) - (z - p[0].z) * (p[2].y - p[0].y)) / det;
        const double l2 = ((p[1].y - p[0].y) * (z - p[0].z) - (p[1].z - p[0].z) * (y - p[0].y)) / det;
        xs.push_back(p[0].x + l1 * (p[1].x - p[0].x) + l2 * (p[2].x - p[0].x));
      }
      std::sort(xs.begin(), xs.end());
      for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
        const double lo = std::max(0.0, std::ceil((xs[k] - grid.origin.x) / h));
        const double hi = std::min(static_cast<double>(grid.nx) - 1.0, std::floor((xs[k + 1] - grid.origin.x) / h));
        for (double c = lo; c <= hi; c += 1.0) vol(iy, iz, static_cast<std::size_t>(c)) = 1;
      }
    }
  }
  return vol;
}

struct BeatExtrema {
  std::size_t end_diastole = 0;  // frame index of maximum volume
  std::size_t end_systole = 0;   // frame index of minimum volume
};

struct VolumeCurve {
  std::vector<double> times;
  std::vector<double> milliliters;
  std::vector<BeatExtrema> beats;
};

/// Per-frame volumes with ED (argmax) / ES (argmin) per beat. Ties go to
/// the earliest frame. Without peaks, or when no complete beat holds a
/// frame, the extrema are global.
inline VolumeCurve volume_curve(const std::vector<Mesh3D>& meshes, const std::vector<double>& times,
                                const std::optional<RPeakList>& peaks = std::nullopt) {
  if (meshes.size() < 2) throw usage_error("volume_curve: need at least 2 frames");
  if (times.size() != meshes.size()) throw usage_error("volume_curve: time count does not match frame count");
  VolumeCurve out;
  out.times = times;
  for (const auto& m : meshes) out.milliliters.push_back(mesh_volume(m).milliliters);

  auto extrema = [&](const std::vector<std::size_t>& idx) {
    BeatExtrema e{idx.front(), idx.front()};
    for (std::size_t i : idx) {
      if (out.milliliters[i] > out.milliliters[e.end_diastole]) e.end_diastole = i;
      if (out.milliliters[i] < out.milliliters[e.end_systole]) e.end_systole = i;
    }
    return e;
  };

  if (peaks && peaks->size() >= 2) {
    std::map<std::size_t, std::vector<std::size_t>> by_beat;
    for (std::size_t i = 0; i < times.size(); ++i)
      if (auto b = beat_of(times[i], *peaks)) by_beat[*b].push_back(i);
    for (const auto& [beat, idx] : by_beat) out.beats.push_back(extrema(idx));
  }
  if (out.beats.empty()) {
    std::vector<std::size_t> all(times.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    out.beats.push_back(extrema(all));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Closed surface construction

/// Geodesic sphere: an icosahedron subdivided `level` times and projected
/// onto the sphere; 20 * 4^level outward-wound triangles.
inline Mesh3D icosphere(double radius, int level, Point3 center = {}) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Point3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                           {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  std::vector<std::array<std::uint32_t, 3>> f = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
      {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
      {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  auto normalize = [](Point3 p) {
    const double n = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    return Point3{p.x / n, p.y / n, p.z / n};
  };
  for (auto& p : v) p = normalize(p);
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> mid;
    auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
      const auto key = std::minmax(a, b);
      if (auto it = mid.find(key); it != mid.end()) return it->second;
      const Point3 m{(v[a].x + v[b].x) / 2, (v[a].y + v[b].y) / 2, (v[a].z + v[b].z) / 2};
      v.push_back(normalize(m));
      const auto idx = static_cast<std::uint32_t>(v.size() - 1);
      mid.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<std::uint32_t, 3>> next;
    next.reserve(f.size() * 4);
    for (const auto& tri : f) {
      const std::uint32_t a = midpoint(tri[0], tri[1]), b = midpoint(tri[1], tri[2]), c = midpoint(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  Mesh3D mesh;
  mesh.triangles = std::move(f);
  for (const auto& p : v) mesh.vertices.push_back({center.x + radius * p.x, center.y + radius * p.y, center.z + radius * p.z});
  return mesh;
}

/// Icosphere scaled per axis into an ellipsoid with the given semi-axes.
inline Mesh3D ellipsoid_mesh(const Point3& semi_axes, int level, Point3 center = {}) {
  Mesh3D m = icosphere(1.0, level);
  for (auto& p : m.vertices)
    p = {center.x + semi_axes.x * p.x, center.y + semi_axes.y * p.y, center.z + semi_axes.z * p.z};
  return m;
}

}  // namespace exfl
