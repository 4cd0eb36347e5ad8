#pragma once

// EXFL: an open on-disk container for echocardiography recordings.
//
// A recording is a directory holding one binary blob per stream, an ECG
// blob, optional annotation blobs and a UTF-8 `manifest.json`. Stream blob
// layout (little-endian, no padding):
//
//   "EXFL" | u16 version=1 | u8 modality | u8 dtype | u8 ndim |
//   u32 dims[ndim] | u32 geometry_id | f64 nyquist (NaN if absent) |
//   u32 n_timestamps | f64 timestamps[n] | payload (row-major, frame-major)
//
// Contour blob: u32 frames, then per frame u32 nv, f64 (x, z) * nv.
// Mesh blob:    u32 frames, then per frame u32 nv, f64 xyz * nv,
//               u32 nt, u32 ijk * nt.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "echoxflow/annotations.hpp"
#include "echoxflow/core.hpp"
#include "echoxflow/geometry.hpp"
#include "echoxflow/io.hpp"
#include "echoxflow/timing.hpp"
#include "json.hpp"

namespace exfl {

inline constexpr std::array<std::uint8_t, 4> kMagic = {0x45, 0x58, 0x46, 0x4C};  // "EXFL"
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::uint32_t kNoGeometry = std::numeric_limits<std::uint32_t>::max();

enum class Modality : std::uint8_t { bmode1d, bmode2d, bmode3d, tdi2d, color2d, pw1d, cw1d, ecg };
enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

inline constexpr std::array<const char*, 8> kModalityNames = {"bmode1d", "bmode2d", "bmode3d", "tdi2d",
                                                              "color2d", "pw1d",    "cw1d",    "ecg"};

inline const char* to_string(Modality m) { return kModalityNames.at(static_cast<std::size_t>(m)); }
inline const char* to_string(DType d) { return d == DType::f32 ? "f32" : "u8"; }

inline Modality modality_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kModalityNames.size(); ++i)
    if (s == kModalityNames[i]) return static_cast<Modality>(i);
  throw data_error("unknown modality '" + s + "'");
}

inline bool is_doppler(Modality m) {
  return m == Modality::tdi2d || m == Modality::color2d || m == Modality::pw1d || m == Modality::cw1d;
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 1; }

/// Operator-placed color box as half-open beam and sample index ranges.
struct BeamBox {
  std::uint32_t beam_begin = 0, beam_end = 0;
  std::uint32_t sample_begin = 0, sample_end = 0;

  bool contains(std::size_t beam, std::size_t sample) const {
    return beam >= beam_begin && beam < beam_end && sample >= sample_begin && sample < sample_end;
  }
  friend bool operator==(const BeamBox&, const BeamBox&) = default;
};

struct StreamHeader {
  Modality modality = Modality::bmode2d;
  DType dtype = DType::f32;
  Shape shape;                            // frame-major
  std::vector<double> timestamps;         // seconds since recording start
  std::optional<double> nyquist_velocity; // m/s, Doppler only
  std::uint32_t geometry_id = kNoGeometry;
  std::optional<BeamBox> color_box;       // manifest-only metadata

  std::size_t frames() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t payload_bytes() const { return element_count(shape) * dtype_size(dtype); }
  std::size_t header_bytes() const { return 4 + 2 + 1 + 1 + 1 + 4 * shape.size() + 4 + 8 + 4 + 8 * timestamps.size(); }

  friend bool operator==(const StreamHeader&, const StreamHeader&) = default;
};

using Payload = std::variant<std::vector<float>, std::vector<std::uint8_t>>;

struct Stream {
  StreamHeader header;
  Payload payload;

  /// Payload as a float tensor of the declared shape.
  Tensor<float> as_f32() const {
    if (const auto* f = std::get_if<std::vector<float>>(&payload)) return Tensor<float>(header.shape, *f);
    const auto& u = std::get<std::vector<std::uint8_t>>(payload);
    return Tensor<float>(header.shape, std::vector<float>(u.begin(), u.end()));
  }

  static Stream from_tensor(StreamHeader header, const Tensor<float>& data) {
    header.dtype = DType::f32;
    header.shape = data.shape();
    return Stream{std::move(header), data.storage()};
  }

  friend bool operator==(const Stream&, const Stream&) = default;
};

using GeometryDescriptor = std::variant<SectorGeometry2D, SphericalGeometry3D, CartesianGrid2D>;

struct ExamInfo {
  std::string exam_id;
  std::string patient_key;   // opaque, never demographic
  std::optional<int> fold;   // 0..4 when assigned

  friend bool operator==(const ExamInfo&, const ExamInfo&) = default;
};

struct Recording {
  std::string id;
  std::vector<Stream> streams;
  EcgTrace ecg;
  std::map<std::uint32_t, GeometryDescriptor> geometries;
  AnnotationSet annotations;
  ExamInfo exam;

  /// First stream of the given modality, or nullptr.
  const Stream* find(Modality m) const {
    for (const auto& s : streams)
      if (s.header.modality == m) return &s;
    return nullptr;
  }
  template <typename G>
  const G* geometry(std::uint32_t id) const {
    auto it = geometries.find(id);
    return it == geometries.end() ? nullptr : std::get_if<G>(&it->second);
  }

  friend bool operator==(const Recording&, const Recording&) = default;
};

struct ExamManifest {
  std::string exam_id;
  std::vector<std::string> recording_ids;
  std::string patient_key;
  std::optional<int> fold;

  friend bool operator==(const ExamManifest&, const ExamManifest&) = default;
};

// ---------------------------------------------------------------------------
// Validation

inline std::vector<std::string> validate_stream_header(const StreamHeader& h) {
  std::vector<std::string> out;
  if (h.shape.empty()) out.push_back("StreamHeader.shape must have at least one dimension");
  for (std::size_t d : h.shape)
    if (d < 1) {
      out.push_back("StreamHeader.shape dimensions must be >= 1");
      break;
    }
  if (!h.shape.empty() && h.shape[0] != h.timestamps.size())
    out.push_back("StreamHeader.shape[0] does not match timestamp count");
  for (std::size_t i = 1; i < h.timestamps.size(); ++i)
    if (!(h.timestamps[i] > h.timestamps[i - 1])) {
      out.push_back("StreamHeader.timestamps not strictly increasing");
      break;
    }
  if (is_doppler(h.modality) && !h.nyquist_velocity) out.push_back("StreamHeader.nyquist_velocity missing");
  if (!is_doppler(h.modality) && h.nyquist_velocity)
    out.push_back("StreamHeader.nyquist_velocity present on non-Doppler stream");
  if (h.nyquist_velocity && !(*h.nyquist_velocity > 0.0))
    out.push_back("StreamHeader.nyquist_velocity must be > 0");
  return out;
}

/// All invariant violations; empty iff the recording is valid.
inline std::vector<std::string> validate_recording(const Recording& rec) {
  std::vector<std::string> out;
  if (rec.streams.empty()) out.push_back("Recording.streams empty recording");
  for (const auto& [id, g] : rec.geometries)
    std::visit([&](const auto& geom) {
      for (auto& v : geom.violations()) out.push_back(v);
    }, g);
  for (const auto& s : rec.streams) {
    for (auto& v : validate_stream_header(s.header)) out.push_back(v);
    if (s.header.modality == Modality::ecg)
      out.push_back("Recording.streams holds an ECG stream; the ECG belongs in Recording.ecg");
    const bool is_f32 = std::holds_alternative<std::vector<float>>(s.payload);
    if (is_f32 != (s.header.dtype == DType::f32)) out.push_back("Stream.payload type does not match dtype");
    const std::size_t n = std::visit([](const auto& v) { return v.size(); }, s.payload);
    if (n != element_count(s.header.shape)) out.push_back("Stream.payload size does not match shape");
    if (s.header.geometry_id != kNoGeometry && !rec.geometries.count(s.header.geometry_id))
      out.push_back("Recording.geometries missing id " + std::to_string(s.header.geometry_id));
  }
  for (auto& v : rec.ecg.violations()) out.push_back(v);
  return out;
}

// ---------------------------------------------------------------------------
// Blob encoding

inline std::vector<std::uint8_t> encode_stream(const Stream& s) {
  const auto& h = s.header;
  io::ByteWriter w;
  for (auto b : kMagic) w.u8(b);
  w.u16(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(h.modality));
  w.u8(static_cast<std::uint8_t>(h.dtype));
  w.u8(static_cast<std::uint8_t>(h.shape.size()));
  for (std::size_t d : h.shape) w.u32(static_cast<std::uint32_t>(d));
  w.u32(h.geometry_id);
  w.f64(h.nyquist_velocity.value_or(std::numeric_limits<double>::quiet_NaN()));
  w.u32(static_cast<std::uint32_t>(h.timestamps.size()));
  for (double t : h.timestamps) w.f64(t);
  if (const auto* f = std::get_if<std::vector<float>>(&s.payload))
    for (float v : *f) w.f32(v);
  else
    for (std::uint8_t v : std::get<std::vector<std::uint8_t>>(s.payload)) w.u8(v);
  return w.release();
}

inline Stream decode_stream(const std::vector<std::uint8_t>& buf, const std::string& context) {
  io::ByteReader r(buf, context);
  std::array<std::uint8_t, 4> magic{};
  r.bytes(magic.data(), 4);
  if (magic != kMagic) throw data_error(context + ": bad magic");
  if (const auto v = r.u16(); v != kFormatVersion)
    throw data_error(context + ": version mismatch (file " + std::to_string(v) + ", expected 1)");
  Stream s;
  auto& h = s.header;
  const auto mod = r.u8();
  if (mod > 7) throw data_error(context + ": unknown modality code " + std::to_string(mod));
  h.modality = static_cast<Modality>(mod);
  const auto dt = r.u8();
  if (dt > 1) throw data_error(context + ": unknown dtype code " + std::to_string(dt));
  h.dtype = static_cast<DType>(dt);
  const auto ndim = r.u8();
  for (int i = 0; i < ndim; ++i) h.shape.push_back(r.u32());
  h.geometry_id = r.u32();
  const double nyq = r.f64();
  if (!std::isnan(nyq)) h.nyquist_velocity = nyq;
  const auto nts = r.u32();
  r.need(static_cast<std::size_t>(nts) * 8);
  for (std::uint32_t i = 0; i < nts; ++i) h.timestamps.push_back(r.f64());

  const std::size_t payload = h.payload_bytes();
  if (r.remaining() < payload) throw data_error(context + ": truncated payload");
  if (r.remaining() > payload) throw data_error(context + ": trailing bytes after payload");
  if (h.dtype == DType::f32) {
    std::vector<float> v(element_count(h.shape));
    for (auto& x : v) x = r.f32();
    s.payload = std::move(v);
  } else {
    std::vector<std::uint8_t> v(element_count(h.shape));
    r.bytes(v.data(), v.size());
    s.payload = std::move(v);
  }
  for (const auto& msg : validate_stream_header(h)) throw data_error(context + ": " + msg);
  return s;
}

inline std::vector<std::uint8_t> encode_contours(const ContourTrack& t) {
  io::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(t.frames.size()));
  for (const auto& f : t.frames) {
    w.u32(static_cast<std::uint32_t>(f.size()));
    for (const auto& p : f) {
      w.f64(p.x);
      w.f64(p.z);
    }
  }
  return w.release();
}

inline std::vector<std::vector<Point2>> decode_contours(const std::vector<std::uint8_t>& buf, const std::string& ctx) {
  io::ByteReader r(buf, ctx);
  std::vector<std::vector<Point2>> frames(r.u32());
  for (auto& f : frames) {
    const auto nv = r.u32();
    r.need(static_cast<std::size_t>(nv) * 16);
    f.resize(nv);
    for (auto& p : f) {
      p.x = r.f64();
      p.z = r.f64();
    }
  }
  if (r.remaining()) throw data_error(ctx + ": trailing bytes");
  return frames;
}

inline std::vector<std::uint8_t> encode_meshes(const MeshTrack& t) {
  io::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(t.frames.size()));
  for (const auto& m : t.frames) {
    w.u32(static_cast<std::uint32_t>(m.vertices.size()));
    for (const auto& v : m.vertices) {
      w.f64(v.x);
      w.f64(v.y);
      w.f64(v.z);
    }
    w.u32(static_cast<std::uint32_t>(m.triangles.size()));
    for (const auto& tri : m.triangles)
      for (auto i : tri) w.u32(i);
  }
  return w.release();
}

inline std::vector<Mesh3D> decode_meshes(const std::vector<std::uint8_t>& buf, const std::string& ctx) {
  io::ByteReader r(buf, ctx);
  std::vector<Mesh3D> frames(r.u32());
  for (auto& m : frames) {
    const auto nv = r.u32();
    r.need(static_cast<std::size_t>(nv) * 24);
    m.vertices.resize(nv);
    for (auto& v : m.vertices) v = {r.f64(), r.f64(), r.f64()};
    const auto nt = r.u32();
    r.need(static_cast<std::size_t>(nt) * 12);
    m.triangles.resize(nt);
    for (auto& tri : m.triangles) tri = {r.u32(), r.u32(), r.u32()};
  }
  if (r.remaining()) throw data_error(ctx + ": trailing bytes");
  return frames;
}

// ---------------------------------------------------------------------------
// Manifest (JSON) helpers

namespace detail {

using nlohmann::json;

inline json geometry_to_json(std::uint32_t id, const GeometryDescriptor& g) {
  json j;
  j["id"] = id;
  auto sector = [](const SectorGeometry2D& s) {
    return json{{"theta0", s.theta0}, {"dtheta", s.dtheta}, {"n_beams", s.n_beams},
                {"r0", s.r0},         {"dr", s.dr},         {"n_samples", s.n_samples}};
  };
  if (const auto* s = std::get_if<SectorGeometry2D>(&g)) {
    j["kind"] = "sector2d";
    j["sector"] = sector(*s);
  } else if (const auto* v = std::get_if<SphericalGeometry3D>(&g)) {
    j["kind"] = "spherical3d";
    j["sector"] = sector(v->sector);
    j["phi0"] = v->phi0;
    j["dphi"] = v->dphi;
    j["n_planes"] = v->n_planes;
  } else {
    const auto& c = std::get<CartesianGrid2D>(g);
    j["kind"] = "cartesian2d";
    j["origin"] = {c.origin.x, c.origin.z};
    j["spacing"] = c.spacing;
    j["width"] = c.width;
    j["height"] = c.height;
  }
  return j;
}

inline GeometryDescriptor geometry_from_json(const json& j) {
  auto sector = [](const json& s) {
    return SectorGeometry2D{s.at("theta0").get<double>(), s.at("dtheta").get<double>(),
                            s.at("n_beams").get<std::uint32_t>(), s.at("r0").get<double>(),
                            s.at("dr").get<double>(), s.at("n_samples").get<std::uint32_t>()};
  };
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "sector2d") return sector(j.at("sector"));
  if (kind == "spherical3d")
    return SphericalGeometry3D{sector(j.at("sector")), j.at("phi0").get<double>(), j.at("dphi").get<double>(),
                               j.at("n_planes").get<std::uint32_t>()};
  if (kind == "cartesian2d")
    return CartesianGrid2D{{j.at("origin")[0].get<double>(), j.at("origin")[1].get<double>()},
                           j.at("spacing").get<double>(),
                           j.at("width").get<std::size_t>(),
                           j.at("height").get<std::size_t>()};
  throw data_error("unknown geometry kind '" + kind + "'");
}

template <typename E, std::size_t N>
E enum_from(const std::string& s, const std::array<const char*, N>& names, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (s == names[i]) return static_cast<E>(i);
  throw data_error(std::string("unknown ") + what + " '" + s + "'");
}

inline constexpr std::array<const char*, 3> kChamberNames = {"LV", "LA", "RV"};
inline constexpr std::array<const char*, 2> kLayerNames = {"endocardial", "epicardial"};
inline constexpr std::array<const char*, 4> kViewNames = {"A2C", "A4C", "ALAX", "none"};
inline constexpr std::array<const char*, 3> kMarkerKindNames = {"point", "line", "sample-volume"};
inline constexpr std::array<const char*, 2> kMarkerFrameNames = {"cartesian", "beamspace"};

inline json header_to_json(const StreamHeader& h) {
  json j;
  j["modality"] = to_string(h.modality);
  j["dtype"] = to_string(h.dtype);
  j["shape"] = h.shape;
  j["geometry_id"] = h.geometry_id;
  j["nyquist_velocity"] = h.nyquist_velocity ? json(*h.nyquist_velocity) : json(nullptr);
  j["n_timestamps"] = h.timestamps.size();
  j["header_bytes"] = h.header_bytes();
  j["payload_bytes"] = h.payload_bytes();
  if (h.color_box) {
    const auto& b = *h.color_box;
    j["color_box"] = {{"beam_begin", b.beam_begin}, {"beam_end", b.beam_end},
                      {"sample_begin", b.sample_begin}, {"sample_end", b.sample_end}};
  }
  return j;
}

inline std::string blob_name(std::size_t index, Modality m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "stream_%02zu_%s.exfl", index, to_string(m));
  return buf;
}

}  // namespace detail

/// Serialized size of a stream blob as predicted from its header.
inline std::size_t predicted_blob_size(const StreamHeader& h) { return h.header_bytes() + h.payload_bytes(); }

/// Stream header used for the ECG blob: one timestamp per sample.
inline Stream ecg_stream(const EcgTrace& ecg) {
  Stream s;
  s.header.modality = Modality::ecg;
  s.header.dtype = DType::f32;
  s.header.shape = {ecg.samples.size()};
  for (std::size_t i = 0; i < ecg.samples.size(); ++i) s.header.timestamps.push_back(ecg.time_of(i));
  s.payload = ecg.samples;
  return s;
}

inline void write_recording(const Recording& rec, const std::filesystem::path& dir) {
  if (rec.streams.empty()) throw data_error("empty recording");
  if (auto v = validate_recording(rec); !v.empty()) throw data_error("invalid recording: " + v.front());
  io::ensure_directory(dir);

  using nlohmann::json;
  json m;
  m["format"] = "EXFL";
  m["version"] = kFormatVersion;
  m["recording_id"] = rec.id;
  m["exam_id"] = rec.exam.exam_id;
  m["patient_key"] = rec.exam.patient_key;
  m["fold"] = rec.exam.fold ? json(*rec.exam.fold) : json(nullptr);

  json geoms = json::array();
  for (const auto& [id, g] : rec.geometries) geoms.push_back(detail::geometry_to_json(id, g));
  m["geometries"] = geoms;

  json streams = json::array();
  for (std::size_t i = 0; i < rec.streams.size(); ++i) {
    const auto& s = rec.streams[i];
    const auto name = detail::blob_name(i, s.header.modality);
    io::write_file_atomic(dir / name, encode_stream(s));
    json j = detail::header_to_json(s.header);
    j["blob"] = name;
    streams.push_back(j);
  }
  m["streams"] = streams;

  const Stream ecg = ecg_stream(rec.ecg);
  io::write_file_atomic(dir / "ecg.exfl", encode_stream(ecg));
  m["ecg"] = {{"blob", "ecg.exfl"}, {"rate", rec.ecg.rate}, {"t0", rec.ecg.t0}, {"n_samples", rec.ecg.samples.size()}};

  json ann = json::object();
  json contours = json::array();
  for (std::size_t i = 0; i < rec.annotations.contours.size(); ++i) {
    const auto& t = rec.annotations.contours[i];
    char name[48];
    std::snprintf(name, sizeof name, "contours_%02zu.bin", i);
    io::write_file_atomic(dir / name, encode_contours(t));
    contours.push_back({{"blob", name},
                        {"chamber", detail::kChamberNames[static_cast<std::size_t>(t.chamber)]},
                        {"layer", detail::kLayerNames[static_cast<std::size_t>(t.layer)]},
                        {"view", detail::kViewNames[static_cast<std::size_t>(t.view)]},
                        {"closed", t.closed},
                        {"frame_indices", t.frame_indices}});
  }
  json meshes = json::array();
  for (std::size_t i = 0; i < rec.annotations.meshes.size(); ++i) {
    const auto& t = rec.annotations.meshes[i];
    char name[48];
    std::snprintf(name, sizeof name, "meshes_%02zu.bin", i);
    io::write_file_atomic(dir / name, encode_meshes(t));
    meshes.push_back({{"blob", name},
                      {"chamber", detail::kChamberNames[static_cast<std::size_t>(t.chamber)]},
                      {"frame_indices", t.frame_indices}});
  }
  json markers = json::array();
  for (const auto& mk : rec.annotations.markers)
    markers.push_back({{"kind", detail::kMarkerKindNames[static_cast<std::size_t>(mk.kind)]},
                       {"frame", detail::kMarkerFrameNames[static_cast<std::size_t>(mk.frame)]},
                       {"coordinates", mk.coordinates},
                       {"label", mk.label}});
  ann["contours"] = contours;
  ann["meshes"] = meshes;
  ann["markers"] = markers;
  m["annotations"] = ann;

  io::write_text_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

inline Recording read_recording(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir)) throw io_error("no such recording: " + dir.string());
  using nlohmann::json;
  json m;
  try {
    m = json::parse(io::read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw data_error(dir.string() + "/manifest.json: " + e.what());
  }
  try {
    if (m.at("format").get<std::string>() != "EXFL") throw data_error("manifest.json: bad magic");
    if (m.at("version").get<int>() != kFormatVersion) throw data_error("manifest.json: version mismatch");

    Recording rec;
    rec.id = m.at("recording_id").get<std::string>();
    rec.exam.exam_id = m.at("exam_id").get<std::string>();
    rec.exam.patient_key = m.at("patient_key").get<std::string>();
    if (!m.at("fold").is_null()) rec.exam.fold = m.at("fold").get<int>();

    for (const auto& g : m.at("geometries")) rec.geometries[g.at("id").get<std::uint32_t>()] = detail::geometry_from_json(g);

    for (const auto& js : m.at("streams")) {
      const auto name = js.at("blob").get<std::string>();
      Stream s = decode_stream(io::read_file(dir / name), name);
      // Cross-check the binary header against the manifest's declaration.
      const json declared = detail::header_to_json(s.header);
      for (const char* key : {"modality", "dtype", "shape", "geometry_id", "nyquist_velocity", "n_timestamps"})
        if (declared.at(key) != js.at(key))
          throw data_error(name + ": header field '" + key + "' disagrees with manifest.json");
      if (js.contains("color_box")) {
        const auto& b = js.at("color_box");
        s.header.color_box = BeamBox{b.at("beam_begin").get<std::uint32_t>(), b.at("beam_end").get<std::uint32_t>(),
                                     b.at("sample_begin").get<std::uint32_t>(), b.at("sample_end").get<std::uint32_t>()};
      }
      rec.streams.push_back(std::move(s));
    }

    const auto& je = m.at("ecg");
    const Stream ecg = decode_stream(io::read_file(dir / je.at("blob").get<std::string>()), "ecg");
    if (ecg.header.modality != Modality::ecg) throw data_error("ecg blob has modality " + std::string(to_string(ecg.header.modality)));
    if (ecg.header.dtype != DType::f32) throw data_error("ecg blob must be f32");
    rec.ecg.rate = je.at("rate").get<double>();
    rec.ecg.t0 = je.at("t0").get<double>();
    rec.ecg.samples = std::get<std::vector<float>>(ecg.payload);

    const auto& ann = m.at("annotations");
    for (const auto& jc : ann.at("contours")) {
      ContourTrack t;
      const auto name = jc.at("blob").get<std::string>();
      t.frames = decode_contours(io::read_file(dir / name), name);
      t.chamber = detail::enum_from<Chamber>(jc.at("chamber").get<std::string>(), detail::kChamberNames, "chamber");
      t.layer = detail::enum_from<ContourLayer>(jc.at("layer").get<std::string>(), detail::kLayerNames, "layer");
      t.view = detail::enum_from<ViewTag>(jc.at("view").get<std::string>(), detail::kViewNames, "view");
      t.closed = jc.at("closed").get<bool>();
      t.frame_indices = jc.at("frame_indices").get<std::vector<std::uint32_t>>();
      rec.annotations.contours.push_back(std::move(t));
    }
    for (const auto& jm : ann.at("meshes")) {
      MeshTrack t;
      const auto name = jm.at("blob").get<std::string>();
      t.frames = decode_meshes(io::read_file(dir / name), name);
      t.chamber = detail::enum_from<Chamber>(jm.at("chamber").get<std::string>(), detail::kChamberNames, "chamber");
      t.frame_indices = jm.at("frame_indices").get<std::vector<std::uint32_t>>();
      rec.annotations.meshes.push_back(std::move(t));
    }
    for (const auto& jk : ann.at("markers")) {
      SparseMarker mk;
      mk.kind = detail::enum_from<MarkerKind>(jk.at("kind").get<std::string>(), detail::kMarkerKindNames, "marker kind");
      mk.frame = detail::enum_from<MarkerFrame>(jk.at("frame").get<std::string>(), detail::kMarkerFrameNames, "marker frame");
      mk.coordinates = jk.at("coordinates").get<std::vector<double>>();
      mk.label = jk.at("label").get<std::string>();
      rec.annotations.markers.push_back(std::move(mk));
    }

    if (auto v = validate_recording(rec); !v.empty()) throw data_error(dir.string() + ": " + v.front());
    return rec;
  } catch (const json::exception& e) {
    throw data_error(dir.string() + "/manifest.json: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Exams: a directory with exam.json and one sub-directory per recording.

inline std::vector<std::string> validate_exam_manifest(const ExamManifest& e) {
  std::vector<std::string> out;
  if (e.recording_ids.empty()) out.push_back("ExamManifest.recording_ids empty");
  auto ids = e.recording_ids;
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) out.push_back("ExamManifest.recording_ids not unique");
  if (e.fold && (*e.fold < 0 || *e.fold > 4)) out.push_back("ExamManifest.fold outside 0..4");
  return out;
}

inline void write_exam_manifest(const ExamManifest& e, const std::filesystem::path& dir) {
  if (auto v = validate_exam_manifest(e); !v.empty()) throw data_error(v.front());
  io::ensure_directory(dir);
  nlohmann::json j{{"exam_id", e.exam_id},
                   {"recording_ids", e.recording_ids},
                   {"patient_key", e.patient_key},
                   {"fold", e.fold ? nlohmann::json(*e.fold) : nlohmann::json(nullptr)}};
  io::write_text_atomic(dir / "exam.json", j.dump(2) + "\n");
}

inline ExamManifest read_exam_manifest(const std::filesystem::path& dir) {
  try {
    const auto j = nlohmann::json::parse(io::read_text(dir / "exam.json"));
    ExamManifest e;
    e.exam_id = j.at("exam_id").get<std::string>();
    e.recording_ids = j.at("recording_ids").get<std::vector<std::string>>();
    e.patient_key = j.at("patient_key").get<std::string>();
    if (!j.at("fold").is_null()) e.fold = j.at("fold").get<int>();
    if (auto v = validate_exam_manifest(e); !v.empty()) throw data_error(v.front());
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw data_error((dir / "exam.json").string() + ": " + ex.what());
  }
}

inline bool is_exam_directory(const std::filesystem::path& dir) { return std::filesystem::exists(dir / "exam.json"); }
inline bool is_recording_directory(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / "manifest.json");
}

}  // namespace exfl
