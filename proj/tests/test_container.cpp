#include <gtest/gtest.h>

#include <fstream>

#include "echoxflow/container.hpp"
#include "support.hpp"

using namespace exfl;
using exfl::test::TempDir;

namespace {

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) { return io::read_file(p); }

Recording minimal_recording() {
  Recording r;
  r.id = "rec";
  r.exam = {"exam", "pk", 2};
  r.geometries[0] = SectorGeometry2D{-0.5, 0.25, 5, 0.0, 0.001, 6};
  StreamHeader h;
  h.modality = Modality::tdi2d;
  h.shape = {2, 5, 6};
  h.timestamps = {0.0, 0.01};
  h.nyquist_velocity = 0.16;
  h.geometry_id = 0;
  r.streams.push_back(Stream{h, std::vector<float>(60, 0.5f)});
  r.ecg = {std::vector<float>(12, 0.0f), 600.0, 0.0};
  return r;
}

}  // namespace

TEST(Container, RoundTripRandomRecordings) {
  std::mt19937_64 rng(1);
  TempDir tmp;
  for (int i = 0; i < 50; ++i) {
    const Recording r = test::random_recording(rng, "r" + std::to_string(i));
    ASSERT_TRUE(validate_recording(r).empty()) << validate_recording(r).front();
    write_recording(r, tmp / r.id);
    EXPECT_EQ(read_recording(tmp / r.id), r);
  }
}

TEST(Container, SerializationIsByteIdentical) {
  std::mt19937_64 rng(2);
  const Recording r = test::random_recording(rng, "x");
  TempDir a, b;
  write_recording(r, a / "x");
  write_recording(r, b / "x");
  for (const auto& e : std::filesystem::directory_iterator(a / "x"))
    EXPECT_EQ(file_bytes(e.path()), file_bytes(b / "x" / e.path().filename())) << e.path();
}

TEST(Container, BlobSizeMatchesHeaderPrediction) {
  const Recording r = minimal_recording();
  const auto bytes = encode_stream(r.streams[0]);
  EXPECT_EQ(bytes.size(), predicted_blob_size(r.streams[0].header));
  // magic 4 + version 2 + modality/dtype/ndim 3 + 3 dims 12 + geometry 4 + nyquist 8 + count 4 + 2 stamps 16
  EXPECT_EQ(bytes.size(), 53u + 60u * 4u);
  EXPECT_EQ(bytes[0], 'E');
  EXPECT_EQ(bytes[3], 'L');
  EXPECT_EQ(bytes[4], 1);  // little-endian version
  EXPECT_EQ(bytes[5], 0);
}

TEST(Container, CorruptMagicRejected) {
  auto bytes = encode_stream(minimal_recording().streams[0]);
  bytes[0] = 'X';
  try {
    decode_stream(bytes, "blob");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
}

TEST(Container, VersionMismatchRejected) {
  auto bytes = encode_stream(minimal_recording().streams[0]);
  bytes[4] = 2;
  try {
    decode_stream(bytes, "blob");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("version mismatch"), std::string::npos);
  }
}

TEST(Container, TruncatedPayloadRejected) {
  auto bytes = encode_stream(minimal_recording().streams[0]);
  bytes.pop_back();
  try {
    decode_stream(bytes, "blob");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("truncated payload"), std::string::npos);
  }
  bytes.resize(10);
  EXPECT_THROW(decode_stream(bytes, "blob"), Error);
}

TEST(Container, TruncatedFileOnDiskRejected) {
  TempDir tmp;
  const Recording r = minimal_recording();
  write_recording(r, tmp / "r");
  const auto blob = tmp / "r" / "stream_00_tdi2d.exfl";
  ASSERT_TRUE(std::filesystem::exists(blob));
  std::filesystem::resize_file(blob, std::filesystem::file_size(blob) - 3);
  EXPECT_THROW(read_recording(tmp / "r"), Error);
}

TEST(Container, ValidationMessages) {
  Recording r = minimal_recording();
  r.streams[0].header.nyquist_velocity.reset();
  EXPECT_EQ(validate_recording(r).front(), "StreamHeader.nyquist_velocity missing");

  r = minimal_recording();
  r.streams[0].header.timestamps = {0.01, 0.01};
  EXPECT_EQ(validate_recording(r).front(), "StreamHeader.timestamps not strictly increasing");

  r = minimal_recording();
  r.streams.clear();
  EXPECT_EQ(validate_recording(r).front(), "Recording.streams empty recording");
  TempDir tmp;
  EXPECT_THROW(write_recording(r, tmp / "r"), Error);

  r = minimal_recording();
  r.streams[0].header.geometry_id = 42;
  EXPECT_FALSE(validate_recording(r).empty());
}

TEST(Container, ManifestMismatchRejected) {
  TempDir tmp;
  write_recording(minimal_recording(), tmp / "r");
  const auto path = tmp / "r" / "manifest.json";
  auto j = nlohmann::json::parse(io::read_text(path));
  j["streams"][0]["shape"] = {3, 5, 6};
  io::write_text_atomic(path, j.dump());
  EXPECT_THROW(read_recording(tmp / "r"), Error);
}

TEST(Container, ExamManifest) {
  TempDir tmp;
  ExamManifest e{"e1", {"a", "b"}, "pk", 3};
  write_exam_manifest(e, tmp.path());
  EXPECT_EQ(read_exam_manifest(tmp.path()), e);
  e.recording_ids = {"a", "a"};
  EXPECT_THROW(write_exam_manifest(e, tmp.path()), Error);
  e.recording_ids = {"a"};
  e.fold = 5;
  EXPECT_FALSE(validate_exam_manifest(e).empty());
}

TEST(Container, U8PayloadAsFloat) {
  Stream s;
  s.header.modality = Modality::bmode2d;
  s.header.dtype = DType::u8;
  s.header.shape = {1, 2};
  s.header.timestamps = {0.0};
  s.payload = std::vector<std::uint8_t>{0, 255};
  const auto t = s.as_f32();
  EXPECT_EQ(t(0, 1), 255.0f);
  EXPECT_EQ(decode_stream(encode_stream(s), "u8"), s);
}
