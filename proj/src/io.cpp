#include "regconsist/io.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "binary.hpp"
#include "regconsist/error.hpp"
#include "regconsist/hash.hpp"

namespace regconsist::io {

using nlohmann::json;
using detail::ByteReader;
using detail::ByteWriter;

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError("read failed: " + path.string());
  }
  return bytes;
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace {

// Netpbm header: magic, width, height, maxval, each separated by whitespace
// (with '#' comments), then exactly one whitespace byte before the samples.
struct NetpbmHeader {
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::size_t data_offset = 0;
};

NetpbmHeader parse_netpbm(std::span<const std::uint8_t> bytes, const fs::path& path) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&]() -> std::string {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') {
      t.push_back(static_cast<char>(bytes[pos++]));
    }
    if (t.empty()) throw FormatError("truncated netpbm header: " + path.string());
    return t;
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(c); }) || t.size() > 9) {
      throw FormatError(std::string("bad netpbm ") + what + " '" + t + "': " + path.string());
    }
    return std::stoi(t);
  };
  NetpbmHeader h;
  h.magic = token();
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw FormatError("netpbm header not terminated by whitespace: " + path.string());
  }
  h.data_offset = pos + 1;
  return h;
}

std::string netpbm_header(const char* magic, int width, int height, int maxval) {
  std::ostringstream os;
  os << magic << '\n' << width << ' ' << height << '\n' << maxval << '\n';
  return os.str();
}

}  // namespace

void write_ppm(const fs::path& path, const RgbImage& image) {
  if (image.channels() != 3) throw DimensionError("ppm requires 3 channels: " + path.string());
  const std::string header = netpbm_header("P6", image.width(), image.height(), 255);
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), image.data().begin(), image.data().end());
  write_bytes(path, bytes);
}

RgbImage read_ppm(const fs::path& path) {
  const auto bytes = read_bytes(path);
  const auto h = parse_netpbm(bytes, path);
  if (h.magic != "P6") throw FormatError("expected P6 header, got '" + h.magic + "': " + path.string());
  if (h.maxval != 255) throw FormatError("expected maxval 255: " + path.string());
  RgbImage image(h.width, h.height, 3);
  const std::size_t n = image.data().size();
  if (bytes.size() - h.data_offset != n) {
    throw DimensionError("ppm sample count does not match " + std::to_string(h.width) + "x" +
                         std::to_string(h.height) + ": " + path.string());
  }
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset), n, image.data().begin());
  return image;
}

void write_pgm16(const fs::path& path, const LabelImage& image) {
  if (image.channels() != 1) throw DimensionError("pgm requires 1 channel: " + path.string());
  const std::string header = netpbm_header("P5", image.width(), image.height(), 65535);
  ByteWriter w;
  w.raw(header.data(), header.size());
  for (std::uint16_t v : image.data()) w.uint(v);
  write_bytes(path, w.bytes());
}

LabelImage read_pgm16(const fs::path& path) {
  const auto bytes = read_bytes(path);
  const auto h = parse_netpbm(bytes, path);
  if (h.magic != "P5") throw FormatError("expected P5 header, got '" + h.magic + "': " + path.string());
  if (h.maxval != 65535) throw FormatError("expected 16-bit maxval 65535: " + path.string());
  LabelImage image(h.width, h.height, 1);
  if (bytes.size() - h.data_offset != image.pixel_count() * 2) {
    throw DimensionError("pgm sample count does not match " + std::to_string(h.width) + "x" +
                         std::to_string(h.height) + ": " + path.string());
  }
  ByteReader r(std::span<const std::uint8_t>(bytes).subspan(h.data_offset), path.string());
  for (auto& v : image.data()) v = r.uint<std::uint16_t>("label sample");
  return image;
}

void write_depth(const fs::path& path, const DepthImage& image) {
  if (image.channels() != 1) throw DimensionError("depth requires 1 channel: " + path.string());
  ByteWriter w;
  w.raw(kDepthMagic, sizeof(kDepthMagic));
  w.uint(static_cast<std::uint32_t>(image.width()));
  w.uint(static_cast<std::uint32_t>(image.height()));
  for (float v : image.data()) w.f32(v);
  write_bytes(path, w.bytes());
}

DepthImage read_depth(const fs::path& path) {
  const auto bytes = read_bytes(path);
  ByteReader r(bytes, path.string());
  char magic[8];
  r.raw(magic, sizeof(magic), "depth header");
  if (!std::equal(magic, magic + 8, kDepthMagic)) {
    throw FormatError("bad depth magic: " + path.string());
  }
  const auto width = r.uint<std::uint32_t>("depth header");
  const auto height = r.uint<std::uint32_t>("depth header");
  if (width > (1u << 16) || height > (1u << 16)) throw FormatError("implausible depth size: " + path.string());
  DepthImage image(static_cast<int>(width), static_cast<int>(height), 1);
  if (r.remaining() != image.pixel_count() * 4) {
    throw DimensionError("depth sample count does not match " + std::to_string(width) + "x" +
                         std::to_string(height) + ": " + path.string());
  }
  for (auto& v : image.data()) v = r.f32("depth sample");
  return image;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

json camera_to_json(const CameraModel& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height}};
}

CameraModel camera_from_json(const json& j) {
  CameraModel c;
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  return c;
}

json pose_to_json(const Pose& p) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r) rot.push_back({p.rotation(r, 0), p.rotation(r, 1), p.rotation(r, 2)});
  return {{"rotation", rot},
          {"translation", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

Pose pose_from_json(const json& j) {
  Pose p;
  const auto& rot = j.at("rotation");
  const auto& t = j.at("translation");
  if (rot.size() != 3 || t.size() != 3) throw FormatError("pose must be 3x3 rotation + 3-vector");
  for (int r = 0; r < 3; ++r) {
    if (rot[r].size() != 3) throw FormatError("pose rotation rows must have 3 entries");
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = rot[r][c].get<double>();
    p.translation[r] = t[r].get<double>();
  }
  return p;
}

json manifest_to_json(const DatasetManifest& m) {
  json cams = json::object();
  for (const auto& [id, cam] : m.cameras) cams[id] = camera_to_json(cam);
  json frames = json::array();
  for (const auto& f : m.frames) {
    json jf = {{"id", f.id}, {"rgb", f.rgb_path}, {"depth", f.depth_path},
               {"camera", f.camera_id}, {"pose", pose_to_json(f.pose)}};
    if (f.label_path) jf["labels"] = *f.label_path;
    frames.push_back(std::move(jf));
  }
  return {{"version", DatasetManifest::kVersion},
          {"pose_convention", DatasetManifest::kPoseConvention},
          {"units", m.units},
          {"ignore_label", m.ignore_label},
          {"class_names", m.class_names},
          {"cameras", cams},
          {"frames", frames}};
}

}  // namespace

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& [id, cam] : cameras) cam.validate();
  for (const auto& f : frames) {
    if (!seen.insert(f.id).second) throw InvalidArgument("manifest: duplicate frame id '" + f.id + "'");
    if (!cameras.contains(f.camera_id)) {
      throw InvalidArgument("manifest: frame '" + f.id + "' references unknown camera '" + f.camera_id + "'");
    }
    try {
      f.pose.validate();
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("manifest: frame '" + f.id + "': " + e.what());
    }
  }
}

const FrameRecord& DatasetManifest::frame(const std::string& id) const {
  auto it = std::find_if(frames.begin(), frames.end(), [&](const FrameRecord& f) { return f.id == id; });
  if (it == frames.end()) throw InvalidArgument("manifest: no frame with id '" + id + "'");
  return *it;
}

const CameraModel& DatasetManifest::camera_for(const std::string& frame_id) const {
  return cameras.at(frame(frame_id).camera_id);
}

std::vector<std::string> DatasetManifest::frame_ids() const {
  std::vector<std::string> ids;
  ids.reserve(frames.size());
  for (const auto& f : frames) ids.push_back(f.id);
  return ids;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  manifest.validate();
  write_text(path, manifest_to_json(manifest).dump(2) + "\n");
}

DatasetManifest load_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError("manifest is not valid JSON (" + std::string(e.what()) + "): " + path.string());
  }
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    if (j.at("version").get<int>() != DatasetManifest::kVersion) {
      throw FormatError("unsupported manifest version: " + path.string());
    }
    const std::string convention = j.value("pose_convention", std::string(DatasetManifest::kPoseConvention));
    if (convention != "camera_to_world" && convention != "world_to_camera") {
      throw FormatError("unknown pose_convention '" + convention + "': " + path.string());
    }
    m.units = j.value("units", std::string("meters"));
    m.ignore_label = j.value("ignore_label", kIgnoreLabel);
    m.class_names = j.value("class_names", std::vector<std::string>{});
    for (const auto& [id, cam] : j.at("cameras").items()) m.cameras[id] = camera_from_json(cam);
    for (const auto& jf : j.at("frames")) {
      FrameRecord f;
      f.id = jf.at("id").get<std::string>();
      f.rgb_path = jf.at("rgb").get<std::string>();
      f.depth_path = jf.at("depth").get<std::string>();
      if (jf.contains("labels") && !jf["labels"].is_null()) f.label_path = jf["labels"].get<std::string>();
      f.camera_id = jf.at("camera").get<std::string>();
      f.pose = pose_from_json(jf.at("pose"));
      if (convention == "world_to_camera") {
        Pose inv;
        inv.rotation = f.pose.rotation.transpose();
        inv.translation = -(inv.rotation * f.pose.translation);
        f.pose = inv;
      }
      m.frames.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest (" + std::string(e.what()) + "): " + path.string());
  }
  m.validate();
  return m;
}

std::string manifest_hash(const DatasetManifest& manifest) {
  return sha256_hex(manifest_to_json(manifest).dump());
}

Frame load_frame(const DatasetManifest& manifest, const std::string& id) {
  const FrameRecord& rec = manifest.frame(id);
  const CameraModel& cam = manifest.cameras.at(rec.camera_id);
  auto resolve = [&](const std::string& rel) { return manifest.root / rel; };

  Frame frame;
  frame.id = rec.id;
  frame.camera_id = rec.camera_id;
  frame.pose = rec.pose;

  const fs::path rgb_path = resolve(rec.rgb_path);
  frame.rgb = read_ppm(rgb_path);
  if (!frame.rgb.same_shape(cam.width, cam.height)) {
    throw DimensionError("rgb is " + std::to_string(frame.rgb.width()) + "x" +
                         std::to_string(frame.rgb.height()) + " but camera '" + rec.camera_id +
                         "' is " + std::to_string(cam.width) + "x" + std::to_string(cam.height) +
                         ": " + rgb_path.string());
  }
  const fs::path depth_path = resolve(rec.depth_path);
  frame.depth = read_depth(depth_path);
  if (!frame.depth.same_shape(frame.rgb)) {
    throw DimensionError("depth dimensions differ from rgb: " + depth_path.string());
  }
  if (rec.label_path) {
    const fs::path label_path = resolve(*rec.label_path);
    frame.labels = read_pgm16(label_path);
    if (!frame.labels->same_shape(frame.rgb)) {
      throw DimensionError("label dimensions differ from rgb: " + label_path.string());
    }
  }
  return frame;
}

void save_frame_files(const DatasetManifest& manifest, const FrameRecord& record, const Frame& frame) {
  write_ppm(manifest.root / record.rgb_path, frame.rgb);
  write_depth(manifest.root / record.depth_path, frame.depth);
  if (record.label_path) {
    if (!frame.labels) throw InvalidArgument("frame '" + frame.id + "' has no labels to save");
    write_pgm16(manifest.root / *record.label_path, *frame.labels);
  }
}

// ---------------------------------------------------------------------------
// Pair batches

namespace {

constexpr char kPairMagic[8] = {'R', 'C', 'P', 'A', 'I', 'R', 'S', '\0'};

void write_crop(ByteWriter& w, const CropTransform& c) {
  w.f64(c.left);
  w.f64(c.top);
  w.f64(c.width);
  w.f64(c.height);
  w.uint(static_cast<std::uint32_t>(c.out_width));
  w.uint(static_cast<std::uint32_t>(c.out_height));
}

CropTransform read_crop(ByteReader& r) {
  CropTransform c;
  c.left = r.f64("crop");
  c.top = r.f64("crop");
  c.width = r.f64("crop");
  c.height = r.f64("crop");
  c.out_width = static_cast<int>(r.uint<std::uint32_t>("crop"));
  c.out_height = static_cast<int>(r.uint<std::uint32_t>("crop"));
  return c;
}

}  // namespace

std::vector<std::uint8_t> encode_pair_batch(const PairBatch& batch) {
  ByteWriter w;
  w.raw(kPairMagic, sizeof(kPairMagic));
  w.uint(kPairBatchVersion);
  w.string(batch.id1);
  w.string(batch.id2);
  w.string(batch.strategy);
  w.uint(batch.seed);
  w.uint(batch.requested);
  write_crop(w, batch.crop1);
  write_crop(w, batch.crop2);
  w.uint(static_cast<std::uint64_t>(batch.pairs.size()));
  w.uint(kPairRecordBytes);
  for (const auto& pp : batch.pairs) {
    for (const Pixel& px : {pp.p, pp.q, pp.p_source, pp.q_source}) {
      w.uint(static_cast<std::int32_t>(px.row));
      w.uint(static_cast<std::int32_t>(px.col));
    }
  }
  return std::move(w.bytes());
}

PairBatch decode_pair_batch(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "pair batch");
  char magic[8];
  r.raw(magic, sizeof(magic), "magic");
  if (!std::equal(magic, magic + 8, kPairMagic)) r.fail("bad magic");
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kPairBatchVersion) {
    r.fail("version tag mismatch (file " + std::to_string(version) + ", expected " +
           std::to_string(kPairBatchVersion) + ")");
  }
  PairBatch b;
  b.id1 = r.string("id1");
  b.id2 = r.string("id2");
  b.strategy = r.string("strategy");
  b.seed = r.uint<std::uint64_t>("seed");
  b.requested = r.uint<std::uint32_t>("requested");
  b.crop1 = read_crop(r);
  b.crop2 = read_crop(r);
  const auto count = r.uint<std::uint64_t>("record count");
  const auto record_bytes = r.uint<std::uint32_t>("record length");
  if (record_bytes != kPairRecordBytes) {
    r.fail("corrupted record length " + std::to_string(record_bytes));
  }
  if (count > r.remaining() / kPairRecordBytes) {
    const std::size_t complete = r.remaining() / kPairRecordBytes;
    throw FormatError("pair batch: truncated record " + std::to_string(complete) + " of " +
                      std::to_string(count) + " at byte offset " +
                      std::to_string(r.offset() + complete * kPairRecordBytes));
  }
  b.pairs.resize(count);
  for (auto& pp : b.pairs) {
    for (Pixel* px : {&pp.p, &pp.q, &pp.p_source, &pp.q_source}) {
      px->row = r.uint<std::int32_t>("record");
      px->col = r.uint<std::int32_t>("record");
    }
  }
  if (r.remaining() != 0) r.fail("trailing bytes after last record");
  return b;
}

void save_pair_batch(const PairBatch& batch, const fs::path& path) {
  write_bytes(path, encode_pair_batch(batch));
}

PairBatch load_pair_batch(const fs::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return decode_pair_batch(bytes);
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + " (" + path.string() + ")");
  }
}

// ---------------------------------------------------------------------------
// Tensor archives

namespace {
constexpr char kArchiveMagic[8] = {'R', 'C', 'C', 'K', 'P', 'T', '\0', '\0'};
}

const NamedTensor& TensorArchive::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("checkpoint has no tensor named '" + name + "'");
}

void save_archive(const TensorArchive& archive, const fs::path& path) {
  ByteWriter w;
  w.raw(kArchiveMagic, sizeof(kArchiveMagic));
  w.uint(TensorArchive::kVersion);
  w.string(archive.metadata);
  w.uint(static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& t : archive.tensors) {
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (n != t.values.size()) throw DimensionError("tensor '" + t.name + "' shape does not match its values");
    w.string(t.name);
    w.uint(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.uint(d);
    for (float v : t.values) w.f32(v);
  }
  write_bytes(path, w.bytes());
}

TensorArchive load_archive(const fs::path& path) {
  const auto bytes = read_bytes(path);
  ByteReader r(bytes, path.string());
  char magic[8];
  r.raw(magic, sizeof(magic), "magic");
  if (!std::equal(magic, magic + 8, kArchiveMagic)) r.fail("bad checkpoint magic");
  const auto version = r.uint<std::uint32_t>("version");
  if (version != TensorArchive::kVersion) r.fail("checkpoint version tag mismatch");
  TensorArchive a;
  a.metadata = r.string("metadata");
  const auto count = r.uint<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.string("tensor name");
    const auto ndim = r.uint<std::uint32_t>("tensor rank");
    if (ndim > 8) r.fail("implausible tensor rank");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(r.uint<std::uint32_t>("tensor shape"));
      n *= t.shape.back();
    }
    r.need(n * 4, "tensor data");
    t.values.resize(n);
    for (auto& v : t.values) v = r.f32("tensor data");
    a.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return a;
}

}  // namespace regconsist::io
