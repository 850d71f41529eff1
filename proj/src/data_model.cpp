#include "apex/data_model.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <set>

#include "apex/error.hpp"

namespace apex {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kBytes: return 1;
  }
  throw FormatError("unknown dtype code");
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw FormatError("container header truncated");
  T value;
  std::memcpy(&value, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large payloads.
  std::size_t offset = 0;
  while (offset < data.size()) {
    const std::size_t chunk = std::min<std::size_t>(data.size() - offset, 1u << 30);
    crc = crc32(crc, data.data() + offset, static_cast<uInt>(chunk));
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint64_t element_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<std::uint8_t> floats_to_bytes(std::span<const float> v) {
  std::vector<std::uint8_t> out(v.size() * 4);
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

std::vector<float> bytes_to_floats(std::span<const std::uint8_t> b) {
  std::vector<float> out(b.size() / 4);
  std::memcpy(out.data(), b.data(), out.size() * 4);
  return out;
}

void require_finite(std::span<const float> v, const std::string& what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw DataError(what + ": non-finite value at element " + std::to_string(i));
    }
  }
}

Container expect_kind(const fs::path& path, ContainerKind kind, std::size_t rank) {
  Container c = read_container(path);
  if (c.kind != kind) {
    throw FormatError(path.string() + ": expected container kind " +
                      std::to_string(static_cast<int>(kind)) + ", found " +
                      std::to_string(static_cast<int>(c.kind)));
  }
  if (c.dtype != DType::kF32) throw FormatError(path.string() + ": expected f32 payload");
  if (c.dims.size() != rank) {
    throw FormatError(path.string() + ": expected rank " + std::to_string(rank) + ", found " +
                      std::to_string(c.dims.size()));
  }
  return c;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ValidationError("manifest: unknown split tag '" + s + "'");
}

TaskKind parse_task(const std::string& s) {
  if (s == "single_label") return TaskKind::kSingleLabel;
  if (s == "multi_label") return TaskKind::kMultiLabel;
  throw ValidationError("manifest: unknown task_kind '" + s + "'");
}

}  // namespace

const char* to_string(TaskKind kind) {
  return kind == TaskKind::kSingleLabel ? "single_label" : "multi_label";
}

const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

void FeatureMap::validate() const {
  if (values.size() != freq_bins * time_frames * channels) {
    throw ShapeError("feature map " + sample_id + ": payload length " +
                     std::to_string(values.size()) + " != F*T*D");
  }
  if (freq_bins > input_freq_bins || time_frames > input_time_frames) {
    throw ShapeError("feature map " + sample_id + ": latent geometry exceeds input geometry");
  }
  require_finite(values, "feature map " + sample_id);
}

void SpectrogramImage::validate() const {
  if (values.size() != freq_bins * time_frames) {
    throw ShapeError("spectrogram " + sample_id + ": payload length mismatch");
  }
  require_finite(values, "spectrogram " + sample_id);
}

void ClassifierHead::validate() const {
  if (weights.rows() != num_classes || weights.cols() != channels) {
    throw ShapeError("classifier head: weight matrix is not N x D");
  }
  if (bias.size() != num_classes) throw ShapeError("classifier head: bias length != N");
  if (!all_finite(weights)) throw DataError("classifier head: non-finite weight");
  for (double b : bias)
    if (!std::isfinite(b)) throw DataError("classifier head: non-finite bias");
}

LatentMap to_latent(const FeatureMap& z) {
  LatentMap out(z.freq_bins, z.time_frames, z.channels);
  std::copy(z.values.begin(), z.values.end(), out.values.begin());
  return out;
}

// ---- containers ----

std::vector<std::uint8_t> encode_container(const Container& c) {
  const std::uint64_t expected = element_count(c.dims) * dtype_size(c.dtype);
  if (c.payload.size() != expected) {
    throw ShapeError("encode_container: payload has " + std::to_string(c.payload.size()) +
                     " bytes, dims imply " + std::to_string(expected));
  }
  if (c.dims.size() > 255) throw ShapeError("encode_container: rank too large");

  std::vector<std::uint8_t> out;
  out.reserve(8 + 2 + 3 + 8 * c.dims.size() + c.payload.size() + 4);
  for (char ch : kContainerMagic) out.push_back(static_cast<std::uint8_t>(ch));
  put_le<std::uint16_t>(out, c.version);
  out.push_back(static_cast<std::uint8_t>(c.kind));
  out.push_back(static_cast<std::uint8_t>(c.dtype));
  out.push_back(static_cast<std::uint8_t>(c.dims.size()));
  for (auto d : c.dims) put_le<std::uint64_t>(out, d);
  out.insert(out.end(), c.payload.begin(), c.payload.end());
  put_le<std::uint32_t>(out, crc32_of(c.payload));
  return out;
}

Container decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || !std::equal(std::begin(kContainerMagic), std::end(kContainerMagic),
                                      bytes.begin())) {
    throw FormatError("bad magic: not an APEX container");
  }
  std::size_t pos = 8;
  Container c;
  c.version = get_le<std::uint16_t>(bytes, pos);
  if (c.version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(c.version));
  }
  const auto kind = get_le<std::uint8_t>(bytes, pos);
  if (kind > static_cast<std::uint8_t>(ContainerKind::kState)) {
    throw FormatError("unknown container kind " + std::to_string(kind));
  }
  c.kind = static_cast<ContainerKind>(kind);
  const auto dtype = get_le<std::uint8_t>(bytes, pos);
  if (dtype > static_cast<std::uint8_t>(DType::kBytes)) {
    throw FormatError("unknown dtype code " + std::to_string(dtype));
  }
  c.dtype = static_cast<DType>(dtype);
  const auto rank = get_le<std::uint8_t>(bytes, pos);
  for (std::uint8_t i = 0; i < rank; ++i) c.dims.push_back(get_le<std::uint64_t>(bytes, pos));

  const std::uint64_t count = element_count(c.dims);
  const std::uint64_t payload_bytes = count * dtype_size(c.dtype);
  if (bytes.size() - pos < 4 || bytes.size() - pos - 4 != payload_bytes) {
    throw FormatError("payload length mismatch: header declares " + std::to_string(count) +
                      " elements (" + std::to_string(payload_bytes) + " bytes), file carries " +
                      std::to_string(bytes.size() >= pos + 4 ? bytes.size() - pos - 4 : 0) +
                      " bytes");
  }
  c.payload.assign(bytes.begin() + pos, bytes.begin() + pos + payload_bytes);
  pos += payload_bytes;
  const auto stored_crc = get_le<std::uint32_t>(bytes, pos);
  if (stored_crc != crc32_of(c.payload)) throw FormatError("payload CRC32 mismatch");
  return c;
}

Container read_container(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_container(const Container& c, const fs::path& path) {
  const auto bytes = encode_container(c);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

FeatureMap read_feature_map(const fs::path& path) {
  Container c = expect_kind(path, ContainerKind::kFeatureMap, 3);
  FeatureMap z;
  z.sample_id = path.stem().string();
  z.freq_bins = c.dims[0];
  z.time_frames = c.dims[1];
  z.channels = c.dims[2];
  z.input_freq_bins = z.freq_bins;
  z.input_time_frames = z.time_frames;
  z.values = bytes_to_floats(c.payload);
  z.validate();
  return z;
}

SpectrogramImage read_spectrogram(const fs::path& path) {
  Container c = expect_kind(path, ContainerKind::kSpectrogram, 2);
  SpectrogramImage x;
  x.sample_id = path.stem().string();
  x.freq_bins = c.dims[0];
  x.time_frames = c.dims[1];
  x.values = bytes_to_floats(c.payload);
  x.validate();
  return x;
}

ClassifierHead read_head(const fs::path& path) {
  Container c = expect_kind(path, ContainerKind::kHead, 2);
  if (c.dims[1] < 1) throw FormatError(path.string() + ": head needs a bias column");
  const auto raw = bytes_to_floats(c.payload);
  require_finite(raw, path.string());
  ClassifierHead h;
  h.num_classes = c.dims[0];
  h.channels = c.dims[1] - 1;
  h.weights = Matrix(h.num_classes, h.channels);
  h.bias.resize(h.num_classes);
  const std::size_t stride = h.channels + 1;
  for (std::size_t n = 0; n < h.num_classes; ++n) {
    for (std::size_t d = 0; d < h.channels; ++d) h.weights(n, d) = raw[n * stride + d];
    h.bias[n] = raw[n * stride + h.channels];
  }
  return h;
}

TensorObject read_tensor_file(const fs::path& path) {
  const Container c = read_container(path);
  switch (c.kind) {
    case ContainerKind::kFeatureMap: return read_feature_map(path);
    case ContainerKind::kSpectrogram: return read_spectrogram(path);
    case ContainerKind::kHead: return read_head(path);
    default:
      throw FormatError(path.string() + ": container kind " +
                        std::to_string(static_cast<int>(c.kind)) + " is not a tensor object");
  }
}

void write_tensor_file(const TensorObject& obj, const fs::path& path) {
  Container c;
  c.dtype = DType::kF32;
  if (const auto* z = std::get_if<FeatureMap>(&obj)) {
    z->validate();
    c.kind = ContainerKind::kFeatureMap;
    c.dims = {z->freq_bins, z->time_frames, z->channels};
    c.payload = floats_to_bytes(z->values);
  } else if (const auto* x = std::get_if<SpectrogramImage>(&obj)) {
    x->validate();
    c.kind = ContainerKind::kSpectrogram;
    c.dims = {x->freq_bins, x->time_frames};
    c.payload = floats_to_bytes(x->values);
  } else {
    const auto& h = std::get<ClassifierHead>(obj);
    h.validate();
    c.kind = ContainerKind::kHead;
    c.dims = {h.num_classes, h.channels + 1};
    std::vector<float> raw;
    raw.reserve(h.num_classes * (h.channels + 1));
    for (std::size_t n = 0; n < h.num_classes; ++n) {
      for (std::size_t d = 0; d < h.channels; ++d) raw.push_back(static_cast<float>(h.weights(n, d)));
      raw.push_back(static_cast<float>(h.bias[n]));
    }
    c.payload = floats_to_bytes(raw);
  }
  write_container(c, path);
}

// ---- manifest ----

void Manifest::validate() const {
  std::set<std::string> seen;
  const std::size_t n = num_classes();
  for (const auto& s : samples) {
    if (s.sample_id.empty()) throw ValidationError("manifest: empty sample_id");
    if (!seen.insert(s.sample_id).second) {
      throw ValidationError("manifest: duplicate sample_id '" + s.sample_id + "'");
    }
    for (auto label : s.labels) {
      if (label >= n) {
        throw ValidationError("manifest: sample '" + s.sample_id + "' has label " +
                              std::to_string(label) + " but only " + std::to_string(n) +
                              " classes");
      }
    }
    if (task_kind == TaskKind::kSingleLabel && s.labels.size() != 1) {
      throw ValidationError("manifest: single_label sample '" + s.sample_id +
                            "' must carry exactly one label");
    }
  }
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  bool have_header = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (!have_header) {
        if (rec.value("format", "") != "apex-manifest") {
          throw FormatError("first record must be the apex-manifest header");
        }
        if (rec.value("version", 0) != 1) throw FormatError("unsupported manifest version");
        m.class_names = rec.at("class_names").get<std::vector<std::string>>();
        m.task_kind = parse_task(rec.at("task_kind").get<std::string>());
        if (rec.contains("input_geometry")) {
          const auto g = rec.at("input_geometry").get<std::vector<std::size_t>>();
          if (g.size() != 2) throw FormatError("input_geometry must have two entries");
          m.input_freq_bins = g[0];
          m.input_time_frames = g[1];
        }
        if (rec.contains("annotations")) m.annotations_json = rec.at("annotations").dump();
        have_header = true;
        continue;
      }
      ManifestSample s;
      s.sample_id = rec.at("sample_id").get<std::string>();
      s.path = rec.at("path").get<std::string>();
      s.spectrogram = rec.value("spectrogram", "");
      s.labels = rec.at("labels").get<std::vector<std::size_t>>();
      s.split = parse_split(rec.at("split").get<std::string>());
      m.samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw FormatError(path.string() + ": empty manifest");
  m.validate();
  return m;
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
  manifest.validate();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  json header = {{"format", "apex-manifest"},
                 {"version", 1},
                 {"class_names", manifest.class_names},
                 {"task_kind", to_string(manifest.task_kind)},
                 {"input_geometry", {manifest.input_freq_bins, manifest.input_time_frames}},
                 {"annotations", json::parse(manifest.annotations_json)}};
  out << header.dump() << '\n';
  for (const auto& s : manifest.samples) {
    json rec = {{"sample_id", s.sample_id},
                {"path", s.path},
                {"labels", s.labels},
                {"split", to_string(s.split)}};
    if (!s.spectrogram.empty()) rec["spectrogram"] = s.spectrogram;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i)
    if (manifest.samples[i].split == split) out.push_back(i);
  return out;
}

Dataset load_dataset(const fs::path& manifest_path, bool with_spectrograms) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  const auto& m = ds.manifest;
  ds.features.reserve(m.samples.size());
  for (const auto& s : m.samples) {
    FeatureMap z = read_feature_map(m.base_dir / s.path);
    z.sample_id = s.sample_id;
    if (m.input_freq_bins > 0) {
      z.input_freq_bins = m.input_freq_bins;
      z.input_time_frames = m.input_time_frames;
    }
    z.validate();
    if (!ds.features.empty()) {
      const auto& first = ds.features.front();
      if (z.freq_bins != first.freq_bins || z.time_frames != first.time_frames ||
          z.channels != first.channels) {
        throw ShapeError("dataset: feature map " + s.sample_id + " geometry differs from " +
                         first.sample_id);
      }
    }
    ds.features.push_back(std::move(z));
    if (with_spectrograms) {
      if (s.spectrogram.empty()) {
        throw ValidationError("dataset: sample " + s.sample_id + " has no spectrogram");
      }
      SpectrogramImage x = read_spectrogram(m.base_dir / s.spectrogram);
      x.sample_id = s.sample_id;
      if (x.freq_bins != ds.features.back().input_freq_bins ||
          x.time_frames != ds.features.back().input_time_frames) {
        throw ShapeError("dataset: spectrogram " + s.sample_id +
                         " does not match the declared input geometry");
      }
      ds.spectrograms.push_back(std::move(x));
    }
  }
  return ds;
}

// ---- pooling + head ----

std::vector<double> gap(const LatentMap& z) {
  std::vector<double> v(z.channels, 0.0);
  const std::size_t cells = z.cells();
  for (std::size_t c = 0; c < cells; ++c) {
    const double* fiber = z.values.data() + c * z.channels;
    for (std::size_t d = 0; d < z.channels; ++d) v[d] += fiber[d];
  }
  const double inv = cells > 0 ? 1.0 / static_cast<double>(cells) : 0.0;
  for (double& x : v) x *= inv;
  return v;
}

std::vector<double> gap(const FeatureMap& z) {
  std::vector<double> v(z.channels, 0.0);
  const std::size_t cells = z.cells();
  for (std::size_t c = 0; c < cells; ++c) {
    const float* fiber = z.values.data() + c * z.channels;
    for (std::size_t d = 0; d < z.channels; ++d) v[d] += fiber[d];
  }
  const double inv = cells > 0 ? 1.0 / static_cast<double>(cells) : 0.0;
  for (double& x : v) x *= inv;
  return v;
}

std::vector<double> logits(const ClassifierHead& head, std::span<const double> v) {
  if (v.size() != head.channels) {
    throw ShapeError("logits: head expects " + std::to_string(head.channels) +
                     " channels, got " + std::to_string(v.size()));
  }
  auto out = matvec(head.weights, v);
  for (std::size_t n = 0; n < out.size(); ++n) out[n] += head.bias[n];
  return out;
}

}  // namespace apex
