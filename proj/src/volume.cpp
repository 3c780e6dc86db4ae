#include "esoseg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace esoseg {

static_assert(std::endian::native == std::endian::little,
              "raw payloads are read and written in host byte order");

namespace fs = std::filesystem;

const char* to_string(VolumeKind kind) {
  switch (kind) {
    case VolumeKind::HU: return "HU";
    case VolumeKind::Probability: return "probability";
    case VolumeKind::Mask: return "mask";
  }
  return "?";
}

Volume3D::Volume3D(Dims3 d, Spacing3 s, VolumeKind k, double fill)
    : dims(d), spacing(s), kind(k) {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw DataError("volume dimensions must be positive");
    if (!(spacing[a] > 0.0)) throw DataError("voxel spacing must be strictly positive");
  }
  data = Eigen::ArrayXd::Constant(size(), fill);
}

void Volume3D::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw DataError("volume dimensions must be positive");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
      throw DataError("voxel spacing must be strictly positive");
  }
  if (data.size() != size()) throw DataError("volume data length does not match dimensions");
  if (!data.isFinite().all()) throw DataError("volume contains non-finite values");
  if (kind == VolumeKind::Probability && (data.minCoeff() < 0.0 || data.maxCoeff() > 1.0))
    throw DataError("probability volume has values outside [0,1]");
  if (kind == VolumeKind::Mask && !((data == 0.0) || (data == 1.0)).all())
    throw DataError("mask volume has values other than 0 and 1");
}

bool same_geometry(const Volume3D& a, const Volume3D& b) {
  return a.dims == b.dims && a.spacing == b.spacing;
}

bool operator==(const Volume3D& a, const Volume3D& b) {
  return a.kind == b.kind && same_geometry(a, b) && (a.data == b.data).all();
}

// ---------------------------------------------------------------------------
// MetaImage I/O

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

template <typename T, std::size_t N>
std::array<T, N> parse_triplet(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  std::array<T, N> out{};
  for (auto& v : out)
    if (!(in >> v)) throw DataError("malformed header value for " + key + ": '" + value + "'");
  std::string rest;
  if (in >> rest) throw DataError("malformed header value for " + key + ": '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  std::string v = value;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw DataError("malformed boolean header value for " + key + ": '" + value + "'");
}

template <typename T>
std::vector<T> read_payload(const fs::path& path, long count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open raw payload: " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<long long>(in.tellg());
  in.seekg(0, std::ios::beg);
  const long long expected = static_cast<long long>(count) * static_cast<long long>(sizeof(T));
  if (bytes != expected)
    throw DataError("payload size mismatch for " + path.string() + ": expected " +
                    std::to_string(expected) + " bytes, found " + std::to_string(bytes));
  std::vector<T> buf(count);
  in.read(reinterpret_cast<char*>(buf.data()), expected);
  if (!in) throw DataError("failed reading raw payload: " + path.string());
  return buf;
}

template <typename T>
void write_payload(const fs::path& path, const std::vector<T>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(T)));
  if (!out) throw DataError("failed writing raw payload: " + path.string());
}

}  // namespace

Volume3D read_volume(const fs::path& header_path) {
  std::ifstream in(header_path);
  if (!in) throw DataError("cannot open volume header: " + header_path.string());

  std::map<std::string, std::string> keys;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    const std::string key = eq == std::string::npos ? std::string{} : trim(line.substr(0, eq));
    if (key.empty() || key.find_first_of(" \t") != std::string::npos)
      throw DataError("malformed header key at " + header_path.string() + ":" + std::to_string(lineno));
    keys[key] = trim(line.substr(eq + 1));
  }

  auto require = [&](const char* key) -> const std::string& {
    auto it = keys.find(key);
    if (it == keys.end()) throw DataError(std::string("volume header lacks ") + key);
    return it->second;
  };

  if (require("NDims") != "3") throw DataError("only NDims = 3 is supported");
  const auto dims = parse_triplet<long, 3>("DimSize", require("DimSize"));
  Spacing3 spacing{1.0, 1.0, 1.0};
  if (keys.count("ElementSpacing")) spacing = parse_triplet<double, 3>("ElementSpacing", keys["ElementSpacing"]);
  for (const char* k : {"ElementByteOrderMSB", "BinaryDataByteOrderMSB"})
    if (keys.count(k) && parse_bool(k, keys[k])) throw DataError("big-endian payloads are not supported");
  if (keys.count("CompressedData") && parse_bool("CompressedData", keys["CompressedData"]))
    throw DataError("compressed payloads are not supported");
  if (keys.count("ElementNumberOfChannels") && keys["ElementNumberOfChannels"] != "1")
    throw DataError("multi-channel volumes are not supported");

  const std::string& type = require("ElementType");
  fs::path raw = require("ElementDataFile");
  if (raw.is_relative()) raw = header_path.parent_path() / raw;

  VolumeKind kind;
  if (type == "MET_SHORT") kind = VolumeKind::HU;
  else if (type == "MET_FLOAT") kind = VolumeKind::Probability;
  else if (type == "MET_UCHAR") kind = VolumeKind::Mask;
  else throw DataError("unsupported element type: " + type);

  Volume3D vol(dims, spacing, kind);
  const long n = vol.size();
  switch (kind) {
    case VolumeKind::HU: {
      const auto buf = read_payload<std::int16_t>(raw, n);
      for (long i = 0; i < n; ++i) vol.data[i] = buf[i];
      break;
    }
    case VolumeKind::Probability: {
      const auto buf = read_payload<float>(raw, n);
      for (long i = 0; i < n; ++i) vol.data[i] = buf[i];
      break;
    }
    case VolumeKind::Mask: {
      const auto buf = read_payload<std::uint8_t>(raw, n);
      for (long i = 0; i < n; ++i) vol.data[i] = buf[i];
      break;
    }
  }
  vol.validate();
  return vol;
}

void write_volume(const Volume3D& vol, const fs::path& header_path) {
  vol.validate();
  fs::path raw = header_path;
  raw.replace_extension(".raw");

  const char* type = nullptr;
  const long n = vol.size();
  switch (vol.kind) {
    case VolumeKind::HU: {
      type = "MET_SHORT";
      std::vector<std::int16_t> buf(n);
      for (long i = 0; i < n; ++i)
        buf[i] = static_cast<std::int16_t>(std::clamp(std::lround(vol.data[i]), -32768L, 32767L));
      write_payload(raw, buf);
      break;
    }
    case VolumeKind::Probability: {
      type = "MET_FLOAT";
      std::vector<float> buf(n);
      for (long i = 0; i < n; ++i) buf[i] = static_cast<float>(vol.data[i]);
      write_payload(raw, buf);
      break;
    }
    case VolumeKind::Mask: {
      type = "MET_UCHAR";
      std::vector<std::uint8_t> buf(n);
      for (long i = 0; i < n; ++i) buf[i] = vol.data[i] != 0.0 ? 1 : 0;
      write_payload(raw, buf);
      break;
    }
  }

  std::ofstream out(header_path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + header_path.string());
  out.precision(17);
  out << "ObjectType = Image\n"
      << "NDims = 3\n"
      << "DimSize = " << vol.dims[0] << ' ' << vol.dims[1] << ' ' << vol.dims[2] << '\n'
      << "ElementSpacing = " << vol.spacing[0] << ' ' << vol.spacing[1] << ' ' << vol.spacing[2] << '\n'
      << "ElementType = " << type << '\n'
      << "ElementByteOrderMSB = False\n"
      << "ElementDataFile = " << raw.filename().string() << '\n';
  if (!out) throw DataError("failed writing volume header: " + header_path.string());
}

// ---------------------------------------------------------------------------
// Geometry

long mirror_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Volume3D extract_block(const Volume3D& vol, const Index3& origin, const Dims3& size) {
  Volume3D out(size, vol.spacing, vol.kind);
  for (long z = 0; z < size[2]; ++z) {
    const long sz = mirror_index(origin[2] + z, vol.nz());
    for (long y = 0; y < size[1]; ++y) {
      const long sy = mirror_index(origin[1] + y, vol.ny());
      const long src_row = vol.linear(0, sy, sz);
      const long dst_row = out.linear(0, y, z);
      for (long x = 0; x < size[0]; ++x)
        out.data[dst_row + x] = vol.data[src_row + mirror_index(origin[0] + x, vol.nx())];
    }
  }
  return out;
}

Volume3D extract_subvolume(const Volume3D& vol, const Index3& center, const Dims3& size) {
  Index3 origin{};
  for (int a = 0; a < 3; ++a) {
    if (size[a] < 1 || size[a] % 2 == 0)
      throw DataError("sub-volume size must be odd along every axis");
    origin[a] = center[a] - size[a] / 2;
  }
  return extract_block(vol, origin, size);
}

Volume3D downsample2(const Volume3D& vol) {
  for (int a = 0; a < 3; ++a)
    if (vol.dims[a] < 2) throw DataError("downsample2 needs every dimension >= 2");
  const Dims3 d{vol.nx() / 2, vol.ny() / 2, vol.nz() / 2};
  Volume3D out(d, {2 * vol.spacing[0], 2 * vol.spacing[1], 2 * vol.spacing[2]}, vol.kind);
  for (long z = 0; z < d[2]; ++z)
    for (long y = 0; y < d[1]; ++y)
      for (long x = 0; x < d[0]; ++x) {
        double s = 0.0;
        for (long dz = 0; dz < 2; ++dz)
          for (long dy = 0; dy < 2; ++dy)
            for (long dx = 0; dx < 2; ++dx) s += vol(2 * x + dx, 2 * y + dy, 2 * z + dz);
        out(x, y, z) = s / 8.0;
      }
  if (out.kind == VolumeKind::Mask) out.kind = VolumeKind::Probability;
  return out;
}

Volume3D upsample2_nearest(const Volume3D& vol, const Dims3& target) {
  Index3 lo{};
  for (int a = 0; a < 3; ++a) {
    const long full = 2 * vol.dims[a];
    if (target[a] < full - 1 || target[a] > full)
      throw DataError("upsample2_nearest target must be 2n-1 or 2n along every axis");
    lo[a] = (full - target[a]) / 2;
  }
  Volume3D out(target, {vol.spacing[0] / 2, vol.spacing[1] / 2, vol.spacing[2] / 2}, vol.kind);
  for (long z = 0; z < target[2]; ++z)
    for (long y = 0; y < target[1]; ++y)
      for (long x = 0; x < target[0]; ++x)
        out(x, y, z) = vol((x + lo[0]) / 2, (y + lo[1]) / 2, (z + lo[2]) / 2);
  return out;
}

}  // namespace esoseg
