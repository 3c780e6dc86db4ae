// Volumetric image container, MetaImage I/O and block geometry.
#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace esoseg {

/// Malformed or inconsistent input data (files, shapes, value ranges).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical procedure failed (singular system, no convergence, non-finite values).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Index3 = std::array<long, 3>;
using Dims3 = std::array<long, 3>;
using Spacing3 = std::array<double, 3>;

enum class VolumeKind { HU, Probability, Mask };

const char* to_string(VolumeKind kind);

/// Scalar 3D grid with voxel spacing in mm. Data is x-fastest:
/// linear index = x + nx * (y + ny * z).
struct Volume3D {
  Dims3 dims{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  VolumeKind kind = VolumeKind::HU;
  Eigen::ArrayXd data;

  Volume3D() : data(Eigen::ArrayXd::Zero(1)) {}
  Volume3D(Dims3 d, Spacing3 s, VolumeKind k, double fill = 0.0);

  long nx() const { return dims[0]; }
  long ny() const { return dims[1]; }
  long nz() const { return dims[2]; }
  long size() const { return dims[0] * dims[1] * dims[2]; }

  long linear(long x, long y, long z) const { return x + dims[0] * (y + dims[1] * z); }
  bool contains(long x, long y, long z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }

  double& operator()(long x, long y, long z) { return data[linear(x, y, z)]; }
  double operator()(long x, long y, long z) const { return data[linear(x, y, z)]; }

  /// Same geometry, new kind, filled with a constant.
  Volume3D like(VolumeKind k, double fill = 0.0) const { return Volume3D(dims, spacing, k, fill); }

  /// Throws DataError when any Volume3D invariant is violated.
  void validate() const;
};

bool same_geometry(const Volume3D& a, const Volume3D& b);
bool operator==(const Volume3D& a, const Volume3D& b);

/// Reads a MetaImage header (.mhd) and its raw payload.
/// MET_SHORT -> HU, MET_FLOAT -> Probability, MET_UCHAR -> Mask.
Volume3D read_volume(const std::filesystem::path& header_path);

/// Writes `<stem>.mhd` plus `<stem>.raw` next to it. Probability data is
/// stored as 32-bit float, HU as int16 (rounded), masks as uint8.
void write_volume(const Volume3D& vol, const std::filesystem::path& header_path);

/// Index into [0, n) by mirror reflection without edge repetition
/// (-1 -> 1, n -> n-2). A length-1 axis always maps to 0.
long mirror_index(long i, long n);

/// Block of `size` voxels whose lowest corner is `origin`; voxels outside
/// the volume are mirror-reflected. Any size is accepted.
Volume3D extract_block(const Volume3D& vol, const Index3& origin, const Dims3& size);

/// Odd-sized block centered on `center`.
Volume3D extract_subvolume(const Volume3D& vol, const Index3& center, const Dims3& size);

/// 2x2x2 block mean; dims floor-halved, spacing doubled.
Volume3D downsample2(const Volume3D& vol);

/// Nearest-neighbour repetition by two followed by a crop to `target`.
/// Cropping keeps floor((2n - t) / 2) voxels off the low side.
Volume3D upsample2_nearest(const Volume3D& vol, const Dims3& target);

}  // namespace esoseg
