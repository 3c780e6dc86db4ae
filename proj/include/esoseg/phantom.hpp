// Synthetic CT phantoms: a wobbling soft-tissue tube with ground truth,
// textured background, air pockets and false-positive distractors.
#pragma once

#include "esoseg/volume.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace esoseg::phantom {

struct PhantomConfig {
  Dims3 dims{64, 64, 48};
  Spacing3 spacing{1.0, 1.0, 3.0};
  double radius_min_mm = 3.0;
  double radius_max_mm = 8.0;
  double wobble = 5.0;            // peak in-plane centerline excursion, voxels
  double wobble_cycles = 1.5;     // highest centerline frequency, cycles per volume
  double center_jitter = 6.0;     // random offset of the mean centerline, voxels
  double tissue_hu_mean = 30.0;
  double tissue_hu_std = 15.0;
  double background_hu_mean = 60.0;
  double background_hu_std = 40.0;
  double background_smoothness = 3.0;  // Gaussian correlation length, voxels
  double noise_std = 10.0;
  int bright_blobs = 3;
  int dark_blobs = 2;
  bool distractor_tube = true;
  double air_pocket_probability = 0.2;  // per slice
  double air_hu = -800.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Phantom {
  Volume3D ct;    // HU
  Volume3D mask;  // ground truth
  Eigen::MatrixX2d centerline;  // true in-plane tube centre per slice, voxels
  Eigen::VectorXd radius_mm;    // true tube radius per slice
};

Phantom generate_phantom(const PhantomConfig& cfg);

struct ManifestEntry {
  std::filesystem::path ct;
  std::filesystem::path mask;
};

/// Generates n phantoms with seeds seed..seed+n-1 into `out_dir` and writes
/// `out_dir/manifest.txt`. Returns the manifest path.
std::filesystem::path generate_dataset(const PhantomConfig& cfg, int n, std::uint64_t seed,
                                       const std::filesystem::path& out_dir);

/// One `ct_path mask_path` pair per line; relative paths resolve against the
/// manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

}  // namespace esoseg::phantom
