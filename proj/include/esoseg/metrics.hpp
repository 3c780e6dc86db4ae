// Overlap and surface-distance metrics, and the paired Wilcoxon signed-rank test.
#pragma once

#include "esoseg/volume.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace esoseg::metrics {

/// 2|A n B| / (|A| + |B|). Throws DataError when both masks are empty.
double dice(const Volume3D& a, const Volume3D& b);

/// Mask voxels with at least one 6-neighbour outside the mask or the volume.
std::vector<Index3> surface_voxels(const Volume3D& mask);

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// voxel of `set`, honouring anisotropic spacing. Voxels are infinitely far
/// when `set` is empty.
Eigen::ArrayXd squared_distance_transform(const Volume3D& set);

struct SurfaceDistances {
  std::vector<double> a_to_b;  // per surface voxel of A, nearest distance to the surface of B
  std::vector<double> b_to_a;
};

SurfaceDistances surface_distances(const Volume3D& a, const Volume3D& b);

/// Average symmetric surface distance in mm, using the masks' spacing.
double assd(const Volume3D& a, const Volume3D& b);
/// Hausdorff distance between the two surfaces in mm.
double hausdorff(const Volume3D& a, const Volume3D& b);

/// Copies of both masks with every slice outside [z_min, z_max] cleared.
std::pair<Volume3D, Volume3D> crop_masks(const Volume3D& a, const Volume3D& b, long z_min, long z_max);

struct CaseMetrics {
  std::string id;
  double dsc = 0.0;
  double assd_mm = 0.0;
  double hd_mm = 0.0;
};

CaseMetrics evaluate_case(const std::string& id, const Volume3D& prediction, const Volume3D& reference);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single case
};
Aggregate aggregate(std::span<const double> values);

struct MetricReport {
  std::vector<CaseMetrics> cases;
  Aggregate dsc, assd_mm, hd_mm;
};

MetricReport make_report(std::vector<CaseMetrics> cases);

/// Comma-separated table: header, one row per case, then mean and std rows.
void write_report(const MetricReport& report, const std::filesystem::path& path);
std::string format_report(const MetricReport& report);

struct WilcoxonResult {
  long n = 0;           // pairs left after dropping zero differences
  double w_plus = 0.0;  // rank sum of positive differences
  double p_value = 1.0; // two-sided
  bool exact = true;
};

/// Exact null distribution for n <= 25, normal approximation with tie and
/// continuity correction above that. Needs n >= 5 after dropping zero
/// differences.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y);

}  // namespace esoseg::metrics
