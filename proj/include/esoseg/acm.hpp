// Slice-wise active contour centerline and its linear distance map.
#pragma once

#include "esoseg/volume.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <vector>

namespace esoseg::acm {

/// One in-plane (x, y) voxel coordinate per axial slice; row z is slice z.
struct Centerline {
  Eigen::MatrixX2d points;

  long slices() const { return points.rows(); }
};

struct ACMConfig {
  double alpha = 0.5;  // smoothness weight, probability per voxel^2
  double step = 0.5;
  int max_iters = 500;
  double tol = 1e-3;  // stop when no point moves further (voxels)

  void validate() const;
};

/// Probability-weighted in-plane centroid per slice. Slices with total mass
/// below 1e-6 copy the nearest initialised slice, or the in-plane centre.
Centerline init_centerline(const Volume3D& probmap);

/// 3^3 box-smoothed probability map sampled bilinearly within each slice.
class AttractionField {
 public:
  explicit AttractionField(const Volume3D& probmap);

  double value(double x, double y, long z) const;
  Eigen::Vector2d gradient(double x, double y, long z) const;
  const Volume3D& smoothed() const { return smoothed_; }

 private:
  Volume3D smoothed_;
};

/// E = sum_z -P(x_z, y_z) + alpha * sum_z |p_{z+1} - p_z|^2
double energy(const AttractionField& field, const Centerline& c, double alpha);

struct FitReport {
  std::vector<double> energies;  // initial energy, then one entry per accepted step
  int iterations = 0;
  bool converged = false;
};

/// Semi-implicit descent: (I + 2*tau*alpha*A) p' = p + tau * grad P(p), with
/// A the path-graph Laplacian. Steps that raise the energy are rejected and
/// tau is halved. Points stay inside the in-plane bounds.
Centerline fit_centerline(const Volume3D& probmap, const ACMConfig& cfg, FitReport* report = nullptr);
Centerline fit_centerline(const Volume3D& probmap, const ACMConfig& cfg, Centerline initial,
                          FitReport* report = nullptr);

/// max(0, 1 - d / falloff_mm) with d the Euclidean distance in mm from each
/// voxel to the polyline through the centerline points.
Volume3D centerline_distance_map(const Centerline& c, const Volume3D& geometry, double falloff_mm = 25.0);

/// Text export, one `z x y` line per slice with 6 decimals.
void write_centerline(const Centerline& c, const std::filesystem::path& path);
Centerline read_centerline(const std::filesystem::path& path);

}  // namespace esoseg::acm
