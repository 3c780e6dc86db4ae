// Intensity priors learned from reference segmentations: a univariate
// Gaussian mixture over esophageal HU values and adjacent-voxel gradient
// statistics.
#pragma once

#include "esoseg/volume.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace esoseg::priors {

struct GMMModel {
  Eigen::VectorXd weights;
  Eigen::VectorXd means;
  Eigen::VectorXd variances;

  long components() const { return weights.size(); }
  double pdf(double x) const;
  double log_likelihood(std::span<const double> samples) const;
  void validate() const;
};

struct GMMFitOptions {
  int components = 2;
  std::uint64_t seed = 1;
  double tol = 1e-8;  // relative log-likelihood improvement
  int max_iters = 500;
  double variance_floor = 1.0;
};

struct GMMFitReport {
  std::vector<double> log_likelihood;  // after initialisation, then after each EM iteration
  int iterations = 0;
};

/// EM with k-means++ seeding. Needs at least 10 samples per component.
GMMModel fit_gmm(std::span<const double> samples, const GMMFitOptions& opts, GMMFitReport* report = nullptr);

/// pdf(HU) / modal pdf, floored at 1e-12 and capped at 1. The mode is
/// searched on a 1-HU grid spanning every component's +-5 sigma plus the
/// component means.
Volume3D gmm_prior_map(const Volume3D& ct, const GMMModel& gmm);
double gmm_modal_pdf(const GMMModel& gmm);

struct GradientStats {
  double mu_delta = 0.0;
  double sigma_delta = 1.0;
  double mean_eso_hu = 0.0;
};

enum class PairEnumeration {
  AxisPositive,  // each 6-neighbour pair once, HU(i + e) - HU(i)
  BothWays,      // each ordered pair, both signs
};

struct LabeledVolume {
  const Volume3D* ct;
  const Volume3D* mask;
};

/// Differences over 6-neighbour pairs with both voxels inside the mask;
/// population mean and std (std floored at 1 HU) plus the mean mask HU.
GradientStats fit_gradient_stats(std::span<const LabeledVolume> data,
                                 PairEnumeration pairs = PairEnumeration::AxisPositive);

/// HU values of every mask voxel, in case order.
std::vector<double> masked_values(std::span<const LabeledVolume> data);

struct PriorModel {
  GMMModel gmm;
  GradientStats stats;
};

/// Versioned text file, 9 significant digits.
void write_prior_model(const PriorModel& m, const std::filesystem::path& path);
PriorModel read_prior_model(const std::filesystem::path& path);

}  // namespace esoseg::priors
