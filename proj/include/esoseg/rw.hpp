// Seed-free random walker with label-node priors on the 6-connected lattice.
#pragma once

#include "esoseg/priors.hpp"
#include "esoseg/volume.hpp"

#include <Eigen/Core>

#include <array>

namespace esoseg::rw {

inline constexpr double kEdgeFloor = 1e-6;

/// weights[a][i] couples voxel i with its +axis-a neighbour; entries on the
/// last slab along an axis have no neighbour and are zero.
struct EdgeWeights {
  Dims3 dims{1, 1, 1};
  std::array<Eigen::ArrayXd, 3> weights;

  /// Lattice of the given shape with every edge weight set to `w`.
  static EdgeWeights constant(const Dims3& dims, double w);
  bool has_edge(int axis, long x, long y, long z) const;
  long voxels() const { return dims[0] * dims[1] * dims[2]; }
};

/// Gaussian of the +axis intensity difference under (mu_delta, sigma_delta),
/// min-max rescaled over the volume to [0,1], then floored at kEdgeFloor.
/// All weights are 1 when every raw weight is equal.
EdgeWeights build_edge_weights(const Volume3D& ct, const priors::GradientStats& stats);

struct PriorField {
  Volume3D w_eso;
  Volume3D w_non;
};

/// w_eso = p_cnn * p_acm * p_ct and w_non = (1 - p_cnn)(1 - p_acm)(1 - p_ct).
PriorField build_prior_weights(const Volume3D& cnn, const Volume3D& acm, const Volume3D& ctprior);

struct RWConfig {
  double gamma = 1.0;
  double cg_tol = 1e-8;
  int cg_max_iters = 10000;
  double threshold = 0.5;

  void validate() const;
};

enum class Label { Esophagus, NonEsophagus };

struct RWReport {
  Eigen::VectorXd raw;  // solution before clamping
  int iterations = 0;
  double relative_residual = 0.0;
};

/// Solves (L + gamma*Lambda) x = gamma*b with Lambda = diag(w_eso + w_non)
/// and b the prior of the requested label, by Jacobi-preconditioned CG.
/// Returns x clamped to [0,1]. Throws NumericalError when the system is
/// singular or CG does not reach cg_tol.
Volume3D solve_rw(const EdgeWeights& ew, const PriorField& pf, const RWConfig& cfg, RWReport* report = nullptr,
                  Label label = Label::Esophagus);

/// y = (L + gamma*Lambda) x, matrix-free.
Eigen::VectorXd apply_system(const EdgeWeights& ew, const Eigen::VectorXd& lambda, double gamma,
                             const Eigen::VectorXd& x);

/// Mask of voxels with x >= threshold.
Volume3D extract_label(const Volume3D& x, double threshold = 0.5);

}  // namespace esoseg::rw
