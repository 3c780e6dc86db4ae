#include "esoseg/rw.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace esoseg::rw {

namespace {

std::array<long, 3> strides(const Dims3& d) { return {1, d[0], d[0] * d[1]}; }

}  // namespace

EdgeWeights EdgeWeights::constant(const Dims3& dims, double w) {
  EdgeWeights ew;
  ew.dims = dims;
  const long n = dims[0] * dims[1] * dims[2];
  for (int a = 0; a < 3; ++a) {
    ew.weights[a] = Eigen::ArrayXd::Zero(n);
    for (long z = 0; z < dims[2]; ++z)
      for (long y = 0; y < dims[1]; ++y)
        for (long x = 0; x < dims[0]; ++x)
          if (ew.has_edge(a, x, y, z)) ew.weights[a][x + dims[0] * (y + dims[1] * z)] = w;
  }
  return ew;
}

bool EdgeWeights::has_edge(int axis, long x, long y, long z) const {
  const long c[3] = {x, y, z};
  return c[axis] + 1 < dims[axis];
}

EdgeWeights build_edge_weights(const Volume3D& ct, const priors::GradientStats& stats) {
  if (ct.size() < 2) throw DataError("edge weights need at least two voxels");
  if (!(stats.sigma_delta > 0.0)) throw DataError("sigma_delta must be positive");
  const double norm = 1.0 / (stats.sigma_delta * std::sqrt(2.0 * std::numbers::pi));
  const double inv2s2 = 1.0 / (2.0 * stats.sigma_delta * stats.sigma_delta);
  const auto st = strides(ct.dims);

  EdgeWeights ew;
  ew.dims = ct.dims;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (int a = 0; a < 3; ++a) {
    ew.weights[a] = Eigen::ArrayXd::Zero(ct.size());
    for (long z = 0; z < ct.nz(); ++z)
      for (long y = 0; y < ct.ny(); ++y)
        for (long x = 0; x < ct.nx(); ++x) {
          if (!ew.has_edge(a, x, y, z)) continue;
          const long i = ct.linear(x, y, z);
          const double d = ct.data[i + st[a]] - ct.data[i] - stats.mu_delta;
          const double w = norm * std::exp(-d * d * inv2s2);
          ew.weights[a][i] = w;
          lo = std::min(lo, w);
          hi = std::max(hi, w);
        }
  }

  for (int a = 0; a < 3; ++a)
    for (long z = 0; z < ct.nz(); ++z)
      for (long y = 0; y < ct.ny(); ++y)
        for (long x = 0; x < ct.nx(); ++x) {
          if (!ew.has_edge(a, x, y, z)) continue;
          double& w = ew.weights[a][ct.linear(x, y, z)];
          w = hi > lo ? std::max((w - lo) / (hi - lo), kEdgeFloor) : 1.0;
        }
  return ew;
}

PriorField build_prior_weights(const Volume3D& cnn, const Volume3D& acm, const Volume3D& ctprior) {
  if (cnn.dims != acm.dims || cnn.dims != ctprior.dims) throw DataError("prior maps have different dimensions");
  for (const Volume3D* v : {&cnn, &acm, &ctprior})
    if (v->data.minCoeff() < 0.0 || v->data.maxCoeff() > 1.0) throw DataError("prior maps must lie in [0,1]");
  PriorField pf{cnn.like(VolumeKind::Probability), cnn.like(VolumeKind::Probability)};
  pf.w_eso.data = cnn.data * acm.data * ctprior.data;
  pf.w_non.data = (1.0 - cnn.data) * (1.0 - acm.data) * (1.0 - ctprior.data);
  return pf;
}

void RWConfig::validate() const {
  if (!(gamma >= 0.0)) throw DataError("RW gamma must be non-negative");
  if (!(cg_tol > 0.0) || cg_max_iters < 1) throw DataError("invalid CG settings");
}

Eigen::VectorXd apply_system(const EdgeWeights& ew, const Eigen::VectorXd& lambda, double gamma,
                             const Eigen::VectorXd& x) {
  const auto st = strides(ew.dims);
  Eigen::VectorXd y = gamma * lambda.cwiseProduct(x);
  for (int a = 0; a < 3; ++a) {
    const Eigen::ArrayXd& w = ew.weights[a];
    const long n = ew.voxels() - st[a];
    for (long i = 0; i < n; ++i) {
      const double wi = w[i];
      if (wi == 0.0) continue;
      const double f = wi * (x[i] - x[i + st[a]]);
      y[i] += f;
      y[i + st[a]] -= f;
    }
  }
  return y;
}

Volume3D solve_rw(const EdgeWeights& ew, const PriorField& pf, const RWConfig& cfg, RWReport* report, Label label) {
  cfg.validate();
  if (pf.w_eso.dims != ew.dims || pf.w_non.dims != ew.dims) throw DataError("edge weights and priors differ in shape");
  const long n = ew.voxels();
  const Eigen::VectorXd lambda = (pf.w_eso.data + pf.w_non.data).matrix();
  const Eigen::VectorXd b = cfg.gamma * (label == Label::Esophagus ? pf.w_eso.data : pf.w_non.data).matrix();

  Eigen::VectorXd diag = cfg.gamma * lambda;
  const auto st = strides(ew.dims);
  for (int a = 0; a < 3; ++a)
    for (long i = 0; i + st[a] < n; ++i) {
      diag[i] += ew.weights[a][i];
      diag[i + st[a]] += ew.weights[a][i];
    }
  if (!(cfg.gamma * lambda.maxCoeff() > 0.0) || !(diag.minCoeff() > 0.0))
    throw NumericalError("random walker system is singular: no voxel is attached to a label node");

  RWReport local;
  RWReport& rep = report ? *report : local;
  rep = RWReport{};

  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    rep.raw = x;
    Volume3D out = pf.w_eso.like(VolumeKind::Probability);
    return out;
  }

  const Eigen::VectorXd inv_diag = diag.cwiseInverse();
  Eigen::VectorXd r = b;
  Eigen::VectorXd z = inv_diag.cwiseProduct(r);
  Eigen::VectorXd p = z;
  double rz = r.dot(z);
  double rel = 1.0;
  int it = 0;
  while (it < cfg.cg_max_iters) {
    const Eigen::VectorXd ap = apply_system(ew, lambda, cfg.gamma, p);
    const double alpha = rz / p.dot(ap);
    x += alpha * p;
    r -= alpha * ap;
    ++it;
    rel = r.norm() / bnorm;
    if (rel < cfg.cg_tol) break;
    z = inv_diag.cwiseProduct(r);
    const double rz_next = r.dot(z);
    p = z + (rz_next / rz) * p;
    rz = rz_next;
  }
  rep.iterations = it;
  rep.relative_residual = rel;
  if (!(rel < cfg.cg_tol))
    throw NumericalError("conjugate gradient did not converge: relative residual " + std::to_string(rel) + " after " +
                         std::to_string(it) + " iterations");
  rep.raw = x;

  Volume3D out = pf.w_eso.like(VolumeKind::Probability);
  out.data = x.array().cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

Volume3D extract_label(const Volume3D& x, double threshold) {
  Volume3D m = x.like(VolumeKind::Mask);
  m.data = (x.data >= threshold).cast<double>();
  return m;
}

}  // namespace esoseg::rw
