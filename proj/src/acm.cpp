#include "esoseg/acm.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace esoseg::acm {

void ACMConfig::validate() const {
  if (!(alpha >= 0.0)) throw DataError("ACM alpha must be non-negative");
  if (!(step > 0.0)) throw DataError("ACM step must be positive");
  if (max_iters < 1) throw DataError("ACM max_iters must be at least 1");
  if (!(tol >= 0.0)) throw DataError("ACM tolerance must be non-negative");
}

Centerline init_centerline(const Volume3D& probmap) {
  const long nz = probmap.nz();
  Centerline c;
  c.points.resize(nz, 2);
  std::vector<bool> valid(nz, false);
  for (long z = 0; z < nz; ++z) {
    double mass = 0.0, sx = 0.0, sy = 0.0;
    for (long y = 0; y < probmap.ny(); ++y)
      for (long x = 0; x < probmap.nx(); ++x) {
        const double p = probmap(x, y, z);
        mass += p;
        sx += p * x;
        sy += p * y;
      }
    if (mass >= 1e-6) {
      c.points.row(z) << sx / mass, sy / mass;
      valid[z] = true;
    }
  }

  const Eigen::RowVector2d center(0.5 * (probmap.nx() - 1), 0.5 * (probmap.ny() - 1));
  for (long z = 0; z < nz; ++z) {
    if (valid[z]) continue;
    long best = -1;
    for (long d = 1; d < nz && best < 0; ++d) {
      if (z - d >= 0 && valid[z - d]) best = z - d;
      else if (z + d < nz && valid[z + d]) best = z + d;
    }
    c.points.row(z) = best < 0 ? center : Eigen::RowVector2d(c.points.row(best));
  }
  return c;
}

AttractionField::AttractionField(const Volume3D& probmap) : smoothed_(probmap.like(VolumeKind::Probability)) {
  for (long z = 0; z < probmap.nz(); ++z)
    for (long y = 0; y < probmap.ny(); ++y)
      for (long x = 0; x < probmap.nx(); ++x) {
        double s = 0.0;
        for (long dz = -1; dz <= 1; ++dz)
          for (long dy = -1; dy <= 1; ++dy)
            for (long dx = -1; dx <= 1; ++dx)
              s += probmap(mirror_index(x + dx, probmap.nx()), mirror_index(y + dy, probmap.ny()),
                           mirror_index(z + dz, probmap.nz()));
        smoothed_(x, y, z) = s / 27.0;
      }
}

namespace {

struct Cell {
  long x0, y0, x1, y1;
  double fx, fy;
};

Cell locate(const Volume3D& v, double x, double y) {
  auto axis = [](double t, long n, long& i0, long& i1, double& f) {
    t = std::clamp(t, 0.0, static_cast<double>(n - 1));
    i0 = std::min(static_cast<long>(std::floor(t)), std::max(n - 2, 0L));
    i1 = std::min(i0 + 1, n - 1);
    f = t - static_cast<double>(i0);
  };
  Cell c{};
  axis(x, v.nx(), c.x0, c.x1, c.fx);
  axis(y, v.ny(), c.y0, c.y1, c.fy);
  return c;
}

}  // namespace

double AttractionField::value(double x, double y, long z) const {
  const Cell c = locate(smoothed_, x, y);
  const auto& p = smoothed_;
  return (1 - c.fx) * (1 - c.fy) * p(c.x0, c.y0, z) + c.fx * (1 - c.fy) * p(c.x1, c.y0, z) +
         (1 - c.fx) * c.fy * p(c.x0, c.y1, z) + c.fx * c.fy * p(c.x1, c.y1, z);
}

Eigen::Vector2d AttractionField::gradient(double x, double y, long z) const {
  const Cell c = locate(smoothed_, x, y);
  const auto& p = smoothed_;
  const double p00 = p(c.x0, c.y0, z), p10 = p(c.x1, c.y0, z), p01 = p(c.x0, c.y1, z), p11 = p(c.x1, c.y1, z);
  return {(1 - c.fy) * (p10 - p00) + c.fy * (p11 - p01), (1 - c.fx) * (p01 - p00) + c.fx * (p11 - p10)};
}

double energy(const AttractionField& field, const Centerline& c, double alpha) {
  double e = 0.0;
  for (long z = 0; z < c.slices(); ++z) e -= field.value(c.points(z, 0), c.points(z, 1), z);
  for (long z = 0; z + 1 < c.slices(); ++z) e += alpha * (c.points.row(z + 1) - c.points.row(z)).squaredNorm();
  return e;
}

Centerline fit_centerline(const Volume3D& probmap, const ACMConfig& cfg, FitReport* report) {
  return fit_centerline(probmap, cfg, init_centerline(probmap), report);
}

Centerline fit_centerline(const Volume3D& probmap, const ACMConfig& cfg, Centerline c, FitReport* report) {
  cfg.validate();
  const long nz = probmap.nz();
  if (c.slices() != nz) throw DataError("initial centerline does not have one point per slice");

  const AttractionField field(probmap);
  Eigen::MatrixXd laplacian = Eigen::MatrixXd::Zero(nz, nz);
  for (long z = 0; z + 1 < nz; ++z) {
    laplacian(z, z) += 1;
    laplacian(z + 1, z + 1) += 1;
    laplacian(z, z + 1) -= 1;
    laplacian(z + 1, z) -= 1;
  }
  const double xmax = static_cast<double>(probmap.nx() - 1);
  const double ymax = static_cast<double>(probmap.ny() - 1);

  FitReport local;
  FitReport& rep = report ? *report : local;
  rep = FitReport{};
  double e = energy(field, c, cfg.alpha);
  rep.energies.push_back(e);

  double tau = cfg.step;
  double factored_tau = -1.0;
  Eigen::LLT<Eigen::MatrixXd> system;
  while (rep.iterations < cfg.max_iters) {
    ++rep.iterations;
    if (tau != factored_tau) {
      system.compute(Eigen::MatrixXd::Identity(nz, nz) + 2.0 * tau * cfg.alpha * laplacian);
      factored_tau = tau;
    }
    Eigen::MatrixX2d rhs = c.points;
    for (long z = 0; z < nz; ++z) rhs.row(z) += tau * field.gradient(c.points(z, 0), c.points(z, 1), z).transpose();
    Centerline next{system.solve(rhs)};
    next.points.col(0) = next.points.col(0).cwiseMax(0.0).cwiseMin(xmax);
    next.points.col(1) = next.points.col(1).cwiseMax(0.0).cwiseMin(ymax);

    const double e_next = energy(field, next, cfg.alpha);
    if (e_next > e) {
      tau *= 0.5;
      if (tau < 1e-12) {
        rep.converged = true;
        break;
      }
      continue;
    }
    const double moved = (next.points - c.points).cwiseAbs().maxCoeff();
    c = std::move(next);
    e = e_next;
    rep.energies.push_back(e);
    if (moved < cfg.tol) {
      rep.converged = true;
      break;
    }
  }
  return c;
}

Volume3D centerline_distance_map(const Centerline& c, const Volume3D& geometry, double falloff_mm) {
  if (c.slices() != geometry.nz()) throw DataError("centerline slice count does not match the volume");
  if (!(falloff_mm > 0.0)) throw DataError("distance falloff must be positive");
  const auto& s = geometry.spacing;
  const long nz = c.slices();
  std::vector<Eigen::Vector3d> verts(nz);
  for (long z = 0; z < nz; ++z) verts[z] = {c.points(z, 0) * s[0], c.points(z, 1) * s[1], static_cast<double>(z) * s[2]};

  Volume3D out = geometry.like(VolumeKind::Probability);
  for (long z = 0; z < geometry.nz(); ++z)
    for (long y = 0; y < geometry.ny(); ++y)
      for (long x = 0; x < geometry.nx(); ++x) {
        const Eigen::Vector3d p(x * s[0], y * s[1], z * s[2]);
        double best = (p - verts[0]).squaredNorm();
        for (long k = 0; k + 1 < nz; ++k) {
          const Eigen::Vector3d d = verts[k + 1] - verts[k];
          const double len2 = d.squaredNorm();
          const double t = len2 > 0.0 ? std::clamp((p - verts[k]).dot(d) / len2, 0.0, 1.0) : 0.0;
          best = std::min(best, (p - verts[k] - t * d).squaredNorm());
        }
        out(x, y, z) = std::max(0.0, 1.0 - std::sqrt(best) / falloff_mm);
      }
  return out;
}

void write_centerline(const Centerline& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << std::fixed << std::setprecision(6);
  for (long z = 0; z < c.slices(); ++z) out << z << ' ' << c.points(z, 0) << ' ' << c.points(z, 1) << '\n';
  if (!out) throw DataError("failed writing centerline: " + path.string());
}

Centerline read_centerline(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open centerline: " + path.string());
  std::vector<Eigen::RowVector2d> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    long z;
    double x, y;
    if (!(ls >> z >> x >> y) || z != static_cast<long>(rows.size()))
      throw DataError("malformed centerline line: " + line);
    rows.emplace_back(x, y);
  }
  Centerline c;
  c.points.resize(static_cast<long>(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) c.points.row(static_cast<long>(i)) = rows[i];
  return c;
}

}  // namespace esoseg::acm
