#include "esoseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace esoseg::phantom {

namespace fs = std::filesystem;

void PhantomConfig::validate() const {
  if (dims[0] < 32 || dims[1] < 32 || dims[2] < 1) throw DataError("phantom needs at least 32x32 voxels in-plane");
  for (double s : spacing)
    if (!(s > 0.0)) throw DataError("phantom spacing must be positive");
  if (!(radius_min_mm > 0.0) || radius_max_mm < radius_min_mm) throw DataError("invalid phantom radius range");
  if (wobble < 0.0 || wobble_cycles < 0.0 || center_jitter < 0.0) throw DataError("invalid centerline wobble");
  if (tissue_hu_std < 0.0 || background_hu_std < 0.0 || noise_std < 0.0) throw DataError("negative HU spread");
  if (air_pocket_probability < 0.0 || air_pocket_probability > 1.0) throw DataError("invalid air pocket probability");
  if (bright_blobs < 0 || dark_blobs < 0) throw DataError("negative distractor count");
  const double reach = center_jitter + wobble + radius_max_mm / std::min(spacing[0], spacing[1]) + 2.0;
  if (2.0 * reach >= static_cast<double>(std::min(dims[0], dims[1])))
    throw DataError("tube excursion does not fit inside the phantom");
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Sum of three random sinusoids with total amplitude `amp`.
Eigen::VectorXd smooth_curve(Rng& rng, long n, double amp, double max_cycles) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  if (amp <= 0.0) return out;
  double w[3], total = 0.0;
  for (double& v : w) total += (v = uniform(rng, 0.1, 1.0));
  const double scale = amp * uniform(rng, 0.5, 1.0) / total;
  for (double h : w) {
    const double f = uniform(rng, std::min(0.3, max_cycles), std::max(0.3, max_cycles));
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    for (long z = 0; z < n; ++z)
      out[z] += scale * h * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(z) / static_cast<double>(n) + phase);
  }
  return out;
}

void gaussian_blur_axis(Eigen::ArrayXd& data, const Dims3& d, int axis, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) ksum += (k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k) v /= ksum;

  const long stride[3] = {1, d[0], d[0] * d[1]};
  const long n = d[axis];
  const int b = (axis + 1) % 3, c = (axis + 2) % 3;
  std::vector<double> line(n);
  for (long j = 0; j < d[c]; ++j)
    for (long i = 0; i < d[b]; ++i) {
      const long base = i * stride[b] + j * stride[c];
      for (long t = 0; t < n; ++t) line[t] = data[base + t * stride[axis]];
      for (long t = 0; t < n; ++t) {
        double s = 0.0;
        for (int o = -radius; o <= radius; ++o) s += k[o + radius] * line[mirror_index(t + o, n)];
        data[base + t * stride[axis]] = s;
      }
    }
}

}  // namespace

Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const long nx = cfg.dims[0], ny = cfg.dims[1], nz = cfg.dims[2];
  const auto& sp = cfg.spacing;

  Phantom ph;
  ph.ct = Volume3D(cfg.dims, cfg.spacing, VolumeKind::HU);
  ph.mask = Volume3D(cfg.dims, cfg.spacing, VolumeKind::Mask);

  // Tube geometry.
  const double cx0 = 0.5 * (nx - 1) + uniform(rng, -cfg.center_jitter, cfg.center_jitter);
  const double cy0 = 0.5 * (ny - 1) + uniform(rng, -cfg.center_jitter, cfg.center_jitter);
  const Eigen::VectorXd wx = smooth_curve(rng, nz, cfg.wobble, cfg.wobble_cycles);
  const Eigen::VectorXd wy = smooth_curve(rng, nz, cfg.wobble, cfg.wobble_cycles);
  ph.centerline.resize(nz, 2);
  ph.centerline.col(0) = wx.array() + cx0;
  ph.centerline.col(1) = wy.array() + cy0;
  const double rf = uniform(rng, 0.3, 1.0), rphase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  ph.radius_mm.resize(nz);
  for (long z = 0; z < nz; ++z) {
    const double u = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * rf * z / static_cast<double>(nz) + rphase);
    ph.radius_mm[z] = cfg.radius_min_mm + (cfg.radius_max_mm - cfg.radius_min_mm) * u;
  }
  auto tube_dist_mm = [&](double x, double y, long z) {
    return std::hypot((x - ph.centerline(z, 0)) * sp[0], (y - ph.centerline(z, 1)) * sp[1]);
  };

  // Smooth background texture plus voxel noise.
  Eigen::ArrayXd field(ph.ct.size());
  for (long i = 0; i < field.size(); ++i) field[i] = normal(rng);
  gaussian_blur_axis(field, cfg.dims, 0, cfg.background_smoothness);
  gaussian_blur_axis(field, cfg.dims, 1, cfg.background_smoothness * sp[0] / sp[1]);
  gaussian_blur_axis(field, cfg.dims, 2, cfg.background_smoothness * sp[0] / sp[2]);
  const double fmean = field.mean();
  const double fstd = std::sqrt((field - fmean).square().mean());
  for (long i = 0; i < field.size(); ++i)
    ph.ct.data[i] = cfg.background_hu_mean + cfg.background_hu_std * (field[i] - fmean) / (fstd > 0 ? fstd : 1.0) +
                    cfg.noise_std * normal(rng);

  // Distractor tube: tissue-like, thinner, covering part of the slices, never touching the true tube.
  if (cfg.distractor_tube) {
    const double r2 = uniform(rng, cfg.radius_min_mm, 0.5 * (cfg.radius_min_mm + cfg.radius_max_mm));
    const long span = std::max<long>(1, static_cast<long>(nz * uniform(rng, 0.3, 0.6)));
    const long z0 = std::uniform_int_distribution<long>(0, nz - span)(rng);
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      const double dist = uniform(rng, 14.0, 24.0);
      const double ox = dist * std::cos(ang) / sp[0], oy = dist * std::sin(ang) / sp[1];
      bool ok = true;
      for (long z = z0; z < z0 + span && ok; ++z) {
        const double x = ph.centerline(z, 0) + ox, y = ph.centerline(z, 1) + oy;
        const double m = r2 / std::min(sp[0], sp[1]) + 1.0;
        ok = x - m >= 0 && y - m >= 0 && x + m <= nx - 1 && y + m <= ny - 1 &&
             tube_dist_mm(x, y, z) >= ph.radius_mm[z] + r2 + 6.0;
      }
      if (!ok) continue;
      for (long z = z0; z < z0 + span; ++z)
        for (long y = 0; y < ny; ++y)
          for (long x = 0; x < nx; ++x)
            if (std::hypot((x - ph.centerline(z, 0) - ox) * sp[0], (y - ph.centerline(z, 1) - oy) * sp[1]) <= r2)
              ph.ct(x, y, z) = cfg.tissue_hu_mean + cfg.tissue_hu_std * normal(rng);
      break;
    }
  }

  // Bright (contrast/bone-like) and dark (air-like) ellipsoidal blobs away from the tube.
  auto place_blob = [&](double hu_mean, double hu_std, double r_lo, double r_hi) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double r = uniform(rng, r_lo, r_hi);
      const double bx = uniform(rng, 0, nx - 1), by = uniform(rng, 0, ny - 1), bz = uniform(rng, 0, nz - 1);
      const double rz_vox = r / sp[2] * sp[0];
      bool ok = true;
      for (long z = std::max(0L, static_cast<long>(bz - rz_vox)); z <= std::min(nz - 1, static_cast<long>(bz + rz_vox)) && ok; ++z)
        ok = tube_dist_mm(bx, by, z) >= ph.radius_mm[z] + r * sp[0] + 4.0;
      if (!ok) continue;
      for (long z = 0; z < nz; ++z)
        for (long y = 0; y < ny; ++y)
          for (long x = 0; x < nx; ++x) {
            const double ex = (x - bx) * sp[0], ey = (y - by) * sp[1], ez = (z - bz) * sp[2];
            if (ex * ex + ey * ey + ez * ez <= r * r * sp[0] * sp[0]) ph.ct(x, y, z) = hu_mean + hu_std * normal(rng);
          }
      return;
    }
  };
  for (int b = 0; b < cfg.bright_blobs; ++b) place_blob(200.0, 25.0, 3.0, 6.0);
  for (int b = 0; b < cfg.dark_blobs; ++b) place_blob(-700.0, 40.0, 4.0, 8.0);

  // The tube itself, then air pockets inside it.
  for (long z = 0; z < nz; ++z)
    for (long y = 0; y < ny; ++y)
      for (long x = 0; x < nx; ++x)
        if (tube_dist_mm(x, y, z) <= ph.radius_mm[z]) {
          ph.mask(x, y, z) = 1.0;
          ph.ct(x, y, z) = cfg.tissue_hu_mean + cfg.tissue_hu_std * normal(rng);
        }
  std::bernoulli_distribution pocket(cfg.air_pocket_probability);
  for (long z = 0; z < nz; ++z) {
    if (!pocket(rng)) continue;
    const double r_lumen = ph.radius_mm[z];
    const double rp = uniform(rng, 1.0, std::max(1.0, 0.45 * r_lumen));
    const double off = uniform(rng, 0.0, std::max(0.0, r_lumen - rp - 0.5));
    const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double px = ph.centerline(z, 0) + off * std::cos(ang) / sp[0];
    const double py = ph.centerline(z, 1) + off * std::sin(ang) / sp[1];
    for (long y = 0; y < ny; ++y)
      for (long x = 0; x < nx; ++x)
        if (ph.mask(x, y, z) != 0.0 && std::hypot((x - px) * sp[0], (y - py) * sp[1]) <= rp)
          ph.ct(x, y, z) = cfg.air_hu + 30.0 * normal(rng);
  }

  ph.ct.data = ph.ct.data.round().cwiseMax(-1024.0).cwiseMin(3071.0);
  return ph;
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string a, b, extra;
    if (!(ls >> a >> b) || (ls >> extra)) throw DataError("malformed manifest line: " + line);
    e.ct = a;
    e.mask = b;
    if (e.ct.is_relative()) e.ct = path.parent_path() / e.ct;
    if (e.mask.is_relative()) e.mask = path.parent_path() / e.mask;
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  for (const auto& e : entries) out << e.ct.generic_string() << ' ' << e.mask.generic_string() << '\n';
  if (!out) throw DataError("failed writing manifest: " + path.string());
}

fs::path generate_dataset(const PhantomConfig& cfg, int n, std::uint64_t seed, const fs::path& out_dir) {
  if (n < 1) throw DataError("dataset size must be at least 1");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create directory " + out_dir.string() + ": " + ec.message());
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < n; ++i) {
    PhantomConfig c = cfg;
    c.seed = seed + static_cast<std::uint64_t>(i);
    const Phantom ph = generate_phantom(c);
    std::ostringstream stem;
    stem << "case_" << std::setw(3) << std::setfill('0') << i << "_seed" << c.seed;
    const fs::path ct = stem.str() + "_ct.mhd", mask = stem.str() + "_mask.mhd";
    write_volume(ph.ct, out_dir / ct);
    write_volume(ph.mask, out_dir / mask);
    entries.push_back({ct, mask});
  }
  const fs::path manifest = out_dir / "manifest.txt";
  write_manifest(entries, manifest);
  return manifest;
}

}  // namespace esoseg::phantom
