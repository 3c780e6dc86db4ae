#include "esoseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace esoseg::metrics {

namespace {

void check_pair(const Volume3D& a, const Volume3D& b) {
  if (a.dims != b.dims) throw DataError("masks have different dimensions");
  if (a.spacing != b.spacing) throw DataError("masks have different voxel spacing");
}

long count(const Volume3D& m) { return (m.data != 0.0).count(); }

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line.
void distance_transform_1d(std::vector<double>& f, double spacing, std::vector<long>& v, std::vector<double>& zs) {
  const long n = static_cast<long>(f.size());
  v.assign(n, 0);
  zs.assign(n + 1, 0.0);
  long k = -1;
  for (long q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double fq = f[q] + (q * spacing) * (q * spacing);
    while (k >= 0) {
      const long r = v[k];
      const double s = (fq - (f[r] + (r * spacing) * (r * spacing))) / (2.0 * spacing * (q - r) * spacing);
      if (s <= zs[k]) --k;
      else {
        ++k;
        v[k] = q;
        zs[k] = s;
        zs[k + 1] = kInf;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      zs[0] = -kInf;
      zs[1] = kInf;
    }
  }
  if (k < 0) return;  // no finite samples on this line

  std::vector<double> out(n);
  long j = 0;
  for (long p = 0; p < n; ++p) {
    while (zs[j + 1] < static_cast<double>(p)) ++j;
    const double d = static_cast<double>(p - v[j]) * spacing;
    out[p] = d * d + f[v[j]];
  }
  f.swap(out);
}

}  // namespace

double dice(const Volume3D& a, const Volume3D& b) {
  check_pair(a, b);
  const long na = count(a), nb = count(b);
  if (na + nb == 0) throw DataError("dice is undefined for two empty masks");
  const long both = ((a.data != 0.0) && (b.data != 0.0)).count();
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

std::vector<Index3> surface_voxels(const Volume3D& m) {
  std::vector<Index3> out;
  auto inside = [&](long x, long y, long z) { return m.contains(x, y, z) && m(x, y, z) != 0.0; };
  for (long z = 0; z < m.nz(); ++z)
    for (long y = 0; y < m.ny(); ++y)
      for (long x = 0; x < m.nx(); ++x) {
        if (m(x, y, z) == 0.0) continue;
        if (!inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) || !inside(x, y + 1, z) ||
            !inside(x, y, z - 1) || !inside(x, y, z + 1))
          out.push_back({x, y, z});
      }
  if (out.empty()) throw DataError("surface of an empty mask is undefined");
  return out;
}

Eigen::ArrayXd squared_distance_transform(const Volume3D& set) {
  Eigen::ArrayXd d = (set.data != 0.0).select(Eigen::ArrayXd::Zero(set.size()), kInf);
  std::vector<double> line;
  std::vector<long> v;
  std::vector<double> zs;
  const long stride[3] = {1, set.nx(), set.nx() * set.ny()};
  for (int a = 0; a < 3; ++a) {
    const long n = set.dims[a];
    line.resize(n);
    const int b = (a + 1) % 3, c = (a + 2) % 3;
    for (long j = 0; j < set.dims[c]; ++j)
      for (long i = 0; i < set.dims[b]; ++i) {
        const long base = i * stride[b] + j * stride[c];
        for (long t = 0; t < n; ++t) line[t] = d[base + t * stride[a]];
        distance_transform_1d(line, set.spacing[a], v, zs);
        for (long t = 0; t < n; ++t) d[base + t * stride[a]] = line[t];
      }
  }
  return d;
}

SurfaceDistances surface_distances(const Volume3D& a, const Volume3D& b) {
  check_pair(a, b);
  const auto sa = surface_voxels(a);
  const auto sb = surface_voxels(b);
  auto as_mask = [&](const std::vector<Index3>& s) {
    Volume3D m = a.like(VolumeKind::Mask);
    for (const auto& p : s) m(p[0], p[1], p[2]) = 1.0;
    return m;
  };
  const Eigen::ArrayXd da = squared_distance_transform(as_mask(sa));
  const Eigen::ArrayXd db = squared_distance_transform(as_mask(sb));
  SurfaceDistances out;
  out.a_to_b.reserve(sa.size());
  out.b_to_a.reserve(sb.size());
  for (const auto& p : sa) out.a_to_b.push_back(std::sqrt(db[a.linear(p[0], p[1], p[2])]));
  for (const auto& q : sb) out.b_to_a.push_back(std::sqrt(da[a.linear(q[0], q[1], q[2])]));
  return out;
}

double assd(const Volume3D& a, const Volume3D& b) {
  const auto d = surface_distances(a, b);
  const double sum = std::accumulate(d.a_to_b.begin(), d.a_to_b.end(), 0.0) +
                     std::accumulate(d.b_to_a.begin(), d.b_to_a.end(), 0.0);
  const double hd = std::max(*std::max_element(d.a_to_b.begin(), d.a_to_b.end()),
                             *std::max_element(d.b_to_a.begin(), d.b_to_a.end()));
  // rounding in the sum can push a mean of equal distances one ulp past their max
  return std::min(sum / static_cast<double>(d.a_to_b.size() + d.b_to_a.size()), hd);
}

double hausdorff(const Volume3D& a, const Volume3D& b) {
  const auto d = surface_distances(a, b);
  return std::max(*std::max_element(d.a_to_b.begin(), d.a_to_b.end()),
                  *std::max_element(d.b_to_a.begin(), d.b_to_a.end()));
}

std::pair<Volume3D, Volume3D> crop_masks(const Volume3D& a, const Volume3D& b, long z_min, long z_max) {
  check_pair(a, b);
  if (z_min < 0 || z_min > z_max || z_max >= a.nz())
    throw DataError("crop range [" + std::to_string(z_min) + ", " + std::to_string(z_max) + "] is outside the volume");
  Volume3D ca = a, cb = b;
  const long plane = a.nx() * a.ny();
  for (long z = 0; z < a.nz(); ++z) {
    if (z >= z_min && z <= z_max) continue;
    ca.data.segment(z * plane, plane).setZero();
    cb.data.segment(z * plane, plane).setZero();
  }
  return {std::move(ca), std::move(cb)};
}

CaseMetrics evaluate_case(const std::string& id, const Volume3D& prediction, const Volume3D& reference) {
  CaseMetrics m;
  m.id = id;
  m.dsc = dice(prediction, reference);
  const auto d = surface_distances(prediction, reference);
  const double sum = std::accumulate(d.a_to_b.begin(), d.a_to_b.end(), 0.0) +
                     std::accumulate(d.b_to_a.begin(), d.b_to_a.end(), 0.0);
  m.assd_mm = sum / static_cast<double>(d.a_to_b.size() + d.b_to_a.size());
  m.hd_mm = std::max(*std::max_element(d.a_to_b.begin(), d.a_to_b.end()),
                     *std::max_element(d.b_to_a.begin(), d.b_to_a.end()));
  return m;
}

Aggregate aggregate(std::span<const double> values) {
  Aggregate g;
  if (values.empty()) return g;
  const double n = static_cast<double>(values.size());
  g.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - g.mean) * (v - g.mean);
    g.std = std::sqrt(ss / (n - 1.0));
  }
  return g;
}

MetricReport make_report(std::vector<CaseMetrics> cases) {
  MetricReport r;
  r.cases = std::move(cases);
  std::vector<double> d, a, h;
  for (const auto& c : r.cases) {
    d.push_back(c.dsc);
    a.push_back(c.assd_mm);
    h.push_back(c.hd_mm);
  }
  r.dsc = aggregate(d);
  r.assd_mm = aggregate(a);
  r.hd_mm = aggregate(h);
  return r;
}

std::string format_report(const MetricReport& r) {
  std::ostringstream out;
  out << std::setprecision(6) << std::fixed;
  out << "id,dsc,assd_mm,hd_mm\n";
  for (const auto& c : r.cases) out << c.id << ',' << c.dsc << ',' << c.assd_mm << ',' << c.hd_mm << '\n';
  out << "mean," << r.dsc.mean << ',' << r.assd_mm.mean << ',' << r.hd_mm.mean << '\n';
  out << "std," << r.dsc.std << ',' << r.assd_mm.std << ',' << r.hd_mm.std << '\n';
  return out.str();
}

void write_report(const MetricReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << format_report(report);
  if (!out) throw DataError("failed writing report: " + path.string());
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DataError("Wilcoxon test needs paired samples of equal length");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] - y[i] != 0.0) d.push_back(x[i] - y[i]);
  const long n = static_cast<long>(d.size());
  if (n < 5) throw DataError("Wilcoxon test needs at least 5 non-zero differences, got " + std::to_string(n));

  std::vector<long> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](long a, long b) { return std::abs(d[a]) < std::abs(d[b]); });
  std::vector<double> rank(n);
  double tie_term = 0.0;
  for (long i = 0; i < n;) {
    long j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (long k = i; k <= j; ++k) rank[order[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }

  WilcoxonResult res;
  res.n = n;
  for (long i = 0; i < n; ++i)
    if (d[i] > 0) res.w_plus += rank[i];

  if (n <= 25) {
    // Null distribution of 2*W+ over all 2^n sign patterns; doubled ranks are integers.
    std::vector<long> twice(n);
    long total = 0;
    for (long i = 0; i < n; ++i) {
      twice[i] = std::lround(2.0 * rank[i]);
      total += twice[i];
    }
    std::vector<double> ways(total + 1, 0.0);
    ways[0] = 1.0;
    for (long r : twice)
      for (long s = total; s >= r; --s) ways[s] += ways[s - r];
    const long observed = std::lround(2.0 * res.w_plus);
    double lower = 0.0, upper = 0.0;
    for (long s = 0; s <= total; ++s) {
      if (s <= observed) lower += ways[s];
      if (s >= observed) upper += ways[s];
    }
    const double all = std::ldexp(1.0, static_cast<int>(n));
    res.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
    res.exact = true;
  } else {
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double dev = std::max(std::abs(res.w_plus - mean) - 0.5, 0.0);
    res.p_value = var > 0.0 ? std::min(1.0, std::erfc(dev / std::sqrt(var) / std::sqrt(2.0))) : 1.0;
    res.exact = false;
  }
  return res;
}

}  // namespace esoseg::metrics
