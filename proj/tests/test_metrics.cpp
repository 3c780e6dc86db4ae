#include "esoseg/metrics.hpp"
#include "oracles.hpp"
#include "testing.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace esoseg;
using namespace esoseg::metrics;

namespace {

Volume3D cube(const Dims3& d, const Index3& lo, long side, Spacing3 s = {1, 1, 1}) {
  Volume3D m(d, s, VolumeKind::Mask);
  for (long z = lo[2]; z < lo[2] + side; ++z)
    for (long y = lo[1]; y < lo[1] + side; ++y)
      for (long x = lo[0]; x < lo[0] + side; ++x) m(x, y, z) = 1.0;
  return m;
}

Volume3D shifted(const Volume3D& m, const Index3& by, const Dims3& d) {
  Volume3D out(d, m.spacing, VolumeKind::Mask);
  for (long z = 0; z < m.nz(); ++z)
    for (long y = 0; y < m.ny(); ++y)
      for (long x = 0; x < m.nx(); ++x) out(x + by[0], y + by[1], z + by[2]) = m(x, y, z);
  return out;
}

Volume3D nonempty_random(const Dims3& d, double fill, std::mt19937_64& rng, Spacing3 s) {
  auto m = oracle::random_mask(d, fill, rng, s);
  if (m.data.sum() == 0.0) m.data[0] = 1.0;
  return m;
}

}  // namespace

TEST_CASE("dice") {
  const Dims3 d{6, 6, 6};
  const auto a = cube(d, {0, 0, 0}, 2);
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, cube(d, {3, 3, 3}, 2)) == 0.0);
  Volume3D x({10, 1, 1}, {1, 1, 1}, VolumeKind::Mask), y = x;
  x.data.head(6).setOnes();
  y.data.segment(3, 4).setOnes();
  CHECK(dice(x, y) == doctest::Approx(0.6));
  CHECK_THROWS_AS(dice(x.like(VolumeKind::Mask), y.like(VolumeKind::Mask)), DataError);
  CHECK_THROWS_AS(dice(x, Volume3D({5, 2, 1}, {1, 1, 1}, VolumeKind::Mask)), DataError);
}

TEST_CASE("surface_voxels") {
  const Dims3 d{7, 7, 7};
  Volume3D one(d, {1, 1, 1}, VolumeKind::Mask);
  one(3, 3, 3) = 1.0;
  CHECK(surface_voxels(one) == std::vector<Index3>{{3, 3, 3}});
  const auto c = cube(d, {2, 2, 2}, 3);
  const auto s = surface_voxels(c);
  CHECK(s.size() == 26);
  CHECK(std::find(s.begin(), s.end(), Index3{3, 3, 3}) == s.end());
  Volume3D slab(d, {1, 1, 1}, VolumeKind::Mask);
  for (long y = 0; y < 7; ++y)
    for (long x = 0; x < 7; ++x) slab(x, y, 4) = 1.0;
  CHECK(surface_voxels(slab).size() == 49);
  const Volume3D full(d, {1, 1, 1}, VolumeKind::Mask, 1.0);
  CHECK(surface_voxels(full).size() == oracle::surface(full).size());
  CHECK_THROWS_AS(surface_voxels(one.like(VolumeKind::Mask)), DataError);
}

TEST_CASE("squared_distance_transform") {
  std::mt19937_64 rng(3);
  const Spacing3 sp{0.7, 1.3, 2.5};
  const auto set = nonempty_random({7, 6, 5}, 0.05, rng, sp);
  const auto dt = squared_distance_transform(set);
  std::vector<Index3> pts;
  for (long z = 0; z < 5; ++z)
    for (long y = 0; y < 6; ++y)
      for (long x = 0; x < 7; ++x)
        if (set(x, y, z) != 0.0) pts.push_back({x, y, z});
  for (long z = 0; z < 5; ++z)
    for (long y = 0; y < 6; ++y)
      for (long x = 0; x < 7; ++x) {
        const double want = oracle::min_distance({x, y, z}, pts, sp);
        CHECK(std::abs(std::sqrt(dt[set.linear(x, y, z)]) - want) <= 1e-9);
      }
  CHECK(std::isinf(squared_distance_transform(set.like(VolumeKind::Mask))[0]));
}

TEST_CASE("assd and hausdorff") {
  SUBCASE("identical masks") {
    const auto a = cube({8, 8, 8}, {1, 2, 3}, 4);
    CHECK(assd(a, a) == 0.0);
    CHECK(hausdorff(a, a) == 0.0);
  }
  SUBCASE("single voxels five apart") {
    Volume3D a({10, 3, 3}, {1, 1, 1}, VolumeKind::Mask), b = a;
    a(1, 1, 1) = 1.0;
    b(6, 1, 1) = 1.0;
    CHECK(assd(a, b) == doctest::Approx(5.0));
    CHECK(hausdorff(a, b) == doctest::Approx(5.0));
  }
  SUBCASE("cube against the same cube shifted by two") {
    const Dims3 d{9, 9, 9};
    const auto a = cube(d, {2, 2, 2}, 3), b = cube(d, {4, 2, 2}, 3);
    CHECK(std::abs(assd(a, b) - oracle::assd(a, b)) <= 1e-9);
    CHECK(std::abs(hausdorff(a, b) - oracle::hausdorff(a, b)) <= 1e-9);
    CHECK(hausdorff(a, b) == doctest::Approx(2.0));
  }
  SUBCASE("random masks match brute force, are symmetric and translation invariant") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<long> side(1, 8);
    std::uniform_real_distribution<double> sp(0.5, 3.0);
    for (int trial = 0; trial < 40; ++trial) {
      const Dims3 d{side(rng), side(rng), side(rng)};
      const Spacing3 s{sp(rng), sp(rng), sp(rng)};
      const double fill = std::uniform_real_distribution<double>(0.05, 0.6)(rng);
      const auto a = nonempty_random(d, fill, rng, s), b = nonempty_random(d, fill, rng, s);
      const double as = assd(a, b), hd = hausdorff(a, b);
      CHECK(dice(a, b) == oracle::dice(a, b));
      CHECK(std::abs(as - oracle::assd(a, b)) <= 1e-9);
      CHECK(std::abs(hd - oracle::hausdorff(a, b)) <= 1e-9);
      CHECK(dice(a, b) == dice(b, a));
      CHECK(std::abs(as - assd(b, a)) <= 1e-12);
      CHECK(hd == hausdorff(b, a));
      CHECK(hd >= as);
      const Dims3 big{d[0] + 3, d[1] + 2, d[2] + 1};
      const auto ta = shifted(a, {2, 1, 1}, big), tb = shifted(b, {2, 1, 1}, big);
      CHECK(dice(ta, tb) == dice(a, b));
      CHECK(std::abs(assd(ta, tb) - as) <= 1e-9);
      CHECK(std::abs(hausdorff(ta, tb) - hd) <= 1e-9);
    }
  }
  SUBCASE("empty mask") {
    const auto a = cube({5, 5, 5}, {1, 1, 1}, 2);
    CHECK_THROWS_AS(assd(a, a.like(VolumeKind::Mask)), DataError);
    CHECK_THROWS_AS(hausdorff(a.like(VolumeKind::Mask), a), DataError);
  }
}

TEST_CASE("crop_masks") {
  const Dims3 d{8, 8, 10};
  Volume3D a(d, {1, 1, 1}, VolumeKind::Mask), b = a;
  for (long z = 0; z < 10; ++z) {
    a(3, 3, z) = 1.0;
    a(4, 3, z) = 1.0;
    b(3, 3, z) = 1.0;
    if (z >= 5) b(3, 4, z) = 1.0;
  }
  SUBCASE("full range leaves masks unchanged") {
    const auto [ca, cb] = crop_masks(a, b, 0, 9);
    CHECK(ca == a);
    CHECK(cb == b);
  }
  SUBCASE("range without foreground") {
    Volume3D c = a;
    for (long z = 0; z < 3; ++z) c(3, 3, z) = c(4, 3, z) = 0.0;
    const auto [ca, cb] = crop_masks(c, c, 0, 2);
    CHECK(ca.data.sum() == 0.0);
    CHECK_THROWS_AS(dice(ca, cb), DataError);
  }
  SUBCASE("half-range DSC equals a count on the kept slices") {
    const auto [ca, cb] = crop_masks(a, b, 0, 4);
    CHECK(dice(ca, cb) == doctest::Approx(2.0 * 5 / (10 + 5)));
    const auto [ua, ub] = crop_masks(a, b, 5, 9);
    CHECK(dice(ua, ub) == doctest::Approx(0.5));
    CHECK(ua.dims == d);
  }
  SUBCASE("invalid ranges") {
    CHECK_THROWS_AS(crop_masks(a, b, 4, 3), DataError);
    CHECK_THROWS_AS(crop_masks(a, b, -1, 3), DataError);
    CHECK_THROWS_AS(crop_masks(a, b, 0, 10), DataError);
  }
}

TEST_CASE("report") {
  std::vector<CaseMetrics> cases{{"a", 0.9, 1.0, 4.0}, {"b", 0.7, 3.0, 8.0}};
  const auto r = make_report(cases);
  CHECK(r.dsc.mean == doctest::Approx(0.8));
  CHECK(r.dsc.std == doctest::Approx(std::sqrt(0.02)));
  CHECK(r.hd_mm.mean == doctest::Approx(6.0));
  const auto text = format_report(r);
  CHECK(text.rfind("id,dsc,assd_mm,hd_mm\n", 0) == 0);
  CHECK(text.find("\na,") != std::string::npos);
  CHECK(text.find("\nmean,") != std::string::npos);
  CHECK(text.find("\nstd,") != std::string::npos);
  const double one = 2.5;
  CHECK(aggregate(std::span<const double>(&one, 1)).std == 0.0);
  testing::TempDir dir;
  write_report(r, dir / "r.csv");
  CHECK(testing::slurp(dir / "r.csv") == text);

  const auto self = evaluate_case("x", cube({6, 6, 6}, {1, 1, 1}, 3), cube({6, 6, 6}, {1, 1, 1}, 3));
  CHECK(self.dsc == 1.0);
  CHECK(self.assd_mm == 0.0);
  CHECK(self.hd_mm == 0.0);
}

TEST_CASE("wilcoxon_signed_rank") {
  SUBCASE("identical samples leave nothing to test") {
    const std::vector<double> x{1, 2, 3, 4, 5, 6};
    CHECK_THROWS_AS(wilcoxon_signed_rank(x, x), DataError);
  }
  SUBCASE("five positive differences") {
    const std::vector<double> x{1.1, 2.2, 3.3, 4.4, 5.5}, y{0, 0, 0, 0, 0};
    const auto r = wilcoxon_signed_rank(x, y);
    CHECK(r.n == 5);
    CHECK(r.w_plus == 15.0);
    CHECK(r.p_value == doctest::Approx(0.0625).epsilon(1e-12));
    CHECK(r.exact);
    CHECK(wilcoxon_signed_rank(y, x).p_value == doctest::Approx(r.p_value).epsilon(1e-15));
  }
  SUBCASE("exact p-values match full enumeration, ties included") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 40; ++trial) {
      const int n = std::uniform_int_distribution<int>(5, 14)(rng);
      std::vector<double> x(n), y(n), d(n);
      std::uniform_int_distribution<int> v(-6, 6);
      for (int i = 0; i < n; ++i) {
        x[i] = v(rng);
        y[i] = v(rng) * 0.5;
        d[i] = x[i] - y[i];
      }
      if (std::count(d.begin(), d.end(), 0.0) > n - 5) continue;
      const auto r = wilcoxon_signed_rank(x, y);
      CHECK(r.p_value == doctest::Approx(oracle::wilcoxon_enumerate(d)).epsilon(1e-12));
      CHECK(wilcoxon_signed_rank(y, x).p_value == doctest::Approx(r.p_value).epsilon(1e-12));
    }
  }
  SUBCASE("large samples use the normal approximation") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.3, 1.0);
    std::vector<double> x(40), y(40, 0.0);
    for (auto& v : x) v = n(rng);
    const auto r = wilcoxon_signed_rank(x, y);
    CHECK_FALSE(r.exact);
    CHECK(r.p_value > 0.0);
    CHECK(r.p_value <= 1.0);
  }
  SUBCASE("unequal lengths") {
    const std::vector<double> x{1, 2, 3, 4, 5}, y{1, 2, 3, 4};
    CHECK_THROWS_AS(wilcoxon_signed_rank(x, y), DataError);
  }
}
