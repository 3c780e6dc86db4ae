#include "esoseg/acm.hpp"
#include "testing.hpp"

#include <doctest.h>

#include <Eigen/QR>

#include <cmath>
#include <random>

using namespace esoseg;
using namespace esoseg::acm;

namespace {

// Gaussian tube whose axis drifts sinusoidally along z.
Volume3D wavy_tube(const Dims3& d, double cx, double cy, double amp, double sigma) {
  Volume3D v(d, {1, 1, 1}, VolumeKind::Probability);
  for (long z = 0; z < d[2]; ++z) {
    const double ax = cx + amp * std::sin(0.3 * z), ay = cy + 0.5 * amp * std::cos(0.2 * z);
    for (long y = 0; y < d[1]; ++y)
      for (long x = 0; x < d[0]; ++x) {
        const double r2 = (x - ax) * (x - ax) + (y - ay) * (y - ay);
        v(x, y, z) = std::exp(-0.5 * r2 / (sigma * sigma));
      }
  }
  return v;
}

// Brute-force point-to-polyline distance in mm.
double polyline_distance(const Centerline& c, const Spacing3& s, double x, double y, double z) {
  double best = 1e300;
  auto pt = [&](long k) { return Eigen::Vector3d(c.points(k, 0) * s[0], c.points(k, 1) * s[1], k * s[2]); };
  const Eigen::Vector3d p(x * s[0], y * s[1], z * s[2]);
  for (long k = 0; k < c.slices(); ++k) {
    const Eigen::Vector3d a = pt(k);
    if (k + 1 == c.slices()) {
      best = std::min(best, (p - a).norm());
      continue;
    }
    const Eigen::Vector3d b = pt(k + 1);
    const double t = std::clamp((p - a).dot(b - a) / (b - a).squaredNorm(), 0.0, 1.0);
    best = std::min(best, (p - (a + t * (b - a))).norm());
  }
  return best;
}

Centerline straight(long nz, double x, double y) {
  Centerline c;
  c.points.resize(nz, 2);
  c.points.col(0).setConstant(x);
  c.points.col(1).setConstant(y);
  return c;
}

}  // namespace

TEST_CASE("init_centerline") {
  SUBCASE("single bright voxel per slice") {
    Volume3D p({10, 12, 4}, {1, 1, 1}, VolumeKind::Probability);
    for (long z = 0; z < 4; ++z) p(z + 2, 3 + z, z) = 0.8;
    const auto c = init_centerline(p);
    REQUIRE(c.slices() == 4);
    for (long z = 0; z < 4; ++z) {
      CHECK(c.points(z, 0) == doctest::Approx(z + 2));
      CHECK(c.points(z, 1) == doctest::Approx(3 + z));
    }
  }
  SUBCASE("all-zero map falls back to the in-plane centre") {
    const Volume3D p({9, 12, 3}, {1, 1, 1}, VolumeKind::Probability);
    const auto c = init_centerline(p);
    CHECK((c.points.col(0).array() == 4.0).all());
    CHECK((c.points.col(1).array() == 5.5).all());
  }
  SUBCASE("two equal voxels give their midpoint") {
    Volume3D p({8, 8, 1}, {1, 1, 1}, VolumeKind::Probability);
    p(2, 5, 0) = 1.0;
    p(6, 5, 0) = 1.0;
    const auto c = init_centerline(p);
    CHECK(c.points(0, 0) == doctest::Approx(4.0));
    CHECK(c.points(0, 1) == doctest::Approx(5.0));
  }
  SUBCASE("empty slices copy the nearest initialised slice") {
    Volume3D p({8, 8, 5}, {1, 1, 1}, VolumeKind::Probability);
    p(1, 1, 1) = 1.0;
    p(6, 6, 4) = 1.0;
    const auto c = init_centerline(p);
    CHECK(c.points(0, 0) == doctest::Approx(1.0));
    CHECK(c.points(2, 0) == doctest::Approx(1.0));
    CHECK(c.points(3, 0) == doctest::Approx(6.0));
  }
}

TEST_CASE("ACMConfig validation") {
  ACMConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.step = 0.0;
  CHECK_THROWS_AS(cfg.validate(), DataError);
  cfg = ACMConfig{};
  cfg.max_iters = 0;
  CHECK_THROWS_AS(cfg.validate(), DataError);
  cfg = ACMConfig{};
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), DataError);
}

TEST_CASE("fit_centerline") {
  SUBCASE("straight tube: every point within a voxel of the axis") {
    const auto p = testing::tube_probability({40, 40, 30}, 17.3, 22.6, 3.0);
    FitReport rep;
    const auto c = fit_centerline(p, ACMConfig{}, &rep);
    REQUIRE(c.slices() == 30);
    for (long z = 0; z < 30; ++z) {
      CHECK(std::abs(c.points(z, 0) - 17.3) <= 1.0);
      CHECK(std::abs(c.points(z, 1) - 22.6) <= 1.0);
    }
  }
  SUBCASE("alpha 0 started on strict maxima does not move") {
    Volume3D p({20, 20, 6}, {1, 1, 1}, VolumeKind::Probability);
    Centerline init;
    init.points.resize(6, 2);
    for (long z = 0; z < 6; ++z) {
      const long x = 6 + z, y = 12 - z;
      for (long yy = 0; yy < 20; ++yy)
        for (long xx = 0; xx < 20; ++xx)
          p(xx, yy, z) = std::exp(-0.5 * ((xx - x) * (xx - x) + (yy - y) * (yy - y)) / 4.0);
      init.points.row(z) << static_cast<double>(x), static_cast<double>(y);
    }
    ACMConfig cfg;
    cfg.alpha = 0.0;
    const auto c = fit_centerline(p, cfg, init);
    CHECK((c.points - init.points).cwiseAbs().maxCoeff() <= 1e-6);
  }
  SUBCASE("huge alpha gives a straight line") {
    const auto p = wavy_tube({40, 40, 36}, 20, 20, 5.0, 2.5);
    ACMConfig cfg;
    cfg.alpha = 1e6;
    const auto c = fit_centerline(p, cfg);
    Eigen::MatrixX2d design(c.slices(), 2);
    for (long z = 0; z < c.slices(); ++z) design.row(z) << 1.0, static_cast<double>(z);
    double worst = 0.0;
    for (int axis = 0; axis < 2; ++axis) {
      const Eigen::Vector2d coef = design.colPivHouseholderQr().solve(c.points.col(axis));
      worst = std::max(worst, (design * coef - c.points.col(axis)).cwiseAbs().maxCoeff());
    }
    CHECK(worst < 0.1);
  }
  SUBCASE("energy never increases and points stay in bounds") {
    for (double alpha : {0.0, 0.5, 5.0}) {
      const auto p = wavy_tube({30, 34, 24}, 14, 15, 4.0, 2.0);
      ACMConfig cfg;
      cfg.alpha = alpha;
      FitReport rep;
      const auto c = fit_centerline(p, cfg, &rep);
      REQUIRE(rep.energies.size() >= 1);
      for (std::size_t i = 1; i < rep.energies.size(); ++i) CHECK(rep.energies[i] <= rep.energies[i - 1] + 1e-12);
      CHECK(rep.iterations <= cfg.max_iters);
      CHECK((c.points.col(0).array() >= 0.0).all());
      CHECK((c.points.col(0).array() <= 29.0).all());
      CHECK((c.points.col(1).array() >= 0.0).all());
      CHECK((c.points.col(1).array() <= 33.0).all());
      const AttractionField f(p);
      CHECK(rep.energies.back() == doctest::Approx(energy(f, c, alpha)).epsilon(1e-9));
    }
  }
  SUBCASE("in-plane translation moves the result by the same amount") {
    const auto a = wavy_tube({40, 40, 20}, 16, 17, 3.0, 2.0);
    const auto b = wavy_tube({40, 40, 20}, 21, 14, 3.0, 2.0);
    const auto ca = fit_centerline(a, ACMConfig{});
    const auto cb = fit_centerline(b, ACMConfig{});
    CHECK((cb.points.col(0).array() - ca.points.col(0).array() - 5.0).abs().maxCoeff() <= 0.01);
    CHECK((cb.points.col(1).array() - ca.points.col(1).array() + 3.0).abs().maxCoeff() <= 0.01);
  }
  SUBCASE("initial centerline of the wrong length") {
    const auto p = testing::tube_probability({10, 10, 5}, 5, 5, 2.0);
    CHECK_THROWS_AS(fit_centerline(p, ACMConfig{}, straight(4, 5, 5)), DataError);
  }
}

TEST_CASE("AttractionField") {
  Volume3D p({8, 8, 5}, {1, 1, 1}, VolumeKind::Probability);
  p(3, 3, 1) = 1.0;
  const AttractionField f(p);
  CHECK(f.smoothed()(3, 3, 1) == doctest::Approx(1.0 / 27.0));
  CHECK(f.smoothed()(2, 2, 2) == doctest::Approx(1.0 / 27.0));
  CHECK(f.smoothed()(0, 0, 1) == 0.0);
  CHECK(f.smoothed()(3, 3, 3) == 0.0);
  CHECK(f.value(3.0, 3.0, 1) == doctest::Approx(1.0 / 27.0));
  CHECK(f.value(4.5, 3.0, 1) == doctest::Approx(0.5 / 27.0));
  const Volume3D c({8, 8, 2}, {1, 1, 1}, VolumeKind::Probability, 0.7);
  const AttractionField fc(c);
  CHECK(fc.value(3.3, 5.1, 0) == doctest::Approx(0.7));
  CHECK(fc.gradient(3.3, 5.1, 1).norm() <= 1e-12);
}

TEST_CASE("centerline_distance_map") {
  SUBCASE("values at 0, 12.5 and 25 mm") {
    const Volume3D g({80, 30, 5}, {0.5, 1.0, 2.0}, VolumeKind::HU);
    const auto m = centerline_distance_map(straight(5, 10, 10), g);
    CHECK(m.kind == VolumeKind::Probability);
    CHECK(m(10, 10, 2) == 1.0);
    CHECK(m(35, 10, 2) == doctest::Approx(0.5));
    CHECK(m(10, 10 + 12, 0) == doctest::Approx(1.0 - 12.0 / 25.0));
    CHECK(m(79, 10, 4) == 0.0);
    const Volume3D g2({40, 40, 3}, {1, 1, 1}, VolumeKind::HU);
    CHECK(centerline_distance_map(straight(3, 5, 5), g2)(30, 5, 1) == 0.0);
  }
  SUBCASE("agrees with a brute-force polyline distance") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(4.0, 16.0);
    Centerline c;
    c.points.resize(8, 2);
    for (long z = 0; z < 8; ++z) c.points.row(z) << u(rng), u(rng);
    const Spacing3 s{0.8, 0.7, 2.5};
    const Volume3D g({20, 20, 8}, s, VolumeKind::HU);
    const auto m = centerline_distance_map(c, g, 10.0);
    double worst = 0.0;
    for (long z = 0; z < 8; ++z)
      for (long y = 0; y < 20; ++y)
        for (long x = 0; x < 20; ++x)
          worst = std::max(worst, std::abs(m(x, y, z) - std::max(0.0, 1.0 - polyline_distance(c, s, x, y, z) / 10.0)));
    CHECK(worst <= 1e-9);
  }
  SUBCASE("range and Lipschitz bound") {
    Centerline c;
    c.points.resize(12, 2);
    for (long z = 0; z < 12; ++z) c.points.row(z) << 15 + 4 * std::sin(0.5 * z), 12 + 3 * std::cos(0.4 * z);
    const Spacing3 s{0.9, 0.9, 3.0};
    const Volume3D g({32, 30, 12}, s, VolumeKind::HU);
    const auto m = centerline_distance_map(c, g);
    CHECK((m.data >= 0.0).all());
    CHECK((m.data <= 1.0).all());
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<long> ix(0, 31), iy(0, 29), iz(0, 11);
    for (int k = 0; k < 2000; ++k) {
      const long x0 = ix(rng), y0 = iy(rng), z0 = iz(rng), x1 = ix(rng), y1 = iy(rng), z1 = iz(rng);
      const double mm = std::sqrt(std::pow((x0 - x1) * s[0], 2) + std::pow((y0 - y1) * s[1], 2) +
                                  std::pow((z0 - z1) * s[2], 2));
      CHECK(std::abs(m(x0, y0, z0) - m(x1, y1, z1)) <= mm / 25.0 + 1e-12);
    }
  }
  SUBCASE("slice count mismatch") {
    const Volume3D g({10, 10, 4}, {1, 1, 1}, VolumeKind::HU);
    CHECK_THROWS_AS(centerline_distance_map(straight(3, 1, 1), g), DataError);
  }
}

TEST_CASE("centerline text export") {
  testing::TempDir dir;
  Centerline c;
  c.points.resize(3, 2);
  c.points << 1.25, 2.5, 3.123456, 4.0, 5.0, 6.75;
  write_centerline(c, dir / "c.txt");
  CHECK(testing::slurp(dir / "c.txt") == "0 1.250000 2.500000\n1 3.123456 4.000000\n2 5.000000 6.750000\n");
  const auto back = read_centerline(dir / "c.txt");
  CHECK(back.points == c.points);
  std::ofstream(dir / "bad.txt") << "0 1.0\n";
  CHECK_THROWS_AS(read_centerline(dir / "bad.txt"), DataError);
  CHECK_THROWS_AS(read_centerline(dir / "missing.txt"), DataError);
}
