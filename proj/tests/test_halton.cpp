#include "condfem/halton.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace condfem;

TEST_CASE("unscrambled radical inverse matches closed form") {
  // Base 2: 1/2, 1/4, 3/4. Base 3: 1/3, 2/3, 1/9.
  CHECK(radical_inverse(1, 2) == 0.5);
  CHECK(radical_inverse(2, 2) == 0.25);
  CHECK(radical_inverse(3, 2) == 0.75);
  CHECK(radical_inverse(1, 3) == Catch::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(radical_inverse(2, 3) == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(radical_inverse(3, 3) == Catch::Approx(1.0 / 9.0).epsilon(1e-15));
}

TEST_CASE("first 100 points in bases 2,3,5 match the closed form") {
  ScrambledHalton plain(3, 0, /*scramble=*/false);
  int bases[3] = {2, 3, 5};
  for (std::uint64_t i = 0; i < 100; ++i) {
    Vec p = plain.point(i);
    for (int d = 0; d < 3; ++d) CHECK(p[d] == radical_inverse(i + 1, bases[d]));
  }
}

TEST_CASE("deterministic for fixed seed, coordinates in (0,1)") {
  ScrambledHalton a(4, 42), b(4, 42), c(4, 7);
  bool differs = false;
  for (std::uint64_t i = 0; i < 200; ++i) {
    Vec pa = a.point(i);
    CHECK((pa - b.point(i)).norm() == 0.0);
    if ((pa - c.point(i)).norm() > 0) differs = true;
    for (int d = 0; d < 4; ++d) {
      CHECK(pa[d] > 0.0);
      CHECK(pa[d] < 1.0);
    }
  }
  CHECK(differs);
}

namespace {

// Coordinate-wise star-discrepancy proxy: max over a coarse grid of
// |empirical box mass - volume| for anchored boxes [0,u).
double discrepancy_proxy(const Mat& pts) {
  const int grid = 16;
  double worst = 0.0;
  for (int gx = 1; gx <= grid; ++gx) {
    for (int gy = 1; gy <= grid; ++gy) {
      double ux = static_cast<double>(gx) / grid, uy = static_cast<double>(gy) / grid;
      int count = 0;
      for (Eigen::Index i = 0; i < pts.rows(); ++i)
        if (pts(i, 0) < ux && pts(i, 1) < uy) ++count;
      worst = std::max(worst, std::abs(static_cast<double>(count) / pts.rows() - ux * uy));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("scrambled Halton beats uniform random on discrepancy") {
  const int n = 6500;
  Mat halton = ScrambledHalton(2, 123).points(n);
  double d_halton = discrepancy_proxy(halton);

  double d_uniform_sum = 0.0;
  for (int run = 0; run < 20; ++run) {
    std::mt19937_64 rng(1000 + run);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    Mat pts(n, 2);
    for (int i = 0; i < n; ++i) {
      pts(i, 0) = uni(rng);
      pts(i, 1) = uni(rng);
    }
    d_uniform_sum += discrepancy_proxy(pts);
  }
  CHECK(d_halton < d_uniform_sum / 20.0);
}
