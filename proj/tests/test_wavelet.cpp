#include <cmath>

#include "doctest.h"
#include "fddm/rng.hpp"
#include "fddm/wavelet.hpp"

using namespace fddm;

namespace {

Grid2D random_grid(int h, int w, SeededRng& rng, double scale = 1.0) {
  Grid2D g(h, w);
  for (double& v : g.values) v += scale * rng.normal();
  return g;
}

double max_abs_diff(const Grid2D& a, const Grid2D& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

// Independent oracle: separable 1D orthonormal Haar (1/sqrt(2) taps), rows
// then columns, instead of the production 2x2 block formulas.
SubbandSet separable_dwt2(const Grid2D& x) {
  const int h = x.height, w = x.width;
  const double r = 1.0 / std::sqrt(2.0);
  Grid2D rows(h, w);  // left half smooth, right half detail
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w / 2; ++j) {
      rows.at(i, j) = r * (x.at(i, 2 * j) + x.at(i, 2 * j + 1));
      rows.at(i, w / 2 + j) = r * (x.at(i, 2 * j) - x.at(i, 2 * j + 1));
    }
  SubbandSet out{Grid2D(h / 2, w / 2), Grid2D(h / 2, w / 2), Grid2D(h / 2, w / 2), Grid2D(h / 2, w / 2)};
  for (int i = 0; i < h / 2; ++i)
    for (int j = 0; j < w / 2; ++j) {
      out.ll.at(i, j) = r * (rows.at(2 * i, j) + rows.at(2 * i + 1, j));
      out.lh.at(i, j) = r * (rows.at(2 * i, j) - rows.at(2 * i + 1, j));
      out.hl.at(i, j) = r * (rows.at(2 * i, w / 2 + j) + rows.at(2 * i + 1, w / 2 + j));
      out.hh.at(i, j) = r * (rows.at(2 * i, w / 2 + j) - rows.at(2 * i + 1, w / 2 + j));
    }
  return out;
}

double total_energy(const SubbandSet& s) {
  return squared_norm(s.ll) + squared_norm(s.lh) + squared_norm(s.hl) + squared_norm(s.hh);
}

}  // namespace

TEST_CASE("dwt2: constant 2x2 block concentrates everything in ll") {
  Grid2D ones(2, 2, 1.0);
  SubbandSet s = dwt2(ones);
  CHECK(s.ll.at(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(s.lh.at(0, 0) == 0.0);
  CHECK(s.hl.at(0, 0) == 0.0);
  CHECK(s.hh.at(0, 0) == 0.0);
}

TEST_CASE("dwt2: hand-derived 2x2 block values") {
  Grid2D x(2, 2);
  x.at(0, 0) = 1.0;
  x.at(0, 1) = 2.0;
  x.at(1, 0) = 3.0;
  x.at(1, 1) = 4.0;
  SubbandSet s = dwt2(x);
  CHECK(s.ll.at(0, 0) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(s.hl.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(s.lh.at(0, 0) == doctest::Approx(-2.0).epsilon(1e-15));
  CHECK(s.hh.at(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("dwt2: 4x4 image yields four 2x2 subbands") {
  SeededRng rng(11);
  SubbandSet s = dwt2(random_grid(4, 4, rng));
  for (const Grid2D* band : {&s.ll, &s.lh, &s.hl, &s.hh}) {
    CHECK(band->height == 2);
    CHECK(band->width == 2);
  }
}

TEST_CASE("dwt2 matches an independent separable-filter implementation") {
  SeededRng rng(12);
  for (auto [h, w] : {std::pair{6, 8}, std::pair{32, 32}, std::pair{2, 10}}) {
    Grid2D x = random_grid(h, w, rng, 3.0);
    SubbandSet got = dwt2(x);
    SubbandSet want = separable_dwt2(x);
    CHECK(max_abs_diff(got.ll, want.ll) < 1e-12);
    CHECK(max_abs_diff(got.lh, want.lh) < 1e-12);
    CHECK(max_abs_diff(got.hl, want.hl) < 1e-12);
    CHECK(max_abs_diff(got.hh, want.hh) < 1e-12);
  }
}

TEST_CASE("iwt2: pure ll band reconstructs a constant block") {
  SubbandSet s{Grid2D(1, 1, 2.0), Grid2D(1, 1), Grid2D(1, 1), Grid2D(1, 1)};
  Grid2D x = iwt2(s);
  for (double v : x.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("round-trip iwt2(dwt2(x)) = x within 1e-10") {
  SeededRng rng(13);
  for (auto [h, w] : {std::pair{64, 64}, std::pair{2, 2}, std::pair{10, 4}, std::pair{160, 160}}) {
    Grid2D x = random_grid(h, w, rng, 50.0);  // Gy-scale values
    CHECK(max_abs_diff(iwt2(dwt2(x)), x) <= 1e-10);
  }
}

TEST_CASE("round-trip dwt2(iwt2(b)) = b for random subbands") {
  SeededRng rng(14);
  SubbandSet b{random_grid(8, 8, rng), random_grid(8, 8, rng), random_grid(8, 8, rng),
               random_grid(8, 8, rng)};
  SubbandSet back = dwt2(iwt2(b));
  CHECK(max_abs_diff(back.ll, b.ll) <= 1e-10);
  CHECK(max_abs_diff(back.lh, b.lh) <= 1e-10);
  CHECK(max_abs_diff(back.hl, b.hl) <= 1e-10);
  CHECK(max_abs_diff(back.hh, b.hh) <= 1e-10);
}

TEST_CASE("energy conservation (orthonormality) within 1e-8 relative") {
  SeededRng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    Grid2D x = random_grid(64, 64, rng, 10.0);
    const double ex = squared_norm(x);
    const double eb = total_energy(dwt2(x));
    CHECK(std::abs(ex - eb) <= 1e-8 * ex);
  }
}

TEST_CASE("linearity of the analysis transform") {
  SeededRng rng(16);
  Grid2D x = random_grid(16, 16, rng), y = random_grid(16, 16, rng);
  const double a = 2.5, b = -0.75;
  Grid2D combo(16, 16);
  for (std::size_t i = 0; i < combo.values.size(); ++i) combo.values[i] = a * x.values[i] + b * y.values[i];
  SubbandSet sc = dwt2(combo), sx = dwt2(x), sy = dwt2(y);
  auto check_band = [&](const Grid2D& c, const Grid2D& gx, const Grid2D& gy) {
    for (std::size_t i = 0; i < c.values.size(); ++i)
      CHECK(c.values[i] == doctest::Approx(a * gx.values[i] + b * gy.values[i]).epsilon(1e-12));
  };
  check_band(sc.ll, sx.ll, sy.ll);
  check_band(sc.lh, sx.lh, sy.lh);
  check_band(sc.hl, sx.hl, sy.hl);
  check_band(sc.hh, sx.hh, sy.hh);
}

TEST_CASE("constant image kills every detail band") {
  Grid2D x(12, 20, 3.25);
  SubbandSet s = dwt2(x);
  for (const Grid2D* band : {&s.lh, &s.hl, &s.hh})
    for (double v : band->values) CHECK(v == 0.0);
  for (double v : s.ll.values) CHECK(v == doctest::Approx(6.5).epsilon(1e-15));
}

TEST_CASE("odd dimensions are rejected") {
  CHECK_THROWS_AS(dwt2(Grid2D(3, 4)), DimensionError);
  CHECK_THROWS_AS(dwt2(Grid2D(4, 7)), DimensionError);
  SubbandSet bad{Grid2D(2, 2), Grid2D(2, 2), Grid2D(2, 3), Grid2D(2, 2)};
  CHECK_THROWS_AS(iwt2(bad), DimensionError);
}
