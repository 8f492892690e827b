#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "scarlab/potential_field.hpp"

using namespace scarlab;

TEST(RadialPotential, ReferenceWellValue) {
  const auto V = RadialPotential::reference();
  EXPECT_DOUBLE_EQ(V.value(2.0), 16.0);
  EXPECT_DOUBLE_EQ(V.value(0.0), 0.0);
  for (double r = 0.1; r < 5.0; r += 0.1) EXPECT_GT(V.value(r + 0.05), V.value(r));
}

TEST(RadialPotential, DerivativesMatchFiniteDifferences) {
  for (const auto& V : {RadialPotential::reference(), RadialPotential::cosh_well(3.0),
                        RadialPotential::power_law(1.0, 2.0)}) {
    for (double r : {0.3, 1.0, 2.7}) {
      const double h = 1e-5;
      EXPECT_NEAR(V.d1(r), (V.value(r + h) - V.value(r - h)) / (2 * h), 1e-6 * std::max(1.0, V.d1(r)));
      EXPECT_NEAR(V.d2(r), (V.d1(r + h) - V.d1(r - h)) / (2 * h), 1e-6 * std::max(1.0, V.d2(r)));
    }
  }
}

TEST(RadialPotential, RejectsBadParameters) {
  EXPECT_THROW(RadialPotential::power_law(1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(RadialPotential::power_law(-1.0, 2.0), std::invalid_argument);
  EXPECT_THROW(RadialPotential::cosh_well(-1.0), std::invalid_argument);
}

TEST(GaussianBump, PeakAndHalfMaximum) {
  const GaussianBump b{{0.0, 0.0}, 24.0, 0.1};
  EXPECT_DOUBLE_EQ(b.value({0.0, 0.0}), 24.0);
  const double half = 0.5 * b.fwhm();
  EXPECT_NEAR(b.value({half, 0.0}), 12.0, 1e-9);
  // 0.235 is the reference FWHM; 0.1175 is its half.
  const auto ref = GaussianBump::with_fwhm({0, 0}, 24.0, 0.235);
  EXPECT_NEAR(ref.value({0.0, 0.1175}), 12.0, 1e-9);
}

TEST(GaussianBump, FwhmSigmaRelation) {
  EXPECT_NEAR(fwhm_to_sigma(0.235), 0.235 / (2.0 * std::sqrt(2.0 * std::log(2.0))), 1e-15);
  EXPECT_NEAR(fwhm_to_sigma(0.235), 0.0998, 1e-5);
  EXPECT_NEAR(sigma_to_fwhm(fwhm_to_sigma(0.3)), 0.3, 1e-15);
}

TEST(SampleImpurities, ReferenceCountAndBox) {
  const auto f = sample_impurities(1, 2.0, 24.0, 0.1, 5.0);
  ASSERT_EQ(f.bumps.size(), 200u);
  for (const auto& b : f.bumps) {
    EXPECT_LE(std::abs(b.center.x), 5.0);
    EXPECT_LE(std::abs(b.center.y), 5.0);
    EXPECT_EQ(b.amplitude, 24.0);
    EXPECT_EQ(b.sigma, 0.1);
  }
  EXPECT_EQ(f.seed, 1u);
  EXPECT_EQ(f.density, 2.0);
  EXPECT_EQ(f.box_half_width, 5.0);
}

TEST(SampleImpurities, EmptyWhenCountRoundsToZero) {
  const auto f = sample_impurities(3, 0.001, 24.0, 0.1, 1.0);
  EXPECT_TRUE(f.empty());
  const auto V = RadialPotential::reference();
  EXPECT_EQ(eval_potential(V, f, {0.3, -0.2}), V.value(std::hypot(0.3, 0.2)));
}

TEST(SampleImpurities, DeterministicForSeed) {
  const auto a = sample_impurities(7, 2.0, 24.0, 0.1, 4.0);
  const auto b = sample_impurities(7, 2.0, 24.0, 0.1, 4.0);
  std::ostringstream sa, sb;
  write_impurities(sa, a);
  write_impurities(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a.bumps, b.bumps);
  const auto c = sample_impurities(8, 2.0, 24.0, 0.1, 4.0);
  EXPECT_NE(a.bumps, c.bumps);
}

TEST(SampleImpurities, RejectsNonPositive) {
  EXPECT_THROW(sample_impurities(1, 0.0, 24, 0.1, 5), std::invalid_argument);
  EXPECT_THROW(sample_impurities(1, 2.0, 24, 0.0, 5), std::invalid_argument);
  EXPECT_THROW(sample_impurities(1, 2.0, 24, 0.1, -1), std::invalid_argument);
  EXPECT_THROW(sample_impurities(1, 2.0, -24, 0.1, 5), std::invalid_argument);
}

TEST(EvalPotential, SingleBumpAtOrigin) {
  ImpurityField f;
  f.bumps.push_back({{0.0, 0.0}, 24.0, 0.1});
  EXPECT_DOUBLE_EQ(eval_potential(RadialPotential::reference(), f, {0.0, 0.0}), 24.0);
}

TEST(RotateField, IdentityFullTurnAndQuarterTurn) {
  const auto f = sample_impurities(11, 2.0, 24.0, 0.1, 3.0);
  EXPECT_EQ(rotate_field(f, 0.0).bumps, f.bumps);
  const auto g = rotate_field(f, two_pi);
  for (std::size_t i = 0; i < f.bumps.size(); ++i) {
    EXPECT_NEAR(g.bumps[i].center.x, f.bumps[i].center.x, 1e-12);
    EXPECT_NEAR(g.bumps[i].center.y, f.bumps[i].center.y, 1e-12);
    EXPECT_EQ(g.bumps[i].amplitude, f.bumps[i].amplitude);
    EXPECT_EQ(g.bumps[i].sigma, f.bumps[i].sigma);
  }
  ImpurityField one;
  one.bumps.push_back({{1.0, 0.0}, 5.0, 0.2});
  const auto r = rotate_field(one, pi / 2);
  EXPECT_NEAR(r.bumps[0].center.x, 0.0, 1e-12);
  EXPECT_NEAR(r.bumps[0].center.y, 1.0, 1e-12);
}

TEST(RotateField, EvaluationIsRotationConsistent) {
  const auto V = RadialPotential::reference();
  const auto f = sample_impurities(5, 2.0, 24.0, 0.1, 3.0);
  Rng rng(99);
  for (int k = 0; k < 200; ++k) {
    const Vec2 p{rng.uniform(-3, 3), rng.uniform(-3, 3)};
    const double th = rng.uniform(0, two_pi);
    const double a = eval_potential(V, rotate_field(f, th), rotate(p, th));
    const double b = eval_potential(V, f, p);
    EXPECT_NEAR(a, b, 1e-12 * std::max(1.0, std::abs(b)));
  }
}

TEST(ImpurityField, IntegralMatchesBumpVolume) {
  // Trapezoid quadrature over a box 10 sigma beyond every bump.
  const auto f = sample_impurities(21, 2.0, 24.0, 0.1, 2.0);
  const double ext = 2.0 + 10 * 0.1, h = 0.02;
  const int n = static_cast<int>(std::lround(2 * ext / h));
  double sum = 0.0;
  for (int j = 0; j <= n; ++j)
    for (int i = 0; i <= n; ++i) {
      const double w = (i == 0 || i == n ? 0.5 : 1.0) * (j == 0 || j == n ? 0.5 : 1.0);
      sum += w * f.value({-ext + i * h, -ext + j * h});
    }
  sum *= h * h;
  const double expect = f.bumps.size() * 24.0 * two_pi * 0.01;
  EXPECT_NEAR(sum / expect, 1.0, 1e-6);
}

TEST(BumpIndex, CutoffAgreesWithExactSum) {
  const auto f = sample_impurities(4, 2.0, 24.0, 0.1, 3.0);
  const BumpIndex idx(f);
  Rng rng(3);
  for (int k = 0; k < 500; ++k) {
    const Vec2 p{rng.uniform(-3.5, 3.5), rng.uniform(-3.5, 3.5)};
    EXPECT_NEAR(idx.value(p), f.value(p), 1e-7 * 24.0);
    // Gradient tail beyond the 6 sigma cutoff: M (r / sigma^2) exp(-r^2 / 2 sigma^2) at r = 6 sigma,
    // allowing a handful of bumps at the edge.
    const double tail = 24.0 * 60.0 * std::exp(-18.0);
    const Vec2 g = idx.gradient(p), ge = f.gradient(p);
    EXPECT_NEAR(g.x, ge.x, 5 * tail);
    EXPECT_NEAR(g.y, ge.y, 5 * tail);
  }
}

TEST(ImpurityField, GradientAndHessianMatchFiniteDifferences) {
  const auto V = RadialPotential::reference();
  const auto f = sample_impurities(2, 2.0, 24.0, 0.1, 1.5);
  const double h = 1e-6;
  for (Vec2 p : {Vec2{0.3, 0.2}, Vec2{-1.1, 0.7}, Vec2{0.05, -0.9}}) {
    const Vec2 g = potential_gradient(V, f, p);
    EXPECT_NEAR(g.x, (eval_potential(V, f, p + Vec2{h, 0}) - eval_potential(V, f, p - Vec2{h, 0})) / (2 * h), 1e-4);
    EXPECT_NEAR(g.y, (eval_potential(V, f, p + Vec2{0, h}) - eval_potential(V, f, p - Vec2{0, h})) / (2 * h), 1e-4);
    const Sym2 H = potential_hessian(V, f, p);
    const Vec2 gx = potential_gradient(V, f, p + Vec2{h, 0}) - potential_gradient(V, f, p - Vec2{h, 0});
    const Vec2 gy = potential_gradient(V, f, p + Vec2{0, h}) - potential_gradient(V, f, p - Vec2{0, h});
    EXPECT_NEAR(H.xx, gx.x / (2 * h), 1e-3 * std::max(1.0, std::abs(H.xx)));
    EXPECT_NEAR(H.xy, gx.y / (2 * h), 1e-3 * std::max(1.0, std::abs(H.xy)));
    EXPECT_NEAR(H.yy, gy.y / (2 * h), 1e-3 * std::max(1.0, std::abs(H.yy)));
  }
}

TEST(ImpurityFile, RoundTripIsExact) {
  const auto f = sample_impurities(20141010, 2.0, 24.0, 0.1, 4.5);
  std::stringstream ss;
  write_impurities(ss, f);
  EXPECT_EQ(ss.str().rfind("# seed=20141010 density=2 box=4.5\n", 0), 0u);
  const auto g = read_impurities(ss);
  EXPECT_EQ(g.bumps, f.bumps);
  EXPECT_EQ(g.seed, f.seed);
  EXPECT_EQ(g.density, f.density);
  EXPECT_EQ(g.box_half_width, f.box_half_width);
}

TEST(ImpurityFile, MissingHeaderIsRejected) {
  std::istringstream is("0 0 1 0.1\n");
  EXPECT_THROW(read_impurities(is), std::invalid_argument);
}
