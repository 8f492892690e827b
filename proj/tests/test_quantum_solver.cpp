#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "scarlab/quantum_solver.hpp"

using namespace scarlab;

namespace {

const RadialPotential kHarmonic = RadialPotential::power_law(0.5, 2.0);

std::vector<double> harmonic_levels(std::size_t count) {
  std::vector<double> out;
  for (int n = 0; out.size() < count; ++n)
    for (int k = 0; k <= n && out.size() < count; ++k) out.push_back(n + 1.0);
  return out;
}

Wavefunction gaussian(const Grid2D& g, Vec2 q0, Vec2 p0, double s) {
  Eigen::VectorXcd v(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) {
    const Vec2 d = g.node(k) - q0;
    v(k) = std::exp(-norm2(d) / (4 * s * s)) * std::polar(1.0, dot(p0, g.node(k)));
  }
  return Wavefunction(g, v).normalize();
}

Wavefunction random_wave(const Grid2D& g, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::VectorXcd v(g.size());
  for (auto& z : v) z = {rng.normal(), rng.normal()};
  return Wavefunction(g, v).normalize();
}

}  // namespace

TEST(Grid2D, ValidatesAndLaysOutNodes) {
  EXPECT_THROW(Grid2D(1.0, 15), std::invalid_argument);
  EXPECT_THROW(Grid2D(1.0, 14), std::invalid_argument);
  EXPECT_THROW(Grid2D(0.0, 32), std::invalid_argument);
  const Grid2D g(2.0, 32);
  EXPECT_DOUBLE_EQ(g.spacing(), 0.125);
  EXPECT_DOUBLE_EQ(g.coord(0), -2.0);
  EXPECT_DOUBLE_EQ(g.node(33).x, -2.0 + 0.125);
  EXPECT_DOUBLE_EQ(g.node(33).y, -2.0 + 0.125);
  EXPECT_DOUBLE_EQ(g.node(31).x, 2.0 - 0.125);
  EXPECT_DOUBLE_EQ(g.node(31).y, -2.0);
}

TEST(Grid2D, WeylCountAndResolutionChecks) {
  // Harmonic: N(E) = E^2 / 2.
  EXPECT_NEAR(weyl_count(kHarmonic, 10.0), 50.0, 1e-4);
  EXPECT_NEAR(weyl_energy(kHarmonic, 50.0), 10.0, 1e-5);
  const auto V = RadialPotential::reference();
  const double R = std::pow(2.0 * 300.0, 0.2);
  EXPECT_NEAR(weyl_count(V, 300.0), 300.0 * R * R / 2 - std::pow(R, 7) / 14, 1e-3);
  EXPECT_THROW(check_grid(Grid2D(4.5, 32), V, 300.0), GridTooCoarseError);
  EXPECT_THROW(check_grid(Grid2D(3.0, 256), V, 300.0), GridTooCoarseError);
  EXPECT_NO_THROW(check_grid(Grid2D(4.5, 256), V, 300.0));
  EXPECT_THROW(solve_eigenstates(V, {}, Grid2D(4.5, 32), 100), GridTooCoarseError);
}

TEST(Hamiltonian, KineticIsExactOnPlaneWaves) {
  const Grid2D g(3.0, 32);
  const Hamiltonian H(g, Eigen::VectorXd::Zero(g.size()));
  for (auto [a, b] : {std::pair{1, 0}, std::pair{3, -2}, std::pair{-7, 5}}) {
    const double kx = pi * a / g.half_width, ky = pi * b / g.half_width;
    Eigen::VectorXcd v(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) v(k) = std::polar(1.0, kx * g.node(k).x + ky * g.node(k).y);
    const Eigen::VectorXcd hv = H.apply(v);
    EXPECT_LT((hv - 0.5 * (kx * kx + ky * ky) * v).norm() / v.norm(), 1e-12);
  }
}

TEST(Hamiltonian, IsHermitian) {
  const Grid2D g(4.5, 64);
  const Hamiltonian H(g, RadialPotential::reference(), sample_impurities(9, 2.0, 24.0, 0.1, 4.5));
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = random_wave(g, 2 * s), b = random_wave(g, 2 * s + 1);
    const Wavefunction hb(g, H.apply(b.values)), ha(g, H.apply(a.values));
    const cplx ab = overlap(a, hb), ba = overlap(b, ha);
    EXPECT_LT(std::abs(ab - std::conj(ba)), 1e-10 * std::max(1.0, std::abs(ab)));
  }
}

TEST(SolveEigenstates, HarmonicLevelsAndMultiplicities) {
  const Grid2D g(8.5, 96);
  const auto s = solve_eigenstates(kHarmonic, {}, g, 50);
  const auto expect = harmonic_levels(50);
  ASSERT_EQ(s.size(), 50u);
  for (std::size_t k = 0; k < 50; ++k) {
    EXPECT_NEAR(s.energies[k] / expect[k], 1.0, 1e-6) << k;
    EXPECT_LE(s.residuals[k], 1e-6);
    if (k) EXPECT_LE(s.energies[k - 1], s.energies[k]);
  }
  const Eigen::MatrixXd G = s.vectors.transpose() * s.vectors;
  EXPECT_LT((G - Eigen::MatrixXd::Identity(50, 50)).cwiseAbs().maxCoeff(), 1e-8);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(s.state(k).norm2(), 1.0, 1e-9);
}

TEST(SolveEigenstates, ImaginaryTimeAgreesWithChebyshev) {
  const Grid2D g(7.0, 64);
  EigenOptions it;
  it.method = EigenOptions::Method::ImaginaryTime;
  it.tol = 1e-5;
  const auto a = solve_eigenstates(kHarmonic, {}, g, 6, it);
  const auto b = solve_eigenstates(kHarmonic, {}, g, 6);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_NEAR(a.energies[k], b.energies[k], 1e-8);
    EXPECT_LE(a.residuals[k], 1e-5);
  }
  EXPECT_NEAR(a.energies[0], 1.0, 1e-8);
}

TEST(SolveEigenstates, ReferenceWellPairsAreDegenerate) {
  const auto V = RadialPotential::reference();
  const Grid2D g(3.6, 96);
  const auto s = solve_eigenstates(V, {}, g, 60);
  // States come as singlets (m = 0) or pairs: every state has a partner
  // within 1e-6 E, except the m = 0 ones whose nearest neighbours are far.
  int paired = 0;
  for (std::size_t k = 0; k + 1 < s.size(); ++k)
    if (s.energies[k + 1] - s.energies[k] < 1e-6 * s.energies[k]) {
      ++paired;
      ++k;
    }
  // Weyl: a few singlets (one m = 0 state per n_r) among 60 states.
  EXPECT_GE(paired, 24);
  for (std::size_t k = 0; k + 1 < s.size(); ++k) {
    const double gap = s.energies[k + 1] - s.energies[k];
    EXPECT_TRUE(gap < 1e-6 * s.energies[k] || gap > 1e-3) << k << " gap " << gap;
  }
}

TEST(SolveEigenstates, FirstOrderShiftOfWeakBump) {
  const Grid2D g(8.0, 96);
  ImpurityField f;
  f.bumps.push_back({{0.3, -0.2}, 0.01, 0.4});
  const auto s0 = solve_eigenstates(kHarmonic, {}, g, 1);
  const auto s1 = solve_eigenstates(kHarmonic, f, g, 1);
  const Eigen::VectorXd vimp = sample_field(g, f);
  const Eigen::VectorXd d = s0.vectors.col(0);
  const double first = d.cwiseAbs2().dot(vimp);
  EXPECT_NEAR((s1.energies[0] - s0.energies[0]) / first, 1.0, 0.05);
}

TEST(SolveEigenstates, GridRefinementIsConverged) {
  const auto V = RadialPotential::reference();
  const auto a = solve_eigenstates(V, {}, Grid2D(3.6, 64), 20);
  const auto b = solve_eigenstates(V, {}, Grid2D(3.6, 128), 20);
  for (std::size_t k = 0; k < 20; ++k) EXPECT_LT(std::abs(b.energies[k] - a.energies[k]) / a.energies[k], 1e-5) << k;
}

TEST(SolveEigenstates, NonConvergenceReportsCount) {
  EigenOptions opt;
  opt.max_iterations = 1;
  opt.tol = 1e-14;
  try {
    solve_eigenstates(kHarmonic, {}, Grid2D(7.0, 64), 10, opt);
    FAIL() << "expected NonConvergenceError";
  } catch (const NonConvergenceError& e) {
    EXPECT_LT(e.converged, 10u);
  }
}

TEST(Overlap, PropertiesAndGridMismatch) {
  const Grid2D g(3.0, 32);
  const auto a = random_wave(g, 1), b = random_wave(g, 2);
  EXPECT_NEAR(std::abs(overlap(a, a) - cplx(1.0, 0.0)), 0.0, 1e-12);
  EXPECT_LT(std::abs(overlap(a, b) - std::conj(overlap(b, a))), 1e-15);
  EXPECT_LE(std::norm(overlap(a, b)), 1.0 + 1e-12);
  EXPECT_THROW(overlap(a, random_wave(Grid2D(3.0, 34), 3)), std::invalid_argument);
}

TEST(Propagate, CoherentStateRevivesAndNormIsKept) {
  const Grid2D g(8.0, 96);
  const auto psi0 = gaussian(g, {1.5, 0.0}, {0.0, 1.5}, std::sqrt(0.5));
  const auto traj = propagate(psi0, kHarmonic, {}, 0.005, two_pi, pi / 2);
  ASSERT_EQ(traj.size(), 5u);
  for (const auto& w : traj) EXPECT_NEAR(w.norm2(), 1.0, 1e-9);
  EXPECT_NEAR(std::norm(overlap(psi0, traj.back())), 1.0, 1e-4);
  EXPECT_LT(std::norm(overlap(psi0, traj[2])), 1e-3);
}

TEST(Propagate, EigenstateOnlyChangesPhase) {
  const Grid2D g(8.0, 96);
  const auto s = solve_eigenstates(kHarmonic, {}, g, 3);
  const Hamiltonian H(g, kHarmonic, {});
  const auto psi = s.state(2);
  propagate_visit(psi, H, 0.002, 0.5, 6.0, [&](double t, const Wavefunction& w) {
    EXPECT_NEAR(std::abs(overlap(psi, w)), 1.0, 1e-6) << t;
    const cplx expect = std::polar(1.0, -s.energies[2] * t);
    EXPECT_LT(std::abs(overlap(psi, w) - expect), 1e-5) << t;
  });
}

TEST(Propagate, FreeGaussianSpreadsAnalytically) {
  const Grid2D g(20.0, 256);
  const double s0 = 0.8;
  const auto psi0 = gaussian(g, {0, 0}, {0, 0}, s0);
  const Hamiltonian H(g, Eigen::VectorXd::Zero(g.size()));
  propagate_visit(psi0, H, 0.01, 1.0, 4.0, [&](double t, const Wavefunction& w) {
    const Eigen::VectorXd rho = w.density() * g.cell_area();
    double sxx = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) sxx += rho(k) * g.node(k).x * g.node(k).x;
    const double expect = s0 * std::sqrt(1.0 + t * t / (4 * std::pow(s0, 4)));
    EXPECT_NEAR(std::sqrt(sxx), expect, 1e-4) << t;
  });
}

TEST(WavefunctionIo, Wf2dRoundTripIsExact) {
  const Grid2D g(2.5, 32);
  const auto a = random_wave(g, 7);
  std::stringstream ss;
  write_wf2d(ss, a);
  EXPECT_EQ(ss.str().size(), 4 + 8 + 32 + g.size() * 16);
  EXPECT_EQ(ss.str().substr(0, 4), "WF2D");
  const auto b = read_wf2d(ss);
  EXPECT_EQ(b.grid, g);
  EXPECT_EQ(b.values, a.values);
  std::stringstream bad("WF3D");
  EXPECT_THROW(read_wf2d(bad), std::runtime_error);
}

TEST(WavefunctionIo, SpectrumRoundTripAndCsv) {
  const auto s = solve_eigenstates(kHarmonic, {}, Grid2D(7.0, 64), 4);
  std::stringstream ss;
  write_spectrum(ss, s);
  const auto r = read_spectrum(ss);
  EXPECT_EQ(r.grid, s.grid);
  EXPECT_EQ(r.energies, s.energies);
  EXPECT_EQ(r.residuals, s.residuals);
  EXPECT_EQ(r.vectors, s.vectors);
  std::ostringstream csv;
  write_spectrum_csv(csv, s);
  EXPECT_EQ(csv.str().rfind("index,energy,residual\n0,", 0), 0u);
}
