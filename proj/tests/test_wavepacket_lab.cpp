#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "scarlab/resonance_dpt.hpp"
#include "scarlab/wavepacket_lab.hpp"

using namespace scarlab;

namespace {

const RadialPotential kWell = RadialPotential::reference();

// Unperturbed r^5 spectrum on a small grid, warm-started from the radial basis.
const Spectrum& small_spectrum() {
  static const Spectrum s = [] {
    const Grid2D g(3.8, 128);
    const auto basis = solve_radial_basis(kWell, 40, 95.0);
    const Eigen::MatrixXd X0 = polar_subspace(basis, g, 240);
    EigenOptions o;
    o.initial = &X0;
    o.tol = 1e-8;
    return solve_eigenstates(kWell, ImpurityField{}, g, 200, o);
  }();
  return s;
}

}  // namespace

TEST(GaussianPacket, NormalizedWithRequestedMoments) {
  GaussianPacket g;
  g.center = {0.3, -0.2};
  g.momentum = {2.0, 1.0};
  g.covariance = oriented_covariance({std::cos(0.4), std::sin(0.4)}, 0.5, 0.25);
  const Grid2D grid(5.0, 128);
  // Analytic value integrates to one before renormalization.
  double s = 0.0;
  for (std::size_t k = 0; k < grid.size(); ++k) s += std::norm(g.value(grid.node(k)));
  EXPECT_NEAR(s * grid.cell_area(), 1.0, 1e-10);
  const auto psi = g.sample(grid);
  EXPECT_NEAR(psi.norm2(), 1.0, 1e-12);
  const Eigen::VectorXd rho = psi.density() * grid.cell_area();
  double mx = 0, my = 0, cxx = 0, cxy = 0, cyy = 0;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const Vec2 p = grid.node(k);
    mx += rho(k) * p.x;
    my += rho(k) * p.y;
  }
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const Vec2 d = grid.node(k) - Vec2{mx, my};
    cxx += rho(k) * d.x * d.x;
    cxy += rho(k) * d.x * d.y;
    cyy += rho(k) * d.y * d.y;
  }
  EXPECT_NEAR(mx, 0.3, 1e-10);
  EXPECT_NEAR(my, -0.2, 1e-10);
  EXPECT_NEAR(cxx, g.covariance.xx, 1e-10);
  EXPECT_NEAR(cxy, g.covariance.xy, 1e-10);
  EXPECT_NEAR(cyy, g.covariance.yy, 1e-10);
}

TEST(GaussianPacket, RefusesPacketOutsideGrid) {
  GaussianPacket g;
  g.center = {2.5, 0.0};
  g.covariance = {0.25, 0.0, 0.25};
  EXPECT_THROW(g.sample(Grid2D(3.0, 64)), std::invalid_argument);
}

TEST(PacketOnOrbit, StarStartsOnPositiveYHeadingRight) {
  const auto orbit = orbit_for_resonance(kWell, 500.0, 2, 5);
  const auto g = packet_on_orbit(orbit, 0.0, kWell);
  EXPECT_NEAR(g.center.x, 0.0, 1e-15);
  EXPECT_NEAR(g.center.y, orbit.r_in, 1e-15);
  EXPECT_GT(g.momentum.x, 0.0);
  EXPECT_NEAR(g.momentum.y, 0.0, 1e-12);
  const auto c = packet_on_orbit(orbit, 0.0, kWell, PacketWidths{}, EnergyMatch::Classical);
  EXPECT_NEAR(norm(c.momentum), std::sqrt(2.0 * (500.0 - kWell.value(orbit.r_in))), 1e-10);
  EXPECT_LT(norm(g.momentum), norm(c.momentum));
  EXPECT_THROW(packet_on_orbit(orbit, 0.0, 500.0, 0.0, 0.1, kWell), std::invalid_argument);
}

TEST(PacketOnOrbit, SymmetryStepIsAnExactRotation) {
  const auto orbit = orbit_for_resonance(kWell, 500.0, 2, 5);
  const double a = 0.37, s = two_pi / 5;
  const auto g0 = packet_on_orbit(orbit, a, kWell), g1 = packet_on_orbit(orbit, a + s, kWell);
  const Vec2 c = rotate(g0.center, s), p = rotate(g0.momentum, s);
  EXPECT_NEAR(g1.center.x, c.x, 1e-12);
  EXPECT_NEAR(g1.center.y, c.y, 1e-12);
  EXPECT_NEAR(g1.momentum.x, p.x, 1e-10);
  EXPECT_NEAR(g1.momentum.y, p.y, 1e-10);
  const Grid2D grid(4.0, 64);
  for (std::size_t k = 0; k < grid.size(); k += 97)
    EXPECT_NEAR(std::abs(g1.value(rotate(grid.node(k), s)) - g0.value(grid.node(k))), 0.0, 1e-10);
}

TEST(PacketOnOrbit, MeanEnergyMatchesTarget) {
  const Grid2D grid(4.5, 256);
  const Hamiltonian H(grid, kWell, ImpurityField{});
  for (double E : {100.0, 200.0, 300.0}) {
    const auto orbit = orbit_for_resonance(kWell, E, 2, 5);
    const auto mean = energy_moments(packet_on_orbit(orbit, 1.1, kWell).sample(grid), H).first;
    EXPECT_NEAR(mean / E, 1.0, 2e-3) << E;
    // The classical rule overshoots by the packet's width energy.
    const auto cl =
        energy_moments(packet_on_orbit(orbit, 1.1, kWell, PacketWidths{}, EnergyMatch::Classical).sample(grid), H).first;
    EXPECT_GT(cl, mean);
  }
}

TEST(PacketOnOrbit, ReferenceWidthsEnergyEnvelopeAtFiveHundred) {
  // Local density of states of the default packet at E = 500, from the
  // Fourier transform of A(t) over half a period with a Hann window. The
  // envelope must be centred on E and a few tens of units wide; the printed
  // FWHM is expected near 50.
  const auto orbit = orbit_for_resonance(kWell, 500.0, 2, 5);
  const Grid2D grid(5.0, 256);
  const Hamiltonian H(grid, kWell, ImpurityField{});
  const auto psi0 = packet_on_orbit(orbit, 0.0, kWell).sample(grid);
  const double tmax = 0.5 * orbit.period, dt = 1e-4;
  const int ns = static_cast<int>(tmax / dt);
  const Propagator P(H, dt);
  Wavefunction psi = psi0;
  std::vector<cplx> A{1.0};
  for (int i = 1; i <= ns; ++i) {
    P.step(psi.values);
    A.push_back(overlap(psi0, psi));
  }
  std::vector<double> E, S;
  for (double e = 300.0; e <= 700.0; e += 0.5) {
    cplx s = 0.5 * A[0];
    for (int i = 1; i <= ns; ++i) s += A[i] * std::polar(0.5 * (1.0 + std::cos(pi * i * dt / tmax)), e * i * dt);
    E.push_back(e);
    S.push_back(2.0 * s.real() * dt);
  }
  const auto top = std::max_element(S.begin(), S.end()) - S.begin();
  double lo = 1e9, hi = -1e9;
  for (std::size_t i = 0; i < S.size(); ++i)
    if (S[i] >= 0.5 * S[top]) {
      lo = std::min(lo, E[i]);
      hi = std::max(hi, E[i]);
    }
  const double states = weyl_count(kWell, hi) - weyl_count(kWell, lo);
  std::printf("envelope peak %.1f FWHM %.1f, %.0f states\n", E[top], hi - lo, states);
  // The distribution is skewed to high energy, so its mode sits a little below the mean.
  EXPECT_NEAR(E[top], 500.0, 20.0);
  EXPECT_GT(hi - lo, 30.0);
  EXPECT_LT(hi - lo, 80.0);
}

TEST(Autocorrelation, HarmonicCoherentStateRevives) {
  const auto V = RadialPotential::power_law(0.5, 2.0);
  const Grid2D grid(9.0, 96);
  GaussianPacket g;
  g.center = {2.0, 0.0};
  g.momentum = {0.0, 1.5};
  g.covariance = {0.5, 0.0, 0.5};
  const auto s = autocorrelation(g, V, ImpurityField{}, grid, two_pi, 2.0 * two_pi, two_pi / 8);
  EXPECT_NEAR(s.quantum.front(), 1.0, 1e-9);
  EXPECT_NEAR(s.quantum[8], 1.0, 1e-4);
  EXPECT_NEAR(s.quantum[16], 1.0, 1e-4);
  EXPECT_LT(s.quantum[4], 0.1);
}

TEST(Scarmometer, EigenstateIsADelta) {
  const auto& spec = small_spectrum();
  const auto d = scarmometer(spec.state(17), spec);
  for (std::size_t k = 0; k < spec.size(); ++k) EXPECT_NEAR(d.weights[k], k == 17 ? 1.0 : 0.0, 1e-8);
}

TEST(Scarmometer, ParsevalAndMomentsAndSpectralAutocorrelation) {
  const auto& spec = small_spectrum();
  const auto orbit = orbit_for_resonance(kWell, 45.0, 2, 5);
  const auto g = packet_on_orbit(orbit, 0.3, kWell);
  const auto psi = g.sample(spec.grid);
  const auto d = scarmometer(psi, spec);
  ASSERT_GE(d.captured, 0.99);
  EXPECT_NEAR(d.captured + d.out_of_window(), 1.0, 1e-15);
  double e1 = 0.0, e2 = 0.0;
  for (std::size_t k = 0; k < d.weights.size(); ++k) {
    e1 += d.weights[k] * d.energies[k];
    e2 += d.weights[k] * d.energies[k] * d.energies[k];
  }
  const Hamiltonian H(spec.grid, kWell, ImpurityField{});
  const auto [mean, sd] = energy_moments(psi, H);
  EXPECT_NEAR(e1 / d.captured / mean, 1.0, 0.01);
  EXPECT_NEAR(std::sqrt(e2 / d.captured - std::pow(e1 / d.captured, 2)) / sd, 1.0, 0.1);
  // Eigenbasis expansion against time stepping up to 8 T.
  const auto s = autocorrelation(psi, H, orbit.period, 8.0 * orbit.period, orbit.period / 20);
  for (std::size_t i = 0; i < s.t_over_T.size(); ++i)
    EXPECT_NEAR(s.quantum[i], spectral_autocorrelation(d, s.t_over_T[i] * orbit.period), 2e-2) << s.t_over_T[i];
  // First recurrence within 5 % of T.
  const auto pk = recurrence_peak(s.t_over_T, s.quantum, 1);
  EXPECT_NEAR(pk.t_over_T, 1.0, 0.05);
}

TEST(RecurrencePeak, WindowedMaximum) {
  const std::vector<double> t{0.0, 0.7, 0.85, 1.0, 1.15, 1.3}, y{1.0, 0.9, 0.2, 0.3, 0.4, 0.8};
  const auto p = recurrence_peak(t, y, 1);
  EXPECT_EQ(p.t_over_T, 1.15);
  EXPECT_EQ(p.value, 0.4);
  EXPECT_THROW(recurrence_peak(t, y, 3), std::invalid_argument);
  EXPECT_NEAR(cosh_overlay(0.5, 0.0), 1.0, 0.0);
  EXPECT_NEAR(cosh_overlay(std::acosh(2.0), 1.0), 0.5, 1e-15);
}

TEST(RecurrenceSeries, ClassicalStartsAtOne) {
  const auto orbit = orbit_for_resonance(kWell, 45.0, 2, 5);
  const auto g = packet_on_orbit(orbit, 0.0, kWell);
  RecurrenceSeries s;
  s.period = orbit.period;
  s.t_over_T = {0.0, 0.5, 1.0};
  s.quantum = {1.0, 0.0, 0.0};
  add_classical(s, g, kWell, ImpurityField{}, 2000, 7, orbit.period / 2000);
  EXPECT_EQ(s.classical[0], 1.0);
  EXPECT_GT(s.classical[2], s.classical[1]);
  std::ostringstream os;
  write_recurrence_csv(os, s);
  EXPECT_EQ(os.str().rfind("t_over_T,quantum,classical\n0,1,1\n", 0), 0u);
}

TEST(OrientationSweep, UnperturbedOverlapsAreFlatAfterPairing) {
  const auto& spec = small_spectrum();
  SweepOptions o;
  o.alpha_grid = 12;
  o.degenerate_tol = 1e-7;
  const auto scan = orientation_sweep(spec, 120, 160, kWell, 2, 5, o);
  ASSERT_EQ(scan.records.size(), 40u);
  double worst = 0.0, top = 0.0;
  for (const auto& r : scan.records) {
    EXPECT_GE(r.alpha_max, 0.0);
    EXPECT_LT(r.alpha_max, two_pi / 5);
    const auto [lo, hi] = std::minmax_element(r.curve.begin(), r.curve.end());
    worst = std::max(worst, *hi - *lo);
    top = std::max(top, *hi);
  }
  EXPECT_GT(top, 1e-3);
  EXPECT_LT(worst, 1e-10);
}

TEST(OrientationSweep, ThresholdAndCsv) {
  const auto& spec = small_spectrum();
  SweepOptions o;
  o.alpha_grid = 8;
  o.threshold = 0.05;
  const auto scan = orientation_sweep(spec, 130, 136, kWell, 2, 5, o);
  for (const auto& r : scan.records) {
    EXPECT_EQ(r.excluded, r.overlap2 < 0.05);
    EXPECT_GE(r.overlap2, 0.0);
    EXPECT_LE(r.overlap2, 1.0 + 1e-12);
  }
  std::ostringstream os;
  write_orientation_csv(os, scan);
  EXPECT_EQ(os.str().rfind("state,energy,alpha_max,overlap2,excluded\n130,", 0), 0u);
  EXPECT_THROW(orientation_sweep(spec, 0, 2, kWell, 2, 5, SweepOptions{4}), std::invalid_argument);
}

TEST(Branches, SyntheticTwoModesAboveFlatBackground) {
  OrientationScan s;
  s.p = 2;
  s.q = 5;
  s.alpha_grid = 20;
  const double st = s.alpha_step();
  for (int i = 0; i < 30; ++i) {
    s.records.push_back({std::size_t(i), 100.0 + 5 * i, 3 * st, 0.01, false, {}});
    s.records.push_back({std::size_t(i + 100), 102.0 + 5 * i, 12 * st, 0.01, false, {}});
  }
  // One state in every bin: flat background.
  for (int i = 0; i < 20; ++i) s.records.push_back({std::size_t(200 + i), 50.0 + i, i * st, 0.01, false, {}});
  s.records.push_back({999, 50.0, 7 * st, 1e-4, true, {}});
  BranchOptions o;
  o.span_quantile = 0.0;
  const auto b = find_branches(s, o);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_NEAR(b[0].alpha, 3 * st, 1e-12);
  EXPECT_NEAR(b[1].alpha, 12 * st, 1e-12);
  EXPECT_EQ(b[0].count, 33u);
  EXPECT_NEAR(b[0].expected, 80.0 * 3 / 20, 1e-12);
  EXPECT_NEAR(b[0].span(), 245.0 - 52.0, 1e-12);
  // Quantile span drops the stray background members.
  o.span_quantile = 0.1;
  EXPECT_NEAR(find_branches(s, o)[0].span(), 230.0 - 100.0, 1e-12);
  // Wrap-around: a mode at the last bin and its neighbour at bin 0 are one branch.
  OrientationScan w = s;
  w.records.clear();
  for (int i = 0; i < 40; ++i) w.records.push_back({std::size_t(i), 100.0 + i, (i % 2 ? 0.0 : 19 * st), 0.01, false, {}});
  EXPECT_EQ(find_branches(w).size(), 1u);
}

TEST(Branches, FlatHistogramHasNoBranch) {
  OrientationScan s;
  s.p = 2;
  s.q = 5;
  s.alpha_grid = 24;
  for (int k = 0; k < 10; ++k)
    for (int i = 0; i < 24; ++i) s.records.push_back({std::size_t(k * 24 + i), 1.0 * k, i * s.alpha_step(), 0.01, false, {}});
  EXPECT_TRUE(find_branches(s).empty());
}

TEST(Branches, MinOverlapSelectsRecords) {
  OrientationScan s;
  s.p = 2;
  s.q = 5;
  s.alpha_grid = 24;
  const double st = s.alpha_step();
  for (int i = 0; i < 48; ++i) s.records.push_back({std::size_t(i), 10.0 + i, (i % 24) * st, 0.004, false, {}});
  for (int i = 0; i < 12; ++i) s.records.push_back({std::size_t(100 + i), 20.0 + i, 5 * st, 0.05, false, {}});
  EXPECT_NEAR(overlap_quantile(s, 1.0), 0.05, 0.0);
  EXPECT_NEAR(overlap_quantile(s, 0.0), 0.004, 0.0);
  BranchOptions o;
  o.min_overlap = 0.01;
  const auto b = find_branches(s, o);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].count, 12u);
}

TEST(AmplitudeSweep, TracksStrongestStateAndDrift) {
  const auto& spec = small_spectrum();
  ImpurityField f;
  f.bumps.push_back({{1.0, 1.0}, 1.0, 0.1});
  std::vector<double> seen;
  SweepOptions o;
  o.alpha_grid = 8;
  const auto sw = amplitude_sweep(
      f, {8, 16}, [&](const ImpurityField& g) { seen.push_back(g.bumps[0].amplitude); return spec; }, kWell, 2, 5,
      spec.energies[140], 1.0, o);
  EXPECT_EQ(seen, (std::vector<double>{8, 16}));
  ASSERT_EQ(sw.points.size(), 2u);
  EXPECT_EQ(sw.points[0].state, sw.points[1].state);
  EXPECT_EQ(sw.drift(), 0.0);
  EXPECT_NEAR(sw.alpha_step, two_pi / 40, 1e-15);
}

TEST(Decomposition, CsvHeader) {
  Decomposition d;
  d.energies = {1.5, 2.5};
  d.weights = {0.25, 0.5};
  std::ostringstream os;
  write_decomposition_csv(os, d);
  EXPECT_EQ(os.str(), "state,energy,weight\n0,1.5,0.25\n1,2.5,0.5\n");
}
