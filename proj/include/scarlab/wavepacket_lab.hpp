#pragma once

// Gaussian packets launched on unperturbed periodic orbits: autocorrelation
// recurrences, classical recurrences, eigenstate decompositions and
// orientation sweeps.

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "scarlab/classical_dynamics.hpp"
#include "scarlab/core.hpp"
#include "scarlab/potential_field.hpp"
#include "scarlab/quantum_solver.hpp"

namespace scarlab {

// ---------------------------------------------------------------------------
// Packets

/// phi(x) = exp(-1/4 dx' S^-1 dx + i p0.dx) / sqrt(2 pi sqrt(det S)), where S
/// is the covariance of |phi|^2.
struct GaussianPacket {
  Vec2 center;
  Vec2 momentum;
  Sym2 covariance;
  double energy = 0.0;  // target orbit energy
  double alpha = 0.0;

  cplx value(Vec2 x) const {
    const Sym2 inv = covariance.inverse();
    const Vec2 d = x - center;
    const double e = -0.25 * dot(d, inv * d);
    return std::polar(std::exp(e) / std::sqrt(two_pi * std::sqrt(covariance.det())), dot(momentum, d));
  }

  /// Sampled on the grid and renormalized there. Refuses packets whose 5 sigma
  /// extent along x or y leaves the grid (norm beyond it < 3e-7).
  Wavefunction sample(const Grid2D& grid) const {
    const double rx = 5.0 * std::sqrt(covariance.xx), ry = 5.0 * std::sqrt(covariance.yy);
    const double lo = grid.coord(0), hi = grid.coord(grid.points_per_side - 1);
    if (center.x - rx < lo || center.x + rx > hi || center.y - ry < lo || center.y + ry > hi)
      throw std::invalid_argument("packet extends beyond the grid: centre (" + fmt17(center.x) + ", " +
                                  fmt17(center.y) + "), 5 sigma reach (" + fmt17(rx) + ", " + fmt17(ry) + ")");
    const Sym2 inv = covariance.inverse();
    Eigen::VectorXcd v(static_cast<Eigen::Index>(grid.size()));
    const int n = grid.points_per_side;
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const Vec2 d = Vec2{grid.coord(i), grid.coord(j)} - center;
        const double e = -0.25 * dot(d, inv * d);
        v(static_cast<Eigen::Index>(j) * n + i) = e < -300.0 ? cplx(0.0) : std::polar(std::exp(e), dot(momentum, d));
      }
    Wavefunction psi(grid, std::move(v));
    psi.normalize();
    return psi;
  }

  WignerGaussian wigner() const { return {center, momentum, covariance}; }
};

struct PacketWidths {
  double across_fraction = 0.25;  // width_across = fraction * (r_out - r_in)
  double along_ratio = 2.0;       // width_along = ratio * width_across

  double across(const OrbitSpec& o) const { return across_fraction * (o.r_out - o.r_in); }
  double along(const OrbitSpec& o) const { return along_ratio * across(o); }
};

namespace detail {

/// Gauss-Hermite nodes and weights for the standard normal (Golub-Welsch).
inline const std::pair<Eigen::VectorXd, Eigen::VectorXd>& normal_quadrature() {
  static const auto qw = [] {
    const int n = 32;
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    Eigen::VectorXd w = es.eigenvectors().row(0).transpose().array().square();
    return std::make_pair(es.eigenvalues(), Eigen::VectorXd(w / w.sum()));
  }();
  return qw;
}

/// Mean of V(|x|) over the Gaussian N(c, S).
inline double gaussian_mean_potential(const RadialPotential& V, Vec2 c, const Sym2& S) {
  const auto& [x, w] = normal_quadrature();
  const double l11 = std::sqrt(S.xx), l21 = S.xy / l11, l22 = std::sqrt(std::max(0.0, S.yy - l21 * l21));
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      const Vec2 p{c.x + l11 * x(i), c.y + l21 * x(i) + l22 * x(j)};
      s += w(i) * w(j) * V.value(norm(p));
    }
  return s;
}

}  // namespace detail

/// How |p0| is fixed for a packet of target energy E.
enum class EnergyMatch {
  Mean,       // <H> = E in the unperturbed well, widths included
  Classical,  // |p0| = sqrt(2 (E - V(q0)))
};

/// Packet at the alpha-rotated orbit start, momentum tangent to the orbit.
/// Mean matching sets |p0|^2 / 2 = E - <V> - tr(S^-1) / 8, the last two
/// terms being the packet's potential and width kinetic energy.
inline GaussianPacket packet_on_orbit(const OrbitSpec& orbit, double alpha, double E, double width_along,
                                      double width_across, const RadialPotential& V,
                                      EnergyMatch match = EnergyMatch::Mean) {
  if (!(width_along > 0.0) || !(width_across > 0.0)) throw std::invalid_argument("packet widths must be positive");
  const PhasePoint z = orbit_start(orbit, alpha);
  const Vec2 t = z.momentum / norm(z.momentum);
  GaussianPacket g;
  g.center = z.position;
  g.covariance = oriented_covariance(t, width_along, width_across);
  const double ke = match == EnergyMatch::Classical
                        ? E - V.value(norm(z.position))
                        : E - detail::gaussian_mean_potential(V, g.center, g.covariance) -
                              0.125 * g.covariance.inverse().trace();
  if (!(ke > 0.0)) throw std::invalid_argument("packet energy " + fmt17(E) + " too low for its widths and position");
  g.momentum = t * std::sqrt(2.0 * ke);
  g.energy = E;
  g.alpha = alpha;
  return g;
}

inline GaussianPacket packet_on_orbit(const OrbitSpec& orbit, double alpha, const RadialPotential& V,
                                      const PacketWidths& w = {}, EnergyMatch match = EnergyMatch::Mean) {
  return packet_on_orbit(orbit, alpha, orbit.energy, w.along(orbit), w.across(orbit), V, match);
}

/// Mean and standard deviation of H in psi.
inline std::pair<double, double> energy_moments(const Wavefunction& psi, const Hamiltonian& H) {
  const Eigen::VectorXcd h = H.apply(psi.values);
  const double n = psi.values.squaredNorm();
  const double e1 = psi.values.dot(h).real() / n;
  const double e2 = h.squaredNorm() / n;
  return {e1, std::sqrt(std::max(0.0, e2 - e1 * e1))};
}

// ---------------------------------------------------------------------------
// Recurrences

struct RecurrenceSeries {
  double period = 0.0;              // T
  std::vector<double> t_over_T;
  std::vector<double> quantum;      // |A(t)|^2
  std::vector<double> classical;    // I(t); empty when not computed
  std::vector<double> classical_sigma;
};

/// |<phi(0)|phi(t)>|^2 sampled every dt_sample up to t_end; returned times in
/// units of `period`.
inline RecurrenceSeries autocorrelation(const Wavefunction& phi0, const Hamiltonian& H, double period, double t_end,
                                        double dt_sample, double dt = 0.0) {
  if (!(period > 0.0)) throw std::invalid_argument("period must be positive");
  if (dt <= 0.0) dt = split_step_dt(energy_moments(phi0, H).first - H.potential().minCoeff());
  RecurrenceSeries s;
  s.period = period;
  const double n0 = phi0.norm2();
  propagate_visit(phi0, H, dt, dt_sample, t_end, [&](double t, const Wavefunction& psi) {
    s.t_over_T.push_back(t / period);
    s.quantum.push_back(std::norm(overlap(phi0, psi)) / (n0 * n0));
  });
  s.quantum.front() = std::norm(overlap(phi0, phi0)) / (n0 * n0);
  return s;
}

inline RecurrenceSeries autocorrelation(const GaussianPacket& packet, const RadialPotential& V,
                                        const ImpurityField& field, const Grid2D& grid, double period,
                                        double t_end, double dt_sample) {
  const Hamiltonian H(grid, V, field);
  return autocorrelation(packet.sample(grid), H, period, t_end, dt_sample);
}

/// Adds I(t) at the series' sample times.
inline void add_classical(RecurrenceSeries& s, const GaussianPacket& packet, const RadialPotential& V,
                          const ImpurityField& field, std::size_t samples, std::uint64_t seed, double dt) {
  std::vector<double> times;
  for (double t : s.t_over_T) times.push_back(t * s.period);
  const auto c = classical_recurrence(packet.wigner(), V, field, samples, seed, times, dt);
  s.classical = c.strength;
  s.classical_sigma = c.sigma;
}

struct Peak {
  double t_over_T = 0.0;
  double value = 0.0;
  double sigma = 0.0;
};

/// Maximum of a curve over [k - window, k + window] in units of T.
inline Peak recurrence_peak(const std::vector<double>& t_over_T, const std::vector<double>& y, int k,
                            double window = 0.2, const std::vector<double>* sigma = nullptr) {
  Peak p;
  p.value = -1.0;
  for (std::size_t i = 0; i < t_over_T.size(); ++i) {
    if (std::abs(t_over_T[i] - k) > window + 1e-12) continue;
    if (y[i] > p.value) p = {t_over_T[i], y[i], sigma ? (*sigma)[i] : 0.0};
  }
  if (p.value < 0.0) throw std::invalid_argument("no samples inside the peak window at k = " + std::to_string(k));
  return p;
}

/// Reference decay of ordinary scar recurrences, 1 / cosh(chi n).
inline double cosh_overlay(double chi, double n) { return 1.0 / std::cosh(chi * n); }

// ---------------------------------------------------------------------------
// Scarmometer

struct Decomposition {
  std::vector<double> energies;
  std::vector<double> weights;  // |<psi_k|phi>|^2
  double captured = 0.0;        // sum of weights
  double out_of_window() const { return std::max(0.0, 1.0 - captured); }
};

inline Decomposition scarmometer(const Wavefunction& phi, const Spectrum& spec) {
  const double n = phi.norm2();
  const Eigen::VectorXcd c = spec.project(phi);
  Decomposition d;
  d.energies = spec.energies;
  d.weights.resize(spec.size());
  for (std::size_t k = 0; k < spec.size(); ++k) d.weights[k] = std::norm(c(k)) / n;
  d.captured = pairwise_sum(d.weights);
  return d;
}

/// |sum_k w_k exp(-i E_k t)|^2 from a decomposition.
inline double spectral_autocorrelation(const Decomposition& d, double t) {
  cplx s = 0.0;
  for (std::size_t k = 0; k < d.weights.size(); ++k) s += d.weights[k] * std::polar(1.0, -d.energies[k] * t);
  return std::norm(s);
}

// ---------------------------------------------------------------------------
// Orientation sweeps

struct SweepOptions {
  int alpha_grid = 24;            // points on [0, 2 pi / q)
  double threshold = 3e-3;        // squared overlaps below are flagged excluded
  PacketWidths widths;
  EnergyMatch match = EnergyMatch::Mean;
  double degenerate_tol = 0.0;    // > 0: states closer than tol * E are treated as one group
};

struct OrientationRecord {
  std::size_t state = 0;
  double energy = 0.0;
  double alpha_max = 0.0;
  double overlap2 = 0.0;
  bool excluded = false;
  std::vector<double> curve;  // overlap^2 on the alpha grid
};

struct OrientationScan {
  int p = 0, q = 0;
  int alpha_grid = 0;
  double alpha_step() const { return two_pi / q / alpha_grid; }
  std::vector<OrientationRecord> records;
};

namespace detail {

/// Groups of consecutive states whose neighbouring gaps are below tol * E.
inline std::vector<std::vector<std::size_t>> degenerate_groups(const std::vector<double>& e, std::size_t lo,
                                                               std::size_t hi, double tol) {
  std::vector<std::vector<std::size_t>> g;
  for (std::size_t k = lo; k < hi; ++k) {
    if (!g.empty() && tol > 0.0 && e[k] - e[g.back().back()] < tol * std::max(1.0, std::abs(e[k])))
      g.back().push_back(k);
    else
      g.push_back({k});
  }
  return g;
}

}  // namespace detail

/// For every state in [lo, hi): build the (p, q) orbit at the state's energy,
/// scan packets over alpha in [0, 2 pi / q) and record the best squared
/// overlap. With degenerate_tol > 0 the overlap of a group is the squared
/// norm of the packet's projection onto the group, shared by its members.
inline OrientationScan orientation_sweep(const Spectrum& spec, std::size_t lo, std::size_t hi, const RadialPotential& V,
                                         int p, int q, const SweepOptions& opt = {}) {
  if (opt.alpha_grid < 8) throw std::invalid_argument("alpha_grid must be at least 8");
  hi = std::min(hi, spec.size());
  OrientationScan scan;
  scan.p = p;
  scan.q = q;
  scan.alpha_grid = opt.alpha_grid;
  // Widen to whole degenerate groups so a pair is never cut by the window.
  std::size_t glo = lo, ghi = hi;
  auto close = [&](std::size_t a, std::size_t b) {
    return opt.degenerate_tol > 0.0 &&
           spec.energies[b] - spec.energies[a] < opt.degenerate_tol * std::max(1.0, std::abs(spec.energies[b]));
  };
  while (glo > 0 && glo < hi && close(glo - 1, glo)) --glo;
  while (ghi < spec.size() && ghi > lo && close(ghi - 1, ghi)) ++ghi;
  const auto groups = detail::degenerate_groups(spec.energies, glo, ghi, opt.degenerate_tol);
  const double step = two_pi / q / opt.alpha_grid;
  auto per_group = parallel_map<std::vector<OrientationRecord>>(groups.size(), [&](std::size_t gi) {
    const auto& grp = groups[gi];
    double E = 0.0;
    for (auto k : grp) E += spec.energies[k];
    E /= static_cast<double>(grp.size());
    std::vector<double> curve(opt.alpha_grid, 0.0);
    try {
      const OrbitSpec orbit = orbit_for_resonance(V, E, p, q);
      for (int a = 0; a < opt.alpha_grid; ++a) {
        const Wavefunction phi = packet_on_orbit(orbit, a * step, V, opt.widths, opt.match).sample(spec.grid);
        double s = 0.0;
        for (auto k : grp) {
          const cplx c = spec.vectors.col(static_cast<Eigen::Index>(k)).cast<cplx>().dot(phi.values) * spec.grid.spacing();
          s += std::norm(c);
        }
        curve[a] = s;
      }
    } catch (const NoOrbitError&) {
      // No such orbit at this energy: all overlaps stay zero.
    }
    const auto best = std::max_element(curve.begin(), curve.end()) - curve.begin();
    std::vector<OrientationRecord> out;
    for (auto k : grp) {
      if (k < lo || k >= hi) continue;
      OrientationRecord r;
      r.state = k;
      r.energy = spec.energies[k];
      r.alpha_max = best * step;
      r.overlap2 = curve[best];
      r.excluded = r.overlap2 < opt.threshold;
      r.curve = curve;
      out.push_back(std::move(r));
    }
    return out;
  });
  for (auto& v : per_group)
    for (auto& r : v) scan.records.push_back(std::move(r));
  return scan;
}

/// Fraction of records at or above the threshold.
inline double scarred_fraction(const OrientationScan& scan) {
  if (scan.records.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& r : scan.records) n += !r.excluded;
  return static_cast<double>(n) / static_cast<double>(scan.records.size());
}

/// q-quantile of the recorded squared overlaps (0 for an empty scan).
inline double overlap_quantile(const OrientationScan& scan, double q) {
  if (scan.records.empty()) return 0.0;
  std::vector<double> v;
  for (const auto& r : scan.records) v.push_back(r.overlap2);
  std::sort(v.begin(), v.end());
  const auto k = static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1) + 0.5);
  return v[k];
}

struct BranchOptions {
  double min_overlap = 0.0;    // records below are ignored, as are excluded ones
  double significance = 3.0;   // required excess over a flat histogram, in Poisson sigmas
  int radius = 1;              // grid steps collected on each side of a mode
  double span_quantile = 0.1;  // energy span runs from this quantile of the members to 1 - it
};

struct Branch {
  double alpha = 0.0;        // mode centre
  std::size_t count = 0;     // states within `radius` steps of the mode
  double expected = 0.0;     // count for a flat histogram
  double e_min = 0.0, e_max = 0.0;
  double span() const { return e_max - e_min; }
  double excess() const { return expected > 0.0 ? (count - expected) / std::sqrt(expected) : 0.0; }
};

/// Modes of the circular alpha_max histogram of the selected records. The
/// histogram uses the sweep's alpha grid, smoothed with a [1 2 1] / 4 kernel;
/// each strict local maximum collects the states within `radius` steps and
/// is kept when that count exceeds the flat expectation by `significance`
/// Poisson sigmas.
inline std::vector<Branch> find_branches(const OrientationScan& scan, const BranchOptions& opt = {}) {
  const int n = scan.alpha_grid;
  const double step = scan.alpha_step();
  std::vector<const OrientationRecord*> sel;
  for (const auto& r : scan.records)
    if (!r.excluded && r.overlap2 >= opt.min_overlap) sel.push_back(&r);
  std::vector<Branch> out;
  if (sel.empty()) return out;
  std::vector<double> hist(n, 0.0);
  for (const auto* r : sel) hist[static_cast<int>(std::lround(r->alpha_max / step)) % n] += 1.0;
  std::vector<double> sm(n);
  for (int i = 0; i < n; ++i) sm[i] = 0.25 * hist[(i + n - 1) % n] + 0.5 * hist[i] + 0.25 * hist[(i + 1) % n];
  const double expected = static_cast<double>(sel.size()) * std::min(n, 2 * opt.radius + 1) / n;
  for (int i = 0; i < n; ++i) {
    const double l = sm[(i + n - 1) % n], r = sm[(i + 1) % n];
    // Plateaus count once, at their first bin.
    if (!(sm[i] > l && sm[i] >= r)) continue;
    Branch b;
    b.alpha = i * step;
    b.expected = expected;
    std::vector<double> es;
    for (const auto* rec : sel) {
      const int d = static_cast<int>(std::lround(std::abs(angle_diff(rec->alpha_max, b.alpha, two_pi / scan.q)) / step));
      if (d <= opt.radius) es.push_back(rec->energy);
    }
    b.count = es.size();
    if (b.excess() < opt.significance) continue;
    std::sort(es.begin(), es.end());
    auto at = [&](double q) { return es[static_cast<std::size_t>(q * static_cast<double>(es.size() - 1) + 0.5)]; };
    b.e_min = at(opt.span_quantile);
    b.e_max = at(1.0 - opt.span_quantile);
    out.push_back(b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Amplitude sweep

struct AmplitudePoint {
  double amplitude = 0.0;
  std::size_t state = 0;
  double energy = 0.0;
  double alpha_max = 0.0;
  double overlap2 = 0.0;
};

struct AmplitudeSweep {
  std::vector<AmplitudePoint> points;
  double alpha_step = 0.0;
  int q = 1;
  /// Largest circular distance between any two tracked alpha_max values.
  double drift() const {
    double d = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t j = i + 1; j < points.size(); ++j)
        d = std::max(d, std::abs(angle_diff(points[i].alpha_max, points[j].alpha_max, two_pi / q)));
    return d;
  }
};

/// For each amplitude: rescale the realization, obtain its spectrum through
/// `solve`, sweep the states within energy_window of e_track plus the
/// field's mean level (mean_impurity) and keep the strongest one.
inline AmplitudeSweep amplitude_sweep(const ImpurityField& field, const std::vector<double>& amplitudes,
                                      const std::function<Spectrum(const ImpurityField&)>& solve,
                                      const RadialPotential& V, int p, int q, double e_track, double energy_window,
                                      const SweepOptions& opt = {}) {
  AmplitudeSweep out;
  out.q = q;
  out.alpha_step = two_pi / q / opt.alpha_grid;
  for (double M : amplitudes) {
    const ImpurityField f = field.with_amplitude(M);
    const Spectrum spec = solve(f);
    const double centre = e_track + mean_impurity(f);
    std::size_t lo = spec.size(), hi = 0;
    for (std::size_t k = 0; k < spec.size(); ++k)
      if (std::abs(spec.energies[k] - centre) <= energy_window) {
        lo = std::min(lo, k);
        hi = k + 1;
      }
    AmplitudePoint pt;
    pt.amplitude = M;
    if (lo < hi) {
      const auto scan = orientation_sweep(spec, lo, hi, V, p, q, opt);
      const auto best = std::max_element(scan.records.begin(), scan.records.end(),
                                         [](const auto& a, const auto& b) { return a.overlap2 < b.overlap2; });
      pt.state = best->state;
      pt.energy = best->energy;
      pt.alpha_max = best->alpha_max;
      pt.overlap2 = best->overlap2;
    }
    out.points.push_back(pt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline void write_orientation_csv(std::ostream& os, const OrientationScan& scan) {
  os << "state,energy,alpha_max,overlap2,excluded\n";
  for (const auto& r : scan.records)
    os << r.state << ',' << fmt17(r.energy) << ',' << fmt17(r.alpha_max) << ',' << fmt17(r.overlap2) << ','
       << (r.excluded ? 1 : 0) << '\n';
}

inline void write_recurrence_csv(std::ostream& os, const RecurrenceSeries& s) {
  os << "t_over_T,quantum,classical\n";
  for (std::size_t i = 0; i < s.t_over_T.size(); ++i)
    os << fmt17(s.t_over_T[i]) << ',' << fmt17(s.quantum[i]) << ','
       << (i < s.classical.size() ? fmt17(s.classical[i]) : std::string("nan")) << '\n';
}

inline void write_decomposition_csv(std::ostream& os, const Decomposition& d) {
  os << "state,energy,weight\n";
  for (std::size_t k = 0; k < d.weights.size(); ++k)
    os << k << ',' << fmt17(d.energies[k]) << ',' << fmt17(d.weights[k]) << '\n';
}

}  // namespace scarlab
