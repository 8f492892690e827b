#pragma once

// Classical mechanics of the radial wells: turning points, the polar-angle
// advance per radial oscillation, periodic-orbit enumeration, symplectic
// trajectories in the perturbed plane, orbit stability and the recurrence of
// a Gaussian phase-space density.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/tools/roots.hpp>

#include "scarlab/core.hpp"
#include "scarlab/potential_field.hpp"

namespace scarlab {

// ---------------------------------------------------------------------------
// Root finding and endpoint-singular quadrature

namespace detail {

/// Root of fn on [lo, hi] (sign change required) to ~1e-15 relative.
template <class Fn>
double bracketed_root(Fn&& fn, double lo, double hi, double flo, double fhi) {
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo > 0.0) == (fhi > 0.0)) throw std::domain_error("root not bracketed");
  std::uintmax_t iters = 200;
  const auto r = boost::math::tools::toms748_solve(fn, lo, hi, flo, fhi,
                                                   boost::math::tools::eps_tolerance<double>(52), iters);
  return 0.5 * (r.first + r.second);
}

template <class Fn>
double bracketed_root(Fn&& fn, double lo, double hi) {
  return bracketed_root(fn, lo, hi, fn(lo), fn(hi));
}

/// Integral over [0, pi] of a smooth integrand g(theta) by the midpoint rule
/// (Gauss-Chebyshev after the substitution r = mid - half cos theta). Node
/// counts triple so earlier samples are reused; stops when two successive
/// estimates agree to `tol`.
template <class G>
double chebyshev_integral(G&& g, double tol = 1e-13, int n0 = 48, int n_max = 48 * 2187) {
  int n = n0;
  double sum = 0.0;
  for (int k = 0; k < n; ++k) sum += g((k + 0.5) * pi / n);
  double prev = sum * pi / n;
  while (n < n_max) {
    // New nodes of the 3n rule are the two thirds not shared with the n rule.
    const int m = 3 * n;
    for (int k = 0; k < m; ++k) {
      if (k % 3 == 1) continue;
      sum += g((k + 0.5) * pi / m);
    }
    n = m;
    const double cur = sum * pi / n;
    if (std::abs(cur - prev) <= tol * std::max(1.0, std::abs(cur))) return cur;
    prev = cur;
  }
  return prev;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Radial motion

struct TurningPoints {
  double r_in = 0.0;
  double r_out = 0.0;
  bool circular() const { return r_in == r_out; }
};

/// Radius of the circular orbit with angular momentum L: r^3 V'(r) = L^2.
inline double circular_radius(const RadialPotential& V, double L) {
  const double L2 = L * L;
  auto fn = [&](double r) { return r * r * r * V.d1(r) - L2; };
  double hi = 1.0;
  while (fn(hi) < 0.0) hi *= 2.0;
  double lo = hi;
  while (fn(lo) > 0.0) lo *= 0.5;
  return detail::bracketed_root(fn, lo, hi);
}

/// Effective potential V(r) + L^2 / (2 r^2).
inline double effective_potential(const RadialPotential& V, double L, double r) {
  return V.value(r) + L * L / (2.0 * r * r);
}

/// Circular orbit at energy E: returns (radius, |L|).
inline std::pair<double, double> circular_orbit(const RadialPotential& V, double E) {
  if (!V.confining()) throw std::invalid_argument("circular orbits need a confining well");
  if (!(E > V.value(0.0))) throw NoOrbitError("energy below the bottom of the well");
  auto fn = [&](double r) { return V.value(r) + 0.5 * r * V.d1(r) - E; };
  double hi = 1.0;
  while (fn(hi) < 0.0) hi *= 2.0;
  double lo = hi;
  while (fn(lo) > 0.0 && lo > 1e-300) lo *= 0.5;
  const double r = detail::bracketed_root(fn, lo, hi);
  return {r, std::sqrt(r * r * r * V.d1(r))};
}

/// Zeros of f(r) = 2 r^2 [E - V(r)] - L^2 bracketing the circular radius.
inline TurningPoints turning_points(const RadialPotential& V, double E, double L) {
  if (L == 0.0) throw std::invalid_argument("turning points need non-zero angular momentum");
  if (!V.confining()) throw std::invalid_argument("turning points need a confining well");
  const double rc = circular_radius(V, L);
  const double emin = effective_potential(V, L, rc);
  const double tol = 1e-14 * std::max(1.0, std::abs(emin));
  if (E < emin - tol) throw NoOrbitError("energy below the effective-potential minimum");
  if (E <= emin + tol) return {rc, rc};
  auto f = [&](double r) { return 2.0 * r * r * (E - V.value(r)) - L * L; };
  double lo = rc;
  while (f(lo) > 0.0) lo *= 0.5;
  double hi = rc;
  while (f(hi) > 0.0) hi *= 2.0;
  return {detail::bracketed_root(f, lo, rc), detail::bracketed_root(f, rc, hi)};
}

namespace detail {

/// h(r) = f(r) / ((r - a)(b - r)), the smooth positive factor of f between
/// the turning points, evaluated at r = a + 2d sin^2(theta/2).
struct RadialSubstitution {
  const RadialPotential& V;
  double E, L, a, b;

  double half() const { return 0.5 * (b - a); }

  double radius(double theta) const {
    if (theta <= 0.5 * pi) {
      const double s = std::sin(0.5 * theta);
      return a + 2.0 * half() * s * s;
    }
    const double c = std::cos(0.5 * theta);
    return b - 2.0 * half() * c * c;
  }

  // f is rewritten as f(r) - f(endpoint) using V.difference, so the factor
  // of (r - a) or (b - r) divides out exactly near either turning point.
  double h(double theta) const {
    const double d = half();
    const double s = std::sin(0.5 * theta), c = std::cos(0.5 * theta);
    const double da = 2.0 * d * s * s, db = 2.0 * d * c * c;
    if (theta <= 0.5 * pi) {
      const double r = a + da;
      const double fa = 2.0 * (2.0 * a + da) * (E - V.value(r)) - 2.0 * a * a * V.difference(a, da) / da;
      return fa / db;
    }
    const double r = b - db;
    const double fb = -2.0 * (r + b) * (E - V.value(r)) + 2.0 * b * b * V.difference(r, db) / db;
    return fb / da;
  }

  /// Limit of h at a double root (circular orbit): -f''(r)/2.
  double h_circular() const {
    const double r = a;
    const double fpp = 4.0 * (E - V.value(r)) - 8.0 * r * V.d1(r) - 2.0 * r * r * V.d2(r);
    return -0.5 * fpp;
  }
};

}  // namespace detail

/// Polar-angle advance over one radial oscillation,
/// integral of 2L / (r sqrt(f)) between the turning points.
inline double delta_phi(const RadialPotential& V, double E, double L) {
  const auto tp = turning_points(V, E, L);
  const double Lm = std::abs(L);
  detail::RadialSubstitution sub{V, E, Lm, tp.r_in, tp.r_out};
  if (tp.circular() || sub.half() < 1e-13 * tp.r_out)
    return pi * 2.0 * Lm / (tp.r_in * std::sqrt(sub.h_circular()));
  return detail::chebyshev_integral([&](double th) {
    return 2.0 * Lm / (sub.radius(th) * std::sqrt(sub.h(th)));
  });
}

/// Time for one radial oscillation, integral of 2 r / sqrt(f).
inline double radial_period(const RadialPotential& V, double E, double L) {
  const auto tp = turning_points(V, E, L);
  detail::RadialSubstitution sub{V, E, std::abs(L), tp.r_in, tp.r_out};
  if (tp.circular() || sub.half() < 1e-13 * tp.r_out)
    return pi * 2.0 * tp.r_in / std::sqrt(sub.h_circular());
  return detail::chebyshev_integral([&](double th) { return 2.0 * sub.radius(th) / std::sqrt(sub.h(th)); });
}

/// Radial action, the closed-loop integral of p_r dr over one oscillation.
/// L = 0 is the straight line through the origin: 2 * integral_0^b sqrt(2(E - V)).
inline double radial_action(const RadialPotential& V, double E, double L) {
  if (L == 0.0) {
    if (!(E > V.value(0.0))) return 0.0;
    const double b = V.radius_at(E);
    // Equals the one-way line integral over x in [-b, b]; x = -b cos(theta)
    // and p^2 = (b^2 - x^2) k(x) with k smooth.
    return detail::chebyshev_integral([&](double th) {
      const double s = std::sin(th);
      const double x = -b * std::cos(th);
      const double w = b * b * s * s;
      if (w == 0.0) return 0.0;
      const double k = std::max(0.0, 2.0 * (E - V.value(std::abs(x)))) / w;
      return std::sqrt(k) * w;
    });
  }
  const double Lm = std::abs(L);
  const double rc = circular_radius(V, Lm);
  if (E <= effective_potential(V, Lm, rc)) return 0.0;
  const auto tp = turning_points(V, E, Lm);
  detail::RadialSubstitution sub{V, E, Lm, tp.r_in, tp.r_out};
  if (tp.circular()) return 0.0;
  const double d = sub.half();
  return detail::chebyshev_integral([&](double th) {
    const double s = std::sin(th);
    return 2.0 * std::sqrt(std::max(0.0, sub.h(th))) * d * d * s * s / sub.radius(th);
  });
}

// ---------------------------------------------------------------------------
// Periodic orbits

/// A closed orbit of the unperturbed well: after q radial oscillations the
/// polar angle has advanced by 2 pi p.
struct OrbitSpec {
  double energy = 0.0;
  double angular_momentum = 0.0;  // magnitude
  int p = 0;
  int q = 0;
  double r_in = 0.0;
  double r_out = 0.0;
  double period = 0.0;  // q radial oscillations
  /// Isochronous well (every L closes, e.g. the harmonic oscillator); the
  /// orbit stands for the whole family.
  bool family = false;

  double radial_period() const { return period / q; }
  /// Orbit's rotational symmetry window 2 pi / q.
  double symmetry_angle() const { return two_pi / q; }
};

struct PhasePoint {
  Vec2 position;
  Vec2 momentum;
};

inline OrbitSpec make_orbit(const RadialPotential& V, double E, double L, int p, int q) {
  const auto tp = turning_points(V, E, L);
  OrbitSpec o;
  o.energy = E;
  o.angular_momentum = std::abs(L);
  o.p = p;
  o.q = q;
  o.r_in = tp.r_in;
  o.r_out = tp.r_out;
  o.period = q * radial_period(V, E, L);
  return o;
}

struct OrbitSearchOptions {
  int brackets = 2048;
  double edge = 1e-6;  // scan (edge L_c, (1 - edge) L_c)
};

/// All primitive resonances p/q with q <= n_max realized at energy E, found
/// as sign changes of sin(q dphi / 2) over a dense L scan and refined on
/// dphi(L) = 2 pi p / q. Sorted by (q, p).
inline std::vector<OrbitSpec> find_periodic_orbits(const RadialPotential& V, double E, int n_max,
                                                   const OrbitSearchOptions& opt = {}) {
  if (n_max < 2) throw std::invalid_argument("n_max must be at least 2");
  const double Lc = circular_orbit(V, E).second;
  const int N = opt.brackets;
  std::vector<double> Ls(static_cast<std::size_t>(N)), dphi(static_cast<std::size_t>(N));
  const double lo = opt.edge * Lc, hi = (1.0 - opt.edge) * Lc;
  for (int i = 0; i < N; ++i) {
    Ls[i] = lo + (hi - lo) * i / (N - 1);
    dphi[i] = delta_phi(V, E, Ls[i]);
  }
  std::vector<OrbitSpec> out;

  const auto [mn, mx] = std::minmax_element(dphi.begin(), dphi.end());
  if (*mx - *mn < 1e-9) {
    // Isochronous well: report the closing ratio once, as a family.
    const double ratio = 0.5 * (*mx + *mn) / two_pi;
    for (int q = 1; q <= n_max; ++q) {
      const int p = static_cast<int>(std::lround(ratio * q));
      if (p > 0 && std::abs(ratio - static_cast<double>(p) / q) < 1e-9) {
        OrbitSpec o = make_orbit(V, E, 0.5 * Lc, p / std::gcd(p, q), q / std::gcd(p, q));
        o.family = true;
        out.push_back(o);
        break;
      }
    }
    return out;
  }

  std::set<std::pair<int, int>> seen;
  for (int q = 2; q <= n_max; ++q) {
    auto g = [&](double dp) { return std::sin(0.5 * q * dp); };
    for (int i = 0; i + 1 < N; ++i) {
      const double g0 = g(dphi[i]), g1 = g(dphi[i + 1]);
      if (!(g0 == 0.0 || (g0 > 0.0) != (g1 > 0.0))) continue;
      const double mid = 0.5 * (dphi[i] + dphi[i + 1]);
      const int p = static_cast<int>(std::lround(q * mid / two_pi));
      if (p <= 0) continue;
      const int gd = std::gcd(p, q);
      if (gd != 1) continue;  // multiple of a shorter orbit; found at q / gd
      if (!seen.insert({p, q}).second) continue;
      const double target = two_pi * p / q;
      auto h = [&](double L) { return delta_phi(V, E, L) - target; };
      const double L = detail::bracketed_root(h, Ls[i], Ls[i + 1], dphi[i] - target, dphi[i + 1] - target);
      out.push_back(make_orbit(V, E, L, p, q));
    }
  }
  std::sort(out.begin(), out.end(), [](const OrbitSpec& a, const OrbitSpec& b) {
    return a.q != b.q ? a.q < b.q : a.p < b.p;
  });
  return out;
}

/// The p/q orbit at energy E (L solving dphi = 2 pi p / q on a bracket scan).
inline OrbitSpec orbit_for_resonance(const RadialPotential& V, double E, int p, int q, int brackets = 256) {
  const double Lc = circular_orbit(V, E).second;
  const double target = two_pi * p / q;
  const double lo = 1e-6 * Lc, hi = (1.0 - 1e-6) * Lc;
  double Lprev = lo, fprev = delta_phi(V, E, lo) - target;
  for (int i = 1; i < brackets; ++i) {
    const double L = lo + (hi - lo) * i / (brackets - 1);
    const double fv = delta_phi(V, E, L) - target;
    if (fprev == 0.0 || (fprev > 0.0) != (fv > 0.0)) {
      const double root = detail::bracketed_root([&](double l) { return delta_phi(V, E, l) - target; },
                                                 Lprev, L, fprev, fv);
      return make_orbit(V, E, root, p, q);
    }
    Lprev = L;
    fprev = fv;
  }
  throw NoOrbitError("no " + std::to_string(p) + "/" + std::to_string(q) + " orbit at this energy");
}

/// Start of the orbit at orientation alpha: the inner turning point, which
/// at alpha = 0 sits on the positive y axis with the motion heading in +x.
inline PhasePoint orbit_start(const OrbitSpec& orbit, double alpha) {
  const double speed = orbit.angular_momentum / orbit.r_in;
  return {rotate({0.0, orbit.r_in}, alpha), rotate({speed, 0.0}, alpha)};
}

// ---------------------------------------------------------------------------
// Symplectic integration

/// Blanes & Moan SRKN_11^b: sixth-order symmetric kick-drift composition.
struct SymplecticScheme {
  std::vector<double> kick;   // n + 1 coefficients
  std::vector<double> drift;  // n coefficients; kick[0] drift[0] kick[1] ... drift[n-1] kick[n]

  static const SymplecticScheme& blanes_moan6() {
    static const SymplecticScheme s = [] {
      const std::array<double, 5> a{0.123229775946271, 0.290553797799558, -0.127049212625417,
                                    -0.246331761062075, 0.357208872795928};
      const std::array<double, 5> b{0.0414649985182624, 0.198128671918067, -0.0400061921041533,
                                    0.0752539843015807, -0.0115113874206879};
      const double b6 = 0.5 - (b[0] + b[1] + b[2] + b[3] + b[4]);
      const double a6 = 1.0 - 2.0 * (a[0] + a[1] + a[2] + a[3] + a[4]);
      SymplecticScheme sc;
      sc.kick = {b[0], b[1], b[2], b[3], b[4], b6, b6, b[4], b[3], b[2], b[1], b[0]};
      sc.drift = {a[0], a[1], a[2], a[3], a[4], a6, a[4], a[3], a[2], a[1], a[0]};
      return sc;
    }();
    return s;
  }

  static const SymplecticScheme& leapfrog() {
    static const SymplecticScheme s{{0.5, 0.5}, {1.0}};
    return s;
  }
};

/// Total potential for classical motion. Bumps beyond 8 sigma are skipped
/// (exp(-32)); the energy reported uses the same truncation, so it is the
/// conserved quantity of the integrated flow.
class ClassicalPotential {
 public:
  ClassicalPotential(const RadialPotential& V, const ImpurityField& field)
      : V_(V), index_(field, 8.0) {}

  double value(Vec2 q) const { return V_.value(norm(q)) + index_.value(q); }
  Vec2 force(Vec2 q) const { return (radial_gradient(V_, q) + index_.gradient(q)) * -1.0; }
  Sym2 hessian(Vec2 q) const { return radial_hessian(V_, q) + index_.hessian(q); }
  double energy(const PhasePoint& z) const { return 0.5 * norm2(z.momentum) + value(z.position); }
  const RadialPotential& well() const { return V_; }

 private:
  RadialPotential V_;
  BumpIndex index_;
};

inline void symplectic_step(const ClassicalPotential& pot, PhasePoint& z, double dt,
                            const SymplecticScheme& sc = SymplecticScheme::blanes_moan6()) {
  const std::size_t n = sc.drift.size();
  for (std::size_t s = 0; s < n; ++s) {
    z.momentum += pot.force(z.position) * (sc.kick[s] * dt);
    z.position += z.momentum * (sc.drift[s] * dt);
  }
  z.momentum += pot.force(z.position) * (sc.kick[n] * dt);
}

struct Trajectory {
  std::vector<double> times;
  std::vector<PhasePoint> points;
};

/// Integrates to t_end with steps of at most dt (the last step is shortened
/// so t_end is hit exactly); records every `stride`-th step and the end point.
inline Trajectory integrate(const PhasePoint& initial, const RadialPotential& V, const ImpurityField& field,
                            double dt, double t_end, std::size_t stride = 1) {
  if (!(dt > 0.0)) throw std::invalid_argument("time step must be positive");
  const ClassicalPotential pot(V, field);
  const auto steps = static_cast<std::size_t>(std::ceil(t_end / dt - 1e-9));
  const double h = steps ? t_end / steps : 0.0;
  Trajectory tr;
  PhasePoint z = initial;
  tr.times.push_back(0.0);
  tr.points.push_back(z);
  for (std::size_t k = 1; k <= steps; ++k) {
    symplectic_step(pot, z, h);
    if (k % stride == 0 || k == steps) {
      tr.times.push_back(k * h);
      tr.points.push_back(z);
    }
  }
  return tr;
}

/// Positions along one period of the unperturbed orbit at orientation alpha,
/// `samples` points equally spaced in time from t = 0 to t = T inclusive.
inline std::vector<Vec2> trace_orbit(const OrbitSpec& orbit, const RadialPotential& V, std::size_t samples,
                                     double alpha = 0.0) {
  if (samples < 2) throw std::invalid_argument("trace needs at least two samples");
  const ClassicalPotential pot(V, ImpurityField{});
  const std::size_t intervals = samples - 1;
  const std::size_t sub = std::max<std::size_t>(1, (20000 + intervals - 1) / intervals);
  const double h = orbit.period / (intervals * sub);
  PhasePoint z = orbit_start(orbit, 0.0);
  std::vector<Vec2> pts;
  pts.reserve(samples);
  pts.push_back(rotate(z.position, alpha));
  for (std::size_t i = 0; i < intervals; ++i) {
    for (std::size_t k = 0; k < sub; ++k) symplectic_step(pot, z, h);
    pts.push_back(rotate(z.position, alpha));
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Stability

struct StabilityReport {
  double chi = 0.0;
  std::array<cplx, 2> monodromy_eigenvalues{};
  Eigen::Matrix4d monodromy = Eigen::Matrix4d::Identity();
  Eigen::Matrix2d reduced = Eigen::Matrix2d::Identity();
  double closure_error = 0.0;
};

namespace detail {

/// Integrates the orbit and its tangent map with the same splitting, so the
/// returned 4x4 monodromy is the exact Jacobian of the discrete flow.
inline std::pair<PhasePoint, Eigen::Matrix4d> flow_with_tangent(const ClassicalPotential& pot, PhasePoint z,
                                                                 double period, std::size_t steps) {
  const auto& sc = SymplecticScheme::blanes_moan6();
  const double h = period / steps;
  Eigen::Matrix4d M = Eigen::Matrix4d::Identity();  // rows: qx qy px py
  auto kick = [&](double c) {
    const Sym2 H = pot.hessian(z.position);
    z.momentum += pot.force(z.position) * (c * h);
    Eigen::Matrix2d Hm;
    Hm << H.xx, H.xy, H.xy, H.yy;
    M.bottomRows<2>() -= (c * h) * Hm * M.topRows<2>();
  };
  auto drift = [&](double c) {
    z.position += z.momentum * (c * h);
    M.topRows<2>() += (c * h) * M.bottomRows<2>();
  };
  for (std::size_t k = 0; k < steps; ++k) {
    for (std::size_t s = 0; s < sc.drift.size(); ++s) {
      kick(sc.kick[s]);
      drift(sc.drift[s]);
    }
    kick(sc.kick.back());
  }
  return {z, M};
}

inline Eigen::Vector4d as_vec(const PhasePoint& z) {
  return {z.position.x, z.position.y, z.momentum.x, z.momentum.y};
}

inline PhasePoint from_vec(const Eigen::Vector4d& v) { return {{v(0), v(1)}, {v(2), v(3)}}; }

}  // namespace detail

/// Monodromy of a closed orbit and the one-period stability exponent chi,
/// log of the largest eigenvalue magnitude of the 2x2 map transverse to the
/// flow on the energy shell.
inline StabilityReport stability_exponent(const PhasePoint& initial, double period, const RadialPotential& V,
                                          const ImpurityField& field, double closure_tol = 1e-6,
                                          std::size_t steps = 20000) {
  const ClassicalPotential pot(V, field);
  const auto [end, M] = detail::flow_with_tangent(pot, initial, period, steps);
  StabilityReport rep;
  rep.monodromy = M;
  rep.closure_error = (detail::as_vec(end) - detail::as_vec(initial)).norm();
  const double scale = std::max(1.0, detail::as_vec(initial).norm());
  if (rep.closure_error > closure_tol * scale)
    throw NotPeriodicError("orbit does not close: |z(T) - z(0)| = " + fmt17(rep.closure_error));

  // Shell basis at the initial point: w1 is a transverse position shift with
  // the momentum correction that keeps dH = 0, w2 a transverse momentum kick.
  const Vec2 p = initial.momentum;
  const double pn = norm(p);
  if (pn == 0.0) throw std::invalid_argument("stability needs a moving phase point");
  const Vec2 t = p / pn, n{-t.y, t.x};
  const Vec2 g = radial_gradient(V, initial.position) + BumpIndex(field, 8.0).gradient(initial.position);
  const double corr = -dot(g, n) / pn;
  Eigen::Vector4d w1(n.x, n.y, corr * t.x, corr * t.y), w2(0.0, 0.0, n.x, n.y);
  const Vec2 f = pot.force(initial.position);
  Eigen::Vector4d flow(p.x, p.y, f.x, f.y);
  Eigen::Matrix<double, 4, 3> B;
  B << w1, w2, flow;
  Eigen::Matrix<double, 4, 2> img;
  img << M * w1, M * w2;
  const Eigen::Matrix<double, 3, 2> coef = B.colPivHouseholderQr().solve(img);
  rep.reduced = coef.topRows<2>();
  Eigen::EigenSolver<Eigen::Matrix2d> es(rep.reduced);
  rep.monodromy_eigenvalues = {es.eigenvalues()(0), es.eigenvalues()(1)};
  rep.chi = std::log(std::max(std::abs(es.eigenvalues()(0)), std::abs(es.eigenvalues()(1))));
  return rep;
}

struct ClosedOrbit {
  PhasePoint start;
  double period = 0.0;
  double residual = 0.0;
  int iterations = 0;
};

/// Newton shooting for a periodic orbit near (guess, period_guess) at fixed
/// energy: solves z(T) = z0 together with a phase condition and H(z0) = E.
inline ClosedOrbit close_orbit(const PhasePoint& guess, double period_guess, const RadialPotential& V,
                               const ImpurityField& field, double tol = 1e-10, int max_iter = 30,
                               std::size_t steps = 20000) {
  const ClassicalPotential pot(V, field);
  const double E = pot.energy(guess);
  Eigen::Vector4d z0 = detail::as_vec(guess);
  double T = period_guess;
  ClosedOrbit out;
  for (int it = 0; it < max_iter; ++it) {
    const auto [end, M] = detail::flow_with_tangent(pot, detail::from_vec(z0), T, steps);
    const Eigen::Vector4d zT = detail::as_vec(end);
    const Eigen::Vector4d res = zT - z0;
    const PhasePoint zp = detail::from_vec(z0);
    const Vec2 f0 = pot.force(zp.position), fT = pot.force(end.position);
    Eigen::Vector4d flow0(zp.momentum.x, zp.momentum.y, f0.x, f0.y);
    Eigen::Vector4d flowT(end.momentum.x, end.momentum.y, fT.x, fT.y);
    Eigen::Vector4d gradH(-f0.x, -f0.y, zp.momentum.x, zp.momentum.y);
    out = {zp, T, res.norm(), it};
    if (res.norm() <= tol * std::max(1.0, z0.norm()) && std::abs(pot.energy(zp) - E) <= tol * std::abs(E))
      return out;
    Eigen::Matrix<double, 6, 5> J = Eigen::Matrix<double, 6, 5>::Zero();
    J.topLeftCorner<4, 4>() = M - Eigen::Matrix4d::Identity();
    J.topRightCorner<4, 1>() = flowT;
    J.block<1, 4>(4, 0) = flow0.transpose();
    J.block<1, 4>(5, 0) = gradH.transpose();
    Eigen::Matrix<double, 6, 1> rhs;
    rhs << -res, 0.0, E - pot.energy(zp);
    const Eigen::Matrix<double, 5, 1> d = J.colPivHouseholderQr().solve(rhs);
    z0 += d.head<4>();
    T += d(4);
  }
  throw NotPeriodicError("orbit closer did not converge; residual " + fmt17(out.residual));
}

// ---------------------------------------------------------------------------
// Classical recurrence of a Gaussian phase-space density

/// Wigner function of a Gaussian packet with position covariance Sigma:
/// G(q, p) = exp(-1/2 dq' Sigma^-1 dq - 2 dp' Sigma dp) / pi^2.
struct WignerGaussian {
  Vec2 q0;
  Vec2 p0;
  Sym2 sigma;  // covariance of |psi|^2

  double value(const PhasePoint& z) const {
    const Vec2 dq = z.position - q0, dp = z.momentum - p0;
    const Sym2 inv = sigma.inverse();
    return std::exp(-0.5 * dot(dq, inv * dq) - 2.0 * dot(dp, sigma * dp)) / (pi * pi);
  }

  PhasePoint sample(Rng& rng) const {
    // Cholesky of Sigma for positions, of Sigma^-1 / 4 for momenta.
    const double l11 = std::sqrt(sigma.xx), l21 = sigma.xy / l11, l22 = std::sqrt(sigma.yy - l21 * l21);
    const Sym2 pc = sigma.inverse() * 0.25;
    const double m11 = std::sqrt(pc.xx), m21 = pc.xy / m11, m22 = std::sqrt(pc.yy - m21 * m21);
    const double a = rng.normal(), b = rng.normal(), c = rng.normal(), d = rng.normal();
    return {{q0.x + l11 * a, q0.y + l21 * a + l22 * b}, {p0.x + m11 * c, p0.y + m21 * c + m22 * d}};
  }
};

struct RecurrenceCurve {
  std::vector<double> times;
  std::vector<double> strength;  // I(t) / I(0)
  std::vector<double> sigma;     // Monte-Carlo standard error of strength
};

/// Samples n phase points from G, propagates each and returns
/// I(t) = sum_i G(z_i(t)) normalized by its own t = 0 value. Deterministic in
/// the seed; per-sample streams make it independent of the thread count.
inline RecurrenceCurve classical_recurrence(const WignerGaussian& packet, const RadialPotential& V,
                                            const ImpurityField& field, std::size_t n_samples,
                                            std::uint64_t seed, std::vector<double> times, double dt) {
  if (n_samples < 1) throw std::invalid_argument("need at least one classical sample");
  if (!(dt > 0.0)) throw std::invalid_argument("time step must be positive");
  std::sort(times.begin(), times.end());
  const ClassicalPotential pot(V, field);
  constexpr std::size_t kBlock = 1024;
  const std::size_t nblocks = (n_samples + kBlock - 1) / kBlock;
  const std::size_t nt = times.size();
  // Per-block sums of G and G^2 at every output time, plus G at t = 0.
  struct BlockSums {
    std::vector<double> g, g2;
    double g0 = 0.0;
    std::vector<double> cross;  // sum of G(t) G(0), for the ratio's error
    double g0sq = 0.0;
  };
  auto blocks = parallel_map<BlockSums>(nblocks, [&](std::size_t blk) {
    BlockSums s;
    s.g.assign(nt, 0.0);
    s.g2.assign(nt, 0.0);
    s.cross.assign(nt, 0.0);
    const std::size_t lo = blk * kBlock, hi = std::min(n_samples, lo + kBlock);
    for (std::size_t i = lo; i < hi; ++i) {
      Rng rng(mix_seed(seed, i));
      PhasePoint z = packet.sample(rng);
      const double g0 = packet.value(z);
      s.g0 += g0;
      s.g0sq += g0 * g0;
      double t = 0.0;
      for (std::size_t k = 0; k < nt; ++k) {
        const double span = times[k] - t;
        if (span > 0.0) {
          const auto steps = static_cast<std::size_t>(std::ceil(span / dt - 1e-9));
          const double h = span / steps;
          for (std::size_t st = 0; st < steps; ++st) symplectic_step(pot, z, h);
          t = times[k];
        }
        const double gv = packet.value(z);
        s.g[k] += gv;
        s.g2[k] += gv * gv;
        s.cross[k] += gv * g0;
      }
    }
    return s;
  });
  RecurrenceCurve out;
  out.times = times;
  std::vector<double> g0s(nblocks), g0sq(nblocks);
  for (std::size_t b = 0; b < nblocks; ++b) {
    g0s[b] = blocks[b].g0;
    g0sq[b] = blocks[b].g0sq;
  }
  const double n = static_cast<double>(n_samples);
  const double G0 = pairwise_sum(g0s), G0sq = pairwise_sum(g0sq);
  for (std::size_t k = 0; k < nt; ++k) {
    std::vector<double> gs(nblocks), g2s(nblocks), cr(nblocks);
    for (std::size_t b = 0; b < nblocks; ++b) {
      gs[b] = blocks[b].g[k];
      g2s[b] = blocks[b].g2[k];
      cr[b] = blocks[b].cross[k];
    }
    const double G = pairwise_sum(gs), G2 = pairwise_sum(g2s), C = pairwise_sum(cr);
    const double ratio = times[k] == 0.0 ? 1.0 : G / G0;
    // Delta-method error of a ratio of sample means.
    const double mg = G / n, m0 = G0 / n;
    const double vg = std::max(0.0, G2 / n - mg * mg), v0 = std::max(0.0, G0sq / n - m0 * m0);
    const double cv = C / n - mg * m0;
    const double var = (vg - 2.0 * ratio * cv + ratio * ratio * v0) / (n * m0 * m0);
    out.strength.push_back(ratio);
    out.sigma.push_back(times[k] == 0.0 ? 0.0 : std::sqrt(std::max(0.0, var)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline void write_orbits_csv(std::ostream& os, const std::vector<OrbitSpec>& orbits) {
  os << "p,q,L,r_in,r_out,T,E\n";
  for (const auto& o : orbits)
    os << o.p << ',' << o.q << ',' << fmt17(o.angular_momentum) << ',' << fmt17(o.r_in) << ',' << fmt17(o.r_out)
       << ',' << fmt17(o.period) << ',' << fmt17(o.energy) << '\n';
}

inline void write_recurrence_csv(std::ostream& os, const RecurrenceCurve& c) {
  os << "t,I\n";
  for (std::size_t i = 0; i < c.times.size(); ++i) os << fmt17(c.times[i]) << ',' << fmt17(c.strength[i]) << '\n';
}

}  // namespace scarlab
