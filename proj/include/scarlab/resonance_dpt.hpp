#pragma once

// Unperturbed polar basis (n_r, m) of a radial well, resonant sets of
// near-degenerate doublets, and scar reconstruction by diagonalizing the
// impurity potential inside a set (DPT) or together with the small
// detunings (qDPT).

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <ostream>
#include <memory>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss.hpp>

#include "scarlab/classical_dynamics.hpp"
#include "scarlab/core.hpp"
#include "scarlab/potential_field.hpp"
#include "scarlab/quantum_solver.hpp"

namespace scarlab {

// ---------------------------------------------------------------------------
// Radial functions

/// R(r) on Chebyshev points of [-R_max, R_max] with parity (-1)^m, evaluated
/// anywhere in [0, R_max] by barycentric interpolation; zero beyond.
class RadialFunction {
 public:
  RadialFunction(double r_max, std::vector<double> nodes, std::vector<double> values)
      : r_max_(r_max), x_(std::move(nodes)), f_(std::move(values)), w_(x_.size()) {
    for (std::size_t j = 0; j < x_.size(); ++j) w_[j] = (j % 2 ? -1.0 : 1.0) * (j == 0 || j + 1 == x_.size() ? 0.5 : 1.0);
  }

  double operator()(double r) const {
    if (r >= r_max_) return 0.0;
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < x_.size(); ++j) {
      const double d = r - x_[j];
      if (d == 0.0) return f_[j];
      const double t = w_[j] / d;
      num += t * f_[j];
      den += t;
    }
    return num / den;
  }

  /// Four-point Lagrange interpolation on a uniform table with 16 entries
  /// per Chebyshev node, built on first use. Agrees with operator() to
  /// about 1e-9 of the profile's maximum except in the last few percent
  /// of the extent, where the Chebyshev nodes crowd and the profile is
  /// already negligible.
  double fast(double r) const {
    if (r >= r_max_) return 0.0;
    std::call_once(table_once_, [this] {
      const std::size_t n = 16 * x_.size();
      table_.resize(n + 3);
      dr_ = r_max_ / static_cast<double>(n);
      // Entry i holds R((i - 1) dr); R is even or odd, so R(-dr) = +-R(dr).
      for (std::size_t i = 1; i < n + 3; ++i) table_[i] = (*this)(std::min(r_max_, (i - 1.0) * dr_));
      table_[n + 2] = table_[n + 1] = 0.0;
      table_[0] = parity_even() ? table_[2] : -table_[2];
    });
    const double t = r / dr_;
    const auto i = static_cast<std::size_t>(t);
    const double u = t - static_cast<double>(i);
    const double* y = &table_[i];
    return -u * (u - 1.0) * (u - 2.0) / 6.0 * y[0] + (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0 * y[1] -
           (u + 1.0) * u * (u - 2.0) / 2.0 * y[2] + (u + 1.0) * u * (u - 1.0) / 6.0 * y[3];
  }

  double extent() const { return r_max_; }
  const std::vector<double>& nodes() const { return x_; }
  const std::vector<double>& values() const { return f_; }
  void scale(double s) {
    for (auto& v : f_) v *= s;
  }

 private:
  // Nodes span [-R, R] symmetrically; compare the values at +-x.
  bool parity_even() const {
    const std::size_t n = x_.size();
    double e = 0.0, o = 0.0;
    for (std::size_t j = 0; j < n / 2; ++j) {
      e += std::abs(f_[j] - f_[n - 1 - j]);
      o += std::abs(f_[j] + f_[n - 1 - j]);
    }
    return e <= o;
  }

  double r_max_;
  std::vector<double> x_, f_, w_;
  mutable std::once_flag table_once_;
  mutable std::vector<double> table_;
  mutable double dr_ = 0.0;
};

/// psi = R(r) e^{i m phi} / sqrt(2 pi) with integral R^2 r dr = 1; the
/// reduced u(r) = sqrt(r) R(r) is normalized on [0, inf).
struct RadialBasisState {
  int n_r = 0;
  int m = 0;
  double energy = 0.0;
  double residual = 0.0;  // max |H R - E R| / (E max|R|) on the nodes
  std::shared_ptr<const RadialFunction> profile;

  double radial(double r) const { return (*profile)(r); }
  double u(double r) const { return std::sqrt(r) * radial(r); }
  cplx value(Vec2 p) const {
    const double r = norm(p);
    return radial(r) * std::polar(1.0 / std::sqrt(two_pi), m * std::atan2(p.y, p.x));
  }
  /// value() through the tabulated profile.
  cplx value_fast(Vec2 p) const {
    const double r = norm(p);
    return profile->fast(r) * std::polar(1.0 / std::sqrt(two_pi), m * std::atan2(p.y, p.x));
  }
};

struct RadialBasisOptions {
  int nodes = 0;          // Chebyshev points on [-R, R], odd; 0 picks from E_max
  double extent = 0.0;    // R; 0 picks the radius where V = 3 E_max
};

namespace detail {

/// Chebyshev points x_j = R cos(pi j / N) and the first-derivative matrix.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> cheb(int N, double R) {
  Eigen::VectorXd x(N + 1), c(N + 1);
  for (int j = 0; j <= N; ++j) {
    x(j) = std::cos(pi * j / N);
    c(j) = (j == 0 || j == N ? 2.0 : 1.0) * (j % 2 ? -1.0 : 1.0);
  }
  Eigen::MatrixXd D(N + 1, N + 1);
  for (int i = 0; i <= N; ++i)
    for (int j = 0; j <= N; ++j)
      D(i, j) = i == j ? 0.0 : (c(i) / c(j)) / (x(i) - x(j));
  for (int i = 0; i <= N; ++i) D(i, i) = -D.row(i).sum();
  return {x * R, D / R};
}

/// Radial eigenproblem for one |m| on the folded Chebyshev grid.
inline std::vector<RadialBasisState> solve_radial_m(const RadialPotential& V, int m, double E_max, int N, double R) {
  const auto [x, D] = cheb(N, R);
  const Eigen::MatrixXd D2 = D * D;
  const int h = (N - 1) / 2;  // interior nodes with x > 0 are j = 1..h
  const double s = (m % 2) ? -1.0 : 1.0;
  Eigen::MatrixXd A(h, h);
  for (int i = 0; i < h; ++i) {
    const int I = i + 1;
    const double r = x(I);
    for (int j = 0; j < h; ++j) {
      const int J = j + 1, Jm = N - J;
      const double d2 = D2(I, J) + s * D2(I, Jm), d1 = D(I, J) + s * D(I, Jm);
      A(i, j) = -0.5 * (d2 + d1 / r);
    }
    A(i, i) += 0.5 * m * m / (r * r) + V.value(r);
  }
  Eigen::EigenSolver<Eigen::MatrixXd> es(A);
  std::vector<std::pair<double, int>> order;
  for (int k = 0; k < h; ++k) {
    const cplx ev = es.eigenvalues()(k);
    if (std::abs(ev.imag()) <= 1e-9 * std::max(1.0, std::abs(ev.real())) && ev.real() <= E_max)
      order.push_back({ev.real(), k});
  }
  std::sort(order.begin(), order.end());
  boost::math::quadrature::gauss<double, 60> gl;
  std::vector<RadialBasisState> out;
  for (std::size_t n = 0; n < order.size(); ++n) {
    const int k = order[n].second;
    Eigen::VectorXd v = es.eigenvectors().col(k).real();
    std::vector<double> nodes(N + 1), vals(N + 1, 0.0);
    for (int j = 0; j <= N; ++j) nodes[j] = x(j);
    for (int j = 0; j < h; ++j) {
      vals[j + 1] = v(j);
      vals[N - 1 - j] = s * v(j);
    }
    auto f = std::make_shared<RadialFunction>(R, nodes, vals);
    // Normalize: integral of R^2 r dr over [0, R], split into panels.
    double integral = 0.0;
    const int panels = 8;
    for (int p = 0; p < panels; ++p) {
      const double a = R * p / panels, b = R * (p + 1) / panels;
      integral += gl.integrate([&](double r) { const double y = (*f)(r); return y * y * r; }, a, b);
    }
    double norm_s = 1.0 / std::sqrt(integral);
    // Sign: positive just outside the origin region (first node from the inside with |R| significant).
    double ref = 0.0;
    for (int j = h; j >= 1 && ref == 0.0; --j)
      if (std::abs(vals[j]) > 1e-3 * v.cwiseAbs().maxCoeff()) ref = vals[j];
    if (ref < 0.0) norm_s = -norm_s;
    f->scale(norm_s);
    const Eigen::VectorXd vs = v * norm_s;
    const double resid = (A * vs - order[n].first * vs).cwiseAbs().maxCoeff() /
                         (std::max(1.0, std::abs(order[n].first)) * vs.cwiseAbs().maxCoeff());
    RadialBasisState st;
    st.n_r = static_cast<int>(n);
    st.m = m;
    st.energy = order[n].first;
    st.residual = resid;
    st.profile = std::move(f);
    out.push_back(std::move(st));
  }
  return out;
}

}  // namespace detail

/// All (n_r, m) states with |m| <= m_max and E <= E_max, sorted by energy
/// (ties: m ascending). Each |m| is solved once; +m and -m share a profile.
inline std::vector<RadialBasisState> solve_radial_basis(const RadialPotential& V, int m_max, double E_max,
                                                        const RadialBasisOptions& opt = {}) {
  if (m_max < 0) throw std::invalid_argument("m_max must be non-negative");
  if (!V.confining()) throw std::invalid_argument("radial basis needs a confining well");
  const double R = opt.extent > 0.0 ? opt.extent : V.radius_at(3.0 * std::max(E_max, 1.0));
  const double r_turn = V.radius_at(E_max);
  if (R < 1.1 * r_turn)
    throw GridTooCoarseError("radial extent " + fmt17(R) + " too close to the turning radius " + fmt17(r_turn) +
                             "; need at least " + fmt17(1.1 * r_turn));
  int N = opt.nodes;
  if (N <= 0) {
    const double k = std::sqrt(2.0 * std::max(E_max, 1.0));
    N = static_cast<int>(std::ceil(3.0 * k * R)) + 60;
  }
  if (N % 2 == 0) ++N;
  auto per_m = parallel_map<std::vector<RadialBasisState>>(
      static_cast<std::size_t>(m_max + 1), [&](std::size_t m) { return detail::solve_radial_m(V, static_cast<int>(m), E_max, N, R); });
  std::vector<RadialBasisState> out;
  for (int m = 0; m <= m_max; ++m)
    for (const auto& st : per_m[m]) {
      if (m > 0) {
        RadialBasisState neg = st;
        neg.m = -m;
        out.push_back(std::move(neg));
      }
      out.push_back(st);
    }
  std::stable_sort(out.begin(), out.end(), [](const RadialBasisState& a, const RadialBasisState& b) {
    return a.energy != b.energy ? a.energy < b.energy : a.m < b.m;
  });
  return out;
}

/// Largest |m| with a state below E: the circular-orbit angular momentum.
inline int max_angular_momentum(const RadialPotential& V, double E) {
  return static_cast<int>(std::ceil(circular_orbit(V, E).second)) + 1;
}

/// Radial basis states sampled on the 2D grid as real orthonormal columns
/// (m = 0: R/sqrt(2 pi); m > 0: R cos(m phi)/sqrt(pi) and R sin(m phi)/sqrt(pi)),
/// lowest `count` states. Used as a starting subspace for the 2D solver.
inline Eigen::MatrixXd polar_subspace(const std::vector<RadialBasisState>& basis, const Grid2D& grid,
                                      std::size_t count) {
  std::vector<const RadialBasisState*> picks;
  for (const auto& st : basis)
    if (st.m >= 0) picks.push_back(&st);
  // Columns per pick: 1 for m = 0, 2 otherwise; keep energy order.
  std::vector<std::pair<const RadialBasisState*, int>> cols;
  for (const auto* st : picks) {
    if (cols.size() >= count) break;
    cols.push_back({st, 0});
    if (st->m > 0 && cols.size() < count) cols.push_back({st, 1});
  }
  const std::size_t N = grid.size();
  std::vector<double> rr(N), ph(N);
  for (std::size_t k = 0; k < N; ++k) {
    const Vec2 p = grid.node(k);
    rr[k] = norm(p);
    ph[k] = std::atan2(p.y, p.x);
  }
  // Radial profiles are tabulated on a fine uniform grid and interpolated
  // linearly; this is a starting guess, not a final answer.
  const double rmax = basis.empty() ? 1.0 : basis.front().profile->extent();
  const int table = 4096;
  Eigen::MatrixXd X(N, cols.size());
  parallel_for(cols.size(), [&](std::size_t c) {
    const auto* st = cols[c].first;
    std::vector<double> tab(table + 1);
    for (int i = 0; i <= table; ++i) tab[i] = st->radial(rmax * i / table);
    for (std::size_t k = 0; k < N; ++k) {
      double val = 0.0;
      if (rr[k] < rmax) {
        const double t = rr[k] / rmax * table;
        const int i = std::min(table - 1, static_cast<int>(t));
        val = tab[i] + (t - i) * (tab[i + 1] - tab[i]);
      }
      const double ang = st->m == 0 ? 1.0 / std::sqrt(two_pi)
                                    : (cols[c].second == 0 ? std::cos(st->m * ph[k]) : std::sin(st->m * ph[k])) /
                                          std::sqrt(pi);
      X(k, c) = val * ang * grid.spacing();
    }
  });
  return X;
}

// ---------------------------------------------------------------------------
// Bohr-Sommerfeld

/// E with radial action 2 pi (n_r + 1/2) at L = |m|.
inline double bohr_sommerfeld_energy(const RadialPotential& V, int n_r, int m) {
  if (n_r < 0) throw std::invalid_argument("n_r must be non-negative");
  const double L = std::abs(m);
  const double target = two_pi * (n_r + 0.5);
  auto g = [&](double E) { return radial_action(V, E, L) - target; };
  double lo = L > 0.0 ? effective_potential(V, L, circular_radius(V, L)) : V.value(0.0);
  double hi = std::max(2.0 * lo, 1.0);
  while (g(hi) < 0.0) hi *= 2.0;
  return detail::bracketed_root(g, lo, hi, -target, g(hi));
}

// ---------------------------------------------------------------------------
// Resonant sets

struct SetMember {
  int k = 0;
  int n_r = 0;
  int m = 0;  // |m| of the doublet, >= 0
  double energy = 0.0;
};

struct ResonantSet {
  int p = 0, q = 0;
  int center_n_r = 0, center_m = 0;
  std::vector<SetMember> members;  // doublets, sorted by k
  double spread = 0.0;             // max - min member energy
  double center_energy = 0.0;

  bool empty() const { return members.empty(); }
  /// Complex basis states of the subspace: (n_r, +m) and (n_r, -m) per doublet, one for m = 0.
  std::vector<std::pair<int, int>> states() const {
    std::vector<std::pair<int, int>> out;
    for (const auto& mb : members) {
      out.push_back({mb.n_r, mb.m});
      if (mb.m != 0) out.push_back({mb.n_r, -mb.m});
    }
    return out;
  }
};

/// Mean level spacing at E from the Weyl density, 1 / (dN/dE).
inline double mean_level_spacing(const RadialPotential& V, double E) {
  const double h = 1e-3 * std::max(1.0, E);
  return 2.0 * h / (weyl_count(V, E + h) - weyl_count(V, E - h));
}

/// Looks up (n_r, m) in the basis; nullptr when absent.
inline const RadialBasisState* find_state(const std::vector<RadialBasisState>& basis, int n_r, int m) {
  for (const auto& st : basis)
    if (st.n_r == n_r && st.m == m) return &st;
  return nullptr;
}

/// Doublets (n_r + k p, |m - k q|) for |k| <= k_range, nearest in energy to
/// the centre first, admitted while the set's energy spread stays within
/// energy_window.
inline ResonantSet build_resonant_set(const std::vector<RadialBasisState>& basis, int p, int q, int center_n_r,
                                      int center_m, int k_range, double energy_window) {
  const auto* c = find_state(basis, center_n_r, center_m);
  if (!c) throw std::invalid_argument("centre state (" + std::to_string(center_n_r) + ", " + std::to_string(center_m) +
                                      ") is not in the basis");
  ResonantSet set;
  set.p = p;
  set.q = q;
  set.center_n_r = center_n_r;
  set.center_m = std::abs(center_m);
  set.center_energy = c->energy;
  std::vector<SetMember> cand;
  for (int k = -k_range; k <= k_range; ++k) {
    const int nr = center_n_r + k * p, m = std::abs(std::abs(center_m) - k * q);
    if (nr < 0) continue;
    if (const auto* st = find_state(basis, nr, m)) cand.push_back({k, nr, m, st->energy});
  }
  auto dist = [&](const SetMember& a) { return std::abs(a.energy - c->energy); };
  std::stable_sort(cand.begin(), cand.end(), [&](const SetMember& a, const SetMember& b) {
    return dist(a) != dist(b) ? dist(a) < dist(b) : std::abs(a.k) < std::abs(b.k);
  });
  double lo = c->energy, hi = c->energy;
  for (const auto& mb : cand) {
    const double nlo = std::min(lo, mb.energy), nhi = std::max(hi, mb.energy);
    if (nhi - nlo > energy_window) continue;
    lo = nlo;
    hi = nhi;
    set.members.push_back(mb);
  }
  std::sort(set.members.begin(), set.members.end(), [](const SetMember& a, const SetMember& b) { return a.k < b.k; });
  set.spread = hi - lo;
  return set;
}

// ---------------------------------------------------------------------------
// Impurity matrix elements

/// <i|V_imp|j> for the listed basis states, by per-bump trapezoid patches
/// of half-size 8 sigma and spacing sigma/4 (V_imp is a sum of bumps, so
/// patches may overlap without double counting).
inline Eigen::MatrixXcd vimp_matrix(const std::vector<const RadialBasisState*>& states, const ImpurityField& field) {
  const std::size_t n = states.size();
  Eigen::MatrixXcd M = Eigen::MatrixXcd::Zero(n, n);
  if (n == 0 || field.empty()) return M;
  const double rmax = states.front()->profile->extent();
  auto per_bump = parallel_map<Eigen::MatrixXcd>(field.bumps.size(), [&](std::size_t b) {
    const auto& bump = field.bumps[b];
    Eigen::MatrixXcd acc = Eigen::MatrixXcd::Zero(n, n);
    const double half = 8.0 * bump.sigma, h = bump.sigma / 4.0;
    if (norm(bump.center) - half > rmax) return acc;
    const int cnt = static_cast<int>(std::lround(2.0 * half / h));
    Eigen::VectorXcd vals(n);
    for (int j = 0; j <= cnt; ++j)
      for (int i = 0; i <= cnt; ++i) {
        const Vec2 p{bump.center.x - half + i * h, bump.center.y - half + j * h};
        const double g = bump.value(p);
        const double w = (i == 0 || i == cnt ? 0.5 : 1.0) * (j == 0 || j == cnt ? 0.5 : 1.0) * g * h * h;
        const double r = norm(p);
        if (r >= rmax) continue;
        const double phi = std::atan2(p.y, p.x);
        for (std::size_t s = 0; s < n; ++s)
          vals(s) = states[s]->profile->fast(r) * std::polar(1.0 / std::sqrt(two_pi), states[s]->m * phi);
        acc.noalias() += w * vals.conjugate() * vals.transpose();
      }
    return acc;
  });
  for (const auto& a : per_bump) M += a;
  return 0.5 * (M + M.adjoint());
}

inline std::vector<const RadialBasisState*> set_states(const ResonantSet& set,
                                                       const std::vector<RadialBasisState>& basis) {
  std::vector<const RadialBasisState*> out;
  for (const auto& [nr, m] : set.states()) {
    const auto* st = find_state(basis, nr, m);
    if (!st) throw std::invalid_argument("resonant-set member missing from the basis");
    out.push_back(st);
  }
  return out;
}

inline Eigen::MatrixXcd vimp_matrix(const ResonantSet& set, const std::vector<RadialBasisState>& basis,
                                    const ImpurityField& field) {
  return vimp_matrix(set_states(set, basis), field);
}

// ---------------------------------------------------------------------------
// DPT / qDPT

enum class DptMode { DPT, qDPT };

inline const char* mode_name(DptMode m) { return m == DptMode::DPT ? "DPT" : "qDPT"; }

struct DptResult {
  DptMode mode = DptMode::DPT;
  Eigen::VectorXd eigenvalues;     // ascending
  Eigen::MatrixXcd eigenvectors;   // columns: coefficients over set_states
  Eigen::VectorXd vimp_expect;     // <V_imp> per eigenvector
  std::vector<const RadialBasisState*> states;
};

/// DPT: eigenpairs of the projected V_imp. qDPT: of diag(E_k - E_centre) + V_imp.
inline DptResult dpt_diagonalize(const ResonantSet& set, const std::vector<RadialBasisState>& basis,
                                 const ImpurityField& field, DptMode mode, const Eigen::MatrixXcd* vimp = nullptr) {
  DptResult r;
  r.mode = mode;
  r.states = set_states(set, basis);
  const Eigen::MatrixXcd V = vimp ? *vimp : vimp_matrix(r.states, field);
  Eigen::MatrixXcd A = V;
  if (mode == DptMode::qDPT)
    for (std::size_t k = 0; k < r.states.size(); ++k) A(k, k) += r.states[k]->energy - set.center_energy;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(A);
  r.eigenvalues = es.eigenvalues();
  r.eigenvectors = es.eigenvectors();
  r.vimp_expect.resize(A.cols());
  for (Eigen::Index k = 0; k < A.cols(); ++k) {
    const Eigen::VectorXcd c = r.eigenvectors.col(k);
    r.vimp_expect(k) = c.dot(V * c).real();
  }
  return r;
}

/// Wavefunction sum_k c_k psi_k on the grid.
inline Wavefunction reconstruct(const DptResult& r, Eigen::Index column, const Grid2D& grid) {
  const Eigen::VectorXcd c = r.eigenvectors.col(column);
  Eigen::VectorXcd v = Eigen::VectorXcd::Zero(grid.size());
  const double rmax = r.states.front()->profile->extent();
  parallel_for(grid.size(), [&](std::size_t k) {
    const Vec2 p = grid.node(k);
    if (norm(p) >= rmax) return;
    cplx s = 0.0;
    for (std::size_t j = 0; j < r.states.size(); ++j) s += c(j) * r.states[j]->value_fast(p);
    v(k) = s;
  });
  return {grid, std::move(v)};
}

struct Match {
  std::size_t state = 0;
  double overlap2 = 0.0;
};

/// Exact eigenstate of maximal squared overlap with psi among states whose
/// energy lies in [e_lo, e_hi].
inline Match best_match(const Wavefunction& psi, const Spectrum& spec, double e_lo, double e_hi) {
  const Eigen::VectorXcd c = spec.project(psi);
  Match m;
  m.overlap2 = -1.0;
  for (std::size_t k = 0; k < spec.size(); ++k) {
    if (spec.energies[k] < e_lo || spec.energies[k] > e_hi) continue;
    const double o = std::norm(c(k));
    if (o > m.overlap2) m = {k, o};
  }
  if (m.overlap2 < 0.0) m.overlap2 = 0.0;
  return m;
}

/// Norm of couplings inside the set over the norm of couplings from the set
/// to other basis states within `window` of the centre energy.
inline double coupling_ratio(const ResonantSet& set, const std::vector<RadialBasisState>& basis,
                             const ImpurityField& field, double window) {
  auto in = set_states(set, basis);
  std::vector<const RadialBasisState*> all = in;
  for (const auto& st : basis) {
    if (std::abs(st.energy - set.center_energy) > window) continue;
    if (std::find(in.begin(), in.end(), &st) == in.end()) all.push_back(&st);
  }
  const Eigen::MatrixXcd M = vimp_matrix(all, field);
  const auto n = static_cast<Eigen::Index>(in.size());
  const double inside = M.topLeftCorner(n, n).norm();
  const double outside = M.topRightCorner(n, M.cols() - n).norm();
  return outside > 0.0 ? inside / outside : std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// Scar analysis

/// psi_k on the grid nodes, zero beyond the profile's extent.
inline Eigen::VectorXcd sample_basis_state(const RadialBasisState& st, const Grid2D& grid) {
  Eigen::VectorXcd v = Eigen::VectorXcd::Zero(grid.size());
  const double rmax = st.profile->extent();
  parallel_for(grid.size(), [&](std::size_t k) {
    const Vec2 p = grid.node(k);
    if (norm(p) < rmax) v(k) = st.value_fast(p);
  });
  return v;
}

struct ScarOptions {
  int p = 2, q = 5;
  int k_range = 2;
  double window_factor = 1.5;   // largest set energy spread, in mean level spacings
  double search_factor = 15.0;  // centre search window, in mean level spacings
  int random_trials = 200;
  std::uint64_t seed = 1;
};

struct ScarAnalysis {
  std::size_t state = 0;
  double energy = 0.0;
  int candidates = 0;          // distinct resonant sets tried
  ResonantSet set;             // the set whose qDPT state is closest to the scar
  double scar_overlap2 = 0.0;  // |<scar|qDPT state>|^2, best over the set
  Match qdpt, dpt;             // best exact-state match over each mode's states
  DptResult qdpt_result, dpt_result;
  std::vector<Match> qdpt_matches, dpt_matches;  // per eigenvector
  bool max_type = false;       // the scar's qDPT state has the largest <V_imp> in the set
  double top_vimp = 0.0;       // largest DPT eigenvalue
  double random_vimp = 0.0;    // largest <V_imp> over random unit vectors of the set
};

/// Finds the resonant set behind eigenstate k. Centres are basis doublets
/// with |m - L| <= q / 2, L the p/q orbit's angular momentum at E_k, whose
/// energy plus the mean impurity potential lies within search_factor level
/// spacings of E_k. Each centre's set is diagonalized (qDPT) and the set
/// whose reconstruction overlaps the state most is kept; its qDPT and DPT
/// reconstructions are then matched against all exact states in the search
/// window.
inline ScarAnalysis analyze_scar(const Spectrum& spec, std::size_t k, const RadialPotential& V,
                                 const std::vector<RadialBasisState>& basis, const ImpurityField& field,
                                 const ScarOptions& opt = {}) {
  if (k >= spec.size()) throw std::out_of_range("spectrum has no state " + std::to_string(k));
  ScarAnalysis out;
  out.state = k;
  out.energy = spec.energies[k];
  const double E = out.energy;
  const double L = orbit_for_resonance(V, E, opt.p, opt.q).angular_momentum;
  const double spacing = mean_level_spacing(V, E);
  const double shift = mean_impurity(field);
  const Eigen::VectorXd psi = spec.vectors.col(static_cast<Eigen::Index>(k));

  std::map<const RadialBasisState*, Eigen::VectorXcd> samples;
  auto sampled = [&](const std::vector<const RadialBasisState*>& st) {
    Eigen::MatrixXcd B(static_cast<Eigen::Index>(spec.grid.size()), static_cast<Eigen::Index>(st.size()));
    for (std::size_t j = 0; j < st.size(); ++j) {
      auto it = samples.find(st[j]);
      if (it == samples.end()) it = samples.emplace(st[j], sample_basis_state(*st[j], spec.grid)).first;
      B.col(static_cast<Eigen::Index>(j)) = it->second;
    }
    return B;
  };
  // |<psi|B c>|^2 / |B c|^2 for every column of C.
  auto overlaps = [&](const Eigen::MatrixXcd& B, const Eigen::MatrixXcd& C) {
    const Eigen::MatrixXcd R = B * C;
    const Eigen::RowVectorXcd pr = psi.transpose().cast<cplx>() * R;
    Eigen::VectorXd o(C.cols());
    for (Eigen::Index j = 0; j < C.cols(); ++j) o(j) = std::norm(pr(j)) / R.col(j).squaredNorm();
    return o;
  };

  std::set<std::vector<std::pair<int, int>>> seen;
  Eigen::MatrixXcd best_vimp;
  for (const auto& c : basis) {
    if (c.m <= 0 || std::abs(c.m - L) > 0.5 * opt.q) continue;
    if (std::abs(c.energy + shift - E) > opt.search_factor * spacing) continue;
    ResonantSet set = build_resonant_set(basis, opt.p, opt.q, c.n_r, c.m, opt.k_range, opt.window_factor * spacing);
    if (!seen.insert(set.states()).second) continue;
    ++out.candidates;
    const Eigen::MatrixXcd Vm = vimp_matrix(set, basis, field);
    const DptResult q = dpt_diagonalize(set, basis, field, DptMode::qDPT, &Vm);
    const Eigen::VectorXd o = overlaps(sampled(q.states), q.eigenvectors);
    Eigen::Index j;
    const double best = o.maxCoeff(&j);
    if (best > out.scar_overlap2) {
      out.scar_overlap2 = best;
      out.set = set;
      Eigen::Index top;
      q.vimp_expect.maxCoeff(&top);
      out.max_type = j == top;
      best_vimp = Vm;
    }
  }
  if (out.set.empty()) return out;

  const double e_lo = E - opt.search_factor * spacing, e_hi = E + opt.search_factor * spacing;
  for (DptMode mode : {DptMode::qDPT, DptMode::DPT}) {
    const DptResult r = dpt_diagonalize(out.set, basis, field, mode, &best_vimp);
    const Eigen::MatrixXcd R = sampled(r.states) * r.eigenvectors;
    const bool quasi = mode == DptMode::qDPT;
    auto& matches = quasi ? out.qdpt_matches : out.dpt_matches;
    Match m;
    for (Eigen::Index j = 0; j < R.cols(); ++j) {
      const Wavefunction w = Wavefunction(spec.grid, R.col(j)).normalize();
      matches.push_back(best_match(w, spec, e_lo, e_hi));
      if (matches.back().overlap2 > m.overlap2) m = matches.back();
    }
    (quasi ? out.qdpt : out.dpt) = m;
    (quasi ? out.qdpt_result : out.dpt_result) = r;
    if (mode == DptMode::DPT) out.top_vimp = r.vimp_expect.maxCoeff();
  }
  Rng rng(mix_seed(opt.seed, k));
  out.random_vimp = -std::numeric_limits<double>::infinity();
  for (int t = 0; t < opt.random_trials; ++t) {
    Eigen::VectorXcd c(best_vimp.rows());
    for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = {rng.normal(), rng.normal()};
    c.normalize();
    out.random_vimp = std::max(out.random_vimp, c.dot(best_vimp * c).real());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rotation diagnostic

/// <psi|V_imp rotated by theta|psi> for theta_k = 2 pi k / theta_grid.
inline std::vector<std::pair<double, double>> vimp_rotation_curve(const Wavefunction& psi, const ImpurityField& field,
                                                                  int theta_grid) {
  if (theta_grid < 1) throw std::invalid_argument("theta_grid must be positive");
  const Eigen::VectorXd rho = psi.density() * psi.grid.cell_area();
  auto vals = parallel_map<double>(static_cast<std::size_t>(theta_grid), [&](std::size_t k) {
    const double th = two_pi * static_cast<double>(k) / theta_grid;
    return rho.dot(sample_field(psi.grid, rotate_field(field, th)));
  });
  std::vector<std::pair<double, double>> out;
  for (int k = 0; k < theta_grid; ++k) out.push_back({two_pi * k / theta_grid, vals[k]});
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline void write_resonant_set_csv(std::ostream& os, const ResonantSet& set) {
  os << "k,n_r,m,energy\n";
  for (const auto& mb : set.members) os << mb.k << ',' << mb.n_r << ',' << mb.m << ',' << fmt17(mb.energy) << '\n';
}

/// One row per eigenvector of each result, with its exact-state match.
inline void write_dpt_report_csv(std::ostream& os,
                                 const std::vector<std::pair<const DptResult*, const std::vector<Match>*>>& modes) {
  os << "mode,eigenvalue,vimp_expect,match_state,match_overlap2\n";
  for (const auto& [r, m] : modes)
    for (Eigen::Index j = 0; j < r->eigenvalues.size(); ++j)
      os << mode_name(r->mode) << ',' << fmt17(r->eigenvalues(j)) << ',' << fmt17(r->vimp_expect(j)) << ','
         << (*m)[static_cast<std::size_t>(j)].state << ',' << fmt17((*m)[static_cast<std::size_t>(j)].overlap2)
         << '\n';
}

inline void write_rotation_csv(std::ostream& os, const std::vector<std::pair<double, double>>& curve) {
  os << "theta,vimp_expect\n";
  for (const auto& [th, v] : curve) os << fmt17(th) << ',' << fmt17(v) << '\n';
}

}  // namespace scarlab
