#pragma once

// Grid quantum mechanics for H = -1/2 lap + V(r) + V_imp on a square
// periodic grid with spectral (FFT) kinetic energy: lowest eigenpairs,
// split-operator time propagation and wavefunction I/O.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <fftw3.h>
#include <Eigen/Dense>

#include "scarlab/core.hpp"
#include "scarlab/potential_field.hpp"

namespace scarlab {

// ---------------------------------------------------------------------------
// Grid

/// Nodes x_i = -w + i h, h = 2w / n, i = 0..n-1 along both axes. Storage is
/// row-major with y outer: index = j n + i.
struct Grid2D {
  double half_width = 4.5;
  int points_per_side = 256;

  Grid2D() = default;
  Grid2D(double w, int n) : half_width(w), points_per_side(n) { validate(); }

  void validate() const {
    if (!(half_width > 0.0)) throw std::invalid_argument("grid half_width must be positive");
    if (points_per_side < 16 || points_per_side % 2)
      throw std::invalid_argument("grid points_per_side must be even and at least 16");
  }

  double spacing() const { return 2.0 * half_width / points_per_side; }
  double cell_area() const { return spacing() * spacing(); }
  std::size_t size() const { return static_cast<std::size_t>(points_per_side) * points_per_side; }
  double coord(int i) const { return -half_width + i * spacing(); }
  Vec2 node(std::size_t idx) const {
    const int n = points_per_side;
    return {coord(static_cast<int>(idx % n)), coord(static_cast<int>(idx / n))};
  }

  bool operator==(const Grid2D& o) const {
    return half_width == o.half_width && points_per_side == o.points_per_side;
  }
  bool operator!=(const Grid2D& o) const { return !(*this == o); }
};

/// Weyl estimate of the number of states below E, integral of (E - V) r dr
/// over the classically allowed disk.
inline double weyl_count(const RadialPotential& V, double E) {
  if (!(E > 0.0)) return 0.0;
  const double R = V.radius_at(E);
  const int n = 2000;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double r = R * (i + 0.5) / n;
    s += (E - V.value(r)) * r;
  }
  return s * R / n;
}

/// Energy at which the Weyl count reaches n.
inline double weyl_energy(const RadialPotential& V, double n) {
  double hi = 1.0;
  while (weyl_count(V, hi) < n) hi *= 2.0;
  double lo = 0.0;
  for (int i = 0; i < 200 && hi - lo > 1e-12 * hi; ++i) {
    const double m = 0.5 * (lo + hi);
    (weyl_count(V, m) < n ? lo : hi) = m;
  }
  return hi;
}

/// Shortest local de Broglie wavelength at energy E over a potential floor.
inline double minimum_wavelength(double E_max, double V_min) {
  if (!(E_max > V_min)) throw std::invalid_argument("energy below the potential floor");
  return two_pi / std::sqrt(2.0 * (E_max - V_min));
}

/// Refuses grids that cannot hold states up to E_max: spacing must be at
/// most a quarter wavelength, and the well must reach 3 E_max at the box
/// edge so the periodic boundary is immaterial.
inline void check_grid(const Grid2D& grid, const RadialPotential& V, double E_max) {
  grid.validate();
  const double lam = minimum_wavelength(E_max, V.value(0.0));
  if (lam / grid.spacing() < 4.0)
    throw GridTooCoarseError("grid too coarse: lambda_min / spacing = " + fmt17(lam / grid.spacing()) +
                             " < 4 at E = " + fmt17(E_max) + "; need points_per_side >= " +
                             std::to_string(static_cast<int>(std::ceil(8.0 * grid.half_width / lam))));
  if (V.value(grid.half_width) < 3.0 * E_max)
    throw GridTooCoarseError("box too small: V(half_width) = " + fmt17(V.value(grid.half_width)) +
                             " < 3 E_max = " + fmt17(3.0 * E_max) + "; need half_width >= " +
                             fmt17(V.radius_at(3.0 * E_max)));
}

/// V + V_imp at every node (bumps cut at the standard 6 sigma).
inline Eigen::VectorXd sample_potential(const Grid2D& grid, const RadialPotential& V, const ImpurityField& field) {
  const BumpIndex idx(field);
  Eigen::VectorXd out(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const Vec2 p = grid.node(k);
    out(k) = V.value(norm(p)) + idx.value(p);
  }
  return out;
}

inline Eigen::VectorXd sample_field(const Grid2D& grid, const ImpurityField& field) {
  const BumpIndex idx(field);
  Eigen::VectorXd out(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) out(k) = idx.value(grid.node(k));
  return out;
}

// ---------------------------------------------------------------------------
// Wavefunctions

struct Wavefunction {
  Grid2D grid;
  Eigen::VectorXcd values;

  Wavefunction() = default;
  Wavefunction(const Grid2D& g, Eigen::VectorXcd v) : grid(g), values(std::move(v)) {
    if (static_cast<std::size_t>(values.size()) != grid.size())
      throw std::invalid_argument("wavefunction size does not match its grid");
  }

  /// Integral of |psi|^2.
  double norm2() const { return values.squaredNorm() * grid.cell_area(); }
  Wavefunction& normalize() {
    const double n = norm2();
    if (!(n > 0.0)) throw std::invalid_argument("cannot normalize a zero wavefunction");
    values /= std::sqrt(n);
    return *this;
  }
  Eigen::VectorXd density() const { return values.cwiseAbs2(); }
};

/// <a|b> with the grid-cell weight.
inline cplx overlap(const Wavefunction& a, const Wavefunction& b) {
  if (a.grid != b.grid) throw std::invalid_argument("overlap of wavefunctions on different grids");
  return a.values.dot(b.values) * a.grid.cell_area();
}

// ---------------------------------------------------------------------------
// FFTW plans. Planning is not thread-safe, so plans are built once per size
// under a lock and shared; execution uses the new-array interface on
// fftw_malloc'd buffers. FFTW_ESTIMATE keeps the plans, and so the results,
// reproducible from run to run.

namespace detail {

struct FftPlans {
  fftw_plan r2c = nullptr, c2r = nullptr, fwd = nullptr, bwd = nullptr;
};

inline std::mutex& fftw_mutex() {
  static std::mutex m;
  return m;
}

inline const FftPlans& plans_for(int n) {
  static std::map<int, FftPlans> cache;
  std::lock_guard<std::mutex> lock(fftw_mutex());
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  const std::size_t N = static_cast<std::size_t>(n) * n, H = static_cast<std::size_t>(n) * (n / 2 + 1);
  auto* r = static_cast<double*>(fftw_malloc(sizeof(double) * N));
  auto* c = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * std::max(N, H)));
  auto* d = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * N));
  FftPlans p;
  p.r2c = fftw_plan_dft_r2c_2d(n, n, r, c, FFTW_ESTIMATE);
  p.c2r = fftw_plan_dft_c2r_2d(n, n, c, r, FFTW_ESTIMATE);
  p.fwd = fftw_plan_dft_2d(n, n, c, d, FFTW_FORWARD, FFTW_ESTIMATE);
  p.bwd = fftw_plan_dft_2d(n, n, d, c, FFTW_BACKWARD, FFTW_ESTIMATE);
  fftw_free(r);
  fftw_free(c);
  fftw_free(d);
  return cache.emplace(n, p).first->second;
}

template <class T>
struct FftwBuffer {
  T* ptr = nullptr;
  std::size_t len = 0;
  FftwBuffer() = default;
  explicit FftwBuffer(std::size_t n) : ptr(static_cast<T*>(fftw_malloc(sizeof(T) * n))), len(n) {}
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  FftwBuffer(FftwBuffer&& o) noexcept : ptr(o.ptr), len(o.len) { o.ptr = nullptr; }
  FftwBuffer& operator=(FftwBuffer&& o) noexcept {
    std::swap(ptr, o.ptr);
    std::swap(len, o.len);
    return *this;
  }
  ~FftwBuffer() {
    if (ptr) fftw_free(ptr);
  }
};

/// Per-thread scratch for one grid size.
struct FftWork {
  int n = 0;
  FftwBuffer<double> real;
  FftwBuffer<fftw_complex> half, full_a, full_b;

  void ensure(int size) {
    if (n == size) return;
    n = size;
    const std::size_t N = static_cast<std::size_t>(n) * n, H = static_cast<std::size_t>(n) * (n / 2 + 1);
    real = FftwBuffer<double>(N);
    half = FftwBuffer<fftw_complex>(H);
    full_a = FftwBuffer<fftw_complex>(N);
    full_b = FftwBuffer<fftw_complex>(N);
  }
};

inline FftWork& fft_work(int n) {
  thread_local FftWork w;
  w.ensure(n);
  return w;
}

/// Squared wavenumber k^2 for FFT index j on an n-point axis of length 2w.
inline double wavenumber2(int j, int n, double w) {
  const int jj = j <= n / 2 ? j : j - n;
  const double k = pi * jj / w;
  return k * k;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Hamiltonian

class Hamiltonian {
 public:
  Hamiltonian(const Grid2D& grid, Eigen::VectorXd potential) : grid_(grid), v_(std::move(potential)) {
    grid_.validate();
    if (static_cast<std::size_t>(v_.size()) != grid_.size()) throw std::invalid_argument("potential size mismatch");
    const int n = grid_.points_per_side, nh = n / 2 + 1;
    const double w = grid_.half_width, inv = 1.0 / static_cast<double>(grid_.size());
    kin_half_.resize(static_cast<std::size_t>(n) * nh);
    kin_full_.resize(grid_.size());
    for (int j = 0; j < n; ++j) {
      const double ky2 = detail::wavenumber2(j, n, w);
      for (int i = 0; i < nh; ++i) kin_half_[j * nh + i] = 0.5 * (detail::wavenumber2(i, n, w) + ky2) * inv;
      for (int i = 0; i < n; ++i) kin_full_[j * n + i] = 0.5 * (detail::wavenumber2(i, n, w) + ky2);
    }
    plans_ = &detail::plans_for(n);
  }

  Hamiltonian(const Grid2D& grid, const RadialPotential& V, const ImpurityField& field)
      : Hamiltonian(grid, sample_potential(grid, V, field)) {}

  const Grid2D& grid() const { return grid_; }
  const Eigen::VectorXd& potential() const { return v_; }
  std::size_t size() const { return grid_.size(); }

  /// Largest kinetic eigenvalue, (pi / h)^2.
  double kinetic_max() const { return std::pow(pi / grid_.spacing(), 2); }
  /// Upper bound on the spectrum: max V plus the largest kinetic eigenvalue.
  double upper_bound() const { return v_.maxCoeff() + kinetic_max(); }
  /// Squared wavenumbers / 2 in unshifted FFT order (full complex layout).
  const std::vector<double>& kinetic_full() const { return kin_full_; }

  /// out = H in for a real vector.
  void apply(const double* in, double* out) const {
    const int n = grid_.points_per_side;
    auto& w = detail::fft_work(n);
    const std::size_t N = grid_.size();
    std::memcpy(w.real.ptr, in, sizeof(double) * N);
    fftw_execute_dft_r2c(plans_->r2c, w.real.ptr, w.half.ptr);
    for (std::size_t k = 0; k < kin_half_.size(); ++k) {
      w.half.ptr[k][0] *= kin_half_[k];
      w.half.ptr[k][1] *= kin_half_[k];
    }
    fftw_execute_dft_c2r(plans_->c2r, w.half.ptr, w.real.ptr);
    for (std::size_t k = 0; k < N; ++k) out[k] = w.real.ptr[k] + v_(k) * in[k];
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    Eigen::VectorXd y(x.size());
    apply(x.data(), y.data());
    return y;
  }

  /// H psi for a complex wavefunction (real and imaginary parts separately).
  Eigen::VectorXcd apply(const Eigen::VectorXcd& x) const {
    const Eigen::VectorXd re = x.real(), im = x.imag();
    Eigen::VectorXcd y(x.size());
    y.real() = apply(re);
    y.imag() = apply(im);
    return y;
  }

  /// Block apply, parallel over columns.
  void apply(const Eigen::MatrixXd& X, Eigen::MatrixXd& Y) const {
    Y.resize(X.rows(), X.cols());
    parallel_for(static_cast<std::size_t>(X.cols()), [&](std::size_t c) { apply(X.col(c).data(), Y.col(c).data()); });
  }

  /// <psi|H|psi> for a normalized wavefunction.
  double expectation(const Wavefunction& psi) const {
    return (psi.values.dot(apply(psi.values))).real() * grid_.cell_area();
  }

 private:
  Grid2D grid_;
  Eigen::VectorXd v_;
  std::vector<double> kin_half_, kin_full_;
  const detail::FftPlans* plans_ = nullptr;
};

// ---------------------------------------------------------------------------
// Spectrum

/// Lowest eigenpairs. H is real symmetric, so eigenvectors are stored as
/// real columns normalized to unit Euclidean norm; state(k) rescales to
/// unit L2 norm on the grid.
struct Spectrum {
  Grid2D grid;
  std::vector<double> energies;
  std::vector<double> residuals;
  Eigen::MatrixXd vectors;

  std::size_t size() const { return energies.size(); }

  Wavefunction state(std::size_t k) const {
    if (k >= size()) throw std::out_of_range("spectrum has no state " + std::to_string(k));
    return {grid, vectors.col(static_cast<Eigen::Index>(k)).cast<cplx>() / grid.spacing()};
  }

  /// Overlaps <psi_k|phi> for every state.
  Eigen::VectorXcd project(const Wavefunction& phi) const {
    if (phi.grid != grid) throw std::invalid_argument("projection onto a spectrum on another grid");
    const Eigen::VectorXcd raw = vectors.transpose().cast<cplx>() * phi.values;
    return raw * grid.spacing();
  }
};

struct EigenOptions {
  enum class Method { Chebyshev, ImaginaryTime };
  Method method = Method::Chebyshev;
  double tol = 1e-6;              // residual |H psi - E psi|
  int max_iterations = 80;
  int degree = 24;                // Chebyshev filter degree
  double guard_fraction = 0.15;   // extra vectors carried beyond n_states
  int min_guard = 16;
  std::uint64_t seed = 1;
  const Eigen::MatrixXd* initial = nullptr;  // optional starting subspace (columns)
  // Imaginary-time settings: step, and the smallest step before giving up.
  double tau = 0.01;
  double tau_min = 1e-5;
  std::function<void(int, std::size_t, double)> progress;  // (iteration, converged, worst residual)
};

inline const char* method_name(EigenOptions::Method m) {
  return m == EigenOptions::Method::Chebyshev ? "chebyshev" : "imaginary_time";
}

inline EigenOptions::Method parse_method(const std::string& s) {
  if (s == "chebyshev") return EigenOptions::Method::Chebyshev;
  if (s == "imaginary_time") return EigenOptions::Method::ImaginaryTime;
  throw std::invalid_argument("unknown eigensolver method '" + s + "'");
}

namespace detail {

/// Orthonormalizes the columns of X in place (Cholesky QR, twice), falling
/// back to Householder QR when the Gram matrix is numerically singular.
inline void orthonormalize(Eigen::MatrixXd& X) {
  for (int pass = 0; pass < 2; ++pass) {
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(X.cols(), X.cols());
    S.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(S.selfadjointView<Eigen::Lower>());
    const double dmin = S.diagonal().minCoeff(), dmax = S.diagonal().maxCoeff();
    if (llt.info() != Eigen::Success || !(dmin > 1e-12 * dmax)) {
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(X);
      X = qr.householderQ() * Eigen::MatrixXd::Identity(X.rows(), X.cols());
      return;
    }
    llt.matrixU().solveInPlace<Eigen::OnTheRight>(X);
  }
}

/// Removes the span of the orthonormal columns of L from X.
inline void deflate(Eigen::MatrixXd& X, const Eigen::MatrixXd& L) {
  if (L.cols() == 0) return;
  for (int pass = 0; pass < 2; ++pass) X.noalias() -= L * (L.transpose() * X);
}

struct RitzResult {
  Eigen::VectorXd values;
  Eigen::VectorXd residuals;
};

/// Rayleigh-Ritz on orthonormal X: rotates X onto Ritz vectors, sorted
/// ascending, and returns Ritz values and residual norms.
inline RitzResult rayleigh_ritz(const Hamiltonian& H, Eigen::MatrixXd& X) {
  Eigen::MatrixXd HX;
  H.apply(X, HX);
  Eigen::MatrixXd G = X.transpose() * HX;
  G = 0.5 * (G + G.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  const Eigen::MatrixXd& Q = es.eigenvectors();
  X = (X * Q).eval();
  HX = (HX * Q).eval();
  RitzResult r;
  r.values = es.eigenvalues();
  r.residuals.resize(X.cols());
  for (Eigen::Index c = 0; c < X.cols(); ++c) r.residuals(c) = (HX.col(c) - r.values(c) * X.col(c)).norm();
  return r;
}

/// Scaled Chebyshev filter of degree m damping [a, b], normalized at lambda0.
inline void chebyshev_filter(const Hamiltonian& H, Eigen::MatrixXd& X, int m, double a, double b, double lambda0) {
  const double e = 0.5 * (b - a), c = 0.5 * (b + a);
  const std::size_t N = H.size();
  parallel_for(static_cast<std::size_t>(X.cols()), [&](std::size_t col) {
    Eigen::VectorXd x = X.col(static_cast<Eigen::Index>(col)), y(N), yn(N), hy(N);
    double sigma = e / (lambda0 - c);
    const double sigma1 = sigma, tau = 2.0 / sigma1;
    H.apply(x.data(), hy.data());
    y = (hy - c * x) * (sigma1 / e);
    for (int i = 2; i <= m; ++i) {
      const double sigma2 = 1.0 / (tau - sigma);
      H.apply(y.data(), hy.data());
      yn = (hy - c * y) * (2.0 * sigma2 / e) - (sigma * sigma2) * x;
      x.swap(y);
      y.swap(yn);
      sigma = sigma2;
    }
    X.col(static_cast<Eigen::Index>(col)) = y;
  });
}

inline Eigen::MatrixXd random_block(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Eigen::MatrixXd X(rows, cols);
  for (std::size_t c = 0; c < cols; ++c) {
    Rng rng(mix_seed(seed, c));
    for (std::size_t r = 0; r < rows; ++r) X(r, c) = rng.normal();
  }
  return X;
}

inline Spectrum pack_spectrum(const Grid2D& grid, const Eigen::MatrixXd& X, const RitzResult& rr, std::size_t n) {
  Spectrum s;
  s.grid = grid;
  s.vectors = X.leftCols(n);
  for (std::size_t k = 0; k < n; ++k) {
    s.energies.push_back(rr.values(k));
    s.residuals.push_back(rr.residuals(k));
    // Fix the sign so the largest-magnitude component is positive.
    Eigen::Index imax;
    s.vectors.col(k).cwiseAbs().maxCoeff(&imax);
    if (s.vectors(imax, k) < 0.0) s.vectors.col(k) *= -1.0;
  }
  return s;
}

inline std::size_t leading_converged(const Eigen::VectorXd& res, double tol, std::size_t n) {
  std::size_t k = 0;
  while (k < n && res(k) <= tol) ++k;
  return k;
}

/// Chebyshev-filtered subspace iteration with locking of leading converged
/// vectors.
inline Spectrum solve_chebyshev(const Hamiltonian& H, std::size_t n_states, double e_guess, const EigenOptions& opt) {
  const std::size_t N = H.size();
  const auto guard = std::max<std::size_t>(static_cast<std::size_t>(opt.min_guard),
                                           static_cast<std::size_t>(std::ceil(opt.guard_fraction * n_states)));
  const std::size_t nvec = std::min(N, n_states + guard);
  Eigen::MatrixXd X;
  if (opt.initial && opt.initial->rows() == static_cast<Eigen::Index>(N) && opt.initial->cols() > 0) {
    const auto take = std::min<Eigen::Index>(opt.initial->cols(), static_cast<Eigen::Index>(nvec));
    X = random_block(N, nvec, opt.seed);
    X.leftCols(take) = opt.initial->leftCols(take);
  } else {
    X = random_block(N, nvec, opt.seed);
  }
  orthonormalize(X);
  RitzResult rr = rayleigh_ritz(H, X);
  const double upper = H.upper_bound();
  double cut = opt.initial ? rr.values(nvec - 1) : std::max(e_guess, rr.values(0) + 1.0);
  Eigen::MatrixXd locked(N, 0);
  Eigen::VectorXd locked_vals(0), locked_res(0);
  for (int it = 0; it < opt.max_iterations; ++it) {
    const std::size_t nl = static_cast<std::size_t>(locked.cols());
    const std::size_t newly = leading_converged(rr.residuals, opt.tol, std::min(nvec - nl, n_states - nl));
    if (newly > 0) {
      Eigen::MatrixXd L(N, nl + newly);
      L << locked, X.leftCols(newly);
      locked.swap(L);
      Eigen::VectorXd lv(nl + newly), lr(nl + newly);
      lv << locked_vals, rr.values.head(newly);
      lr << locked_res, rr.residuals.head(newly);
      locked_vals.swap(lv);
      locked_res.swap(lr);
      X = X.rightCols(X.cols() - newly).eval();
      rr.values = rr.values.tail(X.cols()).eval();
      rr.residuals = rr.residuals.tail(X.cols()).eval();
    }
    const std::size_t done = static_cast<std::size_t>(locked.cols());
    if (opt.progress) opt.progress(it, done, rr.residuals.size() ? rr.residuals.maxCoeff() : 0.0);
    if (done >= n_states) break;
    // Normalization point below the whole active block; the potential floor
    // bounds the spectrum from below.
    const double lambda0 = std::min(rr.values(0), H.potential().minCoeff());
    chebyshev_filter(H, X, opt.degree, cut, upper, lambda0 - 1.0);
    deflate(X, locked);
    orthonormalize(X);
    rr = rayleigh_ritz(H, X);
    cut = rr.values(X.cols() - 1);
  }
  const std::size_t done = static_cast<std::size_t>(locked.cols());
  // Assemble locked + remaining, sorted by energy.
  Eigen::MatrixXd all(N, done + X.cols());
  all << locked, X;
  RitzResult r;
  r.values.resize(all.cols());
  r.residuals.resize(all.cols());
  r.values << locked_vals, rr.values;
  r.residuals << locked_res, rr.residuals;
  std::vector<Eigen::Index> order(all.cols());
  for (Eigen::Index i = 0; i < all.cols(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return r.values(a) < r.values(b); });
  Eigen::MatrixXd Xs(N, all.cols());
  RitzResult rs;
  rs.values.resize(all.cols());
  rs.residuals.resize(all.cols());
  for (Eigen::Index i = 0; i < all.cols(); ++i) {
    Xs.col(i) = all.col(order[i]);
    rs.values(i) = r.values(order[i]);
    rs.residuals(i) = r.residuals(order[i]);
  }
  const std::size_t ok = leading_converged(rs.residuals, opt.tol, n_states);
  if (ok < n_states)
    throw NonConvergenceError("eigensolver converged " + std::to_string(ok) + " of " + std::to_string(n_states) +
                                  " states within " + std::to_string(opt.max_iterations) + " iterations",
                              ok);
  return pack_spectrum(H.grid(), Xs, rs, n_states);
}

/// Imaginary-time propagation of a block with split-operator steps
/// exp(-tau V/2) exp(-tau T) exp(-tau V/2), Rayleigh-Ritz after each round.
/// The splitting biases the fixed point by O(tau^2), so tau is halved
/// whenever the residuals stop improving.
inline Spectrum solve_imaginary_time(const Hamiltonian& H, std::size_t n_states, const EigenOptions& opt) {
  const std::size_t N = H.size();
  const int n = H.grid().points_per_side, nh = n / 2 + 1;
  const auto guard = std::max<std::size_t>(4, static_cast<std::size_t>(std::ceil(opt.guard_fraction * n_states)));
  const std::size_t nvec = std::min(N, n_states + guard);
  Eigen::MatrixXd X = random_block(N, nvec, opt.seed);
  if (opt.initial && opt.initial->rows() == static_cast<Eigen::Index>(N))
    X.leftCols(std::min<Eigen::Index>(opt.initial->cols(), nvec)) =
        opt.initial->leftCols(std::min<Eigen::Index>(opt.initial->cols(), nvec));
  orthonormalize(X);
  const auto& plans = plans_for(n);
  double tau = opt.tau;
  std::vector<double> kin(static_cast<std::size_t>(n) * nh);
  auto build = [&](double t, Eigen::VectorXd& ev) {
    ev = (-0.5 * t * H.potential().array()).exp().matrix();
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < nh; ++i)
        kin[j * nh + i] = std::exp(-0.5 * t * (wavenumber2(i, n, H.grid().half_width) +
                                                wavenumber2(j, n, H.grid().half_width))) /
                          static_cast<double>(N);
  };
  Eigen::VectorXd ev;
  build(tau, ev);
  RitzResult rr = rayleigh_ritz(H, X);
  double best = rr.residuals.head(n_states).maxCoeff();
  int stall = 0;
  for (int it = 0; it < opt.max_iterations * 50; ++it) {
    parallel_for(nvec, [&](std::size_t c) {
      auto& w = fft_work(n);
      double* col = X.col(static_cast<Eigen::Index>(c)).data();
      for (int step = 0; step < 10; ++step) {
        for (std::size_t k = 0; k < N; ++k) w.real.ptr[k] = col[k] * ev(k);
        fftw_execute_dft_r2c(plans.r2c, w.real.ptr, w.half.ptr);
        for (std::size_t k = 0; k < kin.size(); ++k) {
          w.half.ptr[k][0] *= kin[k];
          w.half.ptr[k][1] *= kin[k];
        }
        fftw_execute_dft_c2r(plans.c2r, w.half.ptr, w.real.ptr);
        for (std::size_t k = 0; k < N; ++k) col[k] = w.real.ptr[k] * ev(k);
      }
    });
    orthonormalize(X);
    rr = rayleigh_ritz(H, X);
    const double worst = rr.residuals.head(n_states).maxCoeff();
    if (opt.progress) opt.progress(it, leading_converged(rr.residuals, opt.tol, n_states), worst);
    if (worst <= opt.tol) return pack_spectrum(H.grid(), X, rr, n_states);
    if (worst < 0.98 * best) {
      best = worst;
      stall = 0;
    } else if (++stall >= 3) {
      tau *= 0.5;
      if (tau < opt.tau_min) break;
      build(tau, ev);
      stall = 0;
      best = worst;
    }
  }
  const std::size_t ok = leading_converged(rr.residuals, opt.tol, n_states);
  throw NonConvergenceError("imaginary-time solver converged " + std::to_string(ok) + " of " +
                                std::to_string(n_states) + " states",
                            ok);
}

}  // namespace detail

/// The n_states lowest eigenpairs of H = -1/2 lap + V + V_imp on the grid.
inline Spectrum solve_eigenstates(const RadialPotential& V, const ImpurityField& field, const Grid2D& grid,
                                  std::size_t n_states, const EigenOptions& opt = {}) {
  if (n_states < 1) throw std::invalid_argument("n_states must be at least 1");
  if (n_states >= grid.size()) throw std::invalid_argument("n_states exceeds the grid dimension");
  const double e_weyl = weyl_energy(V, static_cast<double>(n_states));
  // Margin for the Weyl estimate and the mean impurity potential over the box.
  const double mean_imp = mean_impurity(field);
  const double e_max = 1.1 * e_weyl + mean_imp;
  check_grid(grid, V, e_max);
  const Hamiltonian H(grid, V, field);
  if (opt.method == EigenOptions::Method::ImaginaryTime) return detail::solve_imaginary_time(H, n_states, opt);
  const double e_cut = weyl_energy(V, n_states * (1.0 + opt.guard_fraction)) + mean_imp;
  return detail::solve_chebyshev(H, n_states, e_cut, opt);
}

// ---------------------------------------------------------------------------
// Real-time propagation

/// Second-order Strang splitting exp(-iV dt/2) exp(-iT dt) exp(-iV dt/2)
/// with spectral kinetic factors. Every factor is unitary, so the norm is
/// preserved to rounding.
class Propagator {
 public:
  Propagator(const Hamiltonian& H, double dt) : grid_(H.grid()), dt_(dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("time step must be positive");
    const std::size_t N = grid_.size();
    half_v_.resize(static_cast<Eigen::Index>(N));
    for (std::size_t k = 0; k < N; ++k) half_v_(k) = std::polar(1.0, -0.5 * dt * H.potential()(k));
    kin_.resize(N);
    const double inv = 1.0 / static_cast<double>(N);
    for (std::size_t k = 0; k < N; ++k) kin_[k] = std::polar(inv, -dt * H.kinetic_full()[k]);
    plans_ = &detail::plans_for(grid_.points_per_side);
  }

  double dt() const { return dt_; }

  void step(Eigen::VectorXcd& psi, int count = 1) const {
    auto& w = detail::fft_work(grid_.points_per_side);
    const std::size_t N = grid_.size();
    auto* a = reinterpret_cast<cplx*>(w.full_a.ptr);
    auto* b = reinterpret_cast<cplx*>(w.full_b.ptr);
    for (std::size_t k = 0; k < N; ++k) a[k] = psi(k) * half_v_(k);
    for (int s = 0; s < count; ++s) {
      fftw_execute_dft(plans_->fwd, w.full_a.ptr, w.full_b.ptr);
      for (std::size_t k = 0; k < N; ++k) b[k] *= kin_[k];
      fftw_execute_dft(plans_->bwd, w.full_b.ptr, w.full_a.ptr);
      // Adjacent half potential steps merge into one full step.
      if (s + 1 < count)
        for (std::size_t k = 0; k < N; ++k) a[k] *= half_v_(k) * half_v_(k);
    }
    for (std::size_t k = 0; k < N; ++k) psi(k) = a[k] * half_v_(k);
  }

 private:
  Grid2D grid_;
  double dt_;
  Eigen::VectorXcd half_v_;
  std::vector<cplx> kin_;
  const detail::FftPlans* plans_ = nullptr;
};

/// Step-size rule for the split-operator propagator: the local phase error
/// scales as (E dt)^3 per step, so dt = 0.05 / E_scale keeps the accumulated
/// phase error over one orbit period well below 1e-3 for packets whose
/// energy spread is a fraction of E. E_scale is the packet's mean energy
/// above the potential floor (at least 1).
inline double split_step_dt(double mean_energy) { return 0.05 / std::max(1.0, mean_energy); }

/// Propagates psi with steps of at most dt and calls visit(t, psi) at t = 0
/// and every sample_every; dt is shortened so samples land on the step grid.
inline void propagate_visit(const Wavefunction& psi0, const Hamiltonian& H, double dt, double sample_every,
                            double t_end, const std::function<void(double, const Wavefunction&)>& visit) {
  if (psi0.grid != H.grid()) throw std::invalid_argument("wavefunction and Hamiltonian grids differ");
  if (!(sample_every > 0.0) || !(dt > 0.0)) throw std::invalid_argument("time steps must be positive");
  const auto per = static_cast<int>(std::max(1.0, std::ceil(sample_every / dt - 1e-9)));
  const Propagator prop(H, sample_every / per);
  const auto samples = static_cast<std::size_t>(std::floor(t_end / sample_every + 1e-9));
  Wavefunction psi = psi0;
  visit(0.0, psi);
  for (std::size_t s = 1; s <= samples; ++s) {
    prop.step(psi.values, per);
    visit(s * sample_every, psi);
  }
}

/// Trajectory sampled at 0, sample_every, ... up to t_end.
inline std::vector<Wavefunction> propagate(const Wavefunction& psi, const RadialPotential& V,
                                           const ImpurityField& field, double dt, double t_end,
                                           double sample_every) {
  const Hamiltonian H(psi.grid, V, field);
  std::vector<Wavefunction> out;
  propagate_visit(psi, H, dt, sample_every, t_end, [&](double, const Wavefunction& w) { out.push_back(w); });
  return out;
}

// ---------------------------------------------------------------------------
// I/O

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_arithmetic_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw std::runtime_error("truncated binary file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline Grid2D grid_from_extent(std::uint32_t nx, std::uint32_t ny, double x0, double x1, double y0, double y1) {
  if (nx != ny) throw std::runtime_error("only square grids are supported");
  const Grid2D g(-x0, static_cast<int>(nx));
  if (std::abs(x1 - g.coord(g.points_per_side - 1)) > 1e-12 * g.half_width || y0 != x0 || y1 != x1)
    throw std::runtime_error("wavefunction extent does not describe a centred square grid");
  return g;
}

}  // namespace detail

/// WF2D: magic, u32 nx, u32 ny, f64 x_min, x_max, y_min, y_max (first and
/// last node), then (re, im) f64 pairs row-major with y outer; little endian.
inline void write_wf2d(std::ostream& os, const Wavefunction& psi) {
  const auto& g = psi.grid;
  os.write("WF2D", 4);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(g.points_per_side));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(g.points_per_side));
  const double lo = g.coord(0), hi = g.coord(g.points_per_side - 1);
  for (double v : {lo, hi, lo, hi}) detail::put<double>(os, v);
  for (Eigen::Index k = 0; k < psi.values.size(); ++k) {
    detail::put<double>(os, psi.values(k).real());
    detail::put<double>(os, psi.values(k).imag());
  }
}

inline Wavefunction read_wf2d(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "WF2D", 4) != 0) throw std::runtime_error("not a WF2D file");
  const auto nx = detail::get<std::uint32_t>(is), ny = detail::get<std::uint32_t>(is);
  const double x0 = detail::get<double>(is), x1 = detail::get<double>(is);
  const double y0 = detail::get<double>(is), y1 = detail::get<double>(is);
  const Grid2D g = detail::grid_from_extent(nx, ny, x0, x1, y0, y1);
  Eigen::VectorXcd v(g.size());
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    const double re = detail::get<double>(is);
    v(k) = {re, detail::get<double>(is)};
  }
  return {g, std::move(v)};
}

inline void save_wf2d(const std::string& path, const Wavefunction& psi) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_wf2d(os, psi);
}

inline Wavefunction load_wf2d(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_wf2d(is);
}

inline void write_spectrum_csv(std::ostream& os, const Spectrum& s) {
  os << "index,energy,residual\n";
  for (std::size_t k = 0; k < s.size(); ++k) os << k << ',' << fmt17(s.energies[k]) << ',' << fmt17(s.residuals[k]) << '\n';
}

/// Binary spectrum cache: magic SPEC, u32 n (points per side), f64 half
/// width, u32 count, then count energies, count residuals and the real
/// eigenvector columns (unit Euclidean norm), all little endian.
inline void write_spectrum(std::ostream& os, const Spectrum& s) {
  os.write("SPEC", 4);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.grid.points_per_side));
  detail::put<double>(os, s.grid.half_width);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  for (double e : s.energies) detail::put<double>(os, e);
  for (double r : s.residuals) detail::put<double>(os, r);
  if constexpr (std::endian::native == std::endian::little)
    os.write(reinterpret_cast<const char*>(s.vectors.data()),
             static_cast<std::streamsize>(sizeof(double) * s.vectors.size()));
  else
    for (Eigen::Index k = 0; k < s.vectors.size(); ++k) detail::put<double>(os, s.vectors.data()[k]);
}

inline Spectrum read_spectrum(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SPEC", 4) != 0) throw std::runtime_error("not a spectrum file");
  Spectrum s;
  const auto n = detail::get<std::uint32_t>(is);
  const double w = detail::get<double>(is);
  s.grid = Grid2D(w, static_cast<int>(n));
  const auto count = detail::get<std::uint32_t>(is);
  s.energies.resize(count);
  s.residuals.resize(count);
  for (auto& e : s.energies) e = detail::get<double>(is);
  for (auto& r : s.residuals) r = detail::get<double>(is);
  s.vectors.resize(static_cast<Eigen::Index>(s.grid.size()), count);
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(s.vectors.data()),
                 static_cast<std::streamsize>(sizeof(double) * s.vectors.size())))
      throw std::runtime_error("truncated spectrum file");
  } else {
    for (Eigen::Index k = 0; k < s.vectors.size(); ++k) s.vectors.data()[k] = detail::get<double>(is);
  }
  return s;
}

inline void save_spectrum(const std::string& path, const Spectrum& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_spectrum(os, s);
}

inline Spectrum load_spectrum(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_spectrum(is);
}

}  // namespace scarlab
