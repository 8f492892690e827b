#pragma once

// Shared vocabulary for scarlab: small fixed-size geometry, error types,
// a pinned random stream, deterministic parallel maps and number formatting.
//
// Units are natural throughout (hbar = 1, mass = 1).

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace scarlab {

using cplx = std::complex<double>;

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2 operator/(double s) const { return {x / s, y / s}; }
  constexpr Vec2& operator+=(Vec2 o) { x += o.x; y += o.y; return *this; }
  constexpr Vec2& operator-=(Vec2 o) { x -= o.x; y -= o.y; return *this; }
  constexpr bool operator==(const Vec2&) const = default;
};

constexpr Vec2 operator*(double s, Vec2 v) { return {s * v.x, s * v.y}; }
constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
constexpr double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
constexpr double norm2(Vec2 v) { return dot(v, v); }
inline double norm(Vec2 v) { return std::hypot(v.x, v.y); }

/// Counter-clockwise rotation by `theta` about the origin.
inline Vec2 rotate(Vec2 v, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

/// Symmetric 2x2 matrix [[xx, xy], [xy, yy]].
struct Sym2 {
  double xx = 0.0, xy = 0.0, yy = 0.0;

  constexpr Vec2 operator*(Vec2 v) const { return {xx * v.x + xy * v.y, xy * v.x + yy * v.y}; }
  constexpr Sym2 operator+(const Sym2& o) const { return {xx + o.xx, xy + o.xy, yy + o.yy}; }
  constexpr Sym2& operator+=(const Sym2& o) { xx += o.xx; xy += o.xy; yy += o.yy; return *this; }
  constexpr Sym2 operator*(double s) const { return {xx * s, xy * s, yy * s}; }
  constexpr double det() const { return xx * yy - xy * xy; }
  constexpr double trace() const { return xx + yy; }
  Sym2 inverse() const {
    const double d = det();
    if (!(d > 0.0) && !(d < 0.0)) throw std::domain_error("singular 2x2 matrix");
    return {yy / d, -xy / d, xx / d};
  }
  /// Largest absolute eigenvalue.
  double spectral_norm() const {
    const double m = 0.5 * (xx + yy);
    const double r = std::hypot(0.5 * (xx - yy), xy);
    return std::max(std::abs(m + r), std::abs(m - r));
  }
};

/// Covariance with principal axes `along` (unit) and its perpendicular.
inline Sym2 oriented_covariance(Vec2 along, double sigma_along, double sigma_across) {
  const double a2 = sigma_along * sigma_along, c2 = sigma_across * sigma_across;
  const Vec2 n{-along.y, along.x};
  return {a2 * along.x * along.x + c2 * n.x * n.x, a2 * along.x * along.y + c2 * n.x * n.y,
          a2 * along.y * along.y + c2 * n.y * n.y};
}

// ---------------------------------------------------------------------------
// Errors. Invalid caller input is std::invalid_argument; the rest derive from
// std::runtime_error so a CLI can report them uniformly.

struct NoOrbitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NotPeriodicError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GridTooCoarseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonConvergenceError : std::runtime_error {
  NonConvergenceError(const std::string& what, std::size_t converged_count)
      : std::runtime_error(what), converged(converged_count) {}
  std::size_t converged;
};

// ---------------------------------------------------------------------------
// Random numbers.
//
// Rng is std::mt19937_64 (its output sequence is fixed by the standard) with
// hand-written conversions, since the standard distributions are
// implementation-defined. uniform() uses the top 53 bits; normal() is
// Box-Muller consuming exactly two uniforms per pair of deviates.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double rad = std::sqrt(-2.0 * std::log(u1));
    spare_ = rad * std::sin(two_pi * u2);
    has_spare_ = true;
    return rad * std::cos(two_pi * u2);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// SplitMix64 finalizer; derives independent per-item seeds from (seed, index).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Parallel maps. Work is split into contiguous chunks; results land in
// index-addressed slots so callers can reduce in a fixed order. The thread
// count never changes the numbers.

inline unsigned& thread_hint() {
  static unsigned n = 1;
  return n;
}

inline void set_thread_hint(unsigned n) { thread_hint() = std::max(1u, n); }

template <class Fn>
void parallel_for(std::size_t count, Fn&& fn, unsigned threads = thread_hint()) {
  threads = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), std::max<std::size_t>(count, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t chunk = (count + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

template <class T, class Fn>
std::vector<T> parallel_map(std::size_t count, Fn&& fn, unsigned threads = thread_hint()) {
  std::vector<T> out(count);
  parallel_for(count, [&](std::size_t i) { out[i] = fn(i); }, threads);
  return out;
}

/// Pairwise summation; the tree depends only on the length.
inline double pairwise_sum(const double* v, std::size_t n) {
  if (n <= 16) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise_sum(v, h) + pairwise_sum(v + h, n - h);
}

inline double pairwise_sum(const std::vector<double>& v) { return pairwise_sum(v.data(), v.size()); }

// ---------------------------------------------------------------------------

/// Shortest round-trip decimal is not needed; outputs pin 17 significant digits.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Angle wrapped into [0, period).
inline double wrap_angle(double a, double period) {
  double r = std::fmod(a, period);
  if (r < 0.0) r += period;
  if (r >= period) r -= period;
  return r;
}

/// Signed distance between two angles on a circle of circumference `period`.
inline double angle_diff(double a, double b, double period) {
  double d = wrap_angle(a - b, period);
  if (d > 0.5 * period) d -= period;
  return d;
}

}  // namespace scarlab
