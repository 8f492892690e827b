#pragma once

// Unperturbed radial wells, Gaussian impurity fields and evaluation of the
// total potential V(|q|) + V_imp(q) in the plane.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "scarlab/core.hpp"

namespace scarlab {

enum class WellKind { PowerLaw, CoshWell };

/// V(r) = coefficient * r^exponent, or coefficient * (cosh r - 1).
struct RadialPotential {
  WellKind kind = WellKind::PowerLaw;
  double coefficient = 0.5;
  double exponent = 5.0;  // PowerLaw only

  static RadialPotential power_law(double coefficient, double exponent) {
    if (!(exponent > 0.0)) throw std::invalid_argument("power-law exponent must be positive");
    if (!(coefficient >= 0.0)) throw std::invalid_argument("well coefficient must be non-negative");
    return {WellKind::PowerLaw, coefficient, exponent};
  }

  static RadialPotential cosh_well(double coefficient) {
    if (!(coefficient >= 0.0)) throw std::invalid_argument("well coefficient must be non-negative");
    return {WellKind::CoshWell, coefficient, 0.0};
  }

  /// The reference well 1/2 r^5.
  static RadialPotential reference() { return power_law(0.5, 5.0); }

  /// A confining well (V increasing to infinity). A zero coefficient gives a free particle.
  bool confining() const { return coefficient > 0.0; }

  bool homogeneous() const { return kind == WellKind::PowerLaw; }

  double value(double r) const {
    if (kind == WellKind::PowerLaw) return coefficient * std::pow(r, exponent);
    return coefficient * (std::cosh(r) - 1.0);
  }

  /// dV/dr.
  double d1(double r) const {
    if (kind == WellKind::PowerLaw) {
      if (r == 0.0) return exponent == 1.0 ? coefficient : 0.0;
      return coefficient * exponent * std::pow(r, exponent - 1.0);
    }
    return coefficient * std::sinh(r);
  }

  /// d^2V/dr^2.
  double d2(double r) const {
    if (kind == WellKind::PowerLaw) {
      if (r == 0.0) return exponent == 2.0 ? 2.0 * coefficient : 0.0;
      return coefficient * exponent * (exponent - 1.0) * std::pow(r, exponent - 2.0);
    }
    return coefficient * std::cosh(r);
  }

  /// V(r + dr) - V(r) without cancellation for small dr.
  double difference(double r, double dr) const {
    if (kind == WellKind::PowerLaw) {
      if (r == 0.0) return value(dr);
      return coefficient * std::pow(r, exponent) * std::expm1(exponent * std::log1p(dr / r));
    }
    return 2.0 * coefficient * std::sinh(r + 0.5 * dr) * std::sinh(0.5 * dr);
  }

  /// Radius where V(r) = E (outer classical bound of the allowed disk).
  double radius_at(double energy) const {
    if (!confining()) throw std::invalid_argument("free particle has no classical radius");
    if (energy <= 0.0) return 0.0;
    if (kind == WellKind::PowerLaw) return std::pow(energy / coefficient, 1.0 / exponent);
    return std::acosh(1.0 + energy / coefficient);
  }

  std::string describe() const {
    std::ostringstream os;
    os << std::setprecision(17);
    if (kind == WellKind::PowerLaw)
      os << "powerlaw(" << coefficient << ", " << exponent << ")";
    else
      os << "cosh(" << coefficient << ")";
    return os.str();
  }
};

/// Cartesian gradient of the radial well at q.
inline Vec2 radial_gradient(const RadialPotential& V, Vec2 q) {
  const double r = norm(q);
  if (r == 0.0) return {};
  return q * (V.d1(r) / r);
}

/// Cartesian Hessian of the radial well at q.
inline Sym2 radial_hessian(const RadialPotential& V, Vec2 q) {
  const double r = norm(q);
  if (r == 0.0) {
    const double c = V.d2(0.0);
    return {c, 0.0, c};
  }
  const double d1r = V.d1(r) / r, d2 = V.d2(r);
  const Vec2 u = q / r;
  // d2 * u u^T + (V'/r) (I - u u^T)
  return {d2 * u.x * u.x + d1r * (1.0 - u.x * u.x), (d2 - d1r) * u.x * u.y,
          d2 * u.y * u.y + d1r * (1.0 - u.y * u.y)};
}

inline double fwhm_to_sigma(double fwhm) { return fwhm / (2.0 * std::sqrt(2.0 * std::log(2.0))); }
inline double sigma_to_fwhm(double sigma) { return sigma * 2.0 * std::sqrt(2.0 * std::log(2.0)); }

/// M exp(-|q - center|^2 / (2 sigma^2)).
struct GaussianBump {
  Vec2 center;
  double amplitude = 0.0;
  double sigma = 0.1;

  static GaussianBump with_fwhm(Vec2 center, double amplitude, double fwhm) {
    if (!(fwhm > 0.0)) throw std::invalid_argument("bump FWHM must be positive");
    return {center, amplitude, fwhm_to_sigma(fwhm)};
  }

  double fwhm() const { return sigma_to_fwhm(sigma); }

  double value(Vec2 q) const {
    return amplitude * std::exp(-norm2(q - center) / (2.0 * sigma * sigma));
  }

  bool operator==(const GaussianBump&) const = default;
};

/// Distance beyond which bumps may be dropped on request (exp(-18) ~ 1.5e-8).
inline constexpr double kBumpCutoffSigmas = 6.0;

struct ImpurityField {
  std::vector<GaussianBump> bumps;
  std::uint64_t seed = 0;
  double density = 0.0;
  double box_half_width = 0.0;

  bool empty() const { return bumps.empty(); }

  double value(Vec2 q) const {
    double v = 0.0;
    for (const auto& b : bumps) v += b.value(q);
    return v;
  }

  Vec2 gradient(Vec2 q) const {
    Vec2 g;
    for (const auto& b : bumps) {
      const Vec2 d = q - b.center;
      const double s2 = b.sigma * b.sigma;
      g -= d * (b.amplitude * std::exp(-norm2(d) / (2.0 * s2)) / s2);
    }
    return g;
  }

  Sym2 hessian(Vec2 q) const {
    Sym2 h;
    for (const auto& b : bumps) {
      const Vec2 d = q - b.center;
      const double s2 = b.sigma * b.sigma;
      const double g = b.amplitude * std::exp(-norm2(d) / (2.0 * s2)) / s2;
      h += Sym2{g * (d.x * d.x / s2 - 1.0), g * d.x * d.y / s2, g * (d.y * d.y / s2 - 1.0)};
    }
    return h;
  }

  /// Same positions and widths, every amplitude set to `amplitude` (>= 0).
  ImpurityField with_amplitude(double amplitude) const {
    if (!(amplitude >= 0.0)) throw std::invalid_argument("bump amplitude must be non-negative");
    ImpurityField f = *this;
    for (auto& b : f.bumps) b.amplitude = amplitude;
    return f;
  }

  double max_sigma() const {
    double s = 0.0;
    for (const auto& b : bumps) s = std::max(s, b.sigma);
    return s;
  }
};

/// Box average of V_imp: total bump volume over the sampling box area (0
/// without a box).
inline double mean_impurity(const ImpurityField& field) {
  if (field.empty() || !(field.box_half_width > 0.0)) return 0.0;
  double v = 0.0;
  for (const auto& b : field.bumps) v += b.amplitude * two_pi * b.sigma * b.sigma;
  return v / std::pow(2.0 * field.box_half_width, 2);
}

/// Uniform i.i.d. bump centers over [-w, w]^2; x then y drawn per bump from Rng(seed).
inline ImpurityField sample_impurities(std::uint64_t seed, double density, double amplitude,
                                       double sigma, double box_half_width) {
  if (!(density > 0.0)) throw std::invalid_argument("impurity density must be positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("impurity sigma must be positive");
  if (!(box_half_width > 0.0)) throw std::invalid_argument("impurity box half-width must be positive");
  if (!(amplitude > 0.0)) throw std::invalid_argument("impurity amplitude must be positive");
  const double side = 2.0 * box_half_width;
  const auto count = static_cast<std::size_t>(std::llround(density * side * side));
  ImpurityField f;
  f.seed = seed;
  f.density = density;
  f.box_half_width = box_half_width;
  f.bumps.reserve(count);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const double x = rng.uniform(-box_half_width, box_half_width);
    const double y = rng.uniform(-box_half_width, box_half_width);
    f.bumps.push_back({{x, y}, amplitude, sigma});
  }
  return f;
}

/// V(|q|) + sum of bumps, exact superposition.
inline double eval_potential(const RadialPotential& V, const ImpurityField& field, Vec2 q) {
  return V.value(norm(q)) + field.value(q);
}

inline Vec2 potential_gradient(const RadialPotential& V, const ImpurityField& field, Vec2 q) {
  return radial_gradient(V, q) + field.gradient(q);
}

inline Sym2 potential_hessian(const RadialPotential& V, const ImpurityField& field, Vec2 q) {
  return radial_hessian(V, q) + field.hessian(q);
}

/// Bump centers rotated counter-clockwise by theta about the origin.
inline ImpurityField rotate_field(const ImpurityField& field, double theta) {
  ImpurityField f = field;
  if (theta == 0.0) return f;
  const double c = std::cos(theta), s = std::sin(theta);
  for (auto& b : f.bumps) b.center = {c * b.center.x - s * b.center.y, s * b.center.x + c * b.center.y};
  return f;
}

/// Uniform-cell bucket index over the bumps for cutoff evaluation (6 sigma).
/// Used by trajectory ensembles where the full sum per force call is too slow.
class BumpIndex {
 public:
  BumpIndex() = default;

  explicit BumpIndex(const ImpurityField& field, double cutoff_sigmas = kBumpCutoffSigmas)
      : bumps_(field.bumps) {
    if (bumps_.empty()) return;
    reach_ = cutoff_sigmas * field.max_sigma();
    cell_ = std::max(reach_, 1e-6);
    lo_ = {std::numeric_limits<double>::max(), std::numeric_limits<double>::max()};
    Vec2 hi{-lo_.x, -lo_.y};
    for (const auto& b : bumps_) {
      lo_.x = std::min(lo_.x, b.center.x);
      lo_.y = std::min(lo_.y, b.center.y);
      hi.x = std::max(hi.x, b.center.x);
      hi.y = std::max(hi.y, b.center.y);
    }
    nx_ = static_cast<int>(std::floor((hi.x - lo_.x) / cell_)) + 1;
    ny_ = static_cast<int>(std::floor((hi.y - lo_.y) / cell_)) + 1;
    start_.assign(static_cast<std::size_t>(nx_) * ny_ + 1, 0);
    std::vector<int> cell_of(bumps_.size());
    for (std::size_t i = 0; i < bumps_.size(); ++i) {
      cell_of[i] = cell_index(bumps_[i].center);
      ++start_[static_cast<std::size_t>(cell_of[i]) + 1];
    }
    for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
    order_.resize(bumps_.size());
    std::vector<int> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < bumps_.size(); ++i) order_[static_cast<std::size_t>(fill[cell_of[i]]++)] = static_cast<int>(i);
  }

  /// Calls fn(bump) for every bump whose center lies within the cutoff of q.
  template <class Fn>
  void for_near(Vec2 q, Fn&& fn) const {
    if (bumps_.empty()) return;
    const int cx = static_cast<int>(std::floor((q.x - lo_.x) / cell_));
    const int cy = static_cast<int>(std::floor((q.y - lo_.y) / cell_));
    const double reach2 = reach_ * reach_;
    for (int j = std::max(cy - 1, 0); j <= std::min(cy + 1, ny_ - 1); ++j)
      for (int i = std::max(cx - 1, 0); i <= std::min(cx + 1, nx_ - 1); ++i) {
        const std::size_t c = static_cast<std::size_t>(j) * nx_ + i;
        for (int k = start_[c]; k < start_[c + 1]; ++k) {
          const auto& b = bumps_[static_cast<std::size_t>(order_[static_cast<std::size_t>(k)])];
          if (norm2(q - b.center) <= reach2) fn(b);
        }
      }
  }

  double value(Vec2 q) const {
    double v = 0.0;
    for_near(q, [&](const GaussianBump& b) { v += b.value(q); });
    return v;
  }

  Vec2 gradient(Vec2 q) const {
    Vec2 g;
    for_near(q, [&](const GaussianBump& b) {
      const Vec2 d = q - b.center;
      const double s2 = b.sigma * b.sigma;
      g -= d * (b.amplitude * std::exp(-norm2(d) / (2.0 * s2)) / s2);
    });
    return g;
  }

  Sym2 hessian(Vec2 q) const {
    Sym2 h;
    for_near(q, [&](const GaussianBump& b) {
      const Vec2 d = q - b.center;
      const double s2 = b.sigma * b.sigma;
      const double g = b.amplitude * std::exp(-norm2(d) / (2.0 * s2)) / s2;
      h += Sym2{g * (d.x * d.x / s2 - 1.0), g * d.x * d.y / s2, g * (d.y * d.y / s2 - 1.0)};
    });
    return h;
  }

 private:
  int cell_index(Vec2 c) const {
    const int i = std::clamp(static_cast<int>(std::floor((c.x - lo_.x) / cell_)), 0, nx_ - 1);
    const int j = std::clamp(static_cast<int>(std::floor((c.y - lo_.y) / cell_)), 0, ny_ - 1);
    return j * nx_ + i;
  }

  std::vector<GaussianBump> bumps_;
  std::vector<int> start_, order_;
  Vec2 lo_;
  double cell_ = 1.0, reach_ = 0.0;
  int nx_ = 0, ny_ = 0;
};

// ---------------------------------------------------------------------------
// Impurity file: header `# seed=<n> density=<d> box=<w>`, then one bump per
// line as `x y amplitude sigma` with 17 significant digits.

inline void write_impurities(std::ostream& os, const ImpurityField& field) {
  os << "# seed=" << field.seed << " density=" << fmt17(field.density)
     << " box=" << fmt17(field.box_half_width) << '\n';
  for (const auto& b : field.bumps)
    os << fmt17(b.center.x) << ' ' << fmt17(b.center.y) << ' ' << fmt17(b.amplitude) << ' '
       << fmt17(b.sigma) << '\n';
}

inline ImpurityField read_impurities(std::istream& is) {
  ImpurityField f;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (header) continue;
      std::istringstream hs(line.substr(1));
      std::string tok;
      while (hs >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "seed") f.seed = std::stoull(val);
        else if (key == "density") f.density = std::stod(val);
        else if (key == "box") f.box_half_width = std::stod(val);
      }
      header = true;
      continue;
    }
    std::istringstream ls(line);
    GaussianBump b;
    if (!(ls >> b.center.x >> b.center.y >> b.amplitude >> b.sigma))
      throw std::invalid_argument("malformed impurity line: " + line);
    f.bumps.push_back(b);
  }
  if (!header) throw std::invalid_argument("impurity file lacks the '# seed=... density=... box=...' header");
  return f;
}

inline void save_impurities(const std::string& path, const ImpurityField& field) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_impurities(os, field);
}

inline ImpurityField load_impurities(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_impurities(is);
}

}  // namespace scarlab
