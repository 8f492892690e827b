#pragma once

// Pipeline behind the scarcli tool: flat key = value configuration, output
// directory handling and one function per subcommand. Every command writes
// its resolved configuration next to its outputs; CSVs open with a units line.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "scarlab/classical_dynamics.hpp"
#include "scarlab/core.hpp"
#include "scarlab/potential_field.hpp"
#include "scarlab/quantum_solver.hpp"
#include "scarlab/resonance_dpt.hpp"
#include "scarlab/wavepacket_lab.hpp"

#ifndef SCARLAB_VERSION
#define SCARLAB_VERSION "unknown"
#endif

namespace scarlab::cli {

inline constexpr const char* kVersion = SCARLAB_VERSION;
inline constexpr const char* kUnitsLine = "# natural units (hbar = 1, mass = 1)";

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An upstream artifact is missing or belongs to another configuration.
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  std::string well = "power";  // power | cosh
  double well_coefficient = 0.5;
  double well_exponent = 5.0;

  std::uint64_t impurity_seed = 1;
  double impurity_density = 2.0;  // bumps per unit area; 0 disables the field
  double impurity_amplitude = 24.0;
  double impurity_sigma = 0.1;
  double impurity_box = 0.0;  // half width of the sampling square; 0: grid half width

  int grid_points = 256;
  double grid_half_width = 4.5;

  std::size_t solver_states = 1200;
  std::string solver_method = "chebyshev";
  double solver_tol = 1e-6;
  int solver_max_iterations = 80;
  int solver_degree = 24;
  bool solver_warm_start = true;
  std::vector<std::size_t> solver_dump;

  int orbit_p = 2;
  int orbit_q = 5;

  std::vector<double> orbits_exponents = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  int orbits_n_max = 15;
  double orbits_energy = 1.0;

  int sweep_alpha_grid = 24;
  double sweep_threshold = 3e-3;
  std::size_t sweep_first_state = 100;
  std::size_t sweep_last_state = 0;  // exclusive; 0: end of the spectrum
  double sweep_degenerate_tol = 0.0;
  double sweep_branch_quantile = 0.75;
  double sweep_branch_significance = 3.0;
  int sweep_branch_radius = 0;
  double sweep_span_quantile = 0.1;
  double sweep_persistent_span = 100.0;

  double packet_across_fraction = 0.25;
  double packet_along_ratio = 2.0;
  std::string packet_energy_match = "mean";  // mean | classical

  double recur_energy = 240.0;
  double recur_alpha = -1.0;  // < 0: orientation of largest inverse participation
  double recur_periods = 4.3;
  int recur_samples_per_period = 200;
  std::size_t recur_classical_samples = 20000;
  std::uint64_t recur_seed = 1;
  int recur_steps_per_period = 2000;
  bool recur_classical_unperturbed = false;

  int dpt_k_range = 2;
  double dpt_window_factor = 1.5;
  double dpt_search_factor = 15.0;
  int dpt_random_trials = 200;
  int dpt_theta_grid = 50;
  double dpt_scar_quantile = 0.9;
  std::uint64_t dpt_seed = 1;
  double dpt_basis_energy = 0.0;  // 0: 1.2 x highest solved energy

  std::vector<double> amplitude_values = {8, 16, 24, 32};
  double amplitude_energy = 0.0;  // unperturbed tracked energy; 0: strongest scar of the leading branch
  double amplitude_window = 2.0;  // half width in mean level spacings

  std::size_t render_state = 0;
  bool render_overlay = true;
  double render_alpha = -1.0;  // < 0: the state's sweep orientation when available, else 0

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string tok;
  std::istringstream is(s);
  while (std::getline(is, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& want, const std::string& got) {
  throw ConfigError("key '" + key + "': expected " + want + ", got '" + got + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, "a number", v);
  }
  if (pos != v.size() || !std::isfinite(d)) bad_value(key, "a finite number", v);
  return d;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long i = 0;
  try {
    i = std::stoll(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, "an integer", v);
  }
  if (pos != v.size()) bad_value(key, "an integer", v);
  return i;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  if (v.empty() || v[0] == '-') bad_value(key, "a non-negative integer", v);
  std::size_t pos = 0;
  unsigned long long i = 0;
  try {
    i = std::stoull(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, "a non-negative integer", v);
  }
  if (pos != v.size()) bad_value(key, "a non-negative integer", v);
  return i;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, "true or false", v);
}

template <class T>
std::string to_text(const T& v) {
  if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
  else if constexpr (std::is_same_v<T, double>) return fmt17(v);
  else if constexpr (std::is_same_v<T, std::string>) return v;
  else return std::to_string(v);
}

template <class T>
std::string to_text(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + to_text(v[i]);
  return s;
}

template <class T>
void from_text(const std::string& k, const std::string& v, T& out) {
  if constexpr (std::is_same_v<T, bool>) {
    out = parse_bool(k, v);
  } else if constexpr (std::is_same_v<T, double>) {
    out = parse_double(k, v);
  } else if constexpr (std::is_same_v<T, std::string>) {
    out = v;
  } else if constexpr (std::is_unsigned_v<T>) {
    out = static_cast<T>(parse_u64(k, v));
  } else {
    const long long i = parse_int(k, v);
    if (i < std::numeric_limits<T>::min() || i > std::numeric_limits<T>::max()) bad_value(k, "a 32-bit integer", v);
    out = static_cast<T>(i);
  }
}

template <class T>
void from_text(const std::string& k, const std::string& v, std::vector<T>& out) {
  out.clear();
  for (const auto& tok : split_list(v)) {
    T x{};
    from_text(k, tok, x);
    out.push_back(x);
  }
}

struct KeyInfo {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  bool spectral = false;  // part of the spectrum hash
};

template <class T>
KeyInfo key(const char* name, T RunConfig::*member, bool spectral = false) {
  return {name, [member](const RunConfig& c) { return to_text(c.*member); },
          [member, n = std::string(name)](RunConfig& c, const std::string& v) { from_text(n, v, c.*member); },
          spectral};
}

}  // namespace detail

/// Every documented key in file order. impurity.fwhm is an input alias for
/// impurity.sigma and is not listed.
inline const std::vector<detail::KeyInfo>& config_keys() {
  using detail::key;
  static const std::vector<detail::KeyInfo> keys = {
      key("well", &RunConfig::well, true),
      key("well.coefficient", &RunConfig::well_coefficient, true),
      key("well.exponent", &RunConfig::well_exponent, true),
      key("impurity.seed", &RunConfig::impurity_seed, true),
      key("impurity.density", &RunConfig::impurity_density, true),
      key("impurity.amplitude", &RunConfig::impurity_amplitude, true),
      key("impurity.sigma", &RunConfig::impurity_sigma, true),
      key("impurity.box", &RunConfig::impurity_box, true),
      key("grid.points", &RunConfig::grid_points, true),
      key("grid.half_width", &RunConfig::grid_half_width, true),
      key("solver.states", &RunConfig::solver_states, true),
      key("solver.method", &RunConfig::solver_method, true),
      key("solver.tol", &RunConfig::solver_tol, true),
      key("solver.max_iterations", &RunConfig::solver_max_iterations, true),
      key("solver.degree", &RunConfig::solver_degree, true),
      key("solver.warm_start", &RunConfig::solver_warm_start, true),
      key("solver.dump", &RunConfig::solver_dump),
      key("orbit.p", &RunConfig::orbit_p),
      key("orbit.q", &RunConfig::orbit_q),
      key("orbits.exponents", &RunConfig::orbits_exponents),
      key("orbits.n_max", &RunConfig::orbits_n_max),
      key("orbits.energy", &RunConfig::orbits_energy),
      key("sweep.alpha_grid", &RunConfig::sweep_alpha_grid),
      key("sweep.threshold", &RunConfig::sweep_threshold),
      key("sweep.first_state", &RunConfig::sweep_first_state),
      key("sweep.last_state", &RunConfig::sweep_last_state),
      key("sweep.degenerate_tol", &RunConfig::sweep_degenerate_tol),
      key("sweep.branch_quantile", &RunConfig::sweep_branch_quantile),
      key("sweep.branch_significance", &RunConfig::sweep_branch_significance),
      key("sweep.branch_radius", &RunConfig::sweep_branch_radius),
      key("sweep.span_quantile", &RunConfig::sweep_span_quantile),
      key("sweep.persistent_span", &RunConfig::sweep_persistent_span),
      key("packet.across_fraction", &RunConfig::packet_across_fraction),
      key("packet.along_ratio", &RunConfig::packet_along_ratio),
      key("packet.energy_match", &RunConfig::packet_energy_match),
      key("recur.energy", &RunConfig::recur_energy),
      key("recur.alpha", &RunConfig::recur_alpha),
      key("recur.periods", &RunConfig::recur_periods),
      key("recur.samples_per_period", &RunConfig::recur_samples_per_period),
      key("recur.classical_samples", &RunConfig::recur_classical_samples),
      key("recur.seed", &RunConfig::recur_seed),
      key("recur.steps_per_period", &RunConfig::recur_steps_per_period),
      key("recur.classical_unperturbed", &RunConfig::recur_classical_unperturbed),
      key("dpt.k_range", &RunConfig::dpt_k_range),
      key("dpt.window_factor", &RunConfig::dpt_window_factor),
      key("dpt.search_factor", &RunConfig::dpt_search_factor),
      key("dpt.random_trials", &RunConfig::dpt_random_trials),
      key("dpt.theta_grid", &RunConfig::dpt_theta_grid),
      key("dpt.scar_quantile", &RunConfig::dpt_scar_quantile),
      key("dpt.seed", &RunConfig::dpt_seed),
      key("dpt.basis_energy", &RunConfig::dpt_basis_energy),
      key("amplitude.values", &RunConfig::amplitude_values),
      key("amplitude.energy", &RunConfig::amplitude_energy),
      key("amplitude.window", &RunConfig::amplitude_window),
      key("render.state", &RunConfig::render_state),
      key("render.overlay", &RunConfig::render_overlay),
      key("render.alpha", &RunConfig::render_alpha),
  };
  return keys;
}

/// Range checks; messages name the offending key.
inline void validate(const RunConfig& c) {
  auto need = [](bool ok, const char* k, const std::string& what) {
    if (!ok) throw ConfigError("key '" + std::string(k) + "': " + what);
  };
  need(c.well == "power" || c.well == "cosh", "well", "must be 'power' or 'cosh', got '" + c.well + "'");
  need(c.well_coefficient > 0.0, "well.coefficient", "must be positive");
  need(c.well != "power" || c.well_exponent > 0.0, "well.exponent", "must be positive");
  need(c.impurity_density >= 0.0, "impurity.density", "must be non-negative");
  need(c.impurity_amplitude >= 0.0, "impurity.amplitude", "must be non-negative");
  need(c.impurity_sigma > 0.0, "impurity.sigma", "must be positive");
  need(c.impurity_box >= 0.0, "impurity.box", "must be non-negative");
  need(c.grid_points >= 16 && c.grid_points % 2 == 0, "grid.points", "must be even and at least 16");
  need(c.grid_half_width > 0.0, "grid.half_width", "must be positive");
  need(c.solver_states >= 1, "solver.states", "must be at least 1");
  need(c.solver_method == "chebyshev" || c.solver_method == "imaginary_time", "solver.method",
       "must be 'chebyshev' or 'imaginary_time', got '" + c.solver_method + "'");
  need(c.solver_tol > 0.0, "solver.tol", "must be positive");
  need(c.solver_max_iterations >= 1, "solver.max_iterations", "must be at least 1");
  need(c.solver_degree >= 2, "solver.degree", "must be at least 2");
  need(c.orbit_p >= 1 && c.orbit_q >= 1, "orbit.p", "orbit.p and orbit.q must be positive");
  need(!c.orbits_exponents.empty(), "orbits.exponents", "must list at least one exponent");
  for (double a : c.orbits_exponents) need(a > 0.0, "orbits.exponents", "exponents must be positive");
  need(c.orbits_n_max >= 2, "orbits.n_max", "must be at least 2");
  need(c.orbits_energy > 0.0, "orbits.energy", "must be positive");
  need(c.sweep_alpha_grid >= 8, "sweep.alpha_grid", "must be at least 8");
  need(c.sweep_threshold >= 0.0, "sweep.threshold", "must be non-negative");
  need(c.sweep_last_state == 0 || c.sweep_last_state > c.sweep_first_state, "sweep.last_state",
       "must exceed sweep.first_state (or be 0)");
  need(c.sweep_branch_quantile >= 0.0 && c.sweep_branch_quantile < 1.0, "sweep.branch_quantile", "must lie in [0, 1)");
  need(c.sweep_branch_radius >= 0, "sweep.branch_radius", "must be non-negative");
  need(c.sweep_span_quantile >= 0.0 && c.sweep_span_quantile < 0.5, "sweep.span_quantile", "must lie in [0, 0.5)");
  need(c.packet_across_fraction > 0.0, "packet.across_fraction", "must be positive");
  need(c.packet_along_ratio > 0.0, "packet.along_ratio", "must be positive");
  need(c.packet_energy_match == "mean" || c.packet_energy_match == "classical", "packet.energy_match",
       "must be 'mean' or 'classical'");
  need(c.recur_energy > 0.0, "recur.energy", "must be positive");
  need(c.recur_periods > 0.0, "recur.periods", "must be positive");
  need(c.recur_samples_per_period >= 1, "recur.samples_per_period", "must be at least 1");
  need(c.recur_classical_samples >= 1, "recur.classical_samples", "must be at least 1");
  need(c.recur_steps_per_period >= 1, "recur.steps_per_period", "must be at least 1");
  need(c.dpt_k_range >= 0, "dpt.k_range", "must be non-negative");
  need(c.dpt_window_factor > 0.0, "dpt.window_factor", "must be positive");
  need(c.dpt_search_factor > 0.0, "dpt.search_factor", "must be positive");
  need(c.dpt_random_trials >= 1, "dpt.random_trials", "must be at least 1");
  need(c.dpt_theta_grid >= 3, "dpt.theta_grid", "must be at least 3");
  need(c.dpt_scar_quantile >= 0.0 && c.dpt_scar_quantile < 1.0, "dpt.scar_quantile", "must lie in [0, 1)");
  need(c.dpt_basis_energy >= 0.0, "dpt.basis_energy", "must be non-negative");
  need(!c.amplitude_values.empty(), "amplitude.values", "must list at least one amplitude");
  for (double m : c.amplitude_values) need(m >= 0.0, "amplitude.values", "amplitudes must be non-negative");
  need(c.amplitude_energy >= 0.0, "amplitude.energy", "must be non-negative");
  need(c.amplitude_window > 0.0, "amplitude.window", "must be positive");
}

/// Parses `key = value` lines; `#` starts a comment. Unknown, repeated or
/// malformed keys are errors. Keys not given keep their defaults.
inline RunConfig parse_config(std::istream& is, RunConfig c = {}) {
  std::map<std::string, const detail::KeyInfo*> index;
  for (const auto& k : config_keys()) index[k.name] = &k;
  std::map<std::string, int> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    const std::string k = detail::trim(line.substr(0, eq)), v = detail::trim(line.substr(eq + 1));
    const std::string canonical = k == "impurity.fwhm" ? "impurity.sigma" : k;
    if (auto [it, fresh] = seen.emplace(canonical, lineno); !fresh)
      throw ConfigError("key '" + k + "' set twice (lines " + std::to_string(it->second) + " and " +
                        std::to_string(lineno) + ")");
    if (k == "impurity.fwhm") {
      const double fwhm = detail::parse_double(k, v);
      if (!(fwhm > 0.0)) throw ConfigError("key 'impurity.fwhm': must be positive");
      c.impurity_sigma = fwhm_to_sigma(fwhm);
      continue;
    }
    const auto it = index.find(k);
    if (it == index.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + k + "'");
    it->second->set(c, v);
  }
  validate(c);
  return c;
}

inline RunConfig parse_config_text(const std::string& text, RunConfig c = {}) {
  std::istringstream is(text);
  return parse_config(is, std::move(c));
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  return parse_config(is);
}

/// Every key, one per line, in config_keys() order.
inline void write_config(std::ostream& os, const RunConfig& c) {
  for (const auto& k : config_keys()) os << k.name << " = " << k.get(c) << '\n';
}

inline std::string config_text(const RunConfig& c) {
  std::ostringstream os;
  write_config(os, c);
  return os.str();
}

/// Defaults filled in: impurity.box = 0 becomes the grid half width.
inline RunConfig resolved(RunConfig c) {
  if (c.impurity_box == 0.0) c.impurity_box = c.grid_half_width;
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Derived objects

inline RadialPotential make_potential(const RunConfig& c) {
  return c.well == "cosh" ? RadialPotential::cosh_well(c.well_coefficient)
                          : RadialPotential::power_law(c.well_coefficient, c.well_exponent);
}

/// Empty when the density or amplitude is zero.
inline ImpurityField make_field(const RunConfig& c) {
  const RunConfig r = resolved(c);
  if (r.impurity_density == 0.0 || r.impurity_amplitude == 0.0) return {};
  return sample_impurities(r.impurity_seed, r.impurity_density, r.impurity_amplitude, r.impurity_sigma,
                           r.impurity_box);
}

inline Grid2D make_grid(const RunConfig& c) { return Grid2D(c.grid_half_width, c.grid_points); }

inline SweepOptions sweep_options(const RunConfig& c) {
  SweepOptions o;
  o.alpha_grid = c.sweep_alpha_grid;
  o.threshold = c.sweep_threshold;
  o.widths = {c.packet_across_fraction, c.packet_along_ratio};
  o.match = c.packet_energy_match == "classical" ? EnergyMatch::Classical : EnergyMatch::Mean;
  o.degenerate_tol = c.sweep_degenerate_tol;
  return o;
}

inline ScarOptions scar_options(const RunConfig& c) {
  ScarOptions o;
  o.p = c.orbit_p;
  o.q = c.orbit_q;
  o.k_range = c.dpt_k_range;
  o.window_factor = c.dpt_window_factor;
  o.search_factor = c.dpt_search_factor;
  o.random_trials = c.dpt_random_trials;
  o.seed = c.dpt_seed;
  return o;
}

/// 64-bit FNV-1a, as 16 hex digits.
inline std::string fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Hash of the keys that determine the spectrum (solver.dump excluded).
inline std::string spectrum_hash(const RunConfig& c) {
  const RunConfig r = resolved(c);
  std::string s = "spectrum-v1\n";
  for (const auto& k : config_keys())
    if (k.spectral) s += k.name + "=" + k.get(r) + "\n";
  return fnv1a(s);
}

/// Hash of everything the orientation sweep depends on.
inline std::string sweep_hash(const RunConfig& c) {
  const RunConfig r = resolved(c);
  std::string s = "sweep-v1\n" + spectrum_hash(r) + "\n";
  for (const auto& k : config_keys())
    if (k.name.starts_with("orbit.") || k.name.starts_with("packet.") || k.name.starts_with("sweep."))
      s += k.name + "=" + k.get(r) + "\n";
  return fnv1a(s);
}

// ---------------------------------------------------------------------------
// Output directory

/// Creates the directory, takes `.lock` (exclusive create) and writes
/// `resolved_config`; the lock is removed on destruction.
class OutputDir {
 public:
  OutputDir(const std::string& path, const RunConfig& c) : path_(path) {
    std::error_code ec;
    std::filesystem::create_directories(path_, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + path_ + ": " + ec.message());
    lock_ = file(".lock");
    const int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST)
        throw std::runtime_error("output directory " + path_ + " is locked by another run (remove " + lock_ +
                                 " if that run is gone)");
      throw std::runtime_error("cannot create " + lock_ + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd, pid.data(), pid.size()) < 0) {
      // The pid is informational only.
    }
    ::close(fd);
    std::ofstream os(file("resolved_config"));
    if (!os) throw std::runtime_error("cannot write " + file("resolved_config"));
    os << "# scarcli " << kVersion << '\n' << kUnitsLine << '\n';
    write_config(os, resolved(c));
  }
  ~OutputDir() {
    std::error_code ec;
    std::filesystem::remove(lock_, ec);
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;

  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const { return (std::filesystem::path(path_) / name).string(); }

  /// Text file opened for writing, units line already emitted.
  std::ofstream csv(const std::string& name) const {
    std::ofstream os(file(name));
    if (!os) throw std::runtime_error("cannot write " + file(name));
    os << kUnitsLine << '\n';
    return os;
  }

 private:
  std::string path_;
  std::string lock_;
};

namespace detail {

inline std::string read_token(const std::string& path) {
  std::ifstream is(path);
  std::string s;
  if (is) is >> s;
  return s;
}

inline void write_token(const std::string& path, const std::string& token) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << token << '\n';
}

inline std::ostream& null_log() {
  static std::ostream os(nullptr);
  return os;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Spectra

/// Lowest n eigenpairs for the configured well and grid in `field`, started
/// from the unperturbed polar basis when solver.warm_start is set.
inline Spectrum solve_spectrum(const RunConfig& c, const ImpurityField& field, std::size_t n, std::ostream& log) {
  const RadialPotential V = make_potential(c);
  const Grid2D grid = make_grid(c);
  EigenOptions o;
  o.method = parse_method(c.solver_method);
  o.tol = c.solver_tol;
  o.max_iterations = c.solver_max_iterations;
  o.degree = c.solver_degree;
  o.progress = [&log](int it, std::size_t conv, double worst) {
    log << "  iteration " << it << ": " << conv << " converged, worst residual " << worst << std::endl;
  };
  Eigen::MatrixXd X0;
  if (c.solver_warm_start && o.method == EigenOptions::Method::Chebyshev) {
    const std::size_t nvec =
        n + std::max<std::size_t>(o.min_guard, static_cast<std::size_t>(std::ceil(o.guard_fraction * n)));
    const double Em = weyl_energy(V, 1.15 * static_cast<double>(nvec));
    X0 = polar_subspace(solve_radial_basis(V, max_angular_momentum(V, Em), Em), grid, nvec);
    o.initial = &X0;
  }
  return solve_eigenstates(V, field, grid, n, o);
}

/// Loads `<stem>.bin` when `<stem>.hash` matches, else solves and stores.
inline Spectrum cached_spectrum(const OutputDir& dir, const std::string& stem, const std::string& hash,
                                const std::function<Spectrum()>& solve, bool* reused = nullptr) {
  const std::string bin = dir.file(stem + ".bin"), hfile = dir.file(stem + ".hash");
  if (std::filesystem::exists(bin) && detail::read_token(hfile) == hash) {
    if (reused) *reused = true;
    return load_spectrum(bin);
  }
  if (reused) *reused = false;
  std::filesystem::remove(hfile);
  Spectrum s = solve();
  save_spectrum(bin, s);
  detail::write_token(hfile, hash);
  return s;
}

/// The configuration's spectrum from `dir`, or MissingArtifact.
inline Spectrum load_run_spectrum(const RunConfig& c, const std::string& dir) {
  const auto base = std::filesystem::path(dir);
  const std::string bin = (base / "spectrum.bin").string();
  if (!std::filesystem::exists(bin))
    throw MissingArtifact("no spectrum in " + dir + "; run `scarcli solve` with this configuration first");
  if (detail::read_token((base / "spectrum.hash").string()) != spectrum_hash(c))
    throw MissingArtifact("the spectrum in " + dir +
                          " belongs to a different configuration; run `scarcli solve` with this configuration first");
  return load_spectrum(bin);
}

// ---------------------------------------------------------------------------
// orbits

struct OrbitRow {
  double exponent = 0.0;
  OrbitSpec orbit;
};

/// Resonances p/q (q <= orbits.n_max) of V = r^a for each listed exponent.
/// Writes orbits.csv and the aligned table orbits_table.txt.
inline std::vector<OrbitRow> cmd_orbits(const RunConfig& c, const std::string& out) {
  const OutputDir dir(out, c);
  std::vector<OrbitRow> rows;
  for (double a : c.orbits_exponents)
    for (const auto& o : find_periodic_orbits(RadialPotential::power_law(1.0, a), c.orbits_energy, c.orbits_n_max))
      rows.push_back({a, o});
  auto os = dir.csv("orbits.csv");
  os << "exponent,p,q,family,angular_momentum,r_in,r_out,period\n";
  for (const auto& r : rows)
    os << fmt17(r.exponent) << ',' << r.orbit.p << ',' << r.orbit.q << ',' << (r.orbit.family ? 1 : 0) << ','
       << fmt17(r.orbit.angular_momentum) << ',' << fmt17(r.orbit.r_in) << ',' << fmt17(r.orbit.r_out) << ','
       << fmt17(r.orbit.period) << '\n';
  for (double a : c.orbits_exponents) {
    std::vector<OrbitSpec> row;
    for (const auto& r : rows)
      if (r.exponent == a) row.push_back(r.orbit);
    auto es = dir.csv("orbits_a" + fmt17(a) + ".csv");
    write_orbits_csv(es, row);
  }
  std::ofstream tab(dir.file("orbits_table.txt"));
  tab << "# periodic orbits p/q of V ~ r^a, q <= " << c.orbits_n_max << ", columns aligned by q\n";
  std::set<int> used_q;
  for (const auto& r : rows) used_q.insert(r.orbit.q);
  for (double a : c.orbits_exponents) {
    std::map<int, std::vector<int>> by_q;
    bool family = false;
    for (const auto& r : rows)
      if (r.exponent == a) {
        by_q[r.orbit.q].push_back(r.orbit.p);
        family = family || r.orbit.family;
      }
    tab << std::setw(4) << fmt17(a) << " |";
    for (int q : used_q) {
      std::string cell;
      if (auto it = by_q.find(q); it != by_q.end()) {
        if (it->second.size() == 1) {
          cell = std::to_string(it->second[0]) + "/" + std::to_string(q);
        } else {
          cell = "{";
          for (std::size_t i = 0; i < it->second.size(); ++i) cell += (i ? "," : "") + std::to_string(it->second[i]);
          cell += "}/" + std::to_string(q);
        }
      }
      tab << ' ' << std::setw(10) << cell;
    }
    if (family) tab << "  (isochronous: every orbit closes)";
    tab << '\n';
  }
  return rows;
}

// ---------------------------------------------------------------------------
// impurities

/// Samples the configured realization into impurities.txt.
inline ImpurityField cmd_impurities(const RunConfig& c, const std::string& out) {
  const OutputDir dir(out, c);
  const ImpurityField f = make_field(c);
  ImpurityField meta = f;
  if (f.empty()) {
    const RunConfig r = resolved(c);
    meta.seed = r.impurity_seed;
    meta.density = r.impurity_density;
    meta.box_half_width = r.impurity_box;
  }
  save_impurities(dir.file("impurities.txt"), meta);
  return f;
}

// ---------------------------------------------------------------------------
// solve

struct SolveResult {
  Spectrum spectrum;
  bool reused = false;
};

/// Spectrum of the configuration. Skips the solve when spectrum.hash already
/// matches; always refreshes spectrum.csv and the WF2D dumps of solver.dump.
inline SolveResult cmd_solve(const RunConfig& c, const std::string& out, std::ostream& log = detail::null_log()) {
  const OutputDir dir(out, c);
  const ImpurityField f = make_field(c);
  save_impurities(dir.file("impurities.txt"), f);
  SolveResult r;
  r.spectrum = cached_spectrum(
      dir, "spectrum", spectrum_hash(c),
      [&] {
        log << "solving " << c.solver_states << " states on a " << c.grid_points << "^2 grid" << std::endl;
        return solve_spectrum(c, f, c.solver_states, log);
      },
      &r.reused);
  if (r.reused) log << "spectrum for this configuration already present; skipping the solve" << std::endl;
  auto os = dir.csv("spectrum.csv");
  write_spectrum_csv(os, r.spectrum);
  for (std::size_t k : c.solver_dump) {
    if (k >= r.spectrum.size())
      throw std::out_of_range("solver.dump: state " + std::to_string(k) + " not solved (have " +
                              std::to_string(r.spectrum.size()) + ")");
    std::ostringstream name;
    name << "state_" << std::setw(5) << std::setfill('0') << k << ".wf2d";
    save_wf2d(dir.file(name.str()), r.spectrum.state(k));
  }
  return r;
}

// ---------------------------------------------------------------------------
// sweep

inline std::vector<OrientationRecord> read_orientation_csv(std::istream& is) {
  std::vector<OrientationRecord> out;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    std::istringstream ls(line);
    OrientationRecord r;
    char comma;
    int ex = 0;
    if (!(ls >> r.state >> comma >> r.energy >> comma >> r.alpha_max >> comma >> r.overlap2 >> comma >> ex))
      throw std::runtime_error("malformed sweep row: " + line);
    r.excluded = ex != 0;
    out.push_back(r);
  }
  return out;
}

struct SweepResult {
  OrientationScan scan;
  double scarred_fraction = 0.0;
  double branch_min_overlap = 0.0;
  std::vector<Branch> branches;
  std::size_t persistent = 0;  // branches spanning at least sweep.persistent_span
};

inline BranchOptions branch_options(const RunConfig& c, const OrientationScan& scan) {
  BranchOptions b;
  b.min_overlap = overlap_quantile(scan, c.sweep_branch_quantile);
  b.significance = c.sweep_branch_significance;
  b.radius = c.sweep_branch_radius;
  b.span_quantile = c.sweep_span_quantile;
  return b;
}

/// Orientation sweep of the solved spectrum. Writes sweep.csv, sweep_curves.csv,
/// branches.csv and sweep_summary.csv.
inline SweepResult cmd_sweep(const RunConfig& c, const std::string& out, std::ostream& log = detail::null_log()) {
  const Spectrum spec = load_run_spectrum(c, out);
  const OutputDir dir(out, c);
  const RadialPotential V = make_potential(c);
  const std::size_t hi = c.sweep_last_state ? std::min(c.sweep_last_state, spec.size()) : spec.size();
  if (c.sweep_first_state >= hi)
    throw ConfigError("key 'sweep.first_state': no states in the window (spectrum has " +
                      std::to_string(spec.size()) + ")");
  log << "sweeping states " << c.sweep_first_state << ".." << hi - 1 << " over " << c.sweep_alpha_grid
      << " orientations" << std::endl;
  SweepResult r;
  r.scan = orientation_sweep(spec, c.sweep_first_state, hi, V, c.orbit_p, c.orbit_q, sweep_options(c));
  r.scarred_fraction = scarred_fraction(r.scan);
  const BranchOptions bo = branch_options(c, r.scan);
  r.branch_min_overlap = bo.min_overlap;
  r.branches = find_branches(r.scan, bo);
  for (const auto& b : r.branches) r.persistent += b.span() >= c.sweep_persistent_span;

  auto os = dir.csv("sweep.csv");
  write_orientation_csv(os, r.scan);
  auto cs = dir.csv("sweep_curves.csv");
  cs << "state,alpha_index,alpha,overlap2\n";
  for (const auto& rec : r.scan.records)
    for (std::size_t a = 0; a < rec.curve.size(); ++a)
      cs << rec.state << ',' << a << ',' << fmt17(a * r.scan.alpha_step()) << ',' << fmt17(rec.curve[a]) << '\n';
  auto bs = dir.csv("branches.csv");
  bs << "alpha,alpha_index,count,expected,excess,e_min,e_max,span\n";
  for (const auto& b : r.branches)
    bs << fmt17(b.alpha) << ',' << std::lround(b.alpha / r.scan.alpha_step()) << ',' << b.count << ','
       << fmt17(b.expected) << ',' << fmt17(b.excess()) << ',' << fmt17(b.e_min) << ',' << fmt17(b.e_max) << ','
       << fmt17(b.span()) << '\n';
  auto ss = dir.csv("sweep_summary.csv");
  ss << "key,value\n"
     << "states," << r.scan.records.size() << '\n'
     << "threshold," << fmt17(c.sweep_threshold) << '\n'
     << "scarred_fraction," << fmt17(r.scarred_fraction) << '\n'
     << "branch_min_overlap," << fmt17(r.branch_min_overlap) << '\n'
     << "branches," << r.branches.size() << '\n'
     << "persistent_branches," << r.persistent << '\n';
  detail::write_token(dir.file("sweep.hash"), sweep_hash(c));
  return r;
}

/// sweep.csv of this configuration, or MissingArtifact.
inline std::vector<OrientationRecord> load_run_sweep(const RunConfig& c, const std::string& dir) {
  const auto base = std::filesystem::path(dir);
  std::ifstream is(base / "sweep.csv");
  if (!is || detail::read_token((base / "sweep.hash").string()) != sweep_hash(c))
    throw MissingArtifact("no orientation sweep for this configuration in " + dir +
                          "; run `scarcli solve` and then `scarcli sweep` first");
  return read_orientation_csv(is);
}

// ---------------------------------------------------------------------------
// amplitude sweep

struct AmplitudeResult {
  double tracked_energy = 0.0;  // unperturbed energy; the window sits at this plus mean_impurity
  double window = 0.0;
  AmplitudeSweep sweep;
  double drift_steps() const { return sweep.drift() / sweep.alpha_step; }
};

/// Strongest record near the most significant branch of a sweep.
inline const OrientationRecord* leading_scar(const std::vector<OrientationRecord>& recs, const std::vector<Branch>& br,
                                             const RunConfig& c) {
  if (br.empty()) return nullptr;
  const auto lead = std::max_element(br.begin(), br.end(), [](const Branch& a, const Branch& b) {
    return a.excess() < b.excess();
  });
  const double period = two_pi / c.orbit_q, step = period / c.sweep_alpha_grid;
  const OrientationRecord* best = nullptr;
  for (const auto& r : recs) {
    if (r.excluded) continue;
    if (std::abs(angle_diff(r.alpha_max, lead->alpha, period)) > (c.sweep_branch_radius + 0.5) * step) continue;
    if (!best || r.overlap2 > best->overlap2) best = &r;
  }
  return best;
}

/// Rescales the realization to each amplitude.values entry and follows the
/// strongest scar within amplitude.window level spacings of the tracked
/// energy. Spectra are cached as amplitude_<M>.bin. Writes amplitude.csv.
inline AmplitudeResult cmd_amplitude(const RunConfig& c, const std::string& out, std::ostream& log = detail::null_log()) {
  const RadialPotential V = make_potential(c);
  const ImpurityField base = make_field(c);
  if (base.empty()) throw ConfigError("key 'impurity.density': the amplitude sweep needs an impurity field");
  AmplitudeResult r;
  if (c.amplitude_energy > 0.0) {
    r.tracked_energy = c.amplitude_energy;
  } else {
    SweepResult s;
    s.scan.records = load_run_sweep(c, out);
    s.scan.q = c.orbit_q;
    s.scan.alpha_grid = c.sweep_alpha_grid;
    const auto br = find_branches(s.scan, branch_options(c, s.scan));
    const OrientationRecord* lead = leading_scar(s.scan.records, br, c);
    if (!lead) throw std::runtime_error("no significant branch in the sweep; set amplitude.energy explicitly");
    r.tracked_energy = lead->energy - mean_impurity(base);
    log << "tracking state " << lead->state << " (E = " << lead->energy << ")" << std::endl;
  }
  r.window = c.amplitude_window * mean_level_spacing(V, r.tracked_energy);
  const OutputDir dir(out, c);
  const auto n = static_cast<std::size_t>(std::ceil(1.05 * weyl_count(V, r.tracked_energy + r.window))) + 24;
  auto solve = [&](const ImpurityField& f) {
    RunConfig cm = c;
    cm.impurity_amplitude = f.bumps.empty() ? 0.0 : f.bumps.front().amplitude;
    cm.solver_states = n;
    std::ostringstream stem;
    stem << "amplitude_" << fmt17(cm.impurity_amplitude);
    log << "amplitude " << cm.impurity_amplitude << ": " << n << " states" << std::endl;
    return cached_spectrum(dir, stem.str(), spectrum_hash(cm), [&] { return solve_spectrum(cm, f, n, log); });
  };
  r.sweep = amplitude_sweep(base, c.amplitude_values, solve, V, c.orbit_p, c.orbit_q, r.tracked_energy, r.window,
                            sweep_options(c));
  auto os = dir.csv("amplitude.csv");
  os << "# tracked_energy=" << fmt17(r.tracked_energy) << " window=" << fmt17(r.window)
     << " drift=" << fmt17(r.sweep.drift()) << " drift_steps=" << fmt17(r.drift_steps()) << '\n';
  os << "amplitude,state,energy,alpha_max,alpha_index,overlap2\n";
  for (const auto& p : r.sweep.points)
    os << fmt17(p.amplitude) << ',' << p.state << ',' << fmt17(p.energy) << ',' << fmt17(p.alpha_max) << ','
       << std::lround(p.alpha_max / r.sweep.alpha_step) << ',' << fmt17(p.overlap2) << '\n';
  return r;
}

// ---------------------------------------------------------------------------
// recur

struct RecurResult {
  double energy = 0.0;
  double alpha = 0.0;
  double period = 0.0;
  RecurrenceSeries series;              // perturbed quantum and classical
  std::vector<double> quantum_unperturbed;
  std::vector<double> classical_unperturbed;
  std::vector<double> orientation_ipr;  // per alpha-grid point
  /// Peaks near t = kT, k = 1..floor(periods).
  struct Row {
    int k;
    Peak quantum, unperturbed, classical;
  };
  std::vector<Row> peaks;
};

/// Packet on the p/q orbit at recur.energy. With recur.alpha < 0 the
/// orientation is the alpha-grid point whose eigenstate decomposition has the
/// largest inverse participation ratio sum w_k^2. Propagates it in the
/// perturbed and unperturbed wells and runs the classical ensemble. Writes
/// recur.csv, recur_orientation.csv, recur_decomposition.csv and recur_peaks.csv.
inline RecurResult cmd_recur(const RunConfig& c, const std::string& out, std::ostream& log = detail::null_log()) {
  const RadialPotential V = make_potential(c);
  const ImpurityField f = make_field(c);
  const Grid2D grid = make_grid(c);
  const SweepOptions so = sweep_options(c);
  const OrbitSpec orbit = orbit_for_resonance(V, c.recur_energy, c.orbit_p, c.orbit_q);
  RecurResult r;
  r.energy = c.recur_energy;
  r.period = orbit.period;
  const double step = orbit.symmetry_angle() / c.sweep_alpha_grid;
  std::optional<Spectrum> spec;
  try {
    spec = load_run_spectrum(c, out);
  } catch (const MissingArtifact&) {
    if (c.recur_alpha < 0.0) throw;  // the orientation search needs the spectrum
  }
  const OutputDir dir(out, c);
  if (spec) {
    auto os = dir.csv("recur_orientation.csv");
    os << "alpha_index,alpha,ipr,captured\n";
    for (int a = 0; a < c.sweep_alpha_grid; ++a) {
      const Wavefunction phi = packet_on_orbit(orbit, a * step, V, so.widths, so.match).sample(grid);
      const Decomposition d = scarmometer(phi, *spec);
      std::vector<double> w2(d.weights.size());
      for (std::size_t k = 0; k < w2.size(); ++k) w2[k] = d.weights[k] * d.weights[k];
      r.orientation_ipr.push_back(pairwise_sum(w2));
      os << a << ',' << fmt17(a * step) << ',' << fmt17(r.orientation_ipr.back()) << ',' << fmt17(d.captured) << '\n';
    }
  }
  if (c.recur_alpha >= 0.0) {
    r.alpha = c.recur_alpha;
  } else {
    const auto best = std::max_element(r.orientation_ipr.begin(), r.orientation_ipr.end());
    r.alpha = static_cast<double>(best - r.orientation_ipr.begin()) * step;
  }
  log << "recurrences at E = " << r.energy << ", alpha = " << r.alpha << ", T = " << r.period << std::endl;
  const GaussianPacket pk = packet_on_orbit(orbit, r.alpha, V, so.widths, so.match);
  const Wavefunction phi = pk.sample(grid);
  if (spec) {
    auto os = dir.csv("recur_decomposition.csv");
    write_decomposition_csv(os, scarmometer(phi, *spec));
    spec.reset();
  }
  const double t_end = c.recur_periods * r.period, dt_sample = r.period / c.recur_samples_per_period;
  const double dt_classical = r.period / c.recur_steps_per_period;
  r.series = autocorrelation(phi, Hamiltonian(grid, V, f), r.period, t_end, dt_sample);
  log << "  perturbed quantum done" << std::endl;
  r.quantum_unperturbed = autocorrelation(phi, Hamiltonian(grid, V, ImpurityField{}), r.period, t_end, dt_sample).quantum;
  log << "  unperturbed quantum done" << std::endl;
  add_classical(r.series, pk, V, f, c.recur_classical_samples, c.recur_seed, dt_classical);
  log << "  classical done" << std::endl;
  if (c.recur_classical_unperturbed) {
    RecurrenceSeries u = r.series;
    add_classical(u, pk, V, ImpurityField{}, c.recur_classical_samples, c.recur_seed, dt_classical);
    r.classical_unperturbed = u.classical;
  }
  const auto& s = r.series;
  auto os = dir.csv("recur.csv");
  os << "# energy=" << fmt17(r.energy) << " alpha=" << fmt17(r.alpha) << " period=" << fmt17(r.period) << '\n';
  os << "t_over_T,quantum,classical,classical_sigma,quantum_unperturbed,classical_unperturbed\n";
  for (std::size_t i = 0; i < s.t_over_T.size(); ++i)
    os << fmt17(s.t_over_T[i]) << ',' << fmt17(s.quantum[i]) << ',' << fmt17(s.classical[i]) << ','
       << fmt17(s.classical_sigma[i]) << ',' << fmt17(r.quantum_unperturbed[i]) << ','
       << (r.classical_unperturbed.empty() ? std::string("nan") : fmt17(r.classical_unperturbed[i])) << '\n';
  auto cs = dir.csv("recur_classical.csv");
  RecurrenceCurve cc;
  for (std::size_t i = 0; i < s.t_over_T.size(); ++i) cc.times.push_back(s.t_over_T[i] * r.period);
  cc.strength = s.classical;
  write_recurrence_csv(cs, cc);
  auto ps = dir.csv("recur_peaks.csv");
  ps << "k,quantum,quantum_unperturbed,classical,classical_sigma\n";
  for (int k = 1; k <= static_cast<int>(std::floor(c.recur_periods)); ++k) {
    if (k + 0.2 > c.recur_periods + 1e-9) break;
    RecurResult::Row row{k, recurrence_peak(s.t_over_T, s.quantum, k),
                         recurrence_peak(s.t_over_T, r.quantum_unperturbed, k),
                         recurrence_peak(s.t_over_T, s.classical, k, 0.2, &s.classical_sigma)};
    r.peaks.push_back(row);
    ps << k << ',' << fmt17(row.quantum.value) << ',' << fmt17(row.unperturbed.value) << ','
       << fmt17(row.classical.value) << ',' << fmt17(row.classical.sigma) << '\n';
  }
  return r;
}

// ---------------------------------------------------------------------------
// dpt

struct DptReport {
  double scar_threshold = 0.0;  // sweep overlap^2 at dpt.scar_quantile
  std::vector<ScarAnalysis> scars;
  std::vector<double> sweep_overlap2;
  /// For max-type scars: argmax index of the exact state's rotation curve, else -1.
  std::vector<int> rotation_argmax;
  std::vector<int> rotation_argmax_qdpt;
  int theta_grid = 0;
};

/// Circular distance of a theta-grid index from 0.
inline int theta_offset(int index, int grid) { return std::min(index, grid - index); }

/// Resonant-set analysis of every detected scar: sweep records at or above
/// the dpt.scar_quantile of squared overlaps (and above the sweep threshold).
/// Max-type scars also get <V_imp(theta)> curves of the exact state and of
/// its qDPT reconstruction. Writes dpt.csv and rotation.csv.
inline DptReport cmd_dpt(const RunConfig& c, const std::string& out, std::ostream& log = detail::null_log()) {
  const Spectrum spec = load_run_spectrum(c, out);
  const auto recs = load_run_sweep(c, out);
  const RadialPotential V = make_potential(c);
  const ImpurityField f = make_field(c);
  const OutputDir dir(out, c);
  DptReport rep;
  rep.theta_grid = c.dpt_theta_grid;
  OrientationScan scan;
  scan.records = recs;
  rep.scar_threshold = overlap_quantile(scan, c.dpt_scar_quantile);
  const double Emax = c.dpt_basis_energy > 0.0 ? c.dpt_basis_energy : 1.2 * spec.energies.back();
  log << "radial basis up to E = " << Emax << std::endl;
  const auto basis = solve_radial_basis(V, max_angular_momentum(V, Emax), Emax);
  const ScarOptions so = scar_options(c);

  auto ds = dir.csv("dpt.csv");
  ds << "state,energy,sweep_overlap2,candidates,center_n_r,center_m,set_doublets,scar_overlap2,qdpt_state,"
        "qdpt_overlap2,dpt_state,dpt_overlap2,max_type,top_vimp,random_vimp,rotation_argmax,rotation_argmax_qdpt\n";
  auto rs = dir.csv("rotation.csv");
  rs << "state,theta_index,theta,vimp_exact,vimp_qdpt\n";
  std::filesystem::create_directories(dir.file("dpt"));
  auto stem = [](std::size_t k) {
    std::ostringstream ss;
    ss << "state_" << std::setw(5) << std::setfill('0') << k;
    return ss.str();
  };
  for (const auto& rec : recs) {
    if (rec.excluded || rec.overlap2 < rep.scar_threshold) continue;
    const ScarAnalysis A = analyze_scar(spec, rec.state, V, basis, f, so);
    int am = -1, amq = -1;
    if (A.max_type) {
      const Wavefunction psi = spec.state(rec.state);
      const DptResult q = dpt_diagonalize(A.set, basis, f, DptMode::qDPT);
      Wavefunction best;
      double bo = -1.0;
      for (Eigen::Index j = 0; j < q.eigenvectors.cols(); ++j) {
        Wavefunction w = reconstruct(q, j, spec.grid);
        w.normalize();
        const double o = std::norm(overlap(psi, w));
        if (o > bo) {
          bo = o;
          best = std::move(w);
        }
      }
      const auto ce = vimp_rotation_curve(psi, f, c.dpt_theta_grid);
      const auto cq = vimp_rotation_curve(best, f, c.dpt_theta_grid);
      auto argmax = [](const std::vector<std::pair<double, double>>& cv) {
        return static_cast<int>(std::max_element(cv.begin(), cv.end(), [](const auto& a, const auto& b) {
                                  return a.second < b.second;
                                }) - cv.begin());
      };
      am = argmax(ce);
      amq = argmax(cq);
      auto es = dir.csv("dpt/" + stem(A.state) + "_rotation.csv");
      write_rotation_csv(es, ce);
      auto qs = dir.csv("dpt/" + stem(A.state) + "_rotation_qdpt.csv");
      write_rotation_csv(qs, cq);
      for (int t = 0; t < c.dpt_theta_grid; ++t)
        rs << rec.state << ',' << t << ',' << fmt17(ce[t].first) << ',' << fmt17(ce[t].second) << ','
           << fmt17(cq[t].second) << '\n';
    }
    if (!A.set.empty()) {
      auto ss = dir.csv("dpt/" + stem(A.state) + "_set.csv");
      write_resonant_set_csv(ss, A.set);
      auto rp = dir.csv("dpt/" + stem(A.state) + "_dpt.csv");
      write_dpt_report_csv(rp, {{&A.qdpt_result, &A.qdpt_matches}, {&A.dpt_result, &A.dpt_matches}});
    }
    ds << A.state << ',' << fmt17(A.energy) << ',' << fmt17(rec.overlap2) << ',' << A.candidates << ','
       << A.set.center_n_r << ',' << A.set.center_m << ',' << A.set.members.size() << ',' << fmt17(A.scar_overlap2)
       << ',' << A.qdpt.state << ',' << fmt17(A.qdpt.overlap2) << ',' << A.dpt.state << ','
       << fmt17(A.dpt.overlap2) << ',' << (A.max_type ? 1 : 0) << ',' << fmt17(A.top_vimp) << ','
       << fmt17(A.random_vimp) << ',' << am << ',' << amq << '\n';
    ds.flush();
    rs.flush();
    log << "  state " << A.state << ": qDPT " << A.qdpt.overlap2 << ", DPT " << A.dpt.overlap2
        << (A.max_type ? ", max-type" : "") << std::endl;
    rep.scars.push_back(A);
    rep.sweep_overlap2.push_back(rec.overlap2);
    rep.rotation_argmax.push_back(am);
    rep.rotation_argmax_qdpt.push_back(amq);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// render

/// Binary NetPBM graymap, maxval 65535 (two bytes per pixel, big endian).
/// Row 0 is the top of the image (largest y); column 0 the smallest x.
inline void write_pgm16(std::ostream& os, int n, const std::vector<std::uint16_t>& pix,
                        const std::vector<std::string>& comments) {
  os << "P5\n";
  for (const auto& cm : comments) os << "# " << cm << '\n';
  os << n << ' ' << n << "\n65535\n";
  for (std::uint16_t v : pix) {
    const char b[2] = {static_cast<char>(v >> 8), static_cast<char>(v & 0xff)};
    os.write(b, 2);
  }
}

struct Pgm {
  int width = 0, height = 0, maxval = 0;
  std::vector<std::string> comments;
  std::vector<std::uint16_t> pixels;
};

inline Pgm read_pgm16(std::istream& is) {
  Pgm p;
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("not a binary PGM");
  auto next = [&]() {
    for (;;) {
      is >> std::ws;
      if (is.peek() == '#') {
        std::string line;
        std::getline(is, line);
        p.comments.push_back(detail::trim(line.substr(1)));
        continue;
      }
      int v;
      if (!(is >> v)) throw std::runtime_error("truncated PGM header");
      return v;
    }
  };
  p.width = next();
  p.height = next();
  p.maxval = next();
  is.get();
  p.pixels.resize(static_cast<std::size_t>(p.width) * p.height);
  for (auto& v : p.pixels) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) throw std::runtime_error("truncated PGM data");
    v = static_cast<std::uint16_t>(b[0] << 8 | b[1]);
  }
  return p;
}

struct RenderResult {
  std::string image;
  std::string overlay;  // empty without an overlay
  double density_per_count = 0.0;
  double cell_area = 0.0;
};

/// |psi_k|^2 of a solved state as a 16-bit PGM, linear in density with
/// count 65535 at the peak; the header records density_per_count so that
/// sum(count) * density_per_count * cell_area approximates the norm. The
/// optional overlay is a second PGM of the same size tracing the p/q orbit
/// at the state's energy (pixels 65535 on the trace, 0 elsewhere).
inline RenderResult cmd_render(const RunConfig& c, const std::string& out, std::size_t state) {
  const Spectrum spec = load_run_spectrum(c, out);
  if (state >= spec.size())
    throw std::out_of_range("state " + std::to_string(state) + " not solved; the spectrum has " +
                            std::to_string(spec.size()) + " states (raise solver.states and rerun solve)");
  const OutputDir dir(out, c);
  const Grid2D& g = spec.grid;
  const int n = g.points_per_side;
  const Eigen::VectorXd rho = spec.state(state).density();
  const double peak = rho.maxCoeff();
  RenderResult r;
  r.density_per_count = peak / 65535.0;
  r.cell_area = g.cell_area();
  std::vector<std::uint16_t> pix(g.size());
  for (int row = 0; row < n; ++row)
    for (int i = 0; i < n; ++i) {
      const int j = n - 1 - row;
      pix[static_cast<std::size_t>(row) * n + i] =
          static_cast<std::uint16_t>(std::lround(rho(static_cast<Eigen::Index>(j) * n + i) / r.density_per_count));
    }
  std::ostringstream stem;
  stem << "state_" << std::setw(5) << std::setfill('0') << state;
  r.image = dir.file(stem.str() + ".pgm");
  {
    std::ofstream os(r.image, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + r.image);
    write_pgm16(os, n, pix,
                {"natural units (hbar = 1, mass = 1)", "state " + std::to_string(state) + " energy " + fmt17(spec.energies[state]),
                 "density_per_count " + fmt17(r.density_per_count), "cell_area " + fmt17(r.cell_area),
                 "x from " + fmt17(g.coord(0)) + " to " + fmt17(g.coord(n - 1)) + ", top row y = " +
                     fmt17(g.coord(n - 1))});
  }
  if (!c.render_overlay) return r;
  const RadialPotential V = make_potential(c);
  double alpha = c.render_alpha;
  if (alpha < 0.0) {
    alpha = 0.0;
    try {
      for (const auto& rec : load_run_sweep(c, out))
        if (rec.state == state) alpha = rec.alpha_max;
    } catch (const MissingArtifact&) {
    }
  }
  OrbitSpec orbit;
  try {
    orbit = orbit_for_resonance(V, spec.energies[state], c.orbit_p, c.orbit_q);
  } catch (const NoOrbitError&) {
    return r;
  }
  std::vector<std::uint16_t> lay(g.size(), 0);
  for (const Vec2& p : trace_orbit(orbit, V, 8 * static_cast<std::size_t>(n), alpha)) {
    const long i = std::lround((p.x - g.coord(0)) / g.spacing());
    const long j = std::lround((p.y - g.coord(0)) / g.spacing());
    if (i < 0 || j < 0 || i >= n || j >= n) continue;
    lay[static_cast<std::size_t>(n - 1 - j) * n + i] = 65535;
  }
  r.overlay = dir.file(stem.str() + "_orbit.pgm");
  std::ofstream os(r.overlay, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + r.overlay);
  write_pgm16(os, n, lay,
              {std::to_string(c.orbit_p) + "/" + std::to_string(c.orbit_q) + " orbit at E " +
                   fmt17(orbit.energy) + ", alpha " + fmt17(alpha)});
  return r;
}

}  // namespace scarlab::cli
