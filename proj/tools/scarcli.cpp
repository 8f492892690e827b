// scarcli: command-line front end to the scar lab pipeline.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "scarlab/scarcli.hpp"

using namespace scarlab;
using namespace scarlab::cli;

namespace {

struct Globals {
  std::string config;
  std::string out = "scarcli_out";
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
};

RunConfig load(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : load_config(g.config);
  if (g.seed) c.impurity_seed = *g.seed;
  validate(c);
  return c;
}

void report_orbits(const std::vector<OrbitRow>& rows) {
  double a = -1.0;
  for (const auto& r : rows) {
    if (r.exponent != a) {
      if (a >= 0.0) std::cout << '\n';
      a = r.exponent;
      std::cout << "a = " << fmt17(a) << ':';
    }
    std::cout << ' ' << r.orbit.p << '/' << r.orbit.q << (r.orbit.family ? " (family)" : "");
  }
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perturbation-induced scarring in a power-law well with Gaussian impurities"};
  app.set_version_flag("--version", std::string("scarcli ") + kVersion);
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--seed", g.seed, "Impurity realization seed, overrides impurity.seed");
  app.add_option("--threads", g.threads, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  auto* orbits = app.add_subcommand("orbits", "Periodic-orbit table of V ~ r^a");
  auto* impurities = app.add_subcommand("impurities", "Sample the impurity realization");
  auto* solve = app.add_subcommand("solve", "Eigenstates of the perturbed well (cached per config hash)");
  auto* sweep = app.add_subcommand("sweep", "Orientation sweep of the solved states");
  bool amplitudes = false;
  sweep->add_flag("--amplitudes", amplitudes, "Also track the leading scar across amplitude.values");
  auto* recur = app.add_subcommand("recur", "Quantum and classical recurrences of an orbit packet");
  auto* dpt = app.add_subcommand("dpt", "Resonant-set perturbation theory for detected scars");
  auto* render = app.add_subcommand("render", "16-bit PGM of a solved state's density");
  std::optional<std::size_t> state;
  render->add_option("--state", state, "State index, overrides render.state");

  CLI11_PARSE(app, argc, argv);
  set_thread_hint(g.threads);

  try {
    const RunConfig c = load(g);
    if (orbits->parsed()) {
      report_orbits(cmd_orbits(c, g.out));
    } else if (impurities->parsed()) {
      const auto f = cmd_impurities(c, g.out);
      std::cout << f.bumps.size() << " bumps written to " << g.out << "/impurities.txt\n";
    } else if (solve->parsed()) {
      const auto r = cmd_solve(c, g.out, std::cerr);
      const auto& s = r.spectrum;
      std::cout << s.size() << " states, E = " << fmt17(s.energies.front()) << " .. " << fmt17(s.energies.back())
                << (r.reused ? " (reused)" : "") << '\n';
    } else if (sweep->parsed()) {
      const auto r = cmd_sweep(c, g.out, std::cerr);
      std::cout << "scarred fraction " << fmt17(r.scarred_fraction) << " (threshold " << fmt17(c.sweep_threshold)
                << "), " << r.branches.size() << " branches, " << r.persistent << " spanning >= "
                << fmt17(c.sweep_persistent_span) << '\n';
      for (const auto& b : r.branches)
        std::cout << "  alpha " << fmt17(b.alpha) << ": " << b.count << " states (expected " << fmt17(b.expected)
                  << "), E " << fmt17(b.e_min) << " .. " << fmt17(b.e_max) << '\n';
      if (amplitudes) {
        const auto a = cmd_amplitude(c, g.out, std::cerr);
        for (const auto& p : a.sweep.points)
          std::cout << "  M " << fmt17(p.amplitude) << ": state " << p.state << " alpha " << fmt17(p.alpha_max)
                    << " overlap2 " << fmt17(p.overlap2) << '\n';
        std::cout << "alpha drift " << fmt17(a.sweep.drift()) << " (" << fmt17(a.drift_steps()) << " grid steps)\n";
      }
    } else if (recur->parsed()) {
      const auto r = cmd_recur(c, g.out, std::cerr);
      std::cout << "E " << fmt17(r.energy) << ", alpha " << fmt17(r.alpha) << ", T " << fmt17(r.period) << '\n';
      for (const auto& p : r.peaks)
        std::cout << "  t = " << p.k << "T: quantum " << fmt17(p.quantum.value) << ", unperturbed "
                  << fmt17(p.unperturbed.value) << ", classical " << fmt17(p.classical.value) << " +- "
                  << fmt17(p.classical.sigma) << '\n';
    } else if (dpt->parsed()) {
      const auto r = cmd_dpt(c, g.out, std::cerr);
      std::cout << r.scars.size() << " scars analysed (sweep overlap2 >= " << fmt17(r.scar_threshold) << ")\n";
    } else if (render->parsed()) {
      const auto r = cmd_render(c, g.out, state.value_or(c.render_state));
      std::cout << r.image << (r.overlay.empty() ? "" : "\n" + r.overlay) << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const NonConvergenceError& e) {
    std::cerr << "error: " << e.what() << " (" << e.converged << " states converged)\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
