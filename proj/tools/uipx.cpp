// Command-line front end: uipx <command> (--config PATH | --preset NAME) [--out DIR] [--grid IxJxN] [--seed N]

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "uipx/experiment.hpp"
#include "uipx_presets.hpp"

namespace {

struct Args {
  std::string config;
  std::string preset;
  std::string out;
  std::string grid;
  std::uint64_t seed = 0;
};

uipx::ExperimentConfig resolve(const Args& a, const CLI::App& sub) {
  std::string text;
  if (!a.preset.empty()) {
    const auto& presets = uipx::embedded_presets();
    const auto it = presets.find(a.preset);
    if (it == presets.end()) {
      std::string names;
      for (const auto& [name, body] : presets) names += " " + name;
      throw uipx::ConfigError("unknown preset '" + a.preset + "'; available:" + names);
    }
    text = it->second;
  } else {
    text = uipx::read_text_file(a.config);
  }
  uipx::Overrides o;
  if (!a.grid.empty()) o.grid = uipx::parse_grid_override(a.grid);
  if (sub.count("--seed")) o.seed = a.seed;
  return uipx::load_config_text(text, o);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Utility indifference pricing of swing and storage contracts"};
  app.require_subcommand(1);
  Args args;
  using Runner = int (*)(const uipx::ExperimentConfig&, const std::string&);
  const std::map<std::string, std::pair<std::string, Runner>> commands{
      {"price", {"solve the UIP equation and write surfaces and probe values",
                 [](const uipx::ExperimentConfig& c, const std::string& d) { return uipx::cmd_price(c, d); }}},
      {"compare-classical", {"UIP and risk-neutral price on the same grid, with their difference",
                             [](const uipx::ExperimentConfig& c, const std::string& d) {
                               return uipx::cmd_compare_classical(c, d);
                             }}},
      {"strategy", {"exercise policy, switching boundary and hedge",
                    [](const uipx::ExperimentConfig& c, const std::string& d) { return uipx::cmd_strategy(c, d); }}},
      {"verify", {"compare the PDE against the DP and dual Monte Carlo oracles",
                  [](const uipx::ExperimentConfig& c, const std::string& d) { return uipx::cmd_verify(c, d); }}},
      {"audit", {"sample the model coefficients and report the standing assumptions",
                 [](const uipx::ExperimentConfig& c, const std::string& d) { return uipx::cmd_audit(c, d); }}},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, entry] : commands) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    auto* cfg = sub->add_option("--config", args.config, "experiment file (INI)")->check(CLI::ExistingFile);
    auto* pre = sub->add_option("--preset", args.preset, "built-in experiment name");
    cfg->excludes(pre);
    sub->add_option("--out", args.out, "output directory (default out/<command>)");
    sub->add_option("--grid", args.grid, "override grid sizes as IxJxN; N = 0 picks the stable step count");
    sub->add_option("--seed", args.seed, "random seed");
    subs[name] = sub;
  }
  app.add_flag_callback(
      "--list-presets",
      [] {
        for (const auto& [name, body] : uipx::embedded_presets()) std::cout << name << '\n';
        std::exit(0);
      },
      "print the built-in preset names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : uipx::kExitConfig;
  }

  for (const auto& [name, sub] : subs) {
    if (!sub->parsed()) continue;
    try {
      if (args.config.empty() && args.preset.empty()) throw uipx::ConfigError("give --config PATH or --preset NAME");
      const uipx::ExperimentConfig c = resolve(args, *sub);
      const std::string out = args.out.empty() ? "out/" + name : args.out;
      const int rc = commands.at(name).second(c, out);
      std::cout << name << ": " << (rc == 0 ? "ok" : "verification failed") << " (config " << c.hash_hex()
                << ", output in " << out << ")\n";
      return rc;
    } catch (const uipx::ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return uipx::kExitConfig;
    } catch (const uipx::DomainError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return uipx::kExitConfig;
    } catch (const uipx::NumericalError& e) {
      std::cerr << "numerical failure: " << e.what() << '\n';
      return uipx::kExitNumerical;
    } catch (const uipx::VerificationError& e) {
      std::cerr << "verification failure: " << e.what() << '\n';
      return uipx::kExitVerification;
    }
  }
  return uipx::kExitConfig;
}
