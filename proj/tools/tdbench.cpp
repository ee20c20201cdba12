// tdbench: train base models, run attacks and games from an INI config, and
// rebuild reports from transcripts.
//
// Exit status: 0 all cells completed, 2 partial, 1 config or usage error.

#include <iostream>

#include "CLI11.hpp"
#include "tdrobust/bench/experiment.hpp"
#include "tdrobust/bench/fixtures.hpp"

namespace {

constexpr int kComplete = 0;
constexpr int kConfigError = 1;
constexpr int kPartial = 2;

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed_data, seed_attacker, seed_defender;
  std::size_t jobs = 1;
};

tdr::ExperimentConfig load(const Flags& f) {
  if (f.config.empty()) throw tdr::ConfigError("--config is required");
  tdr::ExperimentConfig c = tdr::load_experiment(f.config);
  if (f.seed_data) c.seeds.data = *f.seed_data;
  if (f.seed_attacker) c.seeds.attacker = *f.seed_attacker;
  if (f.seed_defender) c.seeds.defender = *f.seed_defender;
  if (c.seeds.attacker == c.seeds.defender) throw tdr::ConfigError("attacker and defender seeds must differ");
  if (!f.out.empty()) c.out = f.out;
  return c;
}

/// Command-line seed overrides sit next to the verbatim config echo.
void record_overrides(const Flags& f, const tdr::ExperimentConfig& c) {
  if (!f.seed_data && !f.seed_attacker && !f.seed_defender) return;
  std::filesystem::create_directories(c.out);
  std::ofstream os(c.out / "overrides.ini");
  os << "[seeds]\ndata = " << c.seeds.data << "\nattacker = " << c.seeds.attacker << "\ndefender = " << c.seeds.defender
     << '\n';
}

int finish(const tdr::ExperimentOutcome& o) {
  tdr::write_table_text(std::cout, o.table);
  if (o.spot_mismatches) std::cerr << "spot check: " << o.spot_mismatches << " cells differ from their transcripts\n";
  return o.table.complete() && o.spot_mismatches == 0 ? kComplete : kPartial;
}

int cmd_train(const Flags& f) {
  const tdr::ExperimentConfig c = load(f);
  bool failed = false;
  for (std::size_t r = 0; r < c.repeat; ++r) {
    tdr::DatasetConfig dc = c.dataset;
    dc.seed = c.seeds.data + r;
    const tdr::Splits s = tdr::make_splits(dc);
    for (const auto& base : c.model.bases) {
      try {
        const tdr::Classifier m = tdr::obtain_base(c, base, s, dc.seed, c.out / "models");
        std::cout << base << " seed " << dc.seed << ": test accuracy " << tdr::accuracy(m, s.test) << '\n';
      } catch (const std::exception& e) {
        std::cerr << base << " seed " << dc.seed << ": " << e.what() << '\n';
        failed = true;
      }
    }
  }
  return failed ? kPartial : kComplete;
}

int cmd_attack(const Flags& f) {
  tdr::ExperimentConfig c = load(f);
  tdr::DefenseSpec none;
  c.defenses = {none};
  c.write_sets = true;
  record_overrides(f, c);
  return finish(tdr::run_experiment(c, f.jobs, &std::cerr));
}

int cmd_game(const Flags& f) {
  const tdr::ExperimentConfig c = load(f);
  record_overrides(f, c);
  return finish(tdr::run_experiment(c, f.jobs, &std::cerr));
}

int cmd_report(const Flags& f) {
  std::filesystem::path dir = f.out;
  if (dir.empty()) dir = load(f).out;
  tdr::ResultTable t = tdr::table_from_transcripts(dir / "transcripts", false);
  std::set<std::uint64_t> seeds;
  for (const auto& r : t.rows) seeds.insert(r.seed);
  if (seeds.size() > 1) t.aggregates = tdr::aggregate(t.rows);
  tdr::emit_report(dir, t);
  tdr::Rng rng = tdr::Rng(0).derive("spot-check");
  return finish({t, tdr::spot_check(t, dir / "transcripts", 10, rng)});
}

int cmd_fixtures(const Flags& f) {
  const std::filesystem::path dir = f.out.empty() ? "fixtures" : f.out;
  std::filesystem::create_directories(dir);
  for (const auto& fx : tdr::bundled_fixtures()) {
    tdr::parse_experiment(std::string(fx.text));
    std::ofstream os(dir / fx.name, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + (dir / fx.name).string() + "'");
    os << fx.text;
    std::cout << (dir / fx.name).string() << '\n';
  }
  return kComplete;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tdbench: transductive defense evaluation harness"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&](CLI::App* sub, bool seeds) {
    sub->add_option("--config", f.config, "experiment config (INI)");
    sub->add_option("--out", f.out, "output directory (overrides [output] dir)");
    if (!seeds) return;
    sub->add_option("--seed-data", f.seed_data, "data/setup seed");
    sub->add_option("--seed-attacker", f.seed_attacker, "attacker seed");
    sub->add_option("--seed-defender", f.seed_defender, "defender seed");
    sub->add_option("--jobs", f.jobs, "parallel cells")->check(CLI::PositiveNumber);
  };
  auto* train = app.add_subcommand("train", "train (or load) the base models");
  auto* attack = app.add_subcommand("attack", "attack the undefended base models and write the adversarial sets");
  auto* game = app.add_subcommand("game", "run every configured (base, defense, attack) game");
  auto* report = app.add_subcommand("report", "rebuild the tables from transcripts in --out");
  auto* fixtures = app.add_subcommand("fixtures", "write the bundled experiment configs to --out");
  for (auto* s : {train, attack, game}) common(s, true);
  common(report, false);
  fixtures->add_option("--out", f.out, "directory for the config files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kComplete : kConfigError;
  }
  try {
    if (*train) return cmd_train(f);
    if (*attack) return cmd_attack(f);
    if (*game) return cmd_game(f);
    if (*report) return cmd_report(f);
    return cmd_fixtures(f);
  } catch (const tdr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kPartial;
  }
}
