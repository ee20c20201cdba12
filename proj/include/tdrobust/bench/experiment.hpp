#pragma once

// Experiment harness: an INI config names a dataset, base models, defenses,
// attacks and game settings; run_experiment plays every (base, defense,
// attack) cell for each seed and writes transcripts plus the result table.

#include <atomic>
#include <chrono>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "tdrobust/bench/report.hpp"
#include "tdrobust/data/dataset_config.hpp"
#include "tdrobust/game/game.hpp"

namespace tdr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelSection {
  std::vector<std::string> bases{"standard"};  // "standard" and/or "adversarial"
  std::vector<std::size_t> hidden{32, 32};
  bool norm = true;
  std::size_t epochs = 20;
  std::size_t batch = 128;
  double lr = 1e-3;
  double adv_epsilon = 0.3;
  std::size_t adv_steps = 10;
  double adv_step_size = 0.04;
  double mix_ratio = 0.5;
  std::filesystem::path checkpoint_dir;  // empty: always train
};

struct GameSection {
  std::size_t rounds = 1;
  std::size_t batch = 0;
  std::size_t points = 100;  // RMC: rounds of batch 1
  Ordering ordering = Ordering::natural;
  bool state_leaking = false;
};

struct ExperimentConfig {
  std::string text;  // the config file as read, echoed into the output
  std::string dataset_name;
  DatasetConfig dataset;
  ModelSection model;
  std::vector<DefenseSpec> defenses;
  std::vector<AttackKind> attacks;
  AttackSpec attack;            // kind is set per cell
  std::string loss = "auto";    // auto | cross-entropy | cw | cw-menu
  std::size_t menu_untargeted = 3;
  std::optional<std::size_t> iterations;  // empty: per-defense default
  GameSection game;
  GameSeeds seeds;
  std::size_t repeat = 1;
  std::filesystem::path out = "out";
  bool write_sets = false;

  Architecture arch(std::size_t d, std::size_t classes) const { return Architecture::mlp(d, model.hidden, classes, model.norm); }
};

namespace detail {

/// Key/value view of one INI section; keys must all be consumed.
class IniSection {
 public:
  IniSection(std::string name, const boost::property_tree::ptree* tree) : name_(std::move(name)) {
    if (!tree) return;
    for (const auto& [k, v] : *tree) {
      if (!v.empty()) throw ConfigError("[" + name_ + "] " + k + ": nested keys are not supported");
      values_[k] = v.data();
    }
  }

  std::optional<std::string> raw(const std::string& key) {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::string str(const std::string& key, const std::string& fallback) { return raw(key).value_or(fallback); }

  template <class T>
  T num(const std::string& key, T fallback) {
    const auto s = raw(key);
    if (!s) return fallback;
    try {
      std::size_t pos = 0;
      T v;
      if constexpr (std::is_floating_point_v<T>)
        v = static_cast<T>(std::stod(*s, &pos));
      else {
        if (s->find('-') != std::string::npos) throw std::invalid_argument("negative");
        v = static_cast<T>(std::stoull(*s, &pos));
      }
      if (pos != s->size()) throw std::invalid_argument("trailing text");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("[" + name_ + "] " + key + ": '" + *s + "' is not a valid number");
    }
  }

  bool flag(const std::string& key, bool fallback) {
    const auto s = raw(key);
    if (!s) return fallback;
    if (*s == "true" || *s == "1" || *s == "yes") return true;
    if (*s == "false" || *s == "0" || *s == "no") return false;
    throw ConfigError("[" + name_ + "] " + key + ": '" + *s + "' is not a boolean");
  }

  std::vector<std::string> list(const std::string& key, std::vector<std::string> fallback) {
    const auto s = raw(key);
    if (!s) return fallback;
    std::vector<std::string> out;
    std::stringstream ss(*s);
    for (std::string item; std::getline(ss, item, ',');) {
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (item.empty()) throw ConfigError("[" + name_ + "] " + key + ": empty list item");
      out.push_back(item);
    }
    return out;
  }

  std::vector<std::size_t> sizes(const std::string& key, std::vector<std::size_t> fallback) {
    if (!values_.count(key)) {
      used_.insert(key);
      return fallback;
    }
    std::vector<std::size_t> out;
    for (const auto& item : list(key, {})) {
      IniSection one(name_, nullptr);
      one.values_[key] = item;
      out.push_back(one.num<std::size_t>(key, 0));
    }
    return out;
  }

  void check_consumed() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) throw ConfigError("[" + name_ + "] unknown key '" + k + "'");
  }

 private:
  std::string name_;
  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

template <class F>
auto config_guard(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace detail

inline ExperimentConfig parse_experiment(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  const std::set<std::string> known{"dataset", "model", "defense", "attack", "game", "seeds", "output"};
  for (const auto& [name, sub] : tree) {
    if (!known.count(name)) throw ConfigError("unknown section [" + name + "]");
    if (sub.empty() && !sub.data().empty()) throw ConfigError("key '" + name + "' outside any section");
  }
  auto section = [&](const char* name) { return detail::IniSection(name, tree.get_child_optional(name).get_ptr()); };

  ExperimentConfig c;
  c.text = text;

  auto ds = section("dataset");
  const std::string source = ds.str("source", "blobs2d");
  c.dataset.source = detail::config_guard("[dataset] source", [&] { return parse_source(source); });
  c.dataset.data_root = ds.str("root", "data");
  c.dataset.sizes.train = ds.num<std::size_t>("train", c.dataset.sizes.train);
  c.dataset.sizes.val = ds.num<std::size_t>("val", c.dataset.sizes.val);
  c.dataset.sizes.test = ds.num<std::size_t>("test", c.dataset.sizes.test);
  c.dataset.blobs = BlobsConfig::blobs2d(ds.num<double>("blobs_sd", 0.1));
  c.dataset_name = ds.str("name", source_name(c.dataset.source));
  ds.check_consumed();
  detail::config_guard("[dataset]", [&] { c.dataset.validate(); return 0; });

  auto md = section("model");
  ModelSection& m = c.model;
  m.bases = md.list("bases", m.bases);
  for (const auto& b : m.bases)
    if (b != "standard" && b != "adversarial") throw ConfigError("[model] bases: unknown base model '" + b + "'");
  m.hidden = md.sizes("hidden", m.hidden);
  m.norm = md.flag("norm", m.norm);
  m.epochs = md.num<std::size_t>("epochs", m.epochs);
  m.batch = md.num<std::size_t>("batch", m.batch);
  m.lr = md.num<double>("lr", m.lr);
  m.adv_epsilon = md.num<double>("adv_epsilon", m.adv_epsilon);
  m.adv_steps = md.num<std::size_t>("adv_steps", m.adv_steps);
  m.adv_step_size = md.num<double>("adv_step_size", m.adv_step_size);
  m.mix_ratio = md.num<double>("mix_ratio", m.mix_ratio);
  m.checkpoint_dir = md.str("checkpoint_dir", "");
  md.check_consumed();
  if (m.batch == 0) throw ConfigError("[model] batch must be positive");
  if (!(m.mix_ratio >= 0.0 && m.mix_ratio <= 1.0)) throw ConfigError("[model] mix_ratio must be in [0,1]");

  auto at = section("attack");
  for (const auto& k : at.list("kinds", {"none", "transfer", "fpa", "gmsa-avg", "gmsa-min"}))
    c.attacks.push_back(detail::config_guard("[attack] kinds", [&] { return parse_attack(k); }));
  c.attack.constraint.epsilon = at.num<double>("epsilon", 0.3);
  c.attack.pgd.steps = at.num<std::size_t>("steps", 100);
  c.attack.pgd.step_size = at.num<double>("step_size", 0.01);
  c.attack.pgd.restarts = at.num<std::size_t>("restarts", 1);
  c.attack.pgd.random_start = at.flag("random_start", true);
  c.loss = at.str("loss", "auto");
  if (c.loss != "auto" && c.loss != "cw-menu")
    c.attack.pgd.loss = detail::config_guard("[attack] loss", [&] { return LossSpec::parse(c.loss); });
  c.menu_untargeted = at.num<std::size_t>("menu_untargeted", 3);
  if (const std::string it = at.str("iterations", "auto"); it != "auto")
    c.iterations = at.num<std::size_t>("iterations", 0);
  at.check_consumed();
  detail::config_guard("[attack]", [&] {
    c.attack.constraint.validate();
    c.attack.pgd.validate();
    return 0;
  });

  auto df = section("defense");
  for (const auto& k : df.list("kinds", {"none"})) {
    DefenseSpec s;
    s.kind = detail::config_guard("[defense] kinds", [&] { return parse_defense(k); });
    c.defenses.push_back(s);
  }
  RmcConfig rmc;
  rmc.k = df.num<std::size_t>("rmc_k", 64);
  rmc.adv_multiplier = df.num<std::size_t>("rmc_adv_multiplier", 1);
  rmc.adversary = AdversarySpec::linf(c.attack.constraint.epsilon, df.num<double>("rmc_adv_step_size", c.attack.pgd.step_size),
                                      df.num<std::size_t>("rmc_adv_steps", c.attack.pgd.steps));
  rmc.finetune.max_epochs = df.num<std::size_t>("rmc_epochs", 100);
  rmc.finetune.patience = df.num<std::size_t>("rmc_patience", 5);
  rmc.finetune.optimizer = OptimizerSpec::adam(df.num<double>("rmc_lr", 2e-4));
  DentConfig dent;
  dent.steps = df.num<std::size_t>("dent_steps", dent.steps);
  dent.batch = df.num<std::size_t>("dent_batch", dent.batch);
  dent.optimizer = OptimizerSpec::adam(df.num<double>("dent_lr", 0.006));
  const std::size_t dann_epochs = df.num<std::size_t>("dann_epochs", 20);
  const double dann_alpha = df.num<double>("dann_alpha_scale", 0.1);
  const auto dann_disc = df.sizes("dann_discriminator", {32});
  const std::size_t urej_epochs = df.num<std::size_t>("urejectron_epochs", 10);
  const std::size_t urej_points = df.num<std::size_t>("urejectron_points", 101);
  df.check_consumed();
  if (rmc.k == 0) throw ConfigError("[defense] rmc_k must be positive");
  if (dent.batch == 0) throw ConfigError("[defense] dent_batch must be positive");
  if (urej_points < 2) throw ConfigError("[defense] urejectron_points must be >= 2");
  for (auto& s : c.defenses) {
    s.rmc = rmc;
    s.dent = dent;
    s.dann.epochs = dann_epochs;
    s.dann.alpha_scale = dann_alpha;
    s.dann.discriminator_hidden = dann_disc;
    s.dann.batch = m.batch;
    s.dann.optimizer = OptimizerSpec::adam(m.lr);
    s.urejectron.sweep_points = urej_points;
    s.urejectron.discriminator.epochs = urej_epochs;
  }

  auto gm = section("game");
  c.game.rounds = gm.num<std::size_t>("rounds", 1);
  c.game.batch = gm.num<std::size_t>("batch", 0);
  c.game.points = gm.num<std::size_t>("points", 100);
  c.game.ordering = detail::config_guard("[game] ordering", [&] { return parse_ordering(gm.str("ordering", "natural")); });
  c.game.state_leaking = gm.flag("state_leaking", false);
  gm.check_consumed();
  if (c.game.rounds == 0 || c.game.points == 0) throw ConfigError("[game] rounds and points must be positive");
  if (c.game.batch == 0 && c.game.rounds != 1) throw ConfigError("[game] batch 0 (whole set) needs rounds = 1");

  auto sd = section("seeds");
  c.seeds.data = sd.num<std::uint64_t>("data", 0);
  c.seeds.attacker = sd.num<std::uint64_t>("attacker", 1);
  c.seeds.defender = sd.num<std::uint64_t>("defender", 2);
  c.repeat = sd.num<std::size_t>("repeat", 1);
  sd.check_consumed();
  if (c.repeat == 0) throw ConfigError("[seeds] repeat must be >= 1");
  if (c.seeds.attacker == c.seeds.defender) throw ConfigError("[seeds] attacker and defender seeds must differ");

  auto out = section("output");
  c.out = out.str("dir", "out");
  c.write_sets = out.flag("write_sets", false);
  out.check_consumed();
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_experiment(ss.str());
}

// ---- training recipes derived from the config ----

inline TrainConfig standard_recipe(const ExperimentConfig& c, std::size_t d, std::size_t classes) {
  TrainConfig t;
  t.arch = c.arch(d, classes);
  t.epochs = c.model.epochs;
  t.batch = c.model.batch;
  t.optimizer = OptimizerSpec::adam(c.model.lr);
  return t;
}

inline TrainConfig adversarial_recipe(const ExperimentConfig& c, std::size_t d, std::size_t classes) {
  TrainConfig t = standard_recipe(c, d, classes);
  t.adversary = AdversarySpec::linf(c.model.adv_epsilon, c.model.adv_step_size, c.model.adv_steps);
  t.mix_ratio = c.model.mix_ratio;
  return t;
}

/// Fills the data-dependent parts of a defense spec (architectures, recipes).
inline DefenseSpec bind_defense(DefenseSpec s, const ExperimentConfig& c, std::size_t d, std::size_t classes) {
  s.dann.arch = c.arch(d, classes);
  s.tadv = adversarial_recipe(c, d, classes);
  s.urejectron.classifier = standard_recipe(c, d, classes);
  const std::size_t disc_epochs = s.urejectron.discriminator.epochs;
  s.urejectron.discriminator = standard_recipe(c, d, 2);
  s.urejectron.discriminator.epochs = disc_epochs;
  return s;
}

/// The attack for one cell: DENT defaults to the CW menu and two iterations,
/// everything else to the configured loss and nine.
inline AttackSpec bind_attack(const ExperimentConfig& c, AttackKind kind, DefenseKind defense, std::size_t classes) {
  AttackSpec a = c.attack;
  a.kind = kind;
  const bool menu = c.loss == "cw-menu" || (c.loss == "auto" && defense == DefenseKind::dent);
  if (menu) {
    PgdConfig p = PgdConfig::cw_menu(c.attack.pgd.steps, c.attack.pgd.step_size, c.menu_untargeted, classes);
    p.random_start = c.attack.pgd.random_start;
    a.pgd = p;
  }
  a.iterations = c.iterations.value_or(defense == DefenseKind::dent ? 2 : 9);
  return a;
}

inline GameConfig cell_game(const ExperimentConfig& c, const std::string& base, const DefenseSpec& defense, AttackKind kind,
                            const GameSeeds& seeds, std::size_t classes) {
  GameConfig g;
  g.dataset = c.dataset_name;
  g.base = base;
  g.defense = defense;
  g.attack = bind_attack(c, kind, defense.kind, classes);
  g.seeds = seeds;
  g.ordering = c.game.ordering;
  g.state_leaking = c.game.state_leaking;
  if (defense.stateful()) {
    g.rounds = c.game.points;
    g.batch = 1;
  } else {
    g.rounds = c.game.rounds;
    g.batch = c.game.batch;
  }
  return g;
}

/// Seeds of repetition r: each member of the triple moves by r.
inline GameSeeds repeat_seeds(const GameSeeds& s, std::size_t r) {
  return {s.data + r, s.attacker + r, s.defender + r};
}

inline std::string cell_stem(const std::string& dataset, const std::string& base, const std::string& defense,
                             const std::string& attack, std::uint64_t seed) {
  return dataset + "_" + base + "_" + defense + "_" + attack + "_s" + std::to_string(seed);
}

/// Trains the named base model, or loads it from checkpoint_dir when present
/// there (a freshly trained model is saved back).
inline Classifier obtain_base(const ExperimentConfig& c, const std::string& base, const Splits& s, std::uint64_t seed,
                              const std::filesystem::path& models_dir) {
  const std::string file = c.dataset_name + "-" + base + "-s" + std::to_string(seed) + ".ckpt";
  if (!c.model.checkpoint_dir.empty() && std::filesystem::exists(c.model.checkpoint_dir / file))
    return Classifier::from_checkpoint(load_checkpoint((c.model.checkpoint_dir / file).string()));
  const std::size_t d = s.train.dim(), k = s.train.num_classes;
  const Rng rng = Rng(seed).derive("base").derive(base);
  TrainResult r = base == "adversarial" ? train_adversarial(s.train, adversarial_recipe(c, d, k), rng, &s.val)
                                        : train_standard(s.train, standard_recipe(c, d, k), rng, &s.val);
  std::filesystem::create_directories(models_dir);
  const auto ck = r.model.to_checkpoint();
  save_checkpoint((models_dir / file).string(), ck.arch, ck.params);
  write_curve_csv((models_dir / (file + ".curve.csv")).string(), r.curve);
  if (!c.model.checkpoint_dir.empty()) {
    std::filesystem::create_directories(c.model.checkpoint_dir);
    save_checkpoint((c.model.checkpoint_dir / file).string(), ck.arch, ck.params);
  }
  return std::move(r.model);
}

struct ExperimentOutcome {
  ResultTable table;
  std::size_t spot_mismatches = 0;
};

namespace detail {

struct CellJob {
  std::size_t repetition = 0;
  GameConfig game;
  std::size_t base_index = 0;
};

/// URejectron also gets its (threshold, rej, err) sweep over the played sets.
inline void urejectron_curve(const GameTranscript& t, const LabeledSet& train, const DefenseSpec& spec,
                             const std::filesystem::path& path) {
  const Rng rng = Rng(t.config.seeds.defender).derive("defender").derive("curve", t.adversarial.digest());
  const Urejectron r = urejectron_build(train, t.adversarial.features, spec.urejectron, rng);
  write_rejection_curve_csv(path.string(),
                            rejection_curve(r.classifier, r, t.adversarial, t.clean.features, spec.urejectron.sweep_points));
}

}  // namespace detail

/// Rows are in (repetition, base, defense, attack) config order; a failing
/// cell is marked and the rest still run. `jobs` > 1 fans cells out to threads.
inline ExperimentOutcome run_experiment(const ExperimentConfig& c, std::size_t jobs = 1, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  const fs::path transcripts = c.out / "transcripts";
  fs::create_directories(transcripts);
  {
    std::ofstream echo(c.out / "config.ini", std::ios::binary);
    if (!echo) throw std::runtime_error("cannot write to '" + c.out.string() + "'");
    echo << c.text;
  }

  struct Prepared {
    std::optional<Splits> splits;
    std::vector<std::optional<Classifier>> bases;
    std::vector<std::string> errors;
  };
  std::vector<Prepared> prepared(c.repeat);
  std::vector<detail::CellJob> cells;
  for (std::size_t r = 0; r < c.repeat; ++r) {
    const GameSeeds seeds = repeat_seeds(c.seeds, r);
    Prepared& p = prepared[r];
    p.bases.resize(c.model.bases.size());
    p.errors.resize(c.model.bases.size());
    std::string data_error;
    try {
      DatasetConfig dc = c.dataset;
      dc.seed = seeds.data;
      p.splits = make_splits(dc);
    } catch (const std::exception& e) {
      data_error = e.what();
    }
    for (std::size_t b = 0; b < c.model.bases.size(); ++b) {
      if (!p.splits) {
        p.errors[b] = "data: " + data_error;
        continue;
      }
      try {
        if (log) *log << "training " << c.model.bases[b] << " base (seed " << seeds.data << ")\n";
        p.bases[b] = obtain_base(c, c.model.bases[b], *p.splits, seeds.data, c.out / "models");
      } catch (const std::exception& e) {
        p.errors[b] = std::string("base model: ") + e.what();
      }
    }
    const std::size_t d = p.splits ? p.splits->train.dim() : 0, k = p.splits ? p.splits->train.num_classes : 0;
    for (std::size_t b = 0; b < c.model.bases.size(); ++b)
      for (const auto& spec : c.defenses)
        for (AttackKind a : c.attacks)
          cells.push_back({r, cell_game(c, c.model.bases[b], bind_defense(spec, c, d, k), a, seeds, k), b});
  }

  std::vector<ResultRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto& cell = cells[i];
      const GameConfig& g = cell.game;
      ResultRow& row = rows[i];
      row.dataset = g.dataset;
      row.base = g.base;
      row.defense = g.defense.name();
      row.attack = attack_name(g.attack.kind);
      row.seed = g.seeds.data;
      const std::string stem = cell_stem(row.dataset, row.base, row.defense, row.attack, row.seed);
      const Prepared& p = prepared[cell.repetition];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        if (!p.bases[cell.base_index]) throw std::runtime_error(p.errors[cell.base_index]);
        const GameTranscript t = run_game(g, {p.splits->train, *p.bases[cell.base_index], p.splits->test});
        write_transcript_jsonl((transcripts / (stem + ".jsonl")).string(), t);
        if (g.defense.kind == DefenseKind::urejectron)
          detail::urejectron_curve(t, p.splits->train, g.defense, c.out / "curves" / (stem + ".csv"));
        if (c.write_sets) {
          fs::create_directories(c.out / "sets");
          write_csv((c.out / "sets" / (stem + "_clean.csv")).string(), t.clean);
          write_csv((c.out / "sets" / (stem + "_adversarial.csv")).string(), t.adversarial);
        }
        row.accuracy = 100.0 * t.accuracy;
        row.robustness = 100.0 * t.robustness;
        row.transcript = stem + ".jsonl";
      } catch (const std::exception& e) {
        row.status = std::string("failed: ") + e.what();
      }
      row.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (log) {
        std::lock_guard lock(log_mutex);
        *log << stem << ": " << (row.ok() ? "accuracy " + detail::pct(row.accuracy) + " robustness " + detail::pct(row.robustness)
                                          : row.status)
             << '\n';
      }
    }
  };
  if (c.defenses.end() != std::find_if(c.defenses.begin(), c.defenses.end(),
                                       [](const DefenseSpec& s) { return s.kind == DefenseKind::urejectron; }))
    fs::create_directories(c.out / "curves");
  if (jobs <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < std::min(jobs, cells.size()); ++j) pool.emplace_back(work);
  }

  ExperimentOutcome out;
  out.table.rows = std::move(rows);
  if (c.repeat > 1) out.table.aggregates = aggregate(out.table.rows);
  emit_report(c.out, out.table);
  Rng spot = Rng(c.seeds.data).derive("spot-check");
  out.spot_mismatches = spot_check(out.table, transcripts, 10, spot);
  return out;
}

}  // namespace tdr
