#pragma once

// The attack/defense game: the attacker commits perturbed batches, the
// defender adapts with private randomness, a referee scores both sides.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "tdrobust/attack/model_space.hpp"
#include "tdrobust/defense/defense.hpp"

namespace tdr {

enum class AttackKind { none, transfer, fpa, gmsa_avg, gmsa_min };
enum class Ordering { natural, adversarial };

inline std::string attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::none: return "none";
    case AttackKind::transfer: return "transfer";
    case AttackKind::fpa: return "fpa";
    case AttackKind::gmsa_avg: return "gmsa-avg";
    case AttackKind::gmsa_min: return "gmsa-min";
  }
  return "?";
}

inline AttackKind parse_attack(const std::string& s) {
  for (auto k : {AttackKind::none, AttackKind::transfer, AttackKind::fpa, AttackKind::gmsa_avg, AttackKind::gmsa_min})
    if (attack_name(k) == s) return k;
  if (s == "clean") return AttackKind::none;
  throw std::invalid_argument("unknown attack '" + s + "'");
}

inline std::string ordering_name(Ordering o) { return o == Ordering::natural ? "natural" : "adversarial"; }

inline Ordering parse_ordering(const std::string& s) {
  if (s == "natural") return Ordering::natural;
  if (s == "adversarial" || s == "label-sorted") return Ordering::adversarial;
  throw std::invalid_argument("unknown ordering '" + s + "'");
}

struct AttackSpec {
  AttackKind kind = AttackKind::transfer;
  PerturbationConstraint constraint{0.3};
  PgdConfig pgd;
  std::size_t iterations = 9;  // T for FPA / GMSA
};

struct GameSeeds {
  std::uint64_t data = 0;
  std::uint64_t attacker = 1;
  std::uint64_t defender = 2;
};

struct GameConfig {
  std::size_t rounds = 1;
  std::size_t batch = 0;  // 0: the whole set in a single round
  Ordering ordering = Ordering::natural;
  bool state_leaking = false;
  DefenseSpec defense;
  AttackSpec attack;
  GameSeeds seeds;
  std::string dataset = "unnamed";
  std::string base = "standard";  // label of the base model F

  void validate() const {
    if (rounds == 0) throw std::invalid_argument("a game needs at least one round");
    if (batch == 0 && rounds != 1) throw std::invalid_argument("batch size 0 (whole set) only works with one round");
    if (seeds.attacker == seeds.defender) throw std::invalid_argument("attacker and defender seeds must differ");
    attack.constraint.validate();
    attack.pgd.validate();
  }
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> indices;  // positions in the test pool
  std::uint64_t batch_key = 0;       // digest of the clean batch; keys the round's streams
  std::uint64_t clean_digest = 0;
  std::uint64_t adversarial_digest = 0;
  std::uint64_t defender_fingerprint = 0;  // F* adapted on U'
  std::uint64_t clean_fingerprint = 0;     // model adapted on U
  std::size_t n = 0;
  std::size_t correct_clean = 0;
  std::size_t correct_adversarial = 0;
  bool disqualified = false;
  std::string verdict;
  std::optional<std::size_t> selected;  // best iterate for FPA / GMSA
  std::vector<double> losses;

  double accuracy() const { return static_cast<double>(correct_clean) / static_cast<double>(n); }
  double robustness() const { return static_cast<double>(correct_adversarial) / static_cast<double>(n); }
};

struct GameTranscript {
  GameConfig config;
  std::vector<RoundRecord> rounds;
  LabeledSet clean;        // scored clean points in round order
  LabeledSet adversarial;  // the committed V' in round order
  double accuracy = 0.0;
  double robustness = 0.0;
  std::size_t disqualified_rounds = 0;
  std::shared_ptr<DrawTrace> attacker_trace;
  std::shared_ptr<DrawTrace> defender_trace;

  /// Everything the attacker produced or drew: committed sets and its trace.
  std::uint64_t attacker_digest() const {
    std::uint64_t h = attacker_trace->digest();
    for (const auto& r : rounds) h = fnv1a_u64(r.adversarial_digest, h);
    return h;
  }
  std::uint64_t defender_digest() const { return defender_trace->digest(); }
};

// ---- batching ----

inline std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < order.size(); b += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + batch)));
  return out;
}

inline std::vector<std::vector<std::size_t>> natural_batches(std::size_t n, std::size_t batch) {
  if (batch == 0 || batch > n) throw std::invalid_argument("batch size must be in [1, " + std::to_string(n) + "]");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  return chunk(order, batch);
}

/// Label-ascending order (stable on the original index), chunked.
inline std::vector<std::vector<std::size_t>> order_adversarially(const LabeledSet& V, std::size_t batch) {
  if (batch == 0 || batch > V.size()) throw std::invalid_argument("batch size must be in [1, " + std::to_string(V.size()) + "]");
  std::vector<std::size_t> order(V.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return V.labels[a] < V.labels[b]; });
  return chunk(order, batch);
}

// ---- referee ----

struct RefereeVerdict {
  bool admissible = true;
  std::string reason;
};

/// Independent recheck of the attacker's output: same labels and shape, every
/// coordinate within eps (+1e-12) of its clean value and inside [0,1].
inline RefereeVerdict referee_check(const LabeledSet& V, const LabeledSet& V_adv, const PerturbationConstraint& c) {
  constexpr double kSlack = 1e-12;
  if (V_adv.labels != V.labels) return {false, "labels changed"};
  if (V_adv.features.rows() != V.features.rows() || V_adv.features.cols() != V.features.cols())
    return {false, "shape changed"};
  const auto a = V_adv.features.values(), x = V.features.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] >= 0.0 && a[i] <= 1.0))
      return {false, "coordinate " + std::to_string(i) + " outside the box"};
    if (!(std::fabs(a[i] - x[i]) <= c.epsilon + kSlack))
      return {false, "coordinate " + std::to_string(i) + " moved by " + std::to_string(std::fabs(a[i] - x[i]))};
  }
  return {};
}

struct RefereeScore {
  double accuracy = 0.0;
  double robustness = 0.0;
};

inline std::size_t count_correct(const Classifier& m, const LabeledSet& V) {
  const auto p = m.predict(V.features);
  std::size_t k = 0;
  for (std::size_t i = 0; i < p.size(); ++i) k += p[i] == V.labels[i];
  return k;
}

/// Accuracy of the clean-adapted model on V and of F* on V' (true labels).
inline RefereeScore referee_score(const Classifier& clean_model, const Classifier& adapted, const LabeledSet& V,
                                  const LabeledSet& V_adv) {
  return {accuracy(clean_model, V), accuracy(adapted, V_adv)};
}

inline RefereeScore referee_score(const Classifier& model, const LabeledSet& V, const LabeledSet& V_adv) {
  return referee_score(model, model, V, V_adv);
}

// ---- the game ----

/// Public inputs: training set, base model F = T(D) and the test pool.
struct GameInputs {
  const LabeledSet& train;
  const Classifier& base;
  const LabeledSet& pool;
};

namespace detail {

inline LabeledSet run_attack(const AttackSpec& a, const Defense& attacker_view, const LabeledSet& V, Rng rng,
                             RoundRecord& rec) {
  const DefenseSimulator sim = [&](const Tensor& U, Rng r) { return attacker_view.adapt(U, std::move(r)); };
  const Classifier& F0 = attacker_view.current();
  switch (a.kind) {
    case AttackKind::none: return V;
    case AttackKind::transfer: return transfer_attack(F0, V, a.constraint, a.pgd, std::move(rng));
    default: break;
  }
  AttackRecord r = a.kind == AttackKind::fpa ? fpa(sim, V, F0, a.iterations, a.constraint, a.pgd, std::move(rng))
                   : gmsa(sim, V, F0, a.iterations, a.kind == AttackKind::gmsa_avg ? GmsaMode::avg : GmsaMode::min,
                          a.constraint, a.pgd, std::move(rng));
  rec.selected = r.selected;
  rec.losses = r.losses;
  return r.best();
}

}  // namespace detail

/// Plays cfg.rounds rounds over the first rounds*batch points of the pool.
/// The attacker holds its own copy of the defense (with its own RMC chain)
/// unless state_leaking hands it the defender's true state each round.
inline GameTranscript run_game(const GameConfig& cfg, const GameInputs& in) {
  cfg.validate();
  in.pool.validate();
  const std::size_t batch = cfg.batch == 0 ? in.pool.size() : cfg.batch;
  const std::size_t used = cfg.rounds * batch;
  if (used > in.pool.size())
    throw std::invalid_argument("pool has " + std::to_string(in.pool.size()) + " points; the game needs " +
                                std::to_string(used));
  const LabeledSet played = in.pool.slice(0, used);
  const auto batches = cfg.ordering == Ordering::natural ? natural_batches(used, batch) : order_adversarially(played, batch);

  GameTranscript t;
  t.config = cfg;
  t.attacker_trace = std::make_shared<DrawTrace>();
  t.defender_trace = std::make_shared<DrawTrace>();
  const Rng attacker = Rng(cfg.seeds.attacker, t.attacker_trace).derive("attacker");
  const Rng defender = Rng(cfg.seeds.defender, t.defender_trace).derive("defender");
  const Rng setup = Rng(cfg.seeds.data).derive("setup");

  std::unique_ptr<Defense> defense = make_defense(cfg.defense, in.base, in.train, setup);
  std::unique_ptr<Defense> attacker_view = defense->clone();

  std::size_t total = 0, clean_ok = 0, adv_ok = 0;
  for (std::size_t r = 0; r < batches.size(); ++r) {
    RoundRecord rec;
    rec.round = r;
    rec.indices = batches[r];
    const LabeledSet V = played.subset(rec.indices);
    rec.batch_key = V.digest();
    rec.clean_digest = rec.batch_key;
    rec.n = V.size();

    if (cfg.state_leaking) attacker_view = defense->clone();
    const Rng ar = attacker.derive("batch", rec.batch_key);
    LabeledSet V_adv = detail::run_attack(cfg.attack, *attacker_view, V, ar.derive("attack"), rec);
    rec.adversarial_digest = V_adv.digest();

    const RefereeVerdict verdict = referee_check(V, V_adv, cfg.attack.constraint);
    if (!verdict.admissible) {
      rec.disqualified = true;
      rec.verdict = verdict.reason;
      ++t.disqualified_rounds;
      V_adv = V;  // a disqualified attack forfeits the round
    }

    const Rng dr = defender.derive("batch", rec.batch_key);
    const Classifier adapted = defense->adapt(V_adv.features, dr.derive("adversarial"));
    const Classifier clean_model = !defense->uses_test_inputs() ? adapted : defense->adapt(V.features, dr.derive("clean"));
    rec.defender_fingerprint = adapted.adapted_fingerprint();
    rec.clean_fingerprint = clean_model.adapted_fingerprint();
    rec.correct_clean = count_correct(clean_model, V);
    rec.correct_adversarial = count_correct(adapted, V_adv);

    if (cfg.defense.stateful()) {
      defense->advance(adapted);
      if (!cfg.state_leaking) attacker_view->advance(attacker_view->adapt(V_adv.features, ar.derive("chain")));
    }

    total += rec.n;
    clean_ok += rec.correct_clean;
    adv_ok += rec.correct_adversarial;
    t.clean = r == 0 ? V : concat(t.clean, V);
    t.adversarial = r == 0 ? V_adv : concat(t.adversarial, V_adv);
    t.rounds.push_back(std::move(rec));
  }
  t.accuracy = static_cast<double>(clean_ok) / static_cast<double>(total);
  t.robustness = static_cast<double>(adv_ok) / static_cast<double>(total);
  return t;
}

/// One round of the game over the whole of V.
inline GameTranscript run_one_round(GameConfig cfg, const LabeledSet& D, const Classifier& base, const LabeledSet& V) {
  if (cfg.rounds != 1) throw std::invalid_argument("run_one_round needs rounds = 1");
  if (cfg.batch == 0) cfg.batch = V.size();
  return run_game(cfg, {D, base, V});
}

inline GameTranscript run_multi_round(const GameConfig& cfg, const LabeledSet& D, const Classifier& base,
                                      const LabeledSet& pool) {
  return run_game(cfg, {D, base, pool});
}

// ---- transcript output ----

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline nlohmann::json config_json(const GameConfig& c) {
  return {{"rounds", c.rounds},
          {"batch", c.batch},
          {"ordering", ordering_name(c.ordering)},
          {"state_leaking", c.state_leaking},
          {"defense", c.defense.name()},
          {"attack", attack_name(c.attack.kind)},
          {"epsilon", c.attack.constraint.epsilon},
          {"pgd_steps", c.attack.pgd.steps},
          {"pgd_step_size", c.attack.pgd.step_size},
          {"pgd_subroutines", c.attack.pgd.subroutines().size()},
          {"iterations", c.attack.iterations},
          {"dataset", c.dataset},
          {"base", c.base},
          {"seeds", {{"data", c.seeds.data}, {"attacker", c.seeds.attacker}, {"defender", c.seeds.defender}}}};
}

inline nlohmann::json round_json(const RoundRecord& r) {
  nlohmann::json j{{"round", r.round},
                   {"batch_key", hex64(r.batch_key)},
                   {"n", r.n},
                   {"clean_digest", hex64(r.clean_digest)},
                   {"adversarial_digest", hex64(r.adversarial_digest)},
                   {"defender_fingerprint", hex64(r.defender_fingerprint)},
                   {"clean_fingerprint", hex64(r.clean_fingerprint)},
                   {"accuracy", r.accuracy()},
                   {"robustness", r.robustness()},
                   {"disqualified", r.disqualified}};
  if (r.disqualified) j["verdict"] = r.verdict;
  if (r.selected) {
    j["selected"] = *r.selected;
    j["losses"] = r.losses;
  }
  return j;
}

/// Line-delimited log: one config line, one line per round, one summary line.
inline void write_transcript_jsonl(std::ostream& os, const GameTranscript& t) {
  nlohmann::json head{{"type", "config"}, {"config", config_json(t.config)}};
  if (t.config.defense.kind == DefenseKind::rmc) head["note"] = "rmc calibration not applied";
  os << head.dump() << '\n';
  for (const auto& r : t.rounds) {
    nlohmann::json j = round_json(r);
    j["type"] = "round";
    os << j.dump() << '\n';
  }
  os << nlohmann::json{{"type", "summary"},
                       {"accuracy", t.accuracy},
                       {"robustness", t.robustness},
                       {"disqualified_rounds", t.disqualified_rounds},
                       {"attacker_digest", hex64(t.attacker_digest())},
                       {"defender_digest", hex64(t.defender_digest())}}
            .dump()
     << '\n';
}

inline void write_transcript_jsonl(const std::string& path, const GameTranscript& t) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write transcript '" + path + "'");
  write_transcript_jsonl(os, t);
}

inline std::string summary_csv_header() { return "defense,attack,dataset,seed,accuracy,robustness"; }

inline std::string summary_csv_row(const GameTranscript& t) {
  std::ostringstream os;
  os.precision(17);
  os << t.config.defense.name() << ',' << attack_name(t.config.attack.kind) << ',' << t.config.dataset << ','
     << t.config.seeds.data << ',' << t.accuracy << ',' << t.robustness;
  return os.str();
}

}  // namespace tdr
