#pragma once

// Result tables: rows per (dataset, base, defense, attack, seed), mean/std
// aggregates over seeds, CSV and text rendering.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace tdr {

struct ResultRow {
  std::string dataset;
  std::string base;
  std::string defense;
  std::string attack;
  double accuracy = 0.0;    // percent
  double robustness = 0.0;  // percent
  std::uint64_t seed = 0;
  double runtime_s = 0.0;
  std::string status = "ok";  // "ok" or "failed: ..."
  std::string transcript;     // file name relative to the output directory

  bool ok() const { return status == "ok"; }
};

struct AggregateRow {
  std::string dataset, base, defense, attack;
  std::size_t runs = 0;
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double robustness_mean = 0.0, robustness_std = 0.0;
};

struct ResultTable {
  std::vector<ResultRow> rows;
  std::vector<AggregateRow> aggregates;

  bool complete() const {
    return std::all_of(rows.begin(), rows.end(), [](const ResultRow& r) { return r.ok(); });
  }
};

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean_std of nothing");
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() == 1) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

/// One aggregate per (dataset, base, defense, attack) over its successful rows.
inline std::vector<AggregateRow> aggregate(const std::vector<ResultRow>& rows) {
  using Key = std::tuple<std::string, std::string, std::string, std::string>;
  std::vector<Key> order;
  std::map<Key, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& r : rows) {
    if (!r.ok()) continue;
    const Key k{r.dataset, r.base, r.defense, r.attack};
    if (!groups.count(k)) order.push_back(k);
    groups[k].first.push_back(r.accuracy);
    groups[k].second.push_back(r.robustness);
  }
  std::vector<AggregateRow> out;
  for (const auto& k : order) {
    const auto& [acc, rob] = groups.at(k);
    AggregateRow a{std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k), acc.size()};
    std::tie(a.accuracy_mean, a.accuracy_std) = mean_std(acc);
    std::tie(a.robustness_mean, a.robustness_std) = mean_std(rob);
    out.push_back(std::move(a));
  }
  return out;
}

/// Attacks with the minimum robustness in a group (all of them on ties). The
/// clean "none" entry only counts when it is the sole entry.
inline std::vector<std::string> worst_cell(const std::vector<std::pair<std::string, double>>& group) {
  if (group.empty()) throw std::invalid_argument("worst_cell: empty group");
  std::vector<std::pair<std::string, double>> attacks;
  for (const auto& g : group)
    if (g.first != "none") attacks.push_back(g);
  if (attacks.empty()) attacks = group;
  double lo = attacks.front().second;
  for (const auto& a : attacks) lo = std::min(lo, a.second);
  std::vector<std::string> out;
  for (const auto& a : attacks)
    if (a.second == lo) out.push_back(a.first);
  return out;
}

inline std::string fmt_num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

/// Deterministic CSV: per-run rows then aggregate rows (seed column "mean").
/// Runtimes are left out so the bytes depend only on the transcripts.
inline void write_table_csv(std::ostream& os, const ResultTable& t) {
  os << "dataset,base,defense,attack,accuracy,robustness,seed,accuracy_std,robustness_std,runs,status\n";
  for (const auto& r : t.rows)
    os << csv_field(r.dataset) << ',' << csv_field(r.base) << ',' << r.defense << ',' << r.attack << ','
       << fmt_num(r.accuracy) << ',' << fmt_num(r.robustness) << ',' << r.seed << ",,,1," << csv_field(r.status) << '\n';
  for (const auto& a : t.aggregates)
    os << csv_field(a.dataset) << ',' << csv_field(a.base) << ',' << a.defense << ',' << a.attack << ','
       << fmt_num(a.accuracy_mean) << ',' << fmt_num(a.robustness_mean) << ",mean," << fmt_num(a.accuracy_std) << ','
       << fmt_num(a.robustness_std) << ',' << a.runs << ",ok\n";
}

inline void write_timing_csv(std::ostream& os, const ResultTable& t) {
  os << "dataset,base,defense,attack,seed,runtime_s\n";
  for (const auto& r : t.rows)
    os << csv_field(r.dataset) << ',' << csv_field(r.base) << ',' << r.defense << ',' << r.attack << ',' << r.seed << ','
       << fmt_num(r.runtime_s) << '\n';
}

namespace detail {

inline std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

inline std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace detail

/// Human-readable table: one line per (dataset, base, defense, seed); the
/// clean accuracy column, then robustness per attack. '*' marks the worst
/// cell. With aggregates present, only they are shown, as mean +- std.
inline void write_table_text(std::ostream& os, const ResultTable& t) {
  struct Line {
    std::string accuracy = "-";
    std::map<std::string, std::pair<double, std::string>> robustness;  // attack -> (value, text)
  };
  using Key = std::tuple<std::string, std::string, std::string, std::string>;
  std::vector<Key> order;
  std::vector<std::string> attacks;
  std::map<Key, Line> lines;
  auto line = [&](Key k, const std::string& attack) -> Line& {
    if (!lines.count(k)) order.push_back(k);
    if (attack != "none" && std::find(attacks.begin(), attacks.end(), attack) == attacks.end()) attacks.push_back(attack);
    return lines[k];
  };
  if (!t.aggregates.empty()) {
    for (const auto& a : t.aggregates) {
      Line& l = line({a.dataset, a.base, a.defense, "mean"}, a.attack);
      if (a.attack == "none" || l.accuracy == "-")
        l.accuracy = detail::pct(a.accuracy_mean) + "+-" + detail::pct(a.accuracy_std);
      l.robustness[a.attack] = {a.robustness_mean, detail::pct(a.robustness_mean) + "+-" + detail::pct(a.robustness_std)};
    }
  } else {
    for (const auto& r : t.rows) {
      Line& l = line({r.dataset, r.base, r.defense, std::to_string(r.seed)}, r.attack);
      if (!r.ok()) {
        l.robustness[r.attack] = {std::numeric_limits<double>::quiet_NaN(), "failed"};
        continue;
      }
      if (r.attack == "none" || l.accuracy == "-") l.accuracy = detail::pct(r.accuracy);
      l.robustness[r.attack] = {r.robustness, detail::pct(r.robustness)};
    }
  }
  const std::size_t w = 18;
  os << detail::pad("dataset", 12) << detail::pad("base", 14) << detail::pad("defense", 12) << detail::pad("seed", 8)
     << detail::pad("accuracy", w);
  for (const auto& a : attacks) os << detail::pad(a, w);
  os << '\n';
  for (const auto& k : order) {
    const Line& l = lines.at(k);
    std::vector<std::pair<std::string, double>> group;
    for (const auto& [a, c] : l.robustness)
      if (!std::isnan(c.first)) group.emplace_back(a, c.first);
    const auto worst = group.empty() ? std::vector<std::string>{} : worst_cell(group);
    auto marked = [&](const std::string& a) { return std::find(worst.begin(), worst.end(), a) != worst.end(); };
    os << detail::pad(std::get<0>(k), 12) << detail::pad(std::get<1>(k), 14) << detail::pad(std::get<2>(k), 12)
       << detail::pad(std::get<3>(k), 8) << detail::pad(l.accuracy + (marked("none") ? "*" : ""), w);
    for (const auto& a : attacks) {
      const auto it = l.robustness.find(a);
      os << detail::pad(it == l.robustness.end() ? "-" : it->second.second + (marked(a) ? "*" : ""), w);
    }
    os << '\n';
  }
  os << "(* = worst robustness in the row)\n";
}

/// Writes table.csv, table.txt and timing.csv into `dir`.
inline void emit_report(const std::filesystem::path& dir, const ResultTable& t) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  auto open = [&](const char* name) {
    std::ofstream os(dir / name);
    if (!os) throw std::runtime_error("cannot write '" + (dir / name).string() + "'");
    return os;
  };
  {
    auto os = open("table.csv");
    write_table_csv(os, t);
  }
  {
    auto os = open("table.txt");
    write_table_text(os, t);
  }
  auto os = open("timing.csv");
  write_timing_csv(os, t);
}

/// A row recovered from a transcript file (config line + summary line).
inline ResultRow row_from_transcript(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read transcript '" + path.string() + "'");
  std::string line;
  nlohmann::json config, summary;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const std::string type = j.at("type");
    if (type == "config") config = j.at("config");
    if (type == "summary") summary = j;
  }
  if (config.is_null() || summary.is_null()) throw std::runtime_error("transcript '" + path.string() + "' is incomplete");
  ResultRow r;
  r.dataset = config.at("dataset");
  r.base = config.value("base", std::string("standard"));
  r.defense = config.at("defense");
  r.attack = config.at("attack");
  r.seed = config.at("seeds").at("data");
  r.accuracy = 100.0 * summary.at("accuracy").get<double>();
  r.robustness = 100.0 * summary.at("robustness").get<double>();
  r.transcript = path.filename().string();
  return r;
}

/// Rebuilds a table from every *.jsonl transcript in `dir` (sorted by name).
inline ResultTable table_from_transcripts(const std::filesystem::path& dir, bool with_aggregates) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("no transcript directory '" + dir.string() + "'");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  ResultTable t;
  for (const auto& f : files) t.rows.push_back(row_from_transcript(f));
  if (with_aggregates) t.aggregates = aggregate(t.rows);
  return t;
}

/// Recomputes `count` randomly chosen successful cells from their transcripts;
/// returns the number of mismatches.
template <class Rng>
std::size_t spot_check(const ResultTable& t, const std::filesystem::path& transcript_dir, std::size_t count, Rng& rng) {
  std::vector<const ResultRow*> ok;
  for (const auto& r : t.rows)
    if (r.ok() && !r.transcript.empty()) ok.push_back(&r);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < count && !ok.empty(); ++i) {
    const ResultRow& r = *ok[rng.index(ok.size())];
    const ResultRow again = row_from_transcript(transcript_dir / r.transcript);
    bad += again.accuracy != r.accuracy || again.robustness != r.robustness;
  }
  return bad;
}

}  // namespace tdr
