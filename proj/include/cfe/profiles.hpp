#pragma once

// Hourly building profiles: a seeded synthetic generator for three building
// archetypes and a CSV ingestion path.
//
// CSV schema (one row per hour, header required, column order free):
//   [building_id,]timestamp,load_kwh,thermal_kwh,pv_kwh,price,temperature_c,irradiation_wm2
// `timestamp` is ISO-8601 ("YYYY-MM-DD HH:MM[:SS]" or with 'T'); rows are
// consecutive hours. Without a building_id column the whole file is one
// building. A sidecar JSON next to the CSV (same stem, .json) carries the
// storage capacity, either as one object or an array of objects:
//   {"id": "b1", "esu_capacity_kwh": 12.0}

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cfe/error.hpp"
#include "cfe/random.hpp"

namespace cfe {

constexpr std::size_t kHoursPerWeek = 168;

struct BuildingProfile {
  std::string id;
  std::vector<double> load;         // non-shiftable load [kWh]
  std::vector<double> thermal;      // thermal consumption [kWh]
  std::vector<double> pv;           // PV generation [kWh]
  std::vector<double> price;        // grid price [currency/kWh]
  std::vector<double> temperature;  // [degC]
  std::vector<double> irradiation;  // [W/m2]
  double esu_capacity = 0.0;        // [kWh]
  // Hour-of-week (Monday 00:00 = 0) of the first sample.
  std::size_t hour_offset = 0;

  std::size_t hours() const { return load.size(); }
  std::size_t weeks() const { return hours() / kHoursPerWeek; }

  std::size_t hour_of_day(std::size_t i) const { return (hour_offset + i) % 24; }
  std::size_t day_of_week(std::size_t i) const { return ((hour_offset + i) / 24) % 7; }

  void validate() const {
    const auto n = load.size();
    for (const auto* s : {&thermal, &pv, &price, &temperature, &irradiation})
      if (s->size() != n) throw IngestionError("profile " + id + ": series lengths differ");
    if (n < kHoursPerWeek) throw IngestionError("profile " + id + ": fewer than 168 hourly samples");
    if (!(esu_capacity >= 0.0) || !std::isfinite(esu_capacity))
      throw IngestionError("profile " + id + ": storage capacity must be non-negative");
    for (std::size_t i = 0; i < n; ++i) {
      if (!(load[i] >= 0.0) || !(thermal[i] >= 0.0) || !(pv[i] >= 0.0) || !(price[i] >= 0.0))
        throw IngestionError("profile " + id + ": negative or non-finite energy/price at hour " + std::to_string(i));
      if (!std::isfinite(load[i] + thermal[i] + pv[i] + price[i] + temperature[i] + irradiation[i]))
        throw IngestionError("profile " + id + ": non-finite value at hour " + std::to_string(i));
    }
  }
};

enum class Archetype { Residential, Office, Industrial };

inline std::string_view to_string(Archetype a) {
  switch (a) {
    case Archetype::Residential: return "residential";
    case Archetype::Office: return "office";
    case Archetype::Industrial: return "industrial";
  }
  return "?";
}

inline Archetype parse_archetype(std::string_view s) {
  if (s == "residential") return Archetype::Residential;
  if (s == "office") return Archetype::Office;
  if (s == "industrial") return Archetype::Industrial;
  throw ConfigError("unknown archetype '" + std::string(s) + "'");
}

namespace detail {

inline double bump(double hour, double center, double width) {
  const double d = (hour - center) / width;
  return std::exp(-0.5 * d * d);
}

// Smooth step up at `on` and down at `off`.
inline double plateau(double hour, double on, double off) {
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-2.5 * x)); };
  return sig(hour - on) * sig(off - hour);
}

inline double base_load(Archetype a, double hod, bool weekend) {
  switch (a) {
    case Archetype::Residential:
      return 0.6 + 0.9 * bump(hod, 7.5, 1.2) + 2.4 * bump(hod, 19.5, 1.8) +
             (weekend ? 0.7 * bump(hod, 13.0, 3.0) : 0.1);
    case Archetype::Office:
      return weekend ? 0.9 : 0.9 + 3.6 * plateau(hod, 8.0, 18.0);
    case Archetype::Industrial:
      return weekend ? 2.0 + 1.2 * plateau(hod, 8.0, 16.0) : 2.0 + 3.0 * plateau(hod, 6.0, 22.0);
  }
  return 0.0;
}

inline double pv_peak_kw(Archetype a) {
  switch (a) {
    case Archetype::Residential: return 2.5;
    case Archetype::Office: return 4.0;
    case Archetype::Industrial: return 5.0;
  }
  return 0.0;
}

inline double heating_gain(Archetype a) {
  switch (a) {
    case Archetype::Residential: return 0.10;
    case Archetype::Office: return 0.12;
    case Archetype::Industrial: return 0.08;
  }
  return 0.0;
}

inline double time_of_use_price(std::size_t hod) {
  if (hod >= 22 || hod < 6) return 0.12;
  if (hod >= 17 && hod < 21) return 0.38;
  return 0.22;
}

}  // namespace detail

// Deterministic per (archetype, seed). Hour 0 is Monday 00:00.
inline BuildingProfile generate_synthetic_profile(Archetype archetype, std::uint64_t seed, std::size_t weeks) {
  if (weeks < 1) throw ConfigError("synthetic profile needs at least one week");
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(archetype), 0x51f0}));
  const std::size_t n = weeks * kHoursPerWeek;
  BuildingProfile p;
  p.id = std::string(to_string(archetype)) + "-" + std::to_string(seed);
  for (auto* s : {&p.load, &p.thermal, &p.pv, &p.price, &p.temperature, &p.irradiation}) s->resize(n);

  const double season = uniform(rng, 2.0, 18.0);
  const double load_scale = uniform(rng, 0.85, 1.15);
  double cloud = 1.0;
  double temp_drift = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t hod = i % 24;
    const std::size_t dow = (i / 24) % 7;
    const bool weekend = dow >= 5;
    if (hod == 0) {
      cloud = uniform(rng, 0.35, 1.0);
      temp_drift = 0.7 * temp_drift + normal(rng, 0.0, 1.5);
    }
    const double h = static_cast<double>(hod);
    p.temperature[i] = season + temp_drift + 4.0 * std::sin(2.0 * std::numbers::pi * (h - 9.0) / 24.0) +
                       normal(rng, 0.0, 0.5);
    // Daylight between 06:00 and 18:00 only; exactly zero otherwise.
    const double irr =
        (hod >= 6 && hod < 18) ? 850.0 * std::sin(std::numbers::pi * (h - 6.0) / 12.0) * cloud : 0.0;
    p.irradiation[i] = irr;
    p.pv[i] = irr > 0.0 ? std::max(0.0, irr / 1000.0 * detail::pv_peak_kw(archetype) * uniform(rng, 0.9, 1.0)) : 0.0;
    const double noise = std::max(0.2, 1.0 + normal(rng, 0.0, 0.07));
    p.load[i] = std::max(0.0, load_scale * detail::base_load(archetype, h, weekend) * noise);
    p.thermal[i] = detail::heating_gain(archetype) * std::max(0.0, 16.0 - p.temperature[i]);
    p.price[i] = std::max(0.01, detail::time_of_use_price(hod) + normal(rng, 0.0, 0.008));
  }
  double mean = 0.0;
  for (double l : p.load) mean += l;
  mean /= static_cast<double>(n);
  p.esu_capacity = std::round(4.0 * mean * 10.0) / 10.0;
  return p;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_number(const std::string& cell, const std::string& column, std::size_t line_no,
                           const std::string& path) {
  double v = 0.0;
  const auto* first = cell.data();
  const auto* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(v))
    throw IngestionError(path + ": row " + std::to_string(line_no) + ": column '" + column +
                         "' is not numeric ('" + cell + "')");
  return v;
}

// Hour-of-week (Monday 00:00 = 0) of an ISO timestamp.
inline std::size_t hour_of_week(const std::string& ts, std::size_t line_no, const std::string& path) {
  int y = 0;
  unsigned mo = 0, d = 0, hh = 0;
  char sep = 0;
  std::istringstream is(ts);
  char dash1 = 0, dash2 = 0;
  if (!(is >> y >> dash1 >> mo >> dash2 >> d) || dash1 != '-' || dash2 != '-' || !is.get(sep) ||
      (sep != 'T' && sep != ' ') || !(is >> hh) || hh > 23)
    throw IngestionError(path + ": row " + std::to_string(line_no) + ": unparseable timestamp '" + ts + "'");
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{mo}, day{d}};
  if (!ymd.ok())
    throw IngestionError(path + ": row " + std::to_string(line_no) + ": invalid date '" + ts + "'");
  const unsigned monday_based = (weekday{sys_days{ymd}}.iso_encoding() - 1);
  return monday_based * 24 + hh;
}

}  // namespace detail

inline std::vector<BuildingProfile> load_profiles_csv(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream in(path);
  if (!in) throw IngestionError(p + ": cannot open file");

  std::string line;
  if (!std::getline(in, line)) throw IngestionError(p + ": empty file");
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  static const std::vector<std::string> required{"timestamp", "load_kwh",      "thermal_kwh",    "pv_kwh",
                                                 "price",     "temperature_c", "irradiation_wm2"};
  for (const auto& r : required)
    if (!col.contains(r)) throw IngestionError(p + ": missing required column '" + r + "'");
  const bool has_id = col.contains("building_id");

  // Sidecar capacities.
  std::map<std::string, double> capacity;
  std::string default_id = path.stem().string();
  auto sidecar = path;
  sidecar.replace_extension(".json");
  if (std::filesystem::exists(sidecar)) {
    std::ifstream js(sidecar);
    nlohmann::json doc;
    try {
      js >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(sidecar.string() + ": invalid JSON: " + e.what());
    }
    auto take = [&](const nlohmann::json& o) {
      if (!o.is_object() || !o.contains("esu_capacity_kwh") || !o["esu_capacity_kwh"].is_number())
        throw IngestionError(sidecar.string() + ": each entry needs a numeric 'esu_capacity_kwh'");
      const std::string id = o.value("id", default_id);
      capacity[id] = o["esu_capacity_kwh"].get<double>();
      if (!has_id) default_id = id;
    };
    if (doc.is_array())
      for (const auto& o : doc) take(o);
    else
      take(doc);
  }

  std::vector<BuildingProfile> out;
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw IngestionError(p + ": row " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                           " cells, found " + std::to_string(cells.size()));
    const std::string id = has_id ? cells[col["building_id"]] : default_id;
    auto [it, fresh] = index.try_emplace(id, out.size());
    if (fresh) {
      out.emplace_back();
      out.back().id = id;
      out.back().hour_offset = detail::hour_of_week(cells[col["timestamp"]], line_no, p);
    }
    auto& prof = out[it->second];
    auto num = [&](const char* name) { return detail::parse_number(cells[col[name]], name, line_no, p); };
    const double load = num("load_kwh"), thermal = num("thermal_kwh"), pv = num("pv_kwh"), price = num("price");
    if (load < 0.0) throw IngestionError(p + ": row " + std::to_string(line_no) + ": negative load_kwh");
    if (thermal < 0.0) throw IngestionError(p + ": row " + std::to_string(line_no) + ": negative thermal_kwh");
    if (pv < 0.0) throw IngestionError(p + ": row " + std::to_string(line_no) + ": negative pv_kwh");
    if (price < 0.0) throw IngestionError(p + ": row " + std::to_string(line_no) + ": negative price");
    prof.load.push_back(load);
    prof.thermal.push_back(thermal);
    prof.pv.push_back(pv);
    prof.price.push_back(price);
    prof.temperature.push_back(num("temperature_c"));
    prof.irradiation.push_back(num("irradiation_wm2"));
  }
  if (out.empty()) throw IngestionError(p + ": no data rows");
  for (auto& prof : out) {
    const auto c = capacity.find(prof.id);
    if (c == capacity.end())
      throw IngestionError(p + ": no esu_capacity_kwh for building '" + prof.id + "' in " + sidecar.string());
    prof.esu_capacity = c->second;
    if (prof.hours() < kHoursPerWeek)
      throw IngestionError(p + ": building '" + prof.id + "' has " + std::to_string(prof.hours()) +
                           " rows, at least 168 required");
    prof.validate();
  }
  return out;
}

// Writes a profile in the ingestion schema (plus its sidecar).
inline void write_profile_csv(const BuildingProfile& prof, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "timestamp,load_kwh,thermal_kwh,pv_kwh,price,temperature_c,irradiation_wm2\n";
  out.precision(17);
  // 2024-01-01 is a Monday.
  using namespace std::chrono;
  const sys_days monday{year{2024} / January / 1};
  for (std::size_t i = 0; i < prof.hours(); ++i) {
    const auto hours_since = prof.hour_offset + i;
    const year_month_day ymd{monday + days{static_cast<int>(hours_since / 24)}};
    char ts[32];
    std::snprintf(ts, sizeof ts, "%04d-%02u-%02u %02zu:00", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), hours_since % 24);
    out << ts << ',' << prof.load[i] << ',' << prof.thermal[i] << ',' << prof.pv[i] << ',' << prof.price[i] << ','
        << prof.temperature[i] << ',' << prof.irradiation[i] << '\n';
  }
  auto sidecar = path;
  sidecar.replace_extension(".json");
  std::ofstream js(sidecar);
  js << nlohmann::json{{"id", prof.id}, {"esu_capacity_kwh", prof.esu_capacity}}.dump(2) << '\n';
}

}  // namespace cfe
