#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hcvrp/common.hpp"
#include "hcvrp/rng.hpp"

namespace hcvrp {

enum class Objective { MinMax, MinSum };

inline std::string to_string(Objective o) {
  return o == Objective::MinMax ? "min-max" : "min-sum";
}

inline Objective parse_objective(const std::string& tag) {
  if (tag == "min-max" || tag == "minmax") return Objective::MinMax;
  if (tag == "min-sum" || tag == "minsum") return Objective::MinSum;
  throw ConfigError("unknown objective tag: " + tag);
}

enum class FleetPreset { V3, V5 };

inline FleetPreset parse_fleet_preset(const std::string& tag) {
  if (tag == "V3" || tag == "v3") return FleetPreset::V3;
  if (tag == "V5" || tag == "v5") return FleetPreset::V5;
  throw ConfigError("unknown fleet preset: " + tag);
}

// A heterogeneous fleet: per-vehicle capacity and speed (distance per unit
// time). Travel time of a leg is distance / speed.
struct FleetSpec {
  std::vector<int> capacities;
  std::vector<double> speeds;

  int size() const { return static_cast<int>(capacities.size()); }

  void check() const {
    if (capacities.empty() || capacities.size() != speeds.size())
      throw ConfigError("fleet: capacities/speeds must be non-empty and of equal length");
    for (int q : capacities)
      if (q <= 0) throw ConfigError("fleet: capacities must be positive");
    for (double f : speeds)
      if (!(f > 0.0) || !std::isfinite(f))
        throw ConfigError("fleet: speeds must be positive and finite");
  }

  int max_capacity() const {
    int q = 0;
    for (int c : capacities) q = std::max(q, c);
    return q;
  }
};

// Capacities 20/25/30 (V3) or 20/25/30/35/40 (V5). All speeds are 1 under
// min-max; under min-sum speeds decrease as capacity grows: 1/4..1/6 (V3),
// 1/4..1/8 (V5).
inline FleetSpec fleet_for(FleetPreset preset, Objective objective) {
  FleetSpec fleet;
  if (preset == FleetPreset::V3) {
    fleet.capacities = {20, 25, 30};
    fleet.speeds = objective == Objective::MinSum
                       ? std::vector<double>{1.0 / 4, 1.0 / 5, 1.0 / 6}
                       : std::vector<double>{1.0, 1.0, 1.0};
  } else {
    fleet.capacities = {20, 25, 30, 35, 40};
    fleet.speeds =
        objective == Objective::MinSum
            ? std::vector<double>{1.0 / 4, 1.0 / 5, 1.0 / 6, 1.0 / 7, 1.0 / 8}
            : std::vector<double>{1.0, 1.0, 1.0, 1.0, 1.0};
  }
  return fleet;
}

// One problem instance. Node 0 is the depot; nodes 1..n are customers.
struct Instance {
  std::vector<std::array<double, 2>> coords;  // n+1 points
  std::vector<int> demands;                   // n+1 entries, demands[0] == 0
  FleetSpec fleet;
  Objective objective = Objective::MinMax;

  int num_customers() const { return static_cast<int>(coords.size()) - 1; }
  int num_nodes() const { return static_cast<int>(coords.size()); }
  int num_vehicles() const { return fleet.size(); }

  void check() const {
    fleet.check();
    if (num_customers() < 1) throw DataError("instance: need at least one customer");
    if (demands.size() != coords.size())
      throw DataError("instance: demands/coords length mismatch");
    if (demands[0] != 0) throw DataError("instance: depot demand must be 0");
    for (std::size_t i = 1; i < demands.size(); ++i)
      if (demands[i] < 0) throw DataError("instance: negative demand");
    for (const auto& c : coords)
      if (!std::isfinite(c[0]) || !std::isfinite(c[1]))
        throw DataError("instance: non-finite coordinate");
  }

  // A customer whose demand exceeds every vehicle capacity can never be
  // served (no demand splitting), so the instance has no feasible solution.
  bool serviceable() const {
    const int qmax = fleet.max_capacity();
    for (std::size_t i = 1; i < demands.size(); ++i)
      if (demands[i] > qmax) return false;
    return true;
  }
};

inline double euclidean(const std::array<double, 2>& a,
                        const std::array<double, 2>& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  return std::sqrt(dx * dx + dy * dy);
}

using DistanceTable = Eigen::MatrixXd;

inline DistanceTable distance_table(const Instance& instance) {
  const int k = instance.num_nodes();
  DistanceTable d(k, k);
  for (int i = 0; i < k; ++i) {
    d(i, i) = 0.0;
    for (int j = i + 1; j < k; ++j) {
      const double v = euclidean(instance.coords[i], instance.coords[j]);
      d(i, j) = v;
      d(j, i) = v;
    }
  }
  return d;
}

// Draw order is fixed: coordinates for nodes 0..n (x before y), then demands
// for customers 1..n. Same seed, same instance.
inline Instance generate_instance(int n, const FleetSpec& fleet,
                                  Objective objective, std::uint64_t seed) {
  if (n < 1) throw ConfigError("generate_instance: n must be >= 1");
  fleet.check();
  Rng rng(seed);
  Instance instance;
  instance.fleet = fleet;
  instance.objective = objective;
  instance.coords.resize(n + 1);
  instance.demands.assign(n + 1, 0);
  for (int i = 0; i <= n; ++i) {
    instance.coords[i][0] = rng.uniform01();
    instance.coords[i][1] = rng.uniform01();
  }
  for (int i = 1; i <= n; ++i) instance.demands[i] = rng.uniform_int(1, 9);
  return instance;
}

inline Instance generate_instance(int n, FleetPreset preset,
                                  Objective objective, std::uint64_t seed) {
  return generate_instance(n, fleet_for(preset, objective), objective, seed);
}

// ---------------------------------------------------------------------------
// Serialization. Schema version 1:
//   {"version":1, "n":.., "m":.., "objective":"min-max",
//    "coords":[[x,y],..], "demands":[..], "capacities":[..], "speeds":[..]}
// A set file wraps instances: {"version":1, "instances":[..]}.
// ---------------------------------------------------------------------------

inline constexpr int kInstanceSchemaVersion = 1;

inline nlohmann::json instance_to_json(const Instance& instance) {
  nlohmann::json j;
  j["version"] = kInstanceSchemaVersion;
  j["n"] = instance.num_customers();
  j["m"] = instance.num_vehicles();
  j["objective"] = to_string(instance.objective);
  auto& coords = j["coords"] = nlohmann::json::array();
  for (const auto& c : instance.coords) coords.push_back({c[0], c[1]});
  j["demands"] = instance.demands;
  j["capacities"] = instance.fleet.capacities;
  j["speeds"] = instance.fleet.speeds;
  return j;
}

inline Instance instance_from_json(const nlohmann::json& j) {
  if (!j.contains("version"))
    throw DataError("instance file: missing version tag");
  if (j["version"].get<int>() != kInstanceSchemaVersion)
    throw DataError("instance file: unsupported schema version " +
                    j["version"].dump());
  Instance instance;
  for (const auto& c : j.at("coords"))
    instance.coords.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
  instance.demands = j.at("demands").get<std::vector<int>>();
  instance.fleet.capacities = j.at("capacities").get<std::vector<int>>();
  instance.fleet.speeds = j.at("speeds").get<std::vector<double>>();
  instance.objective = parse_objective(j.at("objective").get<std::string>());
  if (instance.num_customers() != j.at("n").get<int>() ||
      instance.num_vehicles() != j.at("m").get<int>())
    throw DataError("instance file: n/m header disagrees with array lengths");
  instance.check();
  return instance;
}

inline void save_instance(const Instance& instance, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << instance_to_json(instance).dump(2) << "\n";
}

inline Instance load_instance_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("instance file: malformed json: ") + e.what());
  }
  return instance_from_json(j);
}

inline Instance load_instance(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return load_instance_text(text);
}

inline void save_instance_set(const std::vector<Instance>& instances,
                              const std::string& path) {
  nlohmann::json j;
  j["version"] = kInstanceSchemaVersion;
  auto& arr = j["instances"] = nlohmann::json::array();
  for (const auto& instance : instances)
    arr.push_back(instance_to_json(instance));
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

inline std::vector<Instance> load_instance_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("instance set: malformed json: ") + e.what());
  }
  if (!j.contains("version") ||
      j["version"].get<int>() != kInstanceSchemaVersion)
    throw DataError("instance set: missing or unsupported schema version");
  std::vector<Instance> instances;
  if (j.contains("instances")) {
    for (const auto& item : j["instances"])
      instances.push_back(instance_from_json(item));
  } else {
    instances.push_back(instance_from_json(j));
  }
  return instances;
}

}  // namespace hcvrp
