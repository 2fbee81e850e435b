#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hcvrp/instance.hpp"

namespace hcvrp {

struct CvrplibResult {
  Instance instance;
  // Original coordinate units per rescaled unit: multiply objective values by
  // this to report them in the file's units.
  double scale = 1.0;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

}  // namespace detail

// Reads the keyword-based `.vrp` format: DIMENSION header, NODE_COORD_SECTION,
// DEMAND_SECTION and DEPOT_SECTION. The file's homogeneous vehicle is
// discarded and replaced by the requested heterogeneous fleet; coordinates are
// rescaled into the unit square by the largest axis range (aspect preserved).
inline CvrplibResult parse_cvrplib(const std::string& text,
                                   const FleetSpec& fleet,
                                   Objective objective) {
  fleet.check();
  std::istringstream in(text);
  std::string line;
  int dimension = -1;
  std::map<int, std::array<double, 2>> coords;
  std::map<int, int> demands;
  int depot_id = -1;
  bool saw_coords = false, saw_demands = false, saw_depot = false;

  enum class Section { None, Coords, Demands, Depot };
  Section section = Section::None;

  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line == "EOF") break;

    // Header keys use "KEY : value"; section markers stand alone.
    if (line.rfind("NODE_COORD_SECTION", 0) == 0) {
      section = Section::Coords;
      saw_coords = true;
      continue;
    }
    if (line.rfind("DEMAND_SECTION", 0) == 0) {
      section = Section::Demands;
      saw_demands = true;
      continue;
    }
    if (line.rfind("DEPOT_SECTION", 0) == 0) {
      section = Section::Depot;
      saw_depot = true;
      continue;
    }
    if (line.find(':') != std::string::npos) {
      const auto colon = line.find(':');
      const std::string key = detail::trim(line.substr(0, colon));
      const std::string value = detail::trim(line.substr(colon + 1));
      if (key == "DIMENSION") {
        try {
          dimension = std::stoi(value);
        } catch (const std::exception&) {
          throw DataError("cvrplib: DIMENSION is not a number: " + value);
        }
      }
      section = Section::None;
      continue;
    }

    std::istringstream fields(line);
    switch (section) {
      case Section::Coords: {
        int id;
        double x, y;
        if (!(fields >> id >> x >> y))
          throw DataError("cvrplib: malformed NODE_COORD_SECTION line: " + line);
        coords[id] = {x, y};
        break;
      }
      case Section::Demands: {
        int id, d;
        if (!(fields >> id >> d))
          throw DataError("cvrplib: malformed DEMAND_SECTION line: " + line);
        demands[id] = d;
        break;
      }
      case Section::Depot: {
        int id;
        if (fields >> id) {
          if (id == -1) {
            section = Section::None;
          } else if (depot_id == -1) {
            depot_id = id;
          } else {
            throw DataError("cvrplib: DEPOT_SECTION lists more than one depot");
          }
        }
        break;
      }
      case Section::None:
        break;  // unknown free-standing token, ignore
    }
  }

  if (dimension <= 0) throw DataError("cvrplib: missing DIMENSION header");
  if (!saw_coords) throw DataError("cvrplib: missing NODE_COORD_SECTION");
  if (!saw_demands) throw DataError("cvrplib: missing DEMAND_SECTION");
  if (!saw_depot || depot_id == -1)
    throw DataError("cvrplib: missing DEPOT_SECTION");
  if (static_cast<int>(coords.size()) != dimension)
    throw DataError("cvrplib: NODE_COORD_SECTION has " +
                    std::to_string(coords.size()) + " nodes, DIMENSION is " +
                    std::to_string(dimension));
  if (static_cast<int>(demands.size()) != dimension)
    throw DataError("cvrplib: DEMAND_SECTION has " +
                    std::to_string(demands.size()) + " nodes, DIMENSION is " +
                    std::to_string(dimension));
  if (!coords.count(depot_id))
    throw DataError("cvrplib: DEPOT_SECTION names unknown node " +
                    std::to_string(depot_id));

  double xmin = coords.begin()->second[0], xmax = xmin;
  double ymin = coords.begin()->second[1], ymax = ymin;
  for (const auto& [id, c] : coords) {
    xmin = std::min(xmin, c[0]);
    xmax = std::max(xmax, c[0]);
    ymin = std::min(ymin, c[1]);
    ymax = std::max(ymax, c[1]);
  }
  const double range = std::max(xmax - xmin, ymax - ymin);
  if (range <= 0.0) throw DataError("cvrplib: zero coordinate range");

  CvrplibResult result;
  result.scale = range;
  Instance& instance = result.instance;
  instance.fleet = fleet;
  instance.objective = objective;

  auto push_node = [&](int id) {
    const auto& c = coords.at(id);
    instance.coords.push_back({(c[0] - xmin) / range, (c[1] - ymin) / range});
    instance.demands.push_back(id == depot_id ? 0 : demands.at(id));
  };
  push_node(depot_id);
  for (const auto& [id, c] : coords)
    if (id != depot_id) push_node(id);

  if (demands.at(depot_id) != 0)
    throw DataError("cvrplib: DEMAND_SECTION gives the depot nonzero demand");
  instance.check();
  return result;
}

inline CvrplibResult parse_cvrplib(const std::string& text, FleetPreset preset,
                                   Objective objective) {
  return parse_cvrplib(text, fleet_for(preset, objective), objective);
}

}  // namespace hcvrp
