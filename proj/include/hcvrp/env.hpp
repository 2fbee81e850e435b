#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "hcvrp/instance.hpp"
#include "hcvrp/rng.hpp"

namespace hcvrp {

// Snapshot of one vehicle during construction. The route is kept in lockstep
// with the step counter: vehicles that were not selected repeat their last
// node, so after t steps every route holds t+1 entries.
struct VehicleState {
  double remaining = 0.0;  // load still available on the current trip
  double time = 0.0;       // accumulated travel time
  std::vector<int> route;  // visited nodes, starts at the depot (0)

  int position() const { return route.back(); }
};

struct State {
  int step = 0;
  std::vector<VehicleState> vehicles;
  std::vector<int> demands;  // current demands; entry 0 stays 0

  bool at_depot(int vehicle) const {
    return vehicles[vehicle].position() == 0;
  }
};

struct Action {
  int vehicle = 0;
  int node = 0;
};

struct Solution {
  std::vector<std::vector<int>> routes;  // compressed, depot-to-depot
  std::vector<double> per_vehicle_time;
  double objective = 0.0;
  Objective objective_tag = Objective::MinMax;
};

inline State init_state(const Instance& instance) {
  instance.check();
  State state;
  state.step = 0;
  state.vehicles.resize(instance.num_vehicles());
  for (int i = 0; i < instance.num_vehicles(); ++i) {
    state.vehicles[i].remaining = instance.fleet.capacities[i];
    state.vehicles[i].time = 0.0;
    state.vehicles[i].route = {0};
  }
  state.demands = instance.demands;
  return state;
}

inline bool is_terminal(const State& state) {
  for (std::size_t i = 1; i < state.demands.size(); ++i)
    if (state.demands[i] > 0) return false;
  return true;
}

inline bool customer_feasible(const State& state, int vehicle, int node) {
  return state.demands[node] > 0 &&
         static_cast<double>(state.demands[node]) <=
             state.vehicles[vehicle].remaining;
}

inline bool any_customer_feasible(const State& state, int vehicle) {
  for (std::size_t j = 1; j < state.demands.size(); ++j)
    if (customer_feasible(state, vehicle, static_cast<int>(j))) return true;
  return false;
}

// Selectable nodes for one vehicle. Customers need unserved demand that fits
// the remaining load. The depot is open whenever the vehicle is away from it
// (multi-trip reload); a vehicle idling at the depot may only pick the depot
// again when no customer fits, which keeps the mask non-empty.
inline std::vector<std::uint8_t> feasibility_mask(const State& state,
                                                  const Instance& instance,
                                                  int vehicle) {
  require(vehicle >= 0 && vehicle < instance.num_vehicles(),
          "feasibility_mask: vehicle index out of range");
  const int k = instance.num_nodes();
  std::vector<std::uint8_t> mask(k, 0);
  bool any_customer = false;
  for (int j = 1; j < k; ++j) {
    if (customer_feasible(state, vehicle, j)) {
      mask[j] = 1;
      any_customer = true;
    }
  }
  mask[0] = (!state.at_depot(vehicle) || !any_customer) ? 1 : 0;
  return mask;
}

inline bool action_feasible(const State& state, const Instance& instance,
                            const Action& action) {
  if (action.vehicle < 0 || action.vehicle >= instance.num_vehicles())
    return false;
  if (action.node < 0 || action.node >= instance.num_nodes()) return false;
  if (action.node == 0)
    return !state.at_depot(action.vehicle) ||
           !any_customer_feasible(state, action.vehicle);
  return customer_feasible(state, action.vehicle, action.node);
}

// Applies one action. The selected vehicle moves (reloading on a depot
// visit), every other vehicle repeats its last node, and the served demand is
// zeroed. Returns the new state and the per-vehicle incremental travel time,
// which is nonzero only at the selected vehicle.
inline std::pair<State, std::vector<double>> step(const State& state,
                                                  const Action& action,
                                                  const Instance& instance,
                                                  const DistanceTable& dist) {
  if (!action_feasible(state, instance, action))
    throw ContractViolation("env.step: infeasible action (vehicle " +
                            std::to_string(action.vehicle) + ", node " +
                            std::to_string(action.node) + ")");
  State next = state;
  next.step = state.step + 1;
  std::vector<double> reward(instance.num_vehicles(), 0.0);
  for (int k = 0; k < instance.num_vehicles(); ++k) {
    VehicleState& v = next.vehicles[k];
    if (k == action.vehicle) {
      const double leg =
          dist(v.position(), action.node) / instance.fleet.speeds[k];
      v.time += leg;
      reward[k] = leg;
      if (action.node == 0) {
        v.remaining = instance.fleet.capacities[k];
      } else {
        v.remaining -= state.demands[action.node];
      }
      v.route.push_back(action.node);
    } else {
      v.route.push_back(v.position());
    }
  }
  if (action.node != 0) next.demands[action.node] = 0;
  return {std::move(next), std::move(reward)};
}

inline std::pair<State, std::vector<double>> step(const State& state,
                                                  const Action& action,
                                                  const Instance& instance) {
  return step(state, action, instance, distance_table(instance));
}

namespace detail {

inline std::vector<int> compress_route(const std::vector<int>& route) {
  std::vector<int> out;
  for (int node : route)
    if (out.empty() || out.back() != node) out.push_back(node);
  return out;
}

}  // namespace detail

// Closes every open route with a final depot leg and evaluates the objective.
inline Solution finalize(const State& state, const Instance& instance,
                         const DistanceTable& dist) {
  require(is_terminal(state), "finalize: called on a non-terminal state");
  Solution solution;
  solution.objective_tag = instance.objective;
  const int m = instance.num_vehicles();
  solution.routes.resize(m);
  solution.per_vehicle_time.resize(m);
  for (int i = 0; i < m; ++i) {
    std::vector<int> route = detail::compress_route(state.vehicles[i].route);
    double time = state.vehicles[i].time;
    if (route.back() != 0) {
      time += dist(route.back(), 0) / instance.fleet.speeds[i];
      route.push_back(0);
    }
    solution.routes[i] = std::move(route);
    solution.per_vehicle_time[i] = time;
  }
  if (instance.objective == Objective::MinMax) {
    solution.objective = *std::max_element(solution.per_vehicle_time.begin(),
                                           solution.per_vehicle_time.end());
  } else {
    solution.objective = std::accumulate(solution.per_vehicle_time.begin(),
                                         solution.per_vehicle_time.end(), 0.0);
  }
  return solution;
}

inline Solution finalize(const State& state, const Instance& instance) {
  return finalize(state, instance, distance_table(instance));
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct ValidationReport {
  bool ok = false;
  std::string violation;  // empty when ok
  double objective = 0.0;
  std::vector<double> per_vehicle_time;
};

// Re-checks a finished solution against the model constraints and recomputes
// all travel times from the raw routes. Violations are reported, not thrown.
inline ValidationReport validate(const Solution& solution,
                                 const Instance& instance) {
  ValidationReport report;
  const int m = instance.num_vehicles();
  const int k = instance.num_nodes();
  auto fail = [&](const std::string& why) {
    report.ok = false;
    report.violation = why;
    return report;
  };
  if (static_cast<int>(solution.routes.size()) != m)
    return fail("route count does not match fleet size");

  const DistanceTable dist = distance_table(instance);
  std::vector<int> visits(k, 0);
  report.per_vehicle_time.assign(m, 0.0);
  for (int i = 0; i < m; ++i) {
    const auto& route = solution.routes[i];
    if (route.empty() || route.front() != 0 || route.back() != 0)
      return fail("vehicle " + std::to_string(i) +
                  ": route must start and end at the depot");
    double trip_demand = 0.0;
    for (std::size_t p = 0; p < route.size(); ++p) {
      const int node = route[p];
      if (node < 0 || node >= k)
        return fail("vehicle " + std::to_string(i) + ": node index " +
                    std::to_string(node) + " out of range");
      if (node == 0) {
        trip_demand = 0.0;  // reload
      } else {
        visits[node] += 1;
        trip_demand += instance.demands[node];
        if (trip_demand > instance.fleet.capacities[i] + 1e-12)
          return fail("capacity: vehicle " + std::to_string(i) +
                      " trip demand " + std::to_string(trip_demand) +
                      " exceeds capacity " +
                      std::to_string(instance.fleet.capacities[i]));
      }
      if (p > 0)
        report.per_vehicle_time[i] +=
            dist(route[p - 1], node) / instance.fleet.speeds[i];
    }
  }
  for (int j = 1; j < k; ++j) {
    if (visits[j] != 1)
      return fail("constraint (2): customer " + std::to_string(j) +
                  " visited " + std::to_string(visits[j]) + " times");
  }
  if (instance.objective == Objective::MinMax) {
    report.objective = *std::max_element(report.per_vehicle_time.begin(),
                                         report.per_vehicle_time.end());
  } else {
    report.objective = std::accumulate(report.per_vehicle_time.begin(),
                                       report.per_vehicle_time.end(), 0.0);
  }
  report.ok = true;
  return report;
}

// ---------------------------------------------------------------------------
// Uniform-random feasible policy; the weakest sane baseline.
// ---------------------------------------------------------------------------

// A vehicle is productive when it can serve some customer now or is away from
// the depot (returning is a real move). Vehicles idling at the depot with
// nothing feasible are skipped so the walk cannot stall.
inline Solution random_feasible_rollout(const Instance& instance, Rng& rng) {
  instance.check();
  if (!instance.serviceable())
    throw DataError("rollout: some demand exceeds every vehicle capacity");
  const DistanceTable dist = distance_table(instance);
  State state = init_state(instance);
  const int m = instance.num_vehicles();
  const long step_cap = 10L * (instance.num_customers() + 1) + 20L * m + 64;
  long steps = 0;
  while (!is_terminal(state)) {
    require(steps++ < step_cap, "random rollout exceeded step cap");
    std::vector<int> productive;
    for (int i = 0; i < m; ++i)
      if (!state.at_depot(i) || any_customer_feasible(state, i))
        productive.push_back(i);
    require(!productive.empty(), "random rollout: no productive vehicle");
    const int vehicle =
        productive[rng.uniform_int(0, static_cast<int>(productive.size()) - 1)];
    const auto mask = feasibility_mask(state, instance, vehicle);
    std::vector<int> options;
    for (int j = 0; j < instance.num_nodes(); ++j)
      if (mask[j] && !(j == 0 && state.at_depot(vehicle))) options.push_back(j);
    const int node =
        options[rng.uniform_int(0, static_cast<int>(options.size()) - 1)];
    state = step(state, {vehicle, node}, instance, dist).first;
  }
  return finalize(state, instance, dist);
}

// ---------------------------------------------------------------------------
// Solution export
// ---------------------------------------------------------------------------

inline nlohmann::json solution_to_json(const Solution& solution) {
  nlohmann::json j;
  j["routes"] = solution.routes;
  j["per_vehicle_time"] = solution.per_vehicle_time;
  j["objective"] = solution.objective;
  j["objective_tag"] = to_string(solution.objective_tag);
  return j;
}

inline void save_solution(const Solution& solution, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << solution_to_json(solution).dump(2) << "\n";
}

}  // namespace hcvrp
