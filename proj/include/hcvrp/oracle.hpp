#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hcvrp/env.hpp"

namespace hcvrp {

struct OracleBudget {
  int max_customers = 8;
  int max_vehicles = 3;
  long node_limit = 200'000'000;

  void check() const {
    if (max_customers <= 0 || max_vehicles <= 0 || node_limit <= 0)
      throw ConfigError("oracle budget: caps must be positive");
  }
};

class BudgetExceeded : public std::runtime_error {
 public:
  explicit BudgetExceeded(const std::string& what)
      : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Nearest-feasible-neighbor constructive heuristic.
//
// Repeatedly dispatches the vehicle with the smallest accumulated time
// (min-max) or smallest time per unit capacity (min-sum) to its nearest
// feasible customer, sending it home to reload when nothing fits.
// ---------------------------------------------------------------------------
inline Solution greedy_heuristic(const Instance& instance) {
  instance.check();
  if (!instance.serviceable())
    throw DataError("greedy_heuristic: some demand exceeds every capacity");
  const DistanceTable dist = distance_table(instance);
  State state = init_state(instance);
  const int m = instance.num_vehicles();
  const long step_cap = 10L * (instance.num_customers() + 1) + 20L * m + 64;
  long steps = 0;

  auto dispatch_key = [&](int i) {
    return instance.objective == Objective::MinMax
               ? state.vehicles[i].time
               : state.vehicles[i].time / instance.fleet.capacities[i];
  };
  // Serving later needs a full load to be enough.
  auto worth_reloading = [&](int i) {
    for (std::size_t j = 1; j < state.demands.size(); ++j)
      if (state.demands[j] > 0 &&
          state.demands[j] <= instance.fleet.capacities[i])
        return true;
    return false;
  };

  while (!is_terminal(state)) {
    require(steps++ < step_cap, "greedy_heuristic exceeded step cap");
    std::vector<int> order(m);
    for (int i = 0; i < m; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return dispatch_key(a) < dispatch_key(b);
    });
    bool acted = false;
    for (int i : order) {
      int best_node = -1;
      double best_leg = std::numeric_limits<double>::infinity();
      for (int j = 1; j < instance.num_nodes(); ++j) {
        if (!customer_feasible(state, i, j)) continue;
        const double leg = dist(state.vehicles[i].position(), j);
        if (leg < best_leg) {
          best_leg = leg;
          best_node = j;
        }
      }
      if (best_node >= 0) {
        state = step(state, {i, best_node}, instance, dist).first;
        acted = true;
        break;
      }
      if (!state.at_depot(i) && worth_reloading(i)) {
        state = step(state, {i, 0}, instance, dist).first;
        acted = true;
        break;
      }
    }
    require(acted, "greedy_heuristic: stuck with unserved customers");
  }
  return finalize(state, instance, dist);
}

// ---------------------------------------------------------------------------
// Exact solver.
//
// Depth-first enumeration over the environment's own action space. Vehicles
// are processed in index order (route interleaving does not change the
// objective, so one canonical interleaving per route set suffices; this also
// covers the vehicle-order symmetry of identical vehicles). Branches are cut
// against the incumbent with admissible bounds; the incumbent starts at the
// greedy heuristic's solution.
// ---------------------------------------------------------------------------

namespace detail {

struct ExactSearch {
  const Instance& instance;
  const DistanceTable& dist;
  const OracleBudget& budget;
  long nodes = 0;
  double best_obj = std::numeric_limits<double>::infinity();
  std::optional<Solution> best;

  ExactSearch(const Instance& inst, const DistanceTable& d,
              const OracleBudget& b)
      : instance(inst), dist(d), budget(b) {}

  double return_cost(const State& state, int i) const {
    return dist(state.vehicles[i].position(), 0) / instance.fleet.speeds[i];
  }

  // Admissible lower bound on the final objective given that vehicles below
  // `active` are parked and vehicles above it have not moved yet.
  double lower_bound(const State& state, int active) const {
    const int m = instance.num_vehicles();
    const int k = instance.num_nodes();
    double fixed_max = 0.0;
    double fixed_sum = 0.0;
    for (int i = 0; i <= active; ++i) {
      const double final_i = state.vehicles[i].time + return_cost(state, i);
      fixed_max = std::max(fixed_max, final_i);
      fixed_sum += final_i;
    }
    if (instance.objective == Objective::MinMax) {
      double bound = fixed_max;
      for (int j = 1; j < k; ++j) {
        if (state.demands[j] == 0) continue;
        double cover = std::numeric_limits<double>::infinity();
        for (int i = active; i < m; ++i) {
          if (instance.fleet.capacities[i] < state.demands[j]) continue;
          double via;
          if (i == active) {
            via = state.demands[j] <= state.vehicles[i].remaining
                      ? dist(state.vehicles[i].position(), j)
                      : dist(state.vehicles[i].position(), 0) + dist(0, j);
            via = state.vehicles[i].time +
                  (via + dist(j, 0)) / instance.fleet.speeds[i];
          } else {
            via = 2.0 * dist(0, j) / instance.fleet.speeds[i];
          }
          cover = std::min(cover, via);
        }
        bound = std::max(bound, cover);  // infinity when nobody can serve j
      }
      return bound;
    }
    // min-sum: every unserved customer needs an incoming leg ending at it;
    // those legs are disjoint from each other and from the counted returns.
    double bound = fixed_sum;
    for (int j = 1; j < k; ++j) {
      if (state.demands[j] == 0) continue;
      double best_speed = 0.0;
      for (int i = active; i < m; ++i)
        if (instance.fleet.capacities[i] >= state.demands[j])
          best_speed = std::max(best_speed, instance.fleet.speeds[i]);
      if (best_speed == 0.0) return std::numeric_limits<double>::infinity();
      double nearest = dist(0, j);
      for (int i = active; i < m; ++i)
        nearest = std::min(nearest, dist(state.vehicles[i].position(), j));
      for (int l = 1; l < k; ++l)
        if (l != j && state.demands[l] > 0)
          nearest = std::min(nearest, dist(l, j));
      bound += nearest / best_speed;
    }
    return bound;
  }

  void consider_leaf(const State& state) {
    Solution candidate = finalize(state, instance, dist);
    if (candidate.objective < best_obj) {
      best_obj = candidate.objective;
      best = std::move(candidate);
    }
  }

  void dfs(const State& state, int active, bool just_reloaded) {
    if (++nodes > budget.node_limit)
      throw BudgetExceeded("exact_solve: node budget exceeded (" +
                           std::to_string(budget.node_limit) + ")");
    if (is_terminal(state)) {
      consider_leaf(state);
      return;
    }
    const int m = instance.num_vehicles();
    if (lower_bound(state, active) >= best_obj) return;

    // Serve a customer with the active vehicle.
    for (int j = 1; j < instance.num_nodes(); ++j) {
      if (!customer_feasible(state, active, j)) continue;
      dfs(step(state, {active, j}, instance, dist).first, active, false);
    }
    // Reload. Pointless twice in a row, and parking right after a reload
    // costs the same as parking without it.
    if (!state.at_depot(active) && !just_reloaded)
      dfs(step(state, {active, 0}, instance, dist).first, active, true);
    // Park the active vehicle; its closing leg is added at the leaf.
    if (active + 1 < m && !just_reloaded)
      dfs(state, active + 1, false);
  }
};

}  // namespace detail

inline Solution exact_solve(const Instance& instance,
                            const OracleBudget& budget = {}) {
  instance.check();
  budget.check();
  if (instance.num_customers() > budget.max_customers)
    throw ContractViolation("exact_solve: instance exceeds max_customers cap");
  if (instance.num_vehicles() > budget.max_vehicles)
    throw ContractViolation("exact_solve: instance exceeds max_vehicles cap");
  if (!instance.serviceable())
    throw DataError("exact_solve: some demand exceeds every capacity");

  const DistanceTable dist = distance_table(instance);
  detail::ExactSearch search(instance, dist, budget);
  {
    Solution incumbent = greedy_heuristic(instance);
    search.best_obj = incumbent.objective;
    search.best = std::move(incumbent);
  }
  search.dfs(init_state(instance), 0, false);
  return *search.best;
}

}  // namespace hcvrp
