#pragma once

// Test-only ground truth: enumerates every customer-to-vehicle assignment,
// every visiting order per vehicle, and the optimal trip split per order.
// Deliberately shares no code with the environment or the search oracle; it
// works from the raw instance arrays alone.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "hcvrp/instance.hpp"

namespace brute {

inline double dist(const hcvrp::Instance& inst, int a, int b) {
  const double dx = inst.coords[a][0] - inst.coords[b][0];
  const double dy = inst.coords[a][1] - inst.coords[b][1];
  return std::sqrt(dx * dx + dy * dy);
}

// Cheapest total travel time for one vehicle visiting `order` (customer
// indices) in the given sequence, choosing depot reloads optimally.
inline double best_split_time(const hcvrp::Instance& inst, int vehicle,
                              const std::vector<int>& order) {
  const int k = static_cast<int>(order.size());
  if (k == 0) return 0.0;
  const double speed = inst.fleet.speeds[vehicle];
  const int cap = inst.fleet.capacities[vehicle];
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dp(k + 1, inf);
  dp[0] = 0.0;
  for (int i = 1; i <= k; ++i) {
    int load = 0;
    double inner = 0.0;
    // trip serving order[j..i-1]
    for (int j = i - 1; j >= 0; --j) {
      load += inst.demands[order[j]];
      if (load > cap) break;
      if (j < i - 1) inner += dist(inst, order[j], order[j + 1]);
      if (dp[j] == inf) continue;
      const double trip =
          dist(inst, 0, order[j]) + inner + dist(inst, order[i - 1], 0);
      dp[i] = std::min(dp[i], dp[j] + trip / speed);
    }
  }
  return dp[k];
}

// Minimum time for one vehicle to serve a customer set, over all orders.
inline double best_vehicle_time(const hcvrp::Instance& inst, int vehicle,
                                std::vector<int> customers) {
  if (customers.empty()) return 0.0;
  std::sort(customers.begin(), customers.end());
  double best = std::numeric_limits<double>::infinity();
  do {
    best = std::min(best, best_split_time(inst, vehicle, customers));
  } while (std::next_permutation(customers.begin(), customers.end()));
  return best;
}

// Optimal objective by full enumeration. Exponential; intended for n <= 6.
inline double optimal_objective(const hcvrp::Instance& inst) {
  const int n = inst.num_customers();
  const int m = inst.num_vehicles();
  long combos = 1;
  for (int i = 0; i < n; ++i) combos *= m;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<int>> sets(m);
  for (long code = 0; code < combos; ++code) {
    for (auto& s : sets) s.clear();
    long c = code;
    for (int j = 1; j <= n; ++j) {
      sets[c % m].push_back(j);
      c /= m;
    }
    double obj = 0.0;
    bool feasible = true;
    for (int v = 0; v < m && feasible; ++v) {
      const double t = best_vehicle_time(inst, v, sets[v]);
      if (!std::isfinite(t)) feasible = false;
      obj = inst.objective == hcvrp::Objective::MinMax ? std::max(obj, t)
                                                       : obj + t;
    }
    if (feasible) best = std::min(best, obj);
  }
  return best;
}

}  // namespace brute
