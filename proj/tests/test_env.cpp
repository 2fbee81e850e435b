#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "hcvrp/env.hpp"

using namespace hcvrp;

namespace {

Instance line_instance(std::vector<double> xs, std::vector<int> demands,
                       FleetSpec fleet, Objective objective) {
  Instance inst;
  inst.coords.push_back({0.0, 0.0});
  for (double x : xs) inst.coords.push_back({x, 0.0});
  inst.demands = {0};
  for (int d : demands) inst.demands.push_back(d);
  inst.fleet = std::move(fleet);
  inst.objective = objective;
  return inst;
}

FleetSpec single_vehicle(int capacity, double speed) {
  FleetSpec f;
  f.capacities = {capacity};
  f.speeds = {speed};
  return f;
}

}  // namespace

TEST_CASE("init_state: full loads, zero times, depot routes") {
  const Instance inst =
      generate_instance(5, FleetPreset::V3, Objective::MinMax, 3);
  const State s = init_state(inst);
  CHECK(s.vehicles[0].remaining == 20.0);
  CHECK(s.vehicles[1].remaining == 25.0);
  CHECK(s.vehicles[2].remaining == 30.0);
  for (const auto& v : s.vehicles) {
    CHECK(v.time == 0.0);
    CHECK(v.route == std::vector<int>{0});
  }
  CHECK(s.demands[0] == 0);
}

TEST_CASE("init_state: n=1 has exactly one nonzero demand") {
  const Instance inst =
      generate_instance(1, FleetPreset::V3, Objective::MinMax, 9);
  const State s = init_state(inst);
  int nonzero = 0;
  for (int d : s.demands) nonzero += d > 0 ? 1 : 0;
  CHECK(nonzero == 1);
}

TEST_CASE("mask: forced depot return when everything is served elsewhere") {
  Instance inst = line_instance({0.2, 0.4}, {5, 5},
                                single_vehicle(20, 1.0), Objective::MinMax);
  State s = init_state(inst);
  const DistanceTable d = distance_table(inst);
  s = step(s, {0, 1}, inst, d).first;
  s = step(s, {0, 2}, inst, d).first;
  const auto mask = feasibility_mask(s, inst, 0);
  CHECK(mask[0] == 1);
  CHECK(mask[1] == 0);
  CHECK(mask[2] == 0);
}

TEST_CASE("mask: remaining load excludes big demands") {
  Instance inst = line_instance({0.1, 0.2}, {5, 7},
                                single_vehicle(8, 1.0), Objective::MinMax);
  State s = init_state(inst);
  const DistanceTable d = distance_table(inst);
  s = step(s, {0, 1}, inst, d).first;  // load 8 -> 3
  CHECK(s.vehicles[0].remaining == 3.0);
  const auto mask = feasibility_mask(s, inst, 0);
  CHECK(mask[2] == 0);  // demand 7 > 3
  CHECK(mask[0] == 1);  // away from depot
}

TEST_CASE("mask: fresh fleet at the depot sees all fitting customers, not the depot") {
  const Instance inst =
      generate_instance(8, FleetPreset::V3, Objective::MinMax, 17);
  const State s = init_state(inst);
  for (int v = 0; v < inst.num_vehicles(); ++v) {
    const auto mask = feasibility_mask(s, inst, v);
    CHECK(mask[0] == 0);
    for (int j = 1; j < inst.num_nodes(); ++j) {
      const bool expected = inst.demands[j] > 0 &&
                            inst.demands[j] <= inst.fleet.capacities[v];
      CHECK(static_cast<bool>(mask[j]) == expected);
    }
  }
}

TEST_CASE("step: load arithmetic and 3-4-5 reward") {
  Instance inst;
  inst.coords = {{0.0, 0.0}, {0.3, 0.4}};
  inst.demands = {0, 5};
  inst.fleet = single_vehicle(20, 1.0);
  inst.objective = Objective::MinMax;
  const auto [next, reward] = step(init_state(inst), {0, 1}, inst);
  CHECK(next.vehicles[0].remaining == 15.0);
  CHECK(reward[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(next.demands[1] == 0);
}

TEST_CASE("step: unselected vehicles repeat their last node unchanged") {
  const Instance inst =
      generate_instance(4, FleetPreset::V3, Objective::MinMax, 2);
  const State s0 = init_state(inst);
  const auto [s1, reward] = step(s0, {1, 2}, inst);
  CHECK(reward[0] == 0.0);
  CHECK(reward[2] == 0.0);
  for (int v : {0, 2}) {
    CHECK(s1.vehicles[v].remaining == s0.vehicles[v].remaining);
    CHECK(s1.vehicles[v].time == 0.0);
    CHECK(s1.vehicles[v].route.size() == 2);
    CHECK(s1.vehicles[v].route.back() == 0);
  }
  CHECK(s1.vehicles[1].route == std::vector<int>{0, 2});
}

TEST_CASE("step: depot visit reloads to full capacity exactly") {
  Instance inst = line_instance({0.5}, {9}, single_vehicle(10, 1.0),
                                Objective::MinMax);
  State s = init_state(inst);
  const DistanceTable d = distance_table(inst);
  s = step(s, {0, 1}, inst, d).first;
  CHECK(s.vehicles[0].remaining == 1.0);
  s = step(s, {0, 0}, inst, d).first;
  CHECK(s.vehicles[0].remaining == 10.0);
}

TEST_CASE("step: infeasible actions are contract violations") {
  const Instance inst =
      generate_instance(3, FleetPreset::V3, Objective::MinMax, 4);
  const State s = init_state(inst);
  CHECK_THROWS_AS(step(s, {0, 0}, inst), ContractViolation);  // depot loop
  State served = s;
  served.demands[1] = 0;
  CHECK_THROWS_AS(step(served, {0, 1}, inst), ContractViolation);
}

TEST_CASE("is_terminal") {
  const Instance inst =
      generate_instance(2, FleetPreset::V3, Objective::MinMax, 6);
  State s = init_state(inst);
  CHECK_FALSE(is_terminal(s));
  s.demands[1] = 0;
  CHECK_FALSE(is_terminal(s));
  s.demands[2] = 0;
  CHECK(is_terminal(s));
}

TEST_CASE("finalize: out-and-back objective, both objectives") {
  for (Objective obj : {Objective::MinMax, Objective::MinSum}) {
    Instance inst = line_instance({0.5}, {3}, single_vehicle(20, 1.0), obj);
    State s = init_state(inst);
    const DistanceTable d = distance_table(inst);
    s = step(s, {0, 1}, inst, d).first;
    const Solution sol = finalize(s, inst, d);
    CHECK(sol.objective == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sol.routes[0] == std::vector<int>{0, 1, 0});
  }
}

TEST_CASE("finalize: min-sum leg of length 1 at speed 1/4 costs 4") {
  Instance inst = line_instance({1.0}, {3}, single_vehicle(20, 0.25),
                                Objective::MinSum);
  State s = init_state(inst);
  const DistanceTable d = distance_table(inst);
  s = step(s, {0, 1}, inst, d).first;
  CHECK(s.vehicles[0].time == doctest::Approx(4.0).epsilon(1e-12));
  const Solution sol = finalize(s, inst, d);
  CHECK(sol.objective == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("finalize: max vs sum over per-vehicle times") {
  // Two vehicles, symmetric legs of 1.0 and 1.5 on the x axis.
  Instance inst;
  inst.coords = {{0.0, 0.0}, {1.0, 0.0}, {-1.5, 0.0}};
  inst.demands = {0, 2, 2};
  inst.fleet.capacities = {10, 10};
  inst.fleet.speeds = {1.0, 1.0};
  inst.objective = Objective::MinMax;
  const DistanceTable d = distance_table(inst);
  State s = init_state(inst);
  s = step(s, {0, 1}, inst, d).first;
  s = step(s, {1, 2}, inst, d).first;
  Solution sol = finalize(s, inst, d);
  CHECK(sol.per_vehicle_time[0] == doctest::Approx(2.0));
  CHECK(sol.per_vehicle_time[1] == doctest::Approx(3.0));
  CHECK(sol.objective == doctest::Approx(3.0));
  inst.objective = Objective::MinSum;
  sol = finalize(s, inst, d);
  CHECK(sol.objective == doctest::Approx(5.0));
}

TEST_CASE("finalize on a non-terminal state is a contract violation") {
  const Instance inst =
      generate_instance(2, FleetPreset::V3, Objective::MinMax, 8);
  CHECK_THROWS_AS(finalize(init_state(inst), inst), ContractViolation);
}

TEST_CASE("validate accepts finalize output with matching objective") {
  Rng rng(77);
  for (int trial = 0; trial < 40; ++trial) {
    const Instance inst = generate_instance(
        6, FleetPreset::V3,
        trial % 2 == 0 ? Objective::MinMax : Objective::MinSum,
        derive_seed(101, 0, trial));
    const Solution sol = random_feasible_rollout(inst, rng);
    const ValidationReport report = validate(sol, inst);
    CHECK(report.ok);
    CHECK(report.objective == doctest::Approx(sol.objective).epsilon(1e-9));
  }
}

TEST_CASE("validate flags a twice-visited customer as constraint (2)") {
  const Instance inst =
      generate_instance(3, FleetPreset::V3, Objective::MinMax, 5);
  Rng rng(1);
  Solution sol = random_feasible_rollout(inst, rng);
  sol.routes[0] = {0, 1, 1, 0};
  const auto report = validate(sol, inst);
  CHECK_FALSE(report.ok);
  CHECK(report.violation.find("constraint (2)") != std::string::npos);
}

TEST_CASE("validate flags an over-capacity trip") {
  // One capacity-20 vehicle asked to carry 21 in a single trip.
  Instance inst = line_instance({0.1, 0.2, 0.3}, {7, 7, 7},
                                single_vehicle(20, 1.0), Objective::MinMax);
  Solution sol;
  sol.routes = {{0, 1, 2, 3, 0}};
  sol.per_vehicle_time = {0.6};
  sol.objective = 0.6;
  sol.objective_tag = Objective::MinMax;
  // Independent demand summation over the written trip: 7+7+7 = 21 > 20.
  const int total = inst.demands[1] + inst.demands[2] + inst.demands[3];
  REQUIRE(total == 21);
  const auto report = validate(sol, inst);
  CHECK_FALSE(report.ok);
  CHECK(report.violation.find("capacity") != std::string::npos);
}

TEST_CASE("validate flags routes that do not close at the depot") {
  const Instance inst =
      generate_instance(2, FleetPreset::V3, Objective::MinMax, 5);
  Rng rng(2);
  Solution sol = random_feasible_rollout(inst, rng);
  REQUIRE(sol.routes[0].size() >= 2);
  sol.routes[0].pop_back();
  // Dropping the closing depot (or making the route start elsewhere) fails.
  const auto report = validate(sol, inst);
  CHECK_FALSE(report.ok);
}

// ---------------------------------------------------------------------------
// Properties over random trajectories
// ---------------------------------------------------------------------------

TEST_CASE("trajectory properties: conservation, lockstep, monotone capacity, "
          "reward/objective consistency") {
  Rng pick(31337);
  for (int trial = 0; trial < 60; ++trial) {
    const Objective obj =
        trial % 2 == 0 ? Objective::MinMax : Objective::MinSum;
    const Instance inst = generate_instance(
        3 + static_cast<int>(pick.uniform_int(0, 5)),
        trial % 3 == 0 ? FleetPreset::V5 : FleetPreset::V3, obj,
        derive_seed(9000, 1, trial));
    const DistanceTable dist = distance_table(inst);
    const int total_demand =
        std::accumulate(inst.demands.begin(), inst.demands.end(), 0);

    State s = init_state(inst);
    std::vector<double> accumulated(inst.num_vehicles(), 0.0);
    while (!is_terminal(s)) {
      // Random productive vehicle, random feasible node (stays excluded).
      std::vector<int> productive;
      for (int v = 0; v < inst.num_vehicles(); ++v)
        if (!s.at_depot(v) || any_customer_feasible(s, v))
          productive.push_back(v);
      REQUIRE_FALSE(productive.empty());
      const int vehicle = productive[pick.uniform_int(
          0, static_cast<int>(productive.size()) - 1)];
      const auto mask = feasibility_mask(s, inst, vehicle);
      std::vector<int> options;
      for (int j = 0; j < inst.num_nodes(); ++j)
        if (mask[j] && !(j == 0 && s.at_depot(vehicle))) options.push_back(j);
      const int node =
          options[pick.uniform_int(0, static_cast<int>(options.size()) - 1)];

      const double load_before = s.vehicles[vehicle].remaining;
      const auto [next, reward] = step(s, {vehicle, node}, inst, dist);

      // Demand conservation: served demand zeroed, others untouched.
      int served = 0;
      for (int j = 1; j < inst.num_nodes(); ++j) {
        if (j == node) {
          CHECK(next.demands[j] == 0);
          served += s.demands[j];
        } else {
          CHECK(next.demands[j] == s.demands[j]);
        }
      }
      const int remaining_total = std::accumulate(next.demands.begin(),
                                                  next.demands.end(), 0);
      CHECK(remaining_total + served +
                (total_demand - remaining_total - served) ==
            total_demand);

      // Monotone capacity: never grows except on a depot reset.
      if (node == 0) {
        CHECK(next.vehicles[vehicle].remaining ==
              static_cast<double>(inst.fleet.capacities[vehicle]));
      } else {
        CHECK(next.vehicles[vehicle].remaining <= load_before);
      }

      // Route lockstep.
      for (const auto& v : next.vehicles)
        CHECK(v.route.size() == static_cast<std::size_t>(next.step) + 1);

      for (int v = 0; v < inst.num_vehicles(); ++v)
        accumulated[v] += reward[v];
      s = next;
    }

    // Reward accumulation plus the closing legs equals the validated
    // objective for both objective forms.
    const Solution sol = finalize(s, inst, dist);
    for (int v = 0; v < inst.num_vehicles(); ++v) {
      double closing = 0.0;
      if (s.vehicles[v].position() != 0)
        closing = dist(s.vehicles[v].position(), 0) / inst.fleet.speeds[v];
      CHECK(sol.per_vehicle_time[v] ==
            doctest::Approx(accumulated[v] + closing).epsilon(1e-9));
    }
    const auto report = validate(sol, inst);
    REQUIRE(report.ok);
    CHECK(report.objective == doctest::Approx(sol.objective).epsilon(1e-9));
  }
}

TEST_CASE("mask safety: masked-true actions step, masked-false actions throw") {
  Rng rng(555);
  long checked = 0;
  for (int trial = 0; trial < 200 && checked < 10000; ++trial) {
    const Instance inst = generate_instance(
        5, FleetPreset::V3,
        trial % 2 == 0 ? Objective::MinMax : Objective::MinSum,
        derive_seed(777, 2, trial));
    const DistanceTable dist = distance_table(inst);
    State s = init_state(inst);
    while (!is_terminal(s)) {
      for (int v = 0; v < inst.num_vehicles(); ++v) {
        const auto mask = feasibility_mask(s, inst, v);
        bool any = false;
        for (int j = 0; j < inst.num_nodes(); ++j) {
          ++checked;
          if (mask[j]) {
            any = true;
            CHECK_NOTHROW(step(s, {v, j}, inst, dist));
          } else {
            CHECK_THROWS_AS(step(s, {v, j}, inst, dist), ContractViolation);
          }
        }
        CHECK(any);  // the mask is never empty
      }
      // advance with a random productive move
      std::vector<Action> moves;
      for (int v = 0; v < inst.num_vehicles(); ++v) {
        const auto mask = feasibility_mask(s, inst, v);
        for (int j = 0; j < inst.num_nodes(); ++j)
          if (mask[j] && !(j == 0 && s.at_depot(v))) moves.push_back({v, j});
      }
      REQUIRE_FALSE(moves.empty());
      s = step(s,
               moves[rng.uniform_int(0, static_cast<int>(moves.size()) - 1)],
               inst, dist)
              .first;
    }
  }
  CHECK(checked >= 10000);
}

TEST_CASE("solution export round-trips through json") {
  const Instance inst =
      generate_instance(4, FleetPreset::V3, Objective::MinSum, 21);
  Rng rng(3);
  const Solution sol = random_feasible_rollout(inst, rng);
  const nlohmann::json j = solution_to_json(sol);
  CHECK(j["routes"].get<std::vector<std::vector<int>>>() == sol.routes);
  CHECK(j["objective"].get<double>() == sol.objective);
  CHECK(j["objective_tag"] == "min-sum");
}
