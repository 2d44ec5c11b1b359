#pragma once

// The constructive routing MDP: state, masking, transitions, costing,
// validation and the eight dihedral augmentations.

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "r2e/errors.hpp"
#include "r2e/instance.hpp"

namespace r2e {

// Capacity comparisons tolerate rounding from normalized demands.
inline constexpr double kCapacityTol = 1e-9;

struct RolloutState {
  std::vector<std::uint8_t> visited;
  int current = -1;  // -1 before the first TSP move
  double remaining_capacity = 0;
  std::vector<int> partial_tour;
  std::size_t visited_customers = 0;
  bool done = false;
};

inline RolloutState initial_state(const Instance& inst) {
  RolloutState s;
  s.visited.assign(inst.node_count(), 0);
  if (inst.problem == Problem::cvrp) {
    s.current = 0;
    s.remaining_capacity = inst.capacity;
    s.partial_tour = {0};
  }
  return s;
}

inline std::vector<std::uint8_t> feasible_mask(const RolloutState& s, const Instance& inst) {
  const std::size_t nodes = inst.node_count();
  std::vector<std::uint8_t> mask(nodes, 0);
  if (s.done) return mask;
  if (inst.problem == Problem::tsp) {
    for (std::size_t i = 0; i < nodes; ++i) mask[i] = !s.visited[i];
    return mask;
  }
  for (std::size_t i = 1; i < nodes; ++i)
    mask[i] = !s.visited[i] && inst.demand(i) * inst.capacity <= s.remaining_capacity + kCapacityTol;
  mask[0] = s.current != 0;
  return mask;
}

inline RolloutState step(RolloutState s, int action, const Instance& inst) {
  if (action < 0 || static_cast<std::size_t>(action) >= inst.node_count())
    throw ContractError("step: action " + std::to_string(action) + " out of range");
  if (!feasible_mask(s, inst)[static_cast<std::size_t>(action)])
    throw ContractError("step: action " + std::to_string(action) + " is infeasible");
  const auto a = static_cast<std::size_t>(action);
  s.partial_tour.push_back(action);
  s.current = action;
  if (inst.problem == Problem::tsp) {
    s.visited[a] = 1;
    ++s.visited_customers;
    s.done = s.visited_customers == inst.node_count();
    return s;
  }
  if (action == 0) {
    s.remaining_capacity = inst.capacity;
    s.done = s.visited_customers == inst.customers();
  } else {
    s.visited[a] = 1;
    ++s.visited_customers;
    s.remaining_capacity = std::max(0.0, s.remaining_capacity - inst.demand(a) * inst.capacity);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Validation and cost
// ---------------------------------------------------------------------------

struct Violation {
  enum class Kind { out_of_range, duplicate_node, missing_node, capacity_excess, bad_endpoint };
  Kind kind;
  int node = -1;
  int subtour = -1;
  double load = 0;  // absolute demand on the offending subtour

  std::string describe() const {
    switch (kind) {
      case Kind::out_of_range: return "node " + std::to_string(node) + " out of range";
      case Kind::duplicate_node: return "node " + std::to_string(node) + " visited more than once";
      case Kind::missing_node: return "node " + std::to_string(node) + " never visited";
      case Kind::capacity_excess:
        return "subtour " + std::to_string(subtour) + " carries " + std::to_string(load) + " above capacity";
      case Kind::bad_endpoint: return "tour must start and end at the depot";
    }
    return "?";
  }
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  std::string describe() const {
    std::string s;
    for (const auto& v : violations) s += (s.empty() ? "" : "; ") + v.describe();
    return s.empty() ? "ok" : s;
  }
};

inline ValidationReport validate(const Instance& inst, const std::vector<int>& tour) {
  ValidationReport rep;
  using K = Violation::Kind;
  const std::size_t nodes = inst.node_count();
  std::vector<int> seen(nodes, 0);
  for (int v : tour) {
    if (v < 0 || static_cast<std::size_t>(v) >= nodes) {
      rep.violations.push_back({K::out_of_range, v});
      continue;
    }
    if (inst.problem == Problem::cvrp && v == 0) continue;
    if (++seen[static_cast<std::size_t>(v)] == 2) rep.violations.push_back({K::duplicate_node, v});
  }
  for (std::size_t i = inst.problem == Problem::cvrp ? 1 : 0; i < nodes; ++i)
    if (!seen[i]) rep.violations.push_back({K::missing_node, static_cast<int>(i)});
  if (inst.problem == Problem::cvrp) {
    if (tour.size() < 2 || tour.front() != 0 || tour.back() != 0) rep.violations.push_back({K::bad_endpoint});
    int sub = -1;
    double load = 0;
    auto close = [&] {
      if (sub >= 0 && load > inst.capacity + kCapacityTol) rep.violations.push_back({K::capacity_excess, -1, sub, load});
    };
    for (int v : tour) {
      if (v == 0) {
        close();
        ++sub;
        load = 0;
      } else if (v > 0 && static_cast<std::size_t>(v) < nodes) {
        load += inst.demand(static_cast<std::size_t>(v)) * inst.capacity;
      }
    }
    close();
  }
  return rep;
}

// Sum of consecutive Euclidean distances; TSP tours close the cycle.
inline double tour_length(const Instance& inst, const std::vector<int>& tour) {
  if (tour.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 1; i < tour.size(); ++i)
    total += distance(inst.coords[static_cast<std::size_t>(tour[i - 1])], inst.coords[static_cast<std::size_t>(tour[i])]);
  if (inst.problem == Problem::tsp)
    total += distance(inst.coords[static_cast<std::size_t>(tour.back())], inst.coords[static_cast<std::size_t>(tour.front())]);
  return total;
}

inline double tour_cost(const Instance& inst, const std::vector<int>& tour) {
  auto rep = validate(inst, tour);
  if (!rep.ok()) throw ValidationError("infeasible tour: " + rep.describe());
  return tour_length(inst, tour);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

inline Point dihedral(const Point& p, int t) {
  const double x = p.x, y = p.y;
  switch (t) {
    case 0: return {x, y};
    case 1: return {y, x};
    case 2: return {x, 1 - y};
    case 3: return {y, 1 - x};
    case 4: return {1 - x, y};
    case 5: return {1 - y, x};
    case 6: return {1 - x, 1 - y};
    case 7: return {1 - y, 1 - x};
  }
  throw ContractError("dihedral transform index must lie in [0, 8)");
}

inline Instance transform(const Instance& inst, int t) {
  Instance out = inst;
  for (auto& p : out.coords) p = dihedral(p, t);
  return out;
}

inline std::array<Instance, 8> augment8(const Instance& inst) {
  std::array<Instance, 8> out;
  for (int t = 0; t < 8; ++t) out[static_cast<std::size_t>(t)] = transform(inst, t);
  return out;
}

inline std::string tour_json(const Instance& inst, const std::vector<int>& tour, double cost) {
  nlohmann::json j;
  j["instance_seed"] = inst.seed;
  j["tour"] = tour;
  j["cost"] = cost;
  return j.dump();
}

}  // namespace r2e
