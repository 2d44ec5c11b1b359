#pragma once

// Reference solvers: exhaustive and dynamic-programming exact methods for
// small instances, and a deterministic nearest-neighbour + 2-opt heuristic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "r2e/env.hpp"
#include "r2e/errors.hpp"
#include "r2e/instance.hpp"

namespace r2e {

enum class ReferenceMethod { brute, held_karp, nn_2opt, external };

inline std::string to_string(ReferenceMethod m) {
  switch (m) {
    case ReferenceMethod::brute: return "brute";
    case ReferenceMethod::held_karp: return "held_karp";
    case ReferenceMethod::nn_2opt: return "nn_2opt";
    case ReferenceMethod::external: return "external";
  }
  return "?";
}

inline ReferenceMethod reference_method_from_string(const std::string& s) {
  for (auto m : {ReferenceMethod::brute, ReferenceMethod::held_karp, ReferenceMethod::nn_2opt, ReferenceMethod::external})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown reference method '" + s + "' (valid: brute, held_karp, nn_2opt, external)");
}

struct ReferenceResult {
  double cost = 0;
  std::vector<int> tour;
  ReferenceMethod method = ReferenceMethod::nn_2opt;
  bool exact = false;
};

inline constexpr std::size_t kBruteForceMax = 9;
inline constexpr std::size_t kHeldKarpMax = 13;
inline constexpr std::size_t kExactCvrpMax = 8;

namespace detail {

inline std::vector<double> distance_matrix(const std::vector<Point>& pts) {
  const std::size_t n = pts.size();
  std::vector<double> d(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) d[i * n + j] = distance(pts[i], pts[j]);
  return d;
}

// Optimal closed tour through `nodes` (nodes[0] fixed as start) via subset DP.
// Returns the cost and the visiting order (starting with nodes[0]).
inline std::pair<double, std::vector<int>> held_karp_cycle(const std::vector<Point>& coords, const std::vector<int>& nodes) {
  const std::size_t n = nodes.size();
  if (n == 1) return {0.0, {nodes[0]}};
  auto d = [&](std::size_t a, std::size_t b) {
    return distance(coords[static_cast<std::size_t>(nodes[a])], coords[static_cast<std::size_t>(nodes[b])]);
  };
  const std::size_t m = n - 1;  // nodes 1..n-1 mapped to bits 0..m-1
  const std::size_t full = (std::size_t{1} << m);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dp(full * m, inf);
  std::vector<int> parent(full * m, -1);
  for (std::size_t j = 0; j < m; ++j) dp[(std::size_t{1} << j) * m + j] = d(0, j + 1);
  for (std::size_t mask = 1; mask < full; ++mask)
    for (std::size_t j = 0; j < m; ++j) {
      if (!(mask & (std::size_t{1} << j))) continue;
      const double cur = dp[mask * m + j];
      if (cur == inf) continue;
      for (std::size_t k = 0; k < m; ++k) {
        if (mask & (std::size_t{1} << k)) continue;
        const std::size_t nm = mask | (std::size_t{1} << k);
        const double cand = cur + d(j + 1, k + 1);
        if (cand < dp[nm * m + k]) {
          dp[nm * m + k] = cand;
          parent[nm * m + k] = static_cast<int>(j);
        }
      }
    }
  double best = inf;
  std::size_t last = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const double c = dp[(full - 1) * m + j] + d(j + 1, 0);
    if (c < best) {
      best = c;
      last = j;
    }
  }
  std::vector<int> order;
  std::size_t mask = full - 1;
  int j = static_cast<int>(last);
  while (j >= 0) {
    order.push_back(nodes[static_cast<std::size_t>(j) + 1]);
    const int pj = parent[mask * m + static_cast<std::size_t>(j)];
    mask &= ~(std::size_t{1} << static_cast<std::size_t>(j));
    j = pj;
  }
  order.push_back(nodes[0]);
  std::reverse(order.begin(), order.end());
  return {best, order};
}

}  // namespace detail

inline ReferenceResult brute_force_tsp(const Instance& inst) {
  if (inst.problem != Problem::tsp) throw ContractError("brute_force_tsp expects a TSP instance");
  const std::size_t n = inst.node_count();
  if (n > kBruteForceMax) throw ContractError("brute_force_tsp refuses n = " + std::to_string(n) + " (max 9)");
  ReferenceResult res{0, {}, ReferenceMethod::brute, true};
  if (n <= 3) {
    res.tour.resize(n);
    std::iota(res.tour.begin(), res.tour.end(), 0);
    res.cost = tour_length(inst, res.tour);
    return res;
  }
  const auto d = detail::distance_matrix(inst.coords);
  std::vector<int> perm(n - 1);
  std::iota(perm.begin(), perm.end(), 1);
  double best = std::numeric_limits<double>::infinity();
  do {
    if (perm.front() > perm.back()) continue;  // skip mirrored duplicates
    double c = d[static_cast<std::size_t>(perm.front())] + d[static_cast<std::size_t>(perm.back()) * n];
    for (std::size_t i = 1; i < perm.size(); ++i)
      c += d[static_cast<std::size_t>(perm[i - 1]) * n + static_cast<std::size_t>(perm[i])];
    if (c < best) {
      best = c;
      res.tour.assign(1, 0);
      res.tour.insert(res.tour.end(), perm.begin(), perm.end());
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  res.cost = best;
  return res;
}

inline ReferenceResult held_karp_tsp(const Instance& inst) {
  if (inst.problem != Problem::tsp) throw ContractError("held_karp_tsp expects a TSP instance");
  const std::size_t n = inst.node_count();
  if (n > kHeldKarpMax) throw ContractError("held_karp_tsp refuses n = " + std::to_string(n) + " (max 13)");
  std::vector<int> nodes(n);
  std::iota(nodes.begin(), nodes.end(), 0);
  auto [cost, order] = detail::held_karp_cycle(inst.coords, nodes);
  return {cost, order, ReferenceMethod::held_karp, true};
}

// Exact CVRP by dynamic programming over customer subsets: every feasible
// subset is costed with Held-Karp, then the cheapest partition is assembled.
inline ReferenceResult exact_cvrp_small(const Instance& inst) {
  if (inst.problem != Problem::cvrp) throw ContractError("exact_cvrp_small expects a CVRP instance");
  const std::size_t n = inst.customers();
  if (n > kExactCvrpMax) throw ContractError("exact_cvrp_small refuses n = " + std::to_string(n) + " (max 8)");
  const std::size_t full = std::size_t{1} << n;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> route(full, inf);
  std::vector<std::vector<int>> route_order(full);
  for (std::size_t mask = 1; mask < full; ++mask) {
    double load = 0;
    std::vector<int> nodes{0};
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (std::size_t{1} << i)) {
        load += inst.demand(i + 1) * inst.capacity;
        nodes.push_back(static_cast<int>(i + 1));
      }
    if (load > inst.capacity + kCapacityTol) continue;
    auto [c, order] = detail::held_karp_cycle(inst.coords, nodes);
    route[mask] = c;
    route_order[mask] = std::move(order);
  }
  std::vector<double> best(full, inf);
  std::vector<std::size_t> choice(full, 0);
  best[0] = 0;
  for (std::size_t mask = 1; mask < full; ++mask) {
    const std::size_t low = mask & (~mask + 1);
    // enumerate submasks containing the lowest customer
    for (std::size_t sub = mask; sub; sub = (sub - 1) & mask) {
      if (!(sub & low) || route[sub] == inf || best[mask ^ sub] == inf) continue;
      const double c = route[sub] + best[mask ^ sub];
      if (c < best[mask]) {
        best[mask] = c;
        choice[mask] = sub;
      }
    }
  }
  ReferenceResult res{best[full - 1], {0}, ReferenceMethod::held_karp, true};
  for (std::size_t mask = full - 1; mask; mask ^= choice[mask]) {
    const auto& order = route_order[choice[mask]];
    res.tour.insert(res.tour.end(), order.begin() + 1, order.end());
    res.tour.push_back(0);
  }
  return res;
}

namespace detail {

inline double cycle_len(const std::vector<double>& d, std::size_t n, const std::vector<int>& t) {
  double c = 0;
  for (std::size_t i = 0; i < t.size(); ++i)
    c += d[static_cast<std::size_t>(t[i]) * n + static_cast<std::size_t>(t[(i + 1) % t.size()])];
  return c;
}

// First-improvement 2-opt on a closed cycle, scanning (i, j) lexicographically.
inline void two_opt_cycle(std::vector<int>& t, const std::vector<double>& d, std::size_t n) {
  const std::size_t m = t.size();
  if (m < 4) return;
  auto D = [&](int a, int b) { return d[static_cast<std::size_t>(a) * n + static_cast<std::size_t>(b)]; };
  bool improved = true;
  while (improved) {
    improved = false;
    for (std::size_t i = 0; i + 1 < m && !improved; ++i)
      for (std::size_t j = i + 2; j < m && !improved; ++j) {
        if (i == 0 && j == m - 1) continue;
        const int a = t[i], b = t[i + 1], c = t[j], e = t[(j + 1) % m];
        const double delta = D(a, c) + D(b, e) - D(a, b) - D(c, e);
        if (delta < -1e-12) {
          std::reverse(t.begin() + static_cast<std::ptrdiff_t>(i + 1), t.begin() + static_cast<std::ptrdiff_t>(j + 1));
          improved = true;
        }
      }
  }
}

}  // namespace detail

// Nearest-neighbour construction only (lower index wins ties).
inline std::vector<int> nearest_neighbor_tour(const Instance& inst) {
  const std::size_t n = inst.node_count();
  const auto d = detail::distance_matrix(inst.coords);
  std::vector<std::uint8_t> used(n, 0);
  if (inst.problem == Problem::tsp) {
    std::vector<int> tour{0};
    used[0] = 1;
    for (std::size_t s = 1; s < n; ++s) {
      const auto cur = static_cast<std::size_t>(tour.back());
      std::size_t best = n;
      for (std::size_t j = 0; j < n; ++j)
        if (!used[j] && (best == n || d[cur * n + j] < d[cur * n + best])) best = j;
      used[best] = 1;
      tour.push_back(static_cast<int>(best));
    }
    return tour;
  }
  std::vector<int> tour{0};
  double remaining = inst.capacity;
  std::size_t served = 0;
  while (served < inst.customers()) {
    const auto cur = static_cast<std::size_t>(tour.back());
    std::size_t best = n;
    for (std::size_t j = 1; j < n; ++j)
      if (!used[j] && inst.demand(j) * inst.capacity <= remaining + kCapacityTol &&
          (best == n || d[cur * n + j] < d[cur * n + best]))
        best = j;
    if (best == n) {
      tour.push_back(0);
      remaining = inst.capacity;
      continue;
    }
    used[best] = 1;
    ++served;
    remaining -= inst.demand(best) * inst.capacity;
    tour.push_back(static_cast<int>(best));
  }
  tour.push_back(0);
  return tour;
}

namespace detail {

inline std::vector<std::vector<int>> split_routes(const std::vector<int>& tour) {
  std::vector<std::vector<int>> routes;
  std::vector<int> cur;
  for (std::size_t i = 1; i < tour.size(); ++i) {
    if (tour[i] == 0) {
      if (!cur.empty()) routes.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(tour[i]);
    }
  }
  return routes;
}

inline std::vector<int> join_routes(const std::vector<std::vector<int>>& routes) {
  std::vector<int> t{0};
  for (const auto& r : routes) {
    if (r.empty()) continue;
    t.insert(t.end(), r.begin(), r.end());
    t.push_back(0);
  }
  return t;
}

inline double route_len(const std::vector<int>& r, const std::vector<double>& d, std::size_t n) {
  if (r.empty()) return 0.0;
  double c = d[static_cast<std::size_t>(r.front())] + d[static_cast<std::size_t>(r.back()) * n];
  for (std::size_t i = 1; i < r.size(); ++i) c += d[static_cast<std::size_t>(r[i - 1]) * n + static_cast<std::size_t>(r[i])];
  return c;
}

// First-improving relocation of one customer into another route (any position).
inline bool relocate_once(std::vector<std::vector<int>>& routes, const Instance& inst, const std::vector<double>& d,
                          std::size_t n) {
  std::vector<double> loads(routes.size(), 0.0);
  for (std::size_t r = 0; r < routes.size(); ++r)
    for (int v : routes[r]) loads[r] += inst.demand(static_cast<std::size_t>(v)) * inst.capacity;
  auto D = [&](int a, int b) { return d[static_cast<std::size_t>(a) * n + static_cast<std::size_t>(b)]; };
  for (std::size_t r = 0; r < routes.size(); ++r)
    for (std::size_t p = 0; p < routes[r].size(); ++p) {
      const int v = routes[r][p];
      const int prev = p == 0 ? 0 : routes[r][p - 1];
      const int next = p + 1 == routes[r].size() ? 0 : routes[r][p + 1];
      const double removal = D(prev, v) + D(v, next) - D(prev, next);
      const double dem = inst.demand(static_cast<std::size_t>(v)) * inst.capacity;
      for (std::size_t s = 0; s < routes.size(); ++s) {
        if (s == r || loads[s] + dem > inst.capacity + kCapacityTol) continue;
        for (std::size_t q = 0; q <= routes[s].size(); ++q) {
          const int a = q == 0 ? 0 : routes[s][q - 1];
          const int b = q == routes[s].size() ? 0 : routes[s][q];
          const double insertion = D(a, v) + D(v, b) - D(a, b);
          if (insertion - removal < -1e-12) {
            routes[s].insert(routes[s].begin() + static_cast<std::ptrdiff_t>(q), v);
            routes[r].erase(routes[r].begin() + static_cast<std::ptrdiff_t>(p));
            if (routes[r].empty()) routes.erase(routes.begin() + static_cast<std::ptrdiff_t>(r));
            return true;
          }
        }
      }
    }
  return false;
}

}  // namespace detail

inline ReferenceResult nn_2opt(const Instance& inst) {
  const std::size_t n = inst.node_count();
  const auto d = detail::distance_matrix(inst.coords);
  std::vector<int> tour = nearest_neighbor_tour(inst);
  if (inst.problem == Problem::tsp) {
    detail::two_opt_cycle(tour, d, n);
  } else {
    auto routes = detail::split_routes(tour);
    bool changed = true;
    while (changed) {
      for (auto& r : routes) {
        std::vector<int> cyc{0};
        cyc.insert(cyc.end(), r.begin(), r.end());
        detail::two_opt_cycle(cyc, d, n);
        // rotate so the depot leads, then drop it
        auto it = std::find(cyc.begin(), cyc.end(), 0);
        std::rotate(cyc.begin(), it, cyc.end());
        r.assign(cyc.begin() + 1, cyc.end());
      }
      changed = detail::relocate_once(routes, inst, d, n);
    }
    tour = detail::join_routes(routes);
  }
  return {tour_length(inst, tour), tour, ReferenceMethod::nn_2opt, false};
}

// Exact where affordable, heuristic otherwise.
inline ReferenceResult reference_solution(const Instance& inst) {
  if (inst.problem == Problem::tsp && inst.node_count() <= 12) return held_karp_tsp(inst);
  if (inst.problem == Problem::cvrp && inst.customers() <= kExactCvrpMax) return exact_cvrp_small(inst);
  return nn_2opt(inst);
}

inline ReferenceResult solve_reference(const Instance& inst, ReferenceMethod method) {
  switch (method) {
    case ReferenceMethod::brute: return brute_force_tsp(inst);
    case ReferenceMethod::held_karp:
      return inst.problem == Problem::tsp ? held_karp_tsp(inst) : exact_cvrp_small(inst);
    case ReferenceMethod::nn_2opt: return nn_2opt(inst);
    case ReferenceMethod::external: break;
  }
  throw ConfigError("external references must be loaded from a file");
}

inline double gap(double model_cost, double ref_cost) {
  if (!(ref_cost > 0)) throw ContractError("reference cost must be positive");
  return (model_cost - ref_cost) / ref_cost;
}

// ---------------------------------------------------------------------------
// Reference files
// ---------------------------------------------------------------------------

// External costs keyed by instance seed: CSV `seed,cost`.
inline std::map<std::uint64_t, double> load_external_costs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::map<std::uint64_t, double> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("seed", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError("expected seed,cost", lineno);
    try {
      out[std::stoull(line.substr(0, comma))] = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw ParseError("expected seed,cost", lineno);
    }
  }
  return out;
}

struct CacheRow {
  std::string dataset_checksum;
  std::size_t instance_index = 0;
  std::string method;
  double cost = 0;
};

inline void write_reference_cache(const std::string& path, const std::vector<CacheRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "dataset_checksum,instance_index,method,cost\n";
  for (const auto& r : rows)
    out << r.dataset_checksum << ',' << r.instance_index << ',' << r.method << ',' << format_g17(r.cost) << '\n';
}

inline std::vector<CacheRow> read_reference_cache(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::vector<CacheRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    std::istringstream ls(line);
    CacheRow r;
    std::string idx, cost;
    if (!std::getline(ls, r.dataset_checksum, ',') || !std::getline(ls, idx, ',') || !std::getline(ls, r.method, ',') ||
        !std::getline(ls, cost))
      throw ParseError("expected dataset_checksum,instance_index,method,cost", lineno);
    r.instance_index = std::stoull(idx);
    r.cost = std::stod(cost);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace r2e
