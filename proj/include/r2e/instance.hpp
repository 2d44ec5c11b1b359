#pragma once

// Routing instances and the seven spatial distribution families.

#include <algorithm>
#include <cctype>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "r2e/errors.hpp"
#include "r2e/rng.hpp"

namespace r2e {

enum class Problem { tsp, cvrp };

enum class Distribution { uniform, cluster, mixed, explosion, expansion, grid, implosion, external };

inline constexpr std::array<Distribution, 7> kSyntheticFamilies = {
    Distribution::uniform,   Distribution::cluster, Distribution::mixed,    Distribution::explosion,
    Distribution::expansion, Distribution::grid,    Distribution::implosion};

// Training distributions; their order fixes the class index of each label.
inline constexpr std::array<Distribution, 3> kTrainFamilies = {Distribution::uniform, Distribution::cluster,
                                                               Distribution::mixed};

inline std::string to_string(Problem p) { return p == Problem::tsp ? "TSP" : "CVRP"; }

inline Problem problem_from_string(std::string_view s) {
  std::string u(s);
  std::transform(u.begin(), u.end(), u.begin(), ::toupper);
  if (u == "TSP") return Problem::tsp;
  if (u == "CVRP") return Problem::cvrp;
  throw ConfigError("unknown problem '" + std::string(s) + "' (valid: TSP, CVRP)");
}

inline std::string to_string(Distribution d) {
  switch (d) {
    case Distribution::uniform: return "Uniform";
    case Distribution::cluster: return "Cluster";
    case Distribution::mixed: return "Mixed";
    case Distribution::explosion: return "Explosion";
    case Distribution::expansion: return "Expansion";
    case Distribution::grid: return "Grid";
    case Distribution::implosion: return "Implosion";
    case Distribution::external: return "External";
  }
  return "?";
}

inline std::string valid_family_list() {
  return "uniform, cluster, mixed, explosion, expansion, grid, implosion, external";
}

inline Distribution distribution_from_string(std::string_view s) {
  std::string l(s);
  std::transform(l.begin(), l.end(), l.begin(), ::tolower);
  for (auto d : {Distribution::uniform, Distribution::cluster, Distribution::mixed, Distribution::explosion,
                 Distribution::expansion, Distribution::grid, Distribution::implosion, Distribution::external}) {
    std::string n = to_string(d);
    std::transform(n.begin(), n.end(), n.begin(), ::tolower);
    if (n == l) return d;
  }
  throw ConfigError("unknown distribution family '" + std::string(s) + "' (valid: " + valid_family_list() + ")");
}

// Class index among the training families, or nullopt for OoD labels.
inline std::optional<int> class_index(Distribution d) {
  for (std::size_t i = 0; i < kTrainFamilies.size(); ++i)
    if (kTrainFamilies[i] == d) return static_cast<int>(i);
  return std::nullopt;
}

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

// TSP: coords holds the n cities. CVRP: coords[0] is the depot followed by n
// customers; demands[i] belongs to node i + 1 and is normalized by capacity.
struct Instance {
  Problem problem = Problem::tsp;
  std::vector<Point> coords;
  std::vector<double> demands;
  double capacity = 0;
  Distribution dist_label = Distribution::uniform;
  std::uint64_t seed = 0;

  std::size_t node_count() const { return coords.size(); }
  std::size_t customers() const { return problem == Problem::cvrp ? coords.size() - 1 : coords.size(); }
  // Normalized demand of a node (0 for the depot and for TSP nodes).
  double demand(std::size_t node) const {
    if (problem != Problem::cvrp || node == 0) return 0.0;
    return demands[node - 1];
  }

  friend bool operator==(const Instance&, const Instance&) = default;
};

struct ClusterParams {
  int min_centers = 3;
  int max_centers = 8;
  double sigma = 0.07;
};

struct MutationParams {
  double radius = 0.3;
  double rate = 10.0;             // explosion offset ~ Exp(rate)
  double contraction = 0.25;      // implosion factor
  double push = 0.2;              // expansion offset
};

struct GridParams {
  double fraction = 0.7;
  int resolution = 0;  // 0: ceil(sqrt(n))
};

struct DistributionSpec {
  Distribution family = Distribution::uniform;
  int n = 20;
  ClusterParams cluster;
  MutationParams mutation;
  GridParams grid;

  void validate() const {
    if (family == Distribution::external) throw ConfigError("External instances are not generated");
    if (n < 2) throw ConfigError("n must be at least 2, got " + std::to_string(n));
    if (cluster.min_centers < 1 || cluster.max_centers < cluster.min_centers)
      throw ConfigError("cluster center range is invalid");
    if (!(cluster.sigma > 0)) throw ConfigError("cluster sigma must be positive");
    // radius 0 is accepted as a degenerate (identity) mutation
    if (!(mutation.radius >= 0 && mutation.radius <= 0.5)) throw ConfigError("mutation radius must lie in [0, 0.5]");
    if (!(mutation.rate > 0)) throw ConfigError("explosion rate must be positive");
    if (!(mutation.contraction > 0 && mutation.contraction <= 1)) throw ConfigError("contraction must lie in (0, 1]");
    if (!(mutation.push >= 0)) throw ConfigError("expansion push must be non-negative");
    if (!(grid.fraction >= 0 && grid.fraction <= 1)) throw ConfigError("grid fraction must lie in [0, 1]");
    if (grid.resolution == 1 || grid.resolution < 0) throw ConfigError("grid resolution must be 0 (auto) or >= 2");
  }

  int grid_resolution() const {
    if (grid.resolution > 0) return grid.resolution;
    return std::max(2, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n)))));
  }
};

// Capacity for n customers (30/40/50 at n = 20/50/100, piecewise linear, extended
// linearly beyond the anchors) and integer demands uniform on {1..9}.
struct DemandProfile {
  double capacity = 0;
  static constexpr int kMinDemand = 1;
  static constexpr int kMaxDemand = 9;

  int sample(Rng& rng) const { return static_cast<int>(rng.uniform_int(kMinDemand, kMaxDemand)); }
};

inline DemandProfile demand_profile(int n) {
  if (n < 1) throw ConfigError("demand profile needs n >= 1");
  double q;
  if (n <= 50)
    q = 30.0 + (n - 20) * (10.0 / 30.0);
  else
    q = 40.0 + (n - 50) * (10.0 / 50.0);
  return DemandProfile{std::max(q, static_cast<double>(DemandProfile::kMaxDemand))};
}

namespace detail {

inline bool inside_unit(const Point& p) { return p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0; }

inline Point uniform_point(Rng& rng) { return {rng.uniform(), rng.uniform()}; }

inline std::vector<Point> uniform_points(int count, Rng& rng) {
  std::vector<Point> pts(static_cast<std::size_t>(count));
  for (auto& p : pts) p = uniform_point(rng);
  return pts;
}

inline std::vector<Point> cluster_points(int count, const ClusterParams& cp, Rng& rng) {
  const auto centers_n = static_cast<int>(rng.uniform_int(cp.min_centers, cp.max_centers));
  std::vector<Point> centers = uniform_points(centers_n, rng);
  std::vector<Point> pts(static_cast<std::size_t>(count));
  for (auto& p : pts) {
    const Point& c = centers[static_cast<std::size_t>(rng.uniform_int(0, centers_n - 1))];
    do p = {c.x + cp.sigma * rng.normal(), c.y + cp.sigma * rng.normal()};
    while (!inside_unit(p));
  }
  return pts;
}

inline Point unit_vector(const Point& from, const Point& to, Rng& rng) {
  const double dx = to.x - from.x, dy = to.y - from.y;
  const double len = std::hypot(dx, dy);
  if (len > 0) return {dx / len, dy / len};
  const double a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  return {std::cos(a), std::sin(a)};
}

inline void explode(std::vector<Point>& pts, const MutationParams& mp, Rng& rng) {
  const Point c = uniform_point(rng);
  for (auto& p : pts) {
    if (distance(p, c) >= mp.radius) continue;
    const Point u = unit_vector(c, p, rng);
    Point q;
    int tries = 0;
    do {
      const double r = mp.radius + rng.exponential(mp.rate);
      q = {c.x + r * u.x, c.y + r * u.y};
    } while (!inside_unit(q) && ++tries < 1000);
    if (inside_unit(q)) p = q;
  }
}

inline void implode(std::vector<Point>& pts, const MutationParams& mp, Rng& rng) {
  const Point c = uniform_point(rng);
  for (auto& p : pts)
    if (distance(p, c) < mp.radius) p = {c.x + mp.contraction * (p.x - c.x), c.y + mp.contraction * (p.y - c.y)};
}

inline void expand(std::vector<Point>& pts, const MutationParams& mp, Rng& rng) {
  const Point c = uniform_point(rng);
  auto push = [&](const Point& p) {
    const Point u = unit_vector(c, p, rng);
    const double r = std::min(1.0, distance(p, c) + mp.push);
    return Point{c.x + r * u.x, c.y + r * u.y};
  };
  for (auto& p : pts) {
    Point q = push(p);
    int tries = 0;
    while (!inside_unit(q) && ++tries < 1000) q = push(uniform_point(rng));
    if (inside_unit(q)) p = q;
  }
}

inline void snap_to_grid(std::vector<Point>& pts, const DistributionSpec& spec, Rng& rng) {
  const int g = spec.grid_resolution();
  const auto snapped = static_cast<std::size_t>(std::floor(spec.grid.fraction * static_cast<double>(pts.size())));
  const double step = static_cast<double>(g - 1);
  for (std::size_t i = 0; i < snapped; ++i) {
    const double ix = std::round(pts[i].x * step), iy = std::round(pts[i].y * step);
    pts[i] = {ix / step, iy / step};
  }
  rng.shuffle(pts);
}

}  // namespace detail

// Customer (or city) coordinates for one family.
inline std::vector<Point> generate_points(const DistributionSpec& spec, Rng& rng) {
  const int n = spec.n;
  switch (spec.family) {
    case Distribution::uniform: return detail::uniform_points(n, rng);
    case Distribution::cluster: return detail::cluster_points(n, spec.cluster, rng);
    case Distribution::mixed: {
      auto pts = detail::uniform_points((n + 1) / 2, rng);
      auto cl = detail::cluster_points(n / 2, spec.cluster, rng);
      pts.insert(pts.end(), cl.begin(), cl.end());
      rng.shuffle(pts);
      return pts;
    }
    case Distribution::explosion: {
      auto pts = detail::uniform_points(n, rng);
      detail::explode(pts, spec.mutation, rng);
      return pts;
    }
    case Distribution::implosion: {
      auto pts = detail::uniform_points(n, rng);
      detail::implode(pts, spec.mutation, rng);
      return pts;
    }
    case Distribution::expansion: {
      auto pts = detail::uniform_points(n, rng);
      detail::expand(pts, spec.mutation, rng);
      return pts;
    }
    case Distribution::grid: {
      auto pts = detail::uniform_points(n, rng);
      detail::snap_to_grid(pts, spec, rng);
      return pts;
    }
    case Distribution::external: break;
  }
  throw ConfigError("cannot generate family " + to_string(spec.family));
}

inline Instance generate_instance(const DistributionSpec& spec, Problem problem, std::uint64_t seed) {
  spec.validate();
  Rng root(seed);
  Instance inst;
  inst.problem = problem;
  inst.dist_label = spec.family;
  inst.seed = seed;
  Rng coord_rng = root.split(1);
  if (problem == Problem::cvrp) {
    Rng depot_rng = root.split(0);
    inst.coords.push_back(detail::uniform_point(depot_rng));
  }
  auto pts = generate_points(spec, coord_rng);
  inst.coords.insert(inst.coords.end(), pts.begin(), pts.end());
  if (problem == Problem::cvrp) {
    const DemandProfile prof = demand_profile(spec.n);
    Rng demand_rng = root.split(2);
    inst.capacity = prof.capacity;
    inst.demands.resize(static_cast<std::size_t>(spec.n));
    for (auto& d : inst.demands) d = prof.sample(demand_rng) / prof.capacity;
  }
  return inst;
}

// ---------------------------------------------------------------------------
// JSONL dataset format
// ---------------------------------------------------------------------------

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string to_jsonl(const Instance& inst) {
  std::ostringstream os;
  os << "{\"problem\":\"" << to_string(inst.problem) << "\",\"n\":" << inst.customers() << ",\"coords\":[";
  for (std::size_t i = 0; i < inst.coords.size(); ++i) {
    if (i) os << ',';
    os << '[' << format_g17(inst.coords[i].x) << ',' << format_g17(inst.coords[i].y) << ']';
  }
  os << ']';
  if (inst.problem == Problem::cvrp) {
    os << ",\"demands\":[";
    for (std::size_t i = 0; i < inst.demands.size(); ++i) {
      if (i) os << ',';
      os << format_g17(inst.demands[i]);
    }
    os << "],\"capacity\":" << format_g17(inst.capacity);
  } else {
    os << ",\"capacity\":null";
  }
  os << ",\"dist_label\":\"" << to_string(inst.dist_label) << "\",\"seed\":" << inst.seed << '}';
  return os.str();
}

inline Instance from_jsonl(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), 1);
  }
  Instance inst;
  try {
    inst.problem = problem_from_string(j.at("problem").get<std::string>());
    for (const auto& c : j.at("coords")) inst.coords.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    if (inst.problem == Problem::cvrp) {
      inst.demands = j.at("demands").get<std::vector<double>>();
      inst.capacity = j.at("capacity").get<double>();
    }
    inst.dist_label = distribution_from_string(j.at("dist_label").get<std::string>());
    inst.seed = j.at("seed").get<std::uint64_t>();
    const auto n = j.at("n").get<std::size_t>();
    if (n != inst.customers()) throw ConfigError("field n disagrees with coordinate count");
    if (inst.problem == Problem::cvrp && inst.demands.size() != n) throw ConfigError("demand count differs from n");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid instance record: ") + e.what());
  }
  return inst;
}

// FNV-1a over bytes, rendered as 16 hex digits.
inline std::string checksum_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return checksum_hex(ss.str());
}

struct DatasetSummary {
  std::size_t count = 0;
  std::string checksum;
};

inline DatasetSummary write_dataset(const std::vector<Instance>& instances, const std::string& path) {
  std::string body;
  for (const auto& inst : instances) body += to_jsonl(inst) + "\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << body;
  if (!out) throw IoError("write failed for " + path);
  return {instances.size(), checksum_hex(body)};
}

// Instance i uses the seed derived from (seed, i).
inline std::uint64_t dataset_instance_seed(std::uint64_t seed, std::size_t index) {
  return mix64(seed ^ mix64(index + 0x51ed270b27a3f1c7ULL));
}

inline std::vector<Instance> generate_instances(const DistributionSpec& spec, Problem problem, std::size_t count,
                                                std::uint64_t seed) {
  std::vector<Instance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_instance(spec, problem, dataset_instance_seed(seed, i)));
  return out;
}

inline DatasetSummary generate_dataset(const DistributionSpec& spec, Problem problem, std::size_t count,
                                       std::uint64_t seed, const std::string& path) {
  if (count < 1) throw ConfigError("dataset count must be at least 1");
  return write_dataset(generate_instances(spec, problem, count, seed), path);
}

inline std::vector<Instance> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::vector<Instance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(from_jsonl(line));
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

}  // namespace r2e
