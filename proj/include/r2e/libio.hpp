#pragma once

// TSPLIB / CVRPLIB (EUC_2D) parsing, unit-square normalization and
// integer-rounded benchmark costing.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "r2e/env.hpp"
#include "r2e/errors.hpp"
#include "r2e/instance.hpp"

namespace r2e {

struct LibHeader {
  std::string name;
  Problem type = Problem::tsp;
  std::size_t dimension = 0;
  std::string edge_weight_type;
  double capacity = 0;
};

struct LibDocument {
  LibHeader header;
  std::vector<Point> coords;   // raw coordinates, depot first for CVRP
  std::vector<double> demands; // raw demands for customers (CVRP)
  std::size_t depot_index = 0; // original 0-based index of the depot
};

namespace detail {

inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c); };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

inline std::string upper(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), ::toupper);
  return s;
}

inline bool starts_numeric(const std::string& s) {
  return !s.empty() && (std::isdigit(static_cast<unsigned char>(s[0])) || s[0] == '-' || s[0] == '+' || s[0] == '.');
}

}  // namespace detail

inline LibDocument parse_lib(std::istream& in) {
  LibDocument doc;
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(detail::trim(l));

  bool have_dim = false, have_type = false, have_coords = false, have_demands = false, have_depot = false;
  std::map<long long, Point> coord_by_id;
  std::vector<long long> coord_order;
  std::map<long long, double> demand_by_id;
  long long depot_id = -1;

  std::size_t i = 0;
  auto read_section = [&](std::size_t start, auto&& on_row) -> std::size_t {
    std::size_t j = start;
    while (j < lines.size() && detail::starts_numeric(lines[j])) {
      on_row(lines[j], j + 1);
      ++j;
    }
    return j;
  };

  while (i < lines.size()) {
    const std::string& line = lines[i];
    if (line.empty()) {
      ++i;
      continue;
    }
    const std::string key_up = detail::upper(line);
    if (key_up.rfind("NODE_COORD_SECTION", 0) == 0) {
      if (!have_dim) throw ParseError("NODE_COORD_SECTION before DIMENSION", i + 1);
      const std::size_t section_line = i + 1;
      std::size_t end = read_section(i + 1, [&](const std::string& row, std::size_t ln) {
        std::istringstream rs(row);
        long long id;
        double x, y;
        if (!(rs >> id >> x >> y)) throw ParseError("malformed coordinate row", ln);
        if (coord_by_id.count(id)) throw ParseError("duplicate node id " + std::to_string(id), ln);
        coord_by_id[id] = {x, y};
        coord_order.push_back(id);
      });
      if (coord_order.size() != doc.header.dimension)
        throw ParseError("NODE_COORD_SECTION has " + std::to_string(coord_order.size()) + " rows, DIMENSION is " +
                             std::to_string(doc.header.dimension),
                         end < lines.size() ? end + 1 : section_line);
      have_coords = true;
      i = end;
      continue;
    }
    if (key_up.rfind("DEMAND_SECTION", 0) == 0) {
      if (!have_dim) throw ParseError("DEMAND_SECTION before DIMENSION", i + 1);
      const std::size_t section_line = i + 1;
      std::size_t count = 0;
      std::size_t end = read_section(i + 1, [&](const std::string& row, std::size_t ln) {
        std::istringstream rs(row);
        long long id;
        double d;
        if (!(rs >> id >> d)) throw ParseError("malformed demand row", ln);
        demand_by_id[id] = d;
        ++count;
      });
      if (count != doc.header.dimension)
        throw ParseError("DEMAND_SECTION has " + std::to_string(count) + " rows, DIMENSION is " +
                             std::to_string(doc.header.dimension),
                         end < lines.size() ? end + 1 : section_line);
      have_demands = true;
      i = end;
      continue;
    }
    if (key_up.rfind("DEPOT_SECTION", 0) == 0) {
      std::size_t j = i + 1;
      for (; j < lines.size(); ++j) {
        if (lines[j].empty()) continue;
        if (!detail::starts_numeric(lines[j])) break;
        long long id = std::stoll(lines[j]);
        if (id == -1) {
          ++j;
          break;
        }
        if (depot_id != -1) throw ParseError("multiple depots are not supported", j + 1);
        depot_id = id;
      }
      if (depot_id == -1) throw ParseError("DEPOT_SECTION lists no depot", i + 1);
      have_depot = true;
      i = j;
      continue;
    }
    if (key_up == "EOF") break;
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
      if (detail::starts_numeric(line)) throw ParseError("unexpected data row outside a section", i + 1);
      throw ParseError("unrecognized line '" + line + "'", i + 1);
    }
    const std::string key = detail::upper(detail::trim(line.substr(0, colon)));
    const std::string value = detail::trim(line.substr(colon + 1));
    if (key == "NAME") {
      doc.header.name = value;
    } else if (key == "TYPE") {
      const std::string t = detail::upper(value);
      if (t == "TSP")
        doc.header.type = Problem::tsp;
      else if (t == "CVRP")
        doc.header.type = Problem::cvrp;
      else
        throw UnsupportedFormat("unsupported TYPE " + value);
      have_type = true;
    } else if (key == "DIMENSION") {
      try {
        doc.header.dimension = static_cast<std::size_t>(std::stoull(value));
      } catch (const std::exception&) {
        throw ParseError("invalid DIMENSION '" + value + "'", i + 1);
      }
      if (doc.header.dimension < 2) throw ParseError("DIMENSION must be at least 2", i + 1);
      have_dim = true;
    } else if (key == "EDGE_WEIGHT_TYPE") {
      doc.header.edge_weight_type = detail::upper(value);
      if (doc.header.edge_weight_type != "EUC_2D")
        throw UnsupportedFormat("unsupported EDGE_WEIGHT_TYPE " + value + " (only EUC_2D)");
    } else if (key == "CAPACITY") {
      try {
        doc.header.capacity = std::stod(value);
      } catch (const std::exception&) {
        throw ParseError("invalid CAPACITY '" + value + "'", i + 1);
      }
    }
    ++i;
  }

  if (!have_type) throw ParseError("missing TYPE", lines.size());
  if (!have_dim) throw ParseError("missing DIMENSION", lines.size());
  if (doc.header.edge_weight_type.empty()) throw ParseError("missing EDGE_WEIGHT_TYPE", lines.size());
  if (!have_coords) throw ParseError("missing NODE_COORD_SECTION", lines.size());

  if (doc.header.type == Problem::tsp) {
    for (long long id : coord_order) doc.coords.push_back(coord_by_id[id]);
    return doc;
  }
  if (!(doc.header.capacity > 0)) throw ParseError("CVRP requires a positive CAPACITY", lines.size());
  if (!have_demands) throw ParseError("missing DEMAND_SECTION", lines.size());
  if (!have_depot) throw ParseError("missing DEPOT_SECTION", lines.size());
  if (!coord_by_id.count(depot_id)) throw ParseError("depot id " + std::to_string(depot_id) + " has no coordinates", lines.size());
  doc.coords.push_back(coord_by_id[depot_id]);
  for (std::size_t k = 0; k < coord_order.size(); ++k) {
    const long long id = coord_order[k];
    if (id == depot_id) {
      doc.depot_index = k;
      continue;
    }
    if (!demand_by_id.count(id)) throw ParseError("node " + std::to_string(id) + " has no demand", lines.size());
    const double d = demand_by_id[id];
    if (!(d > 0) || d > doc.header.capacity)
      throw ParseError("node " + std::to_string(id) + " demand must lie in (0, capacity]", lines.size());
    doc.coords.push_back(coord_by_id[id]);
    doc.demands.push_back(d);
  }
  return doc;
}

inline LibDocument parse_lib(const std::string& text) {
  std::istringstream in(text);
  return parse_lib(in);
}

inline LibDocument parse_lib_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  return parse_lib(in);
}

// TSPLIB nint of the Euclidean distance.
inline long long euc2d_distance(const Point& a, const Point& b) {
  return static_cast<long long>(std::floor(distance(a, b) + 0.5));
}

struct ScaleRecord {
  double min_x = 0;
  double min_y = 0;
  double scale = 1;

  Point to_original(const Point& p) const { return {p.x * scale + min_x, p.y * scale + min_y}; }
};

struct Normalized {
  std::vector<Point> coords;
  ScaleRecord scale;
};

// Aspect-preserving min-max scaling by the larger axis range.
inline Normalized normalize_unit_square(const std::vector<Point>& raw) {
  if (raw.size() < 2) throw ContractError("normalize_unit_square needs at least two points");
  double minx = raw[0].x, maxx = raw[0].x, miny = raw[0].y, maxy = raw[0].y;
  for (const auto& p : raw) {
    minx = std::min(minx, p.x);
    maxx = std::max(maxx, p.x);
    miny = std::min(miny, p.y);
    maxy = std::max(maxy, p.y);
  }
  const double s = std::max(maxx - minx, maxy - miny);
  if (!(s > 0)) throw ContractError("degenerate instance: all points coincide");
  Normalized out;
  out.scale = {minx, miny, s};
  out.coords.reserve(raw.size());
  for (const auto& p : raw) out.coords.push_back({(p.x - minx) / s, (p.y - miny) / s});
  return out;
}

struct LibInstance {
  Instance instance;   // normalized, dist_label External
  LibDocument document;
  ScaleRecord scale;
};

inline LibInstance to_instance(const LibDocument& doc) {
  LibInstance li;
  li.document = doc;
  auto norm = normalize_unit_square(doc.coords);
  li.scale = norm.scale;
  li.instance.problem = doc.header.type;
  li.instance.coords = std::move(norm.coords);
  li.instance.dist_label = Distribution::external;
  if (doc.header.type == Problem::cvrp) {
    li.instance.capacity = doc.header.capacity;
    for (double d : doc.demands) li.instance.demands.push_back(d / doc.header.capacity);
  }
  return li;
}

// Integer cost of a tour on the original coordinates.
inline long long benchmark_cost(const LibDocument& doc, const std::vector<int>& tour) {
  if (tour.empty()) return 0;
  long long total = 0;
  for (std::size_t i = 1; i < tour.size(); ++i)
    total += euc2d_distance(doc.coords[static_cast<std::size_t>(tour[i - 1])], doc.coords[static_cast<std::size_t>(tour[i])]);
  if (doc.header.type == Problem::tsp)
    total += euc2d_distance(doc.coords[static_cast<std::size_t>(tour.back())], doc.coords[static_cast<std::size_t>(tour.front())]);
  return total;
}

inline double benchmark_gap(long long model_cost_raw, long long best_known) {
  if (best_known <= 0) throw ContractError("best-known cost must be positive");
  return static_cast<double>(model_cost_raw - best_known) / static_cast<double>(best_known);
}

// Coordinate section in TSPLIB layout (1-based ids, declared order).
inline std::string serialize_coord_section(const std::vector<Point>& coords) {
  std::ostringstream os;
  os << "NODE_COORD_SECTION\n";
  for (std::size_t i = 0; i < coords.size(); ++i)
    os << (i + 1) << ' ' << format_g17(coords[i].x) << ' ' << format_g17(coords[i].y) << '\n';
  return os.str();
}

}  // namespace r2e
