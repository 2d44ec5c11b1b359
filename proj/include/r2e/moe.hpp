#pragma once

// Sparse mixture-of-experts: linear router with Top-k (or sampled) gating,
// vanilla and residual-refined experts, an always-on shared expert, the
// importance/load balancing loss and expert usage analytics.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "r2e/errors.hpp"
#include "r2e/params.hpp"
#include "r2e/rng.hpp"
#include "r2e/tensor.hpp"

namespace r2e {

enum class ExpertKind { vanilla, r2e };
enum class GatingMode { topk, sampling };

inline std::string to_string(ExpertKind k) { return k == ExpertKind::vanilla ? "vanilla" : "r2e"; }
inline std::string to_string(GatingMode g) { return g == GatingMode::topk ? "topk" : "sampling"; }

inline ExpertKind expert_kind_from_string(const std::string& s) {
  if (s == "vanilla") return ExpertKind::vanilla;
  if (s == "r2e") return ExpertKind::r2e;
  throw ConfigError("expert_kind must be vanilla or r2e, got '" + s + "'");
}

inline GatingMode gating_from_string(const std::string& s) {
  if (s == "topk") return GatingMode::topk;
  if (s == "sampling") return GatingMode::sampling;
  throw ConfigError("gating must be topk or sampling, got '" + s + "'");
}

struct MoEConfig {
  int m = 8;
  int k = 3;
  ExpertKind expert_kind = ExpertKind::r2e;
  int int_dim = 128;
  bool shared_expert = true;
  GatingMode gating = GatingMode::topk;

  void validate() const {
    if (m < 1) throw ConfigError("moe.m must be at least 1");
    if (k < 1 || k > m) throw ConfigError("moe.k must satisfy 1 <= k <= m");
    if (int_dim < 1) throw ConfigError("moe.int_dim must be at least 1");
  }
};

struct GateDecision {
  std::vector<int> selected;
  std::vector<double> weights;
  std::vector<double> raw_probs;
};

// Expert indices for one unit. Top-k keeps the largest probabilities (lower
// index wins ties); sampling draws k distinct experts without replacement,
// renormalizing after every draw.
inline std::vector<int> select_experts(const std::vector<double>& probs, int k, GatingMode mode, Rng* rng) {
  const int m = static_cast<int>(probs.size());
  if (k < 1 || k > m) throw ContractError("select_experts: k out of range");
  std::vector<int> idx(static_cast<std::size_t>(m));
  std::iota(idx.begin(), idx.end(), 0);
  if (mode == GatingMode::topk) {
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
    });
    idx.resize(static_cast<std::size_t>(k));
    return idx;
  }
  if (!rng) throw ContractError("sampling gating requires a random stream");
  std::vector<double> w = probs;
  std::vector<int> out;
  for (int draw = 0; draw < k; ++draw) {
    double total = 0;
    for (double v : w) total += v;
    std::size_t pick;
    if (total > 0) {
      pick = rng->categorical(w);
    } else {  // remaining mass underflowed; take the lowest unused index
      pick = 0;
      while (std::find(out.begin(), out.end(), static_cast<int>(pick)) != out.end()) ++pick;
    }
    out.push_back(static_cast<int>(pick));
    w[pick] = 0;
  }
  return out;
}

// Gate output for a batch of routed units.
template <typename Real>
struct Routing {
  Tensor<Real> raw_probs;  // [units x m]
  Tensor<Real> weights;    // [units x k], renormalized over the selected set
  std::vector<std::vector<int>> selected;

  std::size_t units() const { return selected.size(); }

  std::vector<GateDecision> decisions() const {
    std::vector<GateDecision> out(units());
    const std::size_t m = raw_probs.cols(), k = weights.cols();
    for (std::size_t u = 0; u < units(); ++u) {
      out[u].selected = selected[u];
      for (std::size_t s = 0; s < k; ++s) out[u].weights.push_back(static_cast<double>(weights(u, s)));
      for (std::size_t j = 0; j < m; ++j) out[u].raw_probs.push_back(static_cast<double>(raw_probs(u, j)));
    }
    return out;
  }
};

struct ExpertParams {
  Linear up;
  Linear down;
  std::optional<Linear> refine;

  template <typename Real>
  static ExpertParams make(ParamStore<Real>& store, const std::string& name, std::size_t d, std::size_t int_dim,
                           ExpertKind kind) {
    ExpertParams p;
    p.up = Linear::make(store, name + ".up", d, int_dim, true);
    p.down = Linear::make(store, name + ".down", int_dim, d, true);
    if (kind == ExpertKind::r2e) p.refine = Linear::make(store, name + ".refine", d, d, true);
    return p;
  }
};

// vanilla: down(relu(up(x)));  r2e: down(silu(up(x))) + refine(x)
template <typename Real>
Tensor<Real> expert_forward(Binder<Real>& b, const ExpertParams& p, const Tensor<Real>& x, ExpertKind kind) {
  auto h = p.up(b, x);
  h = kind == ExpertKind::vanilla ? relu(h) : silu(h);
  auto y = p.down(b, h);
  if (kind == ExpertKind::r2e) {
    if (!p.refine) throw ContractError("r2e expert without refinement branch");
    y = add(y, (*p.refine)(b, x));
  }
  return y;
}

struct MoELayer {
  MoEConfig cfg;
  std::size_t router = 0;  // [d x m], no bias
  std::vector<ExpertParams> experts;
  std::optional<ExpertParams> shared;

  template <typename Real>
  static MoELayer make(ParamStore<Real>& store, const std::string& name, std::size_t d, const MoEConfig& cfg) {
    cfg.validate();
    MoELayer l;
    l.cfg = cfg;
    l.router = store.add(name + ".router.weight", d, static_cast<std::size_t>(cfg.m));
    for (int j = 0; j < cfg.m; ++j)
      l.experts.push_back(ExpertParams::make(store, name + ".expert" + std::to_string(j), d,
                                             static_cast<std::size_t>(cfg.int_dim), cfg.expert_kind));
    if (cfg.shared_expert)
      l.shared = ExpertParams::make(store, name + ".shared", d, static_cast<std::size_t>(cfg.int_dim), cfg.expert_kind);
    return l;
  }
};

// raw_probs = softmax(x W_router); keep k experts per unit and renormalize.
template <typename Real>
Routing<Real> route(Binder<Real>& b, const MoELayer& layer, const Tensor<Real>& x, Rng* rng = nullptr) {
  const auto& cfg = layer.cfg;
  if (cfg.gating == GatingMode::sampling && !rng) throw ContractError("sampling gating requires a random stream");
  Routing<Real> r;
  r.raw_probs = softmax_rows(matmul(x, b(layer.router)));
  const std::size_t units = x.rows(), m = static_cast<std::size_t>(cfg.m);
  r.selected.resize(units);
  std::vector<double> row(m);
  for (std::size_t u = 0; u < units; ++u) {
    for (std::size_t j = 0; j < m; ++j) row[j] = static_cast<double>(r.raw_probs(u, j));
    r.selected[u] = select_experts(row, cfg.k, cfg.gating, rng);
  }
  r.weights = renormalize_selected(r.raw_probs, r.selected);
  return r;
}

// out = E_sh(x) + sum_{j in K} w_j E_j(x), evaluating only selected experts.
// A routing with a single unit is shared by every row of x (instance routing).
template <typename Real>
Tensor<Real> moe_forward(Binder<Real>& b, const MoELayer& layer, const Tensor<Real>& x, const Routing<Real>& gates) {
  const std::size_t rows = x.rows();
  const bool broadcast = gates.units() == 1 && rows != 1;
  if (!broadcast && gates.units() != rows) throw DimensionError("moe_forward: one gate decision per row required");
  const ExpertKind kind = layer.cfg.expert_kind;
  std::vector<Tensor<Real>> parts;
  if (layer.shared) parts.push_back(expert_forward(b, *layer.shared, x, kind));
  for (std::size_t j = 0; j < layer.experts.size(); ++j) {
    std::vector<std::size_t> units, slots;
    for (std::size_t u = 0; u < gates.units(); ++u)
      for (std::size_t s = 0; s < gates.selected[u].size(); ++s)
        if (gates.selected[u][s] == static_cast<int>(j)) {
          units.push_back(u);
          slots.push_back(s);
        }
    if (units.empty()) continue;
    if (broadcast) {
      auto w = pick(gates.weights, units, slots);  // [1 x 1]
      parts.push_back(scale_rows(expert_forward(b, layer.experts[j], x, kind), w));
    } else if (units.size() == rows) {
      auto w = pick(gates.weights, units, slots);
      parts.push_back(scale_rows(expert_forward(b, layer.experts[j], x, kind), w));
    } else {
      auto xs = gather_rows(x, units);
      auto w = pick(gates.weights, units, slots);
      auto y = scale_rows(expert_forward(b, layer.experts[j], xs, kind), w);
      parts.push_back(scatter_rows(y, units, rows));
    }
  }
  if (parts.empty()) throw ContractError("moe_forward: no expert was evaluated");
  Tensor<Real> out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out = add(out, parts[i]);
  return out;
}

// m * sum_j p_j f_j with p the mean routing probability (differentiable) and
// f the selection frequency normalized by I*k (constant).
template <typename Real>
Tensor<Real> load_balance_loss(const Tensor<Real>& raw_probs, const std::vector<std::vector<int>>& selections, int k) {
  const std::size_t units = raw_probs.rows(), m = raw_probs.cols();
  if (units == 0) throw ContractError("load_balance_loss needs at least one routed unit");
  if (selections.size() != units) throw DimensionError("load_balance_loss: one selection per unit required");
  Matrix<Real> f(1, m);
  for (const auto& sel : selections) {
    if (static_cast<int>(sel.size()) != k) throw ContractError("load_balance_loss: each selection must hold k experts");
    for (int j : sel) f.data[static_cast<std::size_t>(j)] += Real(1);
  }
  for (auto& v : f.data) v /= static_cast<Real>(units * static_cast<std::size_t>(k));
  Graph<Real>& g = *raw_probs.graph;
  auto importance = mean_rows(raw_probs);
  return scale(sum(mul(importance, g.constant(std::move(f)))), static_cast<Real>(m));
}

inline std::vector<std::uint64_t> usage_histogram(const std::vector<GateDecision>& decisions, int m) {
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(m), 0);
  for (const auto& d : decisions)
    for (int j : d.selected) {
      if (j < 0 || j >= m) throw ContractError("usage_histogram: expert index out of range");
      ++counts[static_cast<std::size_t>(j)];
    }
  return counts;
}

struct UsageRow {
  std::string distribution;
  std::vector<std::uint64_t> counts;
};

// CSV `distribution,expert_index,count,frequency`; frequency sums to 1 per distribution.
inline void write_usage_csv(const std::string& path, const std::vector<UsageRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "distribution,expert_index,count,frequency\n";
  for (const auto& r : rows) {
    std::uint64_t total = 0;
    for (auto c : r.counts) total += c;
    for (std::size_t j = 0; j < r.counts.size(); ++j) {
      const double freq = total ? static_cast<double>(r.counts[j]) / static_cast<double>(total) : 0.0;
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", freq);
      out << r.distribution << ',' << j << ',' << r.counts[j] << ',' << buf << '\n';
    }
  }
}

}  // namespace r2e
