#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "r2e/checkpoint.hpp"
#include "r2e/config.hpp"
#include "r2e/env.hpp"
#include "r2e/gradcheck.hpp"
#include "r2e/libio.hpp"
#include "r2e/moe.hpp"
#include "r2e/oracle.hpp"
#include "r2e/policy.hpp"
#include "r2e/train.hpp"

using namespace r2e;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << v;
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / "r2e_acceptance" / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void randomize(ParamStore<double>& store, Rng& rng, double scale) {
  for (std::size_t i = 0; i < store.size(); ++i)
    for (auto& v : store.value(i).data) v = scale * rng.uniform(-1, 1);
}

Matrix<double> random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix<double> m(r, c);
  for (auto& v : m.data) v = rng.uniform(-1, 1);
  return m;
}

Instance make_instance(Distribution family, Problem p, int n, std::uint64_t seed) {
  DistributionSpec s;
  s.family = family;
  s.n = n;
  return generate_instance(s, p, seed);
}

std::vector<Instance> held_out(Distribution family, int n, std::size_t count, std::uint64_t seed) {
  DistributionSpec s;
  s.family = family;
  s.n = n;
  return generate_instances(s, Problem::tsp, count, seed);
}

std::vector<double> exact_costs(const std::vector<Instance>& insts) {
  std::vector<double> out(insts.size());
  parallel_for(insts.size(), 0, [&](std::size_t i) { out[i] = held_karp_tsp(insts[i]).cost; });
  return out;
}

// Shared between the training criteria.
struct DeskRuns {
  std::optional<TrainResult<double>> mixed;
  std::optional<TrainResult<double>> uniform_only;
};
DeskRuns desk;

Policy<double> policy_from(const TrainConfig& cfg, const ParamStore<double>& params) {
  Policy<double> p(cfg.policy);
  p.params() = params;
  return p;
}

Outcome gradcheck() {
  std::string detail;
  double worst = 0;
  for (auto prob : {Problem::tsp, Problem::cvrp}) {
    auto cfg = preset("tiny");
    cfg.policy.problem = prob;
    auto rep = total_loss_grad_check(cfg);
    worst = std::max(worst, rep.max_error);
    detail += (prob == Problem::tsp ? "tsp " : "cvrp ") + fmt(rep.max_error) + " (" + rep.worst_block + ") ";
  }
  return {worst <= 1e-4, "max rel error " + detail};
}

Outcome balance_closed_forms() {
  double worst_uniform = 0, worst_collapsed = 0;
  for (int m : {2, 3, 4, 8, 16})
    for (int k = 1; k <= m; ++k)
      for (std::size_t units : {std::size_t(m), std::size_t(3 * m), std::size_t(64 * m)}) {
        // Uniform probabilities and a perfectly balanced round-robin selection.
        Graph<double> g(false);
        Matrix<double> probs(units, static_cast<std::size_t>(m));
        std::fill(probs.data.begin(), probs.data.end(), 1.0 / m);
        std::vector<std::vector<int>> sel(units);
        for (std::size_t u = 0; u < units; ++u)
          for (int s = 0; s < k; ++s) sel[u].push_back(static_cast<int>((u * static_cast<std::size_t>(k) + s) % m));
        bool distinct = true;
        for (const auto& s : sel) distinct &= std::set<int>(s.begin(), s.end()).size() == s.size();
        if (!distinct) continue;
        worst_uniform = std::max(worst_uniform, std::abs(load_balance_loss(g.constant(probs), sel, k).item() - 1.0));
      }
  for (int m : {2, 4, 8, 16})
    for (std::size_t units : {1u, 7u, 100u}) {
      Graph<double> g(false);
      Matrix<double> probs(units, static_cast<std::size_t>(m));
      for (std::size_t u = 0; u < units; ++u) probs(u, 0) = 1.0;
      std::vector<std::vector<int>> sel(units, std::vector<int>{0});
      worst_collapsed =
          std::max(worst_collapsed, std::abs(load_balance_loss(g.constant(probs), sel, 1).item() - static_cast<double>(m)));
    }
  return {worst_uniform <= 1e-12 && worst_collapsed <= 1e-12,
          "uniform |LB-1| " + fmt(worst_uniform) + ", collapsed |LB-m| " + fmt(worst_collapsed)};
}

Outcome routing_invariants() {
  Rng rng(101);
  std::size_t bad = 0, total = 0;
  for (auto [m, k] : {std::pair{8, 3}, {4, 2}, {6, 1}, {5, 5}}) {
    ParamStore<double> store;
    auto layer = MoELayer::make(store, "moe", 6, MoEConfig{m, k, ExpertKind::r2e, 4, true});
    randomize(store, rng, 2.0);
    Graph<double> g(false);
    Binder<double> b(g, store);
    auto r = route(b, layer, g.constant(random_matrix(2500, 6, rng)));
    for (std::size_t u = 0; u < r.units(); ++u, ++total) {
      const auto& s = r.selected[u];
      std::set<int> uniq(s.begin(), s.end());
      double ws = 0, ps = 0, min_sel = 1, max_out = 0;
      bool positive = true;
      for (std::size_t i = 0; i < s.size(); ++i) {
        ws += r.weights(u, i);
        positive &= r.weights(u, i) > 0;
        min_sel = std::min(min_sel, r.raw_probs(u, static_cast<std::size_t>(s[i])));
      }
      for (int j = 0; j < m; ++j) {
        ps += r.raw_probs(u, static_cast<std::size_t>(j));
        if (!uniq.count(j)) max_out = std::max(max_out, r.raw_probs(u, static_cast<std::size_t>(j)));
      }
      const bool ok = static_cast<int>(uniq.size()) == k && positive && std::abs(ws - 1) <= 1e-9 &&
                      std::abs(ps - 1) <= 1e-9 && min_sel >= max_out;
      bad += !ok;
    }
  }
  return {bad == 0 && total == 10000, std::to_string(total) + " routings, " + std::to_string(bad) + " violations"};
}

Outcome moe_reductions() {
  Rng rng(202);
  double dense_err = 0, single_err = 0;
  {
    ParamStore<double> store;
    auto layer = MoELayer::make(store, "moe", 5, MoEConfig{4, 4, ExpertKind::r2e, 6, true});
    randomize(store, rng, 1.0);
    Graph<double> g(false);
    Binder<double> b(g, store);
    auto x = g.constant(random_matrix(1000, 5, rng));
    auto y = moe_forward(b, layer, x, route(b, layer, x));
    auto p = softmax_rows(matmul(x, b(layer.router)));
    auto ref = expert_forward(b, *layer.shared, x, ExpertKind::r2e).value();
    for (std::size_t j = 0; j < 4; ++j) {
      auto e = expert_forward(b, layer.experts[j], x, ExpertKind::r2e);
      for (std::size_t i = 0; i < 1000; ++i)
        for (std::size_t c = 0; c < 5; ++c) ref(i, c) += p(i, j) * e(i, c);
    }
    for (std::size_t i = 0; i < y.size(); ++i) dense_err = std::max(dense_err, std::abs(y.values()[i] - ref.data[i]));
  }
  {
    ParamStore<double> store;
    auto layer = MoELayer::make(store, "moe", 5, MoEConfig{1, 1, ExpertKind::r2e, 6, false});
    randomize(store, rng, 1.0);
    Graph<double> g(false);
    Binder<double> b(g, store);
    auto x = g.constant(random_matrix(1000, 5, rng));
    auto y = moe_forward(b, layer, x, route(b, layer, x));
    auto e = expert_forward(b, layer.experts[0], x, ExpertKind::r2e);
    for (std::size_t i = 0; i < y.size(); ++i) single_err = std::max(single_err, std::abs(y.values()[i] - e.values()[i]));
  }
  return {dense_err <= 1e-9 && single_err <= 1e-12,
          "k=m vs dense mixture " + fmt(dense_err) + ", m=k=1 vs lone expert " + fmt(single_err)};
}

Outcome cvrp_closure() {
  PolicyConfig pc;
  pc.problem = Problem::cvrp;
  pc.d = 16;
  pc.heads = 2;
  pc.enc_layers = 2;
  pc.moe = MoEConfig{4, 2, ExpertKind::r2e, 16, true};
  Policy<double> policy(pc);
  policy.init(5);
  struct Job {
    Distribution family;
    int n;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto f : kSyntheticFamilies)
    for (int n : {10, 20})
      for (std::uint64_t s = 0; s < 48; ++s) jobs.push_back({f, n, 1000 * static_cast<std::uint64_t>(n) + s});
  std::vector<std::size_t> tours(jobs.size()), bad(jobs.size());
  std::vector<std::string> first(jobs.size());
  parallel_for(jobs.size(), 0, [&](std::size_t i) {
    auto inst = make_instance(jobs[i].family, Problem::cvrp, jobs[i].n, jobs[i].seed);
    Graph<double> g(false);
    Binder<double> b(g, policy.params());
    Rng rng = Rng(9).split(i);
    auto ro = policy.rollout(b, inst, DecodeMode::sample, inst.customers(), &rng);
    for (const auto& t : ro.tours) {
      ++tours[i];
      auto rep = validate(inst, t);
      if (!rep.ok()) {
        ++bad[i];
        if (first[i].empty()) first[i] = rep.describe();
      }
    }
  });
  std::size_t nt = 0, nb = 0;
  std::string example;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    nt += tours[i];
    nb += bad[i];
    if (example.empty()) example = first[i];
  }
  return {nb == 0 && nt >= 10000,
          std::to_string(nt) + " sampled tours, " + std::to_string(nb) + " violations" + (example.empty() ? "" : ": " + example)};
}

Outcome oracle_agreement() {
  std::size_t mismatch = 0, order = 0;
  double worst = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    auto inst = make_instance(Distribution::uniform, Problem::tsp, 8, 5000 + s);
    const double hk = held_karp_tsp(inst).cost, bf = brute_force_tsp(inst).cost;
    worst = std::max(worst, std::abs(hk - bf));
    mismatch += std::abs(hk - bf) > 1e-9;
    const double heur = nn_2opt(inst).cost, nn = tour_length(inst, nearest_neighbor_tour(inst));
    order += !(heur >= hk - 1e-9 && heur <= nn + 1e-9);
  }
  return {mismatch == 0 && order == 0, "200 instances, max |HK-brute| " + fmt(worst) + ", " + std::to_string(order) +
                                           " ordering violations"};
}

Outcome augmentation() {
  auto cfg = preset("tiny");
  cfg.n = 12;
  Policy<double> policy(cfg.policy);
  policy.init(3);
  double worst = 0;
  std::size_t worse = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto inst = make_instance(Distribution::uniform, Problem::tsp, 12, 9000 + s);
    std::vector<int> tour(12);
    Rng rng(s);
    for (int i = 0; i < 12; ++i) tour[static_cast<std::size_t>(i)] = i;
    rng.shuffle(tour);
    const double base = tour_length(inst, tour);
    for (const auto& a : augment8(inst)) worst = std::max(worst, std::abs(tour_length(a, tour) - base));
    const double plain = solve_greedy(policy, inst, 12, false).cost;
    const double best = solve_greedy(policy, inst, 12, true).cost;
    worse += best > plain;
  }
  return {worst <= 1e-12 && worse == 0,
          "max cost drift " + fmt(worst) + ", best-of-8 worse than plain on " + std::to_string(worse) + "/100"};
}

Outcome desk_uniform_gap() {
  auto cfg = preset("desk");
  cfg.wall_clock = false;
  auto insts = held_out(Distribution::uniform, cfg.n, 500, 424242);
  auto refs = exact_costs(insts);
  Policy<double> untrained(cfg.policy);
  untrained.init(cfg.seed);
  const double before = average_gap(untrained, insts, refs, 0, true, 0);
  desk.mixed = train_run<double>(cfg, scratch("desk_mixed").string());
  const double after = average_gap(policy_from(cfg, desk.mixed->params), insts, refs, 0, true, 0);
  return {after <= 0.02 && before > 0.20, "untrained " + fmt(100 * before) + "%, trained " + fmt(100 * after) +
                                              "% on 500 Uniform TSP-10 vs Held-Karp"};
}

Outcome mixed_beats_uniform_on_cluster() {
  auto cfg = preset("desk");
  cfg.wall_clock = false;
  if (!desk.mixed) desk.mixed = train_run<double>(cfg, scratch("desk_mixed").string());
  auto uni = cfg;
  uni.sampling_probs = {1, 0, 0};
  uni.dwa = false;
  desk.uniform_only = train_run<double>(uni, scratch("desk_uniform").string());
  auto insts = held_out(Distribution::cluster, cfg.n, 500, 535353);
  auto refs = exact_costs(insts);
  const double mixed = average_gap(policy_from(cfg, desk.mixed->params), insts, refs, 0, true, 0);
  const double only = average_gap(policy_from(uni, desk.uniform_only->params), insts, refs, 0, true, 0);
  return {mixed < only, "Cluster TSP-10 gap mixed " + fmt(100 * mixed) + "%, uniform-only " + fmt(100 * only) + "%"};
}

Outcome dwa() {
  Rng rng(7);
  std::size_t bad = 0;
  for (int t = 0; t < 10000; ++t) {
    auto p = dwa_update({rng.uniform(-1, 5), rng.uniform(0, 1), rng.uniform(0, 50)},
                        {rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10)});
    double s = 0;
    bool nonneg = true;
    for (double v : p) {
      s += v;
      nonneg &= v >= 0;
    }
    bad += !(nonneg && std::abs(s - 1) <= 1e-12);
  }
  auto base = preset("tiny");
  base.epochs = 1;
  base.wall_clock = false;
  auto inflated = base;
  inflated.gap_inflation = {0, 1.0, 0};
  auto r0 = train_run<double>(base, scratch("dwa0").string());
  auto r1 = train_run<double>(inflated, scratch("dwa1").string());
  const bool raised = r1.state.sampling_probs[1] > r0.state.sampling_probs[1];
  return {bad == 0 && raised, std::to_string(bad) + " invalid probability vectors; p_cluster " +
                                  fmt(r0.state.sampling_probs[1]) + " -> " + fmt(r1.state.sampling_probs[1]) +
                                  " with inflated gap"};
}

Outcome determinism() {
  auto cfg = preset("tiny");
  cfg.epochs = 3;
  cfg.wall_clock = false;
  auto a = scratch("det_a"), b = scratch("det_b"), part = scratch("det_part");
  cfg.workers = 1;
  train_run<double>(cfg, a.string());
  cfg.workers = 4;
  train_run<double>(cfg, b.string());
  const bool same_runs = slurp(a / "metrics.csv") == slurp(b / "metrics.csv");
  {
    Trainer<double> t(cfg);
    auto m = t.run_epoch();
    fs::create_directories(part);
    std::ofstream(part / "metrics.csv") << kMetricsHeader << '\n' << metrics_row(m) << '\n';
    save_checkpoint((part / "ckpt_1").string(), t.checkpoint());
  }
  train_run<double>(cfg, part.string(), (part / "ckpt_1").string());
  const bool same_resume = slurp(b / "metrics.csv") == slurp(part / "metrics.csv") &&
                           slurp(b / "ckpt_3") == slurp(part / "ckpt_3");
  return {same_runs && same_resume, std::string("independent runs ") + (same_runs ? "identical" : "differ") +
                                        ", resumed run " + (same_resume ? "identical" : "differs")};
}

Outcome benchmark() {
  const std::string text =
      "NAME : hex\nTYPE : TSP\nDIMENSION : 6\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n"
      "1 0 0\n2 30 0\n3 60 0\n4 60 40\n5 30 40\n6 0 40\nEOF\n";
  auto doc = parse_lib(text);
  auto li = to_instance(doc);
  const auto ref = held_karp_tsp(li.instance);
  const long long optimum = benchmark_cost(doc, ref.tour);
  bool model_ok = true;
  long long model_cost = -1;
  if (desk.mixed) {
    auto cfg = preset("desk");
    model_cost = benchmark_cost(doc, solve_greedy(policy_from(cfg, desk.mixed->params), li.instance, 6, true).tour);
    model_ok = model_cost == optimum;
  }
  const double g = benchmark_gap(21285, 21282);
  return {optimum == 200 && model_ok && std::abs(g - 0.000141) <= 5e-7,
          "oracle optimum " + std::to_string(optimum) + " (hand 200), model " + std::to_string(model_cost) +
              ", gap(21285, 21282) " + fmt(g)};
}

}  // namespace

int main() {
  report(1, "full-model gradient check", gradcheck);
  report(2, "load-balance closed forms", balance_closed_forms);
  report(3, "routing invariants", routing_invariants);
  report(4, "MoE reductions", moe_reductions);
  report(5, "CVRP rollout closure", cvrp_closure);
  report(6, "reference solver agreement", oracle_agreement);
  report(7, "augmentation invariance", augmentation);
  report(8, "desk training reaches small Uniform gap", desk_uniform_gap);
  report(9, "mixed training beats Uniform-only on Cluster", mixed_beats_uniform_on_cluster);
  report(10, "DWA sampling probabilities", dwa);
  report(11, "bitwise reproducibility and resume", determinism);
  report(12, "benchmark optimum and gap", benchmark);
  std::printf("%s\n", failures == 0 ? "ALL PASS" : (std::to_string(failures) + " FAILED").c_str());
  return failures == 0 ? 0 : 1;
}
