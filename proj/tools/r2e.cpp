// Command-line front end: generate, train, eval, solve, analyze, grad-check.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "r2e/checkpoint.hpp"
#include "r2e/config.hpp"
#include "r2e/env.hpp"
#include "r2e/errors.hpp"
#include "r2e/gradcheck.hpp"
#include "r2e/instance.hpp"
#include "r2e/libio.hpp"
#include "r2e/moe.hpp"
#include "r2e/oracle.hpp"
#include "r2e/policy.hpp"
#include "r2e/train.hpp"

namespace fs = std::filesystem;
using namespace r2e;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelSource {
  std::string checkpoint;
  bool untrained = false;
  std::string preset = "desk";
};

void add_model_flags(CLI::App* cmd, ModelSource& src) {
  cmd->add_option("--checkpoint", src.checkpoint, "Checkpoint file to load");
  cmd->add_flag("--untrained", src.untrained, "Use a freshly initialized model instead of a checkpoint");
  cmd->add_option("--preset", src.preset, "Architecture preset for --untrained (paper, desk, tiny)")
      ->capture_default_str();
}

Policy<double> make_policy(const ModelSource& src, Problem problem, std::uint64_t seed) {
  if (!src.checkpoint.empty() && src.untrained) throw UsageError("--checkpoint and --untrained are exclusive");
  if (!src.checkpoint.empty()) {
    auto p = load_policy<double>(src.checkpoint);
    if (p.config().problem != problem)
      throw UsageError("checkpoint was trained for " + to_string(p.config().problem) + ", input is " +
                       to_string(problem));
    return p;
  }
  if (!src.untrained) throw UsageError("a model is required: pass --checkpoint or --untrained");
  PolicyConfig pc = preset(src.preset).policy;
  pc.problem = problem;
  Policy<double> p(pc);
  p.init(seed);
  return p;
}

std::string g17(double v) { return format_g17(v); }

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string family = "uniform";
  int n = 20;
  std::size_t count = 1000;
  std::string problem = "tsp";
  std::uint64_t seed = 1;
  std::string out = "dataset.jsonl";
};

int cmd_generate(const GenerateArgs& a) {
  DistributionSpec spec;
  spec.family = distribution_from_string(a.family);
  spec.n = a.n;
  spec.validate();
  const auto summary = generate_dataset(spec, problem_from_string(a.problem), a.count, a.seed, a.out);
  std::cout << "wrote " << summary.count << " instances to " << a.out << " checksum " << summary.checksum << '\n';
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string preset_name;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::string resume;
  std::optional<int> workers, epochs, instances, batch, n, val_size, max_starts;
  std::optional<double> lr;
  std::optional<std::string> problem, precision;
  bool no_wall_clock = false;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = a.preset_name.empty() ? TrainConfig{} : preset(a.preset_name);
  if (!a.config.empty()) cfg = load_config(a.config, cfg);
  if (a.seed) cfg.seed = *a.seed;
  if (a.workers) cfg.workers = *a.workers;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.instances) cfg.instances_per_epoch = *a.instances;
  if (a.batch) cfg.batch = *a.batch;
  if (a.n) cfg.n = *a.n;
  if (a.val_size) cfg.val_size = *a.val_size;
  if (a.max_starts) cfg.max_starts = *a.max_starts;
  if (a.lr) cfg.lr = *a.lr;
  if (a.problem) cfg.policy.problem = problem_from_string(*a.problem);
  if (a.precision) cfg.precision = *a.precision;
  if (a.no_wall_clock) cfg.wall_clock = false;
  cfg.validate();
  std::optional<std::string> resume;
  if (!a.resume.empty()) resume = a.resume;
  if (cfg.precision == "f32")
    train_run<float>(cfg, a.out, resume, &std::cerr);
  else
    train_run<double>(cfg, a.out, resume, &std::cerr);
  std::cout << "training finished; metrics in " << (fs::path(a.out) / "metrics.csv").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  ModelSource model;
  std::string dataset;
  std::string tours;
  std::string ref_costs;
  bool oracle = false;
  bool no_augment = false;
  int max_starts = 0;
  int workers = 0;
  std::uint64_t seed = 1;
  std::string out = "eval.csv";
  std::string per_instance;
  std::string write_reference_tours;
};

int cmd_eval(const EvalArgs& a) {
  if (a.ref_costs.empty() && !a.oracle)
    throw UsageError("no reference source: pass --ref-costs <seed,cost csv> or --oracle");
  const auto insts = read_dataset(a.dataset);
  if (insts.empty()) throw UsageError("dataset " + a.dataset + " is empty");
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<double> refs(insts.size());
  std::vector<std::vector<int>> ref_tours(insts.size());
  if (!a.ref_costs.empty()) {
    const auto table = load_external_costs(a.ref_costs);
    for (std::size_t i = 0; i < insts.size(); ++i) {
      auto it = table.find(insts[i].seed);
      if (it == table.end())
        throw UsageError("reference file lacks seed " + std::to_string(insts[i].seed) + " and --oracle is not set");
      refs[i] = it->second;
    }
  } else {
    parallel_for(insts.size(), a.workers, [&](std::size_t i) {
      auto r = reference_solution(insts[i]);
      refs[i] = r.cost;
      ref_tours[i] = r.tour;
    });
    if (!a.write_reference_tours.empty()) {
      std::ofstream out(a.write_reference_tours);
      if (!out) throw IoError("cannot write " + a.write_reference_tours);
      for (std::size_t i = 0; i < insts.size(); ++i) out << tour_json(insts[i], ref_tours[i], refs[i]) << '\n';
    }
  }

  std::vector<double> costs(insts.size());
  if (!a.tours.empty()) {
    if (!a.model.checkpoint.empty() || a.model.untrained) throw UsageError("--tours excludes a model source");
    std::ifstream in(a.tours);
    if (!in) throw IoError("cannot read " + a.tours);
    std::map<std::uint64_t, std::vector<int>> by_seed;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) {
        auto j = nlohmann::json::parse(line);
        by_seed[j.at("instance_seed").get<std::uint64_t>()] = j.at("tour").get<std::vector<int>>();
      }
    for (std::size_t i = 0; i < insts.size(); ++i) {
      auto it = by_seed.find(insts[i].seed);
      if (it == by_seed.end()) throw UsageError("tour file lacks seed " + std::to_string(insts[i].seed));
      costs[i] = tour_cost(insts[i], it->second);
    }
  } else {
    const auto policy = make_policy(a.model, insts.front().problem, a.seed);
    parallel_for(insts.size(), a.workers, [&](std::size_t i) {
      const std::size_t c = insts[i].customers();
      const std::size_t starts =
          a.max_starts > 0 ? std::min<std::size_t>(static_cast<std::size_t>(a.max_starts), c) : c;
      costs[i] = solve_greedy(policy, insts[i], starts, !a.no_augment).cost;
    });
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  double obj = 0, gsum = 0;
  for (std::size_t i = 0; i < insts.size(); ++i) {
    obj += costs[i];
    gsum += gap(costs[i], refs[i]);
  }
  obj /= static_cast<double>(insts.size());
  gsum /= static_cast<double>(insts.size());
  {
    std::ofstream out(a.out);
    if (!out) throw IoError("cannot write " + a.out);
    out << "avg_obj,avg_gap,total_seconds\n" << g17(obj) << ',' << g17(gsum) << ',' << g17(secs) << '\n';
  }
  const std::string per = a.per_instance.empty()
                              ? (fs::path(a.out).parent_path() / (fs::path(a.out).stem().string() + "_instances.csv")).string()
                              : a.per_instance;
  {
    std::ofstream out(per);
    if (!out) throw IoError("cannot write " + per);
    out << "index,seed,dist_label,cost,reference,gap\n";
    for (std::size_t i = 0; i < insts.size(); ++i)
      out << i << ',' << insts[i].seed << ',' << to_string(insts[i].dist_label) << ',' << g17(costs[i]) << ','
          << g17(refs[i]) << ',' << g17(gap(costs[i], refs[i])) << '\n';
  }
  std::printf("avg_obj %.6f  avg_gap %.4f%%  total_seconds %.3f  (%zu instances)\n", obj, 100 * gsum, secs,
              insts.size());
  return 0;
}

// ---------------------------------------------------------------- solve

struct SolveArgs {
  ModelSource model;
  std::string lib;
  std::optional<long long> best_known;
  bool no_augment = false;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_solve(const SolveArgs& a) {
  const auto doc = parse_lib_file(a.lib);
  const auto li = to_instance(doc);
  const auto policy = make_policy(a.model, li.instance.problem, a.seed);
  const auto best = solve_greedy(policy, li.instance, li.instance.customers(), !a.no_augment);
  const long long cost = benchmark_cost(doc, best.tour);
  nlohmann::json j;
  j["name"] = doc.header.name;
  j["tour"] = best.tour;
  j["cost"] = cost;
  j["normalized_cost"] = best.cost;
  if (a.best_known) {
    j["best_known"] = *a.best_known;
    j["gap"] = benchmark_gap(cost, *a.best_known);
  }
  if (!a.out.empty()) {
    std::ofstream out(a.out);
    if (!out) throw IoError("cannot write " + a.out);
    out << j.dump() << '\n';
  }
  std::cout << j.dump() << '\n';
  if (a.best_known) std::printf("cost %lld  best_known %lld  gap %.4f%%\n", cost, *a.best_known, 100 * benchmark_gap(cost, *a.best_known));
  return 0;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeArgs {
  ModelSource model;
  std::vector<std::string> datasets;
  std::string out_dir = "analysis";
  std::uint64_t seed = 1;
  int workers = 0;
};

int cmd_analyze(const AnalyzeArgs& a) {
  std::vector<Instance> all;
  for (const auto& path : a.datasets) {
    auto d = read_dataset(path);
    all.insert(all.end(), d.begin(), d.end());
  }
  if (all.empty()) throw UsageError("no instances in the given datasets");
  const auto policy = make_policy(a.model, all.front().problem, a.seed);
  const auto& pc = policy.config();
  if (!pc.decoder_moe() || pc.decoder_routing != DecoderRouting::instance)
    throw UsageError("analyze needs a model with instance-routed decoder MoE");
  std::vector<GateDecision> gates(all.size());
  std::vector<std::vector<double>> z(all.size());
  parallel_for(all.size(), a.workers, [&](std::size_t i) {
    if (all[i].problem != pc.problem) throw UsageError("datasets mix problem kinds");
    Graph<double> g(false);
    Binder<double> b(g, policy.params());
    auto enc = policy.encode(b, all[i]);
    gates[i] = enc.decoder_gates->decisions().front();
    auto v = enc.z_inst.values();
    z[i].assign(v.begin(), v.end());
  });
  std::vector<std::string> order;
  std::map<std::string, std::vector<GateDecision>> by_label;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto label = to_string(all[i].dist_label);
    if (!by_label.count(label)) order.push_back(label);
    by_label[label].push_back(gates[i]);
  }
  fs::create_directories(a.out_dir);
  std::vector<UsageRow> rows;
  for (const auto& label : order) rows.push_back({label, usage_histogram(by_label[label], pc.moe.m)});
  const auto usage_path = (fs::path(a.out_dir) / "expert_usage.csv").string();
  write_usage_csv(usage_path, rows);
  const auto emb_path = (fs::path(a.out_dir) / "embeddings.csv").string();
  std::ofstream out(emb_path);
  if (!out) throw IoError("cannot write " + emb_path);
  out << "dist_label,seed";
  for (int k = 0; k < pc.d; ++k) out << ",z" << k;
  out << '\n';
  for (std::size_t i = 0; i < all.size(); ++i) {
    out << to_string(all[i].dist_label) << ',' << all[i].seed;
    for (double v : z[i]) out << ',' << g17(v);
    out << '\n';
  }
  std::cout << "wrote " << usage_path << " and " << emb_path << " (" << all.size() << " instances)\n";
  return 0;
}

// ---------------------------------------------------------------- grad-check

struct GradCheckArgs {
  std::string preset_name = "tiny";
  std::uint64_t seed = 1;
  std::string breakage;
  double tolerance = 1e-4;
  double step = 1e-4;
};

int cmd_grad_check(const GradCheckArgs& a) {
  TrainConfig cfg = preset(a.preset_name);
  cfg.seed = a.seed;
  if (!a.breakage.empty()) {
    if (a.breakage != "backward") throw UsageError("--break accepts only 'backward'");
    debug::break_silu_backward() = true;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = total_loss_grad_check(cfg, a.step);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%-40s %8s %12s\n", "block", "size", "worst_error");
  for (const auto& b : rep.blocks) std::printf("%-40s %8zu %12.3e\n", b.name.c_str(), b.size, b.worst);
  const bool ok = rep.max_error <= a.tolerance;
  std::printf("max relative error %.3e (%s) over %zu coordinates in %.2fs: %s\n", rep.max_error,
              rep.worst_block.c_str(), rep.coordinates, secs, ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-experts neural routing solver"};
  app.require_subcommand(1);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Write a JSONL dataset of generated instances");
  gen->add_option("--family", ga.family, "Distribution family (" + valid_family_list() + ")")->capture_default_str();
  gen->add_option("--n", ga.n, "Customer count")->capture_default_str();
  gen->add_option("--count", ga.count, "Number of instances")->capture_default_str();
  gen->add_option("--problem", ga.problem, "tsp or cvrp")->capture_default_str();
  gen->add_option("--seed", ga.seed, "Dataset seed")->capture_default_str();
  gen->add_option("--out", ga.out, "Output JSONL path")->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a policy; writes metrics.csv and ckpt_<epoch> files");
  tr->add_option("--config", ta.config, "JSON config file");
  tr->add_option("--preset", ta.preset_name, "Base preset (paper, desk, tiny)");
  tr->add_option("--seed", ta.seed, "Override seed");
  tr->add_option("--out", ta.out, "Output directory")->capture_default_str();
  tr->add_option("--resume", ta.resume, "Checkpoint to resume from");
  tr->add_option("--workers", ta.workers, "Worker threads (0: all cores)");
  tr->add_option("--epochs", ta.epochs, "Override epochs");
  tr->add_option("--instances-per-epoch", ta.instances, "Override instances per epoch");
  tr->add_option("--batch", ta.batch, "Override batch size");
  tr->add_option("--n", ta.n, "Override customer count");
  tr->add_option("--val-size", ta.val_size, "Override validation set size per distribution");
  tr->add_option("--max-starts", ta.max_starts, "Override start cap (0: one per customer)");
  tr->add_option("--lr", ta.lr, "Override learning rate");
  tr->add_option("--problem", ta.problem, "Override problem (tsp, cvrp)");
  tr->add_option("--precision", ta.precision, "f64 or f32");
  tr->add_flag("--no-wall-clock", ta.no_wall_clock, "Write wall_seconds as 0 for byte-identical metrics");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a model (or a tour file) on a dataset");
  add_model_flags(ev, ea.model);
  ev->add_option("--dataset", ea.dataset, "JSONL dataset")->required();
  ev->add_option("--tours", ea.tours, "Evaluate tours from a JSONL file instead of a model");
  ev->add_option("--ref-costs", ea.ref_costs, "Reference costs CSV (seed,cost)");
  ev->add_flag("--oracle", ea.oracle, "Compute references with the built-in oracle");
  ev->add_flag("--no-augment", ea.no_augment, "Disable 8x augmentation");
  ev->add_option("--max-starts", ea.max_starts, "Start cap (0: one per customer)")->capture_default_str();
  ev->add_option("--workers", ea.workers, "Worker threads (0: all cores)")->capture_default_str();
  ev->add_option("--seed", ea.seed, "Seed for --untrained")->capture_default_str();
  ev->add_option("--out", ea.out, "Summary CSV path")->capture_default_str();
  ev->add_option("--per-instance", ea.per_instance, "Per-instance CSV path (default <out>_instances.csv)");
  ev->add_option("--write-reference-tours", ea.write_reference_tours, "Write oracle tours as JSONL");

  SolveArgs sa;
  auto* so = app.add_subcommand("solve", "Solve a TSPLIB/CVRPLIB file");
  add_model_flags(so, sa.model);
  so->add_option("--lib", sa.lib, "TSPLIB or CVRPLIB file")->required();
  so->add_option("--best-known", sa.best_known, "Best-known integer cost for the gap");
  so->add_flag("--no-augment", sa.no_augment, "Disable 8x augmentation");
  so->add_option("--seed", sa.seed, "Seed for --untrained")->capture_default_str();
  so->add_option("--out", sa.out, "Write the tour JSON here");

  AnalyzeArgs aa;
  auto* an = app.add_subcommand("analyze", "Expert usage histogram and instance embeddings");
  add_model_flags(an, aa.model);
  an->add_option("--dataset", aa.datasets, "JSONL dataset (repeatable)")->required();
  an->add_option("--out-dir", aa.out_dir, "Output directory")->capture_default_str();
  an->add_option("--seed", aa.seed, "Seed for --untrained")->capture_default_str();
  an->add_option("--workers", aa.workers, "Worker threads (0: all cores)")->capture_default_str();

  GradCheckArgs ca;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the full training loss");
  gc->add_option("--preset", ca.preset_name, "Model preset")->capture_default_str();
  gc->add_option("--seed", ca.seed, "Seed")->capture_default_str();
  gc->add_option("--break", ca.breakage, "Debug: 'backward' corrupts a backward rule");
  gc->add_option("--tolerance", ca.tolerance, "Pass threshold")->capture_default_str();
  gc->add_option("--step", ca.step, "Finite-difference step")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_generate(ga);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(ea);
    if (*so) return cmd_solve(sa);
    if (*an) return cmd_analyze(aa);
    if (*gc) return cmd_grad_check(ca);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const UnsupportedFormat& e) {
    std::cerr << "unsupported format: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
