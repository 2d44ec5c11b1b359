#pragma once

// Multi-start REINFORCE with a shared mean baseline, composite loss, DWA
// distribution scheduling, AdamW, sharded deterministic gradient reduction,
// validation with augmentation, checkpointing and the metrics log.

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "r2e/checkpoint.hpp"
#include "r2e/config.hpp"
#include "r2e/env.hpp"
#include "r2e/errors.hpp"
#include "r2e/instance.hpp"
#include "r2e/oracle.hpp"
#include "r2e/params.hpp"
#include "r2e/policy.hpp"
#include "r2e/rng.hpp"
#include "r2e/tensor.hpp"

namespace r2e {

// ---------------------------------------------------------------------------
// Losses and scheduling
// ---------------------------------------------------------------------------

// costs [starts x batch], logprobs [starts x batch]:
// mean over all entries of (cost - mean_starts(cost)) * logprob.
template <typename Real>
Tensor<Real> reinforce_loss(const Matrix<double>& costs, const Tensor<Real>& logprobs) {
  if (costs.rows != logprobs.rows() || costs.cols != logprobs.cols())
    throw DimensionError("reinforce_loss: costs " + shape_str(costs.rows, costs.cols) + " vs logprobs " +
                         shape_str(logprobs.rows(), logprobs.cols()));
  if (costs.rows < 1) throw ContractError("reinforce_loss needs at least one start");
  Matrix<Real> adv(costs.rows, costs.cols);
  for (std::size_t b = 0; b < costs.cols; ++b) {
    double base = 0;
    for (std::size_t s = 0; s < costs.rows; ++s) base += costs(s, b);
    base /= static_cast<double>(costs.rows);
    for (std::size_t s = 0; s < costs.rows; ++s) adv(s, b) = static_cast<Real>(costs(s, b) - base);
  }
  return mean(mul(logprobs.graph->constant(std::move(adv)), logprobs));
}

template <typename Real>
Tensor<Real> reinforce_loss(const std::vector<double>& costs, const Tensor<Real>& logprobs) {
  return reinforce_loss(Matrix<double>(costs.size(), 1, costs), logprobs);
}

// task + omega_beta * balance + omega_gamma * class
template <typename Real>
Tensor<Real> total_loss(const Tensor<Real>& task, const Tensor<Real>& balance, const Tensor<Real>& cls,
                        double omega_beta, double omega_gamma) {
  return add(add(task, scale(balance, static_cast<Real>(omega_beta))), scale(cls, static_cast<Real>(omega_gamma)));
}

// softmax(gap_d + loss_d); non-finite input is a scheduler error.
inline std::array<double, 3> dwa_update(const std::array<double, 3>& avg_gaps, const std::array<double, 3>& losses) {
  std::array<double, 3> z{};
  for (std::size_t d = 0; d < 3; ++d) {
    if (!std::isfinite(avg_gaps[d]) || !std::isfinite(losses[d]))
      throw NumericalError("dwa_update: non-finite gap or loss", d);
    z[d] = avg_gaps[d] + losses[d];
  }
  const double mx = std::max({z[0], z[1], z[2]});
  double s = 0;
  for (auto& v : z) s += (v = std::exp(v - mx));
  for (auto& v : z) v /= s;
  return z;
}

// ---------------------------------------------------------------------------
// Parallel helper
// ---------------------------------------------------------------------------

inline int resolve_workers(int workers) {
  if (workers > 0) return workers;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

// fn(i) for i in [0, count); each index is independent, so results do not
// depend on the worker count. The lowest-index exception is rethrown.
template <typename F>
void parallel_for(std::size_t count, int workers, F&& fn) {
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(resolve_workers(workers)), count);
  std::vector<std::exception_ptr> errors(count);
  if (w <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < w; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < count;) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct SolveResult {
  double cost = 0;
  std::vector<int> tour;
  int transform = 0;
  std::size_t start = 0;
};

// Greedy multi-start decoding, optionally over the 8 dihedral variants; the
// best tour is costed on the original coordinates.
template <typename Real>
SolveResult solve_greedy(const Policy<Real>& policy, const Instance& inst, std::size_t starts, bool augment) {
  SolveResult best;
  bool have = false;
  const int variants = augment ? 8 : 1;
  for (int t = 0; t < variants; ++t) {
    Graph<Real> g(false);
    Binder<Real> b(g, policy.params());
    const Instance ti = t == 0 ? inst : transform(inst, t);
    auto ro = policy.rollout(b, ti, DecodeMode::greedy, starts);
    for (std::size_t s = 0; s < ro.tours.size(); ++s) {
      const double c = tour_length(inst, ro.tours[s]);
      if (!have || c < best.cost) {
        best = {c, ro.tours[s], t, s};
        have = true;
      }
    }
  }
  return best;
}

struct ValidationSet {
  std::array<std::vector<Instance>, 3> instances;
  std::array<std::vector<double>, 3> reference;
};

inline std::vector<double> reference_costs(const std::vector<Instance>& insts, int workers) {
  std::vector<double> out(insts.size());
  parallel_for(insts.size(), workers, [&](std::size_t i) { out[i] = reference_solution(insts[i]).cost; });
  return out;
}

inline ValidationSet make_validation_set(Problem problem, int n, std::size_t size, std::uint64_t seed, int workers) {
  ValidationSet vs;
  for (std::size_t d = 0; d < 3; ++d) {
    DistributionSpec spec;
    spec.family = kTrainFamilies[d];
    spec.n = n;
    vs.instances[d] = generate_instances(spec, problem, size, mix64(seed ^ 0x56414c4944415445ULL) + d);
    vs.reference[d] = reference_costs(vs.instances[d], workers);
  }
  return vs;
}

// Mean gap of greedy + multi-start + augmentation decoding.
template <typename Real>
double average_gap(const Policy<Real>& policy, const std::vector<Instance>& insts, const std::vector<double>& refs,
                   int max_starts, bool augment, int workers) {
  if (insts.size() != refs.size()) throw ContractError("average_gap: one reference per instance required");
  if (insts.empty()) throw ContractError("average_gap: empty set");
  std::vector<double> gaps(insts.size());
  parallel_for(insts.size(), workers, [&](std::size_t i) {
    const std::size_t c = insts[i].customers();
    const std::size_t starts = max_starts > 0 ? std::min<std::size_t>(static_cast<std::size_t>(max_starts), c) : c;
    gaps[i] = gap(solve_greedy(policy, insts[i], starts, augment).cost, refs[i]);
  });
  double s = 0;
  for (double g : gaps) s += g;
  return s / static_cast<double>(gaps.size());
}

template <typename Real>
std::array<double, 3> validate_epoch(const Policy<Real>& policy, const ValidationSet& vs, int max_starts, int workers) {
  std::array<double, 3> out{};
  for (std::size_t d = 0; d < 3; ++d)
    out[d] = average_gap(policy, vs.instances[d], vs.reference[d], max_starts, true, workers);
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adam with decoupled weight decay.
template <typename Real>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Matrix<Real>> m, v;
  std::uint64_t t = 0;

  explicit AdamW(const ParamStore<Real>& store) : m(store.zeros_like()), v(store.zeros_like()) {}

  void step(ParamStore<Real>& store, const std::vector<Matrix<Real>>& grads, double lr, double weight_decay) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store.value(i).data;
      const auto& g = grads[i].data;
      auto& mi = m[i].data;
      auto& vi = v[i].data;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = static_cast<double>(g[k]);
        const double mk = beta1 * static_cast<double>(mi[k]) + (1.0 - beta1) * gk;
        const double vk = beta2 * static_cast<double>(vi[k]) + (1.0 - beta2) * gk * gk;
        mi[k] = static_cast<Real>(mk);
        vi[k] = static_cast<Real>(vk);
        const double pk = static_cast<double>(p[k]);
        p[k] = static_cast<Real>(pk - lr * ((mk / c1) / (std::sqrt(vk / c2) + eps) + weight_decay * pk));
      }
    }
  }
};

template <typename Real>
double global_norm(const std::vector<Matrix<Real>>& grads) {
  double s = 0;
  for (const auto& g : grads)
    for (Real v : g.data) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Per-instance loss
// ---------------------------------------------------------------------------

struct InstanceLoss {
  double task = 0, balance = 0, cls = 0, total = 0;
};

// Builds the weighted loss of one instance on `b`'s graph:
//   task_w * reinforce + bal_w * balance + cls_w * class.
// With `replay`, actions come from the given tours instead of sampling.
template <typename Real>
std::pair<Tensor<Real>, InstanceLoss> instance_loss(const Policy<Real>& policy, Binder<Real>& b, const Instance& inst,
                                                    std::size_t starts, Rng& rng, double task_w, double bal_w,
                                                    double cls_w, std::vector<std::vector<int>>* replay = nullptr) {
  const bool replaying = replay && !replay->empty();
  auto ro = policy.rollout(b, inst, DecodeMode::sample, starts, &rng, replaying ? replay : nullptr);
  if (replay && !replaying) *replay = ro.tours;
  InstanceLoss vals;
  auto task = reinforce_loss(ro.costs, ro.log_prob);
  vals.task = static_cast<double>(task.item());
  Tensor<Real> loss = scale(task, static_cast<Real>(task_w));
  if (auto bal = policy.balance_loss(ro)) {
    vals.balance = static_cast<double>(bal->item());
    loss = add(loss, scale(*bal, static_cast<Real>(bal_w)));
  }
  if (auto label = class_index(inst.dist_label)) {
    auto cls = policy.class_loss(ro.encoding, *label);
    vals.cls = static_cast<double>(cls.item());
    loss = add(loss, scale(cls, static_cast<Real>(cls_w)));
  }
  vals.total = static_cast<double>(loss.item());
  return {loss, vals};
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;  // 1-based
  std::array<double, 3> probs{};
  double loss_task = 0, loss_balance = 0, loss_class = 0;
  std::array<double, 3> gaps{};
  double lr = 0;
  double wall_seconds = 0;
};

inline const char* kMetricsHeader =
    "epoch,p_U,p_C,p_M,loss_task,loss_balance,loss_class,gap_U,gap_C,gap_M,lr,wall_seconds";

inline std::string metrics_row(const EpochMetrics& m) {
  std::ostringstream os;
  os << m.epoch;
  for (double v : {m.probs[0], m.probs[1], m.probs[2], m.loss_task, m.loss_balance, m.loss_class, m.gaps[0], m.gaps[1],
                   m.gaps[2], m.lr, m.wall_seconds})
    os << ',' << format_g17(v);
  return os.str();
}

template <typename Real>
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), policy_((cfg_.validate(), cfg_.policy)), adam_(policy_.params()), log_(log) {
    policy_.init(cfg_.seed);
    state_.sampling_probs = cfg_.sampling_probs;
  }

  const TrainConfig& config() const { return cfg_; }
  Policy<Real>& policy() { return policy_; }
  const Policy<Real>& policy() const { return policy_; }
  const TrainState& state() const { return state_; }
  const AdamW<Real>& optimizer() const { return adam_; }

  // Validation instances and references; built lazily on first use.
  const ValidationSet& validation() {
    if (!val_)
      val_ = make_validation_set(cfg_.policy.problem, cfg_.n, static_cast<std::size_t>(cfg_.val_size), cfg_.seed,
                                 cfg_.workers);
    return *val_;
  }

  double lr_at(int epoch_index) const {
    return epoch_index >= static_cast<int>(std::floor(cfg_.lr_decay_at * cfg_.epochs)) ? cfg_.lr / 10.0 : cfg_.lr;
  }

  // Instances of one batch: (distribution index, instance).
  std::vector<std::pair<std::size_t, Instance>> batch_instances(int epoch_index, std::size_t batch_index,
                                                                std::size_t count) const {
    const Rng br = Rng(cfg_.seed).split(static_cast<std::uint64_t>(epoch_index) + 1, batch_index);
    Rng comp = br.split(0);
    const std::vector<double> w(state_.sampling_probs.begin(), state_.sampling_probs.end());
    std::vector<std::pair<std::size_t, Instance>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t d = comp.categorical(w);
      DistributionSpec spec;
      spec.family = kTrainFamilies[d];
      spec.n = cfg_.n;
      out.emplace_back(d, generate_instance(spec, cfg_.policy.problem, br.split(1, i).next_u64()));
    }
    return out;
  }

  EpochMetrics run_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    const int e = state_.epoch;  // 0-based index of the epoch being run
    const double lr = lr_at(e);
    EpochMetrics met;
    met.epoch = e + 1;
    met.probs = state_.sampling_probs;
    met.lr = lr;

    const std::size_t per_epoch = static_cast<std::size_t>(cfg_.instances_per_epoch);
    const std::size_t bsz = static_cast<std::size_t>(cfg_.batch);
    const std::size_t batches = (per_epoch + bsz - 1) / bsz;
    std::array<double, 3> dist_loss_sum{}, dist_count{};
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t count = std::min(bsz, per_epoch - bi * bsz);
      auto items = batch_instances(e, bi, count);
      std::array<std::size_t, 3> per_dist{};
      for (const auto& it : items) ++per_dist[it.first];

      const std::size_t shard = static_cast<std::size_t>(cfg_.shard_size);
      const std::size_t shards = (count + shard - 1) / shard;
      std::vector<std::vector<Matrix<Real>>> shard_grads(shards);
      std::vector<InstanceLoss> vals(count);
      const Rng br = Rng(cfg_.seed).split(static_cast<std::uint64_t>(e) + 1, bi);
      parallel_for(shards, cfg_.workers, [&](std::size_t s) {
        shard_grads[s] = policy_.params().zeros_like();
        for (std::size_t i = s * shard; i < std::min(count, (s + 1) * shard); ++i) {
          const auto& [d, inst] = items[i];
          Graph<Real> g;
          Binder<Real> b(g, policy_.params(), &shard_grads[s]);
          Rng r = br.split(2, i);
          const std::size_t starts = static_cast<std::size_t>(cfg_.starts_for(inst.customers()));
          auto [loss, v] = instance_loss(policy_, b, inst, starts, r, 1.0 / static_cast<double>(per_dist[d]),
                                         cfg_.omega_beta / static_cast<double>(count),
                                         cfg_.omega_gamma / static_cast<double>(count));
          vals[i] = v;
          if (std::isfinite(v.total)) g.backward(loss);
        }
      });

      double task = 0, bal = 0, cls = 0;
      bool finite = true;
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t d = items[i].first;
        finite = finite && std::isfinite(vals[i].total);
        task += vals[i].task / static_cast<double>(per_dist[d]);
        bal += vals[i].balance / static_cast<double>(count);
        cls += vals[i].cls / static_cast<double>(count);
        dist_loss_sum[d] += vals[i].task;
        dist_count[d] += 1;
      }
      if (!finite) {
        std::ostringstream os;
        os << "non-finite loss in epoch " << (e + 1) << " batch " << bi << "; instance seeds:";
        for (const auto& it : items) os << ' ' << it.second.seed;
        throw NumericalError(os.str());
      }
      auto grads = std::move(shard_grads[0]);
      for (std::size_t s = 1; s < shards; ++s)
        for (std::size_t p = 0; p < grads.size(); ++p)
          for (std::size_t k = 0; k < grads[p].size(); ++k) grads[p].data[k] += shard_grads[s][p].data[k];
      if (cfg_.grad_clip > 0) {
        const double norm = global_norm(grads);
        if (norm > cfg_.grad_clip) {
          const Real f = static_cast<Real>(cfg_.grad_clip / norm);
          for (auto& gm : grads)
            for (auto& v : gm.data) v *= f;
        }
      }
      adam_.step(policy_.params(), grads, lr, cfg_.weight_decay);
      met.loss_task += task / static_cast<double>(batches);
      met.loss_balance += bal / static_cast<double>(batches);
      met.loss_class += cls / static_cast<double>(batches);
    }

    met.gaps = validate_epoch(policy_, validation(), cfg_.max_starts, cfg_.workers);
    for (std::size_t d = 0; d < 3; ++d) met.gaps[d] += cfg_.gap_inflation[d];
    for (std::size_t d = 0; d < 3; ++d)
      if (dist_count[d] > 0) {
        state_.last_loss[d] = dist_loss_sum[d] / dist_count[d];
        state_.have_loss[d] = true;
      }
    if (cfg_.dwa) {
      try {
        state_.sampling_probs = dwa_update(met.gaps, state_.last_loss);
      } catch (const NumericalError& err) {
        if (log_) *log_ << "warning: " << err.what() << "; keeping previous sampling probabilities\n";
      }
    }
    state_.epoch = e + 1;
    state_.adam_step = adam_.t;
    if (cfg_.wall_clock)
      met.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return met;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.policy = cfg_.policy;
    ck.train_config = to_json(cfg_);
    ck.seed = cfg_.seed;
    ck.state = state_;
    store_blocks(ck, policy_.params());
    store_blocks(ck, policy_.params(), adam_.m, "adam.m/");
    store_blocks(ck, policy_.params(), adam_.v, "adam.v/");
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (policy_to_json(ck.policy) != policy_to_json(cfg_.policy))
      throw ConfigError("checkpoint architecture differs from the configured policy");
    load_params(ck, policy_.params());
    std::vector<Matrix<Real>*> mp, vp;
    for (std::size_t i = 0; i < policy_.params().size(); ++i) {
      mp.push_back(&adam_.m[i]);
      vp.push_back(&adam_.v[i]);
    }
    load_blocks(ck, policy_.params(), mp, "adam.m/");
    load_blocks(ck, policy_.params(), vp, "adam.v/");
    adam_.t = ck.state.adam_step;
    state_ = ck.state;
  }

 private:
  TrainConfig cfg_;
  Policy<Real> policy_;
  AdamW<Real> adam_;
  TrainState state_;
  std::optional<ValidationSet> val_;
  std::ostream* log_;
};

template <typename Real>
struct TrainResult {
  std::vector<EpochMetrics> metrics;
  TrainState state;
  ParamStore<Real> params;
};

// Runs the remaining epochs, writing `metrics.csv`, `ckpt_<epoch>` and the
// effective `config.json` into out_dir. Resuming keeps metrics rows up to the
// checkpoint epoch and appends the rest.
template <typename Real>
TrainResult<Real> train_run(const TrainConfig& cfg, const std::string& out_dir,
                            const std::optional<std::string>& resume = std::nullopt, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  Trainer<Real> trainer(cfg, log);
  if (resume) trainer.restore(load_checkpoint(*resume));
  fs::create_directories(out_dir);
  save_config((fs::path(out_dir) / "config.json").string(), cfg);

  const fs::path metrics_path = fs::path(out_dir) / "metrics.csv";
  std::vector<std::string> kept;
  if (resume && fs::exists(metrics_path)) {
    std::ifstream in(metrics_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && std::stoi(line.substr(0, line.find(','))) <= trainer.state().epoch) kept.push_back(line);
  }
  {
    std::ofstream out(metrics_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + metrics_path.string());
    out << kMetricsHeader << '\n';
    for (const auto& l : kept) out << l << '\n';
  }

  TrainResult<Real> result;
  while (trainer.state().epoch < cfg.epochs) {
    auto m = trainer.run_epoch();
    {
      std::ofstream out(metrics_path, std::ios::app);
      out << metrics_row(m) << '\n';
      if (!out) throw IoError("cannot append to " + metrics_path.string());
    }
    save_checkpoint((fs::path(out_dir) / ("ckpt_" + std::to_string(m.epoch))).string(), trainer.checkpoint());
    if (log)
      *log << "epoch " << m.epoch << " loss_task " << m.loss_task << " gaps " << m.gaps[0] << ' ' << m.gaps[1] << ' '
           << m.gaps[2] << " p " << trainer.state().sampling_probs[0] << ' ' << trainer.state().sampling_probs[1]
           << ' ' << trainer.state().sampling_probs[2] << '\n';
    result.metrics.push_back(m);
  }
  result.state = trainer.state();
  result.params = trainer.policy().params();
  return result;
}

// Policy restored from a checkpoint file.
template <typename Real>
Policy<Real> load_policy(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  Policy<Real> p(ck.policy);
  load_params(ck, p.params());
  return p;
}

}  // namespace r2e
