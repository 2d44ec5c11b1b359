#pragma once

// Finite-difference check of the full training loss with respect to every
// model parameter. Actions are sampled once and then replayed, so the loss is
// a smooth function of the parameters around the probe point.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "r2e/config.hpp"
#include "r2e/instance.hpp"
#include "r2e/params.hpp"
#include "r2e/policy.hpp"
#include "r2e/rng.hpp"
#include "r2e/tensor.hpp"
#include "r2e/train.hpp"

namespace r2e {

struct BlockError {
  std::string name;
  std::size_t size = 0;
  double worst = 0;
};

struct GradCheckReport {
  double max_error = 0;
  std::string worst_block;
  std::vector<BlockError> blocks;
  double loss = 0;
  std::size_t coordinates = 0;
};

// One instance of each training distribution; loss summed as in training
// (per-distribution task means plus weighted auxiliary means).
inline GradCheckReport total_loss_grad_check(const TrainConfig& cfg, double h = 1e-4) {
  cfg.validate();
  Policy<double> policy(cfg.policy);
  policy.init(cfg.seed);
  std::vector<Instance> batch;
  for (std::size_t d = 0; d < 3; ++d) {
    DistributionSpec spec;
    spec.family = kTrainFamilies[d];
    spec.n = cfg.n;
    batch.push_back(generate_instance(spec, cfg.policy.problem, dataset_instance_seed(cfg.seed, d)));
  }
  const double count = static_cast<double>(batch.size());
  std::vector<std::vector<std::vector<int>>> replay(batch.size());

  auto evaluate = [&](std::vector<Matrix<double>>* grads) {
    double total = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Graph<double> g(grads != nullptr);
      Binder<double> b(g, policy.params(), grads);
      Rng rng = Rng(cfg.seed).split(7, i);
      const auto starts = static_cast<std::size_t>(cfg.starts_for(batch[i].customers()));
      auto [loss, vals] = instance_loss(policy, b, batch[i], starts, rng, 1.0, cfg.omega_beta / count,
                                        cfg.omega_gamma / count, &replay[i]);
      if (grads) g.backward(loss);
      total += vals.total;
    }
    return total;
  };

  GradCheckReport rep;
  auto grads = policy.params().zeros_like();
  rep.loss = evaluate(&grads);
  auto& store = policy.params();
  for (std::size_t p = 0; p < store.size(); ++p) {
    BlockError be{store.name(p), store.value(p).size(), 0.0};
    auto& vals = store.value(p).data;
    for (std::size_t k = 0; k < vals.size(); ++k) {
      const double orig = vals[k];
      vals[k] = orig + h;
      const double up = evaluate(nullptr);
      vals[k] = orig - h;
      const double down = evaluate(nullptr);
      vals[k] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = grads[p].data[k];
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(an))
        throw NumericalError("grad check: non-finite value in block " + store.name(p), k);
      be.worst = std::max(be.worst, std::abs(an - fd) / std::max(1.0, std::abs(fd)));
      ++rep.coordinates;
    }
    if (be.worst > rep.max_error) {
      rep.max_error = be.worst;
      rep.worst_block = be.name;
    }
    rep.blocks.push_back(std::move(be));
  }
  return rep;
}

}  // namespace r2e
