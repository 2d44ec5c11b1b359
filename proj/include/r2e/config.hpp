#pragma once

// Flat JSON run configuration: policy architecture, training schedule and
// run plumbing, plus named presets.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "r2e/errors.hpp"
#include "r2e/instance.hpp"
#include "r2e/moe.hpp"
#include "r2e/policy.hpp"

namespace r2e {

struct TrainConfig {
  PolicyConfig policy;
  int n = 100;
  std::uint64_t seed = 1;
  // schedule
  std::array<double, 3> sampling_probs{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double omega_beta = 0.1;    // load balance
  double omega_gamma = 0.01;  // distribution classification
  double lr = 1e-4;
  double weight_decay = 1e-6;
  double lr_decay_at = 0.9;  // fraction of epochs after which lr is divided by 10
  int epochs = 5000;
  int instances_per_epoch = 20000;
  int batch = 256;
  bool dwa = true;
  // plumbing
  int val_size = 1000;
  int max_starts = 0;  // 0: one start per customer
  int shard_size = 8;
  double grad_clip = 1.0;
  int workers = 0;  // 0: hardware concurrency
  bool wall_clock = true;
  std::string precision = "f64";
  std::array<double, 3> gap_inflation{0, 0, 0};

  void validate() const {
    policy.validate();
    if (n < 2) throw ConfigError("n must be at least 2");
    double s = 0;
    for (double p : sampling_probs) {
      if (!(p >= 0) || !std::isfinite(p)) throw ConfigError("sampling_probs must be non-negative");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("sampling_probs must sum to 1");
    if (!(omega_beta >= 0) || !(omega_gamma >= 0)) throw ConfigError("omega_beta and omega_gamma must be non-negative");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (!(lr_decay_at >= 0 && lr_decay_at <= 1)) throw ConfigError("lr_decay_at must lie in [0, 1]");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (instances_per_epoch < 1) throw ConfigError("instances_per_epoch must be at least 1");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    if (val_size < 1) throw ConfigError("val_size must be at least 1");
    if (max_starts < 0) throw ConfigError("max_starts must be non-negative");
    if (shard_size < 1) throw ConfigError("shard_size must be at least 1");
    if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be non-negative (0 disables)");
    if (workers < 0) throw ConfigError("workers must be non-negative");
    if (precision != "f64" && precision != "f32") throw ConfigError("precision must be f64 or f32");
    if (policy.num_classes != 3) throw ConfigError("num_classes must be 3 for training on Uniform, Cluster, Mixed");
  }

  int starts_for(std::size_t customers) const {
    const int c = static_cast<int>(customers);
    return max_starts > 0 ? std::min(max_starts, c) : c;
  }
};

inline TrainConfig preset(const std::string& name) {
  TrainConfig c;
  if (name == "paper") {
    c.policy.d = 128;
    c.policy.heads = 8;
    c.policy.enc_layers = 6;
    c.policy.moe = MoEConfig{8, 3, ExpertKind::r2e, 128, true, GatingMode::topk};
    c.batch = 256;
    c.lr = 1e-4;
    c.weight_decay = 1e-6;
    c.epochs = 5000;
    c.instances_per_epoch = 20000;
    c.n = 100;
    c.val_size = 1000;
    return c;
  }
  if (name == "desk") {
    c.policy.d = 64;
    c.policy.heads = 4;
    c.policy.enc_layers = 3;
    c.policy.moe = MoEConfig{4, 2, ExpertKind::r2e, 64, true, GatingMode::topk};
    c.n = 10;
    c.epochs = 30;
    c.instances_per_epoch = 2000;
    c.batch = 32;
    c.lr = 1e-3;
    c.val_size = 64;
    return c;
  }
  if (name == "tiny") {
    c.policy.d = 8;
    c.policy.heads = 2;
    c.policy.enc_layers = 1;
    c.policy.moe = MoEConfig{3, 2, ExpertKind::r2e, 8, true, GatingMode::topk};
    c.n = 6;
    c.epochs = 2;
    c.instances_per_epoch = 16;
    c.batch = 8;
    c.lr = 1e-3;
    c.val_size = 8;
    c.shard_size = 4;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (valid: paper, desk, tiny)");
}

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const std::string& name) {
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + name + "' has the wrong type");
  }
}

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config " + where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown config field '" + where + it.key() + "'");
}

template <typename T, std::size_t N>
std::array<T, N> array_field(const nlohmann::json& j, const std::string& name) {
  const auto& v = j.at(name);
  if (!v.is_array() || v.size() != N)
    throw ConfigError("config field '" + name + "' must be an array of " + std::to_string(N) + " numbers");
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!v[i].is_number()) throw ConfigError("config field '" + name + "' must hold numbers");
    out[i] = v[i].get<T>();
  }
  return out;
}

}  // namespace detail

inline nlohmann::json moe_to_json(const MoEConfig& m) {
  return {{"m", m.m},
          {"k", m.k},
          {"expert_kind", to_string(m.expert_kind)},
          {"int_dim", m.int_dim},
          {"shared_expert", m.shared_expert},
          {"gating", to_string(m.gating)}};
}

inline MoEConfig moe_from_json(const nlohmann::json& j, MoEConfig m = {}) {
  detail::check_keys(j, {"m", "k", "expert_kind", "int_dim", "shared_expert", "gating"}, "moe.");
  if (j.contains("m")) m.m = detail::field<int>(j, "m");
  if (j.contains("k")) m.k = detail::field<int>(j, "k");
  if (j.contains("expert_kind")) m.expert_kind = expert_kind_from_string(detail::field<std::string>(j, "expert_kind"));
  if (j.contains("int_dim")) m.int_dim = detail::field<int>(j, "int_dim");
  if (j.contains("shared_expert")) m.shared_expert = detail::field<bool>(j, "shared_expert");
  if (j.contains("gating")) m.gating = gating_from_string(detail::field<std::string>(j, "gating"));
  return m;
}

inline nlohmann::json policy_to_json(const PolicyConfig& p) {
  return {{"problem", to_string(p.problem)},
          {"d", p.d},
          {"heads", p.heads},
          {"enc_layers", p.enc_layers},
          {"moe", moe_to_json(p.moe)},
          {"moe_placement", to_string(p.moe_placement)},
          {"decoder_routing", to_string(p.decoder_routing)},
          {"clip", p.clip},
          {"num_classes", p.num_classes}};
}

inline const std::set<std::string>& policy_keys() {
  static const std::set<std::string> k{"problem",       "d",    "heads",      "enc_layers", "moe", "moe_placement",
                                       "decoder_routing", "clip", "num_classes"};
  return k;
}

inline void apply_policy_fields(const nlohmann::json& j, PolicyConfig& p) {
  if (j.contains("problem")) p.problem = problem_from_string(detail::field<std::string>(j, "problem"));
  if (j.contains("d")) p.d = detail::field<int>(j, "d");
  if (j.contains("heads")) p.heads = detail::field<int>(j, "heads");
  if (j.contains("enc_layers")) p.enc_layers = detail::field<int>(j, "enc_layers");
  if (j.contains("moe")) p.moe = moe_from_json(j.at("moe"), p.moe);
  if (j.contains("moe_placement"))
    p.moe_placement = placement_from_string(detail::field<std::string>(j, "moe_placement"));
  if (j.contains("decoder_routing"))
    p.decoder_routing = decoder_routing_from_string(detail::field<std::string>(j, "decoder_routing"));
  if (j.contains("clip")) p.clip = detail::field<double>(j, "clip");
  if (j.contains("num_classes")) p.num_classes = detail::field<int>(j, "num_classes");
}

inline PolicyConfig policy_from_json(const nlohmann::json& j) {
  detail::check_keys(j, policy_keys(), "");
  PolicyConfig p;
  apply_policy_fields(j, p);
  p.validate();
  return p;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = policy_to_json(c.policy);
  j["n"] = c.n;
  j["seed"] = c.seed;
  j["sampling_probs"] = c.sampling_probs;
  j["omega_beta"] = c.omega_beta;
  j["omega_gamma"] = c.omega_gamma;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["lr_decay_at"] = c.lr_decay_at;
  j["epochs"] = c.epochs;
  j["instances_per_epoch"] = c.instances_per_epoch;
  j["batch"] = c.batch;
  j["dwa"] = c.dwa;
  j["val_size"] = c.val_size;
  j["max_starts"] = c.max_starts;
  j["shard_size"] = c.shard_size;
  j["grad_clip"] = c.grad_clip;
  j["workers"] = c.workers;
  j["wall_clock"] = c.wall_clock;
  j["precision"] = c.precision;
  j["gap_inflation"] = c.gap_inflation;
  return j;
}

// Overlay the fields present in `j` onto `base`.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  std::set<std::string> allowed = policy_keys();
  allowed.insert({"n", "seed", "sampling_probs", "omega_beta", "omega_gamma", "lr", "weight_decay", "lr_decay_at",
                  "epochs", "instances_per_epoch", "batch", "dwa", "val_size", "max_starts", "shard_size",
                  "grad_clip", "workers", "wall_clock", "precision", "gap_inflation", "preset"});
  detail::check_keys(j, allowed, "");
  TrainConfig c = j.contains("preset") ? preset(detail::field<std::string>(j, "preset")) : std::move(base);
  apply_policy_fields(j, c.policy);
  using detail::field;
  if (j.contains("n")) c.n = field<int>(j, "n");
  if (j.contains("seed")) c.seed = field<std::uint64_t>(j, "seed");
  if (j.contains("sampling_probs")) c.sampling_probs = detail::array_field<double, 3>(j, "sampling_probs");
  if (j.contains("omega_beta")) c.omega_beta = field<double>(j, "omega_beta");
  if (j.contains("omega_gamma")) c.omega_gamma = field<double>(j, "omega_gamma");
  if (j.contains("lr")) c.lr = field<double>(j, "lr");
  if (j.contains("weight_decay")) c.weight_decay = field<double>(j, "weight_decay");
  if (j.contains("lr_decay_at")) c.lr_decay_at = field<double>(j, "lr_decay_at");
  if (j.contains("epochs")) c.epochs = field<int>(j, "epochs");
  if (j.contains("instances_per_epoch")) c.instances_per_epoch = field<int>(j, "instances_per_epoch");
  if (j.contains("batch")) c.batch = field<int>(j, "batch");
  if (j.contains("dwa")) c.dwa = field<bool>(j, "dwa");
  if (j.contains("val_size")) c.val_size = field<int>(j, "val_size");
  if (j.contains("max_starts")) c.max_starts = field<int>(j, "max_starts");
  if (j.contains("shard_size")) c.shard_size = field<int>(j, "shard_size");
  if (j.contains("grad_clip")) c.grad_clip = field<double>(j, "grad_clip");
  if (j.contains("workers")) c.workers = field<int>(j, "workers");
  if (j.contains("wall_clock")) c.wall_clock = field<bool>(j, "wall_clock");
  if (j.contains("precision")) c.precision = field<std::string>(j, "precision");
  if (j.contains("gap_inflation")) c.gap_inflation = detail::array_field<double, 3>(j, "gap_inflation");
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j, std::move(base));
}

inline void save_config(const std::string& path, const TrainConfig& c) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << to_json(c).dump(2) << '\n';
}

}  // namespace r2e
