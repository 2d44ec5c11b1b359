#pragma once

// Attention encoder-decoder routing policy with MoE feed-forward blocks.
//
// Encoder: input embedding, then `enc_layers` blocks of
//   h <- IN(h + MHA(h)),  h <- IN(h + FF(h))
// where FF is a node-routed MoE layer or a dense ReLU FFN.
// Instance head: z = mean(MHA(h)), class probabilities softmax(z W + b).
// Decoder: context [graph mean | last node | first node or remaining load]
// projected to a query, one masked MHA over node embeddings, a residual FF
// block (MoE gated once per instance from z, or per query), and a clipped
// single-head compatibility over nodes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "r2e/env.hpp"
#include "r2e/errors.hpp"
#include "r2e/instance.hpp"
#include "r2e/moe.hpp"
#include "r2e/params.hpp"
#include "r2e/rng.hpp"
#include "r2e/tensor.hpp"

namespace r2e {

enum class MoEPlacement { dense, encoder_only, decoder_only, both };
enum class DecoderRouting { instance, node };

inline std::string to_string(MoEPlacement p) {
  switch (p) {
    case MoEPlacement::dense: return "dense";
    case MoEPlacement::encoder_only: return "encoder_only";
    case MoEPlacement::decoder_only: return "decoder_only";
    case MoEPlacement::both: return "both";
  }
  return "?";
}
inline std::string to_string(DecoderRouting r) { return r == DecoderRouting::instance ? "instance" : "node"; }

inline MoEPlacement placement_from_string(const std::string& s) {
  for (auto p : {MoEPlacement::dense, MoEPlacement::encoder_only, MoEPlacement::decoder_only, MoEPlacement::both})
    if (to_string(p) == s) return p;
  throw ConfigError("moe_placement must be dense, encoder_only, decoder_only or both, got '" + s + "'");
}

inline DecoderRouting decoder_routing_from_string(const std::string& s) {
  if (s == "instance") return DecoderRouting::instance;
  if (s == "node") return DecoderRouting::node;
  throw ConfigError("decoder_routing must be instance or node, got '" + s + "'");
}

struct PolicyConfig {
  Problem problem = Problem::tsp;
  int d = 128;
  int heads = 8;
  int enc_layers = 6;
  MoEConfig moe;
  MoEPlacement moe_placement = MoEPlacement::both;
  DecoderRouting decoder_routing = DecoderRouting::instance;
  double clip = 10.0;
  int num_classes = 3;

  bool encoder_moe() const { return moe_placement == MoEPlacement::encoder_only || moe_placement == MoEPlacement::both; }
  bool decoder_moe() const { return moe_placement == MoEPlacement::decoder_only || moe_placement == MoEPlacement::both; }

  void validate() const {
    if (d < 1 || heads < 1) throw ConfigError("d and heads must be positive");
    if (d % heads != 0) throw ConfigError("d must be divisible by heads");
    if (enc_layers < 0) throw ConfigError("enc_layers must be non-negative");
    if (!(clip > 0)) throw ConfigError("clip must be positive");
    if (num_classes < 1) throw ConfigError("num_classes must be at least 1");
    moe.validate();
  }
};

struct MHAParams {
  std::size_t wq = 0, wk = 0, wv = 0;  // no bias
  Linear combine;

  template <typename Real>
  static MHAParams make(ParamStore<Real>& s, const std::string& name, std::size_t q_in, std::size_t d) {
    MHAParams p;
    p.wq = s.add(name + ".wq", q_in, d);
    p.wk = s.add(name + ".wk", d, d);
    p.wv = s.add(name + ".wv", d, d);
    p.combine = Linear::make(s, name + ".combine", d, d, true);
    return p;
  }
};

struct FFNParams {
  Linear up, down;

  template <typename Real>
  static FFNParams make(ParamStore<Real>& s, const std::string& name, std::size_t d, std::size_t hidden) {
    return {Linear::make(s, name + ".up", d, hidden, true), Linear::make(s, name + ".down", hidden, d, true)};
  }

  template <typename Real>
  Tensor<Real> operator()(Binder<Real>& b, const Tensor<Real>& x) const {
    return down(b, relu(up(b, x)));
  }
};

struct NormParams {
  std::size_t gamma = 0, beta = 0;
};

struct EncoderLayerParams {
  MHAParams attn;
  NormParams norm1, norm2;
  std::optional<MoELayer> moe;
  std::optional<FFNParams> ffn;
};

// Keys and values split per head; used by encoder self-attention and reused
// across all decoding steps.
template <typename Real>
struct HeadCache {
  std::vector<Tensor<Real>> keys, values;
};

template <typename Real>
struct Encoding {
  Tensor<Real> node_embs;     // [nodes x d]
  Tensor<Real> z_inst;        // [1 x d]
  Tensor<Real> class_logits;  // [1 x C]
  Tensor<Real> class_probs;   // [1 x C]
  std::vector<Routing<Real>> encoder_routings;
  std::optional<Routing<Real>> decoder_gates;
  // decoder precomputation
  HeadCache<Real> heads;
  Tensor<Real> graph_mean;  // [1 x d]
  int decoder_route_calls = 0;
};

template <typename Real>
struct DecodeOutput {
  Tensor<Real> logits;  // clipped compatibilities [active x nodes]
  std::vector<std::uint8_t> mask;
};

enum class DecodeMode { greedy, sample };

template <typename Real>
struct Rollout {
  std::vector<std::vector<int>> tours;
  std::vector<double> costs;
  Tensor<Real> log_prob;  // [starts x 1]
  Encoding<Real> encoding;
  std::vector<Routing<Real>> decoder_step_routings;  // node routing only
};

template <typename Real>
class Policy {
 public:
  explicit Policy(PolicyConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const PolicyConfig& config() const { return cfg_; }
  ParamStore<Real>& params() { return store_; }
  const ParamStore<Real>& params() const { return store_; }

  // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every linear map; norm
  // scales start at 1 and shifts at 0.
  void init(std::uint64_t seed) {
    Rng root(seed);
    for (std::size_t i = 0; i < store_.size(); ++i) {
      Rng r = root.split(i);
      const std::string& name = store_.name(i);
      Matrix<Real>& v = store_.value(i);
      if (name.ends_with(".gamma")) {
        std::fill(v.data.begin(), v.data.end(), Real(1));
      } else if (name.ends_with(".beta")) {
        std::fill(v.data.begin(), v.data.end(), Real(0));
      } else if (name.ends_with(".bias")) {
        const std::string wname = name.substr(0, name.size() - 4) + "weight";
        init_uniform_fan_in(v, store_.value(store_.find(wname)).rows, r);
      } else {
        init_uniform_fan_in(v, v.rows, r);
      }
    }
  }

  // ------------------------------------------------------------------ encoder

  Encoding<Real> encode(Binder<Real>& b, const Instance& inst, Rng* gate_rng = nullptr) const {
    if (inst.problem != cfg_.problem) throw ContractError("instance problem differs from the policy's problem");
    Graph<Real>& g = b.graph();
    Encoding<Real> enc;
    Tensor<Real> h;
    if (cfg_.problem == Problem::tsp) {
      Matrix<Real> feats(inst.node_count(), 2);
      for (std::size_t i = 0; i < inst.node_count(); ++i) {
        feats(i, 0) = static_cast<Real>(inst.coords[i].x);
        feats(i, 1) = static_cast<Real>(inst.coords[i].y);
      }
      h = embed_(b, g.constant(std::move(feats)));
    } else {
      Matrix<Real> depot(1, 2), cust(inst.customers(), 3);
      depot(0, 0) = static_cast<Real>(inst.coords[0].x);
      depot(0, 1) = static_cast<Real>(inst.coords[0].y);
      for (std::size_t i = 0; i < inst.customers(); ++i) {
        cust(i, 0) = static_cast<Real>(inst.coords[i + 1].x);
        cust(i, 1) = static_cast<Real>(inst.coords[i + 1].y);
        cust(i, 2) = static_cast<Real>(inst.demands[i]);
      }
      h = concat_rows<Real>({(*depot_embed_)(b, g.constant(std::move(depot))), embed_(b, g.constant(std::move(cust)))});
    }
    for (const auto& layer : layers_) {
      h = instance_norm(add(h, self_attention(b, layer.attn, h)), b(layer.norm1.gamma), b(layer.norm1.beta));
      Tensor<Real> ff;
      if (layer.moe) {
        auto routing = route(b, *layer.moe, h, gate_rng);
        ff = moe_forward(b, *layer.moe, h, routing);
        enc.encoder_routings.push_back(std::move(routing));
      } else {
        ff = (*layer.ffn)(b, h);
      }
      h = instance_norm(add(h, ff), b(layer.norm2.gamma), b(layer.norm2.beta));
    }
    enc.node_embs = h;
    enc.z_inst = instance_representation(b, h);
    enc.class_logits = classifier_(b, enc.z_inst);
    enc.class_probs = softmax_rows(enc.class_logits);
    if (decoder_moe_ && cfg_.decoder_routing == DecoderRouting::instance) {
      enc.decoder_gates = route(b, *decoder_moe_, enc.z_inst, gate_rng);
      ++enc.decoder_route_calls;
    }
    enc.heads = split_kv(b, decoder_attn_, h);
    enc.graph_mean = mean_rows(h);
    return enc;
  }

  // One dedicated self-attention block followed by mean pooling over nodes.
  Tensor<Real> instance_representation(Binder<Real>& b, const Tensor<Real>& node_embs) const {
    return mean_rows(self_attention(b, inst_attn_, node_embs));
  }

  // ------------------------------------------------------------------ decoder

  // Clipped compatibilities for the active starts. `states` are the rollout
  // states of those starts.
  DecodeOutput<Real> decode_logits(Binder<Real>& b, Encoding<Real>& enc, const Instance& inst,
                                   const std::vector<const RolloutState*>& states, Rng* gate_rng = nullptr,
                                   std::vector<Routing<Real>>* step_routings = nullptr) const {
    Graph<Real>& g = b.graph();
    const std::size_t rows = states.size(), nodes = inst.node_count();
    if (rows == 0) throw ContractError("decode_logits: no active state");
    DecodeOutput<Real> out;
    out.mask.resize(rows * nodes);
    std::vector<std::size_t> last(rows), first(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const RolloutState& s = *states[r];
      if (s.current < 0) throw ContractError("decode_logits: the first node must be chosen before decoding");
      auto m = feasible_mask(s, inst);
      if (std::none_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; }))
        throw InfeasibleError("no feasible action for start " + std::to_string(r));
      std::copy(m.begin(), m.end(), out.mask.begin() + static_cast<std::ptrdiff_t>(r * nodes));
      last[r] = static_cast<std::size_t>(s.current);
      first[r] = static_cast<std::size_t>(s.partial_tour.front());
    }
    std::vector<Tensor<Real>> ctx{repeat_rows(enc.graph_mean, rows), gather_rows(enc.node_embs, last)};
    if (cfg_.problem == Problem::tsp) {
      ctx.push_back(gather_rows(enc.node_embs, first));
    } else {
      Matrix<Real> load(rows, 1);
      for (std::size_t r = 0; r < rows; ++r)
        load(r, 0) = static_cast<Real>(states[r]->remaining_capacity / inst.capacity);
      ctx.push_back(g.constant(std::move(load)));
    }
    auto q = matmul(concat_cols(ctx), b(decoder_attn_.wq));
    auto a = decoder_attn_.combine(b, attend(q, enc.heads, out.mask));
    Tensor<Real> ff;
    if (decoder_moe_) {
      if (cfg_.decoder_routing == DecoderRouting::instance) {
        ff = moe_forward(b, *decoder_moe_, a, *enc.decoder_gates);
      } else {
        auto routing = route(b, *decoder_moe_, a, gate_rng);
        ++enc.decoder_route_calls;
        ff = moe_forward(b, *decoder_moe_, a, routing);
        if (step_routings) step_routings->push_back(std::move(routing));
      }
    } else {
      ff = (*decoder_ffn_)(b, a);
    }
    auto hq = add(a, ff);
    auto compat = scale(matmul_nt(hq, enc.node_embs), Real(1) / std::sqrt(static_cast<Real>(cfg_.d)));
    out.logits = scale(tanh(compat), static_cast<Real>(cfg_.clip));
    return out;
  }

  // Next-node probabilities over all nodes (masked entries are 0).
  Tensor<Real> decode_step(Binder<Real>& b, Encoding<Real>& enc, const Instance& inst,
                           const std::vector<const RolloutState*>& states, Rng* gate_rng = nullptr) const {
    auto out = decode_logits(b, enc, inst, states, gate_rng);
    return masked_softmax(out.logits, out.mask);
  }

  // Multi-start rollout: start r forces its first node (TSP city r, CVRP
  // customer r + 1). With `replay`, actions are read from the given tours.
  Rollout<Real> rollout(Binder<Real>& b, const Instance& inst, DecodeMode mode, std::size_t starts,
                        Rng* rng = nullptr, const std::vector<std::vector<int>>* replay = nullptr) const {
    const std::size_t firsts = inst.customers();
    if (starts < 1 || starts > firsts) throw ContractError("starts must lie in [1, " + std::to_string(firsts) + "]");
    if (mode == DecodeMode::sample && !rng && !replay) throw ContractError("sampling rollout requires a random stream");
    if (replay && replay->size() != starts) throw ContractError("replay must provide one tour per start");
    Graph<Real>& g = b.graph();
    Rollout<Real> ro;
    ro.encoding = encode(b, inst, rng);
    std::vector<RolloutState> states(starts, initial_state(inst));
    for (std::size_t r = 0; r < starts; ++r) {
      const int forced = cfg_.problem == Problem::tsp ? static_cast<int>(r) : static_cast<int>(r + 1);
      if (replay && (*replay)[r].size() > states[r].partial_tour.size() &&
          (*replay)[r][states[r].partial_tour.size()] != forced)
        throw ContractError("replayed tour does not begin with its start node");
      states[r] = step(std::move(states[r]), forced, inst);
    }
    ro.log_prob = g.constant(Matrix<Real>(starts, 1));
    const std::size_t nodes = inst.node_count();
    while (true) {
      std::vector<std::size_t> active;
      std::vector<const RolloutState*> ptrs;
      for (std::size_t r = 0; r < starts; ++r)
        if (!states[r].done) {
          active.push_back(r);
          ptrs.push_back(&states[r]);
        }
      if (active.empty()) break;
      auto dec = decode_logits(b, ro.encoding, inst, ptrs, rng, &ro.decoder_step_routings);
      auto logp = masked_log_softmax(dec.logits, dec.mask);
      std::vector<std::size_t> rows(active.size()), actions(active.size());
      for (std::size_t i = 0; i < active.size(); ++i) {
        rows[i] = i;
        const RolloutState& s = states[active[i]];
        std::size_t a;
        if (replay) {
          const auto& t = (*replay)[active[i]];
          if (s.partial_tour.size() >= t.size()) throw ContractError("replayed tour ended early");
          a = static_cast<std::size_t>(t[s.partial_tour.size()]);
          if (a >= nodes || !dec.mask[i * nodes + a]) throw ContractError("replayed action is infeasible");
        } else if (mode == DecodeMode::greedy) {
          a = nodes;
          for (std::size_t j = 0; j < nodes; ++j)
            if (dec.mask[i * nodes + j] && (a == nodes || logp(i, j) > logp(i, a))) a = j;
        } else {
          std::vector<double> w(nodes, 0.0);
          for (std::size_t j = 0; j < nodes; ++j)
            if (dec.mask[i * nodes + j]) w[j] = std::exp(static_cast<double>(logp(i, j)));
          a = rng->categorical(w);
        }
        actions[i] = a;
      }
      auto chosen = pick(logp, rows, actions);
      ro.log_prob = add(ro.log_prob, scatter_rows(chosen, active, starts));
      for (std::size_t i = 0; i < active.size(); ++i)
        states[active[i]] = step(std::move(states[active[i]]), static_cast<int>(actions[i]), inst);
    }
    for (auto& s : states) {
      ro.costs.push_back(tour_length(inst, s.partial_tour));
      ro.tours.push_back(std::move(s.partial_tour));
    }
    return ro;
  }

  // Mean load-balancing loss over every MoE layer used in the rollout, or
  // nullopt for a dense model.
  std::optional<Tensor<Real>> balance_loss(const Rollout<Real>& ro) const {
    std::vector<Tensor<Real>> terms;
    const int k = cfg_.moe.k;
    for (const auto& r : ro.encoding.encoder_routings) terms.push_back(load_balance_loss(r.raw_probs, r.selected, k));
    if (ro.encoding.decoder_gates) {
      const auto& r = *ro.encoding.decoder_gates;
      terms.push_back(load_balance_loss(r.raw_probs, r.selected, k));
    } else if (!ro.decoder_step_routings.empty()) {
      std::vector<Tensor<Real>> probs;
      std::vector<std::vector<int>> sel;
      for (const auto& r : ro.decoder_step_routings) {
        probs.push_back(r.raw_probs);
        sel.insert(sel.end(), r.selected.begin(), r.selected.end());
      }
      terms.push_back(load_balance_loss(concat_rows(probs), sel, k));
    }
    if (terms.empty()) return std::nullopt;
    Tensor<Real> total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return scale(total, Real(1) / static_cast<Real>(terms.size()));
  }

  // -log softmax(logits)[label]
  Tensor<Real> class_loss(const Encoding<Real>& enc, int label) const {
    if (label < 0 || label >= cfg_.num_classes) throw ContractError("class label out of range");
    auto lp = masked_log_softmax(enc.class_logits);
    return scale(pick(lp, {0}, {static_cast<std::size_t>(label)}), Real(-1));
  }

 private:
  void build() {
    const auto d = static_cast<std::size_t>(cfg_.d);
    if (cfg_.problem == Problem::tsp) {
      embed_ = Linear::make(store_, "embed", 2, d, true);
    } else {
      depot_embed_ = Linear::make(store_, "embed_depot", 2, d, true);
      embed_ = Linear::make(store_, "embed", 3, d, true);
    }
    for (int l = 0; l < cfg_.enc_layers; ++l) {
      const std::string p = "encoder." + std::to_string(l);
      EncoderLayerParams layer;
      layer.attn = MHAParams::make(store_, p + ".attn", d, d);
      layer.norm1 = {store_.add(p + ".norm1.gamma", 1, d), store_.add(p + ".norm1.beta", 1, d)};
      if (cfg_.encoder_moe())
        layer.moe = MoELayer::make(store_, p + ".moe", d, cfg_.moe);
      else
        layer.ffn = FFNParams::make(store_, p + ".ffn", d, static_cast<std::size_t>(cfg_.moe.int_dim));
      layer.norm2 = {store_.add(p + ".norm2.gamma", 1, d), store_.add(p + ".norm2.beta", 1, d)};
      layers_.push_back(std::move(layer));
    }
    inst_attn_ = MHAParams::make(store_, "instance.attn", d, d);
    classifier_ = Linear::make(store_, "instance.classifier", d, static_cast<std::size_t>(cfg_.num_classes), true);
    const std::size_t ctx_dim = cfg_.problem == Problem::tsp ? 3 * d : 2 * d + 1;
    decoder_attn_ = MHAParams::make(store_, "decoder.attn", ctx_dim, d);
    if (cfg_.decoder_moe())
      decoder_moe_ = MoELayer::make(store_, "decoder.moe", d, cfg_.moe);
    else
      decoder_ffn_ = FFNParams::make(store_, "decoder.ffn", d, static_cast<std::size_t>(cfg_.moe.int_dim));
  }

  HeadCache<Real> split_kv(Binder<Real>& b, const MHAParams& p, const Tensor<Real>& x) const {
    HeadCache<Real> hc;
    const auto d = static_cast<std::size_t>(cfg_.d), dh = d / static_cast<std::size_t>(cfg_.heads);
    auto k = matmul(x, b(p.wk));
    auto v = matmul(x, b(p.wv));
    for (int h = 0; h < cfg_.heads; ++h) {
      const std::size_t lo = static_cast<std::size_t>(h) * dh;
      hc.keys.push_back(slice_cols(k, lo, lo + dh));
      hc.values.push_back(slice_cols(v, lo, lo + dh));
    }
    return hc;
  }

  // Concatenated per-head attention outputs (before the combine map). Mask
  // (if any) is over keys, one row per query.
  Tensor<Real> attend(const Tensor<Real>& q, const HeadCache<Real>& hc, std::span<const std::uint8_t> mask) const {
    const auto dh = static_cast<std::size_t>(cfg_.d / cfg_.heads);
    const Real inv = Real(1) / std::sqrt(static_cast<Real>(dh));
    std::vector<Tensor<Real>> outs;
    for (int h = 0; h < cfg_.heads; ++h) {
      const std::size_t lo = static_cast<std::size_t>(h) * dh;
      auto qh = cfg_.heads == 1 ? q : slice_cols(q, lo, lo + dh);
      auto scores = scale(matmul_nt(qh, hc.keys[static_cast<std::size_t>(h)]), inv);
      outs.push_back(matmul(masked_softmax(scores, mask), hc.values[static_cast<std::size_t>(h)]));
    }
    return outs.size() == 1 ? outs.front() : concat_cols(outs);
  }

  Tensor<Real> self_attention(Binder<Real>& b, const MHAParams& p, const Tensor<Real>& x) const {
    auto hc = split_kv(b, p, x);
    auto q = matmul(x, b(p.wq));
    return p.combine(b, attend(q, hc, {}));
  }

  PolicyConfig cfg_;
  ParamStore<Real> store_;
  Linear embed_;
  std::optional<Linear> depot_embed_;
  std::vector<EncoderLayerParams> layers_;
  MHAParams inst_attn_;
  Linear classifier_;
  MHAParams decoder_attn_;
  std::optional<MoELayer> decoder_moe_;
  std::optional<FFNParams> decoder_ffn_;
};

// -log(probs[label]) for a probability row.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& probs, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.cols()) throw ContractError("class label out of range");
  return scale(log(pick(probs, {0}, {static_cast<std::size_t>(label)})), Real(-1));
}

}  // namespace r2e
