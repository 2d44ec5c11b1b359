#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "r2e/errors.hpp"
#include "r2e/rng.hpp"
#include "r2e/tensor.hpp"

namespace r2e {

// Named, ordered parameter blocks.
template <typename Real>
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::size_t rows, std::size_t cols) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    index_[name] = values_.size();
    names_.push_back(name);
    values_.emplace_back(rows, cols);
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Matrix<Real>& value(std::size_t i) const { return values_[i]; }
  Matrix<Real>& value(std::size_t i) { return values_[i]; }

  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  // Zero-filled buffers shaped like every block.
  std::vector<Matrix<Real>> zeros_like() const {
    std::vector<Matrix<Real>> out;
    out.reserve(values_.size());
    for (const auto& v : values_) out.emplace_back(v.rows, v.cols);
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix<Real>> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Binds parameter blocks into one graph on first use. With a gradient buffer
// set, backward accumulates into it; otherwise parameters are constants.
template <typename Real>
class Binder {
 public:
  Binder(Graph<Real>& g, const ParamStore<Real>& store, std::vector<Matrix<Real>>* grads = nullptr)
      : graph_(g), store_(store), grads_(grads), cache_(store.size(), kUnbound) {
    if (grads_ && grads_->size() != store.size()) throw ContractError("gradient buffer count mismatch");
  }

  Tensor<Real> operator()(std::size_t param) {
    if (cache_[param] == kUnbound)
      cache_[param] = graph_.bind(store_.value(param), grads_ ? &(*grads_)[param] : nullptr).id;
    return Tensor<Real>{&graph_, cache_[param]};
  }

  Graph<Real>& graph() { return graph_; }
  const ParamStore<Real>& store() const { return store_; }

 private:
  static constexpr std::size_t kUnbound = static_cast<std::size_t>(-1);
  Graph<Real>& graph_;
  const ParamStore<Real>& store_;
  std::vector<Matrix<Real>>* grads_;
  std::vector<std::size_t> cache_;
};

// y = x W (+ b), W stored [in x out], b [1 x out].
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = static_cast<std::size_t>(-1);
  bool has_bias() const { return bias != static_cast<std::size_t>(-1); }

  template <typename Real>
  static Linear make(ParamStore<Real>& store, const std::string& name, std::size_t in, std::size_t out,
                     bool with_bias) {
    Linear l;
    l.weight = store.add(name + ".weight", in, out);
    if (with_bias) l.bias = store.add(name + ".bias", 1, out);
    return l;
  }

  template <typename Real>
  Tensor<Real> operator()(Binder<Real>& b, const Tensor<Real>& x) const {
    auto y = matmul(x, b(weight));
    return has_bias() ? add(y, b(bias)) : y;
  }
};

// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = rows of the block
// (biases use the fan-in of their weight, passed explicitly).
template <typename Real>
void init_uniform_fan_in(Matrix<Real>& m, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : m.data) v = static_cast<Real>(rng.uniform(-bound, bound));
}

}  // namespace r2e
