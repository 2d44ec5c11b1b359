#pragma once

// Versioned binary checkpoint:
//   "R2ECKPT\n" | u32 version | u64 header length | JSON header
//   | u64 block count | blocks: u32 name length, name, u32 rank, u64 dims[rank], f64 data
// All integers and floats little-endian.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2e/config.hpp"
#include "r2e/errors.hpp"
#include "r2e/params.hpp"
#include "r2e/policy.hpp"
#include "r2e/tensor.hpp"

namespace r2e {

inline constexpr char kCheckpointMagic[8] = {'R', '2', 'E', 'C', 'K', 'P', 'T', '\n'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainState {
  int epoch = 0;  // completed epochs
  std::array<double, 3> sampling_probs{1.0 / 3, 1.0 / 3, 1.0 / 3};
  std::array<double, 3> last_loss{0, 0, 0};
  std::array<bool, 3> have_loss{false, false, false};
  std::uint64_t adam_step = 0;
};

struct Checkpoint {
  PolicyConfig policy;
  nlohmann::json train_config;  // null when not produced by training
  std::uint64_t seed = 0;
  TrainState state;
  std::map<std::string, Matrix<double>> blocks;
};

namespace detail {

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::string& path) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw IoError("truncated checkpoint " + path);
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json h;
  h["format_version"] = kCheckpointVersion;
  h["policy_config"] = policy_to_json(ck.policy);
  h["train_config"] = ck.train_config;
  h["rng_state"] = {{"seed", ck.seed}};
  h["epoch"] = ck.state.epoch;
  h["train_state"] = {{"sampling_probs", ck.state.sampling_probs},
                      {"last_loss", ck.state.last_loss},
                      {"have_loss", ck.state.have_loss},
                      {"adam_step", ck.state.adam_step}};
  const std::string header = h.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::put_le<std::uint64_t>(out, ck.blocks.size());
  for (const auto& [name, m] : ck.blocks) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(out, 2);
    detail::put_le<std::uint64_t>(out, m.rows);
    detail::put_le<std::uint64_t>(out, m.cols);
    for (double v : m.data) detail::put_le<double>(out, v);
  }
  if (!out) throw IoError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw UnsupportedFormat(path + " is not a checkpoint");
  const auto version = detail::get_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw UnsupportedFormat("checkpoint version " + std::to_string(version) + " is not supported");
  const auto hlen = detail::get_le<std::uint64_t>(in, path);
  std::string header(hlen, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(hlen))) throw IoError("truncated checkpoint " + path);
  Checkpoint ck;
  try {
    const auto h = nlohmann::json::parse(header);
    ck.policy = policy_from_json(h.at("policy_config"));
    ck.train_config = h.at("train_config");
    ck.seed = h.at("rng_state").at("seed").get<std::uint64_t>();
    ck.state.epoch = h.at("epoch").get<int>();
    const auto& ts = h.at("train_state");
    ck.state.sampling_probs = ts.at("sampling_probs").get<std::array<double, 3>>();
    ck.state.last_loss = ts.at("last_loss").get<std::array<double, 3>>();
    ck.state.have_loss = ts.at("have_loss").get<std::array<bool, 3>>();
    ck.state.adam_step = ts.at("adam_step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw UnsupportedFormat("checkpoint header of " + path + " is malformed: " + e.what());
  }
  const auto count = detail::get_le<std::uint64_t>(in, path);
  for (std::uint64_t b = 0; b < count; ++b) {
    const auto nlen = detail::get_le<std::uint32_t>(in, path);
    std::string name(nlen, '\0');
    if (!in.read(name.data(), nlen)) throw IoError("truncated checkpoint " + path);
    const auto rank = detail::get_le<std::uint32_t>(in, path);
    if (rank != 2) throw UnsupportedFormat("block " + name + " has rank " + std::to_string(rank));
    const auto rows = detail::get_le<std::uint64_t>(in, path);
    const auto cols = detail::get_le<std::uint64_t>(in, path);
    Matrix<double> m(rows, cols);
    for (auto& v : m.data) v = detail::get_le<double>(in, path);
    ck.blocks.emplace(std::move(name), std::move(m));
  }
  return ck;
}

template <typename Real>
void store_blocks(Checkpoint& ck, const ParamStore<Real>& store, const std::string& prefix = "") {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& v = store.value(i);
    Matrix<double> m(v.rows, v.cols);
    for (std::size_t k = 0; k < v.size(); ++k) m.data[k] = static_cast<double>(v.data[k]);
    ck.blocks[prefix + store.name(i)] = std::move(m);
  }
}

template <typename Real>
void store_blocks(Checkpoint& ck, const ParamStore<Real>& names, const std::vector<Matrix<Real>>& values,
                  const std::string& prefix) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& v = values[i];
    Matrix<double> m(v.rows, v.cols);
    for (std::size_t k = 0; k < v.size(); ++k) m.data[k] = static_cast<double>(v.data[k]);
    ck.blocks[prefix + names.name(i)] = std::move(m);
  }
}

// Copy blocks `prefix + name` into `out[i]` for every parameter name.
template <typename Real>
void load_blocks(const Checkpoint& ck, const ParamStore<Real>& names, std::vector<Matrix<Real>*> out,
                 const std::string& prefix = "") {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string key = prefix + names.name(i);
    auto it = ck.blocks.find(key);
    if (it == ck.blocks.end()) throw UnsupportedFormat("checkpoint lacks block " + key);
    Matrix<Real>& dst = *out[i];
    if (it->second.rows != dst.rows || it->second.cols != dst.cols)
      throw UnsupportedFormat("checkpoint block " + key + " has shape " + shape_str(it->second.rows, it->second.cols) +
                              ", expected " + shape_str(dst.rows, dst.cols));
    for (std::size_t k = 0; k < dst.size(); ++k) dst.data[k] = static_cast<Real>(it->second.data[k]);
  }
}

template <typename Real>
void load_params(const Checkpoint& ck, ParamStore<Real>& store) {
  std::vector<Matrix<Real>*> out;
  for (std::size_t i = 0; i < store.size(); ++i) out.push_back(&store.value(i));
  load_blocks(ck, store, out);
}

}  // namespace r2e
