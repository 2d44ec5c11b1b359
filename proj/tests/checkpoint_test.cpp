#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "r2e/checkpoint.hpp"
#include "r2e/config.hpp"
#include "r2e/policy.hpp"
#include "r2e/train.hpp"

using namespace r2e;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
  return (fs::temp_directory_path() / ("r2e_ckpt_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out << bytes;
}

template <typename T>
T read_le(const std::string& bytes, std::size_t off) {
  T v;
  std::memcpy(&v, bytes.data() + off, sizeof(T));
  return v;
}

}  // namespace

TEST(Checkpoint, RoundTripsParamsAndState) {
  auto cfg = preset("tiny");
  Policy<double> pol(cfg.policy);
  pol.init(9);
  Checkpoint ck;
  ck.policy = cfg.policy;
  ck.train_config = to_json(cfg);
  ck.seed = 77;
  ck.state.epoch = 4;
  ck.state.sampling_probs = {0.2, 0.5, 0.3};
  ck.state.last_loss = {-0.1, 0.25, 1e-300};
  ck.state.have_loss = {true, false, true};
  ck.state.adam_step = 123;
  store_blocks(ck, pol.params());
  const auto path = tmp_path("rt");
  save_checkpoint(path, ck);
  auto back = load_checkpoint(path);
  EXPECT_EQ(policy_to_json(back.policy), policy_to_json(ck.policy));
  EXPECT_EQ(back.train_config, ck.train_config);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.state.epoch, 4);
  EXPECT_EQ(back.state.sampling_probs, ck.state.sampling_probs);
  EXPECT_EQ(back.state.last_loss, ck.state.last_loss);
  EXPECT_EQ(back.state.have_loss, ck.state.have_loss);
  EXPECT_EQ(back.state.adam_step, 123u);
  Policy<double> other(cfg.policy);
  load_params(back, other.params());
  for (std::size_t i = 0; i < pol.params().size(); ++i)
    EXPECT_EQ(other.params().value(i).data, pol.params().value(i).data) << pol.params().name(i);
  save_checkpoint(tmp_path("rt2"), back);
  EXPECT_EQ(slurp(path), slurp(tmp_path("rt2")));
}

TEST(Checkpoint, BinaryLayout) {
  Checkpoint ck;
  ck.policy.d = 8;
  ck.policy.heads = 2;
  ck.blocks["w"] = Matrix<double>(2, 3, {1, 2, 3, 4, 5, 6.5});
  const auto path = tmp_path("layout");
  save_checkpoint(path, ck);
  const auto bytes = slurp(path);
  ASSERT_EQ(bytes.substr(0, 8), std::string("R2ECKPT\n"));
  EXPECT_EQ(read_le<std::uint32_t>(bytes, 8), 1u);
  const auto hlen = read_le<std::uint64_t>(bytes, 12);
  auto header = nlohmann::json::parse(bytes.substr(20, hlen));
  EXPECT_EQ(header["format_version"], 1);
  EXPECT_TRUE(header.contains("policy_config"));
  EXPECT_TRUE(header.contains("rng_state"));
  EXPECT_TRUE(header.contains("epoch"));
  std::size_t off = 20 + hlen;
  EXPECT_EQ(read_le<std::uint64_t>(bytes, off), 1u);
  off += 8;
  EXPECT_EQ(read_le<std::uint32_t>(bytes, off), 1u);
  EXPECT_EQ(bytes.substr(off + 4, 1), "w");
  off += 5;
  EXPECT_EQ(read_le<std::uint32_t>(bytes, off), 2u);
  EXPECT_EQ(read_le<std::uint64_t>(bytes, off + 4), 2u);
  EXPECT_EQ(read_le<std::uint64_t>(bytes, off + 12), 3u);
  EXPECT_EQ(read_le<double>(bytes, off + 20 + 5 * 8), 6.5);
  EXPECT_EQ(bytes.size(), off + 20 + 6 * 8);
}

TEST(Checkpoint, RejectsForeignAndCorruptFiles) {
  const auto path = tmp_path("bad");
  spit(path, "not a checkpoint at all");
  EXPECT_THROW(load_checkpoint(path), UnsupportedFormat);

  Checkpoint ck;
  ck.blocks["w"] = Matrix<double>(1, 1, {1});
  save_checkpoint(path, ck);
  auto bytes = slurp(path);
  auto v2 = bytes;
  v2[8] = 2;
  spit(path, v2);
  EXPECT_THROW(load_checkpoint(path), UnsupportedFormat);
  spit(path, bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(path), IoError);
  EXPECT_THROW(load_checkpoint(tmp_path("missing_file")), IoError);
}

TEST(Checkpoint, ShapeMismatchAndMissingBlocks) {
  auto cfg = preset("tiny");
  Policy<double> pol(cfg.policy);
  Checkpoint ck;
  store_blocks(ck, pol.params());
  auto wrong = cfg.policy;
  wrong.d = 16;
  Policy<double> big(wrong);
  EXPECT_THROW(load_params(ck, big.params()), UnsupportedFormat);
  ck.blocks.erase(ck.blocks.begin());
  EXPECT_THROW(load_params(ck, pol.params()), UnsupportedFormat);
}

TEST(Checkpoint, TrainerCheckpointCarriesOptimizerState) {
  auto cfg = preset("tiny");
  cfg.workers = 1;
  Trainer<double> t(cfg);
  t.run_epoch();
  auto ck = t.checkpoint();
  for (std::size_t i = 0; i < t.policy().params().size(); ++i) {
    const auto& name = t.policy().params().name(i);
    EXPECT_TRUE(ck.blocks.count(name));
    EXPECT_TRUE(ck.blocks.count("adam.m/" + name));
    EXPECT_TRUE(ck.blocks.count("adam.v/" + name));
  }
  EXPECT_EQ(ck.state.epoch, 1);
  EXPECT_EQ(ck.state.adam_step, t.optimizer().t);
  Trainer<double> u(cfg);
  u.restore(ck);
  EXPECT_EQ(u.state().epoch, 1);
  EXPECT_EQ(u.optimizer().t, t.optimizer().t);
  for (std::size_t i = 0; i < u.policy().params().size(); ++i) {
    EXPECT_EQ(u.optimizer().m[i].data, t.optimizer().m[i].data);
    EXPECT_EQ(u.optimizer().v[i].data, t.optimizer().v[i].data);
  }
}

TEST(Checkpoint, FloatPolicyLoads) {
  auto cfg = preset("tiny");
  Policy<double> pol(cfg.policy);
  pol.init(2);
  Checkpoint ck;
  ck.policy = cfg.policy;
  store_blocks(ck, pol.params());
  const auto path = tmp_path("f32");
  save_checkpoint(path, ck);
  auto f = load_policy<float>(path);
  EXPECT_EQ(f.params().value(0).data[0], static_cast<float>(pol.params().value(0).data[0]));
}

TEST(Config, PresetsAreValid) {
  for (const char* name : {"paper", "desk", "tiny"}) EXPECT_NO_THROW(preset(name).validate()) << name;
  auto paper = preset("paper");
  EXPECT_EQ(paper.policy.d, 128);
  EXPECT_EQ(paper.policy.heads, 8);
  EXPECT_EQ(paper.policy.enc_layers, 6);
  EXPECT_EQ(paper.policy.moe.m, 8);
  EXPECT_EQ(paper.policy.moe.k, 3);
  EXPECT_EQ(paper.policy.moe.int_dim, 128);
  EXPECT_EQ(paper.batch, 256);
  EXPECT_DOUBLE_EQ(paper.lr, 1e-4);
  EXPECT_DOUBLE_EQ(paper.weight_decay, 1e-6);
  EXPECT_EQ(paper.epochs, 5000);
  EXPECT_EQ(paper.instances_per_epoch, 20000);
  EXPECT_DOUBLE_EQ(paper.omega_beta, 0.1);
  EXPECT_DOUBLE_EQ(paper.omega_gamma, 0.01);
  auto tiny = preset("tiny");
  EXPECT_EQ(tiny.n, 6);
  EXPECT_EQ(tiny.policy.d, 8);
  EXPECT_EQ(tiny.policy.heads, 2);
  EXPECT_EQ(tiny.policy.enc_layers, 1);
  EXPECT_EQ(tiny.policy.moe.m, 3);
  EXPECT_EQ(tiny.policy.moe.k, 2);
  EXPECT_THROW(preset("huge"), ConfigError);
}

TEST(Config, JsonRoundTripAndOverlay) {
  auto c = preset("desk");
  c.seed = 99;
  c.sampling_probs = {0.5, 0.25, 0.25};
  c.policy.decoder_routing = DecoderRouting::node;
  auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  auto ov = config_from_json(nlohmann::json{{"preset", "tiny"}, {"epochs", 7}, {"moe", {{"k", 3}}}});
  EXPECT_EQ(ov.epochs, 7);
  EXPECT_EQ(ov.policy.moe.k, 3);
  EXPECT_EQ(ov.policy.moe.m, 3);
  EXPECT_EQ(ov.policy.d, 8);
  const auto path = tmp_path("cfg.json");
  save_config(path, c);
  EXPECT_EQ(to_json(load_config(path)), to_json(c));
}

TEST(Config, ErrorsNameTheField) {
  auto expect_field = [](const nlohmann::json& j, const std::string& field) {
    try {
      config_from_json(j);
      FAIL() << "expected ConfigError for " << field;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  expect_field({{"lerning_rate", 1}}, "lerning_rate");
  expect_field({{"lr", "fast"}}, "lr");
  expect_field({{"sampling_probs", {0.5, 0.5}}}, "sampling_probs");
  expect_field({{"sampling_probs", {0.5, 0.5, 0.5}}}, "sampling_probs");
  expect_field({{"moe", {{"experts", 4}}}}, "moe.experts");
  expect_field({{"moe", {{"k", 9}}}}, "moe.k");
  expect_field({{"precision", "f16"}}, "precision");
  expect_field({{"num_classes", 4}}, "num_classes");
  const auto path = tmp_path("broken.json");
  spit(path, "{ not json");
  EXPECT_THROW(load_config(path), ConfigError);
}
