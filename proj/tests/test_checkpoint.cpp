#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "pclm/checkpoint.hpp"
#include "pclm/config.hpp"
#include "pclm/trainer.hpp"
#include "test_util.hpp"

using namespace pclm;
using pclm::testing::bit_equal;
namespace fs = std::filesystem;

namespace {

Checkpoint sample_checkpoint() {
  RunConfig cfg;
  cfg.encoder.num_layers = 2;
  cfg.encoder.hidden_dim = 8;
  cfg.encoder.ffn_dim = 8;
  cfg.encoder.max_len = 8;
  cfg.encoder.vocab_size = 12;
  ParameterStore p;
  init_model(p, cfg);
  Checkpoint c;
  c.config_snapshot = config_to_text(cfg, false);
  add_params(c, p);
  return c;
}

}  // namespace

TEST(Checkpoint, HeaderLayout) {
  Checkpoint c;
  c.config_snapshot = "a: 1\n";
  c.records["x"] = Tensor::matrix({{1.5, -2.0}});
  const std::string b = serialize_checkpoint(c);
  const std::string expected_prefix = std::string("PCLM") + std::string("\x01\x00\x00\x00", 4) +
                                      std::string("\x05\x00\x00\x00", 4) + "a: 1\n" +
                                      std::string("\x01\x00\x00\x00", 4) +
                                      std::string("\x01\x00\x00\x00", 4) + "x" +
                                      std::string("\x02\x00\x00\x00\x01\x00\x00\x00\x02\x00\x00\x00", 12);
  ASSERT_EQ(b.size(), expected_prefix.size() + 16);
  EXPECT_EQ(b.substr(0, expected_prefix.size()), expected_prefix);
  // 1.5 = 0x3FF8000000000000, little-endian
  EXPECT_EQ(b.substr(expected_prefix.size(), 8), std::string("\0\0\0\0\0\0\xF8\x3F", 8));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto c = sample_checkpoint();
  const auto dir = fs::temp_directory_path() / "pclm_ckpt_test";
  fs::create_directories(dir);
  save_checkpoint(c, dir / "a.pclm");
  const auto loaded = load_checkpoint(dir / "a.pclm");
  save_checkpoint(loaded, dir / "b.pclm");
  EXPECT_EQ(serialize_checkpoint(loaded), serialize_checkpoint(c));
  std::ifstream a(dir / "a.pclm", std::ios::binary), b(dir / "b.pclm", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(loaded.config_snapshot, c.config_snapshot);
  for (const auto& [name, t] : c.records) EXPECT_TRUE(bit_equal(t, loaded.records.at(name))) << name;
  EXPECT_FALSE(fs::exists(dir / "a.pclm.tmp"));
}

TEST(Checkpoint, EveryTruncationIsReported) {
  const std::string b = serialize_checkpoint(sample_checkpoint());
  for (std::size_t len = 0; len < b.size(); len += (len < 200 ? 1 : 997)) {
    EXPECT_THROW(parse_checkpoint(b.substr(0, len)), TruncatedError) << "length " << len;
  }
}

TEST(Checkpoint, BadMagicVersionAndTrailingBytes) {
  std::string b = serialize_checkpoint(sample_checkpoint());
  std::string magic = b;
  magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(magic), BadMagicError);
  std::string version = b;
  version[4] = 2;
  EXPECT_THROW(parse_checkpoint(version), VersionError);
  EXPECT_THROW(parse_checkpoint(b + "z"), CheckpointError);
}

TEST(Checkpoint, EncoderOnlyLoadsForEvalNotTraining) {
  auto c = sample_checkpoint();
  std::erase_if(c.records, [](const auto& kv) { return kv.first.starts_with("pathway."); });
  const auto parsed = parse_checkpoint(serialize_checkpoint(c));
  auto eval = params_from_checkpoint(parsed, LoadMode::eval);
  EXPECT_TRUE(eval.has_prefix(kEncoderPrefix));
  EXPECT_THROW(params_from_checkpoint(parsed, LoadMode::train), MissingPathwayError);
  Checkpoint empty;
  EXPECT_THROW(params_from_checkpoint(empty, LoadMode::eval), MissingTensorError);
}

TEST(Checkpoint, EvalLoadIgnoresPathway) {
  const auto c = sample_checkpoint();
  auto eval = params_from_checkpoint(c, LoadMode::eval);
  EXPECT_FALSE(eval.has_prefix(kPathwayPrefix));
  auto train = params_from_checkpoint(c, LoadMode::train);
  EXPECT_TRUE(train.has_prefix(kPathwayPrefix));
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/x.pclm"), IoError);
}

TEST(Config, TextRoundTrip) {
  RunConfig cfg;
  parse_config_text("# toy\nencoder.layers: 3\ntrain.lr: 0.0025\npc.mode: half\npaths.corpus: /tmp/c.txt\n", cfg);
  EXPECT_EQ(cfg.encoder.num_layers, 3u);
  EXPECT_EQ(cfg.train.lr, 0.0025);
  EXPECT_EQ(cfg.pc.mode, PcMode::half);
  EXPECT_EQ(cfg.paths.corpus, "/tmp/c.txt");
  RunConfig again;
  parse_config_text(config_to_text(cfg), again);
  EXPECT_EQ(config_to_text(again), config_to_text(cfg));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  RunConfig cfg;
  EXPECT_THROW(parse_config_text("encoder.depth: 3\n", cfg), ConfigError);
  EXPECT_THROW(parse_config_text("encoder.layers: three\n", cfg), ConfigError);
  EXPECT_THROW(parse_config_text("encoder.layers: -1\n", cfg), ConfigError);
  EXPECT_THROW(parse_config_text("train.lr 0.1\n", cfg), ConfigError);
  EXPECT_THROW(parse_config_text("train.lr: 0.1\ntrain.lr: 0.2\n", cfg), ConfigError);
  EXPECT_THROW(parse_config_text("pc.mode: sideways\n", cfg), ConfigError);
  EXPECT_THROW(apply_override(cfg, "train.lr"), ConfigError);
}

TEST(Config, OverridesAndValidation) {
  RunConfig cfg;
  ConfigKeys seen;
  apply_override(cfg, "train.mask_rate=1.5", &seen);
  EXPECT_TRUE(seen.contains("train.mask_rate"));
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg.train.mask_rate = 0.1;
  EXPECT_NO_THROW(validate(cfg));
  cfg.encoder.num_heads = 3;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg.encoder.num_heads = 2;
  cfg.train.lr = 0.0;
  EXPECT_THROW(validate(cfg), ConfigError);
}

TEST(Config, SeedEnvironmentIsLastResort) {
  ::setenv("PCLM_SEED", "99", 1);
  RunConfig cfg;
  apply_seed_env(cfg, {});
  EXPECT_EQ(cfg.train.seed, 99u);
  RunConfig explicit_seed;
  ConfigKeys seen;
  apply_override(explicit_seed, "train.seed=5", &seen);
  apply_seed_env(explicit_seed, seen);
  EXPECT_EQ(explicit_seed.train.seed, 5u);
  ::unsetenv("PCLM_SEED");
}
