#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cfl/checkpoint.hpp"
#include "cfl/config.hpp"

using namespace cfl;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run_config() {
  RunConfig c = parse_config(R"(
data.id_classes = circle,square
data.ood_classes = star
data.num_labeled = 6
data.num_unlabeled = 6
data.num_test = 3
data.image_size = 32
data.min_size = 8
data.max_size = 12
detector.c1 = 4
detector.c2 = 6
detector.c3 = 8
detector.rpn_channels = 8
detector.hidden = 16
detector.embed_hidden = 12
detector.embed_dim = 8
detector.train_proposals = 8
detector.eval_proposals = 8
pool.capacity = 16
schedule.stage1_iters = 4
schedule.stage2_iters = 4
schedule.batch_labeled = 2
schedule.batch_unlabeled = 2
schedule.warmup_iters = 2
schedule.pseudo_threshold = 0.2
)");
  c.validate();
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cfl_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Config, DefaultsValidateAndEchoRoundTrips) {
  const RunConfig def;
  EXPECT_NO_THROW(def.validate());
  const std::string text = to_text(def);
  EXPECT_EQ(to_text(parse_config(text)), text);
  // one line per key, in registry order
  std::istringstream in(text);
  std::string line;
  std::size_t i = 0;
  const auto keys = config_keys();
  while (std::getline(in, line)) {
    ASSERT_LT(i, keys.size());
    EXPECT_EQ(line.substr(0, line.find('=')), keys[i++]);
  }
  EXPECT_EQ(i, keys.size());
}

TEST(Config, RoundTripPreservesNonDefaultValues) {
  RunConfig c = tiny_run_config();
  apply_setting(c, "loss.tau=0.30000000000000004");
  apply_setting(c, "seed=18446744073709551615");
  apply_setting(c, "loss.enable_fc=false");
  const RunConfig back = parse_config(to_text(c));
  EXPECT_EQ(back.train.schedule.tau, 0.30000000000000004);
  EXPECT_EQ(back.train.seed, 18446744073709551615ULL);
  EXPECT_FALSE(back.train.flags.enable_fc);
  EXPECT_EQ(back.train.detector, c.train.detector);
  EXPECT_EQ(back.split.id_classes, c.split.id_classes);
  EXPECT_EQ(to_text(back), to_text(c));
}

TEST(Config, UnknownKeyRejectedWithLineNumber) {
  try {
    parse_config("seed=1\nloss.tua=0.2\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("loss.tua"), std::string::npos);
  }
}

TEST(Config, MalformedValuesRejected) {
  RunConfig c;
  EXPECT_THROW(apply_setting(c, "schedule.lr=fast"), ConfigError);
  EXPECT_THROW(apply_setting(c, "schedule.stage1_iters=1.5"), ConfigError);
  EXPECT_THROW(apply_setting(c, "loss.enable_uc=yes"), ConfigError);
  EXPECT_THROW(apply_setting(c, "data.id_classes=circle,hexagon"), ConfigError);
  EXPECT_THROW(apply_setting(c, "no_equals_sign"), ConfigError);
}

TEST(Config, LaterAssignmentWinsAndCommentsIgnored) {
  const RunConfig c = parse_config("# comment\n\nloss.lambda=1\nloss.lambda = 3.5 \n");
  EXPECT_EQ(c.train.schedule.lambda, 3.5);
}

TEST(Config, ClassListDrivesDetectorClassCount) {
  RunConfig c;
  apply_setting(c, "data.id_classes=circle,square,triangle");
  EXPECT_EQ(c.train.detector.num_id_classes, 3);
  EXPECT_NO_THROW(c.validate());
  apply_setting(c, "data.ood_classes=triangle");
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, CrossFieldValidation) {
  RunConfig c;
  apply_setting(c, "data.max_size=40");
  EXPECT_THROW(c.validate(), ConfigError);
  RunConfig d;
  apply_setting(d, "schedule.ema_momentum=1");
  EXPECT_THROW(d.validate(), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const RunConfig rc = tiny_run_config();
  const TrainConfig tc = rc.train.normalized();
  const Splits splits = build_splits(rc.split);
  const Detector det(tc.detector);
  TrainState state = train_stage1(det, splits.labeled, tc);
  train_stage2(det, state, splits.labeled, splits.unlabeled, tc);
  ASSERT_GT(state.pool.size(0) + state.pool.size(1), 0u);

  const Checkpoint ck{rc, state, 2};
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(ck));
  EXPECT_EQ(back.stage, 2);
  EXPECT_EQ(back.state.iteration, state.iteration);
  EXPECT_EQ(back.state.rng_state, state.rng_state);
  EXPECT_TRUE(back.state.student == state.student);
  EXPECT_TRUE(back.state.teacher == state.teacher);
  EXPECT_TRUE(back.state.momentum == state.momentum);
  EXPECT_EQ(to_text(back.config), to_text(rc));
  for (int c = 0; c < state.pool.num_classes(); ++c) {
    ASSERT_EQ(back.state.pool.size(c), state.pool.size(c));
    for (std::size_t i = 0; i < state.pool.size(c); ++i) {
      EXPECT_EQ(back.state.pool.entries(c)[i].vector, state.pool.entries(c)[i].vector);
      EXPECT_EQ(back.state.pool.entries(c)[i].score, state.pool.entries(c)[i].score);
    }
    EXPECT_EQ(back.state.pool.center(c).has_value(), state.pool.center(c).has_value());
  }
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const RunConfig rc = tiny_run_config();
  const TrainConfig tc = rc.train.normalized();
  const Splits splits = build_splits(rc.split);
  const Detector det(tc.detector);

  TrainState full = train_stage1(det, splits.labeled, tc);
  train_stage2(det, full, splits.labeled, splits.unlabeled, tc);

  TrainState part = train_stage1(det, splits.labeled, tc);
  // interrupt stage 2 after two steps under the same schedule
  for (int i = 0; i < 2; ++i) train_step(det, part, splits.labeled, splits.unlabeled, tc, 2);
  Checkpoint resumed = deserialize_checkpoint(serialize_checkpoint({rc, part, 1}));
  train_stage2(det, resumed.state, splits.labeled, splits.unlabeled, tc);

  EXPECT_TRUE(resumed.state.student == full.student);
  EXPECT_TRUE(resumed.state.teacher == full.teacher);
}

TEST(Checkpoint, VersionMismatchIsExplicit) {
  const RunConfig rc = tiny_run_config();
  std::string bytes = serialize_checkpoint({rc, init_state(rc.train), 0});
  const std::uint32_t v = kCheckpointVersion + 1;
  std::memcpy(bytes.data() + sizeof kCheckpointMagic, &v, sizeof v);
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version mismatch"), std::string::npos);
  }
}

TEST(Checkpoint, CorruptionAndTruncationDetected) {
  const RunConfig rc = tiny_run_config();
  const std::string bytes = serialize_checkpoint({rc, init_state(rc.train), 0});
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(flipped), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 9)), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint("garbage"), CheckpointError);
}

TEST(Checkpoint, AtomicWriteLeavesNoTemporary) {
  const fs::path dir = temp_dir("atomic");
  const RunConfig rc = tiny_run_config();
  const fs::path p = dir / "ck" / "model.ckpt";
  save_checkpoint(p, {rc, init_state(rc.train), 0});
  save_checkpoint(p, {rc, init_state(rc.train), 1});
  EXPECT_TRUE(fs::exists(p));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(p.parent_path())) {
    (void)e;
    ++files;
  }
  EXPECT_EQ(files, 1u);
  EXPECT_EQ(load_checkpoint(p).stage, 1);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
  fs::remove_all(dir);
}
