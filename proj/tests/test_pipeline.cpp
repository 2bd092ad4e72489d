#include <gtest/gtest.h>

#include "cfl/pipeline.hpp"

using namespace cfl;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.detector.num_id_classes = 2;
  c.detector.image_size = 32;
  c.detector.c1 = 4;
  c.detector.c2 = 6;
  c.detector.c3 = 8;
  c.detector.rpn_channels = 8;
  c.detector.hidden = 16;
  c.detector.embed_hidden = 12;
  c.detector.embed_dim = 8;
  c.detector.train_proposals = 8;
  c.detector.eval_proposals = 8;
  c.pool.capacity = 16;
  c.schedule.stage1_iters = 6;
  c.schedule.stage2_iters = 6;
  c.schedule.batch_labeled = 2;
  c.schedule.batch_unlabeled = 2;
  c.schedule.warmup_iters = 2;
  // a low threshold so that the random tiny teacher still emits pseudo-labels
  c.schedule.pseudo_threshold = 0.2;
  c.seed = 3;
  return c.normalized();
}

Splits tiny_splits() {
  SplitConfig sc;
  sc.id_classes = {Shape::Circle, Shape::Square};
  sc.ood_classes = {Shape::Star};
  sc.num_labeled = 6;
  sc.num_unlabeled = 6;
  sc.num_test = 3;
  sc.seed = 21;
  sc.render.height = sc.render.width = 32;
  sc.render.min_size = 8;
  sc.render.max_size = 12;
  return build_splits(sc);
}

}  // namespace

TEST(Schedule, AlphaTDecaysLinearlyAndClamps) {
  ScheduleConfig s;
  s.stage1_iters = 100;
  s.stage2_iters = 300;
  EXPECT_DOUBLE_EQ(alpha_t_schedule(0, s), 0.1);
  EXPECT_NEAR(alpha_t_schedule(200, s), 0.055, 1e-12);
  EXPECT_NEAR(alpha_t_schedule(400, s), 0.01, 1e-12);
  EXPECT_NEAR(alpha_t_schedule(10000, s), 0.01, 1e-12);
}

TEST(Schedule, ValidationRejectsBadValues) {
  ScheduleConfig s;
  s.ema_momentum = 1.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = ScheduleConfig{};
  s.pseudo_threshold = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = ScheduleConfig{};
  s.lambda = -1.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_NO_THROW(ScheduleConfig{}.validate());
}

TEST(Ema, ScalarRecurrenceIsExact) {
  // dyadic momenta keep every iterate exactly representable, so the result
  // must equal the closed form m^n t0 + (1 - m^n) s bit for bit
  for (double m : {0.5, 0.75}) {
    DetectorParams t, s;
    for (int i = 0; i < kNumParams; ++i) {
      t[i] = nn::Mat::Constant(1, 1, 2.0f);
      s[i] = nn::Mat::Constant(1, 1, -1.0f);
    }
    for (int n = 1; n <= 10; ++n) {
      ema_update(t, s, m);
      const double mn = std::pow(m, n);
      for (int i = 0; i < kNumParams; ++i) ASSERT_EQ(t[i](0, 0), static_cast<float>(mn * 2.0 + (1 - mn) * -1.0));
    }
  }
}

TEST(Ema, MatchesClosedFormForGeneralMomentum) {
  DetectorParams t, s;
  for (int i = 0; i < kNumParams; ++i) {
    t[i] = nn::Mat::Constant(1, 1, 2.0f);
    s[i] = nn::Mat::Constant(1, 1, -1.0f);
  }
  for (int n = 0; n < 50; ++n) ema_update(t, s, 0.9);
  EXPECT_NEAR(t[kConv1B](0, 0), std::pow(0.9, 50) * 2.0 + (1 - std::pow(0.9, 50)) * -1.0, 1e-5);
}

TEST(Ema, RejectsBadMomentumAndShapes) {
  const auto cfg = tiny_train_config();
  auto a = init_params(cfg.detector, 1);
  auto b = a;
  EXPECT_THROW(ema_update(a, b, 1.0), std::invalid_argument);
  EXPECT_THROW(ema_update(a, b, 0.0), std::invalid_argument);
  b[kFc1W] = nn::Mat::Zero(1, 1);
  EXPECT_THROW(ema_update(a, b, 0.5), std::invalid_argument);
}

TEST(Pipeline, StageOneLeavesTeacherAloneUntilTheEnd) {
  const auto cfg = tiny_train_config();
  const Detector det(cfg.detector);
  const auto sp = tiny_splits();
  TrainState st = init_state(cfg);
  st.teacher[kFc1B](0, 0) = 42.0f;  // make the teacher distinguishable
  const auto before = checksum(st.teacher);
  for (int i = 0; i < 3; ++i) {
    train_step(det, st, sp.labeled, {}, cfg, 1);
    EXPECT_EQ(checksum(st.teacher), before);
  }
  EXPECT_FALSE(st.student == st.teacher);
}

TEST(Pipeline, StageTwoTeacherFollowsEmaOfStudent) {
  const auto cfg = tiny_train_config();
  const Detector det(cfg.detector);
  const auto sp = tiny_splits();
  TrainState st = train_stage1(det, sp.labeled, cfg);
  EXPECT_TRUE(st.student == st.teacher);
  const DetectorParams teacher_before = st.teacher;
  train_step(det, st, sp.labeled, without_annotations(sp.unlabeled), cfg, 2);
  DetectorParams expect = teacher_before;
  ema_update(expect, st.student, cfg.schedule.ema_momentum);
  EXPECT_TRUE(expect == st.teacher);
}

TEST(Pipeline, ZeroLambdaMatchesSupervisedOnlyTraining) {
  auto cfg = tiny_train_config();
  cfg.schedule.lambda = 0.0;
  const Detector det(cfg.detector);
  const auto sp = tiny_splits();
  TrainState a = train_stage1(det, sp.labeled, cfg);
  train_stage2(det, a, sp.labeled, without_annotations(sp.unlabeled), cfg);

  auto sup = cfg;
  sup.schedule.stage1_iters = cfg.schedule.stage1_iters + cfg.schedule.stage2_iters;
  sup.schedule.stage2_iters = 0;
  const TrainState b = train_stage1(det, sp.labeled, sup);
  EXPECT_EQ(a.iteration, b.iteration);
  EXPECT_TRUE(a.student == b.student);
}

TEST(Pipeline, UnsupervisedBranchHasNoRegressionGradient) {
  const auto cfg = tiny_train_config();
  const Detector det(cfg.detector);
  const auto sp = tiny_splits();
  const TrainState st = init_state(cfg);
  const auto& img = sp.unlabeled[0].image;
  const std::vector<Target> pseudo = {{{4, 4, 16, 16}, 0}, {{18, 18, 30, 30}, cfg.detector.label_space().unknown_id()}};
  ForwardOptions fo;
  fo.training = true;
  const auto fwd = det.forward(st.student, img, &pseudo, fo);
  const auto il = image_loss(det, fwd, pseudo, Branch::Unsupervised, st.pool.snapshot(),
                             cfg.schedule.weights(0.1), cfg.flags, 1.0);
  EXPECT_TRUE(il.grads.roi_deltas.isZero());
  EXPECT_TRUE(il.grads.rpn_deltas.isZero());
  EXPECT_EQ(il.terms.rpn_reg, 0.0);
  EXPECT_EQ(il.terms.roi_reg, 0.0);
  DetectorParams g = st.student.zeros_like();
  det.backward(st.student, fwd, il.grads, g);
  EXPECT_TRUE(g[kBoxW].isZero());
  EXPECT_TRUE(g[kBoxB].isZero());
  EXPECT_FALSE(g[kClsW].isZero());

  const auto sup = image_loss(det, fwd, pseudo, Branch::Supervised, st.pool.snapshot(), cfg.schedule.weights(0.1),
                              cfg.flags, 1.0);
  EXPECT_FALSE(sup.grads.roi_deltas.isZero());
}

TEST(Pipeline, EmptyUnlabeledSetDegeneratesToSupervised) {
  const auto cfg = tiny_train_config();
  const Detector det(cfg.detector);
  const auto sp = tiny_splits();
  TrainState a = train_stage1(det, sp.labeled, cfg);
  TrainState b = a;
  train_step(det, a, sp.labeled, {}, cfg, 2);
  train_step(det, b, sp.labeled, {}, cfg, 1);
  EXPECT_TRUE(a.student == b.student);
}

TEST(Pipeline, RunsAreReproducible) {
  const auto cfg = tiny_train_config();
  const Detector det(cfg.detector);
  const auto sp = tiny_splits();
  auto run = [&] {
    TrainState s = train_stage1(det, sp.labeled, cfg);
    train_stage2(det, s, sp.labeled, without_annotations(sp.unlabeled), cfg);
    return s;
  };
  const TrainState a = run();
  const TrainState b = run();
  EXPECT_TRUE(a.student == b.student);
  EXPECT_TRUE(a.teacher == b.teacher);
  EXPECT_TRUE(a.momentum == b.momentum);
}

TEST(Pipeline, PoolFillsFromLabeledBatches) {
  const auto cfg = tiny_train_config();
  const Detector det(cfg.detector);
  const auto sp = tiny_splits();
  const TrainState s = train_stage1(det, sp.labeled, cfg);
  EXPECT_GT(s.pool.size(0) + s.pool.size(1), 0u);
  EXPECT_EQ(s.pool.size(cfg.detector.label_space().unknown_id()), 0u);
}

TEST(Pipeline, PseudoLabelsAreThresholded) {
  const auto cfg = tiny_train_config();
  const Detector det(cfg.detector);
  const auto sp = tiny_splits();
  const TrainState s = train_stage1(det, sp.labeled, cfg);
  for (const auto& smp : sp.unlabeled)
    for (const auto& d : generate_pseudo_labels(det, s.teacher, smp.image, cfg.schedule))
      EXPECT_GE(d.score, cfg.schedule.pseudo_threshold);
}
