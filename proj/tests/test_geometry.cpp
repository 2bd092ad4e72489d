#include <gtest/gtest.h>

#include <random>

#include "cfl/geometry.hpp"
#include "oracles.hpp"

using namespace cfl;

TEST(Iou, IdentityAndDisjoint) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 2, 2}, {0, 0, 2, 2}), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {2, 2, 3, 3}), 0.0);
}

TEST(Iou, PartialOverlapMatchesGridOracle) {
  const double oracle = testing_oracles::grid_iou({0, 0, 2, 2}, {1, 1, 3, 3}, 64);
  EXPECT_NEAR(oracle, 1.0 / 7.0, 1e-12);
  EXPECT_NEAR(iou({0, 0, 2, 2}, {1, 1, 3, 3}), oracle, 1e-12);
}

TEST(Iou, MatchesGridOracleOnGridAlignedBoxes) {
  // coordinates on a 1/8 lattice make the counting oracle exact
  std::mt19937_64 rng(1);
  for (int i = 0; i < 300; ++i) {
    const auto a = testing_oracles::random_grid_box(rng, 6, 8);
    const auto b = testing_oracles::random_grid_box(rng, 6, 8);
    EXPECT_NEAR(iou(a, b), testing_oracles::grid_iou(a, b, 8), 1e-12);
  }
}

TEST(Iou, MatchesGridOracleOnContinuousBoxes) {
  // each box edge moves the count by at most one cell row, giving a bound of
  // roughly (perimeter / area) cells relative error on every area
  std::mt19937_64 rng(2);
  const int q = 200;
  for (int i = 0; i < 40; ++i) {
    const auto a = testing_oracles::random_box(rng, 6.0);
    const auto b = testing_oracles::random_box(rng, 6.0);
    const double h = 1.0 / q;
    const double rel = 2 * h * (1 / a.width() + 1 / a.height() + 1 / b.width() + 1 / b.height());
    EXPECT_NEAR(iou(a, b), testing_oracles::grid_iou(a, b, q), 3 * rel);
  }
}

TEST(Iou, DegenerateBoxIsRejected) {
  EXPECT_THROW(iou({0, 0, 0, 2}, {0, 0, 1, 1}), std::invalid_argument);
  EXPECT_THROW(iou({0, 0, 1, 1}, {3, 3, 2, 4}), std::invalid_argument);
}

TEST(Iou, SymmetricOnRandomBoxes) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 500; ++i) {
    const auto a = testing_oracles::random_box(rng, 20.0);
    const auto b = testing_oracles::random_box(rng, 20.0);
    EXPECT_DOUBLE_EQ(iou(a, b), iou(b, a));
    EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  }
}

TEST(Nms, SuppressesHighOverlapWithinClass) {
  // B is A shifted so that iou(A,B) = 0.9
  const BoundingBox a{0, 0, 10, 10};
  const double shift = 10.0 * (1.0 - 0.9) / (1.0 + 0.9);
  const BoundingBox b{shift, 0, 10 + shift, 10};
  ASSERT_NEAR(iou(a, b), 0.9, 1e-12);
  const auto kept = nms({{b, 0, 0.8}, {a, 0, 0.9}}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].box, a);
}

TEST(Nms, SingleAndEmpty) {
  EXPECT_TRUE(nms({}, 0.5).empty());
  const auto kept = nms({{{1, 1, 4, 4}, 2, 0.3}}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].class_id, 2);
}

TEST(Nms, NeverSuppressesAcrossClasses) {
  const auto kept = nms({{{0, 0, 5, 5}, 0, 0.9}, {{0, 0, 5, 5}, 1, 0.8}}, 0.5);
  EXPECT_EQ(kept.size(), 2u);
}

TEST(Nms, TiesBrokenByCoordinates) {
  const auto kept = nms({{{2, 0, 12, 10}, 0, 0.5}, {{1, 0, 11, 10}, 0, 0.5}}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].box.x_min, 1.0);
}

TEST(Nms, RejectsBadThreshold) {
  EXPECT_THROW(nms({}, 0.0), std::invalid_argument);
  EXPECT_THROW(nms({}, 1.5), std::invalid_argument);
}

TEST(Nms, PropertiesAgainstExhaustiveCheck) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Detection> dets;
    const int n = 1 + static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) dets.push_back({testing_oracles::random_box(rng, 16.0), static_cast<int>(rng() % 3), score(rng)});
    const double thr = 0.3 + 0.5 * score(rng);
    const auto kept = nms(dets, thr);
    // subset, ordered by score
    for (std::size_t i = 0; i < kept.size(); ++i) {
      EXPECT_TRUE(std::any_of(dets.begin(), dets.end(), [&](const Detection& d) { return d.box == kept[i].box && d.score == kept[i].score; }));
      if (i > 0) EXPECT_GE(kept[i - 1].score, kept[i].score);
    }
    for (std::size_t i = 0; i < kept.size(); ++i)
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        if (kept[i].class_id == kept[j].class_id) EXPECT_LE(iou(kept[i].box, kept[j].box), thr);
    for (const auto& d : dets) {
      const bool was_kept = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) { return k.box == d.box && k.score == d.score; });
      if (was_kept) continue;
      const bool covered = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
        return k.class_id == d.class_id && k.score >= d.score && iou(k.box, d.box) > thr;
      });
      EXPECT_TRUE(covered);
    }
  }
}
