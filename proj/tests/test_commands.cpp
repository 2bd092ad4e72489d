#include <gtest/gtest.h>

#include "cfl/commands.hpp"

using namespace cfl;

namespace {

SplitConfig tiny_split() {
  SplitConfig sc;
  sc.id_classes = {Shape::Circle, Shape::Square};
  sc.ood_classes = {Shape::Star};
  sc.num_labeled = 1;
  sc.num_unlabeled = 1;
  sc.num_test = 1;
  sc.render.height = sc.render.width = 32;
  sc.render.min_size = 8;
  sc.render.max_size = 12;
  return sc;
}

std::size_t count_color(const RgbRaster& img, draw::Color c) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 2 < img.data.size(); i += 3)
    n += img.data[i] == c.r && img.data[i + 1] == c.g && img.data[i + 2] == c.b;
  return n;
}

}  // namespace

TEST(Commands, ClassNamesUseShapesAndUnknown) {
  const SplitConfig sc = tiny_split();
  EXPECT_EQ(cmd::class_name(sc, 0), "circle");
  EXPECT_EQ(cmd::class_name(sc, 1), "square");
  EXPECT_EQ(cmd::class_name(sc, sc.label_space().unknown_id()), "unknown");
}

TEST(Commands, UnknownDetectionsAreDrawnDistinctly) {
  const SplitConfig sc = tiny_split();
  const Splits sp = build_splits(sc);
  const Sample& s = sp.test[0];
  const auto plain = cmd::annotate(s, {}, sc);
  const int unk = sc.label_space().unknown_id();
  const auto with_unknown = cmd::annotate(s, {{{2, 2, 14, 14}, unk, 0.9}}, sc);
  const auto with_id = cmd::annotate(s, {{{2, 2, 14, 14}, 0, 0.9}}, sc);
  EXPECT_EQ(plain.width, 32 * 4);
  EXPECT_GT(count_color(with_unknown, draw::kUnknown), count_color(plain, draw::kUnknown) + 100);
  EXPECT_EQ(count_color(with_id, draw::kUnknown), count_color(plain, draw::kUnknown));
  EXPECT_GT(count_color(with_id, draw::class_color(0)), count_color(plain, draw::class_color(0)) + 100);
}

TEST(Commands, MetricsTextKeepsFullPrecision) {
  const SplitConfig sc = tiny_split();
  cmd::EvalReport r;
  r.metrics.map_k = 0.1 + 0.2;
  r.metrics.ap_u = 1.0 / 3.0;
  r.metrics.per_class_ap[0] = 0.5;
  r.metrics.counts[0] = {3, 1, 2};
  r.metrics.per_class_ap[1] = std::nullopt;
  r.metrics.counts[1] = {};
  const std::string text = cmd::metrics_text(r, sc);
  EXPECT_NE(text.find("map_k 0.30000000000000004\n"), std::string::npos);
  EXPECT_NE(text.find("ap_u 0.33333333333333331\n"), std::string::npos);
  EXPECT_NE(text.find("ap_circle 0.5\ntp_circle 3\nfp_circle 1\nfn_circle 2\n"), std::string::npos);
  EXPECT_NE(text.find("ap_square undefined\n"), std::string::npos);
  EXPECT_EQ(text.find("ood_contamination"), std::string::npos);
  EXPECT_TRUE(cmd::metrics_json(r, sc)["per_class"]["square"]["ap"].is_null());
}

TEST(Commands, AblationTableHasOneRowPerCombination) {
  std::vector<cmd::AblationRow> rows;
  for (bool fc : {false, true})
    for (bool uc : {false, true}) rows.push_back({fc, uc, 0.5, uc ? 0.25 : 0.0, 0.1});
  const std::string t = cmd::ablation_table_text(rows);
  EXPECT_EQ(std::count(t.begin(), t.end(), '\n'), 5);
  EXPECT_NE(t.find("on   on   0.5000    0.2500"), std::string::npos);
  EXPECT_EQ(cmd::row_name(false, true), "fc0_uc1");
}
