#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "cfl/dataset.hpp"
#include "cfl/label_space.hpp"
#include "cfl/random.hpp"

using namespace cfl;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cfl_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SplitConfig small_split() {
  SplitConfig c;
  c.num_labeled = 12;
  c.num_unlabeled = 20;
  c.num_test = 10;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(LabelSpace, IndexLayout) {
  const LabelSpace s(4);
  EXPECT_EQ(s.unknown_id(), 4);
  EXPECT_EQ(s.background_id(), 5);
  EXPECT_EQ(s.total_logits(), 6);
  EXPECT_TRUE(s.is_id(3));
  EXPECT_FALSE(s.is_id(4));
  EXPECT_TRUE(s.is_unknown(4));
  EXPECT_TRUE(s.is_background(5));
  EXPECT_FALSE(s.is_valid(6));
  EXPECT_EQ(s.from_external(s.to_external(2)), 2);
  EXPECT_EQ(s.to_external(0), 1);
}

TEST(Random, DeriveSeedIsOrderSensitiveAndStable) {
  EXPECT_EQ(derive_seed({1, 2, 3}), derive_seed({1, 2, 3}));
  EXPECT_NE(derive_seed({1, 2, 3}), derive_seed({3, 2, 1}));
  EXPECT_NE(derive_seed({1, 2}), derive_seed({1, 2, 0}));
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = uniform(rng, -2.0, 3.0);
    EXPECT_GE(u, -2.0);
    EXPECT_LT(u, 3.0);
    const int k = uniform_int(rng, 1, 4);
    EXPECT_GE(k, 1);
    EXPECT_LE(k, 4);
  }
}

TEST(Render, DeterministicAndQuantised) {
  const auto a = render_image(77, {Shape::Circle, Shape::Star});
  const auto b = render_image(77, {Shape::Circle, Shape::Star});
  EXPECT_EQ(a.pixels, b.pixels);
  for (float v : a.pixels) {
    EXPECT_GE(v, 0.f);
    EXPECT_LE(v, 1.f);
    EXPECT_FLOAT_EQ(std::round(v * 255.f) / 255.f, v);
  }
  EXPECT_NE(render_image(78, {Shape::Circle}).pixels, a.pixels);
}

TEST(Render, RestrictedToAllowedClasses) {
  for (std::uint64_t s = 0; s < 50; ++s)
    for (const auto& o : render_image(s, {Shape::Circle}).objects) EXPECT_EQ(o.shape, Shape::Circle);
}

TEST(Render, BoxesAreTightAndObjectsDisjoint) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto img = render_image(s, {Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Star, Shape::Ring});
    ASSERT_GE(img.objects.size(), 1u);
    ASSERT_LE(img.objects.size(), 4u);
    for (std::size_t i = 0; i < img.objects.size(); ++i) {
      const auto& b = img.objects[i].box;
      int x_lo = 1000, y_lo = 1000, x_hi = -1, y_hi = -1;
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
          if (img.instance_map[static_cast<std::size_t>(y) * img.width + x] == i + 1) {
            x_lo = std::min(x_lo, x);
            y_lo = std::min(y_lo, y);
            x_hi = std::max(x_hi, x);
            y_hi = std::max(y_hi, y);
          }
      EXPECT_EQ(b, (BoundingBox{double(x_lo), double(y_lo), double(x_hi + 1), double(y_hi + 1)}));
      for (std::size_t j = i + 1; j < img.objects.size(); ++j) EXPECT_EQ(intersection_area(b, img.objects[j].box), 0.0);
    }
  }
}

TEST(Render, RejectsBadOptions) {
  EXPECT_THROW(render_image(1, {}), std::invalid_argument);
  RenderOptions o;
  o.num_objects = 7;
  EXPECT_THROW(render_image(1, {Shape::Circle}, o), std::invalid_argument);
  EXPECT_THROW(parse_shape("hexagon"), std::invalid_argument);
  EXPECT_EQ(parse_shape("ring"), Shape::Ring);
}

TEST(Augment, WeakIsFlipOnlyAndBoxesFollow) {
  const auto img = render_image(5, {Shape::Triangle});
  int flips = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto p = sample_augment(img, AugmentStrength::Weak, s);
    EXPECT_TRUE(p.photometric_identity());
    flips += p.flip;
    const auto v = apply_augment(img, p);
    for (std::size_t i = 0; i < img.objects.size(); ++i)
      EXPECT_EQ(v.objects[i].box, p.flip ? flip_box(img.objects[i].box, img.width) : img.objects[i].box);
    if (p.flip) EXPECT_EQ(v.at(0, 3, 0), img.at(0, 3, img.width - 1));
  }
  EXPECT_GT(flips, 60);
  EXPECT_LT(flips, 140);
}

TEST(Augment, StrongErasureNeverTouchesObjects) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto img = render_image(s, {Shape::Circle, Shape::Cross});
    const auto p = sample_augment(img, AugmentStrength::Strong, s);
    const auto v = apply_augment(img, p);
    for (float x : v.pixels) {
      EXPECT_GE(x, 0.f);
      EXPECT_LE(x, 1.f);
    }
    if (!p.erase) continue;
    for (const auto& o : v.objects) EXPECT_EQ(intersection_area(*p.erase, o.box), 0.0);
  }
}

TEST(Augment, FlipIsAnInvolution) {
  const BoundingBox b{3, 4, 10, 20};
  EXPECT_EQ(flip_box(flip_box(b, 64), 64), b);
  const auto img = render_image(3, {Shape::Star});
  AugmentParams flip;
  flip.flip = true;
  EXPECT_EQ(apply_augment(apply_augment(img, flip), flip).pixels, img.pixels);
  EXPECT_EQ(apply_augment(img, AugmentParams{}).pixels, img.pixels);
}

TEST(Splits, CompositionAndRelabelling) {
  const auto cfg = small_split();
  const auto sp = build_splits(cfg);
  ASSERT_EQ(sp.labeled.size(), 12u);
  ASSERT_EQ(sp.unlabeled.size(), 20u);
  ASSERT_EQ(sp.test.size(), 10u);
  const LabelSpace space = cfg.label_space();
  for (const auto& s : sp.labeled)
    for (const auto& a : s.record.annotations) {
      EXPECT_TRUE(space.is_id(a.label));
      EXPECT_EQ(a.label, cfg.label_of(a.shape));
    }
  bool unlabeled_ood = false;
  for (const auto& s : sp.unlabeled)
    for (const auto& a : s.record.annotations) unlabeled_ood |= space.is_unknown(a.label);
  EXPECT_TRUE(unlabeled_ood);
  for (const auto& s : sp.test)
    for (const auto& a : s.record.annotations) {
      const bool ood = a.shape == Shape::Star || a.shape == Shape::Ring;
      EXPECT_EQ(space.is_unknown(a.label), ood);
    }
  std::set<std::uint64_t> seeds;
  for (const auto* part : {&sp.labeled, &sp.unlabeled, &sp.test})
    for (const auto& s : *part) seeds.insert(s.record.seed);
  EXPECT_EQ(seeds.size(), 42u);
}

TEST(Splits, ConfigurationErrors) {
  auto cfg = small_split();
  cfg.ood_classes = {Shape::Circle};
  EXPECT_THROW(build_splits(cfg), std::invalid_argument);
  cfg = small_split();
  cfg.ood_classes.clear();
  EXPECT_THROW(build_splits(cfg), std::invalid_argument);
  cfg = small_split();
  cfg.seed_block = 5;
  EXPECT_THROW(build_splits(cfg), std::runtime_error);
}

TEST(Splits, SingleClassRestriction) {
  auto cfg = small_split();
  cfg.id_classes = {Shape::Circle};
  for (const auto& s : build_splits(cfg).labeled)
    for (const auto& a : s.record.annotations) EXPECT_EQ(a.shape, Shape::Circle);
}

TEST(Manifest, DiskRoundTripAndLoaderSeparation) {
  const auto cfg = small_split();
  const auto sp = build_splits(cfg);
  const auto dir = scratch_dir("manifest");
  write_splits(dir, sp, cfg.label_space());
  const auto test = load_test(dir, cfg.label_space());
  ASSERT_EQ(test.size(), sp.test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    EXPECT_EQ(test[i].image.pixels, sp.test[i].image.pixels);
    ASSERT_EQ(test[i].record.annotations.size(), sp.test[i].record.annotations.size());
    for (std::size_t j = 0; j < test[i].record.annotations.size(); ++j) {
      EXPECT_EQ(test[i].record.annotations[j].label, sp.test[i].record.annotations[j].label);
      EXPECT_EQ(test[i].record.annotations[j].box, sp.test[i].record.annotations[j].box);
    }
  }
  for (const auto& s : load_unlabeled_for_training(dir, cfg.label_space())) {
    EXPECT_TRUE(s.record.annotations.empty());
    EXPECT_TRUE(s.image.objects.empty());
  }
  std::size_t hidden = 0;
  for (const auto& s : load_unlabeled_diagnostic(dir, cfg.label_space())) hidden += s.record.annotations.size();
  EXPECT_GT(hidden, 0u);
  // manifest labels are 1-based
  std::ifstream is(dir / "labeled.jsonl");
  std::string line;
  std::getline(is, line);
  const auto j = nlohmann::json::parse(line);
  for (const auto& a : j.at("annotations")) EXPECT_GE(a.at("label").get<int>(), 1);
  fs::remove_all(dir);
}

TEST(Manifest, MissingFilesAreReported) {
  EXPECT_THROW(read_manifest("/nonexistent/labeled.jsonl", LabelSpace(4)), std::runtime_error);
  EXPECT_THROW(read_png("/nonexistent/x.png"), std::runtime_error);
}
