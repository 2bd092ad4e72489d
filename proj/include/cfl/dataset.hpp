#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfl/geometry.hpp"
#include "cfl/label_space.hpp"
#include "cfl/png_io.hpp"
#include "cfl/synthetic.hpp"
#include "json.hpp"

namespace cfl {

struct SplitConfig {
  std::vector<Shape> id_classes = {Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross};
  std::vector<Shape> ood_classes = {Shape::Star, Shape::Ring};
  int num_labeled = 200;
  int num_unlabeled = 800;
  int num_test = 200;
  std::uint64_t seed = 0;
  // Seeds of split s occupy [seed + s*seed_block, seed + s*seed_block + count).
  std::uint64_t seed_block = 1'000'000;
  RenderOptions render;

  LabelSpace label_space() const { return LabelSpace(static_cast<int>(id_classes.size())); }

  /// Internal label of a shape: its position among the ID classes, or unknown.
  int label_of(Shape s) const {
    for (std::size_t i = 0; i < id_classes.size(); ++i)
      if (id_classes[i] == s) return static_cast<int>(i);
    return label_space().unknown_id();
  }

  void validate() const {
    if (id_classes.empty() || ood_classes.empty()) throw std::invalid_argument("split: ID and OOD class sets must be non-empty");
    for (auto s : id_classes)
      if (std::find(ood_classes.begin(), ood_classes.end(), s) != ood_classes.end())
        throw std::invalid_argument("split: class '" + std::string(shape_name(s)) + "' is both ID and OOD");
    if (num_labeled < 1 || num_unlabeled < 0 || num_test < 1) throw std::invalid_argument("split: bad image counts");
  }
};

struct Annotation {
  Shape shape = Shape::Circle;
  int label = 0;  // internal index; OOD shapes map to unknown
  BoundingBox box;
};

struct SampleRecord {
  std::uint64_t seed = 0;
  std::string split;
  std::string file;
  std::vector<Annotation> annotations;
};

struct Sample {
  SampleRecord record;
  ShapeImage image;
};

struct Splits {
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;
  std::vector<Sample> test;
};

inline std::vector<Annotation> annotate(const ShapeImage& img, const SplitConfig& cfg) {
  std::vector<Annotation> out;
  for (const auto& o : img.objects) out.push_back({o.shape, cfg.label_of(o.shape), o.box});
  return out;
}

namespace detail {

inline std::string image_path(const std::string& split, std::uint64_t seed) {
  std::ostringstream os;
  os << "images/" << split << "/" << seed << ".png";
  return os.str();
}

inline std::vector<Sample> render_split(const std::string& name, std::uint64_t first_seed, int count,
                                        const std::vector<Shape>& allowed, const SplitConfig& cfg) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = first_seed + static_cast<std::uint64_t>(i);
    Sample smp;
    smp.image = render_image(s, allowed, cfg.render);
    smp.record = {s, name, image_path(name, s), annotate(smp.image, cfg)};
    out.push_back(std::move(smp));
  }
  return out;
}

}  // namespace detail

/// Builds labeled (ID objects only), unlabeled (ID + OOD) and test (ID + OOD)
/// splits from disjoint seed ranges.
inline Splits build_splits(const SplitConfig& cfg) {
  cfg.validate();
  const std::uint64_t counts[3] = {static_cast<std::uint64_t>(cfg.num_labeled),
                                   static_cast<std::uint64_t>(cfg.num_unlabeled),
                                   static_cast<std::uint64_t>(cfg.num_test)};
  for (auto c : counts)
    if (c > cfg.seed_block) throw std::runtime_error("split: seed ranges overlap (count exceeds seed_block)");

  std::vector<Shape> mixed = cfg.id_classes;
  mixed.insert(mixed.end(), cfg.ood_classes.begin(), cfg.ood_classes.end());

  Splits out;
  out.labeled = detail::render_split("labeled", cfg.seed, cfg.num_labeled, cfg.id_classes, cfg);
  // the unlabeled split must contain at least one OOD object; move to the next
  // unused seed block until it does
  for (std::uint64_t block = 1;; block += 2) {
    out.unlabeled = detail::render_split("unlabeled", cfg.seed + block * cfg.seed_block, cfg.num_unlabeled, mixed, cfg);
    const bool has_ood = std::any_of(out.unlabeled.begin(), out.unlabeled.end(), [&](const Sample& s) {
      return std::any_of(s.record.annotations.begin(), s.record.annotations.end(),
                         [&](const Annotation& a) { return !cfg.label_space().is_id(a.label); });
    });
    if (has_ood || cfg.num_unlabeled == 0) break;
    if (block > 64) throw std::runtime_error("split: could not draw an OOD object for the unlabeled split");
  }
  out.test = detail::render_split("test", cfg.seed + 2 * cfg.seed_block, cfg.num_test, mixed, cfg);
  return out;
}

// ---- conversion between raster and float image ----

inline RgbRaster to_raster(const ShapeImage& img) {
  RgbRaster r(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        r.data[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.f, 1.f) * 255.f));
  return r;
}

inline ShapeImage from_raster(const RgbRaster& r) {
  ShapeImage img;
  img.width = r.width;
  img.height = r.height;
  img.pixels.assign(static_cast<std::size_t>(3) * r.width * r.height, 0.f);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(r.data[(static_cast<std::size_t>(y) * r.width + x) * 3 + c] / 255.0);
  return img;
}

// ---- manifest records ----

inline nlohmann::json record_to_json(const SampleRecord& r, const LabelSpace& space) {
  nlohmann::json anns = nlohmann::json::array();
  for (const auto& a : r.annotations) {
    anns.push_back({{"class", std::string(shape_name(a.shape))},
                    {"label", space.to_external(a.label)},
                    {"box", {a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max}}});
  }
  return {{"seed", r.seed}, {"split", r.split}, {"file", r.file}, {"annotations", anns}};
}

inline SampleRecord record_from_json(const nlohmann::json& j, const LabelSpace& space) {
  SampleRecord r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.split = j.at("split").get<std::string>();
  r.file = j.at("file").get<std::string>();
  for (const auto& a : j.at("annotations")) {
    const auto& b = a.at("box");
    r.annotations.push_back({parse_shape(a.at("class").get<std::string>()),
                             space.from_external(a.at("label").get<int>()),
                             {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()}});
  }
  return r;
}

inline std::string manifest_name(const std::string& split) { return split + ".jsonl"; }

inline void write_manifest(const std::filesystem::path& path, const std::vector<Sample>& samples, const LabelSpace& space) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write manifest '" + path.string() + "'");
  for (const auto& s : samples) os << record_to_json(s.record, space).dump() << '\n';
}

inline std::vector<SampleRecord> read_manifest(const std::filesystem::path& path, const LabelSpace& space) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("missing manifest '" + path.string() + "'");
  std::vector<SampleRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json(nlohmann::json::parse(line), space));
  }
  return out;
}

/// Writes every split as PNG images plus one manifest per split under `dir`.
inline void write_splits(const std::filesystem::path& dir, const Splits& splits, const LabelSpace& space) {
  namespace fs = std::filesystem;
  for (const auto* part : {&splits.labeled, &splits.unlabeled, &splits.test}) {
    if (part->empty()) continue;
    const std::string name = part->front().record.split;
    fs::create_directories(dir / "images" / name);
    for (const auto& s : *part) write_png((dir / s.record.file).string(), to_raster(s.image));
  }
  write_manifest(dir / manifest_name("labeled"), splits.labeled, space);
  write_manifest(dir / manifest_name("unlabeled"), splits.unlabeled, space);
  write_manifest(dir / manifest_name("test"), splits.test, space);
}

namespace detail {

inline std::vector<Sample> load_split(const std::filesystem::path& dir, const std::string& split, const LabelSpace& space,
                                      bool keep_annotations) {
  std::vector<Sample> out;
  for (auto& rec : read_manifest(dir / manifest_name(split), space)) {
    Sample s;
    s.image = from_raster(read_png((dir / rec.file).string()));
    s.image.seed = rec.seed;
    if (!keep_annotations) rec.annotations.clear();
    for (const auto& a : rec.annotations) s.image.objects.push_back({a.shape, a.box});
    s.record = std::move(rec);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

inline std::vector<Sample> load_labeled(const std::filesystem::path& dir, const LabelSpace& space) {
  return detail::load_split(dir, "labeled", space, true);
}

/// Training entry point for the unlabeled split: annotations are discarded.
inline std::vector<Sample> load_unlabeled_for_training(const std::filesystem::path& dir, const LabelSpace& space) {
  return detail::load_split(dir, "unlabeled", space, false);
}

/// Diagnostic entry point for the unlabeled split; keeps hidden annotations.
inline std::vector<Sample> load_unlabeled_diagnostic(const std::filesystem::path& dir, const LabelSpace& space) {
  return detail::load_split(dir, "unlabeled", space, true);
}

inline std::vector<Sample> load_test(const std::filesystem::path& dir, const LabelSpace& space) {
  return detail::load_split(dir, "test", space, true);
}

/// Strips annotations from in-memory samples, mirroring the training loader.
inline std::vector<Sample> without_annotations(std::vector<Sample> samples) {
  for (auto& s : samples) {
    s.record.annotations.clear();
    s.image.objects.clear();
    s.image.instance_map.clear();
  }
  return samples;
}

}  // namespace cfl
