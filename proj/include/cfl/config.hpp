#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cfl/dataset.hpp"
#include "cfl/pipeline.hpp"

namespace cfl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a run depends on. Defaults describe the reference toy benchmark.
struct RunConfig {
  SplitConfig split;
  TrainConfig train;
  std::string output_dir = "runs/default";
  double eval_score_threshold = 0.05;
  double eval_nms = 0.5;
  int checkpoint_every = 500;
  int log_every = 1;
  // when false, logs also carry wall-clock timings and are no longer reproducible
  bool reproducible = true;

  RunConfig() {
    split.seed = 1;
    train.seed = 1;
    train.detector.image_size = split.render.height;
  }

  /// Cross-field consistency: class count and image size follow the split.
  void validate() const {
    split.validate();
    train.schedule.validate();
    if (split.render.height != split.render.width) throw ConfigError("image must be square (height == width)");
    if (train.detector.image_size != split.render.height)
      throw ConfigError("detector.image_size must equal data.image_size");
    if (train.detector.num_id_classes != static_cast<int>(split.id_classes.size()))
      throw ConfigError("detector class count does not match data.id_classes");
    if (split.render.min_size < 4 || split.render.max_size < split.render.min_size ||
        split.render.max_size * 2 > split.render.height)
      throw ConfigError("object sizes must satisfy 4 <= min_size <= max_size <= image_size/2");
    if (!(split.render.noise_sigma >= 0.0 && split.render.noise_sigma <= 1.0)) throw ConfigError("data.noise_sigma must lie in [0,1]");
    if (train.pool.capacity < 1) throw ConfigError("pool.capacity must be positive");
    if (checkpoint_every < 1 || log_every < 1) throw ConfigError("checkpoint_every and log_every must be positive");
    if (!(eval_score_threshold >= 0.0 && eval_score_threshold < 1.0)) throw ConfigError("eval.score_threshold must lie in [0,1)");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("bad value '" + v + "' for key '" + key + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean '" + v + "' for key '" + key + "' (use true/false)");
}

template <class T>
std::string format_number(T v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string format_shapes(const std::vector<Shape>& shapes) {
  std::string s;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (i) s += ',';
    s += shape_name(shapes[i]);
  }
  return s;
}

inline std::vector<Shape> parse_shapes(const std::string& key, const std::string& v) {
  std::vector<Shape> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(parse_shape(trim(item)));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(e.what()) + " in key '" + key + "'");
    }
  }
  if (out.empty()) throw ConfigError("key '" + key + "' needs at least one class");
  return out;
}

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
ConfigField number_field(std::string key, T& (*ref)(RunConfig&)) {
  auto get = [ref](const RunConfig& c) { return format_number(ref(const_cast<RunConfig&>(c))); };
  auto set = [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_number<T>(key, v); };
  return {std::move(key), get, set};
}

inline ConfigField bool_field(std::string key, bool& (*ref)(RunConfig&)) {
  auto get = [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); };
  auto set = [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); };
  return {std::move(key), get, set};
}

// Captureless lambdas decay to the accessor function pointers above.
#define CFL_NUM(type, key, expr) number_field<type>(key, +[](RunConfig& c) -> type& { return expr; })
#define CFL_BOOL(key, expr) bool_field(key, +[](RunConfig& c) -> bool& { return expr; })

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back({"output_dir", [](const RunConfig& c) { return c.output_dir; },
                 [](RunConfig& c, const std::string& v) {
                   if (v.empty()) throw ConfigError("output_dir must not be empty");
                   c.output_dir = v;
                 }});
    f.push_back(CFL_NUM(std::uint64_t, "seed", c.train.seed));
    f.push_back(CFL_NUM(std::uint64_t, "data.seed", c.split.seed));
    f.push_back({"data.id_classes", [](const RunConfig& c) { return format_shapes(c.split.id_classes); },
                 [](RunConfig& c, const std::string& v) {
                   c.split.id_classes = parse_shapes("data.id_classes", v);
                   c.train.detector.num_id_classes = static_cast<int>(c.split.id_classes.size());
                 }});
    f.push_back({"data.ood_classes", [](const RunConfig& c) { return format_shapes(c.split.ood_classes); },
                 [](RunConfig& c, const std::string& v) { c.split.ood_classes = parse_shapes("data.ood_classes", v); }});
    f.push_back(CFL_NUM(int, "data.num_labeled", c.split.num_labeled));
    f.push_back(CFL_NUM(int, "data.num_unlabeled", c.split.num_unlabeled));
    f.push_back(CFL_NUM(int, "data.num_test", c.split.num_test));
    f.push_back({"data.image_size", [](const RunConfig& c) { return format_number(c.split.render.height); },
                 [](RunConfig& c, const std::string& v) {
                   const int s = parse_number<int>("data.image_size", v);
                   c.split.render.height = c.split.render.width = s;
                   c.train.detector.image_size = s;
                 }});
    f.push_back(CFL_NUM(int, "data.min_size", c.split.render.min_size));
    f.push_back(CFL_NUM(int, "data.max_size", c.split.render.max_size));
    f.push_back(CFL_NUM(double, "data.noise_sigma", c.split.render.noise_sigma));

    f.push_back(CFL_NUM(double, "schedule.lr", c.train.schedule.lr));
    f.push_back(CFL_NUM(double, "schedule.momentum", c.train.schedule.momentum));
    f.push_back(CFL_NUM(double, "schedule.weight_decay", c.train.schedule.weight_decay));
    f.push_back(CFL_NUM(int, "schedule.warmup_iters", c.train.schedule.warmup_iters));
    f.push_back(CFL_NUM(double, "schedule.grad_clip", c.train.schedule.grad_clip));
    f.push_back(CFL_NUM(double, "schedule.ema_momentum", c.train.schedule.ema_momentum));
    f.push_back(CFL_NUM(double, "schedule.pseudo_threshold", c.train.schedule.pseudo_threshold));
    f.push_back(CFL_NUM(double, "schedule.pseudo_nms", c.train.schedule.pseudo_nms));
    f.push_back(CFL_NUM(double, "schedule.alpha_t_init", c.train.schedule.alpha_t_init));
    f.push_back(CFL_NUM(double, "schedule.alpha_t_final", c.train.schedule.alpha_t_final));
    f.push_back(CFL_NUM(int, "schedule.stage1_iters", c.train.schedule.stage1_iters));
    f.push_back(CFL_NUM(int, "schedule.stage2_iters", c.train.schedule.stage2_iters));
    f.push_back(CFL_NUM(int, "schedule.batch_labeled", c.train.schedule.batch_labeled));
    f.push_back(CFL_NUM(int, "schedule.batch_unlabeled", c.train.schedule.batch_unlabeled));

    f.push_back(CFL_NUM(double, "loss.lambda", c.train.schedule.lambda));
    f.push_back(CFL_NUM(double, "loss.beta", c.train.schedule.beta));
    f.push_back(CFL_NUM(double, "loss.tau", c.train.schedule.tau));
    f.push_back(CFL_NUM(double, "loss.alpha", c.train.schedule.alpha));
    f.push_back(CFL_NUM(int, "loss.k_mine", c.train.schedule.k_mine));
    f.push_back(CFL_BOOL("loss.enable_fc", c.train.flags.enable_fc));
    f.push_back(CFL_BOOL("loss.enable_uc", c.train.flags.enable_uc));
    f.push_back(CFL_BOOL("loss.store_ood_in_pool", c.train.flags.store_ood_in_pool));
    f.push_back(CFL_BOOL("loss.literal_denominator", c.train.flags.literal_denominator));

    f.push_back(CFL_NUM(int, "pool.capacity", c.train.pool.capacity));
    f.push_back(CFL_NUM(double, "pool.iou_threshold", c.train.pool.iou_threshold));
    f.push_back(CFL_NUM(double, "pool.cos_threshold", c.train.pool.cos_threshold));

    f.push_back(CFL_NUM(int, "detector.c1", c.train.detector.c1));
    f.push_back(CFL_NUM(int, "detector.c2", c.train.detector.c2));
    f.push_back(CFL_NUM(int, "detector.c3", c.train.detector.c3));
    f.push_back(CFL_NUM(int, "detector.rpn_channels", c.train.detector.rpn_channels));
    f.push_back(CFL_NUM(int, "detector.hidden", c.train.detector.hidden));
    f.push_back(CFL_NUM(int, "detector.embed_hidden", c.train.detector.embed_hidden));
    f.push_back(CFL_NUM(int, "detector.embed_dim", c.train.detector.embed_dim));
    f.push_back(CFL_NUM(int, "detector.train_proposals", c.train.detector.train_proposals));
    f.push_back(CFL_NUM(int, "detector.eval_proposals", c.train.detector.eval_proposals));
    f.push_back(CFL_NUM(double, "detector.anchor_size", c.train.detector.anchor_size));
    f.push_back(CFL_NUM(double, "detector.proposal_nms", c.train.detector.proposal_nms));
    f.push_back(CFL_NUM(int, "detector.target_jitter", c.train.detector.target_jitter));

    f.push_back(CFL_NUM(double, "eval.score_threshold", c.eval_score_threshold));
    f.push_back(CFL_NUM(double, "eval.nms", c.eval_nms));
    f.push_back(CFL_NUM(int, "run.checkpoint_every", c.checkpoint_every));
    f.push_back(CFL_NUM(int, "run.log_every", c.log_every));
    f.push_back(CFL_BOOL("run.reproducible", c.reproducible));
    return f;
  }();
  return fields;
}

#undef CFL_NUM
#undef CFL_BOOL

}  // namespace detail

/// Applies one `key=value` assignment; unknown keys are rejected.
inline void apply_setting(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
  const std::string key = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  for (const auto& f : detail::config_fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Parses a flat key=value text. Blank lines and lines starting with '#' are
/// ignored; later assignments win.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    try {
      apply_setting(base, t);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Every key with its resolved value, one per line; parsing the result
/// reproduces the config exactly.
inline std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + "=" + f.get(cfg) + "\n";
  return out;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::config_fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace cfl
