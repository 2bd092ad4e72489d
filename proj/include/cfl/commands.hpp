#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cfl/checkpoint.hpp"
#include "cfl/config.hpp"
#include "cfl/draw.hpp"
#include "json.hpp"

namespace cfl::cmd {

namespace fs = std::filesystem;

enum class Stage { One, Two, Both };
enum class Net { Teacher, Student };
enum class EvalSplit { Test, UnlabeledDiagnostic };

inline std::string to_string(Net n) { return n == Net::Teacher ? "teacher" : "student"; }
inline std::string to_string(EvalSplit s) { return s == EvalSplit::Test ? "test" : "unlabeled-diagnostic"; }

/// Directory layout of one run.
struct RunPaths {
  fs::path root;
  fs::path shared_data;  // when set, splits are read from here instead of <root>/data

  fs::path data() const { return shared_data.empty() ? root / "data" : shared_data; }
  fs::path config_echo() const { return root / "config.txt"; }
  fs::path split_config() const { return data() / "split_config.txt"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path stage_checkpoint(int stage) const { return checkpoints() / ("stage" + std::to_string(stage) + ".ckpt"); }
  fs::path iteration_checkpoint(std::int64_t it) const {
    char name[32];
    std::snprintf(name, sizeof name, "iter_%06lld.ckpt", static_cast<long long>(it));
    return checkpoints() / name;
  }
  fs::path train_log() const { return root / "train_log.jsonl"; }
  fs::path eval_dir(EvalSplit s, Net n) const { return root / "eval" / (to_string(s) + "_" + to_string(n)); }
  fs::path ablation() const { return root / "ablation"; }
  fs::path report() const { return root / "report"; }
};

inline RunPaths run_paths(const fs::path& output_root, const RunConfig& cfg) { return {output_root / cfg.output_dir}; }

inline void write_text_atomic(const fs::path& p, const std::string& text) { write_file_atomic(p, text); }

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// The data.* lines of the resolved config; they fully determine the splits.
inline std::string split_config_text(const RunConfig& cfg) {
  std::istringstream in(to_text(cfg));
  std::string line, out;
  while (std::getline(in, line))
    if (line.rfind("data.", 0) == 0) out += line + "\n";
  return out;
}

inline std::string class_name(const SplitConfig& sc, int label) {
  const LabelSpace space = sc.label_space();
  if (space.is_id(label)) return std::string(shape_name(sc.id_classes[static_cast<std::size_t>(label)]));
  if (space.is_unknown(label)) return "unknown";
  return "background";
}

// ---------------------------------------------------------------------------
// make-splits
// ---------------------------------------------------------------------------

/// Renders all splits under <run>/data. An existing data directory is left
/// untouched unless `force` is set, in which case it is rebuilt from scratch.
inline void make_splits(const RunConfig& cfg, const RunPaths& paths, bool force, std::ostream& out) {
  cfg.validate();
  const bool exists = fs::exists(paths.data());
  if (exists && !force)
    throw std::runtime_error("split directory '" + paths.data().string() + "' already exists; pass --force to rebuild it");
  // build next to the target and swap in only once complete
  const Splits splits = build_splits(cfg.split);
  fs::path staging = paths.data();
  staging += ".partial";
  fs::remove_all(staging);
  write_splits(staging, splits, cfg.split.label_space());
  write_text_atomic(staging / "split_config.txt", split_config_text(cfg));
  if (exists) fs::remove_all(paths.data());
  fs::rename(staging, paths.data());
  write_text_atomic(paths.config_echo(), to_text(cfg));
  out << "wrote " << splits.labeled.size() << " labeled, " << splits.unlabeled.size() << " unlabeled, "
      << splits.test.size() << " test images to " << paths.data().string() << "\n";
}

struct LoadedData {
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;  // annotations stripped
};

inline void check_splits(const RunConfig& cfg, const RunPaths& paths) {
  if (!fs::exists(paths.split_config()))
    throw std::runtime_error("no splits at '" + paths.data().string() + "'; run make-splits first");
  if (read_text(paths.split_config()) != split_config_text(cfg))
    throw std::runtime_error("splits at '" + paths.data().string() +
                             "' were built with a different data.* config; rerun make-splits --force");
}

inline LoadedData load_training_data(const RunConfig& cfg, const RunPaths& paths) {
  check_splits(cfg, paths);
  const LabelSpace space = cfg.split.label_space();
  return {load_labeled(paths.data(), space), load_unlabeled_for_training(paths.data(), space)};
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline nlohmann::json loss_json(const LossTerms& t) {
  return {{"rpn_cls", t.rpn_cls}, {"rpn_reg", t.rpn_reg}, {"roi_reg", t.roi_reg}, {"fc", t.fc}, {"uc", t.uc}};
}

inline nlohmann::json step_json(const StepLog& log) {
  return {{"iteration", log.iteration}, {"stage", log.stage},        {"lr", log.lr},
          {"alpha_t", log.alpha_t},     {"total", log.total},        {"sup", loss_json(log.sup)},
          {"unsup", loss_json(log.unsup)}, {"pseudo_labels", log.pseudo_labels}, {"pseudo_unknown", log.pseudo_unknown},
          {"pool", log.pool_occupancy}};
}

namespace detail {

class TrainRecorder {
 public:
  TrainRecorder(const RunConfig& cfg, const RunPaths& paths, bool append, std::ostream& out)
      : cfg_(cfg), paths_(paths), out_(out), log_(paths.train_log(), append ? std::ios::app : std::ios::trunc),
        start_(std::chrono::steady_clock::now()) {
    if (!log_) throw std::runtime_error("cannot write training log '" + paths.train_log().string() + "'");
  }

  void step(const StepLog& log, const TrainState& state, int completed_stage) {
    last_ = step_json(log);
    if (log.iteration % cfg_.log_every == 0) {
      nlohmann::json line = last_;
      if (!cfg_.reproducible)
        line["elapsed_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
      log_ << line.dump() << '\n';
    }
    const std::int64_t done = state.iteration;
    if (done % cfg_.checkpoint_every == 0) {
      log_.flush();
      save_checkpoint(paths_.iteration_checkpoint(done), {cfg_, state, completed_stage});
    }
    if (done % 100 == 0) out_ << "iteration " << done << "  loss " << log.total << "\n";
  }

  void finish_stage(const TrainState& state, int stage) {
    log_.flush();
    save_checkpoint(paths_.iteration_checkpoint(state.iteration), {cfg_, state, stage});
    save_checkpoint(paths_.stage_checkpoint(stage), {cfg_, state, stage});
    out_ << "stage " << stage << " done at iteration " << state.iteration << ": " << paths_.stage_checkpoint(stage).string() << "\n";
  }

  /// Leaves the pre-step state and the last completed step behind for inspection.
  void dump_divergence(const TrainState& state, int completed_stage, const std::string& what) {
    log_.flush();
    const fs::path ck = paths_.checkpoints() / "diverged.ckpt";
    save_checkpoint(ck, {cfg_, state, completed_stage});
    nlohmann::json dump = {{"error", what}, {"iteration", state.iteration}, {"checkpoint", ck.string()}, {"last_step", last_}};
    write_text_atomic(paths_.checkpoints() / "diverged.json", dump.dump(2) + "\n");
  }

 private:
  const RunConfig& cfg_;
  const RunPaths& paths_;
  std::ostream& out_;
  std::ofstream log_;
  std::chrono::steady_clock::time_point start_;
  nlohmann::json last_;
};

}  // namespace detail

/// Runs the requested stage(s). Stage 2 alone resumes from the stage-1
/// checkpoint of the same run directory.
inline TrainState train(const RunConfig& cfg, const RunPaths& paths, Stage stage, std::ostream& out) {
  cfg.validate();
  const TrainConfig tc = cfg.train.normalized();
  const LoadedData data = load_training_data(cfg, paths);
  const Detector det(tc.detector);
  fs::create_directories(paths.checkpoints());
  write_text_atomic(paths.config_echo(), to_text(cfg));

  TrainState state;
  int completed = 0;
  if (stage == Stage::Two) {
    const fs::path ck = paths.stage_checkpoint(1);
    if (!fs::exists(ck)) throw std::runtime_error("stage 2 needs a stage-1 checkpoint at '" + ck.string() + "'");
    Checkpoint loaded = load_checkpoint(ck);
    if (!(loaded.config.train.normalized().detector == tc.detector))
      throw std::runtime_error("stage-1 checkpoint '" + ck.string() + "' was trained with a different detector config");
    state = std::move(loaded.state);
    completed = 1;
  } else {
    state = init_state(tc);
  }

  detail::TrainRecorder rec(cfg, paths, stage == Stage::Two, out);
  try {
    if (stage != Stage::Two) {
      train_stage1(det, state, data.labeled, tc, [&](const StepLog& l, const TrainState& s) { rec.step(l, s, 0); });
      completed = 1;
      rec.finish_stage(state, 1);
    }
    if (stage != Stage::One) {
      if (data.unlabeled.empty()) out << "warning: unlabeled split is empty; stage 2 degenerates to supervised training\n";
      train_stage2(det, state, data.labeled, data.unlabeled, tc, [&](const StepLog& l, const TrainState& s) { rec.step(l, s, 1); });
      rec.finish_stage(state, 2);
    }
  } catch (const TrainingDiverged& e) {
    rec.dump_divergence(state, completed, e.what());
    throw;
  }
  return state;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline RgbRaster annotate(const Sample& s, const std::vector<Detection>& dets, const SplitConfig& sc, int scale = 4) {
  RgbRaster img = draw::upscale(to_raster(s.image), scale);
  const LabelSpace space = sc.label_space();
  auto px = [scale](double v) { return static_cast<int>(std::lround(v * scale)); };
  for (const auto& a : s.record.annotations)
    draw::rect(img, px(a.box.x_min), px(a.box.y_min), px(a.box.x_max), px(a.box.y_max), draw::kGray);
  for (const auto& d : dets) {
    const bool unk = space.is_unknown(d.class_id);
    const draw::Color c = unk ? draw::kUnknown : draw::class_color(d.class_id);
    const int x0 = px(d.box.x_min), y0 = px(d.box.y_min), x1 = px(d.box.x_max), y1 = px(d.box.y_max);
    if (unk) {
      draw::dashed_rect(img, x0, y0, x1, y1, c, 2);
    } else {
      draw::rect(img, x0, y0, x1, y1, c, 2);
    }
    draw::label(img, x0, y0 - 10, class_name(sc, d.class_id) + " " + draw::fixed(d.score, 2), unk ? draw::kWhite : draw::kBlack, c);
  }
  return img;
}

struct EvalReport {
  EvalResult metrics;
  std::optional<PseudoLabelQuality> pseudo;
  fs::path dir;
};

inline std::string metrics_text(const EvalReport& r, const SplitConfig& sc) {
  std::ostringstream os;
  os.precision(17);
  os << "map_k " << r.metrics.map_k << "\n" << "ap_u " << r.metrics.ap_u << "\n";
  for (const auto& [c, ap] : r.metrics.per_class_ap) {
    const std::string n = class_name(sc, c);
    os << "ap_" << n << " ";
    if (ap) {
      os << *ap << "\n";
    } else {
      os << "undefined\n";
    }
    const auto& k = r.metrics.counts.at(c);
    os << "tp_" << n << " " << k.tp << "\n" << "fp_" << n << " " << k.fp << "\n" << "fn_" << n << " " << k.fn << "\n";
  }
  if (r.pseudo) {
    os << "pseudo_precision " << r.pseudo->precision << "\n"
       << "pseudo_recall " << r.pseudo->recall << "\n"
       << "ood_contamination " << r.pseudo->ood_contamination << "\n"
       << "pseudo_id_boxes " << r.pseudo->num_id_pseudo << "\n";
  }
  return os.str();
}

inline nlohmann::json metrics_json(const EvalReport& r, const SplitConfig& sc) {
  nlohmann::json j = {{"map_k", r.metrics.map_k}, {"ap_u", r.metrics.ap_u}};
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, ap] : r.metrics.per_class_ap) {
    const auto& k = r.metrics.counts.at(c);
    per[class_name(sc, c)] = {{"ap", ap ? nlohmann::json(*ap) : nlohmann::json(nullptr)}, {"tp", k.tp}, {"fp", k.fp}, {"fn", k.fn}};
  }
  j["per_class"] = per;
  if (r.pseudo)
    j["pseudo_labels"] = {{"precision", r.pseudo->precision},
                          {"recall", r.pseudo->recall},
                          {"ood_contamination", r.pseudo->ood_contamination},
                          {"id_boxes", r.pseudo->num_id_pseudo}};
  return j;
}

/// Evaluates one network of a checkpoint on a split and writes metrics.txt,
/// metrics.json and up to `max_images` annotated images (negative: all).
inline EvalReport evaluate(const RunConfig& cfg, const RunPaths& paths, const fs::path& checkpoint, EvalSplit split, Net net,
                           int max_images, const fs::path& out_dir, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const RunConfig& model_cfg = ck.config;
  check_splits(cfg, paths);
  if (split_config_text(model_cfg) != split_config_text(cfg))
    throw std::runtime_error("checkpoint '" + checkpoint.string() + "' was trained on different splits");
  const TrainConfig tc = model_cfg.train.normalized();
  const Detector det(tc.detector);
  const LabelSpace space = tc.detector.label_space();
  const std::vector<Sample> samples =
      split == EvalSplit::Test ? load_test(paths.data(), space) : load_unlabeled_diagnostic(paths.data(), space);
  const DetectorParams& params = net == Net::Teacher ? ck.state.teacher : ck.state.student;

  EvalReport rep;
  rep.dir = out_dir;
  const auto preds = predict_split(det, params, samples, model_cfg.eval_score_threshold, model_cfg.eval_nms);
  rep.metrics = cfl::evaluate(preds, space);
  if (split == EvalSplit::UnlabeledDiagnostic)
    rep.pseudo = pseudo_label_quality(pseudo_label_split(det, params, samples, tc.schedule), space);

  fs::create_directories(out_dir);
  write_text_atomic(out_dir / "metrics.txt", metrics_text(rep, cfg.split));
  write_text_atomic(out_dir / "metrics.json", metrics_json(rep, cfg.split).dump(2) + "\n");
  if (max_images != 0) {
    fs::create_directories(out_dir / "images");
    const std::size_t n = max_images < 0 ? samples.size() : std::min(samples.size(), static_cast<std::size_t>(max_images));
    for (std::size_t i = 0; i < n; ++i) {
      const fs::path p = out_dir / "images" / fs::path(samples[i].record.file).filename();
      write_png(p.string(), annotate(samples[i], preds[i].detections, cfg.split));
    }
  }
  out << to_string(net) << " on " << to_string(split) << ": map_k " << rep.metrics.map_k << "  ap_u " << rep.metrics.ap_u;
  if (rep.pseudo) out << "  ood_contamination " << rep.pseudo->ood_contamination;
  out << "\n";
  return rep;
}

/// The checkpoint an eval uses by default: the latest completed stage.
inline fs::path default_checkpoint(const RunPaths& paths) {
  for (int s : {2, 1})
    if (fs::exists(paths.stage_checkpoint(s))) return paths.stage_checkpoint(s);
  throw std::runtime_error("no stage checkpoint under '" + paths.checkpoints().string() + "'; run train first");
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationRow {
  bool fc = false;
  bool uc = false;
  double map_k = 0.0;
  double ap_u = 0.0;
  double ood_contamination = 0.0;
};

inline std::string row_name(bool fc, bool uc) { return std::string("fc") + (fc ? "1" : "0") + "_uc" + (uc ? "1" : "0"); }

inline std::string ablation_table_text(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "fc   uc   map_k     ap_u\n";
  for (const auto& r : rows) {
    os << (r.fc ? "on   " : "off  ") << (r.uc ? "on   " : "off  ") << draw::fixed(r.map_k, 4) << "    " << draw::fixed(r.ap_u, 4) << "\n";
  }
  return os.str();
}

/// Trains and evaluates the {fc} x {uc} grid on the run's splits with equal
/// seeds and budgets. Rows are scored with the final teacher on the test split.
inline std::vector<AblationRow> ablate(const RunConfig& cfg, const RunPaths& paths, std::ostream& out) {
  cfg.validate();
  check_splits(cfg, paths);
  std::vector<AblationRow> rows;
  nlohmann::json records = nlohmann::json::array();
  for (bool fc : {false, true}) {
    for (bool uc : {false, true}) {
      RunConfig rc = cfg;
      rc.train.flags.enable_fc = fc;
      rc.train.flags.enable_uc = uc;
      const RunPaths rp{paths.ablation() / row_name(fc, uc), paths.data()};
      out << "== ablation row " << row_name(fc, uc) << "\n";
      train(rc, rp, Stage::Both, out);
      const auto test = evaluate(rc, rp, rp.stage_checkpoint(2), EvalSplit::Test, Net::Teacher, 0,
                                 rp.eval_dir(EvalSplit::Test, Net::Teacher), out);
      const auto diag = evaluate(rc, rp, rp.stage_checkpoint(2), EvalSplit::UnlabeledDiagnostic, Net::Teacher, 0,
                                 rp.eval_dir(EvalSplit::UnlabeledDiagnostic, Net::Teacher), out);
      AblationRow row{fc, uc, test.metrics.map_k, test.metrics.ap_u, diag.pseudo->ood_contamination};
      rows.push_back(row);
      records.push_back({{"enable_fc", fc}, {"enable_uc", uc}, {"map_k", row.map_k}, {"ap_u", row.ap_u},
                         {"ood_contamination", row.ood_contamination}});
    }
  }
  write_text_atomic(paths.ablation() / "table.txt", ablation_table_text(rows));
  write_text_atomic(paths.ablation() / "table.json", records.dump(2) + "\n");
  out << ablation_table_text(rows);
  return rows;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

namespace detail {

/// Trailing mean over `window` points, to make noisy per-step losses legible.
inline std::vector<std::pair<double, double>> smooth(const std::vector<std::pair<double, double>>& pts, std::size_t window) {
  std::vector<std::pair<double, double>> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    acc += pts[i].second;
    if (i >= window) acc -= pts[i - window].second;
    out.emplace_back(pts[i].first, acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

}  // namespace detail

/// Renders loss curves from the training log and, when present, the ablation
/// table to PNG files under <run>/report. Returns the files written.
inline std::vector<fs::path> report(const RunPaths& paths, std::ostream& out) {
  std::vector<fs::path> written;
  fs::create_directories(paths.report());
  if (fs::exists(paths.train_log())) {
    std::ifstream in(paths.train_log());
    std::string line;
    const std::vector<std::string> parts = {"rpn_cls", "rpn_reg", "roi_reg", "fc", "uc"};
    std::vector<draw::Series> sup, unsup, sched;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      sup.push_back({"sup " + parts[i], draw::class_color(static_cast<int>(i)), {}});
      unsup.push_back({"unsup " + parts[i], draw::class_color(static_cast<int>(i)), {}});
    }
    sup.push_back({"total", draw::kBlack, {}});
    sched.push_back({"alpha_t x10", draw::class_color(0), {}});
    sched.push_back({"lr x10", draw::class_color(2), {}});
    std::vector<draw::Series> pool;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const double it = j.at("iteration").get<double>();
      for (std::size_t i = 0; i < parts.size(); ++i) {
        sup[i].points.emplace_back(it, j.at("sup").at(parts[i]).get<double>());
        if (j.at("stage").get<int>() == 2) unsup[i].points.emplace_back(it, j.at("unsup").at(parts[i]).get<double>());
      }
      sup.back().points.emplace_back(it, j.at("total").get<double>());
      sched[0].points.emplace_back(it, 10.0 * j.at("alpha_t").get<double>());
      sched[1].points.emplace_back(it, 10.0 * j.at("lr").get<double>());
      const auto& occ = j.at("pool");
      for (std::size_t c = 0; c < occ.size(); ++c) {
        if (pool.size() <= c) pool.push_back({"class " + std::to_string(c), draw::class_color(static_cast<int>(c)), {}});
        pool[c].points.emplace_back(it, occ[c].get<double>());
      }
    }
    const std::size_t n = sup.front().points.size();
    const std::size_t window = std::max<std::size_t>(1, n / 50);
    for (auto* group : {&sup, &unsup})
      for (auto& s : *group) s.points = detail::smooth(s.points, window);
    if (!pool.empty()) pool.back().name = "unknown";
    unsup.erase(std::remove_if(unsup.begin(), unsup.end(), [](const draw::Series& s) { return s.points.empty(); }), unsup.end());

    auto emit = [&](const std::string& name, const RgbRaster& img) {
      const fs::path p = paths.report() / name;
      write_png(p.string(), img);
      written.push_back(p);
    };
    emit("loss_supervised.png", draw::line_plot(sup, "supervised losses", "iteration"));
    if (!unsup.empty()) emit("loss_unsupervised.png", draw::line_plot(unsup, "unsupervised losses", "iteration"));
    emit("schedule.png", draw::line_plot(sched, "schedule", "iteration"));
    if (!pool.empty()) emit("pool_occupancy.png", draw::line_plot(pool, "memory pool occupancy", "iteration"));
  }
  const fs::path table = paths.ablation() / "table.json";
  if (fs::exists(table)) {
    std::vector<std::vector<std::string>> rows = {{"fc", "uc", "map_k", "ap_u", "ood contamination"}};
    for (const auto& r : nlohmann::json::parse(read_text(table))) {
      rows.push_back({r.at("enable_fc").get<bool>() ? "on" : "off", r.at("enable_uc").get<bool>() ? "on" : "off",
                      draw::fixed(r.at("map_k").get<double>(), 4), draw::fixed(r.at("ap_u").get<double>(), 4),
                      draw::fixed(r.at("ood_contamination").get<double>(), 4)});
    }
    const fs::path p = paths.report() / "ablation_table.png";
    write_png(p.string(), draw::table_image(rows, "component ablation"));
    written.push_back(p);
  }
  if (written.empty())
    throw std::runtime_error("nothing to report under '" + paths.root.string() + "' (no training log or ablation table)");
  for (const auto& p : written) out << "wrote " << p.string() << "\n";
  return written;
}

}  // namespace cfl::cmd
