#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfl/dataset.hpp"
#include "cfl/detector.hpp"
#include "cfl/evaluation.hpp"
#include "cfl/losses.hpp"
#include "cfl/memory_pool.hpp"
#include "cfl/random.hpp"

namespace cfl {

struct ScheduleConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int warmup_iters = 100;
  double grad_clip = 10.0;
  double ema_momentum = 0.999;
  double pseudo_threshold = 0.7;
  double pseudo_nms = 0.5;
  double alpha_t_init = 0.1;
  double alpha_t_final = 0.01;
  int stage1_iters = 1000;
  int stage2_iters = 1000;
  double lambda = 2.0;
  double beta = 1.0;
  double tau = 0.1;
  double alpha = 1.0;
  int k_mine = 3;
  int batch_labeled = 4;
  int batch_unlabeled = 4;

  void validate() const {
    if (!(ema_momentum > 0.0 && ema_momentum < 1.0)) throw std::invalid_argument("ema_momentum must lie in (0,1)");
    if (!(pseudo_threshold > 0.0 && pseudo_threshold < 1.0)) throw std::invalid_argument("pseudo_threshold must lie in (0,1)");
    if (!(pseudo_nms > 0.0 && pseudo_nms <= 1.0)) throw std::invalid_argument("pseudo_nms must lie in (0,1]");
    if (alpha_t_final > alpha_t_init) throw std::invalid_argument("alpha_t_final must not exceed alpha_t_init");
    if (stage1_iters < 0 || stage2_iters < 0) throw std::invalid_argument("iteration counts must be non-negative");
    if (batch_labeled < 1 || batch_unlabeled < 0) throw std::invalid_argument("bad batch sizes");
    if (!(lr > 0.0) || momentum < 0.0 || weight_decay < 0.0) throw std::invalid_argument("bad optimiser settings");
    weights(alpha_t_init).validate();
  }

  LossWeights weights(double alpha_t) const { return {alpha_t, beta, lambda, tau, alpha, k_mine}; }
};

/// Switches for the method's components and the ablations.
struct MethodFlags {
  bool enable_fc = true;
  bool enable_uc = true;
  bool store_ood_in_pool = true;
  bool literal_denominator = false;
};

struct TrainConfig {
  DetectorConfig detector;
  PoolConfig pool;
  ScheduleConfig schedule;
  MethodFlags flags;
  std::uint64_t seed = 0;

  /// Derived consistency: the detector is open-set exactly when the
  /// uncertainty loss is on, and the pool dimension follows the embedding.
  TrainConfig normalized() const {
    TrainConfig c = *this;
    c.detector.open_set = flags.enable_uc;
    c.pool.dim = detector.embed_dim;
    c.pool.store_unknown = flags.store_ood_in_pool;
    return c;
  }
};

struct TrainState {
  DetectorParams student;
  DetectorParams teacher;
  DetectorParams momentum;
  EmbeddingPool pool;
  std::int64_t iteration = 0;
  std::uint64_t rng_state = 0;  // base seed of every per-step draw
};

/// Linear decay from alpha_t_init at iteration 0 to alpha_t_final at the end of
/// both stages, constant afterwards.
inline double alpha_t_schedule(std::int64_t iteration, const ScheduleConfig& cfg) {
  const double total = static_cast<double>(cfg.stage1_iters) + cfg.stage2_iters;
  if (total <= 0.0) return cfg.alpha_t_init;
  const double t = std::clamp(static_cast<double>(iteration) / total, 0.0, 1.0);
  return cfg.alpha_t_init + (cfg.alpha_t_final - cfg.alpha_t_init) * t;
}

inline double learning_rate(std::int64_t iteration, const ScheduleConfig& cfg) {
  if (cfg.warmup_iters <= 0 || iteration >= cfg.warmup_iters) return cfg.lr;
  const double f = static_cast<double>(iteration + 1) / cfg.warmup_iters;
  return cfg.lr * (0.1 + 0.9 * f);
}

/// theta_t <- m * theta_t + (1 - m) * theta_s for every tensor.
inline void ema_update(DetectorParams& teacher, const DetectorParams& student, double m) {
  if (!(m > 0.0 && m < 1.0)) throw std::invalid_argument("ema_update: momentum must lie in (0,1)");
  if (!teacher.same_shape(student)) throw std::invalid_argument("ema_update: teacher/student shape mismatch");
  const auto mf = static_cast<float>(m);
  const auto rf = static_cast<float>(1.0 - m);
  for (int i = 0; i < kNumParams; ++i) teacher[i] = mf * teacher[i] + rf * student[i];
}

inline TrainState init_state(const TrainConfig& raw) {
  const TrainConfig cfg = raw.normalized();
  TrainState s;
  s.student = init_params(cfg.detector, cfg.seed);
  s.teacher = s.student;
  s.momentum = s.student.zeros_like();
  s.pool = EmbeddingPool(cfg.detector.label_space(), cfg.pool);
  s.rng_state = derive_seed({cfg.seed, 0x57a7e});
  return s;
}

// ---------------------------------------------------------------------------
// Per-image losses
// ---------------------------------------------------------------------------

enum class Branch { Supervised, Unsupervised };

struct ImageLoss {
  LossTerms terms;
  HeadGrads grads;  // unscaled gradients of each term, combined by the caller
  int fc_anchors = 0;
  int ood_rows = 0;
};

struct PoolCandidate {
  Embedding vector;
  int class_id;
  BoundingBox box;
  BoundingBox target;
};

inline std::vector<Target> targets_from(const std::vector<Annotation>& anns) {
  std::vector<Target> out;
  for (const auto& a : anns) out.push_back({a.box, a.label});
  return out;
}

/// Evaluates every loss term of one image and writes the combined head
/// gradient `scale * d(branch total)/d(outputs)` into `out.grads`. The
/// unsupervised branch never produces regression gradients.
inline ImageLoss image_loss(const Detector& det, const ForwardOutput& fwd, const std::vector<Target>& targets,
                            Branch branch, const PoolSnapshot& pool, const LossWeights& w, const MethodFlags& flags,
                            double scale) {
  const DetectorConfig& dc = det.config();
  const LabelSpace space = dc.label_space();
  const auto n = static_cast<Eigen::Index>(fwd.proposals.size());
  ImageLoss out;
  out.grads = HeadGrads::zeros(dc, n);
  const bool sup = branch == Branch::Supervised;
  constexpr float kBeta = 1.0f / 9.0f;

  // RPN objectness
  const auto& rt = *fwd.rpn_targets;
  int counted = 0;
  for (const int l : rt.anchor_label) counted += l >= 0;
  const float obj_norm = 1.0f / static_cast<float>(std::max(counted, 1));
  double rpn_cls = 0.0;
  for (std::size_t a = 0; a < rt.anchor_label.size(); ++a) {
    if (rt.anchor_label[a] < 0) continue;
    const float logit = fwd.objectness(0, static_cast<Eigen::Index>(a));
    const auto y = static_cast<float>(rt.anchor_label[a]);
    rpn_cls += nn::bce_with_logits(logit, y) * obj_norm;
    out.grads.objectness(0, static_cast<Eigen::Index>(a)) = static_cast<float>(scale) * (nn::sigmoid(logit) - y) * obj_norm;
  }
  out.terms.rpn_cls = rpn_cls;

  if (sup) {
    int pos = 0;
    for (const int l : rt.anchor_label) pos += l == 1;
    const float reg_norm = 1.0f / static_cast<float>(std::max(pos, 1));
    double rpn_reg = 0.0;
    for (std::size_t a = 0; a < rt.anchor_label.size(); ++a) {
      if (rt.anchor_label[a] != 1) continue;
      for (int k = 0; k < 4; ++k) {
        const float diff = fwd.rpn_deltas(k, static_cast<Eigen::Index>(a)) - static_cast<float>(rt.deltas[a][k]);
        rpn_reg += nn::smooth_l1(diff, kBeta) * reg_norm;
        out.grads.rpn_deltas(k, static_cast<Eigen::Index>(a)) = static_cast<float>(scale) * nn::smooth_l1_grad(diff, kBeta) * reg_norm;
      }
    }
    out.terms.rpn_reg = rpn_reg;

    int fg = 0;
    for (Eigen::Index j = 0; j < n; ++j) fg += fwd.matched_target[j] >= 0;
    const float roi_norm = 1.0f / static_cast<float>(std::max(fg, 1));
    double roi_reg = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const int t = fwd.matched_target[j];
      if (t < 0) continue;
      const auto enc = encode_box(fwd.proposals[j], targets[t].box, kRoiDeltaScale);
      for (int k = 0; k < 4; ++k) {
        const float diff = fwd.roi_deltas(k, j) - static_cast<float>(enc[k]);
        roi_reg += nn::smooth_l1(diff, kBeta) * roi_norm;
        out.grads.roi_deltas(k, j) = static_cast<float>(scale) * nn::smooth_l1_grad(diff, kBeta) * roi_norm;
      }
    }
    out.terms.roi_reg = roi_reg;
  }

  if (flags.enable_fc) {
    const LossResult fc = feature_contrastive_loss(fwd.batch, pool, w.tau, space, flags.literal_denominator);
    out.terms.fc = fc.loss;
    out.fc_anchors = fc.rows;
    if (!fc.skipped) out.grads.embeddings = (fc.grad.transpose() * (scale * w.alpha_t)).cast<float>();
  }

  LossResult cls;
  if (flags.enable_uc) {
    cls = uncertainty_classification_loss(fwd.batch, space, w.alpha, w.k_mine, sup ? Stage::Sup : Stage::Semi);
    for (Eigen::Index j = 0; j < n; ++j) out.ood_rows += cls.grad(j, space.unknown_id()) != 0.0;
  } else {
    cls = closed_set_classification_loss(fwd.batch, space);
  }
  out.terms.uc = cls.loss;
  out.grads.logits = (cls.grad.transpose() * (scale * w.beta)).cast<float>();
  return out;
}

inline std::vector<PoolCandidate> pool_candidates(const ForwardOutput& fwd, const std::vector<Target>& targets,
                                                  const LabelSpace& space) {
  std::vector<PoolCandidate> out;
  for (std::size_t j = 0; j < fwd.proposals.size(); ++j) {
    const int t = fwd.matched_target[j];
    if (t < 0) continue;
    const int label = fwd.batch.assigned_label[j];
    if (space.is_background(label)) continue;
    out.push_back({fwd.batch.embeddings.row(static_cast<Eigen::Index>(j)).transpose(), label, fwd.proposals[j],
                   targets[static_cast<std::size_t>(t)].box});
  }
  return out;
}

inline void admit_candidates(EmbeddingPool& pool, const std::vector<PoolCandidate>& cands) {
  for (const auto& c : cands) {
    const AdmissionScore s = admission_score(c.vector, c.box, c.target, pool.center(c.class_id));
    pool.try_insert({c.vector, c.class_id, 0.0}, s.s_iou, s.s_cos);
  }
}

// ---------------------------------------------------------------------------
// Pseudo-labels
// ---------------------------------------------------------------------------

/// Teacher detections on an (already weakly augmented) image, kept when the
/// score reaches `pseudo_threshold`, after class-wise NMS. Unknown detections
/// are retained.
inline std::vector<Detection> generate_pseudo_labels(const Detector& det, const DetectorParams& teacher,
                                                     const ShapeImage& weak_view, const ScheduleConfig& cfg) {
  return det.predict(teacher, weak_view, cfg.pseudo_threshold, cfg.pseudo_nms);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepLog {
  std::int64_t iteration = 0;
  int stage = 1;
  LossTerms sup;
  LossTerms unsup;
  double total = 0.0;
  double alpha_t = 0.0;
  double lr = 0.0;
  int pseudo_labels = 0;
  int pseudo_unknown = 0;
  std::vector<std::size_t> pool_occupancy;
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

using StepCallback = std::function<void(const StepLog&, const TrainState&)>;

namespace detail {

inline void add_scaled(LossTerms& acc, const LossTerms& t, double s) {
  acc.rpn_cls += s * t.rpn_cls;
  acc.rpn_reg += s * t.rpn_reg;
  acc.roi_reg += s * t.roi_reg;
  acc.fc += s * t.fc;
  acc.uc += s * t.uc;
}

inline std::size_t pick(std::uint64_t base, std::int64_t iteration, std::uint64_t stream, int slot, std::size_t n) {
  return static_cast<std::size_t>(derive_seed({base, static_cast<std::uint64_t>(iteration), stream,
                                               static_cast<std::uint64_t>(slot)}) % n);
}

enum : std::uint64_t { kLabeledPick = 1, kLabeledAug, kLabeledJitter, kUnlabeledPick, kWeakAug, kStrongAug, kUnlabeledJitter };

inline std::vector<Target> remap_pseudo(const std::vector<Detection>& dets, const AugmentParams& weak,
                                        const AugmentParams& strong, int width) {
  std::vector<Target> out;
  for (const auto& d : dets) {
    BoundingBox b = d.box;
    if (weak.flip) b = flip_box(b, width);    // back to the original frame
    if (strong.flip) b = flip_box(b, width);  // into the strong view
    out.push_back({b, d.class_id});
  }
  return out;
}

}  // namespace detail

/// One SGD step. In stage 2 (`stage == 2`) with a non-empty unlabeled set and
/// lambda > 0 the unsupervised branch runs on pseudo-labels; otherwise the step
/// is purely supervised.
inline StepLog train_step(const Detector& det, TrainState& state, const std::vector<Sample>& labeled,
                          const std::vector<Sample>& unlabeled, const TrainConfig& cfg, int stage) {
  const auto& sc = cfg.schedule;
  const LabelSpace space = det.config().label_space();
  const double alpha_t = alpha_t_schedule(state.iteration, sc);
  const LossWeights w = sc.weights(alpha_t);
  const PoolSnapshot snap = state.pool.snapshot();
  DetectorParams grads = state.student.zeros_like();
  std::vector<PoolCandidate> cands;

  StepLog log;
  log.iteration = state.iteration;
  log.stage = stage;
  log.alpha_t = alpha_t;

  const int bl = sc.batch_labeled;
  for (int i = 0; i < bl; ++i) {
    const auto& smp = labeled[detail::pick(state.rng_state, state.iteration, detail::kLabeledPick, i, labeled.size())];
    const auto aug = sample_augment(smp.image, AugmentStrength::Weak,
                                    derive_seed({state.rng_state, static_cast<std::uint64_t>(state.iteration), detail::kLabeledAug, static_cast<std::uint64_t>(i)}));
    const ShapeImage view = apply_augment(smp.image, aug);
    std::vector<Target> targets = targets_from(smp.record.annotations);
    if (aug.flip)
      for (auto& t : targets) t.box = flip_box(t.box, view.width);
    ForwardOptions fo;
    fo.training = true;
    fo.jitter_seed = derive_seed({state.rng_state, static_cast<std::uint64_t>(state.iteration), detail::kLabeledJitter, static_cast<std::uint64_t>(i)});
    const ForwardOutput fwd = det.forward(state.student, view, &targets, fo);
    const ImageLoss il = image_loss(det, fwd, targets, Branch::Supervised, snap, w, cfg.flags, 1.0 / bl);
    det.backward(state.student, fwd, il.grads, grads);
    detail::add_scaled(log.sup, il.terms, 1.0 / bl);
    auto c = pool_candidates(fwd, targets, space);
    cands.insert(cands.end(), std::make_move_iterator(c.begin()), std::make_move_iterator(c.end()));
  }

  const bool semi = stage == 2 && !unlabeled.empty() && sc.lambda > 0.0 && sc.batch_unlabeled > 0;
  if (semi) {
    const int bu = sc.batch_unlabeled;
    for (int i = 0; i < bu; ++i) {
      const auto& smp = unlabeled[detail::pick(state.rng_state, state.iteration, detail::kUnlabeledPick, i, unlabeled.size())];
      const auto it = static_cast<std::uint64_t>(state.iteration);
      const auto weak = sample_augment(smp.image, AugmentStrength::Weak, derive_seed({state.rng_state, it, detail::kWeakAug, static_cast<std::uint64_t>(i)}));
      const auto strong = sample_augment(smp.image, AugmentStrength::Strong, derive_seed({state.rng_state, it, detail::kStrongAug, static_cast<std::uint64_t>(i)}));
      const auto pseudo = generate_pseudo_labels(det, state.teacher, apply_augment(smp.image, weak), sc);
      std::vector<Target> targets = detail::remap_pseudo(pseudo, weak, strong, smp.image.width);
      log.pseudo_labels += static_cast<int>(targets.size());
      for (const auto& t : targets) log.pseudo_unknown += space.is_unknown(t.label);
      ForwardOptions fo;
      fo.training = true;
      fo.jitter_seed = derive_seed({state.rng_state, it, detail::kUnlabeledJitter, static_cast<std::uint64_t>(i)});
      const ForwardOutput fwd = det.forward(state.student, apply_augment(smp.image, strong), &targets, fo);
      const ImageLoss il = image_loss(det, fwd, targets, Branch::Unsupervised, snap, w, cfg.flags, sc.lambda / bu);
      det.backward(state.student, fwd, il.grads, grads);
      detail::add_scaled(log.unsup, il.terms, 1.0 / bu);
      auto c = pool_candidates(fwd, targets, space);
      cands.insert(cands.end(), std::make_move_iterator(c.begin()), std::make_move_iterator(c.end()));
    }
  }

  log.total = compose_total_loss(log.sup, log.unsup, semi ? w : LossWeights{w.alpha_t, w.beta, 0.0, w.tau, w.alpha, w.k_mine});
  if (!std::isfinite(log.total) || !grads.all_finite()) {
    throw TrainingDiverged("training diverged at iteration " + std::to_string(state.iteration));
  }

  // SGD with momentum; the teacher is never touched here
  const std::uint64_t teacher_sum = checksum(state.teacher);
  double sq = 0.0;
  for (int k = 0; k < kNumParams; ++k) sq += grads[k].cast<double>().squaredNorm();
  const double gnorm = std::sqrt(sq);
  const float clip = (sc.grad_clip > 0.0 && gnorm > sc.grad_clip) ? static_cast<float>(sc.grad_clip / gnorm) : 1.0f;
  log.lr = learning_rate(state.iteration, sc);
  const auto lr = static_cast<float>(log.lr);
  const auto mom = static_cast<float>(sc.momentum);
  const auto wd = static_cast<float>(sc.weight_decay);
  for (int k = 0; k < kNumParams; ++k) {
    nn::Mat g = clip * grads[k] + wd * state.student[k];
    state.momentum[k] = mom * state.momentum[k] + g;
    state.student[k] -= lr * state.momentum[k];
  }
  if (checksum(state.teacher) != teacher_sum) throw std::logic_error("optimizer step modified the teacher");

  if (stage == 2) ema_update(state.teacher, state.student, sc.ema_momentum);
  admit_candidates(state.pool, cands);
  ++state.iteration;

  for (int c = 0; c < state.pool.num_classes(); ++c) log.pool_occupancy.push_back(state.pool.size(c));
  return log;
}

/// Supervised pre-training; the teacher becomes a copy of the student.
inline void train_stage1(const Detector& det, TrainState& state, const std::vector<Sample>& labeled,
                         const TrainConfig& cfg, const StepCallback& on_step = {}) {
  if (labeled.empty()) throw std::invalid_argument("train_stage1: labeled set is empty");
  const std::int64_t end = cfg.schedule.stage1_iters;
  while (state.iteration < end) {
    const StepLog log = train_step(det, state, labeled, {}, cfg, 1);
    if (on_step) on_step(log, state);
  }
  state.teacher = state.student;
}

inline TrainState train_stage1(const Detector& det, const std::vector<Sample>& labeled, const TrainConfig& cfg,
                               const StepCallback& on_step = {}) {
  TrainState state = init_state(cfg);
  train_stage1(det, state, labeled, cfg, on_step);
  return state;
}

/// Teacher-student training on labeled + unlabeled data until
/// stage1_iters + stage2_iters iterations have been run in total.
inline void train_stage2(const Detector& det, TrainState& state, const std::vector<Sample>& labeled,
                         const std::vector<Sample>& unlabeled, const TrainConfig& cfg, const StepCallback& on_step = {}) {
  if (labeled.empty()) throw std::invalid_argument("train_stage2: labeled set is empty");
  const std::int64_t end = static_cast<std::int64_t>(cfg.schedule.stage1_iters) + cfg.schedule.stage2_iters;
  while (state.iteration < end) {
    const StepLog log = train_step(det, state, labeled, unlabeled, cfg, 2);
    if (on_step) on_step(log, state);
  }
}

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

inline std::vector<GroundTruth> ground_truth_of(const SampleRecord& rec, const LabelSpace& space) {
  std::vector<GroundTruth> out;
  for (const auto& a : rec.annotations) out.push_back({a.label, a.box, !space.is_id(a.label)});
  return out;
}

inline std::vector<ImageEval> predict_split(const Detector& det, const DetectorParams& params,
                                            const std::vector<Sample>& samples, double score_threshold = 0.05,
                                            double nms_iou = 0.5) {
  const LabelSpace space = det.config().label_space();
  std::vector<ImageEval> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({det.predict(params, s.image, score_threshold, nms_iou), ground_truth_of(s.record, space)});
  return out;
}

inline std::vector<ImageEval> pseudo_label_split(const Detector& det, const DetectorParams& teacher,
                                                 const std::vector<Sample>& samples, const ScheduleConfig& sc) {
  const LabelSpace space = det.config().label_space();
  std::vector<ImageEval> out;
  for (const auto& s : samples) out.push_back({generate_pseudo_labels(det, teacher, s.image, sc), ground_truth_of(s.record, space)});
  return out;
}

}  // namespace cfl
