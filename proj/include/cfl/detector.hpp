#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "cfl/geometry.hpp"
#include "cfl/label_space.hpp"
#include "cfl/losses.hpp"
#include "cfl/nn.hpp"
#include "cfl/random.hpp"
#include "cfl/synthetic.hpp"

namespace cfl {

/// Architecture hyper-parameters of the toy two-stage detector.
struct DetectorConfig {
  int num_id_classes = 4;
  int image_size = 64;
  int c1 = 16;
  int c2 = 32;
  int c3 = 48;
  int rpn_channels = 48;
  int roi_size = 4;
  int hidden = 128;
  int embed_hidden = 128;
  int embed_dim = 128;
  int train_proposals = 64;
  int eval_proposals = 32;
  double anchor_size = 16.0;
  double proposal_nms = 0.7;
  // jittered copies of every target added to the training proposals
  int target_jitter = 2;
  // a closed-set detector never predicts the unknown class
  bool open_set = true;

  static constexpr int kStride = 8;

  int feature_size() const { return image_size / kStride; }
  int num_anchors() const { return feature_size() * feature_size(); }
  int roi_features() const { return c3 * roi_size * roi_size; }
  LabelSpace label_space() const { return LabelSpace(num_id_classes); }

  bool operator==(const DetectorConfig&) const = default;
};

/// Target box for a proposal assignment (internal label: ID or unknown).
struct Target {
  BoundingBox box;
  int label = 0;
};

enum ParamIndex : int {
  kConv1W, kConv1B, kConv2W, kConv2B, kConv3W, kConv3B,
  kRpnW, kRpnB, kRpnOutW, kRpnOutB,
  kFc1W, kFc1B, kClsW, kClsB, kBoxW, kBoxB,
  kEmb1W, kEmb1B, kEmb2W, kEmb2B,
  kNumParams
};

inline constexpr std::array<std::string_view, kNumParams> kParamNames = {
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b",
    "rpn.w", "rpn.b", "rpn_out.w", "rpn_out.b",
    "roi_fc1.w", "roi_fc1.b", "roi_cls.w", "roi_cls.b", "roi_box.w", "roi_box.b",
    "emb1.w", "emb1.b", "emb2.w", "emb2.b"};

/// All learnable tensors of the detector. Also used as the gradient and
/// momentum container, since those share the parameter shapes.
struct DetectorParams {
  std::array<nn::Mat, kNumParams> tensors;

  nn::Mat& operator[](int i) { return tensors[static_cast<std::size_t>(i)]; }
  const nn::Mat& operator[](int i) const { return tensors[static_cast<std::size_t>(i)]; }

  DetectorParams zeros_like() const {
    DetectorParams z;
    for (int i = 0; i < kNumParams; ++i) z[i] = nn::Mat::Zero(tensors[i].rows(), tensors[i].cols());
    return z;
  }

  bool same_shape(const DetectorParams& o) const {
    for (int i = 0; i < kNumParams; ++i)
      if (tensors[i].rows() != o.tensors[i].rows() || tensors[i].cols() != o.tensors[i].cols()) return false;
    return true;
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.allFinite()) return false;
    return true;
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }

  bool operator==(const DetectorParams& o) const {
    if (!same_shape(o)) return false;
    for (int i = 0; i < kNumParams; ++i)
      if (std::memcmp(tensors[i].data(), o.tensors[i].data(), sizeof(float) * tensors[i].size()) != 0) return false;
    return true;
  }
};

/// FNV-1a over the raw bytes of every tensor.
inline std::uint64_t checksum(const DetectorParams& p) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : p.tensors) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < sizeof(float) * static_cast<std::size_t>(t.size()); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

inline DetectorParams init_params(const DetectorConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0x1417}));
  const int k2 = cfg.num_id_classes + 2;
  DetectorParams p;
  auto he = [&](int rows, int cols, double stddev) {
    nn::Mat m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<float>(normal(rng, 0.0, stddev));
    return m;
  };
  auto fan = [](int f) { return std::sqrt(2.0 / f); };
  p[kConv1W] = he(cfg.c1, 27, fan(27));
  p[kConv1B] = nn::Mat::Zero(cfg.c1, 1);
  p[kConv2W] = he(cfg.c2, cfg.c1 * 9, fan(cfg.c1 * 9));
  p[kConv2B] = nn::Mat::Zero(cfg.c2, 1);
  p[kConv3W] = he(cfg.c3, cfg.c2 * 9, fan(cfg.c2 * 9));
  p[kConv3B] = nn::Mat::Zero(cfg.c3, 1);
  p[kRpnW] = he(cfg.rpn_channels, cfg.c3 * 9, fan(cfg.c3 * 9));
  p[kRpnB] = nn::Mat::Zero(cfg.rpn_channels, 1);
  p[kRpnOutW] = he(5, cfg.rpn_channels, 0.01);
  p[kRpnOutB] = nn::Mat::Zero(5, 1);
  p[kRpnOutB](0, 0) = -2.0f;  // prior objectness of about 0.12
  p[kFc1W] = he(cfg.hidden, cfg.roi_features(), fan(cfg.roi_features()));
  p[kFc1B] = nn::Mat::Zero(cfg.hidden, 1);
  p[kClsW] = he(k2, cfg.hidden, 0.01);
  p[kClsB] = nn::Mat::Zero(k2, 1);
  p[kBoxW] = he(4, cfg.hidden, 0.001);
  p[kBoxB] = nn::Mat::Zero(4, 1);
  p[kEmb1W] = he(cfg.embed_hidden, cfg.roi_features(), fan(cfg.roi_features()));
  p[kEmb1B] = nn::Mat::Zero(cfg.embed_hidden, 1);
  p[kEmb2W] = he(cfg.embed_dim, cfg.embed_hidden, fan(cfg.embed_hidden));
  p[kEmb2B] = nn::Mat::Zero(cfg.embed_dim, 1);
  return p;
}

// ---------------------------------------------------------------------------
// Box coding
// ---------------------------------------------------------------------------

/// Per-coordinate scaling of ROI regression targets.
inline constexpr std::array<double, 4> kRoiDeltaScale = {10.0, 10.0, 5.0, 5.0};
inline constexpr std::array<double, 4> kRpnDeltaScale = {1.0, 1.0, 1.0, 1.0};

inline std::array<double, 4> encode_box(const BoundingBox& ref, const BoundingBox& target,
                                        const std::array<double, 4>& scale) {
  return {scale[0] * (target.center_x() - ref.center_x()) / ref.width(),
          scale[1] * (target.center_y() - ref.center_y()) / ref.height(),
          scale[2] * std::log(target.width() / ref.width()), scale[3] * std::log(target.height() / ref.height())};
}

inline BoundingBox decode_box(const BoundingBox& ref, const std::array<double, 4>& d,
                              const std::array<double, 4>& scale) {
  constexpr double kMaxLog = 4.1351665567423561;  // log(1000/16)
  const double cx = ref.center_x() + d[0] / scale[0] * ref.width();
  const double cy = ref.center_y() + d[1] / scale[1] * ref.height();
  const double w = ref.width() * std::exp(std::min(d[2] / scale[2], kMaxLog));
  const double h = ref.height() * std::exp(std::min(d[3] / scale[3], kMaxLog));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

inline std::vector<BoundingBox> make_anchors(const DetectorConfig& cfg) {
  std::vector<BoundingBox> out;
  const int fs = cfg.feature_size();
  const double half = 0.5 * cfg.anchor_size;
  for (int y = 0; y < fs; ++y)
    for (int x = 0; x < fs; ++x) {
      const double cx = (x + 0.5) * DetectorConfig::kStride;
      const double cy = (y + 0.5) * DetectorConfig::kStride;
      out.push_back({cx - half, cy - half, cx + half, cy + half});
    }
  return out;
}

/// Clips to the image and enforces a minimum side of one pixel; returns
/// nothing when the clipped box collapses.
inline std::optional<BoundingBox> sanitize_box(const BoundingBox& b, double size) {
  BoundingBox c = clip(b, size, size);
  if (!c.valid() || c.width() < 1.0 || c.height() < 1.0) return std::nullopt;
  return c;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct RpnTargets {
  std::vector<int> anchor_label;  // 1 positive, 0 negative, -1 ignored
  std::vector<std::array<double, 4>> deltas;
};

/// Intermediate activations kept for the backward pass.
struct ForwardCache {
  nn::Mat cols1, act1, cols2, act2, cols3, feat, cols_rpn, rpn_hidden;
  nn::Mat roi;          // F x N
  nn::Mat fc1;          // hidden x N (post ReLU)
  nn::Mat emb_hidden;   // embed_hidden x N (post ReLU)
  nn::Mat emb_raw;      // d x N before normalisation
  Eigen::VectorXf emb_norm;
  // bilinear taps: per proposal, per sample point, 4 (index, weight) pairs
  std::vector<std::array<std::pair<int, float>, 4>> taps;
};

struct ForwardOutput {
  std::vector<BoundingBox> proposals;
  std::vector<double> proposal_objectness;
  ProposalBatch batch;
  nn::Mat roi_deltas;                 // 4 x N
  std::vector<int> matched_target;    // index into targets, -1 for background
  nn::Mat objectness;                 // 1 x A logits
  nn::Mat rpn_deltas;                 // 4 x A
  std::optional<RpnTargets> rpn_targets;
  ForwardCache cache;
};

/// Gradients of the head outputs, in the layout of ForwardOutput.
struct HeadGrads {
  nn::Mat objectness;  // 1 x A
  nn::Mat rpn_deltas;  // 4 x A
  nn::Mat logits;      // (K+2) x N
  nn::Mat roi_deltas;  // 4 x N
  nn::Mat embeddings;  // d x N

  static HeadGrads zeros(const DetectorConfig& cfg, Eigen::Index n) {
    HeadGrads g;
    g.objectness = nn::Mat::Zero(1, cfg.num_anchors());
    g.rpn_deltas = nn::Mat::Zero(4, cfg.num_anchors());
    g.logits = nn::Mat::Zero(cfg.num_id_classes + 2, n);
    g.roi_deltas = nn::Mat::Zero(4, n);
    g.embeddings = nn::Mat::Zero(cfg.embed_dim, n);
    return g;
  }
};

struct ForwardOptions {
  bool training = false;
  // seed for the target jitter added to training proposals
  std::uint64_t jitter_seed = 0;
  // extra proposals appended after the RPN proposals (e.g. for tests)
  std::vector<BoundingBox> extra_proposals;
  bool skip_rpn_proposals = false;
};

class Detector {
 public:
  explicit Detector(DetectorConfig cfg) : cfg_(cfg), anchors_(make_anchors(cfg)) {
    if (cfg.image_size % DetectorConfig::kStride != 0) {
      throw std::invalid_argument("detector: image size must be divisible by 8");
    }
  }

  const DetectorConfig& config() const { return cfg_; }
  const std::vector<BoundingBox>& anchors() const { return anchors_; }

  ForwardOutput forward(const DetectorParams& p, const ShapeImage& img, const std::vector<Target>* targets,
                        const ForwardOptions& opt = {}) const {
    if (img.height != cfg_.image_size || img.width != cfg_.image_size) {
      throw std::invalid_argument("detector: image size does not match the configuration");
    }
    const int s0 = cfg_.image_size;
    ForwardOutput out;
    auto& c = out.cache;

    nn::Mat x = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        img.pixels.data(), 3, s0 * s0);
    c.cols1 = nn::im2col(x, {3, s0, s0, 2, 1, 3});
    c.act1 = (p[kConv1W] * c.cols1).colwise() + p[kConv1B].col(0);
    nn::relu_inplace(c.act1);
    c.cols2 = nn::im2col(c.act1, {cfg_.c1, s0 / 2, s0 / 2, 2, 1, 3});
    c.act2 = (p[kConv2W] * c.cols2).colwise() + p[kConv2B].col(0);
    nn::relu_inplace(c.act2);
    c.cols3 = nn::im2col(c.act2, {cfg_.c2, s0 / 4, s0 / 4, 2, 1, 3});
    c.feat = (p[kConv3W] * c.cols3).colwise() + p[kConv3B].col(0);
    nn::relu_inplace(c.feat);

    const int fs = cfg_.feature_size();
    c.cols_rpn = nn::im2col(c.feat, {cfg_.c3, fs, fs, 1, 1, 3});
    c.rpn_hidden = (p[kRpnW] * c.cols_rpn).colwise() + p[kRpnB].col(0);
    nn::relu_inplace(c.rpn_hidden);
    const nn::Mat rpn_out = (p[kRpnOutW] * c.rpn_hidden).colwise() + p[kRpnOutB].col(0);
    out.objectness = rpn_out.topRows(1);
    out.rpn_deltas = rpn_out.bottomRows(4);

    if (!opt.skip_rpn_proposals) select_proposals(out, opt.training ? cfg_.train_proposals : cfg_.eval_proposals);
    for (const auto& b : opt.extra_proposals) {
      out.proposals.push_back(b);
      out.proposal_objectness.push_back(0.0);
    }
    if (targets) {
      out.rpn_targets = rpn_targets(*targets);
      if (opt.training) add_target_proposals(out, *targets, opt.jitter_seed);
    }

    roi_heads(p, out);
    if (targets) assign(out, *targets);
    return out;
  }

  /// Accumulates parameter gradients for head-output gradients `g` into `grads`.
  void backward(const DetectorParams& p, const ForwardOutput& fwd, const HeadGrads& g, DetectorParams& grads) const {
    const auto& c = fwd.cache;
    const int s0 = cfg_.image_size;
    const int fs = cfg_.feature_size();
    const Eigen::Index n = static_cast<Eigen::Index>(fwd.proposals.size());

    nn::Mat d_feat = nn::Mat::Zero(cfg_.c3, fs * fs);
    if (n > 0) {
      // ROI classification / regression head
      nn::Mat d_fc1 = p[kClsW].transpose() * g.logits + p[kBoxW].transpose() * g.roi_deltas;
      grads[kClsW] += g.logits * c.fc1.transpose();
      grads[kClsB] += g.logits.rowwise().sum();
      grads[kBoxW] += g.roi_deltas * c.fc1.transpose();
      grads[kBoxB] += g.roi_deltas.rowwise().sum();
      nn::relu_backward(d_fc1, c.fc1);
      grads[kFc1W] += d_fc1 * c.roi.transpose();
      grads[kFc1B] += d_fc1.rowwise().sum();
      nn::Mat d_roi = p[kFc1W].transpose() * d_fc1;

      // embedding head through the L2 normalisation
      nn::Mat d_raw(cfg_.embed_dim, n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const float nz = c.emb_norm(j);
        const Eigen::VectorXf e = c.emb_raw.col(j) / nz;
        const Eigen::VectorXf ge = g.embeddings.col(j);
        d_raw.col(j) = (ge - e * e.dot(ge)) / nz;
      }
      grads[kEmb2W] += d_raw * c.emb_hidden.transpose();
      grads[kEmb2B] += d_raw.rowwise().sum();
      nn::Mat d_eh = p[kEmb2W].transpose() * d_raw;
      nn::relu_backward(d_eh, c.emb_hidden);
      grads[kEmb1W] += d_eh * c.roi.transpose();
      grads[kEmb1B] += d_eh.rowwise().sum();
      d_roi.noalias() += p[kEmb1W].transpose() * d_eh;

      // bilinear crop backward
      const int ss = cfg_.roi_size * cfg_.roi_size;
      for (Eigen::Index j = 0; j < n; ++j) {
        for (int sidx = 0; sidx < ss; ++sidx) {
          const auto& taps = c.taps[static_cast<std::size_t>(j * ss + sidx)];
          for (int ch = 0; ch < cfg_.c3; ++ch) {
            const float gv = d_roi(ch * ss + sidx, j);
            if (gv == 0.f) continue;
            for (const auto& [idx, w] : taps) d_feat(ch, idx) += w * gv;
          }
        }
      }
    }

    // RPN head
    nn::Mat d_rpn_out(5, fs * fs);
    d_rpn_out.topRows(1) = g.objectness;
    d_rpn_out.bottomRows(4) = g.rpn_deltas;
    grads[kRpnOutW] += d_rpn_out * c.rpn_hidden.transpose();
    grads[kRpnOutB] += d_rpn_out.rowwise().sum();
    nn::Mat d_rh = p[kRpnOutW].transpose() * d_rpn_out;
    nn::relu_backward(d_rh, c.rpn_hidden);
    grads[kRpnW] += d_rh * c.cols_rpn.transpose();
    grads[kRpnB] += d_rh.rowwise().sum();
    d_feat += nn::col2im(p[kRpnW].transpose() * d_rh, {cfg_.c3, fs, fs, 1, 1, 3});

    // backbone
    nn::relu_backward(d_feat, c.feat);
    grads[kConv3W] += d_feat * c.cols3.transpose();
    grads[kConv3B] += d_feat.rowwise().sum();
    nn::Mat d_act2 = nn::col2im(p[kConv3W].transpose() * d_feat, {cfg_.c2, s0 / 4, s0 / 4, 2, 1, 3});
    nn::relu_backward(d_act2, c.act2);
    grads[kConv2W] += d_act2 * c.cols2.transpose();
    grads[kConv2B] += d_act2.rowwise().sum();
    nn::Mat d_act1 = nn::col2im(p[kConv2W].transpose() * d_act2, {cfg_.c1, s0 / 2, s0 / 2, 2, 1, 3});
    nn::relu_backward(d_act1, c.act1);
    grads[kConv1W] += d_act1 * c.cols1.transpose();
    grads[kConv1B] += d_act1.rowwise().sum();
  }

  /// Class probabilities of one ROI row. Closed-set detectors normalise over
  /// the ID classes and background only and report p(unknown) = 0.
  Eigen::VectorXd class_probabilities(const Eigen::VectorXd& logits) const {
    const LabelSpace space = cfg_.label_space();
    if (cfg_.open_set) return restricted_softmax(logits, RowKind::ID, space);
    Eigen::VectorXd masked = logits;
    masked(space.unknown_id()) = -INFINITY;
    const double mx = masked.maxCoeff();
    Eigen::VectorXd p = (masked.array() - mx).exp();
    return p / p.sum();
  }

  /// Final detections: every proposal takes its most probable non-background
  /// class; low scores are dropped and class-wise NMS is applied.
  std::vector<Detection> predict(const DetectorParams& p, const ShapeImage& img, double score_threshold,
                                 double nms_iou) const {
    const ForwardOutput fwd = forward(p, img, nullptr);
    return detections_from(fwd, score_threshold, nms_iou);
  }

  std::vector<Detection> detections_from(const ForwardOutput& fwd, double score_threshold, double nms_iou) const {
    const LabelSpace space = cfg_.label_space();
    std::vector<Detection> dets;
    for (std::size_t j = 0; j < fwd.proposals.size(); ++j) {
      const Eigen::VectorXd probs = class_probabilities(fwd.batch.logits.row(static_cast<Eigen::Index>(j)).transpose());
      int best = 0;
      for (int k = 1; k <= space.unknown_id(); ++k)
        if (probs(k) > probs(best)) best = k;
      if (!cfg_.open_set && space.is_unknown(best)) continue;
      const double score = probs(best);
      if (score < score_threshold) continue;
      const std::array<double, 4> d = {fwd.roi_deltas(0, static_cast<Eigen::Index>(j)), fwd.roi_deltas(1, static_cast<Eigen::Index>(j)),
                                       fwd.roi_deltas(2, static_cast<Eigen::Index>(j)), fwd.roi_deltas(3, static_cast<Eigen::Index>(j))};
      const auto box = sanitize_box(decode_box(fwd.proposals[j], d, kRoiDeltaScale), cfg_.image_size);
      if (!box) continue;
      dets.push_back({*box, best, score});
    }
    return nms(std::move(dets), nms_iou);
  }

 private:
  void select_proposals(ForwardOutput& out, int limit) const {
    std::vector<Detection> cands;
    for (std::size_t a = 0; a < anchors_.size(); ++a) {
      const auto ai = static_cast<Eigen::Index>(a);
      const std::array<double, 4> d = {out.rpn_deltas(0, ai), out.rpn_deltas(1, ai), out.rpn_deltas(2, ai), out.rpn_deltas(3, ai)};
      const auto box = sanitize_box(decode_box(anchors_[a], d, kRpnDeltaScale), cfg_.image_size);
      if (!box) continue;
      cands.push_back({*box, 0, nn::sigmoid(out.objectness(0, ai))});
    }
    auto kept = nms(std::move(cands), cfg_.proposal_nms);
    if (kept.size() > static_cast<std::size_t>(limit)) kept.resize(static_cast<std::size_t>(limit));
    for (const auto& k : kept) {
      out.proposals.push_back(k.box);
      out.proposal_objectness.push_back(k.score);
    }
  }

  void add_target_proposals(ForwardOutput& out, const std::vector<Target>& targets, std::uint64_t seed) const {
    Rng rng(derive_seed({seed, 0x7a59}));
    for (const auto& t : targets) {
      out.proposals.push_back(t.box);
      out.proposal_objectness.push_back(1.0);
      for (int j = 0; j < cfg_.target_jitter; ++j) {
        const double w = t.box.width();
        const double h = t.box.height();
        const BoundingBox b{t.box.x_min + uniform(rng, -0.15, 0.15) * w, t.box.y_min + uniform(rng, -0.15, 0.15) * h,
                            t.box.x_max + uniform(rng, -0.15, 0.15) * w, t.box.y_max + uniform(rng, -0.15, 0.15) * h};
        if (auto s = sanitize_box(b, cfg_.image_size)) {
          out.proposals.push_back(*s);
          out.proposal_objectness.push_back(1.0);
        }
      }
    }
  }

  RpnTargets rpn_targets(const std::vector<Target>& targets) const {
    RpnTargets rt;
    const std::size_t na = anchors_.size();
    rt.anchor_label.assign(na, 0);
    rt.deltas.assign(na, {0, 0, 0, 0});
    std::vector<double> best_iou(na, 0.0);
    std::vector<int> best_t(na, -1);
    for (std::size_t a = 0; a < na; ++a)
      for (std::size_t t = 0; t < targets.size(); ++t) {
        const double v = iou(anchors_[a], targets[t].box);
        if (v > best_iou[a]) {
          best_iou[a] = v;
          best_t[a] = static_cast<int>(t);
        }
      }
    for (std::size_t a = 0; a < na; ++a) {
      if (best_iou[a] >= 0.5) rt.anchor_label[a] = 1;
      else if (best_iou[a] >= 0.3) rt.anchor_label[a] = -1;
    }
    // the best anchor of every target is positive
    for (std::size_t t = 0; t < targets.size(); ++t) {
      std::size_t arg = 0;
      double mx = -1.0;
      for (std::size_t a = 0; a < na; ++a) {
        const double v = iou(anchors_[a], targets[t].box);
        if (v > mx) {
          mx = v;
          arg = a;
        }
      }
      if (mx > 0.0) {
        rt.anchor_label[arg] = 1;
        best_t[arg] = static_cast<int>(t);
      }
    }
    for (std::size_t a = 0; a < na; ++a)
      if (rt.anchor_label[a] == 1) rt.deltas[a] = encode_box(anchors_[a], targets[static_cast<std::size_t>(best_t[a])].box, kRpnDeltaScale);
    return rt;
  }

  void roi_heads(const DetectorParams& p, ForwardOutput& out) const {
    auto& c = out.cache;
    const int fs = cfg_.feature_size();
    const int rs = cfg_.roi_size;
    const int ss = rs * rs;
    const Eigen::Index n = static_cast<Eigen::Index>(out.proposals.size());
    c.roi = nn::Mat::Zero(cfg_.roi_features(), n);
    c.taps.assign(static_cast<std::size_t>(n * ss), {});
    const double stride = DetectorConfig::kStride;
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& b = out.proposals[static_cast<std::size_t>(j)];
      for (int iy = 0; iy < rs; ++iy)
        for (int ix = 0; ix < rs; ++ix) {
          const double sx = b.x_min + (ix + 0.5) / rs * b.width();
          const double sy = b.y_min + (iy + 0.5) / rs * b.height();
          const double fx = std::clamp(sx / stride - 0.5, 0.0, fs - 1.0);
          const double fy = std::clamp(sy / stride - 0.5, 0.0, fs - 1.0);
          const int x0 = static_cast<int>(std::floor(fx));
          const int y0 = static_cast<int>(std::floor(fy));
          const int x1 = std::min(x0 + 1, fs - 1);
          const int y1 = std::min(y0 + 1, fs - 1);
          const float wx = static_cast<float>(fx - x0);
          const float wy = static_cast<float>(fy - y0);
          const int sidx = iy * rs + ix;
          auto& t = c.taps[static_cast<std::size_t>(j * ss + sidx)];
          t = {std::pair{y0 * fs + x0, (1 - wx) * (1 - wy)}, std::pair{y0 * fs + x1, wx * (1 - wy)},
               std::pair{y1 * fs + x0, (1 - wx) * wy}, std::pair{y1 * fs + x1, wx * wy}};
          for (int ch = 0; ch < cfg_.c3; ++ch) {
            float v = 0.f;
            for (const auto& [idx, w] : t) v += w * c.feat(ch, idx);
            c.roi(ch * ss + sidx, j) = v;
          }
        }
    }

    c.fc1 = (p[kFc1W] * c.roi).colwise() + p[kFc1B].col(0);
    nn::relu_inplace(c.fc1);
    const nn::Mat logits = (p[kClsW] * c.fc1).colwise() + p[kClsB].col(0);
    out.roi_deltas = (p[kBoxW] * c.fc1).colwise() + p[kBoxB].col(0);
    c.emb_hidden = (p[kEmb1W] * c.roi).colwise() + p[kEmb1B].col(0);
    nn::relu_inplace(c.emb_hidden);
    c.emb_raw = (p[kEmb2W] * c.emb_hidden).colwise() + p[kEmb2B].col(0);
    c.emb_norm = c.emb_raw.colwise().norm().transpose().cwiseMax(1e-12f);

    auto& batch = out.batch;
    batch.logits = logits.transpose().cast<double>();
    batch.embeddings = nn::Mat(c.emb_raw * c.emb_norm.cwiseInverse().asDiagonal()).transpose().cast<double>();
    // renormalise in double so rows are unit length to double precision
    for (Eigen::Index j = 0; j < n; ++j) batch.embeddings.row(j).normalize();
    const LabelSpace space = cfg_.label_space();
    batch.assigned_label.assign(static_cast<std::size_t>(n), space.background_id());
    batch.assigned_iou.assign(static_cast<std::size_t>(n), 0.0);
    out.matched_target.assign(static_cast<std::size_t>(n), -1);
  }

  void assign(ForwardOutput& out, const std::vector<Target>& targets) const {
    const LabelSpace space = cfg_.label_space();
    for (std::size_t j = 0; j < out.proposals.size(); ++j) {
      double best = 0.0;
      int arg = -1;
      for (std::size_t t = 0; t < targets.size(); ++t) {
        const double v = iou(out.proposals[j], targets[t].box);
        if (v > best) {
          best = v;
          arg = static_cast<int>(t);
        }
      }
      out.batch.assigned_iou[j] = best;
      if (arg >= 0 && best > 0.5) {
        out.batch.assigned_label[j] = targets[static_cast<std::size_t>(arg)].label;
        out.matched_target[j] = arg;
      } else {
        out.batch.assigned_label[j] = space.background_id();
      }
    }
  }

  DetectorConfig cfg_;
  std::vector<BoundingBox> anchors_;
};

}  // namespace cfl
