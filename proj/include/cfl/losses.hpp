#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "cfl/label_space.hpp"
#include "cfl/memory_pool.hpp"

namespace cfl {

/// Per-proposal inputs to the ROI losses. Labels use internal indices.
struct ProposalBatch {
  Eigen::MatrixXd logits;      // N x (K+2)
  Eigen::MatrixXd embeddings;  // N x d, unit rows
  std::vector<int> assigned_label;
  std::vector<double> assigned_iou;
  bool is_supervised_stage = true;

  Eigen::Index rows() const { return logits.rows(); }
};

struct LossWeights {
  double alpha_t = 0.1;
  double beta = 1.0;
  double lambda = 2.0;
  double tau = 0.1;
  double alpha = 1.0;
  int k_mine = 3;

  void validate() const {
    if (alpha_t < 0 || beta < 0 || lambda < 0 || alpha < 0 || k_mine < 0)
      throw std::invalid_argument("loss weights must be non-negative");
    if (!(tau > 0)) throw std::invalid_argument("tau must be positive");
  }
};

enum class Stage { Sup, Semi };

struct LossResult {
  double loss = 0.0;
  Eigen::MatrixXd grad;
  int rows = 0;  // contributing rows (anchors for the contrastive loss)
  bool skipped = false;
};

namespace detail {

inline void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw std::domain_error(std::string(what) + ": non-finite input");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Feature contrastive loss
// ---------------------------------------------------------------------------

/// Supervised-contrastive loss of proposal embeddings against the pool.
///
/// Anchors are ID-labelled proposals with assigned IoU > 0.5. For an anchor of
/// class c the loss is
///   -(1/|P|) sum_{k in P} log( exp(e.e_k/tau) / sum_{u in D} exp(e.e_u/tau) )
/// with P the pooled vectors of c and D every pooled vector (P plus all other
/// classes, unknown included). With `literal_denominator` D excludes P.
/// Unknown anchors have no positives and contribute nothing directly. The
/// result is the mean over contributing anchors; the gradient is w.r.t. the
/// batch embeddings.
inline LossResult feature_contrastive_loss(const ProposalBatch& batch, const PoolSnapshot& pool, double tau,
                                           const LabelSpace& space, bool literal_denominator = false) {
  if (!(tau > 0)) throw std::invalid_argument("feature_contrastive_loss: tau must be positive");
  detail::require_finite(batch.embeddings, "feature_contrastive_loss");
  const Eigen::Index n = batch.embeddings.rows();
  const Eigen::Index d = batch.embeddings.cols();
  LossResult out;
  out.grad = Eigen::MatrixXd::Zero(n, d);

  // stacked pool and per-row class tags
  const Eigen::Index total = static_cast<Eigen::Index>(pool.total_rows());
  Eigen::MatrixXd all(total, d);
  std::vector<int> owner(static_cast<std::size_t>(total));
  {
    Eigen::Index r = 0;
    for (std::size_t c = 0; c < pool.per_class.size(); ++c) {
      const auto& m = pool.per_class[c];
      if (m.rows() == 0) continue;
      all.middleRows(r, m.rows()) = m;
      std::fill(owner.begin() + r, owner.begin() + r + m.rows(), static_cast<int>(c));
      r += m.rows();
    }
  }

  double sum = 0.0;
  int anchors = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int c = batch.assigned_label[static_cast<std::size_t>(i)];
    if (!space.is_id(c) || !(batch.assigned_iou[static_cast<std::size_t>(i)] > 0.5)) continue;
    if (static_cast<std::size_t>(c) >= pool.per_class.size() || pool.per_class[c].rows() == 0) continue;
    const Eigen::VectorXd e = batch.embeddings.row(i).transpose();
    const Eigen::VectorXd sims = all * e / tau;

    // log-sum-exp over the denominator set
    double mx = -INFINITY;
    for (Eigen::Index r = 0; r < total; ++r)
      if (!literal_denominator || owner[r] != c) mx = std::max(mx, sims(r));
    if (!std::isfinite(mx)) continue;  // literal form with no negatives
    double z = 0.0;
    for (Eigen::Index r = 0; r < total; ++r)
      if (!literal_denominator || owner[r] != c) z += std::exp(sims(r) - mx);
    const double lse = mx + std::log(z);

    const auto& pos = pool.per_class[c];
    const double inv_p = 1.0 / static_cast<double>(pos.rows());
    const Eigen::VectorXd pos_mean = pos.colwise().sum().transpose() * inv_p;
    sum += lse - e.dot(pos_mean) / tau;

    Eigen::VectorXd g = -pos_mean;
    for (Eigen::Index r = 0; r < total; ++r)
      if (!literal_denominator || owner[r] != c) g += std::exp(sims(r) - lse) * all.row(r).transpose();
    out.grad.row(i) = g.transpose() / tau;
    ++anchors;
  }
  out.rows = anchors;
  if (anchors == 0) {
    out.skipped = true;
    return out;
  }
  out.loss = sum / anchors;
  out.grad /= static_cast<double>(anchors);
  return out;
}

// ---------------------------------------------------------------------------
// Restricted softmax and uncertainty classification loss
// ---------------------------------------------------------------------------

/// Softmax of `row` normalised over restricted_class_set(kind); entries follow
/// that set's order.
inline Eigen::VectorXd restricted_softmax(const Eigen::VectorXd& row, RowKind kind, const LabelSpace& space) {
  const auto set = restricted_class_set(kind, space);
  Eigen::VectorXd p(static_cast<Eigen::Index>(set.size()));
  double mx = -INFINITY;
  for (int c : set) mx = std::max(mx, row(c));
  double z = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    p(static_cast<Eigen::Index>(i)) = std::exp(row(set[i]) - mx);
    z += p(static_cast<Eigen::Index>(i));
  }
  return p / z;
}

/// (1 - p_k)^alpha * p_k.
inline double uncertainty_weight(double p_k, double alpha) { return std::pow(1.0 - p_k, alpha) * p_k; }

/// Largest ID-class probability under the full softmax of a row.
inline double max_id_probability(const Eigen::VectorXd& row, const LabelSpace& space) {
  const Eigen::VectorXd p = restricted_softmax(row, RowKind::ID, space);
  return p.head(space.num_id_classes()).maxCoeff();
}

/// Uncertainty classification loss over ROI logits.
///
/// OOD rows are the unknown-assigned proposals plus the `k_mine` background
/// proposals with the largest uncertainty weight. Each OOD row adds
/// w_u * -log p_u, where p_u is normalised over {unknown, background} and w_u is
/// held constant for the gradient. In the supervised stage every other row
/// (ID or background) adds -log p_label over all K+2 classes. The semi stage
/// keeps only the OOD rows. The sum is divided by the number of contributing
/// rows.
inline LossResult uncertainty_classification_loss(const ProposalBatch& batch, const LabelSpace& space, double alpha,
                                                  int k_mine, Stage stage, std::vector<int>* mined_rows = nullptr) {
  detail::require_finite(batch.logits, "uncertainty_classification_loss");
  if (batch.logits.cols() != space.total_logits())
    throw std::invalid_argument("uncertainty_classification_loss: logits width must be K+2");
  const Eigen::Index n = batch.logits.rows();
  LossResult out;
  out.grad = Eigen::MatrixXd::Zero(n, batch.logits.cols());

  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  std::vector<int> background;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd row = batch.logits.row(i).transpose();
    w[i] = uncertainty_weight(max_id_probability(row, space), alpha);
    if (space.is_background(batch.assigned_label[i])) background.push_back(static_cast<int>(i));
  }
  std::stable_sort(background.begin(), background.end(), [&](int a, int b) { return w[a] > w[b]; });
  const std::size_t take = std::min(background.size(), static_cast<std::size_t>(std::max(k_mine, 0)));
  std::vector<char> is_ood(static_cast<std::size_t>(n), 0);
  for (std::size_t j = 0; j < take; ++j) is_ood[background[j]] = 1;
  if (mined_rows) mined_rows->assign(background.begin(), background.begin() + static_cast<std::ptrdiff_t>(take));
  for (Eigen::Index i = 0; i < n; ++i)
    if (space.is_unknown(batch.assigned_label[i])) is_ood[i] = 1;

  const int u = space.unknown_id();
  const int bg = space.background_id();
  double sum = 0.0;
  int rows = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd row = batch.logits.row(i).transpose();
    if (is_ood[i]) {
      const Eigen::VectorXd q = restricted_softmax(row, RowKind::OOD, space);  // {unknown, background}
      sum += -w[i] * std::log(q(0));
      out.grad(i, u) = w[i] * (q(0) - 1.0);
      out.grad(i, bg) = w[i] * q(1);
      ++rows;
    } else if (stage == Stage::Sup) {
      const int t = batch.assigned_label[i];
      const Eigen::VectorXd p = restricted_softmax(row, RowKind::ID, space);
      sum += -std::log(p(t));
      out.grad.row(i) = p.transpose();
      out.grad(i, t) -= 1.0;
      ++rows;
    }
  }
  out.rows = rows;
  const double norm = std::max(rows, 1);
  out.loss = sum / norm;
  out.grad /= norm;
  return out;
}

/// Cross-entropy over the ID classes and background only; the unknown column
/// receives no gradient. This is the ROI classifier of the baselines that do
/// not model the unknown class. Unknown-assigned rows are ignored.
inline LossResult closed_set_classification_loss(const ProposalBatch& batch, const LabelSpace& space) {
  detail::require_finite(batch.logits, "closed_set_classification_loss");
  const Eigen::Index n = batch.logits.rows();
  const int k = space.num_id_classes();
  const int bg = space.background_id();
  LossResult out;
  out.grad = Eigen::MatrixXd::Zero(n, batch.logits.cols());
  double sum = 0.0;
  int rows = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = batch.assigned_label[i];
    if (space.is_unknown(t)) continue;
    double mx = batch.logits(i, bg);
    for (int c = 0; c < k; ++c) mx = std::max(mx, batch.logits(i, c));
    double z = std::exp(batch.logits(i, bg) - mx);
    for (int c = 0; c < k; ++c) z += std::exp(batch.logits(i, c) - mx);
    const double lz = mx + std::log(z);
    sum += lz - batch.logits(i, t);
    for (int c = 0; c < k; ++c) out.grad(i, c) = std::exp(batch.logits(i, c) - lz);
    out.grad(i, bg) = std::exp(batch.logits(i, bg) - lz);
    out.grad(i, t) -= 1.0;
    ++rows;
  }
  out.rows = rows;
  const double norm = std::max(rows, 1);
  out.loss = sum / norm;
  out.grad /= norm;
  return out;
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

struct LossTerms {
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double roi_reg = 0.0;
  double fc = 0.0;
  double uc = 0.0;  // ROI classification objective
};

/// Supervised branch: every term. Unsupervised branch: RPN objectness,
/// contrastive and classification only.
inline double supervised_total(const LossTerms& t, const LossWeights& w) {
  return t.rpn_cls + t.rpn_reg + t.roi_reg + w.alpha_t * t.fc + w.beta * t.uc;
}

inline double unsupervised_total(const LossTerms& t, const LossWeights& w) {
  return t.rpn_cls + w.alpha_t * t.fc + w.beta * t.uc;
}

inline double compose_total_loss(const LossTerms& sup, const LossTerms& unsup, const LossWeights& w) {
  w.validate();
  return supervised_total(sup, w) + w.lambda * unsupervised_total(unsup, w);
}

}  // namespace cfl
