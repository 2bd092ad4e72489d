#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cfl/geometry.hpp"
#include "cfl/label_space.hpp"

namespace cfl {

using Embedding = Eigen::VectorXd;

struct PooledEmbedding {
  Embedding vector;
  int class_id = 0;
  double score = 0.0;
};

struct AdmissionScore {
  double s_iou = 0.0;
  double s_cos = 1.0;
};

/// s_iou is the box/target IoU; s_cos the cosine to the class center, or 1
/// when the class has no center yet.
inline AdmissionScore admission_score(const Embedding& e, const BoundingBox& box, const BoundingBox& gt_box,
                                      const std::optional<Embedding>& center) {
  AdmissionScore s;
  s.s_iou = iou(box, gt_box);
  s.s_cos = center ? e.dot(*center) : 1.0;
  return s;
}

enum class InsertResult { Admitted, Replaced, Rejected };

struct PoolConfig {
  int capacity = 256;
  int dim = 128;
  double iou_threshold = 0.7;
  double cos_threshold = 0.5;
  bool store_unknown = true;
};

/// Frozen copy of the pool: one (count x dim) matrix per stored class, indexed
/// by internal label (ID classes then unknown).
struct PoolSnapshot {
  int dim = 0;
  std::vector<Eigen::MatrixXd> per_class;

  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& m : per_class) n += static_cast<std::size_t>(m.rows());
    return n;
  }
};

/// Per-class bounded store of unit-norm embeddings. Candidates must clear both
/// the IoU and cosine gates; once a class is full a candidate only enters by
/// evicting the lowest-scoring entry, and only if it scores higher.
class EmbeddingPool {
 public:
  EmbeddingPool() = default;
  EmbeddingPool(const LabelSpace& space, PoolConfig cfg)
      : space_(space), cfg_(cfg), slots_(static_cast<std::size_t>(space.num_id_classes() + 1)),
        centers_(slots_.size()) {
    if (cfg.capacity < 1 || cfg.dim < 1) throw std::invalid_argument("EmbeddingPool: bad capacity or dim");
  }

  const PoolConfig& config() const { return cfg_; }
  const LabelSpace& label_space() const { return space_; }
  int num_classes() const { return static_cast<int>(slots_.size()); }

  const std::vector<PooledEmbedding>& entries(int class_id) const { return slots_.at(slot(class_id)); }
  std::size_t size(int class_id) const { return entries(class_id).size(); }
  const std::optional<Embedding>& center(int class_id) const { return centers_.at(slot(class_id)); }

  InsertResult try_insert(PooledEmbedding cand, double s_iou, double s_cos) {
    const std::size_t k = slot(cand.class_id);
    if (space_.is_unknown(cand.class_id) && !cfg_.store_unknown) return InsertResult::Rejected;
    if (cand.vector.size() != cfg_.dim) throw std::invalid_argument("EmbeddingPool: embedding dimension mismatch");
    auto& bucket = slots_[k];
    // the cosine gate needs a center; an empty class admits on IoU alone
    if (!centers_[k]) s_cos = 1.0;
    if (!(s_iou > cfg_.iou_threshold) || !(s_cos > cfg_.cos_threshold)) return InsertResult::Rejected;
    cand.score = s_iou * s_cos;

    InsertResult result;
    if (bucket.size() < static_cast<std::size_t>(cfg_.capacity)) {
      bucket.push_back(std::move(cand));
      result = InsertResult::Admitted;
    } else {
      std::size_t worst = 0;
      for (std::size_t i = 1; i < bucket.size(); ++i)
        if (bucket[i].score < bucket[worst].score) worst = i;
      if (!(cand.score > bucket[worst].score)) return InsertResult::Rejected;
      bucket[worst] = std::move(cand);
      result = InsertResult::Replaced;
    }
    recompute_center(k);
    return result;
  }

  PoolSnapshot snapshot() const {
    PoolSnapshot s;
    s.dim = cfg_.dim;
    for (const auto& bucket : slots_) {
      Eigen::MatrixXd m(static_cast<Eigen::Index>(bucket.size()), cfg_.dim);
      for (std::size_t i = 0; i < bucket.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = bucket[i].vector.transpose();
      s.per_class.push_back(std::move(m));
    }
    return s;
  }

  /// Replaces the contents of one class; used when restoring checkpoints.
  void restore(int class_id, std::vector<PooledEmbedding> entries) {
    const std::size_t k = slot(class_id);
    slots_[k] = std::move(entries);
    recompute_center(k);
  }

 private:
  std::size_t slot(int class_id) const {
    if (space_.is_background(class_id) || !space_.is_valid(class_id)) {
      throw std::invalid_argument("EmbeddingPool: background or invalid class id");
    }
    return static_cast<std::size_t>(class_id);
  }

  void recompute_center(std::size_t k) {
    const auto& bucket = slots_[k];
    if (bucket.empty()) {
      centers_[k].reset();
      return;
    }
    Embedding mean = Embedding::Zero(cfg_.dim);
    for (const auto& e : bucket) mean += e.vector;
    const double n = mean.norm();
    if (n > 0.0) {
      centers_[k] = mean / n;
    } else {
      centers_[k].reset();
    }
  }

  LabelSpace space_;
  PoolConfig cfg_;
  std::vector<std::vector<PooledEmbedding>> slots_;
  std::vector<std::optional<Embedding>> centers_;
};

}  // namespace cfl
