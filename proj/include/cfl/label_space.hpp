#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cfl {

enum class RowKind { ID, OOD };

/// The label partition {ID classes} + {unknown} + {background}.
///
/// Internally labels are 0-based: ID classes occupy [0, K), unknown is K and
/// background is K+1, which is also the last logit column. Reports and
/// serialized files use 1-based ids, so ID classes are 1..K and unknown is K+1.
class LabelSpace {
 public:
  LabelSpace() = default;
  explicit LabelSpace(int num_id_classes) : k_(num_id_classes) {
    if (num_id_classes < 1) throw std::invalid_argument("LabelSpace: K must be positive");
  }

  int num_id_classes() const { return k_; }
  int unknown_id() const { return k_; }
  int background_id() const { return k_ + 1; }
  int total_logits() const { return k_ + 2; }

  bool is_id(int label) const { return label >= 0 && label < k_; }
  bool is_unknown(int label) const { return label == k_; }
  bool is_background(int label) const { return label == k_ + 1; }
  bool is_valid(int label) const { return label >= 0 && label <= k_ + 1; }

  int to_external(int label) const { return label + 1; }
  int from_external(int label) const { return label - 1; }

  bool operator==(const LabelSpace&) const = default;

 private:
  int k_ = 1;
};

/// Indices over which a row's softmax is normalised: every label for ID rows,
/// only {unknown, background} for OOD rows.
inline std::vector<int> restricted_class_set(RowKind kind, const LabelSpace& space) {
  std::vector<int> out;
  if (kind == RowKind::ID) {
    out.reserve(space.total_logits());
    for (int c = 0; c < space.total_logits(); ++c) out.push_back(c);
  } else {
    out = {space.unknown_id(), space.background_id()};
  }
  return out;
}

}  // namespace cfl
