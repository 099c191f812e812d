#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "casd/autodiff.hpp"
#include "casd/detect_eval.hpp"
#include "casd/vision.hpp"

namespace casd {

inline constexpr double kLogEps = 1e-6;
inline constexpr float kMiningIou = 0.5f;

/// Per-branch score matrices for one image view. Class-major: rows are
/// classes, columns proposals. The last row of each refinement matrix is
/// background.
template <typename T>
struct ScoreMatrices {
  Var<T> x_cls;           // [C x N] logits
  Var<T> x_det;           // [C x N] logits
  Var<T> x;               // [C x N], softmax_cls(x_cls) * softmax_det(x_det)
  std::vector<Var<T>> x_k;  // K x [(C+1) x N], softmax over classes
  std::vector<Var<T>> log_x_k;  // log of x_k, taken from the logits
  Var<T> offsets;         // [N x 4] box regression (t_x, t_y, t_w, t_h)
};

/// WSDDN two-branch head, K refinement classifiers and a class-agnostic
/// regressor, all reading the same proposal vectors.
template <typename T>
class MilHead {
 public:
  MilHead() = default;
  MilHead(std::size_t in_features, std::size_t num_classes, std::size_t num_refine,
          std::mt19937_64& rng);

  ScoreMatrices<T> forward(Graph<T>& g, const Var<T>& vecs);

  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t num_refine() const noexcept { return refine_w_.size(); }
  std::vector<Parameter<T>*> parameters();

 private:
  std::size_t num_classes_ = 0;
  Parameter<T> cls_w_, cls_b_, det_w_, det_b_, reg_w_, reg_b_;
  std::vector<Parameter<T>> refine_w_, refine_b_;
};

// Dual softmax product: classes (axis 0) for cls, proposals (axis 1) for det.
template <typename T>
Var<T> wsddn_scores(const Var<T>& x_cls, const Var<T>& x_det);

// p_c = sum_i x_{c,i}, kept inside [0, 1].
template <typename T>
Var<T> image_scores(const Var<T>& x);

// Binary cross-entropy summed over classes, p clamped to [eps, 1 - eps].
template <typename T>
Var<T> mlc_loss(const Var<T>& p, std::span<const float> labels, T eps = T(kLogEps));

/// Instance-level supervision mined from the previous stage's scores.
/// label[r] in [0, C) is a foreground class, label[r] == C is background.
struct PseudoLabels {
  std::vector<int> label;
  std::vector<float> weight;  // 0 means the proposal is ignored
  std::vector<int> seed;      // index of the assigned seed proposal, -1 if none
  int num_classes = 0;

  std::size_t num_labeled() const;
  std::size_t num_positive() const;
  bool is_positive(std::size_t r) const { return label[r] < num_classes && weight[r] > 0; }
};

/// For every present class, the top-scoring proposal becomes a seed. A proposal
/// with IoU >= 0.5 to its nearest seed takes that seed's class, weighted by the
/// seed score; everything else is background with weight 1. Only the first C
/// rows of `scores` are read.
template <typename T>
PseudoLabels mine_pseudo_labels(const Tensor<T>& scores, std::span<const float> labels,
                                std::span<const BBox> proposals);

// -(1/N_k) sum_r w_r log x_k[label_r, r] from log-probabilities; 0 when
// nothing is labeled.
template <typename T>
Var<T> refinement_loss(const Var<T>& log_x_k, const PseudoLabels& labels);

using BoxOffsets = std::array<float, 4>;

BoxOffsets encode_offsets(const BBox& box, const BBox& target);
BBox decode_offsets(const BBox& box, const BoxOffsets& t);

// Regression targets [N x 4] for the positives of `labels` (zeros elsewhere).
template <typename T>
Tensor<T> regression_targets(std::span<const BBox> proposals, const PseudoLabels& labels);

// (1/G) sum over positives of the smooth-L1 distance summed over the 4 offsets.
template <typename T>
Var<T> regression_loss(const Var<T>& offsets, const Tensor<T>& targets,
                       const PseudoLabels& labels);

// Mean of the per-view score matrices of one branch.
template <typename T>
Tensor<T> aggregate_scores_psa(std::span<const Tensor<T>> views);
template <typename T>
Tensor<T> aggregate_scores_psa(const Tensor<T>& x, const Tensor<T>& x_flip,
                               const Tensor<T>& x_scale) {
  const Tensor<T> views[] = {x, x_flip, x_scale};
  return aggregate_scores_psa<T>(std::span<const Tensor<T>>(views));
}

/// Sums the foreground rows of every branch, optionally refines boxes with
/// regression offsets [N x 4], then runs per-class NMS.
std::vector<Detection> infer_detections(std::span<const Tensor<float>> branch_scores,
                                        std::span<const BBox> proposals, float nms_thr,
                                        int num_classes, const Tensor<float>* offsets = nullptr,
                                        float image_w = 0, float image_h = 0);

}  // namespace casd
