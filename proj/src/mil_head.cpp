#include "casd/mil_head.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace casd {

template <typename T>
MilHead<T>::MilHead(std::size_t in_features, std::size_t num_classes, std::size_t num_refine,
                    std::mt19937_64& rng)
    : num_classes_(num_classes),
      cls_w_("mil.cls.w", he_normal<T>({in_features, num_classes}, in_features, rng)),
      cls_b_("mil.cls.b", Tensor<T>({num_classes})),
      det_w_("mil.det.w", he_normal<T>({in_features, num_classes}, in_features, rng)),
      det_b_("mil.det.b", Tensor<T>({num_classes})),
      // Zero-initialised: regression starts at the identity transform.
      reg_w_("mil.reg.w", Tensor<T>({in_features, 4})),
      reg_b_("mil.reg.b", Tensor<T>({4})) {
  refine_w_.reserve(num_refine);
  refine_b_.reserve(num_refine);
  for (std::size_t k = 0; k < num_refine; ++k) {
    const std::string tag = "mil.refine" + std::to_string(k + 1);
    refine_w_.emplace_back(tag + ".w",
                           he_normal<T>({in_features, num_classes + 1}, in_features, rng));
    refine_b_.emplace_back(tag + ".b", Tensor<T>({num_classes + 1}));
  }
}

template <typename T>
ScoreMatrices<T> MilHead<T>::forward(Graph<T>& g, const Var<T>& vecs) {
  ScoreMatrices<T> s;
  s.x_cls = transpose(linear(g, vecs, cls_w_, cls_b_));
  s.x_det = transpose(linear(g, vecs, det_w_, det_b_));
  s.x = wsddn_scores(s.x_cls, s.x_det);
  for (std::size_t k = 0; k < refine_w_.size(); ++k) {
    auto logits = transpose(linear(g, vecs, refine_w_[k], refine_b_[k]));
    s.x_k.push_back(softmax(logits, 0));
    s.log_x_k.push_back(log_softmax(logits, 0));
  }
  s.offsets = linear(g, vecs, reg_w_, reg_b_);
  return s;
}

template <typename T>
std::vector<Parameter<T>*> MilHead<T>::parameters() {
  std::vector<Parameter<T>*> out{&cls_w_, &cls_b_, &det_w_, &det_b_};
  for (std::size_t k = 0; k < refine_w_.size(); ++k) {
    out.push_back(&refine_w_[k]);
    out.push_back(&refine_b_[k]);
  }
  out.push_back(&reg_w_);
  out.push_back(&reg_b_);
  return out;
}

template <typename T>
Var<T> wsddn_scores(const Var<T>& x_cls, const Var<T>& x_det) {
  if (x_cls.shape() != x_det.shape() || x_cls.shape().size() != 2) {
    throw ShapeError("wsddn_scores expects two [C x N] matrices");
  }
  return mul(softmax(x_cls, 0), softmax(x_det, 1));
}

template <typename T>
Var<T> image_scores(const Var<T>& x) {
  // The sum is at most 1 in exact arithmetic; rounding can overshoot by an ulp.
  return clamp(sum_axis(x, 1), T(0), T(1));
}

template <typename T>
Var<T> mlc_loss(const Var<T>& p, std::span<const float> labels, T eps) {
  auto& g = p.graph();
  if (p.value().numel() != labels.size()) throw ShapeError("mlc_loss: label count mismatch");
  Tensor<T> y(p.shape()), not_y(p.shape());
  for (std::size_t c = 0; c < labels.size(); ++c) {
    y[c] = static_cast<T>(labels[c]);
    not_y[c] = T(1) - y[c];
  }
  auto pc = clamp(p, eps, T(1) - eps);
  auto pos = mul(g.input(std::move(y)), log(pc));
  auto neg = mul(g.input(std::move(not_y)), log(add_scalar(scale(pc, T(-1)), T(1))));
  return scale(sum(add(pos, neg)), T(-1));
}

std::size_t PseudoLabels::num_labeled() const {
  return static_cast<std::size_t>(
      std::count_if(weight.begin(), weight.end(), [](float w) { return w > 0; }));
}

std::size_t PseudoLabels::num_positive() const {
  std::size_t n = 0;
  for (std::size_t r = 0; r < label.size(); ++r) n += is_positive(r) ? 1 : 0;
  return n;
}

template <typename T>
PseudoLabels mine_pseudo_labels(const Tensor<T>& scores, std::span<const float> labels,
                                std::span<const BBox> proposals) {
  const std::size_t c_count = labels.size();
  const std::size_t n = proposals.size();
  if (scores.rank() != 2 || scores.dim(0) < c_count || scores.dim(1) != n) {
    throw ShapeError("mine_pseudo_labels: scores " + shape_str(scores.shape()) +
                     " incompatible with " + std::to_string(c_count) + " classes and " +
                     std::to_string(n) + " proposals");
  }
  struct Seed {
    int cls;
    std::size_t index;
    float score;
  };
  std::vector<Seed> seeds;
  for (std::size_t c = 0; c < c_count; ++c) {
    if (labels[c] <= 0.5f) continue;
    std::size_t best = 0;
    for (std::size_t r = 1; r < n; ++r) {
      if (scores.at(c, r) > scores.at(c, best)) best = r;
    }
    seeds.push_back({static_cast<int>(c), best, static_cast<float>(scores.at(c, best))});
  }
  if (seeds.empty()) throw ContractError("mine_pseudo_labels: no positive class in labels");

  PseudoLabels out;
  out.num_classes = static_cast<int>(c_count);
  out.label.assign(n, static_cast<int>(c_count));
  out.weight.assign(n, 0.0f);
  out.seed.assign(n, -1);
  for (std::size_t r = 0; r < n; ++r) {
    float best_iou = -1;
    const Seed* best = nullptr;
    for (const auto& s : seeds) {
      const float o = iou(proposals[r], proposals[s.index]);
      if (o > best_iou) {
        best_iou = o;
        best = &s;
      }
    }
    if (best_iou >= kMiningIou) {
      out.label[r] = best->cls;
      out.weight[r] = best->score;
      out.seed[r] = static_cast<int>(best->index);
    } else {
      out.weight[r] = 1.0f;
    }
  }
  return out;
}

template <typename T>
Var<T> refinement_loss(const Var<T>& log_x_k, const PseudoLabels& labels) {
  auto& g = log_x_k.graph();
  const auto& shape = log_x_k.shape();
  if (shape.size() != 2 || shape[1] != labels.label.size() ||
      shape[0] != static_cast<std::size_t>(labels.num_classes) + 1) {
    throw ShapeError("refinement_loss: scores " + shape_str(shape) + " do not match labels");
  }
  const std::size_t n_k = labels.num_labeled();
  if (n_k == 0) {
    std::clog << "warning: refinement branch has no labeled proposals\n";
    return g.input(Tensor<T>::scalar(T(0)));
  }
  Tensor<T> w(shape);
  for (std::size_t r = 0; r < shape[1]; ++r) {
    if (labels.weight[r] > 0) {
      w.at(static_cast<std::size_t>(labels.label[r]), r) = static_cast<T>(labels.weight[r]);
    }
  }
  return scale(sum(mul(g.input(std::move(w)), log_x_k)), T(-1) / static_cast<T>(n_k));
}

BoxOffsets encode_offsets(const BBox& box, const BBox& target) {
  const double w = box.width(), h = box.height();
  const double cx = box.x1 + 0.5 * w, cy = box.y1 + 0.5 * h;
  const double tw = target.width(), th = target.height();
  const double tcx = target.x1 + 0.5 * tw, tcy = target.y1 + 0.5 * th;
  return {static_cast<float>((tcx - cx) / w), static_cast<float>((tcy - cy) / h),
          static_cast<float>(std::log(tw / w)), static_cast<float>(std::log(th / h))};
}

BBox decode_offsets(const BBox& box, const BoxOffsets& t) {
  // Keeps exp() finite for wild predictions.
  constexpr double kMaxLog = 4.0;
  const double w = box.width(), h = box.height();
  const double cx = box.x1 + 0.5 * w + t[0] * w;
  const double cy = box.y1 + 0.5 * h + t[1] * h;
  const double nw = w * std::exp(std::min<double>(t[2], kMaxLog));
  const double nh = h * std::exp(std::min<double>(t[3], kMaxLog));
  return {static_cast<float>(cx - 0.5 * nw), static_cast<float>(cy - 0.5 * nh),
          static_cast<float>(cx + 0.5 * nw), static_cast<float>(cy + 0.5 * nh)};
}

template <typename T>
Tensor<T> regression_targets(std::span<const BBox> proposals, const PseudoLabels& labels) {
  Tensor<T> t({proposals.size(), 4});
  for (std::size_t r = 0; r < proposals.size(); ++r) {
    if (!labels.is_positive(r)) continue;
    const auto off = encode_offsets(proposals[r], proposals[static_cast<std::size_t>(labels.seed[r])]);
    for (std::size_t j = 0; j < 4; ++j) t.at(r, j) = static_cast<T>(off[j]);
  }
  return t;
}

template <typename T>
Var<T> regression_loss(const Var<T>& offsets, const Tensor<T>& targets,
                       const PseudoLabels& labels) {
  auto& g = offsets.graph();
  const std::size_t n = labels.label.size();
  if (offsets.shape() != Shape{n, 4} || targets.shape() != Shape{n, 4}) {
    throw ShapeError("regression_loss expects [N x 4] offsets and targets");
  }
  const std::size_t positives = labels.num_positive();
  if (positives == 0) return g.input(Tensor<T>::scalar(T(0)));
  Tensor<T> mask({n, 1});
  Tensor<T> masked_targets = targets;
  for (std::size_t r = 0; r < n; ++r) {
    const bool pos = labels.is_positive(r);
    mask[r] = pos ? T(1) : T(0);
    if (!pos) {
      for (std::size_t j = 0; j < 4; ++j) masked_targets.at(r, j) = T(0);
    }
  }
  auto pred = mul(offsets, g.input(std::move(mask)));
  // smooth_l1 averages over all N*4 entries; rescale to a per-positive sum over offsets.
  return scale(smooth_l1(pred, g.input(std::move(masked_targets))),
               static_cast<T>(n * 4) / static_cast<T>(positives));
}

template <typename T>
Tensor<T> aggregate_scores_psa(std::span<const Tensor<T>> views) {
  if (views.empty()) throw ShapeError("aggregate_scores_psa needs at least one view");
  Tensor<T> out(views[0].shape());
  for (const auto& v : views) {
    if (v.shape() != out.shape()) {
      throw ShapeError("aggregate_scores_psa shape mismatch " + shape_str(v.shape()) + " vs " +
                       shape_str(out.shape()));
    }
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += v[i];
  }
  const T inv = T(1) / static_cast<T>(views.size());
  for (auto& e : out.data()) e *= inv;
  return out;
}

std::vector<Detection> infer_detections(std::span<const Tensor<float>> branch_scores,
                                        std::span<const BBox> proposals, float nms_thr,
                                        int num_classes, const Tensor<float>* offsets,
                                        float image_w, float image_h) {
  const std::size_t n = proposals.size();
  std::vector<BBox> boxes(proposals.begin(), proposals.end());
  if (offsets != nullptr) {
    if (offsets->shape() != Shape{n, 4}) throw ShapeError("infer_detections: offsets shape");
    for (std::size_t r = 0; r < n; ++r) {
      BBox b = decode_offsets(proposals[r], {offsets->at(r, 0), offsets->at(r, 1),
                                             offsets->at(r, 2), offsets->at(r, 3)});
      if (image_w > 0 && image_h > 0) b = b.clipped(image_w, image_h);
      boxes[r] = b.valid() ? b : proposals[r];
    }
  }
  std::vector<Detection> out;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<Detection> cls;
    for (std::size_t r = 0; r < n; ++r) {
      float s = 0;
      for (const auto& x : branch_scores) {
        if (x.rank() != 2 || x.dim(1) != n) throw ShapeError("infer_detections: score shape");
        s += x.at(static_cast<std::size_t>(c), r);
      }
      cls.push_back({boxes[r], c, s, 0});
    }
    auto kept = nms(std::move(cls), nms_thr);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

#define CASD_INSTANTIATE_MIL(T)                                                            \
  template class MilHead<T>;                                                               \
  template Var<T> wsddn_scores(const Var<T>&, const Var<T>&);                              \
  template Var<T> image_scores(const Var<T>&);                                             \
  template Var<T> mlc_loss(const Var<T>&, std::span<const float>, T);                      \
  template PseudoLabels mine_pseudo_labels(const Tensor<T>&, std::span<const float>,       \
                                           std::span<const BBox>);                         \
  template Var<T> refinement_loss(const Var<T>&, const PseudoLabels&);                     \
  template Tensor<T> regression_targets(std::span<const BBox>, const PseudoLabels&);       \
  template Var<T> regression_loss(const Var<T>&, const Tensor<T>&, const PseudoLabels&);   \
  template Tensor<T> aggregate_scores_psa(std::span<const Tensor<T>>);

CASD_INSTANTIATE_MIL(float)
CASD_INSTANTIATE_MIL(double)

#undef CASD_INSTANTIATE_MIL

}  // namespace casd
