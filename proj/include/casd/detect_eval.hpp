#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "casd/vision.hpp"

namespace casd {

struct Detection {
  BBox box;
  int cls = 0;
  float score = 0;
  std::size_t image = 0;
};

struct GroundTruth {
  BBox box;
  int cls = 0;
};

float iou(const BBox& a, const BBox& b);

/// Greedy NMS over detections of one class: keep the best remaining box,
/// drop everything with IoU > thr against it, repeat. Score ties keep input order.
std::vector<Detection> nms(std::vector<Detection> dets, float thr);

/// All-points interpolated AP for one class. `gts[i]` are the class's
/// ground-truth boxes in image i; detections reference images by index.
/// Returns nullopt when the class has no ground truth at all.
std::optional<double> average_precision(std::span<const Detection> dets,
                                        const std::vector<std::vector<BBox>>& gts,
                                        float iou_thr = 0.5f);

struct EvalReport {
  std::vector<std::optional<double>> per_class;  // nullopt: class has no GT
  double map50 = 0;
  double corloc = 0;
  std::size_t num_gt = 0;
  std::size_t num_detections = 0;

  std::string to_json() const;
};

/// mAP_0.5 over classes with ground truth, plus CorLoc: per class, the
/// fraction of images containing it whose top-scoring detection of that
/// class hits a GT at IoU > 0.5, averaged over classes.
EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<GroundTruth>>& gts, int num_classes,
                    float iou_thr = 0.5f);

}  // namespace casd
