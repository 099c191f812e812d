#include "casd/detect_eval.hpp"

#include <algorithm>
#include "json.hpp"
#include <numeric>

namespace casd {

float iou(const BBox& a, const BBox& b) {
  const float iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const float ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0f;
  const float inter = iw * ih;
  const float uni = a.area() + b.area() - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0f, 1.0f) : 0.0f;
}

namespace {

void sort_by_score(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
}

}  // namespace

std::vector<Detection> nms(std::vector<Detection> dets, float thr) {
  sort_by_score(dets);
  std::vector<Detection> kept;
  std::vector<bool> suppressed(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (suppressed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (!suppressed[j] && iou(dets[i].box, dets[j].box) > thr) suppressed[j] = true;
    }
  }
  return kept;
}

std::optional<double> average_precision(std::span<const Detection> dets,
                                        const std::vector<std::vector<BBox>>& gts,
                                        float iou_thr) {
  std::size_t npos = 0;
  for (const auto& g : gts) npos += g.size();
  if (npos == 0) return std::nullopt;

  std::vector<Detection> ranked(dets.begin(), dets.end());
  sort_by_score(ranked);
  std::vector<std::vector<bool>> matched(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) matched[i].assign(gts[i].size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& d : ranked) {
    bool hit = false;
    if (d.image < gts.size()) {
      const auto& cand = gts[d.image];
      float best = iou_thr;
      std::size_t best_j = cand.size();
      for (std::size_t j = 0; j < cand.size(); ++j) {
        if (matched[d.image][j]) continue;
        const float o = iou(d.box, cand[j]);
        if (o > best) {  // strict: ties keep the lower GT index
          best = o;
          best_j = j;
        }
      }
      if (best_j < cand.size()) {
        matched[d.image][best_j] = true;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
  }

  // Precision envelope, then area under the stepwise curve.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<GroundTruth>>& gts, int num_classes,
                    float iou_thr) {
  EvalReport report;
  const std::size_t n_images = gts.size();
  double ap_sum = 0, corloc_sum = 0;
  int ap_count = 0, corloc_count = 0;
  for (const auto& d : detections) report.num_detections += d.size();
  for (const auto& g : gts) report.num_gt += g.size();

  for (int c = 0; c < num_classes; ++c) {
    std::vector<Detection> class_dets;
    std::vector<std::vector<BBox>> class_gts(n_images);
    for (std::size_t i = 0; i < n_images; ++i) {
      for (const auto& g : gts[i]) {
        if (g.cls == c) class_gts[i].push_back(g.box);
      }
      if (i < detections.size()) {
        for (auto d : detections[i]) {
          if (d.cls != c) continue;
          d.image = i;
          class_dets.push_back(d);
        }
      }
    }
    const auto ap = average_precision(class_dets, class_gts, iou_thr);
    report.per_class.push_back(ap);
    if (ap) {
      ap_sum += *ap;
      ++ap_count;
    }

    std::size_t positives = 0, hits = 0;
    for (std::size_t i = 0; i < n_images; ++i) {
      if (class_gts[i].empty()) continue;
      ++positives;
      const Detection* top = nullptr;
      for (const auto& d : class_dets) {
        if (d.image == i && (top == nullptr || d.score > top->score)) top = &d;
      }
      if (top == nullptr) continue;
      const bool hit = std::any_of(class_gts[i].begin(), class_gts[i].end(),
                                   [&](const BBox& g) { return iou(top->box, g) > iou_thr; });
      hits += hit ? 1 : 0;
    }
    if (positives > 0) {
      corloc_sum += static_cast<double>(hits) / static_cast<double>(positives);
      ++corloc_count;
    }
  }
  report.map50 = ap_count ? ap_sum / ap_count : 0.0;
  report.corloc = corloc_count ? corloc_sum / corloc_count : 0.0;
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["map50"] = map50;
  j["corloc"] = corloc;
  auto pc = nlohmann::json::array();
  for (const auto& ap : per_class) pc.push_back(ap ? nlohmann::json(*ap) : nlohmann::json());
  j["per_class"] = pc;
  j["num_gt"] = num_gt;
  j["num_detections"] = num_detections;
  return j.dump();
}

}  // namespace casd
