#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "casd/detect_eval.hpp"
#include "casd/vision.hpp"

namespace casd {

enum class ShapeClass : int { Circle = 0, Square = 1, Triangle = 2 };

struct DatasetParams {
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  int num_classes = 3;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t min_side = 14;
  std::size_t max_side = 36;
  float max_instance_iou = 0.3f;
};

/// Everything the generator knows about one image.
struct SampleRecord {
  Image image;
  std::vector<float> labels;  // y_c in {0, 1}
  std::vector<BBox> proposals;
  std::vector<GroundTruth> gt;  // evaluation only
};

/// Training view of a sample. Carries no ground-truth boxes.
struct TrainSample {
  Image image;
  std::vector<float> labels;
  std::vector<BBox> proposals;
};

struct DatasetManifest {
  std::string split;
  std::size_t count = 0;
  int num_classes = 0;
  std::uint64_t seed = 0;
  std::size_t image_size = 0;
  std::vector<std::string> images;
};

// Sliding square windows of sizes {12, 20, 32, 48} with stride half the size,
// fully inside the image. Count per size is (floor((side - s) / (s / 2)) + 1)^2.
std::vector<BBox> grid_proposals(std::size_t height, std::size_t width);

/// Grid windows plus 10 jittered random boxes, clipped and de-duplicated.
/// Depends only on the image size and seed, never on image content.
std::vector<BBox> generate_proposals(std::size_t height, std::size_t width, std::uint64_t seed);

// Derived per-image seed; `split_tag` keeps train and test streams disjoint.
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t split_tag, std::size_t index);

SampleRecord generate_sample(const DatasetParams& params, std::uint64_t split_tag,
                             std::size_t index);

/// Writes `dir/manifest.json`, `images/NNNNN.tnsr`, `labels.tnsr`,
/// `gt/NNNNN.json` and `proposals/NNNNN.tnsr`.
DatasetManifest generate_dataset(const std::filesystem::path& dir, const std::string& split,
                                 std::size_t n_images, const DatasetParams& params);

void save_sample(const std::filesystem::path& dir, std::size_t index, const SampleRecord& s);

/// Read-only access to a generated split.
class Dataset {
 public:
  explicit Dataset(std::filesystem::path dir);

  const DatasetManifest& manifest() const noexcept { return manifest_; }
  std::size_t size() const noexcept { return manifest_.count; }
  int num_classes() const noexcept { return manifest_.num_classes; }

  SampleRecord load_sample(std::size_t index) const;
  TrainSample load_train(std::size_t index) const;

 private:
  void check_index(std::size_t index) const;

  std::filesystem::path dir_;
  DatasetManifest manifest_;
  Tensor<float> labels_;
};

// Fraction of GT boxes with at least one proposal at IoU >= 0.5.
double proposal_coverage(const std::vector<SampleRecord>& samples, float thr = 0.5f);

std::string index_name(std::size_t index);

}  // namespace casd
