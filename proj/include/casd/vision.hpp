#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "casd/autodiff.hpp"
#include "casd/tensor.hpp"

namespace casd {

/// Axis-aligned box in continuous pixel coordinates.
struct BBox {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const noexcept { return x2 - x1; }
  float height() const noexcept { return y2 - y1; }
  float area() const noexcept { return width() * height(); }
  bool valid() const noexcept { return x1 < x2 && y1 < y2; }
  BBox clipped(float w, float h) const;

  bool operator==(const BBox&) const = default;
};

/// RGB image, pixels [3 x h x w] in [0, 1].
struct Image {
  static constexpr std::size_t kMinSide = 16;

  Tensor<float> pixels;
  std::string id;

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

// Horizontal mirror.
template <typename T>
Tensor<T> flip_image(const Tensor<T>& pixels);
Image flip_image(const Image& image);
BBox flip_box(const BBox& b, float image_width);
// Reverses the W axis of a map (or batch of maps); differentiable form for the graph.
template <typename T>
Tensor<T> flip_map(const Tensor<T>& map);
template <typename T>
Var<T> flip_map(const Var<T>& map) {
  return flip_w(map);
}

// Half-pixel-centred bilinear resampling of a [C x H x W] tensor.
Tensor<float> resize_bilinear(const Tensor<float>& src, std::size_t out_h, std::size_t out_w);
// Throws ShapeError if either output side would fall below Image::kMinSide.
Image scale_image(const Image& image, double s);
BBox scale_box(const BBox& b, double s);

/// Max RoI pooling. features: [L x H' x W'] at `stride` pixels per cell.
/// Returns [N x L x out x out]. Bins use floor/ceil edges and are clamped
/// to cover at least one cell, so degenerate boxes never fail.
template <typename T>
Var<T> roi_pool(const Var<T>& features, std::span<const BBox> boxes, float stride,
                std::size_t out_size);

// Half-open cell range [begin, end) of pooling bin `bin` along one axis.
struct BinRange {
  std::size_t begin;
  std::size_t end;
};
BinRange roi_bin(float lo, float hi, std::size_t bin, std::size_t bins, std::size_t extent);

/// Q blocks of conv3x3(pad 1) + relu + maxpool2x2.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(std::size_t in_channels, std::vector<std::size_t> widths, std::mt19937_64& rng);

  // F^{B_1} .. F^{B_Q}; block q has stride 2^q.
  std::vector<Var<T>> forward(Graph<T>& g, const Var<T>& image);

  std::size_t num_blocks() const noexcept { return widths_.size(); }
  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  std::vector<Parameter<T>*> parameters();

 private:
  std::vector<std::size_t> widths_;
  std::vector<Parameter<T>> weights_;
  std::vector<Parameter<T>> biases_;
};

/// Flatten -> FC + relu -> FC + relu.
template <typename T>
class ProposalHead {
 public:
  ProposalHead() = default;
  ProposalHead(std::size_t in_features, std::size_t hidden, std::mt19937_64& rng);

  Var<T> forward(Graph<T>& g, const Var<T>& pooled);

  std::size_t out_features() const { return fc2_w_.value.dim(1); }
  std::vector<Parameter<T>*> parameters();

 private:
  Parameter<T> fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

// He fan-in normal initialisation.
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

// FC layer: x[N x in] * w[in x out] + b[out].
template <typename T>
Var<T> linear(Graph<T>& g, const Var<T>& x, Parameter<T>& w, Parameter<T>& b);

}  // namespace casd
