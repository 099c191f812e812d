#include "casd/vision.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace casd {

BBox BBox::clipped(float w, float h) const {
  return {std::clamp(x1, 0.0f, w), std::clamp(y1, 0.0f, h), std::clamp(x2, 0.0f, w),
          std::clamp(y2, 0.0f, h)};
}

template <typename T>
Tensor<T> flip_image(const Tensor<T>& pixels) {
  return flip_map(pixels);
}

Image flip_image(const Image& image) { return {flip_image(image.pixels), image.id}; }

BBox flip_box(const BBox& b, float image_width) {
  return {image_width - b.x2, b.y1, image_width - b.x1, b.y2};
}

template <typename T>
Tensor<T> flip_map(const Tensor<T>& map) {
  if (map.rank() == 0) throw ShapeError("flip_map on rank-0 tensor");
  const std::size_t w = map.shape().back();
  const std::size_t rows = w ? map.numel() / w : 0;
  Tensor<T> out(map.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = map[r * w + (w - 1 - c)];
  }
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& src, std::size_t out_h, std::size_t out_w) {
  if (src.rank() != 3) throw ShapeError("resize_bilinear expects [C,H,W]");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear to empty size");
  const std::size_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor<float> out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  auto source = [](std::size_t dst, double ratio, std::size_t extent, std::size_t& i0,
                   std::size_t& i1, double& frac) {
    double p = (static_cast<double>(dst) + 0.5) * ratio - 0.5;
    p = std::clamp(p, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<std::size_t>(std::floor(p));
    i1 = std::min(i0 + 1, extent - 1);
    frac = p - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    source(y, sy, h, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      source(x, sx, w, x0, x1, fx);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = (1 - fx) * src.at(ch, y0, x0) + fx * src.at(ch, y0, x1);
        const double bot = (1 - fx) * src.at(ch, y1, x0) + fx * src.at(ch, y1, x1);
        out.at(ch, y, x) = static_cast<float>((1 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

Image scale_image(const Image& image, double s) {
  if (!(s > 0)) throw ShapeError("scale factor must be positive");
  const auto oh = static_cast<std::size_t>(std::lround(s * static_cast<double>(image.height())));
  const auto ow = static_cast<std::size_t>(std::lround(s * static_cast<double>(image.width())));
  if (oh < Image::kMinSide || ow < Image::kMinSide) {
    throw ShapeError("scaled image " + std::to_string(oh) + "x" + std::to_string(ow) +
                     " is below the minimum side");
  }
  if (oh == image.height() && ow == image.width()) return image;
  Image out{resize_bilinear(image.pixels, oh, ow), image.id};
  for (auto& v : out.pixels.data()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

BBox scale_box(const BBox& b, double s) {
  const auto f = [s](float v) { return static_cast<float>(static_cast<double>(v) * s); };
  return {f(b.x1), f(b.y1), f(b.x2), f(b.y2)};
}

BinRange roi_bin(float lo, float hi, std::size_t bin, std::size_t bins, std::size_t extent) {
  // Snap edges that land within rounding noise of a cell boundary.
  auto snap = [](double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-6 ? r : v;
  };
  const double span = static_cast<double>(hi) - static_cast<double>(lo);
  const double a = snap(lo + span * static_cast<double>(bin) / static_cast<double>(bins));
  const double b = snap(lo + span * static_cast<double>(bin + 1) / static_cast<double>(bins));
  const long last = static_cast<long>(extent) - 1;
  const long begin = std::clamp(static_cast<long>(std::floor(a)), 0L, last);
  const long end = std::clamp(static_cast<long>(std::ceil(b)), begin + 1, static_cast<long>(extent));
  return {static_cast<std::size_t>(begin), static_cast<std::size_t>(end)};
}

template <typename T>
Var<T> roi_pool(const Var<T>& features, std::span<const BBox> boxes, float stride,
                std::size_t out_size) {
  const auto& f = features.value();
  if (f.rank() != 3) throw ShapeError("roi_pool expects [L,H,W], got " + shape_str(f.shape()));
  if (out_size == 0) throw ShapeError("roi_pool output size must be positive");
  if (!(stride > 0)) throw ShapeError("roi_pool stride must be positive");
  const std::size_t l = f.dim(0), h = f.dim(1), w = f.dim(2);
  const std::size_t n = boxes.size();
  const std::size_t r = out_size;
  Tensor<T> out({n, l, r, r});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  std::vector<BinRange> ys(r), xs(r);
  for (std::size_t p = 0; p < n; ++p) {
    const BBox& b = boxes[p];
    for (std::size_t i = 0; i < r; ++i) {
      ys[i] = roi_bin(b.y1 / stride, b.y2 / stride, i, r, h);
      xs[i] = roi_bin(b.x1 / stride, b.x2 / stride, i, r, w);
    }
    for (std::size_t c = 0; c < l; ++c) {
      const T* plane = f.ptr() + c * h * w;
      for (std::size_t by = 0; by < r; ++by) {
        for (std::size_t bx = 0; bx < r; ++bx) {
          std::size_t best = ys[by].begin * w + xs[bx].begin;
          for (std::size_t y = ys[by].begin; y < ys[by].end; ++y) {
            for (std::size_t x = xs[bx].begin; x < xs[bx].end; ++x) {
              if (plane[y * w + x] > plane[best]) best = y * w + x;
            }
          }
          const std::size_t o = ((p * l + c) * r + by) * r + bx;
          out[o] = plane[best];
          (*argmax)[o] = static_cast<std::uint32_t>(c * h * w + best);
        }
      }
    }
  }
  const std::size_t id = features.id();
  return features.graph().record(OpKind::RoiPool, {id}, std::move(out),
                                 [id, argmax](Graph<T>& g, const Tensor<T>& go) {
                                   auto& gf = g.grad_buffer(id);
                                   for (std::size_t o = 0; o < go.numel(); ++o) {
                                     gf[(*argmax)[o]] += go[o];
                                   }
                                 });
}

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Var<T> linear(Graph<T>& g, const Var<T>& x, Parameter<T>& w, Parameter<T>& b) {
  return add(matmul(x, g.param(w)), g.param(b));
}

template <typename T>
Backbone<T>::Backbone(std::size_t in_channels, std::vector<std::size_t> widths,
                      std::mt19937_64& rng)
    : widths_(std::move(widths)) {
  weights_.reserve(widths_.size());
  biases_.reserve(widths_.size());
  std::size_t cin = in_channels;
  for (std::size_t q = 0; q < widths_.size(); ++q) {
    const std::size_t cout = widths_[q];
    const std::string tag = "backbone.b" + std::to_string(q + 1);
    weights_.emplace_back(tag + ".w", he_normal<T>({cout, cin, 3, 3}, cin * 9, rng));
    biases_.emplace_back(tag + ".b", Tensor<T>({cout}));
    cin = cout;
  }
}

template <typename T>
std::vector<Var<T>> Backbone<T>::forward(Graph<T>& g, const Var<T>& image) {
  std::vector<Var<T>> blocks;
  Var<T> x = image;
  for (std::size_t q = 0; q < widths_.size(); ++q) {
    x = maxpool2d(relu(conv2d(x, g.param(weights_[q]), g.param(biases_[q]), 1, 1)));
    blocks.push_back(x);
  }
  return blocks;
}

template <typename T>
std::vector<Parameter<T>*> Backbone<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (std::size_t q = 0; q < widths_.size(); ++q) {
    out.push_back(&weights_[q]);
    out.push_back(&biases_[q]);
  }
  return out;
}

template <typename T>
ProposalHead<T>::ProposalHead(std::size_t in_features, std::size_t hidden, std::mt19937_64& rng)
    : fc1_w_("head.fc1.w", he_normal<T>({in_features, hidden}, in_features, rng)),
      fc1_b_("head.fc1.b", Tensor<T>({hidden})),
      fc2_w_("head.fc2.w", he_normal<T>({hidden, hidden}, hidden, rng)),
      fc2_b_("head.fc2.b", Tensor<T>({hidden})) {}

template <typename T>
Var<T> ProposalHead<T>::forward(Graph<T>& g, const Var<T>& pooled) {
  const auto& s = pooled.shape();
  const std::size_t n = s[0];
  const std::size_t d = n ? pooled.value().numel() / n : 0;
  auto flat = reshape(pooled, {n, d});
  auto h = relu(linear(g, flat, fc1_w_, fc1_b_));
  return relu(linear(g, h, fc2_w_, fc2_b_));
}

template <typename T>
std::vector<Parameter<T>*> ProposalHead<T>::parameters() {
  return {&fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_};
}

template Tensor<float> flip_image(const Tensor<float>&);
template Tensor<double> flip_image(const Tensor<double>&);
template Tensor<float> flip_map(const Tensor<float>&);
template Tensor<double> flip_map(const Tensor<double>&);
template Var<float> roi_pool(const Var<float>&, std::span<const BBox>, float, std::size_t);
template Var<double> roi_pool(const Var<double>&, std::span<const BBox>, float, std::size_t);
template Tensor<float> he_normal(Shape, std::size_t, std::mt19937_64&);
template Tensor<double> he_normal(Shape, std::size_t, std::mt19937_64&);
template Var<float> linear(Graph<float>&, const Var<float>&, Parameter<float>&, Parameter<float>&);
template Var<double> linear(Graph<double>&, const Var<double>&, Parameter<double>&,
                            Parameter<double>&);
template class Backbone<float>;
template class Backbone<double>;
template class ProposalHead<float>;
template class ProposalHead<double>;

}  // namespace casd
