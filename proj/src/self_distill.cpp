#include "casd/self_distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace casd {

namespace {

// Views rank-2 maps as a batch of one.
template <typename T>
Var<T> as_batch(const Var<T>& map) {
  const auto& s = map.shape();
  if (s.size() == 2) return reshape(map, {1, s[0], s[1]});
  if (s.size() != 3) throw ShapeError("attention maps must be [H,W] or [N,H,W], got " + shape_str(s));
  return map;
}

// Mean over H x W of the squared difference, per proposal: [N x H x W] -> [N].
template <typename T>
Var<T> per_proposal_mse(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("attention map shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const auto& s = a.shape();
  const std::size_t cells = s[1] * s[2];
  auto d = sub(a, b);
  auto sq = reshape(mul(d, d), {s[0], cells});
  return scale(sum_axis(sq, 1), T(1) / static_cast<T>(cells));
}

std::size_t count_selected(std::span<const float> selection) {
  return static_cast<std::size_t>(
      std::count_if(selection.begin(), selection.end(), [](float v) { return v > 0; }));
}

template <typename T>
Var<T> masked_mean(const Var<T>& per_proposal, std::span<const float> selection) {
  auto& g = per_proposal.graph();
  const std::size_t n = per_proposal.value().numel();
  if (selection.size() != n) {
    throw ShapeError("selection has " + std::to_string(selection.size()) + " entries for " +
                     std::to_string(n) + " proposals");
  }
  const std::size_t n_k = count_selected(selection);
  if (n_k == 0) return g.input(Tensor<T>::scalar(T(0)));
  Tensor<T> mask({n});
  for (std::size_t r = 0; r < n; ++r) mask[r] = selection[r] > 0 ? T(1) : T(0);
  return scale(sum(mul(per_proposal, g.input(std::move(mask)))), T(1) / static_cast<T>(n_k));
}

template <typename T>
Var<T> zero_scalar(Graph<T>& g) {
  return g.input(Tensor<T>::scalar(T(0)));
}

}  // namespace

template <typename T>
Var<T> proposal_attention(const Var<T>& pooled) {
  return sigmoid(channel_mean(pooled));
}

template <typename T>
Var<T> comprehensive_max(std::span<const Var<T>> aligned) {
  return detach(elementwise_max(aligned));
}

template <typename T>
Var<T> comprehensive_iw(const Var<T>& a, const Var<T>& a_flip, const Var<T>& a_scale) {
  const Var<T> views[] = {a, flip_map(a_flip), a_scale};
  return comprehensive_max<T>(views);
}

template <typename T>
Var<T> distillation_loss(std::span<const Var<T>> aligned, const Var<T>& target,
                         std::span<const float> selection) {
  if (aligned.empty()) throw ShapeError("distillation_loss needs at least one map");
  const auto tgt = as_batch(target);
  Var<T> acc;
  for (const auto& view : aligned) {
    auto d = per_proposal_mse(tgt, as_batch(view));
    acc = acc.valid() ? add(acc, d) : d;
  }
  return masked_mean(acc, selection);
}

template <typename T>
Var<T> iw_casd_loss(const Var<T>& a, const Var<T>& a_flip, const Var<T>& a_scale,
                    const Var<T>& a_iw, std::span<const float> selection) {
  const Var<T> views[] = {a, flip_map(a_flip), a_scale};
  return distillation_loss<T>(views, a_iw, selection);
}

template <typename T>
std::vector<Var<T>> layer_attentions(std::span<const Var<T>> blocks,
                                     std::span<const std::size_t> use_blocks,
                                     std::span<const BBox> boxes, std::size_t out_size) {
  std::vector<Var<T>> maps;
  for (auto q : use_blocks) {
    if (q == 0 || q > blocks.size()) {
      throw ContractError("layer block index " + std::to_string(q) + " out of range");
    }
    const float stride = static_cast<float>(std::size_t{1} << q);
    maps.push_back(proposal_attention(roi_pool(blocks[q - 1], boxes, stride, out_size)));
  }
  return maps;
}

template <typename T>
Var<T> comprehensive_lw(std::span<const Var<T>> maps) {
  if (maps.size() < 2) throw ContractError("layer-wise aggregation needs at least two maps");
  return comprehensive_max(maps);
}

template <typename T>
Var<T> lw_casd_loss(std::span<const Var<T>> maps, const Var<T>& a_lw,
                    std::span<const float> selection) {
  return distillation_loss(maps, a_lw, selection);
}

std::vector<float> selection_mask(const PseudoLabels& labels) {
  std::vector<float> sel(labels.weight.size());
  for (std::size_t r = 0; r < sel.size(); ++r) sel[r] = labels.weight[r] > 0 ? 1.0f : 0.0f;
  return sel;
}

template <typename T>
std::vector<T> top_attention_mask(std::span<const T> attention, double quantile) {
  const std::size_t m = attention.size();
  const auto keep = static_cast<std::size_t>(std::floor(quantile * static_cast<double>(m) + 1e-9));
  const std::size_t drop = m - std::min(keep, m);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return attention[i] > attention[j]; });
  std::vector<T> mask(m, T(1));
  for (std::size_t i = 0; i < drop; ++i) mask[order[i]] = T(0);
  return mask;
}

template <typename T>
Var<T> inverted_attention_mask(const Var<T>& pooled, const Tensor<T>& attention, double quantile,
                               double prob, std::mt19937_64& rng) {
  const auto& s = pooled.shape();
  if (s.size() != 4 || attention.shape() != Shape{s[0], s[2], s[3]}) {
    throw ShapeError("inverted_attention_mask: pooled " + shape_str(s) + " vs attention " +
                     shape_str(attention.shape()));
  }
  const std::size_t n = s[0], cells = s[2] * s[3];
  Tensor<T> mask({n, 1, s[2], s[3]}, T(1));
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  bool any = false;
  for (std::size_t r = 0; r < n; ++r) {
    // Draw for every proposal so the stream does not depend on prob.
    if (coin(rng) >= prob) continue;
    const auto cell_mask =
        top_attention_mask<T>(attention.data().subspan(r * cells, cells), quantile);
    std::copy(cell_mask.begin(), cell_mask.end(), mask.ptr() + r * cells);
    any = true;
  }
  if (!any) return pooled;
  return mul(pooled, pooled.graph().input(std::move(mask)));
}

template <typename T>
Var<T> total_loss(const LossTerms<T>& terms, const LossWeights& w) {
  Var<T> total = terms.mlc;
  auto accumulate = [&](const std::vector<Var<T>>& parts, double weight) {
    for (const auto& p : parts) {
      if (p.valid()) total = add(total, scale(p, static_cast<T>(weight)));
    }
  };
  accumulate(terms.ref, w.alpha);
  accumulate(terms.reg, w.beta);
  accumulate(terms.iw, w.gamma);
  accumulate(terms.lw, w.gamma);
  accumulate(terms.baseline, w.gamma);
  return total;
}

template <typename T>
Var<T> js_divergence(const Var<T>& p, const Var<T>& q, std::span<const float> selection) {
  if (p.shape() != q.shape() || p.shape().size() != 2) {
    throw ShapeError("js_divergence expects two [C x N] matrices");
  }
  constexpr T eps = T(kLogEps);
  // sum_c x log x per column, i.e. minus the entropy.
  auto neg_entropy = [&](const Var<T>& x) { return sum_axis(mul(x, log(clamp(x, eps, T(1)))), 0); };
  auto m = scale(add(p, q), T(0.5));
  auto js = sub(scale(add(neg_entropy(p), neg_entropy(q)), T(0.5)), neg_entropy(m));
  return masked_mean(js, selection);
}

template <typename T>
Var<T> baseline_prediction_consistency(const Var<T>& x, const Var<T>& x_flip,
                                       const Var<T>& x_scale, std::span<const float> selection) {
  auto a = js_divergence(x, x_flip, selection);
  auto b = js_divergence(x, x_scale, selection);
  auto c = js_divergence(x_flip, x_scale, selection);
  return scale(add(add(a, b), c), T(1) / T(3));
}

template <typename T>
Var<T> attention_consistency(std::span<const Var<T>> aligned, std::span<const float> selection) {
  if (aligned.size() < 2) throw ContractError("attention consistency needs at least two maps");
  Var<T> acc;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    for (std::size_t j = i + 1; j < aligned.size(); ++j) {
      auto d = per_proposal_mse(as_batch(aligned[i]), as_batch(aligned[j]));
      acc = acc.valid() ? add(acc, d) : d;
      ++pairs;
    }
  }
  return scale(masked_mean(acc, selection), T(1) / static_cast<T>(pairs));
}

template <typename T>
Var<T> baseline_attention_consistency(const Var<T>& a, const Var<T>& a_flip,
                                      const Var<T>& a_scale, std::span<const float> selection) {
  const Var<T> views[] = {a, flip_map(a_flip), a_scale};
  return attention_consistency<T>(views, selection);
}

#define CASD_INSTANTIATE_DISTILL(T)                                                          \
  template Var<T> proposal_attention(const Var<T>&);                                         \
  template Var<T> comprehensive_max(std::span<const Var<T>>);                                \
  template Var<T> comprehensive_iw(const Var<T>&, const Var<T>&, const Var<T>&);             \
  template Var<T> distillation_loss(std::span<const Var<T>>, const Var<T>&,                  \
                                    std::span<const float>);                                 \
  template Var<T> iw_casd_loss(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,   \
                               std::span<const float>);                                      \
  template std::vector<Var<T>> layer_attentions(std::span<const Var<T>>,                     \
                                                std::span<const std::size_t>,                \
                                                std::span<const BBox>, std::size_t);         \
  template Var<T> comprehensive_lw(std::span<const Var<T>>);                                 \
  template Var<T> lw_casd_loss(std::span<const Var<T>>, const Var<T>&,                       \
                               std::span<const float>);                                      \
  template std::vector<T> top_attention_mask(std::span<const T>, double);                    \
  template Var<T> inverted_attention_mask(const Var<T>&, const Tensor<T>&, double, double,   \
                                          std::mt19937_64&);                                 \
  template Var<T> total_loss(const LossTerms<T>&, const LossWeights&);                       \
  template Var<T> js_divergence(const Var<T>&, const Var<T>&, std::span<const float>);       \
  template Var<T> baseline_prediction_consistency(const Var<T>&, const Var<T>&,              \
                                                  const Var<T>&, std::span<const float>);    \
  template Var<T> attention_consistency(std::span<const Var<T>>, std::span<const float>);    \
  template Var<T> baseline_attention_consistency(const Var<T>&, const Var<T>&,               \
                                                 const Var<T>&, std::span<const float>);

CASD_INSTANTIATE_DISTILL(float)
CASD_INSTANTIATE_DISTILL(double)

#undef CASD_INSTANTIATE_DISTILL

}  // namespace casd
