#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "casd/autodiff.hpp"
#include "casd/mil_head.hpp"
#include "casd/vision.hpp"

namespace casd {

/// Proposal attention: sigmoid of the channel mean of pooled features.
/// [L x H x W] -> [H x W], or batched [N x L x H x W] -> [N x H x W].
template <typename T>
Var<T> proposal_attention(const Var<T>& pooled);

/// Elementwise max over already-aligned maps, detached from the graph.
/// Comprehensive attention is a target only; no gradient flows into it.
template <typename T>
Var<T> comprehensive_max(std::span<const Var<T>> aligned);

/// Input-wise comprehensive attention. `a_flip` is the map computed on the
/// flipped image and is mirrored back before aggregation.
template <typename T>
Var<T> comprehensive_iw(const Var<T>& a, const Var<T>& a_flip, const Var<T>& a_scale);

/// (1/N_K) sum over selected proposals of sum over views of the mean-squared
/// distance between the target and each view. `selection[r]` is 1 for the
/// N_K mined proposals and 0 otherwise. Maps may be [H x W] (one proposal)
/// or [N x H x W].
template <typename T>
Var<T> distillation_loss(std::span<const Var<T>> aligned, const Var<T>& target,
                         std::span<const float> selection);

template <typename T>
Var<T> iw_casd_loss(const Var<T>& a, const Var<T>& a_flip, const Var<T>& a_scale,
                    const Var<T>& a_iw, std::span<const float> selection);

/// RoI-pools each configured block (1-based indices into `blocks`, block q
/// has stride 2^q) to `out_size` and computes its attention.
template <typename T>
std::vector<Var<T>> layer_attentions(std::span<const Var<T>> blocks,
                                     std::span<const std::size_t> use_blocks,
                                     std::span<const BBox> boxes, std::size_t out_size);

template <typename T>
Var<T> comprehensive_lw(std::span<const Var<T>> maps);

template <typename T>
Var<T> lw_casd_loss(std::span<const Var<T>> maps, const Var<T>& a_lw,
                    std::span<const float> selection);

// 1 for every proposal with nonzero pseudo-label weight.
std::vector<float> selection_mask(const PseudoLabels& labels);

/// Inverted attention. With probability `prob` per proposal, zeroes all
/// channels of the M - floor(quantile * M) highest-attention cells of the
/// pooled features (M = H * W). pooled: [N x L x H x W], attention: [N x H x W].
template <typename T>
Var<T> inverted_attention_mask(const Var<T>& pooled, const Tensor<T>& attention, double quantile,
                               double prob, std::mt19937_64& rng);

// Cell mask [H x W] (1 keep, 0 drop) for one attention map.
template <typename T>
std::vector<T> top_attention_mask(std::span<const T> attention, double quantile);

struct LossWeights {
  double alpha = 0.1;
  double beta = 0.05;
  double gamma = 0.1;
};

/// Per-branch loss components for one training step.
template <typename T>
struct LossTerms {
  Var<T> mlc;
  std::vector<Var<T>> ref;  // K entries each; unused terms hold scalar zeros
  std::vector<Var<T>> reg;
  std::vector<Var<T>> iw;
  std::vector<Var<T>> lw;
  std::vector<Var<T>> baseline;  // optional Table-3 style regulariser, weighted by gamma
};

// L_mlc + sum_k (alpha L_ref + beta L_reg + gamma L_IW + gamma L_LW + gamma L_base).
template <typename T>
Var<T> total_loss(const LossTerms<T>& terms, const LossWeights& w);

/// Jensen-Shannon divergence between column distributions of two [C x N]
/// matrices, averaged over the selected columns.
template <typename T>
Var<T> js_divergence(const Var<T>& p, const Var<T>& q, std::span<const float> selection);

/// Prediction consistency: mean pairwise JS divergence over the three views.
template <typename T>
Var<T> baseline_prediction_consistency(const Var<T>& x, const Var<T>& x_flip,
                                       const Var<T>& x_scale, std::span<const float> selection);

/// Attention consistency: mean pairwise MSE between aligned maps, averaged
/// over pairs and selected proposals.
template <typename T>
Var<T> attention_consistency(std::span<const Var<T>> aligned, std::span<const float> selection);
template <typename T>
Var<T> baseline_attention_consistency(const Var<T>& a, const Var<T>& a_flip,
                                      const Var<T>& a_scale, std::span<const float> selection);

}  // namespace casd
