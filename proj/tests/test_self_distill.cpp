#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "casd/self_distill.hpp"

using namespace casd;

namespace {

Tensor<double> uniform(Shape s, std::mt19937_64& rng) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Attention, ChannelMeanThenSigmoid) {
  std::mt19937_64 rng(1);
  const auto p = uniform({2, 3, 2, 2}, rng);
  Graph<double> g;
  const auto a = proposal_attention(g.input(p)).value();
  ASSERT_EQ(a.shape(), (Shape{2, 2, 2}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        const double m = (p.at(r, 0, y, x) + p.at(r, 1, y, x) + p.at(r, 2, y, x)) / 3.0;
        EXPECT_NEAR(a.at(r, y, x), sigmoid(m), 1e-12);
      }
}

TEST(Attention, ZeroFeaturesGiveHalf) {
  Graph<double> g;
  for (double v : proposal_attention(g.input(Tensor<double>({4, 3, 3}))).value().data()) {
    EXPECT_EQ(v, 0.5);
  }
}

TEST(Comprehensive, IwIsExactElementwiseMaxAndDetached) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = uniform({3, 4, 4}, rng), f = uniform({3, 4, 4}, rng), s = uniform({3, 4, 4}, rng);
    Graph<double> g;
    auto va = g.input(a, true), vf = g.input(f, true), vs = g.input(s, true);
    const auto iw = comprehensive_iw(va, vf, vs);
    EXPECT_FALSE(iw.requires_grad());
    const auto fa = flip_map(f);
    for (std::size_t i = 0; i < a.numel(); ++i) {
      ASSERT_EQ(iw.value()[i], std::max({a[i], fa[i], s[i]}));
    }
  }
}

TEST(Comprehensive, IdenticalMapsIdempotent) {
  std::mt19937_64 rng(3);
  const auto a = uniform({5, 5}, rng);
  Graph<double> g;
  auto v = g.input(a);
  EXPECT_EQ(comprehensive_iw(v, flip_map(v), v).value(), a);
}

TEST(Comprehensive, LwNeedsTwoMaps) {
  Graph<double> g;
  const Var<double> one[] = {g.input(Tensor<double>({2, 2}))};
  EXPECT_THROW(comprehensive_lw<double>(one), ContractError);
}

TEST(DistillLoss, ZeroIffEqual) {
  std::mt19937_64 rng(4);
  const auto a = uniform({2, 3, 3}, rng);
  const float sel[] = {1.0f, 1.0f};
  Graph<double> g;
  auto va = g.input(a);
  EXPECT_EQ(iw_casd_loss(va, flip_map(va), va, comprehensive_iw(va, flip_map(va), va), sel)
                .value()
                .item(),
            0.0);
  auto b = a;
  b[5] += 1e-3;
  auto vb = g.input(b);
  EXPECT_GT(iw_casd_loss(va, flip_map(va), vb, comprehensive_iw(va, flip_map(va), vb), sel)
                .value()
                .item(),
            0.0);
}

TEST(DistillLoss, CraftedTwoByTwoHandArithmetic) {
  // Target is the elementwise max of [[0.1,0.2],[0.3,0.4]] and [[0.5,0.1],[0.3,0.2]]:
  // [[0.5,0.2],[0.3,0.4]]. Mean squares: (0.16+0+0+0)/4 and (0+0.01+0+0.04)/4.
  Graph<double> g;
  auto m1 = g.input(Tensor<double>({2, 2}, std::vector<double>{0.1, 0.2, 0.3, 0.4}));
  auto m2 = g.input(Tensor<double>({2, 2}, std::vector<double>{0.5, 0.1, 0.3, 0.2}));
  const Var<double> maps[] = {m1, m2};
  const auto target = comprehensive_lw<double>(maps);
  EXPECT_EQ(target.value(), (Tensor<double>({2, 2}, std::vector<double>{0.5, 0.2, 0.3, 0.4})));
  const float sel[] = {1.0f};
  EXPECT_NEAR(lw_casd_loss<double>(maps, target, sel).value().item(), 0.04 + 0.0125, 1e-12);
}

TEST(DistillLoss, ConstantLayerMaps) {
  Graph<double> g;
  const Var<double> maps[] = {g.input(Tensor<double>({3, 3}, 0.3)),
                              g.input(Tensor<double>({3, 3}, 0.7))};
  const auto target = comprehensive_lw<double>(maps);
  for (double v : target.value().data()) EXPECT_EQ(v, 0.7);
  const float sel[] = {1.0f};
  EXPECT_NEAR(lw_casd_loss<double>(maps, target, sel).value().item(), 0.16, 1e-12);
}

TEST(DistillLoss, AveragesOverSelectedProposalsOnly) {
  Graph<double> g;
  Tensor<double> a({3, 1, 1}, std::vector<double>{0.2, 0.4, 0.9});
  Tensor<double> t({3, 1, 1}, std::vector<double>{0.6, 0.6, 0.6});
  const Var<double> views[] = {g.input(a)};
  const float sel[] = {1.0f, 1.0f, 0.0f};
  EXPECT_NEAR(distillation_loss<double>(views, g.input(t), sel).value().item(),
              (0.16 + 0.04) / 2.0, 1e-12);
}

TEST(DistillLoss, TargetReceivesNoGradient) {
  std::mt19937_64 rng(5);
  Graph<double> g;
  auto a = g.input(uniform({2, 2, 2}, rng), true);
  auto b = g.input(uniform({2, 2, 2}, rng), true);
  const Var<double> maps[] = {a, b};
  const auto target = comprehensive_lw<double>(maps);
  const float sel[] = {1.0f, 1.0f};
  g.backward(lw_casd_loss<double>(maps, target, sel));
  // d/da of mean((t - a)^2) with t constant: -2 (t - a) / cells / N.
  for (std::size_t i = 0; i < 8; ++i) {
    const double expected = -2.0 * (target.value()[i] - a.value()[i]) / 4.0 / 2.0;
    EXPECT_NEAR(a.grad()[i], expected, 1e-12);
  }
}

TEST(LayerAttention, SharedShapeAndManualPipeline) {
  std::mt19937_64 rng(6);
  Graph<double> g;
  const std::vector<Var<double>> blocks{g.input(uniform({2, 16, 16}, rng)),
                                        g.input(uniform({3, 8, 8}, rng)),
                                        g.input(uniform({4, 4, 4}, rng))};
  const std::vector<BBox> boxes{{0, 0, 32, 32}, {5, 7, 21, 30}};
  const std::size_t use[] = {1, 2, 3};
  const auto maps = layer_attentions<double>(blocks, use, boxes, 3);
  ASSERT_EQ(maps.size(), 3u);
  for (std::size_t q = 0; q < 3; ++q) {
    EXPECT_EQ(maps[q].shape(), (Shape{2, 3, 3}));
    const auto manual =
        proposal_attention(roi_pool<double>(blocks[q], boxes, static_cast<float>(2 << q), 3));
    EXPECT_EQ(maps[q].value(), manual.value());
  }
  const std::size_t bad[] = {4};
  EXPECT_THROW(layer_attentions<double>(blocks, bad, boxes, 3), ContractError);
}

TEST(LayerAttention, ConstantFeaturesGiveConstantMaps) {
  Graph<double> g;
  const std::vector<Var<double>> blocks{g.input(Tensor<double>({2, 8, 8}, 1.5)),
                                        g.input(Tensor<double>({2, 4, 4}, -0.5))};
  const std::vector<BBox> boxes{{2, 2, 14, 12}};
  const std::size_t use[] = {1, 2};
  const auto maps = layer_attentions<double>(blocks, use, boxes, 4);
  for (double v : maps[0].value().data()) EXPECT_NEAR(v, sigmoid(1.5), 1e-12);
  for (double v : maps[1].value().data()) EXPECT_NEAR(v, sigmoid(-0.5), 1e-12);
}

TEST(InvertedAttention, RampMaskMatchesQuantileOracle) {
  // 5x5 ramp, q = 0.8: keep floor(0.8 * 25) = 20 cells, drop the top 5.
  std::vector<double> ramp(25);
  for (std::size_t i = 0; i < 25; ++i) ramp[i] = static_cast<double>((i * 7) % 25);
  std::vector<double> sorted = ramp;
  std::sort(sorted.begin(), sorted.end());
  const double cut = sorted[20];
  const auto mask = top_attention_mask<double>(ramp, 0.8);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(mask[i], ramp[i] >= cut ? 0.0 : 1.0);

  Graph<double> g;
  Tensor<double> pooled({1, 2, 5, 5}, 1.0);
  Tensor<double> att({1, 5, 5}, ramp);
  std::mt19937_64 rng(7);
  const auto out = inverted_attention_mask(g.input(pooled), att, 0.8, 1.0, rng).value();
  std::size_t zeros = 0;
  for (double v : out.data()) zeros += v == 0.0 ? 1 : 0;
  EXPECT_EQ(zeros, 10u);  // 5 cells x 2 channels
}

TEST(InvertedAttention, ZeroProbabilityIsIdentity) {
  std::mt19937_64 rng(8);
  Graph<double> g;
  auto p = g.input(uniform({3, 2, 4, 4}, rng));
  const auto att = uniform({3, 4, 4}, rng);
  EXPECT_EQ(inverted_attention_mask(p, att, 0.8, 0.0, rng).id(), p.id());
}

TEST(Regularisers, JsDivergenceValues) {
  Graph<double> g;
  auto p = g.input(Tensor<double>({2, 2}, std::vector<double>{1, 0, 0, 1}));
  auto q = g.input(Tensor<double>({2, 2}, std::vector<double>{0, 1, 1, 0}));
  const float sel[] = {1.0f, 1.0f};
  EXPECT_NEAR(js_divergence(p, p, sel).value().item(), 0.0, 1e-12);
  EXPECT_NEAR(js_divergence(p, q, sel).value().item(), std::log(2.0), 1e-6);
}

TEST(Regularisers, AttentionConsistencyConstantMaps) {
  Graph<double> g;
  const Var<double> maps[] = {g.input(Tensor<double>({1, 3, 3}, 0.2)),
                              g.input(Tensor<double>({1, 3, 3}, 0.6))};
  const float sel[] = {1.0f};
  EXPECT_NEAR(attention_consistency<double>(maps, sel).value().item(), 0.16, 1e-9);
}

TEST(TotalLoss, WeightedCombination) {
  Graph<double> g;
  auto s = [&](double v) { return g.input(Tensor<double>::scalar(v)); };
  LossTerms<double> t;
  t.mlc = s(1.0);
  t.ref = {s(2.0), s(3.0)};
  t.reg = {s(4.0)};
  t.iw = {s(5.0), s(6.0)};
  t.lw = {s(7.0), s(8.0)};
  LossWeights w{0.1, 0.05, 0.2};
  EXPECT_NEAR(total_loss(t, w).value().item(), 1.0 + 0.1 * 5 + 0.05 * 4 + 0.2 * 26, 1e-12);
}
