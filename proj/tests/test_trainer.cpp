#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "casd/trainer.hpp"

using namespace casd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TrainConfig small_config() {
  TrainConfig c;
  c.widths = {4, 8};
  c.hidden = 8;
  c.roi_size = 3;
  c.lw_blocks = {1, 2};
  c.scales = {1.5};
  c.eval_scales = {1.5};
  c.max_iters = 12;
  c.decay_at_iter = {8};
  c.log_every = 2;
  return c;
}

// A tiny generated dataset shared by the tests in this file.
const fs::path& data_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "casd_trainer_data";
    fs::remove_all(d);
    DatasetParams p;
    p.seed = 3;
    generate_dataset(d / "train", "train", 6, p);
    generate_dataset(d / "test", "test", 3, p);
    return d;
  }();
  return dir;
}

struct GradRun {
  LossBreakdown breakdown;
  std::vector<Tensor<double>> grads;
};

std::vector<Tensor<double>> collect_grads(Detector<double>& m) {
  std::vector<Tensor<double>> out;
  for (auto* p : m.parameters()) out.push_back(p->grad);
  return out;
}

void zero_grads(Detector<double>& m) {
  for (auto* p : m.parameters()) p->grad = Tensor<double>(p->value.shape());
}

GradRun full_grads(Detector<double>& m, const StepViews& views, const TrainSample& s,
                   const TrainConfig& cfg, StopGradState<double>& frozen) {
  zero_grads(m);
  Graph<double> g;
  std::mt19937_64 rng(1);
  GradRun r;
  g.backward(build_loss<double>(g, m, views, s.labels, cfg, rng, r.breakdown, &frozen));
  r.grads = collect_grads(m);
  return r;
}

}  // namespace

TEST(Config, ParseCommentsAndRoundTrip) {
  const auto c = parse_config("# comment\nalpha = 0.2\n\n  enable_iw = false  # trailing\n"
                              "lw_blocks = 3,4\nbaseline_regularizer = attn_consistency\n");
  EXPECT_EQ(c.alpha, 0.2);
  EXPECT_FALSE(c.enable_iw);
  EXPECT_EQ(c.lw_blocks, (std::vector<std::size_t>{3, 4}));
  EXPECT_EQ(c.baseline_regularizer, BaselineRegularizer::AttnConsistency);
  const auto again = parse_config(c.to_text());
  EXPECT_EQ(again.to_text(), c.to_text());
  EXPECT_EQ(again.hash(), c.hash());
}

TEST(Config, DefaultsFollowTheImplementationDetails) {
  const TrainConfig c;
  EXPECT_EQ(c.alpha, 0.1);
  EXPECT_EQ(c.beta, 0.05);
  EXPECT_EQ(c.gamma, 0.1);
  EXPECT_EQ(c.num_refine, 2u);
  EXPECT_EQ(c.lr, 0.001);
  EXPECT_EQ(c.momentum, 0.9);
  EXPECT_EQ(c.weight_decay, 0.0005);
  EXPECT_FLOAT_EQ(c.nms_thr, 0.3f);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("alpah = 0.1\n"), ContractError);
  EXPECT_THROW(parse_config("alpha = abc\n"), ContractError);
  EXPECT_THROW(parse_config("enable_iw = maybe\n"), ContractError);
  EXPECT_THROW(parse_config("alpha 0.1\n"), ContractError);
  EXPECT_THROW(load_config("/nonexistent/casd.cfg"), FormatError);
  TrainConfig c;
  c.transforms = {"flip", "scale"};
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.alpha = -1;
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.num_refine = 0;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Config, HashIgnoresRunLength) {
  TrainConfig a, b;
  b.max_iters = 17;
  b.log_every = 3;
  EXPECT_EQ(a.hash(), b.hash());
  b.gamma = 0.2;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Schedule, StepDecay) {
  TrainConfig c;
  c.decay_at_iter = {2000, 2500};
  EXPECT_DOUBLE_EQ(lr_at(0, c), 0.001);
  EXPECT_DOUBLE_EQ(lr_at(1999, c), 0.001);
  EXPECT_DOUBLE_EQ(lr_at(2000, c), 0.0001);
  EXPECT_DOUBLE_EQ(lr_at(2600, c), 0.00001);
}

TEST(Loss, FiniteAtIterationZero) {
  const Dataset ds(data_dir() / "train");
  Detector<float> m(TrainConfig{}, 3);
  const auto b = train_step(m, ds.load_train(0), TrainConfig{}, 0);
  EXPECT_TRUE(std::isfinite(b.total));
  EXPECT_GT(b.mlc, 0.0);
  EXPECT_GT(b.iw + b.lw, 0.0);
}

TEST(Loss, DecompositionMatchesWeightedSum) {
  const Dataset ds(data_dir() / "train");
  for (auto reg : {BaselineRegularizer::None, BaselineRegularizer::PredConsistency}) {
    auto cfg = small_config();
    cfg.baseline_regularizer = reg;
    Detector<float> m(cfg, 3);
    for (std::size_t it = 0; it < 4; ++it) {
      const auto b = train_step(m, ds.load_train(it), cfg, it);
      const double expect = b.mlc + cfg.alpha * b.ref + cfg.beta * b.reg +
                            cfg.gamma * (b.iw + b.lw + b.base);
      EXPECT_NEAR(b.total, expect, 1e-6);
    }
  }
}

TEST(Loss, GammaZeroLeavesMilStack) {
  const Dataset ds(data_dir() / "train");
  auto cfg = small_config();
  cfg.gamma = 0;
  cfg.baseline_regularizer = BaselineRegularizer::AttnConsistency;
  Detector<float> m(cfg, 3);
  const auto b = train_step(m, ds.load_train(1), cfg, 0);
  EXPECT_EQ(b.iw, 0.0);
  EXPECT_EQ(b.lw, 0.0);
  EXPECT_EQ(b.base, 0.0);
  EXPECT_NEAR(b.total, b.mlc + cfg.alpha * b.ref + cfg.beta * b.reg, 1e-6);
}

TEST(Loss, DisabledTermsRemoveExactlyTheirGradient) {
  const Dataset ds(data_dir() / "train");
  const auto sample = ds.load_train(2);
  auto cfg = small_config();
  cfg.enable_ia = false;
  std::mt19937_64 vrng(5);
  const auto views = make_views(sample, cfg, vrng);

  for (const bool drop_iw : {true, false}) {
    Detector<double> m(cfg, 3);
    StopGradState<double> frozen;
    const auto full = full_grads(m, views, sample, cfg, frozen);
    auto pruned_cfg = cfg;
    (drop_iw ? pruned_cfg.enable_iw : pruned_cfg.enable_lw) = false;
    const auto pruned = full_grads(m, views, sample, pruned_cfg, frozen);
    EXPECT_EQ(drop_iw ? pruned.breakdown.iw : pruned.breakdown.lw, 0.0);

    // Hand-built graph holding only gamma * sum_k L_term.
    zero_grads(m);
    Graph<double> g;
    std::vector<ViewOutputs<double>> outs;
    for (std::size_t v = 0; v < views.pixels.size(); ++v) {
      outs.push_back(m.forward(g, views.pixels[v].cast<double>(), views.boxes[v]));
    }
    std::vector<Var<double>> maps;
    if (drop_iw) {
      for (std::size_t v = 0; v < outs.size(); ++v) {
        auto a = proposal_attention(outs[v].pooled);
        maps.push_back(views.names[v] == "flip" ? flip_map(a) : a);
      }
    } else {
      maps = layer_attentions<double>(outs[0].blocks, cfg.lw_blocks, views.boxes[0], cfg.roi_size);
    }
    const auto target = drop_iw ? comprehensive_max<double>(maps) : comprehensive_lw<double>(maps);
    std::vector<Var<double>> terms;
    for (const auto& pl : frozen.mined) {
      const auto sel = selection_mask(pl);
      terms.push_back(drop_iw ? distillation_loss<double>(maps, target, sel)
                              : lw_casd_loss<double>(maps, target, sel));
    }
    g.backward(scale(add(terms[0], terms[1]), cfg.gamma));
    const auto hand = collect_grads(m);

    for (std::size_t p = 0; p < hand.size(); ++p) {
      for (std::size_t i = 0; i < hand[p].numel(); ++i) {
        ASSERT_NEAR(full.grads[p][i], pruned.grads[p][i] + hand[p][i], 1e-10)
            << (drop_iw ? "iw" : "lw") << " param " << p << " entry " << i;
      }
    }
  }
}

TEST(Ablation, Table1FlagMapping) {
  const auto rows = ablation_rows("table1", TrainConfig{});
  ASSERT_EQ(rows.size(), 7u);
  struct Flags {
    const char* name;
    bool iw, lw, ia, psa, reg;
  };
  const Flags expect[] = {{"Baseline", false, false, false, false, false},
                          {"+IW w/o IA+PSA", true, false, false, false, false},
                          {"+IW w/o IA", true, false, false, true, false},
                          {"+IW", true, false, true, true, false},
                          {"+LW", false, true, false, false, false},
                          {"+IW+LW", true, true, true, true, false},
                          {"+IW+LW+Reg", true, true, true, true, true}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& c = rows[i].config;
    EXPECT_EQ(rows[i].name, expect[i].name);
    EXPECT_EQ(c.enable_iw, expect[i].iw) << rows[i].name;
    EXPECT_EQ(c.enable_lw, expect[i].lw) << rows[i].name;
    EXPECT_EQ(c.enable_ia, expect[i].ia) << rows[i].name;
    EXPECT_EQ(c.enable_psa, expect[i].psa) << rows[i].name;
    EXPECT_EQ(c.enable_reg, expect[i].reg) << rows[i].name;
  }
}

TEST(Ablation, OtherSuites) {
  const auto gamma = ablation_rows("gamma", TrainConfig{});
  ASSERT_EQ(gamma.size(), 5u);
  const double values[] = {0.05, 0.075, 0.1, 0.15, 0.2};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(gamma[i].config.gamma, values[i]);

  const auto t2 = ablation_rows("table2", TrainConfig{});
  ASSERT_EQ(t2.size(), 3u);
  EXPECT_EQ(t2[0].name, "B4 + B3");
  EXPECT_EQ(t2[2].config.lw_blocks, (std::vector<std::size_t>{1, 2, 3, 4}));

  const auto t3 = ablation_rows("table3", TrainConfig{});
  ASSERT_EQ(t3.size(), 3u);
  EXPECT_EQ(t3[0].config.baseline_regularizer, BaselineRegularizer::PredConsistency);
  EXPECT_EQ(t3[1].config.baseline_regularizer, BaselineRegularizer::AttnConsistency);
  EXPECT_TRUE(t3[2].config.enable_iw);
  EXPECT_FALSE(t3[2].config.enable_ia);

  const auto dir = ablation_rows("directional", TrainConfig{});
  ASSERT_EQ(dir.size(), 4u);
  EXPECT_THROW(ablation_rows("table9", TrainConfig{}), ContractError);
}

TEST(Ablation, AllFlagsOffIsBaseline) {
  auto base = TrainConfig{};
  base.enable_iw = base.enable_lw = base.enable_ia = base.enable_psa = base.enable_reg = false;
  const auto rows = ablation_rows("table1", TrainConfig{});
  EXPECT_EQ(rows[0].config.to_text(), base.to_text());
}

TEST(Ablation, SuiteProducesTable) {
  auto base = small_config();
  base.max_iters = 2;
  std::vector<AblationRow> rows{{"Baseline", ablation_rows("directional", base)[0].config},
                                {"+IW+LW", ablation_rows("directional", base)[3].config}};
  const std::uint64_t seeds[] = {0, 1, 2};
  const auto out = fs::temp_directory_path() / "casd_ablation_test";
  fs::remove_all(out);
  const auto results = run_ablation_suite(rows, seeds, data_dir(), out);
  ASSERT_EQ(results.size(), 2u);
  EXPECT_EQ(results[0].map50.size(), 3u);
  const auto json = ablation_table_json(results);
  EXPECT_NE(json.find("\"rank\""), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "baseline" / "seed_2" / "eval.json"));
  fs::remove_all(out);
}

TEST(Training, SeedDeterminismAndResume) {
  const auto cfg = small_config();
  const auto root = fs::temp_directory_path() / "casd_trainer_runs";
  fs::remove_all(root);
  run_training(cfg, data_dir(), root / "a");
  run_training(cfg, data_dir(), root / "b");
  const auto log_a = slurp(root / "a" / "metrics.jsonl");
  EXPECT_FALSE(log_a.empty());
  EXPECT_EQ(log_a, slurp(root / "b" / "metrics.jsonl"));

  auto half = cfg;
  half.max_iters = 5;
  run_training(half, data_dir(), root / "c");
  EXPECT_EQ(read_checkpoint_meta(root / "c" / "checkpoint.ckpt").iter, 5u);
  run_training(cfg, data_dir(), root / "c", true);
  EXPECT_EQ(slurp(root / "c" / "metrics.jsonl"), log_a);
  EXPECT_EQ(slurp(root / "c" / "checkpoint.ckpt"), slurp(root / "a" / "checkpoint.ckpt"));

  // Evaluation of a checkpoint is deterministic and matches the run's report.
  const auto e1 = run_eval(root / "a" / "checkpoint.ckpt", data_dir());
  const auto e2 = run_eval(root / "a" / "checkpoint.ckpt", data_dir());
  EXPECT_EQ(e1.to_json(), e2.to_json());
  EXPECT_EQ(e1.to_json() + "\n", slurp(root / "a" / "eval.json"));
  fs::remove_all(root);
}

TEST(Checkpoint, MismatchAndCorruption) {
  const auto cfg = small_config();
  const auto dir = fs::temp_directory_path() / "casd_ckpt_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Detector<float> m(cfg, 3);
  save_checkpoint(dir / "a.ckpt", m, cfg, 7);
  Detector<float> m2(cfg, 3);
  EXPECT_EQ(load_checkpoint(dir / "a.ckpt", m2, cfg), 7u);
  EXPECT_EQ(m2.parameters()[0]->value, m.parameters()[0]->value);

  auto other = cfg;
  other.gamma = 0.2;
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt", m2, other), ContractError);

  const auto bytes = slurp(dir / "a.ckpt");
  std::ofstream(dir / "b.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 10);
  EXPECT_THROW(load_checkpoint(dir / "b.ckpt", m2, cfg), FormatError);
  std::ofstream(dir / "c.ckpt", std::ios::binary) << "NOTACKPT";
  EXPECT_THROW(read_checkpoint_meta(dir / "c.ckpt"), FormatError);
  fs::remove_all(dir);
}

TEST(Training, MissingDatasetIsFormatError) {
  EXPECT_THROW(run_training(small_config(), "/nonexistent/casd_data", "/tmp/casd_never"),
               FormatError);
}

TEST(Views, FlipAndScaleGeometry) {
  const Dataset ds(data_dir() / "train");
  const auto s = ds.load_train(0);
  auto cfg = small_config();
  std::mt19937_64 rng(3);
  const auto v = make_views(s, cfg, rng);
  ASSERT_EQ(v.names, (std::vector<std::string>{"orig", "flip", "scale"}));
  EXPECT_EQ(v.boxes[1][0], flip_box(s.proposals[0], 64));
  EXPECT_EQ(v.scale, 1.5);
  EXPECT_EQ(v.pixels[2].dim(1), 96u);
  cfg.transforms = {"orig"};
  EXPECT_EQ(make_views(s, cfg, rng).pixels.size(), 1u);
}
