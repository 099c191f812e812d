#include "casd/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace casd {

namespace fs = std::filesystem;

namespace {

std::uint64_t name_seed(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor<double> randn(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> d(0.0, sd);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Indices of the coordinates to probe: all of them, or a fixed random subset.
std::vector<std::size_t> probe_coords(std::size_t n, std::size_t max_coords, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n > max_coords) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_coords);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

// Compares the analytic slope against central differences of `eval` at one
// coordinate; kink-adjacent coordinates return nullopt.
template <typename Eval>
std::optional<double> probe(double& slot, double analytic, double f0, double h, double tol,
                            Eval&& eval) {
  const double v = slot;
  slot = v + h;
  const double fp = eval();
  slot = v - h;
  const double fm = eval();
  slot = v;
  const double numeric = (fp - fm) / (2 * h);
  const double err = relative_error(analytic, numeric);
  if (err < tol) return err;
  const double right = (fp - f0) / h, left = (f0 - fm) / h;
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
  if (std::abs(right - left) > tol * scale) return std::nullopt;
  return err;
}

PseudoLabels make_labels(std::vector<int> label, std::vector<float> weight, std::vector<int> seed,
                         int num_classes) {
  PseudoLabels p;
  p.label = std::move(label);
  p.weight = std::move(weight);
  p.seed = std::move(seed);
  p.num_classes = num_classes;
  return p;
}

Tensor<float> slice_map(const Tensor<float>& maps, std::size_t r) {
  const std::size_t h = maps.dim(1), w = maps.dim(2);
  Tensor<float> out({h, w});
  std::copy_n(maps.ptr() + r * h * w, h * w, out.ptr());
  return out;
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed(); });
}

std::string GradCheckReport::to_text() const {
  std::ostringstream os;
  for (const auto& e : entries) {
    os << (e.passed() ? "ok   " : "FAIL ") << e.name << "  max_rel_err=" << e.max_rel_err
       << " tol=" << e.tol << " checked=" << e.checked << " skipped=" << e.skipped << '\n';
  }
  return os.str();
}

GradCheckEntry check_op(const std::string& name, const OpFn& f,
                        const std::vector<Tensor<double>>& inputs, double tol,
                        std::size_t max_coords, double h) {
  std::mt19937_64 rng(name_seed(name));
  Tensor<double> proj;
  std::vector<Tensor<double>> xs = inputs;

  auto run = [&](std::vector<Tensor<double>>* grads) {
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(g.input(x, true));
    const auto out = f(g, vars);
    if (proj.empty() || proj.shape() != out.shape()) proj = randn(out.shape(), rng);
    const auto loss = sum(mul(out, g.input(proj)));
    if (grads != nullptr) {
      g.backward(loss);
      for (const auto& v : vars) {
        grads->push_back(v.grad().empty() ? Tensor<double>(v.shape(), 0.0) : v.grad());
      }
    }
    return loss.value().item();
  };

  std::vector<Tensor<double>> grads;
  const double f0 = run(&grads);
  GradCheckEntry e{name, 0.0, tol, 0, 0};
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (auto j : probe_coords(xs[i].numel(), max_coords, rng)) {
      const auto err = probe(xs[i][j], grads[i][j], f0, h, tol, [&] { return run(nullptr); });
      if (!err) {
        ++e.skipped;
        continue;
      }
      ++e.checked;
      e.max_rel_err = std::max(e.max_rel_err, *err);
    }
  }
  return e;
}

GradCheckReport op_level_checks(std::uint64_t seed, double tol) {
  std::mt19937_64 rng(seed);
  GradCheckReport r;
  auto add_check = [&](const std::string& name, const OpFn& f, std::vector<Tensor<double>> in) {
    r.entries.push_back(check_op(name, f, in, tol));
  };
  using V = std::vector<Var<double>>;
  using G = Graph<double>;

  add_check("add_broadcast", [](G&, const V& v) { return add(v[0], v[1]); },
            {randn({3, 4}, rng), randn({1, 4}, rng)});
  add_check("sub_broadcast", [](G&, const V& v) { return sub(v[0], v[1]); },
            {randn({2, 3, 4}, rng), randn({3, 1}, rng)});
  add_check("mul_broadcast", [](G&, const V& v) { return mul(v[0], v[1]); },
            {randn({3, 4}, rng), randn({3, 1}, rng)});
  add_check("scale", [](G&, const V& v) { return scale(v[0], 0.7); }, {randn({5}, rng)});
  add_check("add_scalar", [](G&, const V& v) { return add_scalar(v[0], 0.3); }, {randn({5}, rng)});
  add_check("matmul", [](G&, const V& v) { return matmul(v[0], v[1]); },
            {randn({3, 5}, rng), randn({5, 2}, rng)});
  add_check("transpose", [](G&, const V& v) { return transpose(v[0]); }, {randn({3, 4}, rng)});
  add_check("conv2d_pad1", [](G&, const V& v) { return conv2d(v[0], v[1], v[2], 1, 1); },
            {randn({2, 5, 6}, rng), randn({3, 2, 3, 3}, rng), randn({3}, rng)});
  add_check("conv2d_stride2", [](G&, const V& v) { return conv2d(v[0], v[1], v[2], 2, 0); },
            {randn({2, 7, 7}, rng), randn({2, 2, 3, 3}, rng), randn({2}, rng)});
  add_check("relu", [](G&, const V& v) { return relu(v[0]); }, {randn({4, 4}, rng)});
  add_check("sigmoid", [](G&, const V& v) { return sigmoid(v[0]); }, {randn({4, 4}, rng, 3.0)});
  add_check("maxpool2d", [](G&, const V& v) { return maxpool2d(v[0]); }, {randn({2, 4, 6}, rng)});
  add_check("softmax_axis0", [](G&, const V& v) { return softmax(v[0], 0); }, {randn({3, 4}, rng)});
  add_check("softmax_axis1", [](G&, const V& v) { return softmax(v[0], 1); }, {randn({3, 4}, rng)});
  add_check("log_softmax_axis0", [](G&, const V& v) { return log_softmax(v[0], 0); },
            {randn({3, 4}, rng)});
  add_check("log_softmax_axis1", [](G&, const V& v) { return log_softmax(v[0], 1); },
            {randn({3, 4}, rng)});
  add_check("channel_mean", [](G&, const V& v) { return channel_mean(v[0]); },
            {randn({2, 3, 3, 3}, rng)});
  add_check("sum_axis", [](G&, const V& v) { return sum_axis(v[0], 1); }, {randn({3, 4}, rng)});
  add_check("sum", [](G&, const V& v) { return sum(v[0]); }, {randn({3, 4}, rng)});
  add_check("mean", [](G&, const V& v) { return mean(v[0]); }, {randn({3, 4}, rng)});
  add_check("elementwise_max",
            [](G&, const V& v) { return elementwise_max<double>(std::span<const Var<double>>(v)); },
            {randn({3, 3}, rng), randn({3, 3}, rng), randn({3, 3}, rng)});
  add_check("l2_norm_sq_mean", [](G&, const V& v) { return l2_norm_sq_mean(v[0], v[1]); },
            {randn({3, 4}, rng), randn({3, 4}, rng)});
  add_check("smooth_l1", [](G&, const V& v) { return smooth_l1(v[0], v[1]); },
            {randn({4, 4}, rng, 2.0), randn({4, 4}, rng)});
  add_check("clamp", [](G&, const V& v) { return clamp(v[0], -0.5, 0.5); }, {randn({4, 4}, rng)});
  add_check("log", [](G&, const V& v) { return log(v[0]); }, {uniform({4, 4}, rng, 0.5, 2.0)});
  add_check("reshape", [](G&, const V& v) { return reshape(v[0], {4, 3}); }, {randn({3, 4}, rng)});
  add_check("flip_w", [](G&, const V& v) { return flip_w(v[0]); }, {randn({2, 3, 4}, rng)});

  const std::vector<BBox> boxes{{0, 0, 16, 16}, {4, 2, 30, 22}, {10, 8, 18, 31}, {1, 1, 3, 3}};
  add_check("roi_pool",
            [&](G&, const V& v) { return roi_pool<double>(v[0], boxes, 4.0f, 3); },
            {randn({2, 8, 8}, rng)});
  add_check("proposal_attention",
            [](G&, const V& v) { return proposal_attention(v[0]); }, {randn({3, 4, 3, 3}, rng)});

  const std::vector<float> sel{1, 0, 1};
  const auto target = uniform({3, 3, 3}, rng, 0.5, 1);
  add_check("distillation_loss",
            [&](G& g, const V& v) {
              const Var<double> views[] = {v[0], v[1], v[2]};
              return distillation_loss<double>(views, g.input(target), sel);
            },
            {uniform({3, 3, 3}, rng, 0.5, 1), uniform({3, 3, 3}, rng, 0.5, 1),
             uniform({3, 3, 3}, rng, 0.5, 1)});
  add_check("wsddn_scores", [](G&, const V& v) { return wsddn_scores(v[0], v[1]); },
            {randn({3, 5}, rng), randn({3, 5}, rng)});
  const std::vector<float> labels{1, 0, 1};
  add_check("mlc_loss", [&](G&, const V& v) { return mlc_loss(v[0], labels); },
            {uniform({3}, rng, 0.1, 0.9)});
  const auto pl = make_labels({0, 3, 2, 3, 0}, {0.7f, 1.0f, 0.4f, 0.0f, 0.7f}, {0, -1, 2, -1, 0}, 3);
  add_check("refinement_loss",
            [&](G&, const V& v) { return refinement_loss(log_softmax(v[0], 0), pl); },
            {randn({4, 5}, rng)});
  const std::vector<BBox> props{{0, 0, 10, 10}, {20, 20, 40, 40}, {5, 5, 25, 30},
                                {3, 3, 9, 9},   {1, 0, 11, 12}};
  const auto targets = regression_targets<double>(props, pl);
  add_check("regression_loss",
            [&](G&, const V& v) { return regression_loss(v[0], targets, pl); },
            {randn({5, 4}, rng)});
  add_check("js_divergence",
            [&](G&, const V& v) {
              return js_divergence(softmax(v[0], 0), softmax(v[1], 0), std::vector<float>{1, 1, 0, 1});
            },
            {randn({3, 4}, rng), randn({3, 4}, rng)});
  add_check("attention_consistency",
            [&](G&, const V& v) {
              return baseline_attention_consistency(v[0], v[1], v[2], sel);
            },
            {uniform({3, 3, 3}, rng, 0.5, 1), uniform({3, 3, 3}, rng, 0.5, 1),
             uniform({3, 3, 3}, rng, 0.5, 1)});
  return r;
}

TrainConfig micro_config() {
  TrainConfig c;
  c.widths = {2, 3};
  c.hidden = 4;
  c.roi_size = 2;
  c.lw_blocks = {1, 2};
  c.scales = {1.5};
  c.eval_scales = {1.5};
  c.seed = 11;
  return c;
}

TrainSample micro_sample(std::uint64_t seed, int num_classes) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  TrainSample s;
  s.image.pixels = Tensor<float>({3, 16, 16});
  for (auto& v : s.image.pixels.data()) v = u(rng);
  s.image.id = "micro";
  s.proposals = {{0, 0, 8, 8}, {2, 2, 12, 12}, {8, 4, 16, 16}, {1, 6, 9, 15},
                 {4, 0, 14, 9}, {0, 0, 16, 16}};
  s.labels.assign(static_cast<std::size_t>(num_classes), 0.0f);
  s.labels[0] = 1.0f;
  return s;
}

GradCheckEntry full_graph_check(const TrainConfig& cfg, const TrainSample& sample,
                                const std::string& name, double tol) {
  Detector<double> model(cfg, static_cast<int>(sample.labels.size()));
  const auto params = model.parameters();
  StopGradState<double> frozen;

  auto run = [&](bool backward) {
    std::mt19937_64 rng(step_seed(cfg.seed, 0));
    const auto views = make_views(sample, cfg, rng);
    Graph<double> g;
    LossBreakdown b;
    auto total = build_loss<double>(g, model, views, sample.labels, cfg, rng, b, &frozen);
    if (backward) g.backward(total);
    return total.value().item();
  };

  for (auto* p : params) p->grad = Tensor<double>(p->value.shape(), 0.0);
  const double f0 = run(true);
  std::vector<Tensor<double>> grads;
  for (auto* p : params) grads.push_back(p->grad);

  GradCheckEntry e{name, 0.0, tol, 0, 0};
  const double h = 1e-6;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i]->value;
    for (std::size_t j = 0; j < value.numel(); ++j) {
      const auto err = probe(value[j], grads[i][j], f0, h, tol, [&] { return run(false); });
      if (!err) {
        ++e.skipped;
        continue;
      }
      ++e.checked;
      e.max_rel_err = std::max(e.max_rel_err, *err);
    }
  }
  return e;
}

double detached_target_gap(const TrainConfig& cfg, const TrainSample& sample) {
  Detector<double> model(cfg, static_cast<int>(sample.labels.size()));
  const auto params = model.parameters();

  auto grads_with = [&](bool constant_targets) {
    for (auto* p : params) p->grad = Tensor<double>(p->value.shape(), 0.0);
    std::mt19937_64 rng(step_seed(cfg.seed, 0));
    const auto views = make_views(sample, cfg, rng);
    Graph<double> g;
    std::vector<ViewOutputs<double>> outs;
    for (std::size_t v = 0; v < views.pixels.size(); ++v) {
      outs.push_back(model.forward(g, views.pixels[v].cast<double>(), views.boxes[v]));
    }
    const auto labels = mine_pseudo_labels(outs[0].scores.x.value(), sample.labels, views.boxes[0]);
    const auto sel = selection_mask(labels);

    std::vector<Var<double>> aligned;
    for (std::size_t v = 0; v < outs.size(); ++v) {
      auto a = proposal_attention(outs[v].pooled);
      aligned.push_back(views.names[v] == "flip" ? flip_map(a) : a);
    }
    auto iw_target = comprehensive_max<double>(aligned);
    const auto maps = layer_attentions<double>(outs[0].blocks, cfg.lw_blocks, views.boxes[0],
                                               model.roi_size());
    auto lw_target = comprehensive_lw<double>(maps);
    if (constant_targets) {
      iw_target = g.input(iw_target.value());
      lw_target = g.input(lw_target.value());
    }
    auto loss = add(distillation_loss<double>(aligned, iw_target, sel),
                    lw_casd_loss<double>(maps, lw_target, sel));
    g.backward(loss);
    std::vector<Tensor<double>> out;
    for (auto* p : params) out.push_back(p->grad);
    return out;
  };

  const auto detached = grads_with(false);
  const auto constant = grads_with(true);
  double gap = 0;
  for (std::size_t i = 0; i < detached.size(); ++i) {
    for (std::size_t j = 0; j < detached[i].numel(); ++j) {
      gap = std::max(gap, std::abs(detached[i][j] - constant[i][j]));
    }
  }
  return gap;
}

GradCheckReport run_grad_check() {
  auto report = op_level_checks();
  const auto sample = micro_sample(5);
  auto cfg = micro_config();
  report.entries.push_back(full_graph_check(cfg, sample, "full_loss"));
  cfg.enable_iw = false;
  cfg.enable_ia = false;
  cfg.baseline_regularizer = BaselineRegularizer::PredConsistency;
  report.entries.push_back(full_graph_check(cfg, sample, "full_loss_pred_consistency"));
  cfg.baseline_regularizer = BaselineRegularizer::AttnConsistency;
  report.entries.push_back(full_graph_check(cfg, sample, "full_loss_attn_consistency"));

  // Bitwise equality: any nonzero gap fails.
  report.entries.push_back({"detached_targets", detached_target_gap(micro_config(), sample),
                            std::numeric_limits<double>::denorm_min(), 1, 0});
  return report;
}

void write_pgm(const fs::path& path, const Tensor<float>& map) {
  if (map.rank() != 2) throw ShapeError("write_pgm expects [H x W], got " + shape_str(map.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  for (const float v : map.data()) {
    const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    os.put(static_cast<char>(byte));
  }
}

std::vector<fs::path> dump_attention(const fs::path& ckpt, const fs::path& data_dir,
                                     std::size_t sample_index,
                                     std::vector<std::size_t> proposal_ids, const fs::path& out_dir,
                                     double scale) {
  const auto meta = read_checkpoint_meta(ckpt);
  const auto cfg = parse_config(meta.config_text);
  Detector<float> model(cfg, meta.num_classes);
  load_checkpoint(ckpt, model, cfg);
  const Dataset data(split_dir(data_dir, "test"));
  const auto sample = data.load_train(sample_index);
  const std::size_t n = sample.proposals.size();

  const float w = static_cast<float>(sample.image.width());
  std::vector<BBox> flip_boxes, scale_boxes;
  for (const auto& b : sample.proposals) {
    flip_boxes.push_back(flip_box(b, w));
    scale_boxes.push_back(scale_box(b, scale));
  }
  Graph<float> g;
  const auto orig = model.forward(g, sample.image.pixels, sample.proposals);
  const auto flip = model.forward(g, flip_image(sample.image.pixels), flip_boxes);
  const auto scaled = model.forward(g, scale_image(sample.image, scale).pixels, scale_boxes);

  if (proposal_ids.empty()) {
    // Top proposal of each present class under the summed refinement scores.
    for (std::size_t c = 0; c < sample.labels.size(); ++c) {
      if (sample.labels[c] <= 0) continue;
      std::size_t best = 0;
      float best_score = -1;
      for (std::size_t r = 0; r < n; ++r) {
        float s = 0;
        for (const auto& x : orig.scores.x_k) s += x.value().at(c, r);
        if (s > best_score) {
          best_score = s;
          best = r;
        }
      }
      if (std::find(proposal_ids.begin(), proposal_ids.end(), best) == proposal_ids.end()) {
        proposal_ids.push_back(best);
      }
    }
  }
  for (auto r : proposal_ids) {
    if (r >= n) throw ContractError("proposal id " + std::to_string(r) + " out of range");
  }

  const auto a = proposal_attention(orig.pooled);
  const auto a_flip = flip_map(proposal_attention(flip.pooled));
  const auto a_scale = proposal_attention(scaled.pooled);
  const Var<float> views[] = {a, a_flip, a_scale};
  const auto a_iw = comprehensive_max<float>(views);

  std::vector<std::size_t> all_blocks(model.num_blocks());
  std::iota(all_blocks.begin(), all_blocks.end(), 1);
  const auto block_maps =
      layer_attentions<float>(orig.blocks, all_blocks, sample.proposals, model.roi_size());
  std::vector<Var<float>> lw_maps;
  for (auto q : cfg.lw_blocks) lw_maps.push_back(block_maps[q - 1]);
  const auto a_lw = comprehensive_lw<float>(lw_maps);

  std::vector<std::pair<std::string, const Var<float>*>> named{
      {"A", &a}, {"A_flip", &a_flip}, {"A_scale", &a_scale}, {"A_IW", &a_iw}};
  for (std::size_t q = 0; q < block_maps.size(); ++q) {
    named.push_back({"B" + std::to_string(q + 1), &block_maps[q]});
  }
  named.push_back({"A_LW", &a_lw});

  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (auto r : proposal_ids) {
    for (const auto& [name, var] : named) {
      const auto map = slice_map(var->value(), r);
      const std::string stem = "p" + std::to_string(r) + "_" + name;
      save_tnsr(out_dir / (stem + ".tnsr"), map);
      write_pgm(out_dir / (stem + ".pgm"), map);
      written.push_back(out_dir / (stem + ".tnsr"));
    }
  }
  return written;
}

}  // namespace casd
