#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "casd/detect_eval.hpp"
#include "casd/mil_head.hpp"
#include "casd/self_distill.hpp"
#include "casd/synth_data.hpp"
#include "casd/vision.hpp"

namespace casd {

enum class BaselineRegularizer { None, PredConsistency, AttnConsistency };

std::string regularizer_name(BaselineRegularizer r);
BaselineRegularizer parse_regularizer(const std::string& s);

/// Everything that shapes a training run. Defaults are the full model.
struct TrainConfig {
  // Loss weights.
  double alpha = 0.1;
  double beta = 0.05;
  double gamma = 0.1;
  std::size_t num_refine = 2;  // K

  // SGD schedule.
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double lr_decay_factor = 10;
  std::vector<std::size_t> decay_at_iter{2000};
  std::size_t max_iters = 3000;

  float nms_thr = 0.3f;
  std::vector<std::string> transforms{"orig", "flip", "scale"};
  std::vector<double> scales{0.5, 0.75, 1.25, 1.5};       // training-time scale set
  std::vector<double> eval_scales{0.5, 0.75, 1.25, 1.5};  // plus the original image

  bool enable_iw = true;
  bool enable_lw = true;
  bool enable_ia = true;
  bool enable_psa = true;
  bool enable_reg = true;
  BaselineRegularizer baseline_regularizer = BaselineRegularizer::None;
  std::vector<std::size_t> lw_blocks{2, 3, 4};
  double ia_p = 0.5;
  double ia_q = 0.8;

  // Model.
  std::vector<std::size_t> widths{16, 32, 64, 64};
  std::size_t hidden = 128;
  std::size_t roi_size = 7;

  std::uint64_t seed = 0;
  std::size_t log_every = 50;
  std::size_t ckpt_every = 0;  // 0: only at the end

  bool has_transform(const std::string& t) const;
  // Throws ContractError on inconsistent settings.
  void validate() const;
  // Canonical `key = value` text; parse_config(to_text()) round-trips.
  std::string to_text() const;
  // Hash of every key except max_iters, log_every and ckpt_every.
  std::uint64_t hash() const;
  LossWeights weights() const { return {alpha, beta, gamma}; }
};

// Applies one `key = value` setting. Unknown key or bad value -> ContractError.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);

double lr_at(std::size_t iter, const TrainConfig& cfg);

/// Forward outputs of one transformed view.
template <typename T>
struct ViewOutputs {
  std::vector<BBox> boxes;  // proposals in this view's pixel frame
  std::vector<Var<T>> blocks;
  Var<T> pooled;  // last block, [N x L x R x R]
  ScoreMatrices<T> scores;
};

/// Backbone + proposal head + MIL head, sharing weights across views.
template <typename T>
class Detector {
 public:
  Detector(const TrainConfig& cfg, int num_classes);

  ViewOutputs<T> forward(Graph<T>& g, const Tensor<T>& pixels, std::span<const BBox> boxes);

  std::vector<Parameter<T>*> parameters();
  int num_classes() const noexcept { return num_classes_; }
  std::size_t num_blocks() const noexcept { return backbone_.num_blocks(); }
  std::size_t roi_size() const noexcept { return roi_size_; }

 private:
  int num_classes_;
  std::size_t roi_size_;
  Backbone<T> backbone_;
  ProposalHead<T> head_;
  MilHead<T> mil_;
};

/// Unweighted loss terms (summed over branches) plus the weighted total.
struct LossBreakdown {
  double total = 0;
  double mlc = 0;
  double ref = 0;
  double reg = 0;
  double iw = 0;
  double lw = 0;
  double base = 0;
  double lr = 0;
};

/// The view set of one step: original, optional flip and optional scale.
struct StepViews {
  std::vector<std::string> names;
  std::vector<Tensor<float>> pixels;
  std::vector<std::vector<BBox>> boxes;
  double scale = 1.0;
};

StepViews make_views(const TrainSample& sample, const TrainConfig& cfg, std::mt19937_64& rng);

/// Values that enter the loss as constants: mined pseudo-labels and the
/// comprehensive attention targets. Captured on the first build_loss call
/// that receives an empty state, replayed on later calls.
template <typename T>
struct StopGradState {
  bool captured = false;
  std::vector<PseudoLabels> mined;
  Tensor<T> iw_target;
  Tensor<T> lw_target;
};

/// Builds the full loss graph for one sample. Returns the total and fills
/// `breakdown`. Does not run backward. `rng` drives IA masking only; the
/// views are built beforehand.
template <typename T>
Var<T> build_loss(Graph<T>& g, Detector<T>& model, const StepViews& views,
                  std::span<const float> labels, const TrainConfig& cfg, std::mt19937_64& rng,
                  LossBreakdown& breakdown, StopGradState<T>* frozen = nullptr);

// Forward, backward and SGD update for one image.
LossBreakdown train_step(Detector<float>& model, const TrainSample& sample,
                         const TrainConfig& cfg, std::size_t iter);

// Seed for the per-step generator; depends only on (seed, iter).
std::uint64_t step_seed(std::uint64_t seed, std::size_t iter);
// Index of the training image used at `iter`: a per-epoch permutation.
std::size_t sample_index_at(std::uint64_t seed, std::size_t iter, std::size_t n);

// Checkpoint file: "CASDCKPT1", u32 meta length, JSON meta, then per
// parameter a TNSR value blob followed by a TNSR velocity blob.
struct CheckpointMeta {
  std::size_t iter = 0;
  std::uint64_t config_hash = 0;
  int num_classes = 0;
  std::string config_text;
  std::vector<std::string> names;
};

void save_checkpoint(const std::filesystem::path& path, Detector<float>& model,
                     const TrainConfig& cfg, std::size_t iter);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
// Restores parameters and velocities; returns the stored iteration.
std::size_t load_checkpoint(const std::filesystem::path& path, Detector<float>& model,
                            const TrainConfig& cfg);

std::string metrics_line(std::size_t iter, const LossBreakdown& l);

struct TrainResult {
  std::size_t iters_done = 0;
  std::optional<EvalReport> report;
  LossBreakdown last;
};

/// Trains on `data_dir/train` (or `data_dir` itself when it is a split) and
/// writes `metrics.jsonl`, `checkpoint.ckpt` and, when a test split exists,
/// `eval.json` under `out_dir`. With `resume`, continues from an existing
/// checkpoint in `out_dir`.
TrainResult run_training(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                         const std::filesystem::path& out_dir, bool resume = false,
                         std::ostream* progress = nullptr);

// Multi-scale inference for one image: scores averaged over the original
// and `eval_scales`, then per-class NMS.
std::vector<Detection> detect(Detector<float>& model, const Image& image,
                              std::span<const BBox> proposals, const TrainConfig& cfg);

EvalReport run_eval(Detector<float>& model, const Dataset& data, const TrainConfig& cfg);
EvalReport run_eval(const std::filesystem::path& ckpt, const std::filesystem::path& data_dir);

// `dir/train` and `dir/test` when present, else `dir` itself.
std::filesystem::path split_dir(const std::filesystem::path& data_dir, const std::string& split);

/// One named configuration of an ablation table.
struct AblationRow {
  std::string name;
  TrainConfig config;
};

struct AblationResult {
  std::string name;
  std::vector<double> map50;  // per seed
  std::vector<double> corloc;
  double mean_map50 = 0;
  double mean_corloc = 0;
};

// Rows of a named suite: table1, table2, table3, gamma or directional.
std::vector<AblationRow> ablation_rows(const std::string& suite, const TrainConfig& base);
std::vector<std::string> ablation_suites();

std::vector<AblationResult> run_ablation_suite(std::span<const AblationRow> rows,
                                               std::span<const std::uint64_t> seeds,
                                               const std::filesystem::path& data_dir,
                                               const std::filesystem::path& out_dir,
                                               std::ostream* progress = nullptr);

// JSON table: rows with per-seed and mean metrics plus the rank order by mean mAP.
std::string ablation_table_json(std::span<const AblationResult> results);

}  // namespace casd
