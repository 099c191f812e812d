#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "casd/trainer.hpp"

namespace casd {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  double tol = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // kink-adjacent coordinates
  bool passed() const { return max_rel_err < tol; }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed() const;
  std::string to_text() const;
};

using OpFn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

/// Central-difference check of `f` with respect to each input. Non-scalar
/// outputs are reduced with fixed random weights. Coordinates where the two
/// one-sided slopes disagree are treated as kinks and skipped. At most
/// `max_coords` coordinates per input are probed.
GradCheckEntry check_op(const std::string& name, const OpFn& f,
                        const std::vector<Tensor<double>>& inputs, double tol = 1e-4,
                        std::size_t max_coords = 64, double h = 1e-6);

// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-4);

// Every differentiable op and loss building block.
GradCheckReport op_level_checks(std::uint64_t seed = 7, double tol = 1e-4);

/// Tiny configuration for the whole-loss check: 16x16 images, two narrow
/// blocks, 2x2 RoI bins.
TrainConfig micro_config();
TrainSample micro_sample(std::uint64_t seed, int num_classes = 2);

/// Finite differences of the complete training loss with respect to every
/// parameter of a micro detector, for the given config.
GradCheckEntry full_graph_check(const TrainConfig& cfg, const TrainSample& sample,
                                const std::string& name, double tol = 1e-3);

/// Parameter gradients of the attention losses when the comprehensive
/// targets are detached vs. replaced by constant copies. Returns the largest
/// absolute difference (0 means bitwise equal).
double detached_target_gap(const TrainConfig& cfg, const TrainSample& sample);

GradCheckReport run_grad_check();

/// Writes, for each proposal in `proposal_ids` (top detection per present
/// class when empty), A, aligned A^flip, A^scale, A^IW, per-block maps and
/// A^LW as TNSR plus P5 PGM. Returns the written TNSR paths.
std::vector<std::filesystem::path> dump_attention(const std::filesystem::path& ckpt,
                                                  const std::filesystem::path& data_dir,
                                                  std::size_t sample_index,
                                                  std::vector<std::size_t> proposal_ids,
                                                  const std::filesystem::path& out_dir,
                                                  double scale = 1.5);

// 8-bit grayscale, values clamped to [0, 1] and scaled by 255.
void write_pgm(const std::filesystem::path& path, const Tensor<float>& map);

}  // namespace casd
