// casd: data generation, training, evaluation and diagnostics.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "casd/diagnostics.hpp"
#include "casd/synth_data.hpp"
#include "casd/trainer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerify = 3;

casd::TrainConfig config_from(const std::string& path, const std::vector<std::string>& overrides) {
  casd::TrainConfig cfg = path.empty() ? casd::TrainConfig{} : casd::load_config(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw casd::ContractError("--set expects key=value, got " + kv);
    casd::apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

std::vector<std::size_t> parse_ids(const std::string& s) {
  std::vector<std::size_t> ids;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) ids.push_back(std::stoul(item));
  }
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Comprehensive attention self-distillation for weakly supervised detection"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic train/test splits");
  std::uint64_t gen_seed = 0;
  std::size_t n_train = 500, n_test = 200;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--n-train", n_train, "Training images")->check(CLI::PositiveNumber);
  gen->add_option("--n-test", n_test, "Test images")->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a detector");
  std::string train_cfg, train_data, train_out;
  std::vector<std::string> train_set;
  bool resume = false;
  train->add_option("--config", train_cfg, "Config file (key = value)");
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Run directory")->required();
  train->add_option("--set", train_set, "Override a config key (key=value)");
  train->add_flag("--resume", resume, "Continue from the checkpoint in --out");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  std::string eval_ckpt, eval_data;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run an ablation suite over several seeds");
  std::string abl_cfg, abl_data = "data", abl_out = "ablation", suite = "table1";
  std::vector<std::string> abl_set;
  std::size_t n_seeds = 3;
  std::uint64_t seed_base = 0;
  ablate->add_option("--config", abl_cfg, "Base config file");
  ablate->add_option("--seeds", n_seeds, "Number of training seeds")->check(CLI::Range(3, 1000));
  ablate->add_option("--seed-base", seed_base, "First training seed");
  ablate->add_option("--suite", suite, "Suite name")
      ->check(CLI::IsMember(casd::ablation_suites()));
  ablate->add_option("--data", abl_data, "Dataset directory");
  ablate->add_option("--out", abl_out, "Output directory");
  ablate->add_option("--set", abl_set, "Override a base config key (key=value)");

  // grad-check
  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient verification");

  // dump-attention
  auto* dump = app.add_subcommand("dump-attention", "Write attention maps for one sample");
  std::string dump_ckpt, dump_data = "data", dump_out, dump_ids;
  std::size_t dump_sample = 0;
  double dump_scale = 1.5;
  dump->add_option("--ckpt", dump_ckpt, "Checkpoint file")->required();
  dump->add_option("--data", dump_data, "Dataset directory");
  dump->add_option("--sample", dump_sample, "Test sample index")->required();
  dump->add_option("--proposals", dump_ids, "Comma-separated proposal ids");
  dump->add_option("--scale", dump_scale, "Scale used for the scaled view");
  dump->add_option("--out", dump_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) {
      casd::DatasetParams params;
      params.seed = gen_seed;
      const auto tr = casd::generate_dataset(fs::path(gen_out) / "train", "train", n_train, params);
      const auto te = casd::generate_dataset(fs::path(gen_out) / "test", "test", n_test, params);
      std::cout << "wrote " << tr.count << " train and " << te.count << " test images to "
                << gen_out << '\n';
    } else if (*train) {
      const auto cfg = config_from(train_cfg, train_set);
      const auto res = casd::run_training(cfg, train_data, train_out, resume, &std::cerr);
      if (res.report) std::cout << res.report->to_json() << '\n';
    } else if (*eval) {
      std::cout << casd::run_eval(eval_ckpt, eval_data).to_json() << '\n';
    } else if (*ablate) {
      const auto base = config_from(abl_cfg, abl_set);
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = 0; i < n_seeds; ++i) seeds.push_back(seed_base + i);
      const auto rows = casd::ablation_rows(suite, base);
      const auto results = casd::run_ablation_suite(rows, seeds, abl_data, abl_out, &std::cerr);
      const auto table = casd::ablation_table_json(results);
      std::ofstream(fs::path(abl_out) / ("ablation_" + suite + ".json")) << table << '\n';
      std::cout << table << '\n';
    } else if (*grad) {
      const auto report = casd::run_grad_check();
      std::cout << report.to_text();
      if (!report.passed()) return kExitVerify;
    } else if (*dump) {
      const auto files = casd::dump_attention(dump_ckpt, dump_data, dump_sample,
                                              parse_ids(dump_ids), dump_out, dump_scale);
      for (const auto& f : files) std::cout << f.string() << '\n';
    }
  } catch (const casd::FormatError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return 0;
}
