// Command-line front end: summary, bench, train, init, fuse, verify, export-bias.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>

#include "CLI11.hpp"

#include "levit/bench.hpp"
#include "levit/checks.hpp"
#include "levit/csv.hpp"
#include "levit/fusion.hpp"
#include "levit/trainer.hpp"

using namespace levit;

namespace {

struct SpecArgs {
  std::string model;
  std::string spec_file;
  std::int64_t image_size = 0;
  std::int64_t num_classes = 0;

  void add(CLI::App* cmd, const std::string& default_model = "") {
    model = default_model;
    auto* m = cmd->add_option("--model", model, "Preset name or ablation code (A2, A3, A4, A5, A7)");
    auto* s = cmd->add_option("--spec", spec_file, "JSON model description");
    m->excludes(s);
    cmd->add_option("--image-size", image_size, "Input resolution override");
    cmd->add_option("--num-classes", num_classes, "Classifier width override");
  }

  ModelSpec resolve() const {
    ModelSpec spec;
    if (!spec_file.empty()) {
      spec = load_spec(spec_file);
    } else if (model.empty()) {
      throw ConfigError("one of --model or --spec is required");
    } else if (std::ranges::find(ablation_names(), model) != ablation_names().end()) {
      spec = ablation(model);
    } else {
      spec = preset(model);
    }
    if (image_size) spec = with_image_size(spec, image_size);
    if (num_classes) spec.num_classes = num_classes;
    spec.validate();
    return spec;
  }
};

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  throw ConfigError("--dtype: expected f32 or f64, got '" + s + "'");
}

std::ostream& open_or_stdout(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw std::runtime_error("cannot write " + path);
  return file;
}

double forward_gap(Model& a, Model& b, int inputs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::int64_t s = a.spec().image_size;
  NoGradGuard no_grad;
  double worst = 0;
  for (int i = 0; i < inputs; ++i) {
    const Tensor x = random_normal({1, 3, s, s}, rng, 1.0, a.dtype());
    worst = std::max(worst, max_abs_diff(a.forward(x).logits, b.forward(x).logits));
  }
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LeViT reference implementation: cost reports, training, fusion, benchmarks"};
  app.require_subcommand(1);

  // summary
  auto* summary = app.add_subcommand("summary", "Per-layer shapes, parameters and MACs as CSV");
  SpecArgs summary_spec;
  summary_spec.add(summary);
  bool summary_blocks = false;
  std::int64_t summary_batch = 1;
  summary->add_flag("--blocks", summary_blocks, "One row per block instead of per layer");
  summary->add_option("--batch", summary_batch, "Batch size for MAC counts")->check(CLI::PositiveNumber);

  // bench
  auto* bench = app.add_subcommand("bench", "Single-threaded timing, CSV of medians and IQR");
  SpecArgs bench_spec;
  bench_spec.add(bench, "LeViT-256");
  BenchConfig bench_cfg;
  bool decompose = false, bench_fused = false, compare_fused = false;
  bench->add_option("--batch", bench_cfg.batch, "Images per forward pass");
  bench->add_option("--reps", bench_cfg.reps, "Timed repetitions (at least 3)");
  bench->add_option("--warmup", bench_cfg.warmup, "Untimed warm-up passes");
  bench->add_option("--seed", bench_cfg.seed, "Weight and input seed");
  bench->add_flag("--decompose", decompose, "Time the components of a first-stage attention + MLP pair");
  bench->add_flag("--fused", bench_fused, "Fold BN before timing");
  bench->add_flag("--compare-fused", compare_fused, "Time the model unfused and fused");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train on the synthetic dataset, CSV loss curve");
  std::string train_config, train_out, train_weights;
  int train_steps = 0;
  train_cmd->add_option("--config", train_config, "Training JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "Curve CSV path (default stdout)");
  train_cmd->add_option("--weights", train_weights, "Save the trained weights here");
  train_cmd->add_option("--steps", train_steps, "Override train.steps");

  // init
  auto* init = app.add_subcommand("init", "Write freshly initialized weights");
  SpecArgs init_spec;
  init_spec.add(init);
  std::uint64_t init_seed = 0;
  std::string init_out, init_dtype = "f32";
  init->add_option("--seed", init_seed, "Initialization seed");
  init->add_option("--dtype", init_dtype, "f32 or f64");
  init->add_option("--out", init_out, "Archive path")->required();

  // fuse
  auto* fuse = app.add_subcommand("fuse", "Fold BN into the neighbouring layers of an archive");
  std::string fuse_in, fuse_out;
  int fuse_check = 4;
  fuse->add_option("--weights", fuse_in, "Input archive")->required();
  fuse->add_option("--out", fuse_out, "Output archive")->required();
  fuse->add_option("--check", fuse_check, "Random inputs used for the parity check (0 skips)");

  // verify
  auto* verify = app.add_subcommand("verify", "Run the property suite; nonzero exit on failure");
  SpecArgs verify_spec;
  verify_spec.add(verify);
  VerifyOptions verify_opts;
  verify->add_option("--resolution", verify_opts.image_size, "Input size used by the checks");
  verify->add_option("--inputs", verify_opts.inputs, "Random inputs for the fusion check");
  verify->add_option("--seed", verify_opts.seed, "Seed");

  // export-bias
  auto* export_cmd = app.add_subcommand("export-bias", "Write attention-bias grids as CSV");
  std::string export_in, export_dir;
  export_cmd->add_option("--weights", export_in, "Archive")->required();
  export_cmd->add_option("--out", export_dir, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (summary->parsed()) {
      const auto spec = summary_spec.resolve();
      const auto report =
          count(spec, summary_blocks ? Granularity::Block : Granularity::Layer, summary_batch);
      write_cost_csv(std::cout, report);
      std::cout << "total,all_heads," << report.macs << "," << report.params << ",\n";
      std::cout << "total,single_head," << report.macs << "," << report.params_single_head << ",\n";
      return 0;
    }

    if (bench->parsed()) {
      bench_cfg.validate();
      auto spec = bench_spec.resolve();
      std::cerr << "bench: " << pin_current_thread() << ", " << bench_cfg.reps << " reps after "
                << bench_cfg.warmup << " warm-ups, batch " << bench_cfg.batch << "\n";
      std::vector<BenchRecord> records;
      if (decompose) {
        records = bench_decomposed(bench_cfg, bench_fused, spec);
      } else {
        Model model = Model::build(spec, bench_cfg.seed);
        if (compare_fused) {
          Model fused = fuse_model(model).model;
          records = bench_interleaved(model, fused, bench_cfg, "forward_unfused", "forward_fused");
        } else {
          if (bench_fused) model.fuse_in_place();
          records.push_back(bench_forward(model, bench_cfg, bench_fused ? "forward_fused" : "forward"));
        }
      }
      write_bench_csv(std::cout, records);
      return 0;
    }

    if (train_cmd->parsed()) {
      auto setup = load_training_setup(train_config);
      if (train_steps) {
        setup.train.steps = train_steps;
        setup.train.validate();
      }
      const SyntheticDataset data(setup.dataset);
      Model model = Model::build(setup.spec, setup.model_seed);
      const auto result = train(model, data, setup.train);
      std::ofstream file;
      write_curve_csv(open_or_stdout(train_out, file), result.curve);
      std::ostream& info = train_out.empty() || train_out == "-" ? std::cerr : std::cout;
      if (result.diverged) {
        info << "training failed: " << result.message << "\n";
        return 1;
      }
      info << "initial_loss=" << result.initial_loss << " final_loss=" << result.final_loss
           << " final_accuracy=" << result.final_accuracy << "\n";
      if (!train_weights.empty()) save_weights(model, train_weights);
      return 0;
    }

    if (init->parsed()) {
      const auto spec = init_spec.resolve();
      save_weights(Model::build(spec, init_seed, parse_dtype(init_dtype)), init_out);
      return 0;
    }

    if (fuse->parsed()) {
      Model model = load_weights(fuse_in);
      auto result = fuse_model(model);
      if (result.already_fused) std::cerr << "fuse: " << fuse_in << " is already fused\n";
      save_weights(result.model, fuse_out);
      if (fuse_check > 0) {
        Model back = load_weights(fuse_out);
        const double gap = forward_gap(model, back, fuse_check, 0);
        std::cout << "max_abs_logit_diff=" << gap << " over " << fuse_check << " inputs\n";
        if (!(gap < 1e-4)) {
          std::cerr << "fuse: parity check failed\n";
          return 1;
        }
      }
      return 0;
    }

    if (verify->parsed()) {
      const auto results = verify_model(verify_spec.resolve(), verify_opts);
      std::cout << "check,passed,detail\n";
      bool all = true;
      for (const auto& r : results) {
        write_csv_row(std::cout, {r.name, r.passed ? "1" : "0", r.detail});
        all = all && r.passed;
      }
      return all ? 0 : 1;
    }

    if (export_cmd->parsed()) {
      const auto rows = export_bias(load_weights(export_in), export_dir);
      std::cout << "block,head,table_file,upper_left_file,min,max\n";
      for (const auto& r : rows) {
        std::cout << r.block << "," << r.head << "," << r.table_file << "," << r.upper_left_file
                  << "," << r.min << "," << r.max << "\n";
      }
      return 0;
    }
  } catch (const ArchiveError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
