// Command-line front end: dataset generation, training, evaluation,
// augmentation previews, CAM heatmaps and sweeps.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cekd/harness.hpp"

namespace {

using namespace cekd;

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

DatasetSpec load_dataset_spec(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  try {
    return dataset_spec_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("dataset spec " + path + ": " + e.what());
  }
}

void cmd_generate(const std::string& spec_path, const std::string& out) {
  const DatasetSpec spec = spec_path.empty() ? DatasetSpec{} : load_dataset_spec(spec_path);
  const Dataset ds = generate_synthetic(spec);
  save_dataset(ds, out);
  std::cout << "wrote " << ds.samples.size() << " images (" << ds.train.size() << " train, "
            << ds.test.size() << " test) to " << out << "\n";
}

void cmd_train(const std::string& config_path, const std::string& out) {
  const ExperimentConfig config = load_config(config_path);
  const RunSummary s = run_experiment(config, out, &std::cout);
  std::cout << "final teacher_acc " << s.final_teacher_acc;
  if (config.mode == TrainMode::Cekd) std::cout << " student_acc " << s.final_student_acc;
  std::cout << "\n";
}

void cmd_eval(const std::string& ckpt_path, const std::string& data_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset data = load_dataset(data_dir);
  const double acc = evaluate(ckpt.params, data, data.test);
  std::cout << nlohmann::json{{"checkpoint", ckpt_path},
                              {"test_count", data.test.size()},
                              {"accuracy", acc}}
                   .dump()
            << "\n";
}

void cmd_preview(const std::string& method_name, std::optional<double> alpha, double prob,
                 const std::string& data_dir, const std::string& out, std::uint64_t seed,
                 const std::string& ckpt_path, std::size_t count) {
  const auto kind = parse_mix_kind(method_name);
  if (!kind) throw ConfigError("--method must be mixup, cutmix or snapmix");
  const MixMethod method{*kind, alpha.value_or(default_alpha(*kind)), prob};
  try {
    method.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const Dataset data = load_dataset(data_dir);
  NetConfig net;
  net.input_channels = data.spec.channels;
  net.input_hw = data.spec.image_hw;
  net.num_classes = data.spec.num_classes;
  const Params cam_params = ckpt_path.empty() ? init_params(net, RngStream(seed).child("cam-net"))
                                              : load_checkpoint(ckpt_path).params;
  const MixedBatch b = augment_preview(data, method, cam_params, seed, count, out);
  std::cout << "wrote " << b.size() << " " << to_string(method.kind) << " previews to " << out
            << "\n";
}

void cmd_cam(const std::string& ckpt_path, const std::string& data_dir, const std::string& out,
             std::size_t limit) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset data = load_dataset(data_dir);
  std::vector<std::size_t> indices = data.test;
  if (limit > 0 && indices.size() > limit) indices.resize(limit);
  const auto records = emit_cam(ckpt.params, data, indices, out);
  double worst = 0.0;
  for (const CamRecord& r : records) worst = std::max(worst, r.gap_identity_error);
  std::cout << "wrote " << records.size() << " heatmaps to " << out
            << "; max gap_identity_error " << worst << "\n";
}

void cmd_sweep(const std::string& config_path, const std::vector<std::string>& vary,
               const std::string& out) {
  const ExperimentConfig base = load_config(config_path);
  std::vector<SweepAxis> axes;
  for (const std::string& v : vary) axes.push_back(parse_sweep_axis(v));
  const auto all = run_sweep(base, axes, out, &std::cout);
  std::cout << "wrote " << all.size() << " runs to " << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-branch mixing-augmentation training with cross and ensemble distillation"};
  app.require_subcommand(1);

  std::string spec_path, config_path, out, data_dir, ckpt_path, method = "snapmix";
  std::uint64_t seed = 0;
  std::size_t count = 16, limit = 0;
  std::optional<double> alpha;
  double prob = 1.0;
  std::vector<std::string> vary;

  auto* gen = app.add_subcommand("generate-data", "Render the synthetic dataset to a directory");
  gen->add_option("--spec", spec_path, "Dataset spec JSON (defaults when omitted)");
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train from a config file");
  train->add_option("--config", config_path, "Experiment config JSON")->required();
  train->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Test accuracy of a checkpoint");
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset directory")->required();

  auto* preview = app.add_subcommand("augment-preview", "Write mixed images and their label weights");
  preview->add_option("--method", method, "mixup, cutmix or snapmix")->required();
  preview->add_option("--data", data_dir, "Dataset directory")->required();
  preview->add_option("--out", out, "Output directory")->required();
  preview->add_option("--seed", seed, "Sampling seed")->required();
  preview->add_option("--alpha", alpha, "Beta concentration (default 5, cutmix 3)");
  preview->add_option("--prob", prob, "Mixing probability")->capture_default_str();
  preview->add_option("--count", count, "Number of images")->capture_default_str();
  preview->add_option("--checkpoint", ckpt_path,
                      "Network supplying SnapMix CAMs (freshly initialized when omitted)");

  auto* camc = app.add_subcommand("cam", "Write CAM heatmaps for the test split");
  camc->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  camc->add_option("--data", data_dir, "Dataset directory")->required();
  camc->add_option("--out", out, "Output directory")->required();
  camc->add_option("--limit", limit, "Maximum number of images (0 = all)");

  auto* sweep = app.add_subcommand("sweep", "Train the Cartesian product of --vary settings");
  sweep->add_option("--config", config_path, "Base experiment config JSON")->required();
  sweep->add_option("--vary", vary, "key=v1,v2,... (lambda1, variant, seed, temperature)")
      ->required();
  sweep->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) cmd_generate(spec_path, out);
    else if (*train) cmd_train(config_path, out);
    else if (*eval) cmd_eval(ckpt_path, data_dir);
    else if (*preview) cmd_preview(method, alpha, prob, data_dir, out, seed, ckpt_path, count);
    else if (*camc) cmd_cam(ckpt_path, data_dir, out, limit);
    else if (*sweep) cmd_sweep(config_path, vary, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
