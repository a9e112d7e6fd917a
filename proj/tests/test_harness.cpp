#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "cekd/harness.hpp"

namespace cekd {
namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("cekd_test_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.dataset.samples_per_class = 12;
  c.dataset.test_per_class = 4;
  c.dataset.image_hw = 16;
  c.dataset.marker_size = 3;
  c.dataset.jitter = 1;
  c.dataset.num_classes = 4;
  c.conv_channels = {4, 6};
  c.pool_after = {true, true};
  c.epochs = 2;
  c.batch_size = 8;
  return c;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::vector<nlohmann::json> out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) out.push_back(nlohmann::json::parse(line));
  return out;
}

class StepFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    config = tiny_config();
    data = generate_synthetic(config.dataset);
    std::vector<std::size_t> idx(data.train.begin(), data.train.begin() + 8);
    batch = {data.stack(idx), data.labels(idx)};
  }
  ExperimentConfig config;
  Dataset data;
  Batch batch;
};

TEST_F(StepFixture, ZeroLambdasLeaveOnlyCrossEntropy) {
  config.loss.lambda.fill(0.0);
  Network t = Network::init(config.net(), 1), s = Network::init(config.net(), 2);
  const StepResult r = train_step(batch, t, &s, config, 0.05, RngStream(3));
  const LossBreakdown& b = r.loss;
  EXPECT_EQ(b.kd_h1, 0.0);
  EXPECT_EQ(b.kd_h2, 0.0);
  EXPECT_EQ(b.kd_t1, 0.0);
  EXPECT_EQ(b.kd_t2, 0.0);
  EXPECT_EQ(b.kd_s1, 0.0);
  EXPECT_EQ(b.kd_s2, 0.0);
  EXPECT_DOUBLE_EQ(b.total_teacher, b.ce_teacher_h1 + b.ce_teacher_h2);
  EXPECT_DOUBLE_EQ(b.total_student, b.ce_student_h1 + b.ce_student_h2);
}

TEST_F(StepFixture, Deterministic) {
  Network t1 = Network::init(config.net(), 1), s1 = Network::init(config.net(), 2);
  Network t2 = t1, s2 = s1;
  for (std::uint64_t k = 0; k < 3; ++k) {
    const StepResult a = train_step(batch, t1, &s1, config, 0.05, RngStream(k));
    const StepResult b = train_step(batch, t2, &s2, config, 0.05, RngStream(k));
    EXPECT_EQ(metrics_json(a.loss), metrics_json(b.loss));
  }
  EXPECT_EQ(t1.params, t2.params);
  EXPECT_EQ(s1.params, s2.params);
}

TEST_F(StepFixture, SharedPairsAcrossBranches) {
  Network t = Network::init(config.net(), 1), s = Network::init(config.net(), 2);
  const StepResult r = train_step(batch, t, &s, config, 0.05, RngStream(4));
  EXPECT_EQ(r.h1.partner, r.h2.partner);
  EXPECT_EQ(r.h1.method, MixKind::SnapMix);
  EXPECT_EQ(r.h2.method, MixKind::MixUp);
}

TEST_F(StepFixture, RoutingOnFrozenCopy) {
  // With the targets frozen, the teacher total does not depend on student
  // parameters and vice versa; each network's step follows its own gradient.
  const Network t = Network::init(config.net(), 1), s = Network::init(config.net(), 2);
  const auto pairing = make_pairing(batch.size(), RngStream(5));
  const CamProvider cams = [&](const Tensor& img, std::size_t y) { return image_cam(t.params, img, y); };
  const MixedBatch h1 = apply_augmentation(batch.images, batch.labels, pairing,
                                           config.teacher_method, cams, RngStream(6));
  const MixedBatch h2 = apply_augmentation(batch.images, batch.labels, pairing,
                                           config.student_method, cams, RngStream(7));
  const BranchGradients g = cekd_gradients(t.params, s.params, h1, h2, config.loss);
  const DistillTargets frozen = DistillTargets::from(g.quad);

  const Tensor student_flat = s.params.flatten();
  const ScalarFunction teacher_total_of_student = [&](std::span<const double> v) {
    Params q = s.params;
    q.assign_flat(v);
    return cekd_gradients(t.params, q, h1, h2, config.loss, &frozen).loss.total_teacher;
  };
  RngStream rng(8);
  std::vector<std::size_t> coords;
  for (int i = 0; i < 40; ++i) coords.push_back(rng.uniform_index(student_flat.size()));
  const Tensor leak = finite_diff_gradient(teacher_total_of_student, student_flat, 1e-5, coords);
  for (std::size_t i : coords) EXPECT_EQ(leak[i], 0.0);

  Network t2 = t, s2 = s;
  sgd_step(t2.params, g.teacher, t2.opt, 0.1, 0.0);
  sgd_step(s2.params, g.student, s2.opt, 0.1, 0.0);
  const Tensor dt = t.params.flatten(), dt2 = t2.params.flatten(), gt = g.teacher.flatten();
  for (std::size_t i = 0; i < dt.size(); ++i)
    EXPECT_EQ(dt[i] != dt2[i], gt[i] != 0.0) << "teacher coordinate " << i;
}

TEST_F(StepFixture, SingleModeTouchesOnlyTeacherCe) {
  config.mode = TrainMode::Single;
  Network t = Network::init(config.net(), 1);
  const Params before = t.params;
  const StepResult r = train_step(batch, t, nullptr, config, 0.05, RngStream(9));
  EXPECT_NE(t.params, before);
  EXPECT_GT(r.loss.ce_teacher_h1, 0.0);
  EXPECT_EQ(r.loss.ce_teacher_h2, 0.0);
  EXPECT_EQ(r.loss.total_student, 0.0);
}

TEST_F(StepFixture, RejectsTinyBatch) {
  Network t = Network::init(config.net(), 1), s = Network::init(config.net(), 2);
  const Batch one{batch.images.item(0).reshaped({1, 1, 16, 16}), {batch.labels[0]}};
  EXPECT_THROW(train_step(one, t, &s, config, 0.05, RngStream(1)), std::invalid_argument);
}

TEST(Evaluate, ConstantAndOracleAndEmpty) {
  const ExperimentConfig c = tiny_config();
  const Dataset d = generate_synthetic(c.dataset);
  const double constant = evaluate([](const Tensor&) { return std::size_t{2}; }, d, d.test);
  EXPECT_DOUBLE_EQ(constant, 0.25);  // classes are balanced in the test split

  std::map<const double*, std::size_t> truth;
  for (const Sample& s : d.samples) truth[s.image.data()] = s.label;
  std::size_t k = 0;
  const double oracle = evaluate(
      [&](const Tensor&) { return d.samples[d.test[k++]].label; }, d, d.test);
  EXPECT_EQ(oracle, 1.0);
  EXPECT_THROW(evaluate(Network::init(c.net(), 1).params, d, {}), std::invalid_argument);
}

TEST(Evaluate, UntrainedNetNearChanceUnderShuffledLabels) {
  ExperimentConfig c = tiny_config();
  c.dataset.num_classes = 8;
  c.dataset.samples_per_class = 60;
  c.dataset.test_per_class = 30;
  Dataset d = generate_synthetic(c.dataset);
  RngStream rng(10);
  for (Sample& s : d.samples) s.label = rng.uniform_index(8);
  const double acc = evaluate(Network::init(c.net(), 3).params, d, d.test);
  EXPECT_NEAR(acc, 1.0 / 8.0, 0.1);
}

TEST(RunExperiment, UnwritableDirectoryFailsBeforeTraining) {
  const fs::path blocker = scratch_dir("blocker");
  write_file_atomic(blocker, "not a directory");
  EXPECT_THROW(run_experiment(tiny_config(), blocker / "out"), IoError);
  fs::remove(blocker);
}

TEST(RunExperiment, OutputsAndDeterminism) {
  const fs::path a = scratch_dir("run_a"), b = scratch_dir("run_b");
  const ExperimentConfig c = tiny_config();
  const RunSummary s = run_experiment(c, a);
  run_experiment(c, b);
  for (const char* f : {"config.json", "metrics.jsonl", "teacher.ckpt", "student.ckpt", "summary.json"})
    ASSERT_TRUE(fs::exists(a / f)) << f;
  EXPECT_EQ(read_file(a / "metrics.jsonl"), read_file(b / "metrics.jsonl"));
  EXPECT_EQ(read_file(a / "teacher.ckpt"), read_file(b / "teacher.ckpt"));

  const ExperimentConfig resolved = load_config(a / "config.json");
  EXPECT_EQ(resolved, c);

  const auto records = read_jsonl(a / "metrics.jsonl");
  double best = 0.0;
  std::size_t last_step = 0, evals = 0;
  for (const auto& r : records) {
    const LossBreakdown lb = breakdown_from_json(r);
    EXPECT_NEAR(lb.total_teacher, LossBreakdown::teacher_sum(lb, c.loss), 1e-9);
    EXPECT_NEAR(lb.total_student, LossBreakdown::student_sum(lb, c.loss), 1e-9);
    EXPECT_GE(r["step"].get<std::size_t>(), last_step);
    last_step = r["step"].get<std::size_t>();
    if (r["kind"] == "eval") {
      ++evals;
      best = std::max(best, r["teacher_acc"].get<double>());
    }
  }
  EXPECT_EQ(evals, c.epochs);
  const auto summary = nlohmann::json::parse(read_file(a / "summary.json"));
  EXPECT_EQ(summary["best_teacher_acc"].get<double>(), best);
  EXPECT_EQ(s.best_teacher_acc, best);

  const Checkpoint t = load_checkpoint(a / "teacher.ckpt");
  EXPECT_EQ(t.lineage["init_seed"], c.seed_teacher_init);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(RunExperiment, NoKdVariantHasZeroKdEverywhere) {
  const fs::path dir = scratch_dir("no_kd");
  ExperimentConfig c = tiny_config();
  apply_variant(c, "no_kd");
  run_experiment(c, dir);
  for (const auto& r : read_jsonl(dir / "metrics.jsonl"))
    for (const char* k : {"L_KD_h1", "L_KD_h2", "L_KD_t1", "L_KD_t2", "L_KD_s1", "L_KD_s2"})
      EXPECT_EQ(r[k].get<double>(), 0.0);
  fs::remove_all(dir);
}

TEST(EmitCam, SidecarsAndRange) {
  const fs::path dir = scratch_dir("cam");
  const ExperimentConfig c = tiny_config();
  const Dataset d = generate_synthetic(c.dataset);
  Params p = Network::init(c.net(), 4).params;
  for (double& v : p.fc_bias.values()) v = 0.3;
  const std::vector<std::size_t> idx(d.test.begin(), d.test.begin() + 5);
  const auto records = emit_cam(p, d, idx, dir);
  ASSERT_EQ(records.size(), 5u);
  for (const CamRecord& r : records) {
    EXPECT_LT(r.gap_identity_error, 1e-9);
    const Tensor heat = load_pnm(dir / (r.id + ".cam.pgm"));
    EXPECT_EQ(heat.shape(), (Shape{1, 16, 16}));
    const auto side = nlohmann::json::parse(read_file(dir / (r.id + ".cam.json")));
    EXPECT_EQ(side["predicted_class"].get<std::size_t>(), r.predicted);
    EXPECT_EQ(side["logit"].get<double>(), r.logit);
  }
  fs::remove_all(dir);
}

TEST(EmitCam, ZeroClassifierGivesFlatZeroHeatmap) {
  const fs::path dir = scratch_dir("cam_zero");
  const ExperimentConfig c = tiny_config();
  const Dataset d = generate_synthetic(c.dataset);
  Params p = Network::init(c.net(), 5).params;
  p.fc_weight.fill(0.0);
  const auto records = emit_cam(p, d, {d.test.front()}, dir);
  const Tensor heat = load_pnm(dir / (records[0].id + ".cam.pgm"));
  for (double v : heat.values()) EXPECT_EQ(v, 0.0);
  fs::remove_all(dir);
}

TEST(Config, StrictParsingAndOverrides) {
  ExperimentConfig c;
  const auto j = config_to_json(c);
  EXPECT_EQ(config_from_json(j), c);
  auto bad = j;
  bad["learning_rate"] = 0.1;
  EXPECT_THROW(config_from_json(bad), ConfigError);
  bad = j;
  bad["lambdas"] = {1, 2};
  EXPECT_THROW(config_from_json(bad), ConfigError);
  bad = j;
  bad["lambdas"] = {0.7, -0.3, 0.5, 0.5, 0.5, 0.5};
  EXPECT_THROW(config_from_json(bad), ConfigError);
  bad = j;
  bad["teacher_method"] = "cutout";
  EXPECT_THROW(config_from_json(bad), ConfigError);

  const ExperimentConfig cut = config_from_json({{"teacher_method", "cutmix"}});
  EXPECT_EQ(cut.teacher_method.alpha, 3.0);
  EXPECT_EQ(config_from_json({{"student_method", "cutmix"}}).student_method.apply_prob, 1.0);
  EXPECT_EQ(config_from_json({{"teacher_method", "mixup"}}).teacher_method.apply_prob, 0.5);
  EXPECT_EQ(config_from_json({{"teacher_method", "cutmix"}, {"teacher_alpha", 2.0}}).teacher_method.alpha,
            2.0);

  apply_override(c, "lambda1", "0.9");
  EXPECT_DOUBLE_EQ(c.loss.lambda[0], 0.9);
  EXPECT_DOUBLE_EQ(c.loss.lambda[1], 1.0 - 0.9);
  apply_override(c, "seed", "3");
  EXPECT_EQ(c.seed_student_init, 1003u);
  EXPECT_THROW(apply_override(c, "lambda1", "abc"), ConfigError);
  EXPECT_THROW(apply_override(c, "epochs", "3"), ConfigError);
  EXPECT_THROW(apply_variant(c, "mystery"), ConfigError);
}

TEST(Sweep, ExpansionOrderAndNames) {
  const ExperimentConfig base = tiny_config();
  const auto runs = expand_sweep(base, {parse_sweep_axis("seed=1,2"),
                                        parse_sweep_axis("variant=cekd,only_cd,only_ce")});
  ASSERT_EQ(runs.size(), 6u);
  EXPECT_EQ(runs[0].name, "seed=1_variant=cekd");
  EXPECT_EQ(runs[5].name, "seed=2_variant=only_ce");
  EXPECT_EQ(runs[1].config.loss.lambda[2], 0.0);
  EXPECT_EQ(runs[2].config.loss.lambda[0], 0.0);
  EXPECT_THROW(parse_sweep_axis("lambda1"), ConfigError);
  EXPECT_THROW(parse_sweep_axis("lambda1="), ConfigError);
}

TEST(Sweep, LambdaGridWritesEverySummary) {
  const fs::path dir = scratch_dir("sweep");
  ExperimentConfig c = tiny_config();
  c.epochs = 1;
  const auto all = run_sweep(c, {parse_sweep_axis("lambda1=0.1,0.5,0.9")}, dir);
  ASSERT_EQ(all.size(), 3u);
  for (const auto& run : all) {
    const auto summary = nlohmann::json::parse(read_file(dir / run["name"].get<std::string>() / "summary.json"));
    const auto lambdas = summary["lambdas"].get<std::vector<double>>();
    EXPECT_NEAR(lambdas[0] + lambdas[1], 1.0, 1e-12);
  }
  EXPECT_TRUE(fs::exists(dir / "sweep.json"));
  fs::remove_all(dir);
}

TEST(AugmentPreview, WritesImagesAndRecords) {
  const fs::path dir = scratch_dir("preview");
  const ExperimentConfig c = tiny_config();
  const Dataset d = generate_synthetic(c.dataset);
  const MixedBatch b = augment_preview(d, {MixKind::CutMix, 3.0, 1.0},
                                       Network::init(c.net(), 1).params, 4, 6, dir);
  EXPECT_EQ(b.size(), 6u);
  std::istringstream tsv(read_file(dir / "preview.tsv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(tsv, line)) ++rows;
  EXPECT_EQ(rows, 7u);
  EXPECT_TRUE(fs::exists(dir / "000_mixed.pgm"));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace cekd
