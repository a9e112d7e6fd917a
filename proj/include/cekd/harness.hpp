#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "cekd/augment.hpp"
#include "cekd/checkpoint.hpp"
#include "cekd/config.hpp"
#include "cekd/data.hpp"
#include "cekd/distill.hpp"
#include "cekd/errors.hpp"
#include "cekd/io.hpp"
#include "cekd/model.hpp"
#include "cekd/pnm.hpp"

namespace cekd {

/// Parameters plus optimizer state for one branch.
struct Network {
  Params params;
  OptState opt;

  static Network init(const NetConfig& config, std::uint64_t seed) {
    Network n{init_params(config, RngStream(seed).child("init")), {}};
    n.opt = OptState::for_params(n.params);
    return n;
  }
};

struct Batch {
  Tensor images;  // [N,C,H,W]
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

/// Upsampled CAM of `params` for `label`, evaluated on one clean image.
inline Tensor image_cam(const Params& params, const Tensor& image, std::size_t label) {
  const Tensor batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  const ForwardTrace trace = forward(params, batch);
  return resize_map(cam(params, trace, 0, label), image.dim(1), image.dim(2));
}

/// Everything a training step produced, for logging and tests.
struct StepResult {
  LossBreakdown loss;
  MixedBatch h1, h2;
  LogitsQuad quad;
};

namespace detail {

inline void check_finite(const LossBreakdown& b, std::size_t step) {
  const double values[] = {b.kd_h1, b.kd_h2, b.kd_t1, b.kd_t2, b.kd_s1, b.kd_s2,
                           b.ce_teacher_h1, b.ce_teacher_h2, b.ce_student_h1,
                           b.ce_student_h2, b.total_teacher, b.total_student};
  for (double v : values)
    if (!std::isfinite(v))
      throw NumericError("non-finite loss at step " + std::to_string(step), step);
}

inline Params add(Params a, const Params& b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) *ta[i] += *tb[i];
  return a;
}

}  // namespace detail

/// Losses and parameter gradients of both networks for one pair of mixed
/// batches: t1 = T(h1), t2 = T(h2), s1 = S(h2), s2 = S(h1). Targets are
/// taken from `frozen` when given, otherwise from the current logits; either
/// way they are constants, so each gradient only covers its own network's
/// total.
struct BranchGradients {
  LossBreakdown loss;
  LogitsQuad quad;
  Params teacher, student;
};

inline BranchGradients cekd_gradients(const Params& teacher, const Params& student,
                                      const MixedBatch& h1, const MixedBatch& h2,
                                      const LossWeights& weights,
                                      const DistillTargets* frozen = nullptr) {
  const ForwardTrace t1 = forward(teacher, h1.images);
  const ForwardTrace t2 = forward(teacher, h2.images);
  const ForwardTrace s1 = forward(student, h2.images);
  const ForwardTrace s2 = forward(student, h1.images);
  BranchGradients out;
  out.quad = {t1.logits, t2.logits, s1.logits, s2.logits};
  QuadGradients g;
  out.loss = total_loss(out.quad, frozen ? *frozen : DistillTargets::from(out.quad),
                        MixLabels::from(h1), MixLabels::from(h2), weights, &g);
  out.teacher = detail::add(backward(teacher, t1, g.t1), backward(teacher, t2, g.t2));
  out.student = detail::add(backward(student, s1, g.s1), backward(student, s2, g.s2));
  return out;
}

/// One optimization step of the two-branch pipeline:
///   1. one pairing permutation shared by both branches
///   2. flip/crop per sample (optional), teacher CAMs on the clean images
///   3. h1 = teacher_method(pairs), h2 = student_method(pairs), separate draws
///   4. t1 = T(h1), t2 = T(h2), s1 = S(h2), s2 = S(h1)
///   5. weighted loss against detached targets
///   6. each network steps on its own total
/// In single mode only the teacher branch on h1 with cross-entropy runs and
/// `student` may be null.
inline StepResult train_step(const Batch& batch, Network& teacher, Network* student,
                             const ExperimentConfig& config, double lr, RngStream rng,
                             std::size_t step_index = 0) {
  const std::size_t n = batch.size();
  if (n < 2) throw std::invalid_argument("train_step: batch must hold at least two samples");
  const bool single = config.mode == TrainMode::Single;
  if (!single && student == nullptr)
    throw std::invalid_argument("train_step: CEKD mode needs a student network");

  const auto pairing = make_pairing(n, rng.child("pairing"));

  Tensor images = batch.images;
  if (config.basic_transforms) {
    const RngStream tr = rng.child("transform");
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor t = basic_transforms(images.item(i), tr.child(i));
      std::copy(t.values().begin(), t.values().end(), images.slice(i).begin());
    }
  }

  const CamProvider teacher_cam = [&teacher](const Tensor& image, std::size_t label) {
    return image_cam(teacher.params, image, label);
  };

  StepResult result;
  result.h1 = apply_augmentation(images, batch.labels, pairing, config.teacher_method,
                                 teacher_cam, rng.child("h1"));

  if (single) {
    const ForwardTrace trace = forward(teacher.params, result.h1.images);
    Tensor dlogits(trace.logits.shape());
    LossBreakdown& b = result.loss;
    b.ce_teacher_h1 = mixed_ce(trace.logits, MixLabels::from(result.h1), &dlogits, config.loss.ce_weight);
    b.total_teacher = config.loss.ce_weight * b.ce_teacher_h1;
    detail::check_finite(b, step_index);
    sgd_step(teacher.params, backward(teacher.params, trace, dlogits), teacher.opt, lr,
             config.momentum);
    result.quad.t1 = trace.logits;
    return result;
  }

  result.h2 = apply_augmentation(images, batch.labels, pairing, config.student_method,
                                 teacher_cam, rng.child("h2"));

  const BranchGradients g = cekd_gradients(teacher.params, student->params, result.h1,
                                           result.h2, config.loss);
  result.quad = g.quad;
  result.loss = g.loss;
  detail::check_finite(result.loss, step_index);
  sgd_step(teacher.params, g.teacher, teacher.opt, lr, config.momentum);
  sgd_step(student->params, g.student, student->opt, lr, config.momentum);
  return result;
}

/// Top-1 accuracy on clean images.
inline double evaluate(const Params& params, const Dataset& data,
                       const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("evaluate: empty test set");
  constexpr std::size_t kChunk = 128;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const std::vector<std::size_t> chunk(
        indices.begin() + static_cast<std::ptrdiff_t>(start),
        indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + kChunk)));
    const ForwardTrace trace = forward(params, data.stack(chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i)
      if (argmax(trace.logits.slice(i)) == data.samples[chunk[i]].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

/// Accuracy of an arbitrary predictor, for fixtures that are not networks.
inline double evaluate(const std::function<std::size_t(const Tensor&)>& predict,
                       const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::size_t correct = 0;
  for (std::size_t i : indices)
    if (predict(data.samples[i].image) == data.samples[i].label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

inline nlohmann::json metrics_json(const LossBreakdown& b) {
  return nlohmann::json{{"L_KD_h1", b.kd_h1},
                        {"L_KD_h2", b.kd_h2},
                        {"L_KD_t1", b.kd_t1},
                        {"L_KD_t2", b.kd_t2},
                        {"L_KD_s1", b.kd_s1},
                        {"L_KD_s2", b.kd_s2},
                        {"L_CE_teacher_h1", b.ce_teacher_h1},
                        {"L_CE_teacher_h2", b.ce_teacher_h2},
                        {"L_CE_student_h1", b.ce_student_h1},
                        {"L_CE_student_h2", b.ce_student_h2},
                        {"total_teacher", b.total_teacher},
                        {"total_student", b.total_student}};
}

inline LossBreakdown breakdown_from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.kd_h1 = j.at("L_KD_h1").get<double>();
  b.kd_h2 = j.at("L_KD_h2").get<double>();
  b.kd_t1 = j.at("L_KD_t1").get<double>();
  b.kd_t2 = j.at("L_KD_t2").get<double>();
  b.kd_s1 = j.at("L_KD_s1").get<double>();
  b.kd_s2 = j.at("L_KD_s2").get<double>();
  b.ce_teacher_h1 = j.at("L_CE_teacher_h1").get<double>();
  b.ce_teacher_h2 = j.at("L_CE_teacher_h2").get<double>();
  b.ce_student_h1 = j.at("L_CE_student_h1").get<double>();
  b.ce_student_h2 = j.at("L_CE_student_h2").get<double>();
  b.total_teacher = j.at("total_teacher").get<double>();
  b.total_student = j.at("total_student").get<double>();
  return b;
}

struct RunSummary {
  double best_teacher_acc = 0.0, final_teacher_acc = 0.0;
  double best_student_acc = 0.0, final_student_acc = 0.0;
  std::size_t best_teacher_epoch = 0;
  std::size_t steps = 0;
  std::vector<double> teacher_acc_by_epoch, student_acc_by_epoch;
  std::vector<double> teacher_ce_by_epoch;  // mean teacher CE (h1 + h2) over the epoch
};

inline nlohmann::json summary_json(const RunSummary& s, const ExperimentConfig& config) {
  const bool single = config.mode == TrainMode::Single;
  nlohmann::json j{{"mode", single ? "single" : "cekd"},
                   {"epochs", config.epochs},
                   {"steps", s.steps},
                   {"best_teacher_acc", s.best_teacher_acc},
                   {"best_teacher_epoch", s.best_teacher_epoch},
                   {"final_teacher_acc", s.final_teacher_acc},
                   {"teacher_acc_by_epoch", s.teacher_acc_by_epoch},
                   {"teacher_ce_by_epoch", s.teacher_ce_by_epoch},
                   {"lambdas", config.loss.lambda}};
  if (single) {
    j["best_student_acc"] = nullptr;
    j["final_student_acc"] = nullptr;
  } else {
    j["best_student_acc"] = s.best_student_acc;
    j["final_student_acc"] = s.final_student_acc;
    j["student_acc_by_epoch"] = s.student_acc_by_epoch;
  }
  return j;
}

/// Dataset named by the config: loaded from data_dir, or generated.
inline Dataset resolve_dataset(ExperimentConfig& config) {
  if (config.data_dir.empty()) return generate_synthetic(config.dataset);
  Dataset ds = load_dataset(config.data_dir);
  config.dataset = ds.spec;
  config.validate();
  return ds;
}

/// Trains per `config`, writing into `out_dir`:
///   config.json   fully resolved configuration
///   metrics.jsonl one record per step plus one eval record per epoch
///   teacher.ckpt / student.ckpt
///   summary.json  best/final accuracies
/// `progress`, when given, receives one line per epoch.
inline RunSummary run_experiment(ExperimentConfig config, const fs::path& out_dir,
                                 std::ostream* progress = nullptr) {
  config.validate();
  ensure_writable_dir(out_dir);
  const Dataset data = resolve_dataset(config);
  write_file_atomic(out_dir / "config.json", config_to_json(config).dump(2) + "\n");

  const bool single = config.mode == TrainMode::Single;
  NetConfig net = config.net();
  if (config.standardize_inputs)
    std::tie(net.input_mean, net.input_std) = pixel_stats(data, data.train);
  Network teacher = Network::init(net, config.seed_teacher_init);
  std::optional<Network> student;
  if (!single) student = Network::init(net, config.seed_student_init);

  const RngStream train_rng = RngStream(config.seed_train).child("train");
  const auto started = std::chrono::steady_clock::now();
  auto wall_ms = [&]() -> double {
    if (!config.record_wall_time) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
        .count();
  };

  RunSummary summary;
  std::string metrics;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr =
        lr_schedule(epoch, config.base_lr, config.lr_decay_every, config.lr_factor);
    const auto batches = batch_iter(data.train, config.batch_size, config.seed_train, epoch);
    const RngStream epoch_rng = train_rng.child(epoch);
    LossBreakdown mean;
    for (std::size_t b = 0; b < batches.size(); ++b, ++step) {
      const Batch batch{data.stack(batches[b]), data.labels(batches[b])};
      const StepResult r = train_step(batch, teacher, student ? &*student : nullptr, config, lr,
                                      epoch_rng.child(b), step);
      nlohmann::json rec{{"kind", "step"}, {"epoch", epoch}, {"step", step}};
      rec.update(metrics_json(r.loss));
      rec["teacher_acc"] = nullptr;
      rec["student_acc"] = nullptr;
      rec["lr"] = lr;
      rec["wall_ms"] = wall_ms();
      metrics += rec.dump() + "\n";

      const double k = 1.0 / static_cast<double>(batches.size());
      const LossBreakdown& l = r.loss;
      for (auto [dst, src] : {std::pair{&mean.kd_h1, l.kd_h1}, {&mean.kd_h2, l.kd_h2},
                              {&mean.kd_t1, l.kd_t1}, {&mean.kd_t2, l.kd_t2},
                              {&mean.kd_s1, l.kd_s1}, {&mean.kd_s2, l.kd_s2},
                              {&mean.ce_teacher_h1, l.ce_teacher_h1},
                              {&mean.ce_teacher_h2, l.ce_teacher_h2},
                              {&mean.ce_student_h1, l.ce_student_h1},
                              {&mean.ce_student_h2, l.ce_student_h2},
                              {&mean.total_teacher, l.total_teacher},
                              {&mean.total_student, l.total_student}})
        *dst += k * src;
    }

    const double teacher_acc = evaluate(teacher.params, data, data.test);
    const double student_acc = single ? 0.0 : evaluate(student->params, data, data.test);
    summary.teacher_acc_by_epoch.push_back(teacher_acc);
    summary.teacher_ce_by_epoch.push_back(mean.ce_teacher_h1 + mean.ce_teacher_h2);
    if (teacher_acc > summary.best_teacher_acc || epoch == 0) {
      summary.best_teacher_acc = teacher_acc;
      summary.best_teacher_epoch = epoch;
    }
    summary.final_teacher_acc = teacher_acc;
    if (!single) {
      summary.student_acc_by_epoch.push_back(student_acc);
      summary.best_student_acc = std::max(summary.best_student_acc, student_acc);
      summary.final_student_acc = student_acc;
    }

    nlohmann::json rec{{"kind", "eval"}, {"epoch", epoch}, {"step", step}};
    rec.update(metrics_json(mean));
    rec["teacher_acc"] = teacher_acc;
    rec["student_acc"] = single ? nlohmann::json(nullptr) : nlohmann::json(student_acc);
    rec["lr"] = lr;
    rec["wall_ms"] = wall_ms();
    metrics += rec.dump() + "\n";
    write_file_atomic(out_dir / "metrics.jsonl", metrics);

    if (progress != nullptr) {
      *progress << "epoch " << epoch + 1 << "/" << config.epochs << " lr " << lr
                << " teacher_acc " << teacher_acc;
      if (!single) *progress << " student_acc " << student_acc;
      *progress << " teacher_loss " << mean.total_teacher << "\n" << std::flush;
    }
  }
  summary.steps = step;

  auto lineage = [&](const char* role, std::uint64_t init_seed) {
    return nlohmann::json{{"role", role},
                          {"init_seed", init_seed},
                          {"train_seed", config.seed_train},
                          {"data_seed", config.dataset.seed},
                          {"data_hash", data.manifest.spec_hash},
                          {"epochs", config.epochs}};
  };
  save_checkpoint(out_dir / "teacher.ckpt",
                  {teacher.params, lineage("teacher", config.seed_teacher_init)});
  if (!single)
    save_checkpoint(out_dir / "student.ckpt",
                    {student->params, lineage("student", config.seed_student_init)});
  write_file_atomic(out_dir / "summary.json", summary_json(summary, config).dump(2) + "\n");
  return summary;
}

/// Writes a min-max normalized heatmap of the predicted class's CAM for
/// every image, plus a JSON sidecar with the prediction and the GAP
/// identity check mean(raw CAM) == logit - bias.
struct CamRecord {
  std::string id;
  std::size_t predicted = 0;
  double logit = 0.0;
  double bias = 0.0;
  double raw_cam_mean = 0.0;
  double gap_identity_error = 0.0;
};

inline Tensor normalize_heatmap(const Tensor& raw) {
  const auto [lo, hi] = std::minmax_element(raw.values().begin(), raw.values().end());
  Tensor out(raw.shape());
  const double span = *hi - *lo;
  if (!(span > 0.0)) return out;
  for (std::size_t i = 0; i < raw.size(); ++i)
    out[i] = std::clamp((raw[i] - *lo) / span, 0.0, 1.0);
  return out;
}

inline std::vector<CamRecord> emit_cam(const Params& params, const Dataset& data,
                                       const std::vector<std::size_t>& indices,
                                       const fs::path& out_dir) {
  ensure_writable_dir(out_dir);
  std::vector<CamRecord> records;
  for (std::size_t idx : indices) {
    const Sample& s = data.samples.at(idx);
    const Tensor batch = s.image.reshaped({1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
    const ForwardTrace trace = forward(params, batch);
    CamRecord r;
    r.id = s.id;
    r.predicted = argmax(trace.logits.slice(0));
    r.logit = trace.logits(0, r.predicted);
    r.bias = params.fc_bias[r.predicted];
    const Tensor raw = cam(params, trace, 0, r.predicted);
    r.raw_cam_mean = raw.sum() / static_cast<double>(raw.size());
    r.gap_identity_error = std::abs(r.raw_cam_mean - (r.logit - r.bias));

    const Tensor heat = resize_map(normalize_heatmap(raw), s.image.dim(1), s.image.dim(2));
    save_pnm(out_dir / (s.id + ".cam.pgm"), heat.reshaped({1, heat.dim(0), heat.dim(1)}));
    const nlohmann::json sidecar{{"id", r.id},
                                 {"label", s.label},
                                 {"predicted_class", r.predicted},
                                 {"logit", r.logit},
                                 {"bias", r.bias},
                                 {"raw_cam_mean", r.raw_cam_mean},
                                 {"gap_identity_error", r.gap_identity_error}};
    write_file_atomic(out_dir / (s.id + ".cam.json"), sidecar.dump(2) + "\n");
    records.push_back(r);
  }
  return records;
}

/// Mixes the first `count` training images (paired by a seeded permutation)
/// and writes <i>_mixed.pgm plus a preview.tsv row of
/// (index, id_a, id_b, label_a, label_b, w_a, w_b, method) per image.
/// SnapMix draws its semantic maps from `cam_params`.
inline MixedBatch augment_preview(const Dataset& data, const MixMethod& method,
                                  const Params& cam_params, std::uint64_t seed, std::size_t count,
                                  const fs::path& out_dir) {
  method.validate();
  if (data.train.size() < 2) throw std::invalid_argument("augment_preview: need two images");
  ensure_writable_dir(out_dir);
  const std::vector<std::size_t> chosen(
      data.train.begin(),
      data.train.begin() + static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(count, 2, data.train.size())));
  const CamProvider provider = [&cam_params](const Tensor& image, std::size_t label) {
    return image_cam(cam_params, image, label);
  };
  const MixedBatch batch = apply_augmentation(data.stack(chosen), data.labels(chosen), method,
                                              provider, RngStream(seed).child("preview"));
  const char* ext = data.spec.channels == 1 ? ".pgm" : ".ppm";
  std::string tsv = "index\tid_a\tid_b\tlabel_a\tlabel_b\tw_a\tw_b\tmethod\n";
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::string name = (i < 10 ? "00" : i < 100 ? "0" : "") + std::to_string(i) + "_mixed" + ext;
    save_pnm(out_dir / name, batch.images.item(i));
    std::ostringstream row;
    row.precision(17);
    row << i << '\t' << data.samples[chosen[i]].id << '\t'
        << data.samples[chosen[batch.partner[i]]].id << '\t' << batch.label_a[i] << '\t'
        << batch.label_b[i] << '\t' << batch.w_a[i] << '\t' << batch.w_b[i] << '\t'
        << (batch.mixed[i] ? std::string(to_string(batch.method)) : std::string("none")) << '\n';
    tsv += row.str();
  }
  write_file_atomic(out_dir / "preview.tsv", tsv);
  return batch;
}

/// One `--vary key=v1,v2,...` axis.
struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

inline SweepAxis parse_sweep_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw ConfigError("sweep: expected key=v1,v2,... but got '" + spec + "'");
  SweepAxis axis{spec.substr(0, eq), {}};
  std::stringstream ss(spec.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ','))
    if (!v.empty()) axis.values.push_back(v);
  if (axis.values.empty()) throw ConfigError("sweep: no values for " + axis.key);
  return axis;
}

struct SweepRun {
  std::string name;
  std::vector<std::pair<std::string, std::string>> settings;
  ExperimentConfig config;
};

/// Cartesian product of the axes, first axis varying slowest. Every config is
/// validated before any training starts.
inline std::vector<SweepRun> expand_sweep(const ExperimentConfig& base,
                                          const std::vector<SweepAxis>& axes) {
  std::vector<SweepRun> runs{{"", {}, base}};
  for (const SweepAxis& axis : axes) {
    std::vector<SweepRun> next;
    for (const SweepRun& r : runs) {
      for (const std::string& v : axis.values) {
        SweepRun e = r;
        apply_override(e.config, axis.key, v);
        e.settings.emplace_back(axis.key, v);
        e.name += (e.name.empty() ? "" : "_") + axis.key + "=" + v;
        next.push_back(std::move(e));
      }
    }
    runs = std::move(next);
  }
  return runs;
}

/// Runs each expanded config into out_dir/<name>/ and writes
/// out_dir/sweep.json listing every run's settings and summary.
inline nlohmann::json run_sweep(const ExperimentConfig& base, const std::vector<SweepAxis>& axes,
                                const fs::path& out_dir, std::ostream* progress = nullptr) {
  const auto runs = expand_sweep(base, axes);
  ensure_writable_dir(out_dir);
  nlohmann::json all = nlohmann::json::array();
  for (const SweepRun& r : runs) {
    if (progress != nullptr) *progress << "== " << r.name << "\n" << std::flush;
    run_experiment(r.config, out_dir / r.name, nullptr);
    nlohmann::json entry{{"name", r.name},
                         {"summary", nlohmann::json::parse(read_file(out_dir / r.name / "summary.json"))}};
    for (const auto& [k, v] : r.settings) entry["settings"][k] = v;
    all.push_back(entry);
    write_file_atomic(out_dir / "sweep.json", all.dump(2) + "\n");
    if (progress != nullptr)
      *progress << "   final_teacher_acc " << entry["summary"]["final_teacher_acc"] << "\n"
                << std::flush;
  }
  return all;
}

}  // namespace cekd
