#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "cekd/augment.hpp"
#include "cekd/checkpoint.hpp"
#include "cekd/data.hpp"
#include "cekd/distill.hpp"
#include "cekd/errors.hpp"
#include "cekd/io.hpp"
#include "cekd/model.hpp"

namespace cekd {

enum class TrainMode {
  Cekd,    // teacher + student with the weighted distillation objective
  Single,  // teacher alone, cross-entropy on its own augmentation
};

/// Every knob of one experiment. Serialized as one flat JSON object.
struct ExperimentConfig {
  TrainMode mode = TrainMode::Cekd;
  std::string data_dir;  // empty: generate `dataset` in memory
  DatasetSpec dataset;
  std::vector<std::size_t> conv_channels{8, 16, 16};
  std::vector<bool> pool_after{true, true, true};
  MixMethod teacher_method{MixKind::SnapMix, 5.0, 1.0};
  MixMethod student_method{MixKind::MixUp, 5.0, 0.5};
  LossWeights loss;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double base_lr = 0.05;
  double momentum = 0.9;
  std::size_t lr_decay_every = 25;
  double lr_factor = 0.1;
  std::uint64_t seed_teacher_init = 1;
  std::uint64_t seed_student_init = 1001;
  std::uint64_t seed_train = 1;
  bool basic_transforms = true;
  bool standardize_inputs = true;  // network input (x - mean) / std from the train split
  bool record_wall_time = false;

  NetConfig net() const {
    NetConfig n;
    n.input_channels = dataset.channels;
    n.input_hw = dataset.image_hw;
    n.conv_channels = conv_channels;
    n.pool_after = pool_after;
    n.num_classes = dataset.num_classes;
    return n;
  }

  void validate() const {
    try {
      dataset.validate();
      net().validate();
      teacher_method.validate();
      student_method.validate();
      loss.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (epochs == 0) throw ConfigError("config: epochs must be positive");
    if (batch_size < 2) throw ConfigError("config: batch_size must be at least 2");
    if (!(base_lr > 0.0)) throw ConfigError("config: base_lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("config: momentum must lie in [0, 1)");
    if (!(lr_factor > 0.0)) throw ConfigError("config: lr_factor must be positive");
  }

  friend bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);
};

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  return nlohmann::json{
      {"mode", c.mode == TrainMode::Cekd ? "cekd" : "single"},
      {"data_dir", c.data_dir},
      {"num_classes", c.dataset.num_classes},
      {"samples_per_class", c.dataset.samples_per_class},
      {"test_per_class", c.dataset.test_per_class},
      {"image_hw", c.dataset.image_hw},
      {"channels", c.dataset.channels},
      {"marker_size", c.dataset.marker_size},
      {"noise_std", c.dataset.noise_std},
      {"jitter", c.dataset.jitter},
      {"seed_data", c.dataset.seed},
      {"conv_channels", c.conv_channels},
      {"pool_after", c.pool_after},
      {"teacher_method", to_string(c.teacher_method.kind)},
      {"teacher_alpha", c.teacher_method.alpha},
      {"teacher_prob", c.teacher_method.apply_prob},
      {"student_method", to_string(c.student_method.kind)},
      {"student_alpha", c.student_method.alpha},
      {"student_prob", c.student_method.apply_prob},
      {"temperature", c.loss.temperature},
      {"lambdas", c.loss.lambda},
      {"ce_weight", c.loss.ce_weight},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"base_lr", c.base_lr},
      {"momentum", c.momentum},
      {"lr_decay_every", c.lr_decay_every},
      {"lr_factor", c.lr_factor},
      {"seed_teacher_init", c.seed_teacher_init},
      {"seed_student_init", c.seed_student_init},
      {"seed_train", c.seed_train},
      {"basic_transforms", c.basic_transforms},
      {"standardize_inputs", c.standardize_inputs},
      {"record_wall_time", c.record_wall_time},
  };
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return config_to_json(a) == config_to_json(b);
}

namespace detail {

inline MixKind mix_kind_or_throw(const nlohmann::json& v, const std::string& key) {
  const auto kind = parse_mix_kind(v.get<std::string>());
  if (!kind) throw ConfigError("config: " + key + " must be mixup, cutmix or snapmix");
  return *kind;
}

}  // namespace detail

/// Strict parse of the flat config object. Unknown keys are rejected and
/// absent keys keep their defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "mode") {
        const auto m = v.get<std::string>();
        if (m == "cekd") c.mode = TrainMode::Cekd;
        else if (m == "single") c.mode = TrainMode::Single;
        else throw ConfigError("config: mode must be cekd or single");
      } else if (key == "data_dir") c.data_dir = v.get<std::string>();
      else if (key == "num_classes") c.dataset.num_classes = v.get<std::size_t>();
      else if (key == "samples_per_class") c.dataset.samples_per_class = v.get<std::size_t>();
      else if (key == "test_per_class") c.dataset.test_per_class = v.get<std::size_t>();
      else if (key == "image_hw") c.dataset.image_hw = v.get<std::size_t>();
      else if (key == "channels") c.dataset.channels = v.get<std::size_t>();
      else if (key == "marker_size") c.dataset.marker_size = v.get<std::size_t>();
      else if (key == "noise_std") c.dataset.noise_std = v.get<double>();
      else if (key == "jitter") c.dataset.jitter = v.get<std::size_t>();
      else if (key == "seed_data") c.dataset.seed = v.get<std::uint64_t>();
      else if (key == "conv_channels") c.conv_channels = v.get<std::vector<std::size_t>>();
      else if (key == "pool_after") c.pool_after = v.get<std::vector<bool>>();
      else if (key == "teacher_method") c.teacher_method.kind = detail::mix_kind_or_throw(v, key);
      else if (key == "teacher_alpha") c.teacher_method.alpha = v.get<double>();
      else if (key == "teacher_prob") c.teacher_method.apply_prob = v.get<double>();
      else if (key == "student_method") c.student_method.kind = detail::mix_kind_or_throw(v, key);
      else if (key == "student_alpha") c.student_method.alpha = v.get<double>();
      else if (key == "student_prob") c.student_method.apply_prob = v.get<double>();
      else if (key == "temperature") c.loss.temperature = v.get<double>();
      else if (key == "lambdas") {
        const auto l = v.get<std::vector<double>>();
        if (l.size() != 6) throw ConfigError("config: lambdas must have exactly six entries");
        std::copy(l.begin(), l.end(), c.loss.lambda.begin());
      } else if (key == "ce_weight") c.loss.ce_weight = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "base_lr") c.base_lr = v.get<double>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "lr_decay_every") c.lr_decay_every = v.get<std::size_t>();
      else if (key == "lr_factor") c.lr_factor = v.get<double>();
      else if (key == "seed_teacher_init") c.seed_teacher_init = v.get<std::uint64_t>();
      else if (key == "seed_student_init") c.seed_student_init = v.get<std::uint64_t>();
      else if (key == "seed_train") c.seed_train = v.get<std::uint64_t>();
      else if (key == "basic_transforms") c.basic_transforms = v.get<bool>();
      else if (key == "standardize_inputs") c.standardize_inputs = v.get<bool>();
      else if (key == "record_wall_time") c.record_wall_time = v.get<bool>();
      else throw ConfigError("config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for '" + key + "': " + e.what());
    }
  }
  for (const char* branch : {"teacher", "student"}) {
    const std::string b(branch);
    MixMethod& m = b == "teacher" ? c.teacher_method : c.student_method;
    if (!j.contains(b + "_method")) continue;
    if (!j.contains(b + "_alpha")) m.alpha = default_alpha(m.kind);
    if (!j.contains(b + "_prob")) m.apply_prob = default_apply_prob(m.kind);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  try {
    return config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

/// Named ablations: full objective, cross distillation only, collaborative
/// ensemble only, all KD off (two independent networks), or a lone network.
inline void apply_variant(ExperimentConfig& c, const std::string& variant) {
  if (variant == "cekd") {
    c.mode = TrainMode::Cekd;
  } else if (variant == "only_cd") {
    c.mode = TrainMode::Cekd;
    c.loss.lambda[2] = c.loss.lambda[3] = c.loss.lambda[4] = c.loss.lambda[5] = 0.0;
  } else if (variant == "only_ce") {
    c.mode = TrainMode::Cekd;
    c.loss.lambda[0] = c.loss.lambda[1] = 0.0;
  } else if (variant == "no_kd") {
    c.mode = TrainMode::Cekd;
    c.loss.lambda.fill(0.0);
  } else if (variant == "single") {
    c.mode = TrainMode::Single;
  } else {
    throw ConfigError("unknown variant '" + variant + "' (cekd, only_cd, only_ce, no_kd, single)");
  }
}

/// Applies one `--vary key=value` setting.
inline void apply_override(ExperimentConfig& c, const std::string& key, const std::string& value) {
  auto number = [&]() {
    try {
      std::size_t used = 0;
      const double v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("sweep: '" + value + "' is not a number for " + key);
    }
  };
  if (key == "lambda1") {
    const double l1 = number();
    if (l1 < 0.0 || l1 > 1.0) throw ConfigError("sweep: lambda1 must lie in [0, 1]");
    c.loss.lambda[0] = l1;
    c.loss.lambda[1] = 1.0 - l1;
  } else if (key == "variant") {
    apply_variant(c, value);
  } else if (key == "seed") {
    const auto s = static_cast<std::uint64_t>(number());
    c.seed_teacher_init = s;
    c.seed_student_init = s + 1000;
    c.seed_train = s;
  } else if (key == "temperature") {
    c.loss.temperature = number();
  } else {
    throw ConfigError("sweep: cannot vary '" + key + "' (lambda1, variant, seed, temperature)");
  }
  c.validate();
}

}  // namespace cekd
