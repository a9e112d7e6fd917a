#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cekd/augment.hpp"
#include "cekd/errors.hpp"
#include "cekd/io.hpp"
#include "cekd/pnm.hpp"
#include "cekd/rng.hpp"
#include "cekd/tensor.hpp"

namespace cekd {

using json = nlohmann::json;

/// Parameters of the synthetic fine-grained dataset. Classes share a few
/// global base patterns; within a base, identity is carried by a small
/// marker whose shape and slot vary by class.
struct DatasetSpec {
  std::size_t num_classes = 8;
  std::size_t samples_per_class = 160;
  std::size_t test_per_class = 40;
  std::size_t image_hw = 32;
  std::size_t channels = 1;
  std::size_t marker_size = 5;
  double noise_std = 0.12;
  std::size_t jitter = 2;
  std::uint64_t seed = 7;

  std::size_t num_bases() const { return std::clamp<std::size_t>(num_classes / 4, 1, 4); }

  void validate() const {
    if (num_classes < 2) throw ConfigError("dataset: num_classes must be at least 2");
    if (channels != 1 && channels != 3) throw ConfigError("dataset: channels must be 1 or 3");
    if (image_hw < 8) throw ConfigError("dataset: image_hw must be at least 8");
    if (marker_size == 0 || 2 * marker_size >= image_hw)
      throw ConfigError("dataset: marker_size must be positive and below image_hw / 2");
    if (!(noise_std >= 0.0)) throw ConfigError("dataset: noise_std must be nonnegative");
    if (test_per_class == 0 || test_per_class >= samples_per_class)
      throw ConfigError("dataset: test_per_class must lie in [1, samples_per_class)");
    if (jitter * 4 >= image_hw) throw ConfigError("dataset: jitter too large for image size");
  }

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

inline void to_json(json& j, const DatasetSpec& s) {
  j = json{{"num_classes", s.num_classes}, {"samples_per_class", s.samples_per_class},
           {"test_per_class", s.test_per_class}, {"image_hw", s.image_hw},
           {"channels", s.channels}, {"marker_size", s.marker_size},
           {"noise_std", s.noise_std}, {"jitter", s.jitter}, {"seed", s.seed}};
}

/// Strict parse: unknown keys are rejected, missing keys keep defaults.
inline DatasetSpec dataset_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("dataset spec must be a JSON object");
  DatasetSpec s;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "num_classes") s.num_classes = value.get<std::size_t>();
      else if (key == "samples_per_class") s.samples_per_class = value.get<std::size_t>();
      else if (key == "test_per_class") s.test_per_class = value.get<std::size_t>();
      else if (key == "image_hw") s.image_hw = value.get<std::size_t>();
      else if (key == "channels") s.channels = value.get<std::size_t>();
      else if (key == "marker_size") s.marker_size = value.get<std::size_t>();
      else if (key == "noise_std") s.noise_std = value.get<double>();
      else if (key == "jitter") s.jitter = value.get<std::size_t>();
      else if (key == "seed") s.seed = value.get<std::uint64_t>();
      else throw ConfigError("dataset spec: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("dataset spec: bad value for '" + key + "': " + e.what());
    }
  }
  s.validate();
  return s;
}

inline std::string spec_hash(const DatasetSpec& spec) {
  return hex64(detail::fnv1a(json(spec).dump()));
}

struct Sample {
  Tensor image;  // [C,H,W], values in [0,1]
  std::size_t label = 0;
  std::string id;
};

struct SplitManifest {
  std::vector<std::string> train_ids, test_ids;
  std::uint64_t seed = 0;
  std::string spec_hash;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> samples;
  SplitManifest manifest;
  std::vector<std::size_t> train, test;  // indices into samples

  Tensor stack(const std::vector<std::size_t>& indices) const {
    const Shape& s = samples.at(indices.front()).image.shape();
    Tensor out({indices.size(), s[0], s[1], s[2]});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto v = samples.at(indices[i]).image.values();
      std::copy(v.begin(), v.end(), out.slice(i).begin());
    }
    return out;
  }
  std::vector<std::size_t> labels(const std::vector<std::size_t>& indices) const {
    std::vector<std::size_t> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(samples.at(i).label);
    return out;
  }
};

namespace detail {

struct Canvas {
  std::size_t hw;
  std::vector<double> pixels;

  explicit Canvas(std::size_t size, double fill) : hw(size), pixels(size * size, fill) {}

  void set(long y, long x, double v) {
    if (y < 0 || x < 0 || y >= static_cast<long>(hw) || x >= static_cast<long>(hw)) return;
    pixels[static_cast<std::size_t>(y) * hw + static_cast<std::size_t>(x)] = v;
  }
};

// Large structure shared by every class of a base group.
inline void draw_base(Canvas& c, std::size_t base, long dy, long dx, double level) {
  const double hw = static_cast<double>(c.hw);
  const double cy = hw / 2.0 - 0.5 + static_cast<double>(dy);
  const double cx = hw / 2.0 - 0.5 + static_cast<double>(dx);
  for (std::size_t y = 0; y < c.hw; ++y) {
    for (std::size_t x = 0; x < c.hw; ++x) {
      const double ry = static_cast<double>(y) - cy;
      const double rx = static_cast<double>(x) - cx;
      bool on = false;
      switch (base) {
        case 0: {  // ring
          const double r = std::sqrt(ry * ry + rx * rx);
          on = std::abs(r - 0.36 * hw) < 1.2;
          break;
        }
        case 1: {  // square outline
          const double m = std::max(std::abs(ry), std::abs(rx));
          on = std::abs(m - 0.34 * hw) < 1.0;
          break;
        }
        case 2:  // diamond outline
          on = std::abs(std::abs(ry) + std::abs(rx) - 0.42 * hw) < 1.0;
          break;
        default:  // two horizontal bars
          on = std::abs(std::abs(ry) - 0.33 * hw) < 1.0 && std::abs(rx) < 0.4 * hw;
          break;
      }
      if (on) c.pixels[y * c.hw + x] = level;
    }
  }
}

// Small class marker of side `size` with its top-left corner at (y0, x0).
inline void draw_marker(Canvas& c, std::size_t shape, long y0, long x0, std::size_t size,
                        double level) {
  const long s = static_cast<long>(size);
  const long mid = s / 2;
  for (long y = 0; y < s; ++y) {
    for (long x = 0; x < s; ++x) {
      bool on = false;
      switch (shape % 4) {
        case 0: on = true; break;                                  // filled square
        case 1: on = y == mid || x == mid; break;                  // plus
        case 2: on = y == 0 || x == 0 || y == s - 1 || x == s - 1; break;  // hollow square
        default: on = y == x || y == s - 1 - x; break;             // cross
      }
      if (on) c.set(y0 + y, x0 + x, level);
    }
  }
}

inline Tensor render_sample(const DatasetSpec& spec, std::size_t label, RngStream rng) {
  const std::size_t bases = spec.num_bases();
  const std::size_t base = label % bases;
  const std::size_t within = label / bases;
  const std::size_t shape = within % 4;
  const std::size_t slot = within / 4;

  const long jitter = static_cast<long>(spec.jitter);
  auto offset = [&](RngStream& r) {
    return jitter == 0 ? 0L
                       : static_cast<long>(r.uniform_index(static_cast<std::uint64_t>(2 * jitter + 1))) -
                             jitter;
  };
  const long dy = offset(rng);
  const long dx = offset(rng);

  // Intensity levels vary per sample only when noise is enabled, so a
  // noise-free, jitter-free class renders identically every time.
  const bool vary = spec.noise_std > 0.0;
  auto level = [&](double lo, double span) { return lo + span * (vary ? rng.uniform() : 0.5); };
  Canvas canvas(spec.image_hw, level(0.08, 0.08));
  draw_base(canvas, base, dy, dx, level(0.35, 0.15));

  // Marker slots sit inside the base pattern on the vertical axis, so a
  // horizontal flip never moves a marker into another class's slot.
  const long hw = static_cast<long>(spec.image_hw);
  const long step = hw / 5;
  const long slot_y[] = {-step, step, 0};
  const long size = static_cast<long>(spec.marker_size);
  const long my = hw / 2 + slot_y[slot % 3] - size / 2 + dy;
  const long mx = hw / 2 - size / 2 + dx;
  draw_marker(canvas, shape, my, mx, spec.marker_size, level(0.6, 0.35));

  Tensor image({spec.channels, spec.image_hw, spec.image_hw});
  const double tint[3] = {1.0, 0.85, 0.7};
  for (std::size_t ch = 0; ch < spec.channels; ++ch) {
    const double scale = spec.channels == 1 ? 1.0 : tint[ch];
    for (std::size_t i = 0; i < canvas.pixels.size(); ++i) {
      double v = canvas.pixels[i] * scale;
      if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
      // Stored on the 8-bit grid so image files round-trip exactly.
      image[ch * canvas.pixels.size() + i] = quantize_pixel(v) / 255.0;
    }
  }
  return image;
}

}  // namespace detail

inline std::string sample_id(std::size_t label, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%02zu_%04zu", label, index);
  return buf;
}

/// Deterministic dataset plus train/test split, all derived from spec.seed.
inline Dataset generate_synthetic(const DatasetSpec& spec) {
  spec.validate();
  const RngStream root(spec.seed);
  const RngStream sample_rng = root.child("samples");
  const RngStream split_rng = root.child("split");

  Dataset ds;
  ds.spec = spec;
  ds.manifest.seed = spec.seed;
  ds.manifest.spec_hash = spec_hash(spec);
  for (std::size_t label = 0; label < spec.num_classes; ++label) {
    std::vector<std::size_t> order = make_pairing(spec.samples_per_class, split_rng.child(label));
    std::vector<bool> is_test(spec.samples_per_class, false);
    for (std::size_t t = 0; t < spec.test_per_class; ++t) is_test[order[t]] = true;
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      const std::size_t global = label * spec.samples_per_class + i;
      Sample s{detail::render_sample(spec, label, sample_rng.child(global)), label,
               sample_id(label, i)};
      (is_test[i] ? ds.test : ds.train).push_back(ds.samples.size());
      (is_test[i] ? ds.manifest.test_ids : ds.manifest.train_ids).push_back(s.id);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

/// Writes images/<id>.pgm (or .ppm), labels.tsv and manifest.json.
inline void save_dataset(const Dataset& ds, const fs::path& dir) {
  ensure_writable_dir(dir / "images");
  const char* ext = ds.spec.channels == 1 ? ".pgm" : ".ppm";
  std::set<std::string> test_ids(ds.manifest.test_ids.begin(), ds.manifest.test_ids.end());
  std::ostringstream tsv;
  tsv << "id\tclass\tsplit\n";
  for (const Sample& s : ds.samples) {
    save_pnm(dir / "images" / (s.id + ext), s.image);
    tsv << s.id << '\t' << s.label << '\t' << (test_ids.count(s.id) ? "test" : "train") << '\n';
  }
  write_file_atomic(dir / "labels.tsv", tsv.str());
  json manifest{{"spec", ds.spec},
                {"seed", ds.manifest.seed},
                {"hash", ds.manifest.spec_hash},
                {"train_count", ds.manifest.train_ids.size()},
                {"test_count", ds.manifest.test_ids.size()}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
    ds.spec = dataset_spec_from_json(manifest.at("spec"));
    ds.manifest.seed = manifest.at("seed").get<std::uint64_t>();
    ds.manifest.spec_hash = manifest.at("hash").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError("malformed manifest.json in " + dir.string() + ": " + e.what());
  }
  const char* ext = ds.spec.channels == 1 ? ".pgm" : ".ppm";
  std::istringstream tsv(read_file(dir / "labels.tsv"));
  std::string line;
  std::getline(tsv, line);
  if (line != "id\tclass\tsplit") throw ParseError("labels.tsv: bad header", 0);
  std::set<std::string> seen;
  std::size_t offset = line.size() + 1;
  while (std::getline(tsv, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id, label, split;
    if (!std::getline(row, id, '\t') || !std::getline(row, label, '\t') || !std::getline(row, split))
      throw ParseError("labels.tsv: expected three tab-separated fields", offset);
    if (!seen.insert(id).second) throw ParseError("labels.tsv: duplicate id " + id, offset);
    Sample s;
    s.id = id;
    try {
      s.label = std::stoul(label);
    } catch (const std::exception&) {
      throw ParseError("labels.tsv: bad class '" + label + "'", offset);
    }
    if (s.label >= ds.spec.num_classes) throw ParseError("labels.tsv: class out of range", offset);
    s.image = load_pnm(dir / "images" / (id + ext));
    if (split == "train") {
      ds.train.push_back(ds.samples.size());
      ds.manifest.train_ids.push_back(id);
    } else if (split == "test") {
      ds.test.push_back(ds.samples.size());
      ds.manifest.test_ids.push_back(id);
    } else {
      throw ParseError("labels.tsv: split must be train or test", offset);
    }
    ds.samples.push_back(std::move(s));
    offset += line.size() + 1;
  }
  if (ds.samples.empty()) throw IoError("dataset in " + dir.string() + " is empty");
  return ds;
}

/// Mean and standard deviation over every pixel of the given samples.
inline std::pair<double, double> pixel_stats(const Dataset& ds,
                                             const std::vector<std::size_t>& indices) {
  double sum = 0.0, sq = 0.0, count = 0.0;
  for (std::size_t i : indices) {
    for (double v : ds.samples.at(i).image.values()) {
      sum += v;
      sq += v * v;
    }
    count += static_cast<double>(ds.samples[i].image.size());
  }
  if (count == 0.0) throw std::invalid_argument("pixel_stats: no samples");
  const double mean = sum / count;
  const double var = std::max(0.0, sq / count - mean * mean);
  return {mean, var > 0.0 ? std::sqrt(var) : 1.0};
}

/// One epoch of shuffled mini-batches over `indices`, keyed by
/// (seed, epoch). A trailing batch with fewer than two samples is dropped.
inline std::vector<std::vector<std::size_t>> batch_iter(const std::vector<std::size_t>& indices,
                                                        std::size_t batch_size, std::uint64_t seed,
                                                        std::size_t epoch) {
  if (batch_size < 2) throw std::invalid_argument("batch_iter: batch_size must be at least 2");
  const auto order = make_pairing(indices.size(), RngStream(seed).child("epoch").child(epoch));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (end - start < 2) break;
    std::vector<std::size_t> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(indices[order[i]]);
    batches.push_back(std::move(batch));
  }
  return batches;
}

inline Tensor flip_horizontal(const Tensor& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out(ch, y, x) = image(ch, y, w - 1 - x);
  return out;
}

/// Zero-pads by `pad` on every side and crops the original size back out at
/// offset (oy, ox) of the padded image, oy, ox in [0, 2 pad].
inline Tensor pad_crop(const Tensor& image, std::size_t pad, std::size_t oy, std::size_t ox) {
  if (oy > 2 * pad || ox > 2 * pad) throw std::invalid_argument("pad_crop: offset out of range");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const long sy = static_cast<long>(y + oy) - static_cast<long>(pad);
        const long sx = static_cast<long>(x + ox) - static_cast<long>(pad);
        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w))
          out(ch, y, x) = image(ch, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
  return out;
}

struct TransformDraw {
  bool flip = false;
  std::size_t oy = 0, ox = 0;
};

inline constexpr std::size_t kCropPad = 2;

inline TransformDraw draw_transform(RngStream& rng) {
  TransformDraw d;
  d.flip = rng.uniform() < 0.5;
  d.oy = rng.uniform_index(2 * kCropPad + 1);
  d.ox = rng.uniform_index(2 * kCropPad + 1);
  return d;
}

inline Tensor apply_transform(const Tensor& image, const TransformDraw& d) {
  return pad_crop(d.flip ? flip_horizontal(image) : image, kCropPad, d.oy, d.ox);
}

/// Random horizontal flip (p = 0.5) and random crop under 2-pixel zero padding.
inline Tensor basic_transforms(const Tensor& image, RngStream rng) {
  return apply_transform(image, draw_transform(rng));
}

}  // namespace cekd
