#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cekd/numerics.hpp"
#include "cekd/rng.hpp"
#include "cekd/tensor.hpp"

namespace cekd {

enum class MixKind { MixUp, CutMix, SnapMix };

inline std::string_view to_string(MixKind kind) {
  switch (kind) {
    case MixKind::MixUp: return "mixup";
    case MixKind::CutMix: return "cutmix";
    case MixKind::SnapMix: return "snapmix";
  }
  return "unknown";
}

inline std::optional<MixKind> parse_mix_kind(std::string_view name) {
  if (name == "mixup") return MixKind::MixUp;
  if (name == "cutmix") return MixKind::CutMix;
  if (name == "snapmix") return MixKind::SnapMix;
  return std::nullopt;
}

/// Beta concentration and mixing probability used when a method is named
/// without them.
inline double default_alpha(MixKind kind) { return kind == MixKind::CutMix ? 3.0 : 5.0; }
inline double default_apply_prob(MixKind kind) { return kind == MixKind::MixUp ? 0.5 : 1.0; }

struct MixMethod {
  MixKind kind = MixKind::MixUp;
  double alpha = 1.0;       // Beta(alpha, alpha) parameter
  double apply_prob = 1.0;  // chance that a given sample is mixed

  void validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("MixMethod: alpha must be positive");
    if (!(apply_prob >= 0.0 && apply_prob <= 1.0))
      throw std::invalid_argument("MixMethod: apply_prob must lie in [0, 1]");
  }
};

/// Half-open pixel box [y0, y1) x [x0, x1); the binary mask is 1 inside.
struct BoxMask {
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;

  std::size_t height() const { return y1 - y0; }
  std::size_t width() const { return x1 - x0; }
  std::size_t area() const { return height() * width(); }
  bool empty() const { return area() == 0; }
  bool contains(std::size_t y, std::size_t x) const {
    return y >= y0 && y < y1 && x >= x0 && x < x1;
  }
  double area_ratio(std::size_t h, std::size_t w) const {
    return static_cast<double>(area()) / static_cast<double>(h * w);
  }

  friend bool operator==(const BoxMask&, const BoxMask&) = default;
};

struct MixedSample {
  Tensor image;  // [C,H,W]
  std::size_t label_a = 0;
  std::size_t label_b = 0;
  double w_a = 1.0;
  double w_b = 0.0;
  MixKind method = MixKind::MixUp;
};

/// Nonnegative map over [H,W] summing to one.
struct SemanticMap {
  Tensor values;
};

namespace detail {

inline void require_image(const Tensor& t, const char* where) {
  if (t.rank() != 3) throw std::invalid_argument(std::string(where) + ": expected [C,H,W]");
}

inline double box_mass(const Tensor& map, const BoxMask& box) {
  double mass = 0.0;
  for (std::size_t y = box.y0; y < box.y1; ++y)
    for (std::size_t x = box.x0; x < box.x1; ++x) mass += map(y, x);
  return mass;
}

// Clips [start, start + len) to [0, extent). A side spanning the whole axis
// always covers it.
inline std::pair<std::size_t, std::size_t> clip_span(long center, long len, long extent) {
  if (len >= extent) return {0, static_cast<std::size_t>(extent)};
  const long lo = std::clamp(center - len / 2, 0L, extent);
  const long hi = std::clamp(center - len / 2 + len, 0L, extent);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

inline MixedSample mixup(const Tensor& xa, const Tensor& xb, double lambda) {
  xa.require_same_shape(xb, "mixup");
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("mixup: lambda must lie in [0, 1]");
  MixedSample out;
  out.image = Tensor(xa.shape());
  for (std::size_t i = 0; i < xa.size(); ++i)
    out.image[i] = lambda * xa[i] + (1.0 - lambda) * xb[i];
  out.w_a = lambda;
  out.w_b = 1.0 - lambda;
  out.method = MixKind::MixUp;
  return out;
}

/// Box of side round(H sqrt(lambda)) x round(W sqrt(lambda)) centred at
/// (cy, cx), clipped to the image.
inline BoxMask box_at(std::size_t h, std::size_t w, double lambda, std::size_t cy,
                      std::size_t cx) {
  if (h == 0 || w == 0) throw std::invalid_argument("box: image extents must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("box: lambda must lie in [0, 1]");
  const double side = std::sqrt(lambda);
  const long bh = std::lround(static_cast<double>(h) * side);
  const long bw = std::lround(static_cast<double>(w) * side);
  if (bh == 0 || bw == 0) return {};
  auto [y0, y1] = detail::clip_span(static_cast<long>(cy), bh, static_cast<long>(h));
  auto [x0, x1] = detail::clip_span(static_cast<long>(cx), bw, static_cast<long>(w));
  return {y0, x0, y1, x1};
}

/// Box with area ratio ~lambda and a uniformly drawn centre. The effective
/// ratio after clipping is `box.area_ratio(h, w)`.
inline BoxMask sample_box(std::size_t h, std::size_t w, double lambda, RngStream& rng) {
  const std::size_t cy = rng.uniform_index(h);
  const std::size_t cx = rng.uniform_index(w);
  return box_at(h, w, lambda, cy, cx);
}

inline MixedSample cutmix(const Tensor& xa, const Tensor& xb, const BoxMask& box) {
  xa.require_same_shape(xb, "cutmix");
  detail::require_image(xa, "cutmix");
  const std::size_t c = xa.dim(0), h = xa.dim(1), w = xa.dim(2);
  if (box.y1 > h || box.x1 > w || box.y0 > box.y1 || box.x0 > box.x1)
    throw std::invalid_argument("cutmix: box outside image bounds");
  MixedSample out;
  out.image = xa;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = box.y0; y < box.y1; ++y)
      for (std::size_t x = box.x0; x < box.x1; ++x) out.image(ch, y, x) = xb(ch, y, x);
  out.w_b = box.area_ratio(h, w);
  out.w_a = 1.0 - out.w_b;
  out.method = MixKind::CutMix;
  return out;
}

/// Clamps a CAM to nonnegative values and normalizes it to unit mass; falls
/// back to the uniform map when nothing positive remains.
inline SemanticMap semantic_map(const Tensor& cam) {
  if (cam.rank() != 2) throw std::invalid_argument("semantic_map: expected [H,W]");
  Tensor values(cam.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < cam.size(); ++i) {
    values[i] = std::max(cam[i], 0.0);
    total += values[i];
  }
  if (!(total > 0.0) || !std::isfinite(total)) {
    values.fill(1.0 / static_cast<double>(cam.size()));
    return {std::move(values)};
  }
  for (double& v : values.values()) v /= total;
  return {std::move(values)};
}

/// Bilinear resize of [C,h,w] to [C,target_h,target_w] with corner-aligned
/// sampling (first and last samples land on the source corners).
inline Tensor region_transform(const Tensor& region, std::size_t target_h,
                               std::size_t target_w) {
  detail::require_image(region, "region_transform");
  if (target_h == 0 || target_w == 0)
    throw std::invalid_argument("region_transform: target extents must be positive");
  const std::size_t c = region.dim(0), h = region.dim(1), w = region.dim(2);
  if (h == target_h && w == target_w) return region;

  auto coord = [](std::size_t i, std::size_t src, std::size_t dst) {
    if (dst == 1 || src == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(src - 1) /
           static_cast<double>(dst - 1);
  };
  Tensor out({c, target_h, target_w});
  for (std::size_t ty = 0; ty < target_h; ++ty) {
    const double sy = coord(ty, h, target_h);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t tx = 0; tx < target_w; ++tx) {
      const double sx = coord(tx, w, target_w);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = (1.0 - fx) * region(ch, y0, x0) + fx * region(ch, y0, x1);
        const double bottom = (1.0 - fx) * region(ch, y1, x0) + fx * region(ch, y1, x1);
        out(ch, ty, tx) = (1.0 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

/// Bilinear resize for a single-channel map [h,w].
inline Tensor resize_map(const Tensor& map, std::size_t target_h, std::size_t target_w) {
  if (map.rank() != 2) throw std::invalid_argument("resize_map: expected [H,W]");
  return region_transform(map.reshaped({1, map.dim(0), map.dim(1)}), target_h, target_w)
      .reshaped({target_h, target_w});
}

inline Tensor crop(const Tensor& image, const BoxMask& box) {
  const std::size_t c = image.dim(0);
  Tensor out({c, box.height(), box.width()});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < box.height(); ++y)
      for (std::size_t x = 0; x < box.width(); ++x)
        out(ch, y, x) = image(ch, box.y0 + y, box.x0 + x);
  return out;
}

/// SnapMix with explicit boxes: the `box_b` region of xb is resized into
/// `box_a` of xa. Label weights come from semantic mass, so they need not sum
/// to one. When either box is empty no paste happens and the sample keeps
/// its own label with weight one.
inline MixedSample snapmix_with_boxes(const Tensor& xa, const Tensor& xb,
                                      const SemanticMap& sa, const SemanticMap& sb,
                                      const BoxMask& box_a, const BoxMask& box_b) {
  xa.require_same_shape(xb, "snapmix");
  detail::require_image(xa, "snapmix");
  const Shape spatial{xa.dim(1), xa.dim(2)};
  if (sa.values.shape() != spatial || sb.values.shape() != spatial)
    throw std::invalid_argument("snapmix: semantic maps must match image size");

  MixedSample out;
  out.method = MixKind::SnapMix;
  out.image = xa;
  if (box_a.empty() || box_b.empty()) {
    out.w_a = 1.0;
    out.w_b = 0.0;
    return out;
  }
  const Tensor patch = region_transform(crop(xb, box_b), box_a.height(), box_a.width());
  for (std::size_t ch = 0; ch < xa.dim(0); ++ch)
    for (std::size_t y = 0; y < box_a.height(); ++y)
      for (std::size_t x = 0; x < box_a.width(); ++x)
        out.image(ch, box_a.y0 + y, box_a.x0 + x) = patch(ch, y, x);
  out.w_a = std::clamp(1.0 - detail::box_mass(sa.values, box_a), 0.0, 1.0);
  out.w_b = std::clamp(detail::box_mass(sb.values, box_b), 0.0, 1.0);
  return out;
}

/// SnapMix with lambda_a, lambda_b drawn independently from Beta(alpha, alpha).
inline MixedSample snapmix(const Tensor& xa, const Tensor& xb, const SemanticMap& sa,
                           const SemanticMap& sb, RngStream& rng, double alpha) {
  detail::require_image(xa, "snapmix");
  const std::size_t h = xa.dim(1), w = xa.dim(2);
  const double lambda_a = sample_beta(alpha, rng);
  const double lambda_b = sample_beta(alpha, rng);
  const BoxMask box_a = sample_box(h, w, lambda_a, rng);
  const BoxMask box_b = sample_box(h, w, lambda_b, rng);
  return snapmix_with_boxes(xa, xb, sa, sb, box_a, box_b);
}

/// A batch after mixing. `partner[i]` is the index paired with sample i and
/// `lambda[i]` the Beta draw used for it (NaN when the sample passed through).
struct MixedBatch {
  Tensor images;  // [N,C,H,W]
  std::vector<std::size_t> label_a, label_b;
  std::vector<double> w_a, w_b;
  std::vector<double> lambda;
  std::vector<bool> mixed;
  std::vector<std::size_t> partner;
  MixKind method = MixKind::MixUp;

  std::size_t size() const { return label_a.size(); }
};

/// Uniform random permutation of [0, n) (Fisher-Yates).
inline std::vector<std::size_t> make_pairing(std::size_t n, RngStream rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  return perm;
}

/// Class activation map of `image` for class `label`, at image resolution.
using CamProvider = std::function<Tensor(const Tensor& image, std::size_t label)>;

/// Mixes sample i with sample pairing[i]. Each sample draws from its own
/// child stream, so the result does not depend on evaluation order. Passing
/// the same pairing to two calls mixes identical pairs.
inline MixedBatch apply_augmentation(const Tensor& images,
                                     const std::vector<std::size_t>& labels,
                                     const std::vector<std::size_t>& pairing,
                                     const MixMethod& method,
                                     const CamProvider& cam_provider, RngStream rng) {
  method.validate();
  if (images.rank() != 4) throw std::invalid_argument("apply_augmentation: expected [N,C,H,W]");
  const std::size_t n = images.dim(0);
  if (n == 0 || labels.size() != n || pairing.size() != n)
    throw std::invalid_argument("apply_augmentation: batch, labels and pairing sizes differ");
  if (method.kind == MixKind::SnapMix && !cam_provider)
    throw std::invalid_argument("apply_augmentation: SnapMix requires a CAM provider");

  const std::size_t h = images.dim(2), w = images.dim(3);
  std::vector<Tensor> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) samples.push_back(images.item(i));

  std::vector<SemanticMap> maps;
  if (method.kind == MixKind::SnapMix && method.apply_prob > 0.0) {
    maps.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Tensor cam = cam_provider(samples[i], labels[i]);
      if (cam.shape() != Shape{h, w})
        throw std::invalid_argument("apply_augmentation: CAM provider returned wrong shape");
      maps.push_back(semantic_map(cam));
    }
  }

  MixedBatch out;
  out.images = Tensor(images.shape());
  out.method = method.kind;
  out.label_a.resize(n);
  out.label_b.resize(n);
  out.w_a.resize(n);
  out.w_b.resize(n);
  out.lambda.assign(n, std::numeric_limits<double>::quiet_NaN());
  out.mixed.assign(n, false);
  out.partner = pairing;

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = pairing[i];
    if (j >= n) throw std::invalid_argument("apply_augmentation: pairing index out of range");
    RngStream local = rng.child(i);
    MixedSample m;
    if (local.uniform() < method.apply_prob) {
      switch (method.kind) {
        case MixKind::MixUp: {
          const double lambda = sample_beta(method.alpha, local);
          m = mixup(samples[i], samples[j], lambda);
          out.lambda[i] = lambda;
          break;
        }
        case MixKind::CutMix: {
          const double lambda = sample_beta(method.alpha, local);
          m = cutmix(samples[i], samples[j], sample_box(h, w, lambda, local));
          out.lambda[i] = lambda;
          break;
        }
        case MixKind::SnapMix:
          m = snapmix(samples[i], samples[j], maps[i], maps[j], local, method.alpha);
          break;
      }
      out.mixed[i] = true;
      out.label_a[i] = labels[i];
      out.label_b[i] = labels[j];
      out.w_a[i] = m.w_a;
      out.w_b[i] = m.w_b;
    } else {
      m.image = samples[i];
      out.label_a[i] = out.label_b[i] = labels[i];
      out.w_a[i] = 1.0;
      out.w_b[i] = 0.0;
    }
    std::copy(m.image.values().begin(), m.image.values().end(), out.images.slice(i).begin());
  }
  return out;
}

/// Convenience overload that draws the pairing from `rng` and records it in
/// the result.
inline MixedBatch apply_augmentation(const Tensor& images,
                                     const std::vector<std::size_t>& labels,
                                     const MixMethod& method,
                                     const CamProvider& cam_provider, RngStream rng) {
  if (images.rank() != 4) throw std::invalid_argument("apply_augmentation: expected [N,C,H,W]");
  const auto pairing = make_pairing(images.dim(0), rng.child("pairing"));
  return apply_augmentation(images, labels, pairing, method, cam_provider,
                            rng.child("mix"));
}

}  // namespace cekd
