#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cekd/augment.hpp"
#include "cekd/numerics.hpp"
#include "cekd/tensor.hpp"

namespace cekd {

// Logits convention for one training step. The h1 batch is mixed with the
// teacher's method and the h2 batch with the student's; both mix the same
// image pairs.
//   t1 = teacher(h1)   t2 = teacher(h2)   s1 = student(h2)   s2 = student(h1)
struct LogitsQuad {
  Tensor t1, t2, s1, s2;

  void validate() const {
    if (t1.rank() != 2) throw std::invalid_argument("LogitsQuad: expected [N, c] logits");
    t1.require_same_shape(t2, "LogitsQuad");
    t1.require_same_shape(s1, "LogitsQuad");
    t1.require_same_shape(s2, "LogitsQuad");
  }
};

/// Row-wise minimum ensembles: e1 over {t1, s2} (h1 group), e2 over {s1, t2}
/// (h2 group).
struct EnsemblePair {
  Tensor e1, e2;
};

/// Ground-truth side of one mixed batch.
struct MixLabels {
  std::vector<std::size_t> label_a, label_b;
  std::vector<double> w_a, w_b;

  static MixLabels from(const MixedBatch& batch) {
    return {batch.label_a, batch.label_b, batch.w_a, batch.w_b};
  }
  static MixLabels hard(const std::vector<std::size_t>& labels) {
    return {labels, labels, std::vector<double>(labels.size(), 1.0),
            std::vector<double>(labels.size(), 0.0)};
  }
  std::size_t size() const { return label_a.size(); }
};

struct LossWeights {
  std::array<double, 6> lambda{0.7, 0.3, 0.5, 0.5, 0.5, 0.5};
  double temperature = 4.0;
  double ce_weight = 1.0;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("LossWeights: temperature must be positive");
    for (double l : lambda)
      if (!(l >= 0.0)) throw std::invalid_argument("LossWeights: lambdas must be nonnegative");
    if (!(ce_weight >= 0.0)) throw std::invalid_argument("LossWeights: ce_weight must be nonnegative");
  }
};

struct LossBreakdown {
  double kd_h1 = 0.0, kd_h2 = 0.0;
  double kd_t1 = 0.0, kd_t2 = 0.0, kd_s1 = 0.0, kd_s2 = 0.0;
  double ce_teacher_h1 = 0.0, ce_teacher_h2 = 0.0;
  double ce_student_h1 = 0.0, ce_student_h2 = 0.0;
  double total_teacher = 0.0, total_student = 0.0;

  /// Teacher objective: its CE terms plus the KD terms whose prediction side
  /// is a teacher output (h2 cross term, t1 and t2 ensemble terms).
  static double teacher_sum(const LossBreakdown& b, const LossWeights& w) {
    return w.ce_weight * (b.ce_teacher_h1 + b.ce_teacher_h2) + w.lambda[1] * b.kd_h2 +
           w.lambda[2] * b.kd_t1 + w.lambda[3] * b.kd_t2;
  }
  /// Student objective, symmetric to `teacher_sum`.
  static double student_sum(const LossBreakdown& b, const LossWeights& w) {
    return w.ce_weight * (b.ce_student_h1 + b.ce_student_h2) + w.lambda[0] * b.kd_h1 +
           w.lambda[4] * b.kd_s1 + w.lambda[5] * b.kd_s2;
  }
};

/// d(total)/d(logits) for each of the four outputs.
struct QuadGradients {
  Tensor t1, t2, s1, s2;
};

namespace detail {

inline void require_logits_pair(const Tensor& a, const Tensor& b, const char* where) {
  if (a.rank() != 2) throw std::invalid_argument(std::string(where) + ": expected [N, c] logits");
  a.require_same_shape(b, where);
}

}  // namespace detail

/// (1/N) sum_i T^2 KL(softmax(target_i / T) || softmax(pred_i / T)). The
/// target is a constant; when `dpred` is given, the gradient with respect to
/// pred scaled by `scale` is accumulated into it:
///   d/dpred = (T / N) (softmax(pred / T) - softmax(target / T)).
inline double kd_loss(const Tensor& target, const Tensor& pred, double temperature,
                      Tensor* dpred = nullptr, double scale = 1.0) {
  detail::require_logits_pair(target, pred, "kd_loss");
  if (!(temperature > 0.0)) throw std::invalid_argument("kd_loss: temperature must be positive");
  const std::size_t n = target.dim(0), c = target.dim(1);
  std::vector<double> p(c), q(c), log_p(c), log_q(c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    softmax_into(target.slice(i), temperature, p);
    log_softmax_into(target.slice(i), temperature, log_p);
    log_softmax_into(pred.slice(i), temperature, log_q);
    double kl = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (p[j] > 0.0) kl += p[j] * (log_p[j] - log_q[j]);
    total += kl;
    if (dpred != nullptr) {
      softmax_into(pred.slice(i), temperature, q);
      auto d = dpred->slice(i);
      const double g = scale * temperature / static_cast<double>(n);
      for (std::size_t j = 0; j < c; ++j) d[j] += g * (q[j] - p[j]);
    }
  }
  return temperature * temperature * total / static_cast<double>(n);
}

/// Cross distillation pair: teacher's h1 output supervises the student's h1
/// output (kd_h1 = KD(t1 -> s2)) and the student's h2 output supervises the
/// teacher's h2 output (kd_h2 = KD(s1 -> t2)).
inline std::pair<double, double> cross_kd(const LogitsQuad& quad, double temperature) {
  quad.validate();
  return {kd_loss(quad.t1, quad.s2, temperature), kd_loss(quad.s1, quad.t2, temperature)};
}

/// Elementwise minimum on raw logits, per sample and class.
inline EnsemblePair ensemble_logits(const LogitsQuad& quad) {
  quad.validate();
  EnsemblePair out{Tensor(quad.t1.shape()), Tensor(quad.t1.shape())};
  for (std::size_t i = 0; i < quad.t1.size(); ++i) {
    out.e1[i] = std::min(quad.t1[i], quad.s2[i]);
    out.e2[i] = std::min(quad.s1[i], quad.t2[i]);
  }
  return out;
}

struct EnsembleKd {
  double t1 = 0.0, t2 = 0.0, s1 = 0.0, s2 = 0.0;
};

inline EnsembleKd ensemble_kd(const LogitsQuad& quad, const EnsemblePair& pair,
                              double temperature) {
  quad.validate();
  quad.t1.require_same_shape(pair.e1, "ensemble_kd");
  quad.t1.require_same_shape(pair.e2, "ensemble_kd");
  return {kd_loss(pair.e1, quad.t1, temperature), kd_loss(pair.e2, quad.t2, temperature),
          kd_loss(pair.e2, quad.s1, temperature), kd_loss(pair.e1, quad.s2, temperature)};
}

/// (1/N) sum_i [w_a CE(logits_i, y_a) + w_b CE(logits_i, y_b)] with
/// CE = -log softmax. Accumulates scale * d/dlogits into `dlogits` if given.
inline double mixed_ce(const Tensor& logits, const MixLabels& labels, Tensor* dlogits = nullptr,
                       double scale = 1.0) {
  if (logits.rank() != 2) throw std::invalid_argument("mixed_ce: expected [N, c] logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.label_a.size() != n || labels.label_b.size() != n || labels.w_a.size() != n ||
      labels.w_b.size() != n)
    throw std::invalid_argument("mixed_ce: label arrays must have one entry per row");
  std::vector<double> log_p(c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ya = labels.label_a[i], yb = labels.label_b[i];
    if (ya >= c || yb >= c)
      throw std::invalid_argument("mixed_ce: label out of range at row " + std::to_string(i));
    log_softmax_into(logits.slice(i), 1.0, log_p);
    const double wa = labels.w_a[i], wb = labels.w_b[i];
    total += -wa * log_p[ya] - wb * log_p[yb];
    if (dlogits != nullptr) {
      auto d = dlogits->slice(i);
      const double g = scale / static_cast<double>(n);
      for (std::size_t j = 0; j < c; ++j) d[j] += g * (wa + wb) * std::exp(log_p[j]);
      d[ya] -= g * wa;
      d[yb] -= g * wb;
    }
  }
  return total / static_cast<double>(n);
}

inline double mixed_ce(const Tensor& logits, const std::vector<std::size_t>& label_a,
                       const std::vector<std::size_t>& label_b, const std::vector<double>& w_a,
                       const std::vector<double>& w_b) {
  return mixed_ce(logits, MixLabels{label_a, label_b, w_a, w_b});
}

/// Distillation targets frozen at the current logits: the cross-distillation
/// supervisors t1 and s1 and the two ensembles. Holding these fixed is what
/// keeps each network's loss free of gradient through the other network.
struct DistillTargets {
  Tensor t1, s1;
  EnsemblePair ensemble;

  static DistillTargets from(const LogitsQuad& quad) {
    return {quad.t1, quad.s1, ensemble_logits(quad)};
  }
};

/// Every term of the weighted objective against fixed targets. Fills `grads`
/// (gradient of total_teacher wrt t1, t2 and of total_student wrt s1, s2)
/// when non-null.
inline LossBreakdown total_loss(const LogitsQuad& quad, const DistillTargets& targets,
                                const MixLabels& h1, const MixLabels& h2,
                                const LossWeights& weights, QuadGradients* grads = nullptr) {
  quad.validate();
  weights.validate();
  const double temp = weights.temperature;
  const auto& lambda = weights.lambda;
  if (grads != nullptr) {
    *grads = {Tensor(quad.t1.shape()), Tensor(quad.t1.shape()), Tensor(quad.t1.shape()),
              Tensor(quad.t1.shape())};
  }
  auto g = [grads](Tensor QuadGradients::*member) -> Tensor* {
    return grads != nullptr ? &(grads->*member) : nullptr;
  };

  LossBreakdown b;
  b.ce_teacher_h1 = mixed_ce(quad.t1, h1, g(&QuadGradients::t1), weights.ce_weight);
  b.ce_teacher_h2 = mixed_ce(quad.t2, h2, g(&QuadGradients::t2), weights.ce_weight);
  b.ce_student_h2 = mixed_ce(quad.s1, h2, g(&QuadGradients::s1), weights.ce_weight);
  b.ce_student_h1 = mixed_ce(quad.s2, h1, g(&QuadGradients::s2), weights.ce_weight);

  // A zero coefficient switches its term off entirely, so ablated terms are
  // recorded as exactly 0.
  auto kd = [&](double coef, const Tensor& target, const Tensor& pred, Tensor* d) {
    return coef > 0.0 ? kd_loss(target, pred, temp, d, coef) : 0.0;
  };
  b.kd_h1 = kd(lambda[0], targets.t1, quad.s2, g(&QuadGradients::s2));
  b.kd_h2 = kd(lambda[1], targets.s1, quad.t2, g(&QuadGradients::t2));
  b.kd_t1 = kd(lambda[2], targets.ensemble.e1, quad.t1, g(&QuadGradients::t1));
  b.kd_t2 = kd(lambda[3], targets.ensemble.e2, quad.t2, g(&QuadGradients::t2));
  b.kd_s1 = kd(lambda[4], targets.ensemble.e2, quad.s1, g(&QuadGradients::s1));
  b.kd_s2 = kd(lambda[5], targets.ensemble.e1, quad.s2, g(&QuadGradients::s2));

  b.total_teacher = LossBreakdown::teacher_sum(b, weights);
  b.total_student = LossBreakdown::student_sum(b, weights);
  return b;
}

inline LossBreakdown total_loss(const LogitsQuad& quad, const MixLabels& h1, const MixLabels& h2,
                                const LossWeights& weights, QuadGradients* grads = nullptr) {
  return total_loss(quad, DistillTargets::from(quad), h1, h2, weights, grads);
}

}  // namespace cekd
