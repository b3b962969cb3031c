#pragma once

// Training objectives over score vectors. Every loss returns its value together
// with the analytic gradient with respect to the predictions, so any model that
// can backpropagate an upstream gradient can be trained with it.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sceneiqa/error.hpp"
#include "sceneiqa/stats.hpp"

namespace sceneiqa::losses {

struct ScoreVector {
  std::string scene_id;
  std::vector<double> values;
};

struct NormalizedScores {
  std::vector<double> values;
  double shift = 0.0;  // t(q) = median(q)
  double scale = 0.0;  // s(q) = mean |q - t(q)|; 0 flags a constant input
};

struct LossValue {
  double value = 0.0;
  std::vector<double> grad;  // d value / d prediction, in input order
};

// Relative quality space: (q - median(q)) / mean|q - median(q)|.
// A constant input maps to all zeros with scale 0.
inline NormalizedScores relative_map(std::span<const double> q) {
  if (q.size() < 2) throw ValidationError("relative_map needs at least 2 scores");
  NormalizedScores out;
  out.shift = stats::median(q);
  double acc = 0.0;
  for (double v : q) acc += std::abs(v - out.shift);
  out.scale = acc / static_cast<double>(q.size());
  out.values.assign(q.size(), 0.0);
  if (out.scale > 0.0) {
    for (std::size_t i = 0; i < q.size(); ++i) out.values[i] = (q[i] - out.shift) / out.scale;
  }
  return out;
}

namespace detail {

// Weights of d median / d q_k: one 1 for odd length, two halves for even length.
inline std::vector<double> median_weights(std::span<const double> q) {
  std::vector<std::size_t> order(q.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return q[a] < q[b]; });
  std::vector<double> w(q.size(), 0.0);
  const std::size_t mid = q.size() / 2;
  if (q.size() % 2 == 1) {
    w[order[mid]] = 1.0;
  } else {
    w[order[mid - 1]] += 0.5;
    w[order[mid]] += 0.5;
  }
  return w;
}

inline double sign(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace detail

// Pulls an upstream gradient on relative_map(q).values back onto q.
inline std::vector<double> relative_map_backward(std::span<const double> q, const NormalizedScores& mapped,
                                                 std::span<const double> upstream) {
  const std::size_t n = q.size();
  std::vector<double> grad(n, 0.0);
  if (mapped.scale <= 0.0) return grad;
  const double s = mapped.scale;
  const auto tau = detail::median_weights(q);
  double sign_sum = 0.0, g_sum = 0.0, gr_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = q[i] - mapped.shift;
    sign_sum += detail::sign(r);
    g_sum += upstream[i];
    gr_sum += upstream[i] * r;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double ds = inv_n * (detail::sign(q[k] - mapped.shift) - tau[k] * sign_sum);
    grad[k] = (upstream[k] - tau[k] * g_sum) / s - gr_sum / (s * s) * ds;
  }
  return grad;
}

// Scale-shift invariant loss: per scene, both sides go to relative quality
// space; the loss is the mean absolute deviation over all S*K entries.
inline LossValue ssi_loss(std::span<const ScoreVector> pred, std::span<const ScoreVector> gt) {
  if (pred.size() != gt.size()) throw ValidationError("ssi_loss: prediction and ground-truth group counts differ");
  if (pred.empty()) throw ValidationError("ssi_loss: no scene groups");
  std::size_t total = 0;
  for (std::size_t g = 0; g < pred.size(); ++g) {
    if (pred[g].values.size() != gt[g].values.size()) {
      throw ValidationError("ssi_loss: group " + std::to_string(g) + " has mismatched lengths");
    }
    if (pred[g].values.size() < 2) throw ValidationError("ssi_loss: group " + std::to_string(g) + " has fewer than 2 entries");
    if (!pred[g].scene_id.empty() && !gt[g].scene_id.empty() && pred[g].scene_id != gt[g].scene_id) {
      throw ValidationError("ssi_loss: scene mismatch " + pred[g].scene_id + " vs " + gt[g].scene_id);
    }
    total += pred[g].values.size();
  }
  const double inv_total = 1.0 / static_cast<double>(total);

  LossValue out;
  out.grad.reserve(total);
  for (std::size_t g = 0; g < pred.size(); ++g) {
    const auto p_hat = relative_map(pred[g].values);
    const auto g_hat = relative_map(gt[g].values);
    std::vector<double> upstream(p_hat.values.size());
    for (std::size_t i = 0; i < upstream.size(); ++i) {
      const double d = p_hat.values[i] - g_hat.values[i];
      out.value += std::abs(d) * inv_total;
      upstream[i] = detail::sign(d) * inv_total;
    }
    const auto grad = relative_map_backward(pred[g].values, p_hat, upstream);
    out.grad.insert(out.grad.end(), grad.begin(), grad.end());
  }
  return out;
}

// Merged ranking loss over consecutive pairs (i, i+1):
//   (2/N) * sum_pairs [ exp(pred_i - pred_{i+1}) * [gt_i < gt_{i+1}] + (gt_i - pred_i)^2 ].
inline LossValue merged_rank_loss(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw ValidationError("merged_rank_loss: length mismatch");
  if (pred.size() < 2 || pred.size() % 2 != 0) throw ValidationError("merged_rank_loss: length must be even and >= 2");
  const double factor = 2.0 / static_cast<double>(pred.size());
  LossValue out;
  out.grad.assign(pred.size(), 0.0);
  for (std::size_t i = 0; i < pred.size(); i += 2) {
    const double residual = gt[i] - pred[i];
    out.value += factor * residual * residual;
    out.grad[i] += -2.0 * factor * residual;
    if (gt[i] < gt[i + 1]) {
      const double e = std::exp(pred[i] - pred[i + 1]);
      out.value += factor * e;
      out.grad[i] += factor * e;
      out.grad[i + 1] -= factor * e;
    }
  }
  return out;
}

// 1 when x is at least as good as y.
inline int pair_label(double jod_x, double jod_y) { return jod_x >= jod_y ? 1 : 0; }

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

// Fidelity loss with p_hat = Phi((qx - qy) / sqrt(2)); grad = {d/dqx, d/dqy}.
inline LossValue fidelity_loss(double qx, double qy, int label) {
  if (label != 0 && label != 1) throw ValidationError("fidelity_loss: label must be 0 or 1");
  const double z = (qx - qy) / std::numbers::sqrt2;
  // Evaluate whichever tail the label needs directly so that saturation stays accurate.
  const double prob = label == 1 ? normal_cdf(z) : normal_cdf(-z);
  const double root = std::sqrt(prob);
  LossValue out;
  out.value = 1.0 - root;
  double d_dz = 0.0;
  if (root > 0.0) {
    const double d_prob = (label == 1 ? 1.0 : -1.0) * normal_pdf(z);
    d_dz = -0.5 * d_prob / root;
  }
  const double d_dqx = d_dz / std::numbers::sqrt2;
  out.grad = {d_dqx, -d_dqx};
  return out;
}

// Patch loss: every patch inherits its source image's score. Absolute
// deviation by default; `squared` switches to squared error.
inline LossValue patch_loss(std::span<const double> pred_patches, double gt_score, bool squared = false) {
  if (pred_patches.empty()) throw ValidationError("patch_loss: no patch predictions");
  if (!std::isfinite(gt_score)) throw ValidationError("patch_loss: non-finite ground truth");
  const double inv_n = 1.0 / static_cast<double>(pred_patches.size());
  LossValue out;
  out.grad.resize(pred_patches.size());
  for (std::size_t i = 0; i < pred_patches.size(); ++i) {
    const double r = pred_patches[i] - gt_score;
    if (squared) {
      out.value += r * r * inv_n;
      out.grad[i] = 2.0 * r * inv_n;
    } else {
      out.value += std::abs(r) * inv_n;
      out.grad[i] = detail::sign(r) * inv_n;
    }
  }
  return out;
}

inline constexpr double kDefaultHuberDelta = 0.2;

inline LossValue huber_loss(std::span<const double> pred, std::span<const double> gt, double delta = kDefaultHuberDelta) {
  if (pred.size() != gt.size()) throw ValidationError("huber_loss: length mismatch");
  if (pred.empty()) throw ValidationError("huber_loss: empty input");
  if (!(delta > 0.0)) throw ValidationError("huber_loss: delta must be > 0");
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  LossValue out;
  out.grad.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = pred[i] - gt[i];
    if (std::abs(r) <= delta) {
      out.value += 0.5 * r * r * inv_n;
      out.grad[i] = r * inv_n;
    } else {
      out.value += delta * (std::abs(r) - 0.5 * delta) * inv_n;
      out.grad[i] = delta * detail::sign(r) * inv_n;
    }
  }
  return out;
}

}  // namespace sceneiqa::losses
