#pragma once

// Registration and segmentation losses as fused differentiable ops.

#include <cmath>
#include <vector>

#include "atlas_replay/autodiff.hpp"

namespace atlas_replay {

namespace detail {

// Zero-padded window sum with half-width r; self-adjoint.
inline std::vector<double> box_sum(const std::vector<double>& in, std::size_t H, std::size_t W, std::size_t r) {
  std::vector<double> rows(H * W, 0.0), out(H * W, 0.0);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t x0 = x >= r ? x - r : 0, x1 = std::min(W - 1, x + r);
      double acc = 0.0;
      for (std::size_t k = x0; k <= x1; ++k) acc += in[y * W + k];
      rows[y * W + x] = acc;
    }
  }
  for (std::size_t y = 0; y < H; ++y) {
    const std::size_t y0 = y >= r ? y - r : 0, y1 = std::min(H - 1, y + r);
    for (std::size_t x = 0; x < W; ++x) {
      double acc = 0.0;
      for (std::size_t k = y0; k <= y1; ++k) acc += rows[k * W + x];
      out[y * W + x] = acc;
    }
  }
  return out;
}

}  // namespace detail

/// 1 - mean of squared local normalized cross-correlation over
/// window x window neighbourhoods. Windows are cropped at the border, so
/// statistics use in-image pixels only. 0 means perfect match.
template <class Real>
BasicTensor<Real> loss_ncc(const BasicTensor<Real>& warped, const BasicTensor<Real>& fixed, int window) {
  detail::require_same_shape(warped.shape(), fixed.shape(), "loss_ncc");
  detail::require_rank4(warped.shape(), "loss_ncc");
  if (window < 1 || window % 2 == 0) throw ContractViolation("loss_ncc: window must be a positive odd integer");
  const std::size_t planes = warped.dim(0) * warped.dim(1), H = warped.dim(2), W = warped.dim(3);
  if (static_cast<std::size_t>(window) > H || static_cast<std::size_t>(window) > W) {
    throw InvalidShape("loss_ncc: window " + std::to_string(window) + " larger than image " +
                       shape_string(warped.shape()));
  }
  constexpr double eps = 1e-5;
  const std::size_t r = static_cast<std::size_t>(window) / 2;
  const std::size_t HW = H * W;
  const std::vector<double> count = detail::box_sum(std::vector<double>(HW, 1.0), H, W, r);
  const double total = static_cast<double>(planes * HW);

  // Per-pixel partials of cc w.r.t. the local cross term and both variances.
  struct PlaneCache {
    std::vector<double> dcross, dvar_i, dvar_j, mean_i, mean_j;
  };
  auto caches = std::make_shared<std::vector<PlaneCache>>(planes);
  double cc_sum = 0.0;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    std::vector<double> I(HW), J(HW), II(HW), JJ(HW), IJ(HW);
    for (std::size_t k = 0; k < HW; ++k) {
      I[k] = warped[pl * HW + k];
      J[k] = fixed[pl * HW + k];
      II[k] = I[k] * I[k];
      JJ[k] = J[k] * J[k];
      IJ[k] = I[k] * J[k];
    }
    auto sI = detail::box_sum(I, H, W, r), sJ = detail::box_sum(J, H, W, r);
    auto sII = detail::box_sum(II, H, W, r), sJJ = detail::box_sum(JJ, H, W, r), sIJ = detail::box_sum(IJ, H, W, r);
    auto& c = (*caches)[pl];
    c.dcross.resize(HW);
    c.dvar_i.resize(HW);
    c.dvar_j.resize(HW);
    c.mean_i.resize(HW);
    c.mean_j.resize(HW);
    for (std::size_t k = 0; k < HW; ++k) {
      const double n = count[k];
      const double cross = sIJ[k] - sI[k] * sJ[k] / n;
      const double var_i = sII[k] - sI[k] * sI[k] / n;
      const double var_j = sJJ[k] - sJ[k] * sJ[k] / n;
      const double denom = var_i * var_j + eps;
      cc_sum += cross * cross / denom;
      c.dcross[k] = 2.0 * cross / denom;
      c.dvar_i[k] = -cross * cross * var_j / (denom * denom);
      c.dvar_j[k] = -cross * cross * var_i / (denom * denom);
      c.mean_i[k] = sI[k] / n;
      c.mean_j[k] = sJ[k] / n;
    }
  }
  const double value = 1.0 - cc_sum / total;

  auto backward = [=](Node<Real>& self) {
    auto& pw = *self.parents[0];
    auto& pf = *self.parents[1];
    const double g = -static_cast<double>(self.grad[0]) / total;
    if (pw.requires_grad) pw.ensure_grad();
    if (pf.requires_grad) pf.ensure_grad();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const auto& c = (*caches)[pl];
      // d cross / d I_q = J_q - mean_J(p); d var_i / d I_q = 2 (I_q - mean_I(p)).
      std::vector<double> a(HW), b(HW), e(HW), f(HW);
      for (std::size_t k = 0; k < HW; ++k) {
        a[k] = g * c.dcross[k];
        b[k] = g * c.dcross[k] * c.mean_j[k];
        e[k] = g * c.dvar_i[k];
        f[k] = g * c.dvar_i[k] * c.mean_i[k];
      }
      if (pw.requires_grad) {
        auto A = detail::box_sum(a, H, W, r), B = detail::box_sum(b, H, W, r);
        auto E = detail::box_sum(e, H, W, r), F = detail::box_sum(f, H, W, r);
        for (std::size_t k = 0; k < HW; ++k) {
          const double Iq = pw.value[pl * HW + k], Jq = pf.value[pl * HW + k];
          pw.grad[pl * HW + k] += static_cast<Real>(Jq * A[k] - B[k] + 2.0 * Iq * E[k] - 2.0 * F[k]);
        }
      }
      if (pf.requires_grad) {
        std::vector<double> b2(HW), e2(HW), f2(HW);
        for (std::size_t k = 0; k < HW; ++k) {
          b2[k] = g * c.dcross[k] * c.mean_i[k];
          e2[k] = g * c.dvar_j[k];
          f2[k] = g * c.dvar_j[k] * c.mean_j[k];
        }
        auto A = detail::box_sum(a, H, W, r), B = detail::box_sum(b2, H, W, r);
        auto E = detail::box_sum(e2, H, W, r), F = detail::box_sum(f2, H, W, r);
        for (std::size_t k = 0; k < HW; ++k) {
          const double Iq = pw.value[pl * HW + k], Jq = pf.value[pl * HW + k];
          pf.grad[pl * HW + k] += static_cast<Real>(Iq * A[k] - B[k] + 2.0 * Jq * E[k] - 2.0 * F[k]);
        }
      }
    }
  };
  return detail::make_result<Real>({1}, {static_cast<Real>(value)}, {warped.node(), fixed.node()}, std::move(backward));
}

inline constexpr double kCeClamp = 1e-6;

/// Mean binary cross-entropy; predictions are clamped to [1e-6, 1 - 1e-6]
/// and receive no gradient where the clamp is active.
template <class Real>
BasicTensor<Real> loss_ce(const BasicTensor<Real>& pred, const BasicTensor<Real>& target) {
  detail::require_same_shape(pred.shape(), target.shape(), "loss_ce");
  for (Real t : target.values()) {
    if (t != Real(0) && t != Real(1)) throw ContractViolation("loss_ce: target values must be 0 or 1");
  }
  const double lo = kCeClamp, hi = 1.0 - kCeClamp;
  const double n = static_cast<double>(pred.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pred[i]), lo, hi);
    acc += target[i] == Real(1) ? -std::log(p) : -std::log(1.0 - p);
  }
  auto backward = [=](Node<Real>& self) {
    auto& pp = *self.parents[0];
    auto& pt = *self.parents[1];
    const double g = static_cast<double>(self.grad[0]) / n;
    if (pp.requires_grad) {
      pp.ensure_grad();
      for (std::size_t i = 0; i < pp.value.size(); ++i) {
        const double p = pp.value[i];
        if (p < lo || p > hi) continue;
        const double d = pt.value[i] == Real(1) ? -1.0 / p : 1.0 / (1.0 - p);
        pp.grad[i] += static_cast<Real>(g * d);
      }
    }
    if (pt.requires_grad) {
      // Target is treated as a label; d/dt of the relaxed form log((1-p)/p).
      pt.ensure_grad();
      for (std::size_t i = 0; i < pt.value.size(); ++i) {
        const double p = std::clamp(static_cast<double>(pp.value[i]), lo, hi);
        pt.grad[i] += static_cast<Real>(g * std::log((1.0 - p) / p));
      }
    }
  };
  return detail::make_result<Real>({1}, {static_cast<Real>(acc / n)}, {pred.node(), target.node()},
                                   std::move(backward));
}

/// loss_ce(sigmoid(logits), target) without the clamp: mean of
/// softplus(z) - t*z, gradient (sigmoid(z) - t)/n.
template <class Real>
BasicTensor<Real> loss_ce_logits(const BasicTensor<Real>& logits, const BasicTensor<Real>& target) {
  detail::require_same_shape(logits.shape(), target.shape(), "loss_ce_logits");
  for (Real t : target.values()) {
    if (t != Real(0) && t != Real(1)) throw ContractViolation("loss_ce_logits: target values must be 0 or 1");
  }
  const double n = static_cast<double>(logits.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    acc += softplus - static_cast<double>(target[i]) * z;
  }
  auto backward = [=](Node<Real>& self) {
    auto& pz = *self.parents[0];
    auto& pt = *self.parents[1];
    const double g = static_cast<double>(self.grad[0]) / n;
    if (pz.requires_grad) {
      pz.ensure_grad();
      for (std::size_t i = 0; i < pz.value.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(pz.value[i])));
        pz.grad[i] += static_cast<Real>(g * (s - static_cast<double>(pt.value[i])));
      }
    }
    if (pt.requires_grad) {
      pt.ensure_grad();
      for (std::size_t i = 0; i < pt.value.size(); ++i) pt.grad[i] += static_cast<Real>(-g * pz.value[i]);
    }
  };
  return detail::make_result<Real>({1}, {static_cast<Real>(acc / n)}, {logits.node(), target.node()},
                                   std::move(backward));
}

/// Sum over the x and y directions of the mean squared forward difference,
/// each mean taken over positions and both flow components.
template <class Real>
BasicTensor<Real> loss_smooth(const BasicTensor<Real>& flow) {
  detail::require_rank4(flow.shape(), "loss_smooth");
  const std::size_t planes = flow.dim(0) * flow.dim(1), H = flow.dim(2), W = flow.dim(3);
  if (H < 2 || W < 2) throw InvalidShape("loss_smooth: flow must be at least 2x2");
  const double nx = static_cast<double>(planes * H * (W - 1));
  const double ny = static_cast<double>(planes * (H - 1) * W);
  double sx = 0.0, sy = 0.0;
  const auto& f = flow.values();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const Real* p = f.data() + pl * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x + 1 < W; ++x) {
        const double d = static_cast<double>(p[y * W + x + 1]) - p[y * W + x];
        sx += d * d;
      }
    for (std::size_t y = 0; y + 1 < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double d = static_cast<double>(p[(y + 1) * W + x]) - p[y * W + x];
        sy += d * d;
      }
  }
  auto backward = [=](Node<Real>& self) {
    auto& pf = *self.parents[0];
    if (!pf.requires_grad) return;
    pf.ensure_grad();
    const double g = self.grad[0];
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const Real* p = pf.value.data() + pl * H * W;
      Real* d = pf.grad.data() + pl * H * W;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x + 1 < W; ++x) {
          const double diff = 2.0 * g * (static_cast<double>(p[y * W + x + 1]) - p[y * W + x]) / nx;
          d[y * W + x + 1] += static_cast<Real>(diff);
          d[y * W + x] -= static_cast<Real>(diff);
        }
      for (std::size_t y = 0; y + 1 < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double diff = 2.0 * g * (static_cast<double>(p[(y + 1) * W + x]) - p[y * W + x]) / ny;
          d[(y + 1) * W + x] += static_cast<Real>(diff);
          d[y * W + x] -= static_cast<Real>(diff);
        }
    }
  };
  return detail::make_result<Real>({1}, {static_cast<Real>(sx / nx + sy / ny)}, {flow.node()}, std::move(backward));
}

}  // namespace atlas_replay
