#pragma once

// Classical, non-differentiable 2D image operations used to build and select
// prototypes: rigid resampling, NCC-driven rigid alignment, min-max
// normalization and intensity histograms.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <tuple>
#include <vector>

#include "atlas_replay/errors.hpp"

namespace atlas_replay {

/// Row-major single-channel float image.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}
  Image(std::size_t h, std::size_t w, std::vector<float> data) : height(h), width(w), pixels(std::move(data)) {
    if (pixels.size() != h * w) throw InvalidShape("Image: pixel count does not match extents");
  }

  float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  std::size_t size() const { return pixels.size(); }
  bool same_grid(const Image& o) const { return height == o.height && width == o.width; }

  friend bool operator==(const Image&, const Image&) = default;
};

enum class Interpolation { nearest, bilinear };

/// Rotation by `angle` radians about the image centre, then translation.
struct RigidTransform {
  double angle = 0.0;
  double tx = 0.0;
  double ty = 0.0;

  static RigidTransform identity() { return {}; }
  friend bool operator==(const RigidTransform&, const RigidTransform&) = default;
};

/// compose(outer, inner) applies `inner` first.
inline RigidTransform compose(const RigidTransform& outer, const RigidTransform& inner) {
  const double c = std::cos(outer.angle), s = std::sin(outer.angle);
  return {outer.angle + inner.angle, c * inner.tx - s * inner.ty + outer.tx, s * inner.tx + c * inner.ty + outer.ty};
}

inline RigidTransform inverse(const RigidTransform& t) {
  const double c = std::cos(-t.angle), s = std::sin(-t.angle);
  return {-t.angle, -(c * t.tx - s * t.ty), -(s * t.tx + c * t.ty)};
}

constexpr double kPi = 3.14159265358979323846;
constexpr double degrees(double rad) { return rad * 180.0 / kPi; }
constexpr double radians(double deg) { return deg * kPi / 180.0; }

inline float sample_bilinear(const Image& img, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const double wx = x - fx, wy = y - fy;
  auto px = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(img.height) || xx >= static_cast<long>(img.width)) return 0.0;
    return img.pixels[static_cast<std::size_t>(yy) * img.width + static_cast<std::size_t>(xx)];
  };
  return static_cast<float>((1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x0 + 1)) +
                            wy * ((1 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1)));
}

/// Resamples `image` under `t` by inverse mapping; samples outside read 0.
inline Image apply_rigid(const Image& image, const RigidTransform& t, Interpolation interp) {
  Image out(image.height, image.width);
  const double cx = (static_cast<double>(image.width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(image.height) - 1.0) / 2.0;
  const double c = std::cos(t.angle), s = std::sin(t.angle);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double dx = static_cast<double>(x) - cx - t.tx;
      const double dy = static_cast<double>(y) - cy - t.ty;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      if (interp == Interpolation::bilinear) {
        out.at(y, x) = sample_bilinear(image, sx, sy);
      } else {
        const long ix = static_cast<long>(std::floor(sx + 0.5));
        const long iy = static_cast<long>(std::floor(sy + 0.5));
        if (ix >= 0 && iy >= 0 && ix < static_cast<long>(image.width) && iy < static_cast<long>(image.height)) {
          out.at(y, x) = image.at(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
        }
      }
    }
  }
  return out;
}

/// Pearson correlation of all pixels. Zero if either image is constant.
inline double global_ncc(const Image& a, const Image& b) {
  if (!a.same_grid(b)) throw InvalidShape("global_ncc: grid mismatch");
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a.pixels[i];
    sb += b.pixels[i];
  }
  const double ma = sa / n, mb = sb / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a.pixels[i] - ma, db = b.pixels[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline bool is_constant(const Image& img) {
  if (img.pixels.empty()) return true;
  auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  return *lo == *hi;
}

/// 2x box downsampling (odd trailing row/column dropped).
inline Image downsample2x(const Image& img) {
  Image out(img.height / 2, img.width / 2);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      out.at(y, x) = 0.25f * (img.at(2 * y, 2 * x) + img.at(2 * y, 2 * x + 1) + img.at(2 * y + 1, 2 * x) +
                              img.at(2 * y + 1, 2 * x + 1));
  return out;
}

namespace detail {

struct AlignCandidate {
  RigidTransform t;
  double score = -2.0;

  auto tie_key() const { return std::make_tuple(std::abs(t.angle), std::abs(t.tx), std::abs(t.ty)); }
  bool better_than(const AlignCandidate& o) const {
    if (score != o.score) return score > o.score;
    return tie_key() < o.tie_key();
  }
};

// Evaluates NCC(apply_rigid(moving, t), fixed) with t expressed in
// full-resolution pixels; `scale` maps to the working resolution.
inline AlignCandidate evaluate(const Image& moving, const Image& fixed, const RigidTransform& t, double scale) {
  RigidTransform scaled{t.angle, t.tx * scale, t.ty * scale};
  return {t, global_ncc(apply_rigid(moving, scaled, Interpolation::bilinear), fixed)};
}

inline AlignCandidate grid_search(const Image& moving, const Image& fixed, double scale, const AlignCandidate& centre,
                                  double angle_range, double angle_step, double shift_range, double shift_step,
                                  double shift_limit, double angle_limit) {
  AlignCandidate best = centre;
  const long na = static_cast<long>(std::llround(angle_range / angle_step));
  const long ns = static_cast<long>(std::llround(shift_range / shift_step));
  for (long ia = -na; ia <= na; ++ia) {
    const double a = centre.t.angle + static_cast<double>(ia) * angle_step;
    if (std::abs(a) > angle_limit + 1e-12) continue;
    for (long iy = -ns; iy <= ns; ++iy) {
      const double ty = centre.t.ty + static_cast<double>(iy) * shift_step;
      if (std::abs(ty) > shift_limit + 1e-12) continue;
      for (long ix = -ns; ix <= ns; ++ix) {
        const double tx = centre.t.tx + static_cast<double>(ix) * shift_step;
        if (std::abs(tx) > shift_limit + 1e-12) continue;
        auto cand = evaluate(moving, fixed, {a, tx, ty}, scale);
        if (cand.better_than(best)) best = cand;
      }
    }
  }
  return best;
}

// Coarse search keeping the `keep` best grid points that are not adjacent to
// a better kept point. Distinct peaks are refined separately so one wrong
// coarse basin cannot capture the whole search.
inline std::vector<AlignCandidate> coarse_peaks(const Image& moving, const Image& fixed, double scale,
                                                double angle_limit, double angle_step, double shift_limit,
                                                double shift_step, std::size_t keep) {
  const long na = static_cast<long>(std::llround(angle_limit / angle_step));
  const long ns = static_cast<long>(std::llround(shift_limit / shift_step));
  std::vector<AlignCandidate> all;
  for (long ia = -na; ia <= na; ++ia)
    for (long iy = -ns; iy <= ns; ++iy)
      for (long ix = -ns; ix <= ns; ++ix)
        all.push_back(evaluate(moving, fixed,
                               {static_cast<double>(ia) * angle_step, static_cast<double>(ix) * shift_step,
                                static_cast<double>(iy) * shift_step},
                               scale));
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.better_than(b); });
  std::vector<AlignCandidate> peaks;
  for (const auto& c : all) {
    if (peaks.size() == keep) break;
    bool near = false;
    for (const auto& p : peaks) {
      near = near || (std::abs(c.t.angle - p.t.angle) <= 1.5 * angle_step &&
                      std::abs(c.t.tx - p.t.tx) <= 1.5 * shift_step && std::abs(c.t.ty - p.t.ty) <= 1.5 * shift_step);
    }
    if (!near) peaks.push_back(c);
  }
  return peaks;
}

}  // namespace detail

struct RigidAlignOptions {
  double angle_range_deg = 20.0;
  std::array<double, 3> angle_steps_deg{2.0, 0.5, 0.25};
  double shift_fraction = 0.25;
  std::array<double, 3> shift_steps_px{4.0, 1.0, 0.25};
  int refine_iterations = 4;
  std::size_t coarse_peaks = 4;
};

/// Finer grid levels around `start`, then an axis-wise pattern search with
/// halving steps.
inline detail::AlignCandidate refine_alignment(const Image& moving, const Image& fixed, detail::AlignCandidate best,
                                               const RigidAlignOptions& opt, double angle_limit, double shift_limit) {
  for (std::size_t level = 1; level < 3; ++level) {
    best = detail::grid_search(moving, fixed, 1.0, best, radians(opt.angle_steps_deg[level - 1]),
                               radians(opt.angle_steps_deg[level]), opt.shift_steps_px[level - 1],
                               opt.shift_steps_px[level], shift_limit, angle_limit);
  }
  double a_step = radians(opt.angle_steps_deg[2]) / 2.0;
  double s_step = opt.shift_steps_px[2] / 2.0;
  for (int it = 0; it < opt.refine_iterations; ++it) {
    bool moved = true;
    while (moved) {
      moved = false;
      const std::array<RigidTransform, 6> probes{{{best.t.angle + a_step, best.t.tx, best.t.ty},
                                                  {best.t.angle - a_step, best.t.tx, best.t.ty},
                                                  {best.t.angle, best.t.tx + s_step, best.t.ty},
                                                  {best.t.angle, best.t.tx - s_step, best.t.ty},
                                                  {best.t.angle, best.t.tx, best.t.ty + s_step},
                                                  {best.t.angle, best.t.tx, best.t.ty - s_step}}};
      for (const auto& p : probes) {
        if (std::abs(p.angle) > angle_limit + 1e-12 || std::abs(p.tx) > shift_limit + 1e-12 ||
            std::abs(p.ty) > shift_limit + 1e-12)
          continue;
        auto cand = detail::evaluate(moving, fixed, p, 1.0);
        if (cand.score > best.score) {
          best = cand;
          moved = true;
        }
      }
    }
    a_step /= 2.0;
    s_step /= 2.0;
  }
  return best;
}

/// Rigid transform maximizing global NCC between the transformed `moving`
/// and `fixed`. Coarse level runs at half resolution; the two finer levels
/// and a shrinking pattern search run at full resolution, once from each of
/// the best distinct coarse peaks. Ties resolve to the smallest
/// (|angle|, |tx|, |ty|).
inline RigidTransform rigid_align(const Image& moving, const Image& fixed, const RigidAlignOptions& opt = {}) {
  if (!moving.same_grid(fixed)) throw InvalidShape("rigid_align: grid mismatch");
  if (is_constant(moving) || is_constant(fixed)) {
    throw DegenerateInput("rigid_align: constant image, correlation undefined");
  }
  const double angle_limit = radians(opt.angle_range_deg);
  const double shift_limit = opt.shift_fraction * static_cast<double>(moving.width);

  const bool pyramid = moving.width >= 16 && moving.height >= 16;
  std::vector<detail::AlignCandidate> starts;
  if (pyramid) {
    const Image m2 = downsample2x(moving), f2 = downsample2x(fixed);
    starts = detail::coarse_peaks(m2, f2, 0.5, angle_limit, radians(opt.angle_steps_deg[0]), shift_limit,
                                  opt.shift_steps_px[0], opt.coarse_peaks);
    for (auto& c : starts) c = detail::evaluate(moving, fixed, c.t, 1.0);
  } else {
    starts = detail::coarse_peaks(moving, fixed, 1.0, angle_limit, radians(opt.angle_steps_deg[0]), shift_limit,
                                  opt.shift_steps_px[0], opt.coarse_peaks);
  }
  detail::AlignCandidate best;
  for (const auto& start : starts) {
    auto cand = refine_alignment(moving, fixed, start, opt, angle_limit, shift_limit);
    if (cand.better_than(best)) best = cand;
  }
  return best.t;
}

/// Min-max rescale to [0,1]; a constant image maps to zeros.
inline Image normalize_intensity(const Image& image) {
  Image out(image.height, image.width);
  if (image.pixels.empty()) return out;
  auto [lo_it, hi_it] = std::minmax_element(image.pixels.begin(), image.pixels.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi <= lo) return out;
  for (std::size_t i = 0; i < image.size(); ++i) {
    out.pixels[i] = static_cast<float>((image.pixels[i] - lo) / (hi - lo));
  }
  return out;
}

struct Histogram {
  static constexpr std::size_t kBins = 64;
  std::array<std::uint64_t, kBins> bins{};
  std::uint64_t total = 0;

  /// Bin frequencies summing to one.
  std::array<double, kBins> normalized() const {
    std::array<double, kBins> p{};
    if (total == 0) return p;
    for (std::size_t i = 0; i < kBins; ++i) p[i] = static_cast<double>(bins[i]) / static_cast<double>(total);
    return p;
  }
};

/// 64 uniform bins over [0,1]; the last bin is closed on the right.
inline Histogram histogram64(const Image& image) {
  Histogram h;
  for (float v : image.pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ContractViolation("histogram64: value outside [0,1]");
    auto bin = static_cast<std::size_t>(static_cast<double>(v) * Histogram::kBins);
    h.bins[std::min(bin, Histogram::kBins - 1)] += 1;
    ++h.total;
  }
  return h;
}

inline double histogram_l1(const Histogram& a, const Histogram& b) {
  auto pa = a.normalized(), pb = b.normalized();
  double d = 0;
  for (std::size_t i = 0; i < Histogram::kBins; ++i) d += std::abs(pa[i] - pb[i]);
  return d;
}

}  // namespace atlas_replay
