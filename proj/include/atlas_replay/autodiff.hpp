#pragma once

// Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//
// A tensor is a handle to a graph node. Ops build result nodes that remember
// their parents and a closure that pushes the result's gradient back into
// them. backward() walks the graph in reverse topological order. Leaves
// (nodes without a backward closure) accumulate; the trainer resets them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "atlas_replay/errors.hpp"

namespace atlas_replay {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  }
  bool is_leaf() const { return !backward_fn; }
};

template <class Real>
class BasicTensor {
 public:
  using value_type = Real;
  using NodePtr = std::shared_ptr<Node<Real>>;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : node_(std::make_shared<Node<Real>>()) {
    if (shape.empty() || shape.size() > 4) {
      throw InvalidShape("tensor rank must be 1..4, got " + std::to_string(shape.size()));
    }
    for (auto d : shape) {
      if (d == 0) throw InvalidShape("zero extent in shape " + shape_string(shape));
    }
    if (element_count(shape) != values.size()) {
      throw InvalidShape("shape " + shape_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), Real(0), requires_grad); }

  static BasicTensor full(Shape shape, Real v, bool requires_grad = false) {
    std::size_t n = element_count(shape);
    return BasicTensor(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }

  static BasicTensor scalar(Real v) { return BasicTensor({1}, {v}); }

  static BasicTensor from_node(NodePtr node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const Real> values() const { return node_->value; }
  // Direct write access, for optimizers and test fixtures. Not tracked.
  std::span<Real> mutable_values() { return node_->value; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Real(0)); }
  void clear_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  Real item() const {
    if (size() != 1) throw ContractViolation("item() on non-scalar tensor " + shape_string(shape()));
    return node_->value[0];
  }

  Real operator[](std::size_t i) const { return node_->value[i]; }

  /// Copy of the values, cut from the graph.
  BasicTensor detach() const { return BasicTensor(shape(), node_->value); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using DiffTensor = BasicTensor<float>;

namespace detail {

template <class Real>
BasicTensor<Real> make_result(Shape shape, std::vector<Real> values,
                              std::vector<std::shared_ptr<Node<Real>>> parents,
                              std::function<void(Node<Real>&)> backward_fn) {
  BasicTensor<Real> out(std::move(shape), std::move(values));
  bool tracked = std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  if (tracked) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.parents = std::move(parents);
    n.backward_fn = std::move(backward_fn);
  }
  return out;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw InvalidShape(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw InvalidShape(std::string(op) + ": expected NCHW tensor, got " + shape_string(s));
}

template <class Real, class F>
BasicTensor<Real> unary(const BasicTensor<Real>& x, F&& fwd_and_slope) {
  const auto& xv = x.values();
  std::vector<Real> y(xv.size());
  std::vector<Real> dy(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto [v, d] = fwd_and_slope(xv[i]);
    y[i] = v;
    dy[i] = d;
  }
  return make_result<Real>(x.shape(), std::move(y), {x.node()}, [dy = std::move(dy)](Node<Real>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < dy.size(); ++i) p.grad[i] += self.grad[i] * dy[i];
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops and reductions
// ---------------------------------------------------------------------------

template <class Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<Real> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return detail::make_result<Real>(a.shape(), std::move(y), {a.node(), b.node()}, [](Node<Real>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

template <class Real>
BasicTensor<Real> sub(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<Real> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  return detail::make_result<Real>(a.shape(), std::move(y), {a.node(), b.node()}, [](Node<Real>& self) {
    const Real sign[2] = {Real(1), Real(-1)};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += sign[k] * self.grad[i];
    }
  });
}

template <class Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<Real> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  return detail::make_result<Real>(a.shape(), std::move(y), {a.node(), b.node()}, [](Node<Real>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <class Real>
BasicTensor<Real> scale(const BasicTensor<Real>& x, Real s) {
  return detail::unary(x, [s](Real v) { return std::pair{v * s, s}; });
}

template <class Real>
BasicTensor<Real> add_scalar(const BasicTensor<Real>& x, Real s) {
  return detail::unary(x, [s](Real v) { return std::pair{v + s, Real(1)}; });
}

template <class Real>
BasicTensor<Real> leaky_relu(const BasicTensor<Real>& x, Real slope) {
  return detail::unary(x, [slope](Real v) { return v > 0 ? std::pair{v, Real(1)} : std::pair{v * slope, slope}; });
}

template <class Real>
BasicTensor<Real> sigmoid(const BasicTensor<Real>& x) {
  return detail::unary(x, [](Real v) {
    // Branch keeps exp() from overflowing for large |v|.
    Real s = v >= 0 ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v));
    return std::pair{s, s * (Real(1) - s)};
  });
}

/// Gradient is zero where the input lies outside [lo, hi].
template <class Real>
BasicTensor<Real> clamp(const BasicTensor<Real>& x, Real lo, Real hi) {
  return detail::unary(x, [lo, hi](Real v) {
    if (v < lo) return std::pair{lo, Real(0)};
    if (v > hi) return std::pair{hi, Real(0)};
    return std::pair{v, Real(1)};
  });
}

template <class Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x) {
  double acc = 0.0;
  for (Real v : x.values()) acc += static_cast<double>(v);
  return detail::make_result<Real>({1}, {static_cast<Real>(acc)}, {x.node()}, [](Node<Real>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <class Real>
BasicTensor<Real> mean(const BasicTensor<Real>& x) {
  double acc = 0.0;
  for (Real v : x.values()) acc += static_cast<double>(v);
  const double n = static_cast<double>(x.size());
  return detail::make_result<Real>({1}, {static_cast<Real>(acc / n)}, {x.node()}, [n](Node<Real>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const Real g = static_cast<Real>(static_cast<double>(self.grad[0]) / n);
    for (auto& v : p.grad) v += g;
  });
}

// ---------------------------------------------------------------------------
// Spatial ops (NCHW)
// ---------------------------------------------------------------------------

/// Cross-correlation with zero padding. Kernel is [F, C, kh, kw].
template <class Real>
BasicTensor<Real> conv2d(const BasicTensor<Real>& input, const BasicTensor<Real>& kernel,
                         const BasicTensor<Real>& bias, int stride = 1, int padding = 0) {
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;

  detail::require_rank4(input.shape(), "conv2d");
  detail::require_rank4(kernel.shape(), "conv2d kernel");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t F = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != C) {
    throw InvalidShape("conv2d: input has " + std::to_string(C) + " channels, kernel expects " +
                       std::to_string(kernel.dim(1)));
  }
  if (bias.size() != F) throw InvalidShape("conv2d: bias size does not match filter count");
  if (kh % 2 == 0 || kw % 2 == 0) throw ContractViolation("conv2d: kernel extents must be odd");
  if (stride < 1 || padding < 0) throw ContractViolation("conv2d: stride >= 1 and padding >= 0 required");
  const long Hp = static_cast<long>(H) + 2 * padding - static_cast<long>(kh);
  const long Wp = static_cast<long>(W) + 2 * padding - static_cast<long>(kw);
  if (Hp < 0 || Wp < 0) throw InvalidShape("conv2d: kernel larger than padded input");
  const std::size_t Ho = static_cast<std::size_t>(Hp / stride + 1);
  const std::size_t Wo = static_cast<std::size_t>(Wp / stride + 1);
  const std::size_t K = C * kh * kw;
  const std::size_t P = Ho * Wo;

  // Output columns [lo, hi) whose input column for kernel column kx is in range.
  auto valid_x = [=](std::size_t kx) {
    const long off = static_cast<long>(kx) - padding;
    long lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    const long last = static_cast<long>(W) - 1 - off;
    long hi = last < 0 ? 0 : last / stride + 1;
    hi = std::clamp(hi, lo, static_cast<long>(Wo));
    return std::pair<long, long>{lo, hi};
  };

  // cols[n] is the [K, P] patch matrix of sample n.
  auto cols = std::make_shared<std::vector<Real>>(N * K * P, Real(0));
  const auto& x = input.values();
  for (std::size_t n = 0; n < N; ++n) {
    Real* col = cols->data() + n * K * P;
    for (std::size_t c = 0; c < C; ++c) {
      const Real* img = x.data() + (n * C + c) * H * W;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          Real* row = col + ((c * kh + ky) * kw + kx) * P;
          const auto [lo, hi] = valid_x(kx);
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            long iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ky);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            const Real* src = img + iy * static_cast<long>(W) - padding + static_cast<long>(kx);
            Real* dst = row + oy * Wo;
            for (long ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride];
          }
        }
      }
    }
  }

  std::vector<Real> y(N * F * P);
  CMap Kmat(kernel.values().data(), F, K);
  for (std::size_t n = 0; n < N; ++n) {
    Map out(y.data() + n * F * P, F, P);
    out.noalias() = Kmat * CMap(cols->data() + n * K * P, K, P);
    for (std::size_t f = 0; f < F; ++f) out.row(f).array() += bias[f];
  }

  auto backward = [=](Node<Real>& self) {
    auto& pin = *self.parents[0];
    auto& pk = *self.parents[1];
    auto& pb = *self.parents[2];
    CMap Km(pk.value.data(), F, K);
    if (pk.requires_grad) pk.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    if (pin.requires_grad) pin.ensure_grad();
    std::vector<Real> dcol(pin.requires_grad ? K * P : 0);
    for (std::size_t n = 0; n < N; ++n) {
      CMap g(self.grad.data() + n * F * P, F, P);
      CMap col(cols->data() + n * K * P, K, P);
      if (pk.requires_grad) {
        Map dk(pk.grad.data(), F, K);
        dk.noalias() += g * col.transpose();
      }
      if (pb.requires_grad) {
        for (std::size_t f = 0; f < F; ++f) {
          double acc = 0.0;
          for (std::size_t p = 0; p < P; ++p) acc += g(f, p);
          pb.grad[f] += static_cast<Real>(acc);
        }
      }
      if (pin.requires_grad) {
        Map dc(dcol.data(), K, P);
        dc.noalias() = Km.transpose() * g;
        for (std::size_t c = 0; c < C; ++c) {
          Real* dimg = pin.grad.data() + (n * C + c) * H * W;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const Real* row = dcol.data() + ((c * kh + ky) * kw + kx) * P;
              const auto [lo, hi] = valid_x(kx);
              for (std::size_t oy = 0; oy < Ho; ++oy) {
                long iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ky);
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                Real* dst = dimg + iy * static_cast<long>(W) - padding + static_cast<long>(kx);
                const Real* src = row + oy * Wo;
                for (long ox = lo; ox < hi; ++ox) dst[ox * stride] += src[ox];
              }
            }
          }
        }
      }
    }
  };
  return detail::make_result<Real>({N, F, Ho, Wo}, std::move(y), {input.node(), kernel.node(), bias.node()},
                                   std::move(backward));
}

/// Nearest-neighbour 2x upsampling.
template <class Real>
BasicTensor<Real> upsample2x(const BasicTensor<Real>& input) {
  detail::require_rank4(input.shape(), "upsample2x");
  const std::size_t NC = input.dim(0) * input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t H2 = 2 * H, W2 = 2 * W;
  std::vector<Real> y(NC * H2 * W2);
  const auto& x = input.values();
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t yy = 0; yy < H2; ++yy)
      for (std::size_t xx = 0; xx < W2; ++xx) y[(c * H2 + yy) * W2 + xx] = x[(c * H + yy / 2) * W + xx / 2];
  return detail::make_result<Real>({input.dim(0), input.dim(1), H2, W2}, std::move(y), {input.node()},
                                   [=](Node<Real>& self) {
                                     auto& p = *self.parents[0];
                                     if (!p.requires_grad) return;
                                     p.ensure_grad();
                                     for (std::size_t c = 0; c < NC; ++c)
                                       for (std::size_t yy = 0; yy < H; ++yy)
                                         for (std::size_t xx = 0; xx < W; ++xx) {
                                           const Real* g = self.grad.data() + (c * H2 + 2 * yy) * W2 + 2 * xx;
                                           p.grad[(c * H + yy) * W + xx] += (g[0] + g[1]) + (g[W2] + g[W2 + 1]);
                                         }
                                   });
}

/// Channel-wise concatenation of two NCHW tensors with equal N, H, W.
template <class Real>
BasicTensor<Real> concat_channels(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  detail::require_rank4(a.shape(), "concat_channels");
  detail::require_rank4(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw InvalidShape("concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  std::vector<Real> y(N * (Ca + Cb) * HW);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.values().data() + n * Ca * HW, Ca * HW, y.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.values().data() + n * Cb * HW, Cb * HW, y.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  return detail::make_result<Real>({N, Ca + Cb, a.dim(2), a.dim(3)}, std::move(y), {a.node(), b.node()},
                                   [=](Node<Real>& self) {
                                     auto& pa = *self.parents[0];
                                     auto& pb = *self.parents[1];
                                     for (std::size_t n = 0; n < N; ++n) {
                                       const Real* g = self.grad.data() + n * (Ca + Cb) * HW;
                                       if (pa.requires_grad) {
                                         pa.ensure_grad();
                                         for (std::size_t i = 0; i < Ca * HW; ++i) pa.grad[n * Ca * HW + i] += g[i];
                                       }
                                       if (pb.requires_grad) {
                                         pb.ensure_grad();
                                         for (std::size_t i = 0; i < Cb * HW; ++i)
                                           pb.grad[n * Cb * HW + i] += g[Ca * HW + i];
                                       }
                                     }
                                   });
}

/// Bilinear warp: output(p) = image(p + flow(p)). Flow channel 0 is the x
/// displacement, channel 1 the y displacement, in pixels. Samples outside
/// the grid read zero.
template <class Real>
BasicTensor<Real> grid_sample_bilinear(const BasicTensor<Real>& image, const BasicTensor<Real>& flow) {
  detail::require_rank4(image.shape(), "grid_sample_bilinear");
  detail::require_rank4(flow.shape(), "grid_sample_bilinear flow");
  const std::size_t N = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  if (flow.dim(0) != N || flow.dim(1) != 2 || flow.dim(2) != H || flow.dim(3) != W) {
    throw InvalidShape("grid_sample_bilinear: flow " + shape_string(flow.shape()) + " incompatible with image " +
                       shape_string(image.shape()));
  }
  const std::size_t HW = H * W;
  const auto& img = image.values();
  const auto& fl = flow.values();

  auto pixel = [H, W](const Real* plane, long y, long x) -> Real {
    if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W)) return Real(0);
    return plane[y * static_cast<long>(W) + x];
  };

  std::vector<Real> out(N * C * HW);
  for (std::size_t n = 0; n < N; ++n) {
    const Real* fx = fl.data() + (n * 2) * HW;
    const Real* fy = fx + HW;
    for (std::size_t yy = 0; yy < H; ++yy) {
      for (std::size_t xx = 0; xx < W; ++xx) {
        const std::size_t p = yy * W + xx;
        const Real sx = static_cast<Real>(xx) + fx[p];
        const Real sy = static_cast<Real>(yy) + fy[p];
        const Real flx = std::floor(sx), fly = std::floor(sy);
        const long x0 = static_cast<long>(flx), y0 = static_cast<long>(fly);
        const Real wx = sx - flx, wy = sy - fly;
        for (std::size_t c = 0; c < C; ++c) {
          const Real* plane = img.data() + (n * C + c) * HW;
          const Real v00 = pixel(plane, y0, x0), v01 = pixel(plane, y0, x0 + 1);
          const Real v10 = pixel(plane, y0 + 1, x0), v11 = pixel(plane, y0 + 1, x0 + 1);
          out[(n * C + c) * HW + p] =
              (Real(1) - wy) * ((Real(1) - wx) * v00 + wx * v01) + wy * ((Real(1) - wx) * v10 + wx * v11);
        }
      }
    }
  }

  auto backward = [=](Node<Real>& self) {
    auto& pimg = *self.parents[0];
    auto& pflow = *self.parents[1];
    if (pimg.requires_grad) pimg.ensure_grad();
    if (pflow.requires_grad) pflow.ensure_grad();
    const long Hl = static_cast<long>(H), Wl = static_cast<long>(W);
    auto inside = [Hl, Wl](long y, long x) { return y >= 0 && x >= 0 && y < Hl && x < Wl; };
    for (std::size_t n = 0; n < N; ++n) {
      const Real* fx = pflow.value.data() + (n * 2) * HW;
      const Real* fy = fx + HW;
      for (std::size_t yy = 0; yy < H; ++yy) {
        for (std::size_t xx = 0; xx < W; ++xx) {
          const std::size_t p = yy * W + xx;
          const Real sx = static_cast<Real>(xx) + fx[p];
          const Real sy = static_cast<Real>(yy) + fy[p];
          const Real flx = std::floor(sx), fly = std::floor(sy);
          const long x0 = static_cast<long>(flx), y0 = static_cast<long>(fly);
          const Real wx = sx - flx, wy = sy - fly;
          Real gx = 0, gy = 0;
          for (std::size_t c = 0; c < C; ++c) {
            const Real g = self.grad[(n * C + c) * HW + p];
            if (g == Real(0)) continue;
            const Real* plane = pimg.value.data() + (n * C + c) * HW;
            if (pflow.requires_grad) {
              const Real v00 = pixel(plane, y0, x0), v01 = pixel(plane, y0, x0 + 1);
              const Real v10 = pixel(plane, y0 + 1, x0), v11 = pixel(plane, y0 + 1, x0 + 1);
              gx += g * ((Real(1) - wy) * (v01 - v00) + wy * (v11 - v10));
              gy += g * ((Real(1) - wx) * (v10 - v00) + wx * (v11 - v01));
            }
            if (pimg.requires_grad) {
              Real* dplane = pimg.grad.data() + (n * C + c) * HW;
              if (inside(y0, x0)) dplane[y0 * Wl + x0] += g * (Real(1) - wy) * (Real(1) - wx);
              if (inside(y0, x0 + 1)) dplane[y0 * Wl + x0 + 1] += g * (Real(1) - wy) * wx;
              if (inside(y0 + 1, x0)) dplane[(y0 + 1) * Wl + x0] += g * wy * (Real(1) - wx);
              if (inside(y0 + 1, x0 + 1)) dplane[(y0 + 1) * Wl + x0 + 1] += g * wy * wx;
            }
          }
          if (pflow.requires_grad) {
            pflow.grad[(n * 2) * HW + p] += gx;
            pflow.grad[(n * 2 + 1) * HW + p] += gy;
          }
        }
      }
    }
  };
  return detail::make_result<Real>(image.shape(), std::move(out), {image.node(), flow.node()}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Populates gradients of every tracked node reachable from `loss`.
/// Leaf gradients accumulate across calls; interior gradients are recomputed.
template <class Real>
void backward(const BasicTensor<Real>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractViolation("backward() requires a scalar loss");
  }
  using NodeT = Node<Real>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  NodeT* root = loss.node().get();
  if (!root->requires_grad) return;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (NodeT* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), Real(0));
  }
  root->ensure_grad();
  root->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

}  // namespace atlas_replay
