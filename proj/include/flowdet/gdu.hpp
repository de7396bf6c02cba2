#pragma once

#include <utility>

#include "flowdet/ops.hpp"

namespace flowdet {

// ---------------------------------------------------------------------------
// bilinear sampling
// ---------------------------------------------------------------------------

namespace detail {

// Zero-padded bilinear read of one plane plus the pieces needed for the
// backward pass. Taps outside the plane contribute 0.
template <typename T>
struct BilinearTaps {
  int64_t y0, x0;
  T wy1, wx1;  // fractional parts
  bool in00, in01, in10, in11;
};

template <typename T>
inline BilinearTaps<T> bilinear_taps(T py, T px, int64_t H, int64_t W) {
  BilinearTaps<T> t;
  const T fy = std::floor(py), fx = std::floor(px);
  t.y0 = int64_t(fy);
  t.x0 = int64_t(fx);
  t.wy1 = py - fy;
  t.wx1 = px - fx;
  t.in00 = t.y0 >= 0 && t.y0 < H && t.x0 >= 0 && t.x0 < W;
  t.in01 = t.y0 >= 0 && t.y0 < H && t.x0 + 1 >= 0 && t.x0 + 1 < W;
  t.in10 = t.y0 + 1 >= 0 && t.y0 + 1 < H && t.x0 >= 0 && t.x0 < W;
  t.in11 = t.y0 + 1 >= 0 && t.y0 + 1 < H && t.x0 + 1 >= 0 && t.x0 + 1 < W;
  return t;
}

template <typename T>
inline T bilinear_value(const T* plane, const BilinearTaps<T>& t, int64_t W) {
  const T v00 = t.in00 ? plane[t.y0 * W + t.x0] : T(0);
  const T v01 = t.in01 ? plane[t.y0 * W + t.x0 + 1] : T(0);
  const T v10 = t.in10 ? plane[(t.y0 + 1) * W + t.x0] : T(0);
  const T v11 = t.in11 ? plane[(t.y0 + 1) * W + t.x0 + 1] : T(0);
  const T top = v00 * (T(1) - t.wx1) + v01 * t.wx1;
  const T bot = v10 * (T(1) - t.wx1) + v11 * t.wx1;
  return top * (T(1) - t.wy1) + bot * t.wy1;
}

// d(value)/d(py), d(value)/d(px) under the same zero padding
template <typename T>
inline std::pair<T, T> bilinear_coord_grad(const T* plane, const BilinearTaps<T>& t, int64_t W) {
  const T v00 = t.in00 ? plane[t.y0 * W + t.x0] : T(0);
  const T v01 = t.in01 ? plane[t.y0 * W + t.x0 + 1] : T(0);
  const T v10 = t.in10 ? plane[(t.y0 + 1) * W + t.x0] : T(0);
  const T v11 = t.in11 ? plane[(t.y0 + 1) * W + t.x0 + 1] : T(0);
  const T dy = (v10 - v00) * (T(1) - t.wx1) + (v11 - v01) * t.wx1;
  const T dx = (v01 - v00) * (T(1) - t.wy1) + (v11 - v10) * t.wy1;
  return {dy, dx};
}

template <typename T>
inline void bilinear_scatter(T* gplane, const BilinearTaps<T>& t, int64_t W, T g) {
  if (t.in00) gplane[t.y0 * W + t.x0] += g * (T(1) - t.wy1) * (T(1) - t.wx1);
  if (t.in01) gplane[t.y0 * W + t.x0 + 1] += g * (T(1) - t.wy1) * t.wx1;
  if (t.in10) gplane[(t.y0 + 1) * W + t.x0] += g * t.wy1 * (T(1) - t.wx1);
  if (t.in11) gplane[(t.y0 + 1) * W + t.x0 + 1] += g * t.wy1 * t.wx1;
}

}  // namespace detail

// Sample every image/channel plane of x at one continuous coordinate.
// x: [N,C,H,W], p: [2] holding (y, x) -> out [N,C]. Differentiable in both.
template <typename T>
inline Tensor<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& p) {
  if (x.rank() != 4) throw ShapeError("bilinear_sample: x must be [N,C,H,W]");
  if (p.numel() != 2) throw ShapeError("bilinear_sample: p must hold exactly (y, x)");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({N, C});
  const T* px = x.data().data();
  const auto taps = detail::bilinear_taps(p[0], p[1], H, W);
  T* po = out.mutable_data().data();
  for (int64_t nc = 0; nc < N * C; ++nc)
    po[nc] = detail::bilinear_value(px + nc * H * W, taps, W);
  if (auto* g = detail::begin_record<T>({&x, &p}, out)) {
    g->add_node("bilinear_sample", [x, p, out, taps, N, C, H, W]() {
      (void)H;
      const T* go = out.storage()->grad.data();
      const T* px = x.data().data();
      T* gx = x.requires_grad() ? x.storage()->grad.data() : nullptr;
      T* gp = p.requires_grad() ? p.storage()->grad.data() : nullptr;
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const T gv = go[nc];
        if (gx) detail::bilinear_scatter(gx + nc * H * W, taps, W, gv);
        if (gp) {
          auto [dy, dx] = detail::bilinear_coord_grad(px + nc * H * W, taps, W);
          gp[0] += gv * dy;
          gp[1] += gv * dx;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// geometric deformable unit
// ---------------------------------------------------------------------------

enum class BranchAxis { horizontal, vertical };

struct GduConfig {
  std::vector<std::pair<int, int>> kernel_points;  // (dy, dx) integer grid offsets
  double sigma = 4.0;    // offset cap on the principal axis, pixels
  double epsilon = 1.0;  // offset cap on the cross axis, pixels
  double tau = 4.0;      // modulation temperature, pixels

  static GduConfig grid3x3() {
    GduConfig cfg;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) cfg.kernel_points.emplace_back(dy, dx);
    return cfg;
  }

  void validate() const {
    bool origin = false;
    for (auto [dy, dx] : kernel_points) origin = origin || (dy == 0 && dx == 0);
    if (!origin) throw ConfigError("GduConfig: kernel_points must contain the origin");
    if (sigma < 0) throw ConfigError("GduConfig: sigma must be >= 0");
    if (epsilon < 0 || epsilon > std::max(sigma, 0.0))
      throw ConfigError("GduConfig: epsilon must satisfy 0 <= epsilon <= sigma");
    if (tau <= 0) throw ConfigError("GduConfig: tau must be > 0");
  }
};

// Offset-magnitude modulation: 1 at zero offset, smooth, strictly decreasing.
inline double modulation_psi(double r, double tau) {
  return std::exp(-(r / tau) * (r / tau));
}

// Per-point squared offset magnitude: [N,2K,H,W] -> [N,K,H,W].
// Channel pairs (2k, 2k+1) hold (dy, dx) for point k.
template <typename T>
inline Tensor<T> offset_magnitude_sq(const Tensor<T>& off) {
  if (off.rank() != 4 || off.dim(1) % 2 != 0)
    throw ShapeError("offset_magnitude_sq: offsets must be [N,2K,H,W]");
  const int64_t N = off.dim(0), K = off.dim(1) / 2, hw = off.dim(2) * off.dim(3);
  Tensor<T> out = Tensor<T>::zeros({N, K, off.dim(2), off.dim(3)});
  const T* po = off.data().data();
  T* pq = out.mutable_data().data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t k = 0; k < K; ++k)
      for (int64_t i = 0; i < hw; ++i) {
        const T dy = po[(n * 2 * K + 2 * k) * hw + i];
        const T dx = po[(n * 2 * K + 2 * k + 1) * hw + i];
        pq[(n * K + k) * hw + i] = dy * dy + dx * dx;
      }
  if (auto* g = detail::begin_record<T>({&off}, out)) {
    g->add_node("offset_magnitude_sq", [off, out, N, K, hw]() {
      const T* go = out.storage()->grad.data();
      const T* po = off.data().data();
      T* goff = off.storage()->grad.data();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k)
          for (int64_t i = 0; i < hw; ++i) {
            const T gv = go[(n * K + k) * hw + i];
            goff[(n * 2 * K + 2 * k) * hw + i] += gv * T(2) * po[(n * 2 * K + 2 * k) * hw + i];
            goff[(n * 2 * K + 2 * k + 1) * hw + i] +=
                gv * T(2) * po[(n * 2 * K + 2 * k + 1) * hw + i];
          }
    });
  }
  return out;
}

// Tensor form of the modulation term, applied per kernel point.
template <typename T>
inline Tensor<T> modulation_psi_map(const Tensor<T>& offsets, double tau) {
  return exp(scale(offset_magnitude_sq(offsets), -1.0 / (tau * tau)));
}

// Per-location sampling offsets, modulation weights and psi values of one
// deformable branch.
template <typename T>
struct OffsetField {
  Tensor<T> offsets;      // [N, 2K, H, W], pairs (dy, dx) per point
  Tensor<T> mod_weights;  // [N, K, H, W], sigmoid output in (0,1)
  Tensor<T> psi;          // [N, K, H, W], values in (0,1]
};

// Parameters of one deformable branch: a depthwise-separable trunk feeding
// two 1x1 heads. The heads start at zero so the cold-start branch samples the
// undeformed grid.
template <typename T>
struct GduBranchParams {
  Tensor<T> trunk_depth;  // [C,3,3]
  Tensor<T> trunk_point;  // [C,C]
  Tensor<T> offset_w;     // [2K, C, 1, 1]
  Tensor<T> offset_b;     // [2K]
  Tensor<T> omega_w;      // [K, C, 1, 1]
  Tensor<T> omega_b;      // [K]

  static GduBranchParams init(int64_t channels, int64_t points, Rng& rng) {
    GduBranchParams p;
    p.trunk_depth = Tensor<T>::randn({channels, 3, 3}, rng, std::sqrt(2.0 / 9.0));
    p.trunk_point = Tensor<T>::randn({channels, channels}, rng, std::sqrt(2.0 / double(channels)));
    p.offset_w = Tensor<T>::zeros({2 * points, channels, 1, 1});
    p.offset_b = Tensor<T>::zeros({2 * points});
    p.omega_w = Tensor<T>::zeros({points, channels, 1, 1});
    p.omega_b = Tensor<T>::zeros({points});
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".trunk_depth", trunk_depth);
    fn(prefix + ".trunk_point", trunk_point);
    fn(prefix + ".offset_w", offset_w);
    fn(prefix + ".offset_b", offset_b);
    fn(prefix + ".omega_w", omega_w);
    fn(prefix + ".omega_b", omega_b);
  }
};

// Offset prediction head (the branch's deformation field). tanh bounds the
// raw prediction, then the principal axis is scaled by sigma and the cross
// axis by epsilon.
template <typename T>
inline OffsetField<T> predict_offsets(const Tensor<T>& x, const GduConfig& cfg,
                                      const GduBranchParams<T>& params, BranchAxis axis) {
  const int64_t K = int64_t(cfg.kernel_points.size());
  Tensor<T> trunk = silu(dwconv(x, params.trunk_depth, params.trunk_point));
  Tensor<T> raw = conv2d(trunk, params.offset_w, params.offset_b, 1, 0);
  std::vector<double> scales(static_cast<size_t>(2 * K));
  const double sy = axis == BranchAxis::vertical ? cfg.sigma : cfg.epsilon;
  const double sx = axis == BranchAxis::horizontal ? cfg.sigma : cfg.epsilon;
  for (int64_t k = 0; k < K; ++k) {
    scales[size_t(2 * k)] = sy;
    scales[size_t(2 * k + 1)] = sx;
  }
  OffsetField<T> field;
  field.offsets = channel_scale(tanh(raw), scales);
  field.mod_weights = sigmoid(conv2d(trunk, params.omega_w, params.omega_b, 1, 0));
  field.psi = modulation_psi_map(field.offsets, cfg.tau);
  return field;
}

// Fused deformable sampling:
//   out[n,c,p0] = sum_k omega[n,k,p0] * psi[n,k,p0] * x[n,c](p0 + p_k + off[n,k,p0])
// Gradients flow to x, offsets, omega and psi.
template <typename T>
inline Tensor<T> gdu_sample(const Tensor<T>& x, const Tensor<T>& offsets, const Tensor<T>& omega,
                            const Tensor<T>& psi,
                            const std::vector<std::pair<int, int>>& points) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t K = int64_t(points.size());
  if (offsets.shape() != Shape{N, 2 * K, H, W})
    throw ShapeError("gdu_sample: offsets must be [N,2K,H,W], got " + shape_str(offsets.shape()));
  if (omega.shape() != Shape{N, K, H, W} || psi.shape() != Shape{N, K, H, W})
    throw ShapeError("gdu_sample: omega/psi must be [N,K,H,W]");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  const T* poff = offsets.data().data();
  const T* pom = omega.data().data();
  const T* pps = psi.data().data();
  T* po = out.mutable_data().data();
  const int64_t hw = H * W;
  parallel_for(N, [&](int64_t n_lo, int64_t n_hi) {
    for (int64_t n = n_lo; n < n_hi; ++n) {
      for (int64_t k = 0; k < K; ++k) {
        const T* dy_plane = poff + (n * 2 * K + 2 * k) * hw;
        const T* dx_plane = poff + (n * 2 * K + 2 * k + 1) * hw;
        const T* om_plane = pom + (n * K + k) * hw;
        const T* ps_plane = pps + (n * K + k) * hw;
        for (int64_t y = 0; y < H; ++y) {
          for (int64_t xx = 0; xx < W; ++xx) {
            const int64_t i = y * W + xx;
            const T py = T(y + points[size_t(k)].first) + dy_plane[i];
            const T pxc = T(xx + points[size_t(k)].second) + dx_plane[i];
            const auto taps = detail::bilinear_taps(py, pxc, H, W);
            const T weff = om_plane[i] * ps_plane[i];
            for (int64_t c = 0; c < C; ++c) {
              po[(n * C + c) * hw + i] +=
                  weff * detail::bilinear_value(px + (n * C + c) * hw, taps, W);
            }
          }
        }
      }
    }
  });
  if (auto* g = detail::begin_record<T>({&x, &offsets, &omega, &psi}, out)) {
    g->add_node("gdu_sample", [x, offsets, omega, psi, out, points, N, C, H, W, K, hw]() {
      const T* go = out.storage()->grad.data();
      const T* px = x.data().data();
      const T* poff = offsets.data().data();
      const T* pom = omega.data().data();
      const T* pps = psi.data().data();
      T* gx = x.requires_grad() ? x.storage()->grad.data() : nullptr;
      T* goff = offsets.requires_grad() ? offsets.storage()->grad.data() : nullptr;
      T* gom = omega.requires_grad() ? omega.storage()->grad.data() : nullptr;
      T* gps = psi.requires_grad() ? psi.storage()->grad.data() : nullptr;
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t k = 0; k < K; ++k) {
          const T* dy_plane = poff + (n * 2 * K + 2 * k) * hw;
          const T* dx_plane = poff + (n * 2 * K + 2 * k + 1) * hw;
          const T* om_plane = pom + (n * K + k) * hw;
          const T* ps_plane = pps + (n * K + k) * hw;
          for (int64_t y = 0; y < H; ++y) {
            for (int64_t xx = 0; xx < W; ++xx) {
              const int64_t i = y * W + xx;
              const T py = T(y + points[size_t(k)].first) + dy_plane[i];
              const T pxc = T(xx + points[size_t(k)].second) + dx_plane[i];
              const auto taps = detail::bilinear_taps(py, pxc, H, W);
              const T om = om_plane[i], ps = ps_plane[i];
              const T weff = om * ps;
              T acc_v = T(0), acc_dy = T(0), acc_dx = T(0);
              for (int64_t c = 0; c < C; ++c) {
                const T gv = go[(n * C + c) * hw + i];
                if (gv == T(0)) continue;
                const T* plane = px + (n * C + c) * hw;
                if (gom || gps) acc_v += gv * detail::bilinear_value(plane, taps, W);
                if (goff) {
                  auto [dvy, dvx] = detail::bilinear_coord_grad(plane, taps, W);
                  acc_dy += gv * dvy;
                  acc_dx += gv * dvx;
                }
                if (gx) detail::bilinear_scatter(gx + (n * C + c) * hw, taps, W, gv * weff);
              }
              if (gom) gom[(n * K + k) * hw + i] += acc_v * ps;
              if (gps) gps[(n * K + k) * hw + i] += acc_v * om;
              if (goff) {
                goff[(n * 2 * K + 2 * k) * hw + i] += acc_dy * weff;
                goff[(n * 2 * K + 2 * k + 1) * hw + i] += acc_dx * weff;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
struct GduParams {
  GduBranchParams<T> horizontal;
  GduBranchParams<T> vertical;
  Tensor<T> combine_w;  // [C,C,1,1]
  Tensor<T> combine_b;  // [C]

  static GduParams init(int64_t channels, int64_t points, Rng& rng) {
    GduParams p;
    p.horizontal = GduBranchParams<T>::init(channels, points, rng);
    p.vertical = GduBranchParams<T>::init(channels, points, rng);
    p.combine_w = Tensor<T>::randn({channels, channels, 1, 1}, rng,
                                   std::sqrt(2.0 / double(channels)));
    p.combine_b = Tensor<T>::zeros({channels});
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    horizontal.visit(prefix + ".h", fn);
    vertical.visit(prefix + ".v", fn);
    fn(prefix + ".combine_w", combine_w);
    fn(prefix + ".combine_b", combine_b);
  }
};

template <typename T>
inline Tensor<T> gdu_branch_forward(const Tensor<T>& x, const GduConfig& cfg,
                                    const GduBranchParams<T>& params, BranchAxis axis) {
  OffsetField<T> field = predict_offsets(x, cfg, params, axis);
  return gdu_sample(x, field.offsets, field.mod_weights, field.psi, cfg.kernel_points);
}

// Full unit: horizontal and vertical branches averaged, then a pointwise mix.
template <typename T>
inline Tensor<T> gdu_forward(const Tensor<T>& x, const GduConfig& cfg, const GduParams<T>& params) {
  Tensor<T> h = gdu_branch_forward(x, cfg, params.horizontal, BranchAxis::horizontal);
  Tensor<T> v = gdu_branch_forward(x, cfg, params.vertical, BranchAxis::vertical);
  Tensor<T> merged = scale(add(h, v), 0.5);
  return conv2d(merged, params.combine_w, params.combine_b, 1, 0);
}

}  // namespace flowdet
