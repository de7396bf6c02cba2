#pragma once

#include "flowdet/graph.hpp"

namespace flowdet {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
inline Tensor<T> binary_elementwise(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                                    FwdFn fwd, BwdFn bwd) {
  require_same_shape(a, b, name);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.mutable_data().data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  if (auto* g = detail::begin_record<T>({&a, &b}, out)) {
    g->add_node(name, [a, b, out, bwd]() {
      const T* go = out.storage()->grad.data();
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      const int64_t n = a.numel();
      T* ga = a.requires_grad() ? a.storage()->grad.data() : nullptr;
      T* gb = b.requires_grad() ? b.storage()->grad.data() : nullptr;
      for (int64_t i = 0; i < n; ++i) {
        auto [da, db] = bwd(pa[i], pb[i]);
        if (ga) ga[i] += go[i] * da;
        if (gb) gb[i] += go[i] * db;
      }
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T) { return std::pair<T, T>(T(1), T(1)); });
}

template <typename T>
inline Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T) { return std::pair<T, T>(T(1), T(-1)); });
}

template <typename T>
inline Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y) { return std::pair<T, T>(y, x); });
}

template <typename T>
inline Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T x, T y) { return std::pair<T, T>(T(1) / y, -x / (y * y)); });
}

// subgradient convention at ties: the first argument wins
template <typename T>
inline Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "minimum", a, b, [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y) { return x <= y ? std::pair<T, T>(T(1), T(0)) : std::pair<T, T>(T(0), T(1)); });
}

template <typename T>
inline Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y) { return x >= y ? std::pair<T, T>(T(1), T(0)) : std::pair<T, T>(T(0), T(1)); });
}

template <typename T, typename FwdFn, typename BwdFn>
inline Tensor<T> unary_elementwise(const char* name, const Tensor<T>& a, FwdFn fwd, BwdFn bwd) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data().data();
  T* po = out.mutable_data().data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (auto* g = detail::begin_record<T>({&a}, out)) {
    g->add_node(name, [a, out, bwd]() {
      const T* go = out.storage()->grad.data();
      const T* pa = a.data().data();
      const T* po = out.data().data();
      T* ga = a.storage()->grad.data();
      const int64_t n = a.numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * bwd(pa[i], po[i]);
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> relu(const Tensor<T>& a) {
  return unary_elementwise<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
inline Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_elementwise<T>(
      "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
inline Tensor<T> silu(const Tensor<T>& a) {
  return unary_elementwise<T>(
      "silu", a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
inline Tensor<T> tanh(const Tensor<T>& a) {
  return unary_elementwise<T>(
      "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
inline Tensor<T> exp(const Tensor<T>& a) {
  return unary_elementwise<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
inline Tensor<T> log(const Tensor<T>& a) {
  return unary_elementwise<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
inline Tensor<T> abs(const Tensor<T>& a) {
  return unary_elementwise<T>(
      "abs", a, [](T x) { return std::fabs(x); },
      [](T x, T) { return x >= T(0) ? T(1) : T(-1); });
}

template <typename T>
inline Tensor<T> scale(const Tensor<T>& a, double c) {
  const T cc = T(c);
  return unary_elementwise<T>(
      "scale", a, [cc](T x) { return x * cc; }, [cc](T, T) { return cc; });
}

template <typename T>
inline Tensor<T> add_scalar(const Tensor<T>& a, double c) {
  const T cc = T(c);
  return unary_elementwise<T>(
      "add_scalar", a, [cc](T x) { return x + cc; }, [](T, T) { return T(1); });
}

template <typename T>
inline Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, -1.0);
}

template <typename T>
inline Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
inline Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
inline Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (auto* g = detail::begin_record<T>({&a}, out)) {
    g->add_node("sum", [a, out]() {
      const T go = out.storage()->grad[0];
      T* ga = a.storage()->grad.data();
      const int64_t n = a.numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += go;
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), 1.0 / double(a.numel()));
}

// loss = sum(a * w) with constant weights; used by the gradient checker to
// project tensor outputs to a scalar.
template <typename T>
inline Tensor<T> weighted_sum(const Tensor<T>& a, const std::vector<T>& w) {
  if (int64_t(w.size()) != a.numel()) throw ShapeError("weighted_sum: weight count mismatch");
  T acc = T(0);
  const T* pa = a.data().data();
  for (size_t i = 0; i < w.size(); ++i) acc += pa[i] * w[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (auto* g = detail::begin_record<T>({&a}, out)) {
    g->add_node("weighted_sum", [a, out, w]() {
      const T go = out.storage()->grad[0];
      T* ga = a.storage()->grad.data();
      for (size_t i = 0; i < w.size(); ++i) ga[i] += go * w[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul / bmm
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] (+)= A[m,k] * B[k,n], optionally transposing the logical operands.
// Plain i-k-j loops; deterministic accumulation order.
template <typename T>
inline void gemm_acc(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool ta,
                     bool tb) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = C + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = ta ? A[p * m + i] : A[i * k + p];
      if (av == T(0)) continue;
      if (!tb) {
        const T* brow = B + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (int64_t j = 0; j < n; ++j) crow[j] += av * B[j * k + p];
      }
    }
  }
}

}  // namespace detail

// Batched matrix multiply. a: [B,m,k], b: [B,k,n] (pre-transpose logical
// shapes), out: [B,m,n]. trans flags transpose the trailing two axes.
template <typename T>
inline Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                     bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3) throw ShapeError("bmm: operands must be rank 3");
  if (a.dim(0) != b.dim(0))
    throw ShapeError("bmm: axis 0 mismatch (" + std::to_string(a.dim(0)) + " vs " +
                     std::to_string(b.dim(0)) + ")");
  const int64_t B = a.dim(0);
  const int64_t m = trans_a ? a.dim(2) : a.dim(1);
  const int64_t k = trans_a ? a.dim(1) : a.dim(2);
  const int64_t kb = trans_b ? b.dim(2) : b.dim(1);
  const int64_t n = trans_b ? b.dim(1) : b.dim(2);
  if (k != kb)
    throw ShapeError("bmm: inner axis mismatch (" + std::to_string(k) + " vs " +
                     std::to_string(kb) + ")");
  Tensor<T> out = Tensor<T>::zeros({B, m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.mutable_data().data();
  const int64_t sa = a.dim(1) * a.dim(2), sb = b.dim(1) * b.dim(2), so = m * n;
  parallel_for(B, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i)
      detail::gemm_acc(pa + i * sa, pb + i * sb, po + i * so, m, k, n, trans_a, trans_b);
  });
  if (auto* g = detail::begin_record<T>({&a, &b}, out)) {
    g->add_node("bmm", [a, b, out, trans_a, trans_b, B, m, k, n, sa, sb, so]() {
      const T* go = out.storage()->grad.data();
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      // dA = dC * B^T (modulo the transpose flags), dB = A^T * dC
      if (a.requires_grad()) {
        T* ga = a.storage()->grad.data();
        for (int64_t i = 0; i < B; ++i) {
          if (!trans_a)
            detail::gemm_acc(go + i * so, pb + i * sb, ga + i * sa, m, n, k, false, !trans_b);
          else
            detail::gemm_acc(pb + i * sb, go + i * so, ga + i * sa, k, n, m, trans_b, true);
        }
      }
      if (b.requires_grad()) {
        T* gb = b.storage()->grad.data();
        for (int64_t i = 0; i < B; ++i) {
          if (!trans_b)
            detail::gemm_acc(pa + i * sa, go + i * so, gb + i * sb, k, m, n, !trans_a, false);
          else
            detail::gemm_acc(go + i * so, pa + i * sa, gb + i * sb, n, m, k, true, trans_a);
        }
      }
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be rank 2");
  Tensor<T> a3 = a.reshape({1, a.dim(0), a.dim(1)});
  Tensor<T> b3 = b.reshape({1, b.dim(0), b.dim(1)});
  return bmm(a3, b3).reshape({a.dim(0), b.dim(1)});
}

// x: [..., D] plus row vector b: [D]
template <typename T>
inline Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0))
    throw ShapeError("add_rowvec: last axis (" + std::to_string(x.dim(x.rank() - 1)) +
                     ") must match bias length (" + std::to_string(b.numel()) + ")");
  const int64_t d = b.dim(0);
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  const T* pbv = b.data().data();
  T* po = out.mutable_data().data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pbv[j];
  if (auto* g = detail::begin_record<T>({&x, &b}, out)) {
    g->add_node("add_rowvec", [x, b, out, rows, d]() {
      const T* go = out.storage()->grad.data();
      if (x.requires_grad()) {
        T* gx = x.storage()->grad.data();
        const int64_t n = x.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
      }
      if (b.requires_grad()) {
        T* gb = b.storage()->grad.data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < d; ++j) gb[j] += go[r * d + j];
      }
    });
  }
  return out;
}

// linear layer on trailing axis: y = x @ W + b, W: [D_in, D_out]
template <typename T>
inline Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const int64_t din = w.dim(0), dout = w.dim(1);
  if (x.dim(x.rank() - 1) != din)
    throw ShapeError("linear: input axis " + std::to_string(x.dim(x.rank() - 1)) +
                     " does not match weight rows " + std::to_string(din));
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<T> flat = x.reshape({x.numel() / din, din});
  Tensor<T> y = matmul(flat, w);
  if (b.defined()) y = add_rowvec(y, b);
  return y.reshape(std::move(out_shape));
}

// ---------------------------------------------------------------------------
// softmax / layernorm / cross-entropy
// ---------------------------------------------------------------------------

// Shift-invariant softmax along `axis`.
template <typename T>
inline Tensor<T> softmax(const Tensor<T>& x, int64_t axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  const int64_t d = x.dim(axis);
  int64_t inner = 1;
  for (int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const int64_t outer = x.numel() / (d * inner);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * d * inner + in;
      T m = px[base];
      for (int64_t j = 1; j < d; ++j) m = std::max(m, px[base + j * inner]);
      T z = T(0);
      for (int64_t j = 0; j < d; ++j) {
        T e = std::exp(px[base + j * inner] - m);
        po[base + j * inner] = e;
        z += e;
      }
      const T inv = T(1) / z;
      for (int64_t j = 0; j < d; ++j) po[base + j * inner] *= inv;
    }
  }
  if (auto* g = detail::begin_record<T>({&x}, out)) {
    g->add_node("softmax", [x, out, d, inner, outer]() {
      const T* go = out.storage()->grad.data();
      const T* py = out.data().data();
      T* gx = x.storage()->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * d * inner + in;
          T dot = T(0);
          for (int64_t j = 0; j < d; ++j) dot += go[base + j * inner] * py[base + j * inner];
          for (int64_t j = 0; j < d; ++j) {
            const int64_t ix = base + j * inner;
            gx[ix] += py[ix] * (go[ix] - dot);
          }
        }
      }
    });
  }
  return out;
}

// LayerNorm over the trailing axis with learnable gamma/beta. eps sits under
// the sqrt and is kept tiny so normalized rows genuinely have unit variance.
template <typename T>
inline Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           double eps = 1e-12) {
  const int64_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layernorm: gamma/beta length must equal trailing axis " + std::to_string(d));
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  T* po = out.mutable_data().data();
  std::vector<T> inv_std(static_cast<size_t>(rows)), mean_row(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T m = T(0);
    for (int64_t j = 0; j < d; ++j) m += row[j];
    m /= T(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T c = row[j] - m;
      var += c * c;
    }
    var /= T(d);
    const T is = T(1) / std::sqrt(var + T(eps));
    mean_row[size_t(r)] = m;
    inv_std[size_t(r)] = is;
    for (int64_t j = 0; j < d; ++j) po[r * d + j] = pg[j] * ((row[j] - m) * is) + pb[j];
  }
  if (auto* g = detail::begin_record<T>({&x, &gamma, &beta}, out)) {
    g->add_node("layernorm", [x, gamma, beta, out, rows, d, inv_std, mean_row]() {
      const T* go = out.storage()->grad.data();
      const T* px = x.data().data();
      const T* pg = gamma.data().data();
      T* gx = x.requires_grad() ? x.storage()->grad.data() : nullptr;
      T* gg = gamma.requires_grad() ? gamma.storage()->grad.data() : nullptr;
      T* gb = beta.requires_grad() ? beta.storage()->grad.data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const T m = mean_row[size_t(r)];
        const T is = inv_std[size_t(r)];
        const T* row = px + r * d;
        const T* grow = go + r * d;
        if (gg || gb) {
          for (int64_t j = 0; j < d; ++j) {
            const T xhat = (row[j] - m) * is;
            if (gg) gg[j] += grow[j] * xhat;
            if (gb) gb[j] += grow[j];
          }
        }
        if (gx) {
          T sum_gp = T(0), sum_gpx = T(0);
          for (int64_t j = 0; j < d; ++j) {
            const T gp = grow[j] * pg[j];
            sum_gp += gp;
            sum_gpx += gp * (row[j] - m) * is;
          }
          const T inv_d = T(1) / T(d);
          for (int64_t j = 0; j < d; ++j) {
            const T gp = grow[j] * pg[j];
            const T xhat = (row[j] - m) * is;
            gx[r * d + j] += is * (gp - inv_d * sum_gp - xhat * inv_d * sum_gpx);
          }
        }
      }
    });
  }
  return out;
}

// Weighted cross entropy over rows of `logits` [R, C]:
//   loss = sum_r w_r * (logsumexp(row_r) - row_r[target_r]) / sum_r w_r
template <typename T>
inline Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<int>& targets,
                                    const std::vector<double>& weights) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy_rows: logits must be [rows, classes]");
  const int64_t rows = logits.dim(0), classes = logits.dim(1);
  if (int64_t(targets.size()) != rows || int64_t(weights.size()) != rows)
    throw ShapeError("cross_entropy_rows: need one target and weight per row");
  const T* pl = logits.data().data();
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0) throw ValueError("cross_entropy_rows: total weight must be positive");
  double acc = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = pl + r * classes;
    if (targets[size_t(r)] < 0 || targets[size_t(r)] >= int(classes))
      throw ValueError("cross_entropy_rows: target out of range at row " + std::to_string(r));
    T m = row[0];
    for (int64_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (int64_t c = 0; c < classes; ++c) z += std::exp(double(row[c] - m));
    const double lse = double(m) + std::log(z);
    acc += weights[size_t(r)] * (lse - double(row[targets[size_t(r)]]));
  }
  Tensor<T> out = Tensor<T>::scalar(T(acc / wsum));
  if (auto* g = detail::begin_record<T>({&logits}, out)) {
    g->add_node("cross_entropy_rows", [logits, out, targets, weights, wsum, rows, classes]() {
      const T go = out.storage()->grad[0];
      const T* pl = logits.data().data();
      T* gl = logits.storage()->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* row = pl + r * classes;
        T m = row[0];
        for (int64_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
        double z = 0.0;
        for (int64_t c = 0; c < classes; ++c) z += std::exp(double(row[c] - m));
        const double coeff = weights[size_t(r)] / wsum * double(go);
        for (int64_t c = 0; c < classes; ++c) {
          double p = std::exp(double(row[c] - m)) / z;
          double onehot = (c == targets[size_t(r)]) ? 1.0 : 0.0;
          gl[r * classes + c] += T(coeff * (p - onehot));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// data movement
// ---------------------------------------------------------------------------

template <typename T>
inline std::vector<Tensor<T>> split(const Tensor<T>& x, int64_t axis, int64_t parts) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("split: axis out of range");
  if (parts < 1 || x.dim(axis) % parts != 0)
    throw ShapeError("split: axis " + std::to_string(axis) + " extent " +
                     std::to_string(x.dim(axis)) + " not divisible into " + std::to_string(parts) +
                     " parts");
  const int64_t d = x.dim(axis), piece = d / parts;
  int64_t inner = 1;
  for (int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const int64_t outer = x.numel() / (d * inner);
  std::vector<Tensor<T>> outs;
  outs.reserve(size_t(parts));
  for (int64_t p = 0; p < parts; ++p) {
    Shape s = x.shape();
    s[size_t(axis)] = piece;
    Tensor<T> out = Tensor<T>::zeros(s);
    const T* px = x.data().data();
    T* po = out.mutable_data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(px + (o * d + p * piece) * inner, px + (o * d + (p + 1) * piece) * inner,
                po + o * piece * inner);
    if (auto* g = detail::begin_record<T>({&x}, out)) {
      g->add_node("split", [x, out, o_piece = piece, p, d, inner, outer]() {
        const T* go = out.storage()->grad.data();
        T* gx = x.storage()->grad.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < o_piece * inner; ++i)
            gx[(o * d + p * o_piece) * inner + i] += go[o * o_piece * inner + i];
      });
    }
    outs.push_back(std::move(out));
  }
  return outs;
}

template <typename T>
inline Tensor<T> concat(const std::vector<Tensor<T>>& xs, int64_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  int64_t r = xs[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  int64_t total = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int64_t i = 0; i < r; ++i)
      if (i != axis && t.dim(i) != xs[0].dim(i))
        throw ShapeError("concat: axis " + std::to_string(i) + " mismatch (" +
                         std::to_string(t.dim(i)) + " vs " + std::to_string(xs[0].dim(i)) + ")");
    total += t.dim(axis);
  }
  Shape s = xs[0].shape();
  s[size_t(axis)] = total;
  Tensor<T> out = Tensor<T>::zeros(s);
  int64_t inner = 1;
  for (int64_t i = axis + 1; i < r; ++i) inner *= xs[0].dim(i);
  const int64_t outer = out.numel() / (total * inner);
  T* po = out.mutable_data().data();
  int64_t off = 0;
  for (const auto& t : xs) {
    const int64_t piece = t.dim(axis);
    const T* pt = t.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pt + o * piece * inner, pt + (o + 1) * piece * inner,
                po + (o * total + off) * inner);
    off += piece;
  }
  Graph<T>* g = Graph<T>::current();
  bool any = false;
  for (const auto& t : xs) any = any || t.requires_grad();
  if (g && any) {
    out.set_requires_grad(true);
    g->prepare(out);
    for (const auto& t : xs)
      if (t.requires_grad()) g->prepare(t);
    g->add_node("concat", [xs, out, total, inner, outer]() {
      const T* go = out.storage()->grad.data();
      int64_t off = 0;
      for (const auto& t : xs) {
        const int64_t piece = t.numel() / (outer * inner);
        if (t.requires_grad()) {
          T* gt = t.storage()->grad.data();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < piece * inner; ++i)
              gt[o * piece * inner + i] += go[(o * total + off) * inner + i];
        }
        off += piece;
      }
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> permute(const Tensor<T>& x, const std::vector<int64_t>& axes) {
  const int64_t r = x.rank();
  if (int64_t(axes.size()) != r) throw ShapeError("permute: axes size mismatch");
  Shape out_shape(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) out_shape[size_t(i)] = x.dim(axes[size_t(i)]);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::vector<int64_t> in_strides(size_t(r), 1), out_strides(size_t(r), 1);
  for (int64_t i = r - 2; i >= 0; --i) in_strides[size_t(i)] = in_strides[size_t(i + 1)] * x.dim(i + 1);
  for (int64_t i = r - 2; i >= 0; --i)
    out_strides[size_t(i)] = out_strides[size_t(i + 1)] * out_shape[size_t(i + 1)];
  // stride of each output axis expressed in the input layout
  std::vector<int64_t> gather(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) gather[size_t(i)] = in_strides[size_t(axes[size_t(i)])];
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  const int64_t n = x.numel();
  std::vector<int64_t> perm_map(static_cast<size_t>(n));
  {
    std::vector<int64_t> idx(size_t(r), 0);
    int64_t src = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
      perm_map[size_t(flat)] = src;
      po[flat] = px[src];
      for (int64_t i = r - 1; i >= 0; --i) {
        idx[size_t(i)]++;
        src += gather[size_t(i)];
        if (idx[size_t(i)] < out_shape[size_t(i)]) break;
        src -= gather[size_t(i)] * out_shape[size_t(i)];
        idx[size_t(i)] = 0;
      }
    }
  }
  if (auto* g = detail::begin_record<T>({&x}, out)) {
    g->add_node("permute", [x, out, perm_map]() {
      const T* go = out.storage()->grad.data();
      T* gx = x.storage()->grad.data();
      const int64_t n = int64_t(perm_map.size());
      for (int64_t i = 0; i < n; ++i) gx[perm_map[size_t(i)]] += go[i];
    });
  }
  return out;
}

// Gather whole rows of a [R, D] tensor; backward scatter-adds.
template <typename T>
inline Tensor<T> select_rows(const Tensor<T>& x, const std::vector<int64_t>& idx) {
  if (x.rank() != 2) throw ShapeError("select_rows: input must be rank 2");
  const int64_t d = x.dim(1);
  for (int64_t i : idx)
    if (i < 0 || i >= x.dim(0)) throw ValueError("select_rows: index out of range");
  Tensor<T> out = Tensor<T>::zeros({int64_t(idx.size()), d});
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(px + idx[r] * d, px + (idx[r] + 1) * d, po + int64_t(r) * d);
  if (auto* g = detail::begin_record<T>({&x}, out)) {
    g->add_node("select_rows", [x, out, idx, d]() {
      const T* go = out.storage()->grad.data();
      T* gx = x.storage()->grad.data();
      for (size_t r = 0; r < idx.size(); ++r)
        for (int64_t j = 0; j < d; ++j) gx[idx[r] * d + j] += go[int64_t(r) * d + j];
    });
  }
  return out;
}

// Repeat a tensor along a new leading batch axis; backward sums over it.
template <typename T>
inline Tensor<T> broadcast_batch(const Tensor<T>& x, int64_t batch) {
  Shape s = x.shape();
  s.insert(s.begin(), batch);
  Tensor<T> out = Tensor<T>::zeros(s);
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  const int64_t n = x.numel();
  for (int64_t b = 0; b < batch; ++b) std::copy(px, px + n, po + b * n);
  if (auto* g = detail::begin_record<T>({&x}, out)) {
    g->add_node("broadcast_batch", [x, out, batch, n]() {
      const T* go = out.storage()->grad.data();
      T* gx = x.storage()->grad.data();
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < n; ++i) gx[i] += go[b * n + i];
    });
  }
  return out;
}

// Multiply x by a scalar held in a [1] tensor (learnable scalar path).
template <typename T>
inline Tensor<T> mul_scalar_tensor(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar_tensor: scale must be a scalar tensor");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T sv = s.data()[0];
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] * sv;
  if (auto* g = detail::begin_record<T>({&x, &s}, out)) {
    g->add_node("mul_scalar_tensor", [x, s, out, sv, n]() {
      const T* go = out.storage()->grad.data();
      if (x.requires_grad()) {
        T* gx = x.storage()->grad.data();
        for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * sv;
      }
      if (s.requires_grad()) {
        const T* px = x.data().data();
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += go[i] * px[i];
        s.storage()->grad[0] += acc;
      }
    });
  }
  return out;
}

// Per-channel constant scaling of an [N,C,H,W] map (no gradient to scales).
template <typename T>
inline Tensor<T> channel_scale(const Tensor<T>& x, const std::vector<double>& scales) {
  if (x.rank() != 4 || int64_t(scales.size()) != x.dim(1))
    throw ShapeError("channel_scale: need one scale per channel");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T sv = T(scales[size_t(nc % C)]);
    for (int64_t i = 0; i < hw; ++i) po[nc * hw + i] = px[nc * hw + i] * sv;
  }
  if (auto* g = detail::begin_record<T>({&x}, out)) {
    g->add_node("channel_scale", [x, out, scales, N, C, hw]() {
      const T* go = out.storage()->grad.data();
      T* gx = x.storage()->grad.data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const T sv = T(scales[size_t(nc % C)]);
        for (int64_t i = 0; i < hw; ++i) gx[nc * hw + i] += go[nc * hw + i] * sv;
      }
    });
  }
  return out;
}

// x: [N,C,H,W] * m: [N,1,H,W], broadcast over channels.
template <typename T>
inline Tensor<T> broadcast_mul_channel(const Tensor<T>& x, const Tensor<T>& m) {
  if (x.rank() != 4 || m.rank() != 4 || m.dim(1) != 1 || m.dim(0) != x.dim(0) ||
      m.dim(2) != x.dim(2) || m.dim(3) != x.dim(3))
    throw ShapeError("broadcast_mul_channel: mask must be [N,1,H,W] matching x " +
                     shape_str(x.shape()) + " vs " + shape_str(m.shape()));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  const T* px = x.data().data();
  const T* pm = m.data().data();
  T* po = out.mutable_data().data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < hw; ++i)
        po[(n * C + c) * hw + i] = px[(n * C + c) * hw + i] * pm[n * hw + i];
  if (auto* g = detail::begin_record<T>({&x, &m}, out)) {
    g->add_node("broadcast_mul_channel", [x, m, out, N, C, hw]() {
      const T* go = out.storage()->grad.data();
      const T* px = x.data().data();
      const T* pm = m.data().data();
      if (x.requires_grad()) {
        T* gx = x.storage()->grad.data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < hw; ++i)
              gx[(n * C + c) * hw + i] += go[(n * C + c) * hw + i] * pm[n * hw + i];
      }
      if (m.requires_grad()) {
        T* gm = m.storage()->grad.data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < hw; ++i)
              gm[n * hw + i] += go[(n * C + c) * hw + i] * px[(n * C + c) * hw + i];
      }
    });
  }
  return out;
}

// Add a per-head bias table to batched attention logits.
// x: [B, H, T, U], bias: [H, T, U]
template <typename T>
inline Tensor<T> add_head_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 4 || bias.rank() != 3 || x.dim(1) != bias.dim(0) || x.dim(2) != bias.dim(1) ||
      x.dim(3) != bias.dim(2))
    throw ShapeError("add_head_bias: bias " + shape_str(bias.shape()) +
                     " incompatible with logits " + shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t B = x.dim(0), n = bias.numel();
  const T* px = x.data().data();
  const T* pb = bias.data().data();
  T* po = out.mutable_data().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < n; ++i) po[b * n + i] = px[b * n + i] + pb[i];
  if (auto* g = detail::begin_record<T>({&x, &bias}, out)) {
    g->add_node("add_head_bias", [x, bias, out, B, n]() {
      const T* go = out.storage()->grad.data();
      if (x.requires_grad()) {
        T* gx = x.storage()->grad.data();
        for (int64_t i = 0; i < B * n; ++i) gx[i] += go[i];
      }
      if (bias.requires_grad()) {
        T* gb = bias.storage()->grad.data();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < n; ++i) gb[i] += go[b * n + i];
      }
    });
  }
  return out;
}

// Expand a relative-position table into a per-head bias matrix.
// table: [entries, H], index_map: T*T entries -> out [H, T, T]
template <typename T>
inline Tensor<T> gather_bias_table(const Tensor<T>& table, const std::vector<int64_t>& index_map,
                                   int64_t heads, int64_t tokens) {
  if (table.rank() != 2 || table.dim(1) != heads)
    throw ShapeError("gather_bias_table: table must be [entries, heads]");
  if (int64_t(index_map.size()) != tokens * tokens)
    throw ShapeError("gather_bias_table: index map must have tokens^2 entries");
  Tensor<T> out = Tensor<T>::zeros({heads, tokens, tokens});
  const T* pt = table.data().data();
  T* po = out.mutable_data().data();
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t ij = 0; ij < tokens * tokens; ++ij)
      po[h * tokens * tokens + ij] = pt[index_map[size_t(ij)] * heads + h];
  if (auto* g = detail::begin_record<T>({&table}, out)) {
    g->add_node("gather_bias_table", [table, out, index_map, heads, tokens]() {
      const T* go = out.storage()->grad.data();
      T* gt = table.storage()->grad.data();
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t ij = 0; ij < tokens * tokens; ++ij)
          gt[index_map[size_t(ij)] * heads + h] += go[h * tokens * tokens + ij];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution family
// ---------------------------------------------------------------------------

// Direct 2D convolution (cross-correlation, the usual CNN convention).
// x: [N,C,H,W], w: [O,C,kh,kw], b: [O] (may be undefined), odd kernels only.
template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                        int64_t stride = 1, int64_t pad = 0) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be [O,C,kh,kw], got " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: axis 1 (channels) mismatch (" + std::to_string(x.dim(1)) + " vs " +
                     std::to_string(w.dim(1)) + ")");
  const int64_t kh = w.dim(2), kw = w.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if (stride < 1 || pad < 0) throw ValueError("conv2d: stride must be >=1 and pad >=0");
  if (b.defined() && b.numel() != w.dim(0))
    throw ShapeError("conv2d: bias length " + std::to_string(b.numel()) +
                     " does not match output channels " + std::to_string(w.dim(0)));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0);
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho < 1 || Wo < 1)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " does not fit input " + shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::zeros({N, O, Ho, Wo});
  const T* px = x.data().data();
  const T* pw = w.data().data();
  const T* pb = b.defined() ? b.data().data() : nullptr;
  T* po = out.mutable_data().data();
  parallel_for(N * O, [&](int64_t lo, int64_t hi) {
    for (int64_t no = lo; no < hi; ++no) {
      const int64_t n = no / O, o = no % O;
      T* out_plane = po + no * Ho * Wo;
      const T bias = pb ? pb[o] : T(0);
      for (int64_t oy = 0; oy < Ho; ++oy) {
        for (int64_t ox = 0; ox < Wo; ++ox) {
          T acc = bias;
          const int64_t iy0 = oy * stride - pad, ix0 = ox * stride - pad;
          for (int64_t c = 0; c < C; ++c) {
            const T* in_plane = px + (n * C + c) * H * W;
            const T* wk = pw + ((o * C + c) * kh) * kw;
            for (int64_t ky = 0; ky < kh; ++ky) {
              const int64_t iy = iy0 + ky;
              if (iy < 0 || iy >= H) continue;
              const T* in_row = in_plane + iy * W;
              const T* w_row = wk + ky * kw;
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t ix = ix0 + kx;
                if (ix < 0 || ix >= W) continue;
                acc += w_row[kx] * in_row[ix];
              }
            }
          }
          out_plane[oy * Wo + ox] = acc;
        }
      }
    }
  });
  if (auto* g = detail::begin_record<T>({&x, &w, &b}, out)) {
    g->add_node("conv2d", [x, w, b, out, stride, pad, N, C, H, W, O, kh, kw, Ho, Wo]() {
      const T* go = out.storage()->grad.data();
      const T* px = x.data().data();
      const T* pw = w.data().data();
      T* gx = x.requires_grad() ? x.storage()->grad.data() : nullptr;
      T* gw = w.requires_grad() ? w.storage()->grad.data() : nullptr;
      T* gb = (b.defined() && b.requires_grad()) ? b.storage()->grad.data() : nullptr;
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t o = 0; o < O; ++o) {
          const T* gout = go + (n * O + o) * Ho * Wo;
          for (int64_t oy = 0; oy < Ho; ++oy) {
            for (int64_t ox = 0; ox < Wo; ++ox) {
              const T gv = gout[oy * Wo + ox];
              if (gv == T(0)) continue;
              if (gb) gb[o] += gv;
              const int64_t iy0 = oy * stride - pad, ix0 = ox * stride - pad;
              for (int64_t c = 0; c < C; ++c) {
                const int64_t in_base = (n * C + c) * H * W;
                const int64_t w_base = (o * C + c) * kh * kw;
                for (int64_t ky = 0; ky < kh; ++ky) {
                  const int64_t iy = iy0 + ky;
                  if (iy < 0 || iy >= H) continue;
                  for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t ix = ix0 + kx;
                    if (ix < 0 || ix >= W) continue;
                    if (gx) gx[in_base + iy * W + ix] += gv * pw[w_base + ky * kw + kx];
                    if (gw) gw[w_base + ky * kw + kx] += gv * px[in_base + iy * W + ix];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Per-channel (depthwise) convolution, stride 1, same padding.
// x: [N,C,H,W], w: [C,kh,kw] -> [N,C,H,W]
template <typename T>
inline Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() != 4 || w.rank() != 3)
    throw ShapeError("depthwise_conv2d: expects x [N,C,H,W] and w [C,kh,kw]");
  if (x.dim(1) != w.dim(0))
    throw ShapeError("depthwise_conv2d: axis 1 (channels) mismatch (" + std::to_string(x.dim(1)) +
                     " vs " + std::to_string(w.dim(0)) + ")");
  const int64_t kh = w.dim(1), kw = w.dim(2);
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("depthwise_conv2d: kernel extents must be odd");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t ph = kh / 2, pw_ = kw / 2;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  const T* pwv = w.data().data();
  T* po = out.mutable_data().data();
  parallel_for(N * C, [&](int64_t lo, int64_t hi) {
    for (int64_t nc = lo; nc < hi; ++nc) {
      const int64_t c = nc % C;
      const T* in_plane = px + nc * H * W;
      const T* wk = pwv + c * kh * kw;
      T* out_plane = po + nc * H * W;
      for (int64_t oy = 0; oy < H; ++oy) {
        for (int64_t ox = 0; ox < W; ++ox) {
          T acc = T(0);
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy - ph + ky;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox - pw_ + kx;
              if (ix < 0 || ix >= W) continue;
              acc += wk[ky * kw + kx] * in_plane[iy * W + ix];
            }
          }
          out_plane[oy * W + ox] = acc;
        }
      }
    }
  });
  if (auto* g = detail::begin_record<T>({&x, &w}, out)) {
    g->add_node("depthwise_conv2d", [x, w, out, N, C, H, W, kh, kw, ph, pw_]() {
      const T* go = out.storage()->grad.data();
      const T* px = x.data().data();
      const T* pwv = w.data().data();
      T* gx = x.requires_grad() ? x.storage()->grad.data() : nullptr;
      T* gw = w.requires_grad() ? w.storage()->grad.data() : nullptr;
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const int64_t c = nc % C;
        const T* gout = go + nc * H * W;
        for (int64_t oy = 0; oy < H; ++oy) {
          for (int64_t ox = 0; ox < W; ++ox) {
            const T gv = gout[oy * W + ox];
            if (gv == T(0)) continue;
            for (int64_t ky = 0; ky < kh; ++ky) {
              const int64_t iy = oy - ph + ky;
              if (iy < 0 || iy >= H) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t ix = ox - pw_ + kx;
                if (ix < 0 || ix >= W) continue;
                if (gx) gx[nc * H * W + iy * W + ix] += gv * pwv[c * kh * kw + ky * kw + kx];
                if (gw) gw[c * kh * kw + ky * kw + kx] += gv * px[nc * H * W + iy * W + ix];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Depthwise-separable convolution: per-channel spatial kernel followed by a
// 1x1 pointwise mix. w_depth: [C,kh,kw], w_point: [O,C].
template <typename T>
inline Tensor<T> dwconv(const Tensor<T>& x, const Tensor<T>& w_depth, const Tensor<T>& w_point) {
  if (w_point.rank() != 2)
    throw ShapeError("dwconv: pointwise weight must be [O,C]");
  if (w_point.dim(1) != x.dim(1))
    throw ShapeError("dwconv: axis 1 (channels) mismatch (" + std::to_string(x.dim(1)) + " vs " +
                     std::to_string(w_point.dim(1)) + ")");
  Tensor<T> mid = depthwise_conv2d(x, w_depth);
  Tensor<T> pw = w_point.reshape({w_point.dim(0), w_point.dim(1), 1, 1});
  return conv2d(mid, pw, Tensor<T>(), 1, 0);
}

// Average pooling with stride r and ceil-mode output, partial windows are
// averaged over the cells actually present.
template <typename T>
inline Tensor<T> avgpool2d(const Tensor<T>& x, int64_t r) {
  if (x.rank() != 4) throw ShapeError("avgpool2d: input must be [N,C,H,W]");
  if (r < 1) throw ValueError("avgpool2d: pool size must be >= 1");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = (H + r - 1) / r, Wo = (W + r - 1) / r;
  Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* in_plane = px + nc * H * W;
    T* out_plane = po + nc * Ho * Wo;
    for (int64_t oy = 0; oy < Ho; ++oy) {
      const int64_t y0 = oy * r, y1 = std::min(H, y0 + r);
      for (int64_t ox = 0; ox < Wo; ++ox) {
        const int64_t x0 = ox * r, x1 = std::min(W, x0 + r);
        T acc = T(0);
        for (int64_t yy = y0; yy < y1; ++yy)
          for (int64_t xx = x0; xx < x1; ++xx) acc += in_plane[yy * W + xx];
        out_plane[oy * Wo + ox] = acc / T((y1 - y0) * (x1 - x0));
      }
    }
  }
  if (auto* g = detail::begin_record<T>({&x}, out)) {
    g->add_node("avgpool2d", [x, out, r, N, C, H, W, Ho, Wo]() {
      const T* go = out.storage()->grad.data();
      T* gx = x.storage()->grad.data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* gout = go + nc * Ho * Wo;
        T* gin = gx + nc * H * W;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          const int64_t y0 = oy * r, y1 = std::min(H, y0 + r);
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const int64_t x0 = ox * r, x1 = std::min(W, x0 + r);
            const T share = gout[oy * Wo + ox] / T((y1 - y0) * (x1 - x0));
            for (int64_t yy = y0; yy < y1; ++yy)
              for (int64_t xx = x0; xx < x1; ++xx) gin[yy * W + xx] += share;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace flowdet
