#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "scalearn/tape.hpp"
#include "scalearn/tensor.hpp"

namespace scalearn {

namespace detail {

// C(m x n) = A(m x k) * B(k x n), row-major. The (i,l,j) order keeps the
// inner loop a contiguous axpy over C and B rows, which vectorizes well;
// four A-rows per pass reuse each loaded B row.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        const T* a0 = a + i * k;
        const T* a1 = a0 + k;
        const T* a2 = a1 + k;
        const T* a3 = a2 + k;
        T* c0 = c + i * n;
        T* c1 = c0 + n;
        T* c2 = c1 + n;
        T* c3 = c2 + n;
        for (size_t l = 0; l < k; ++l) {
            const T v0 = a0[l], v1 = a1[l], v2 = a2[l], v3 = a3[l];
            const T* brow = b + l * n;
            for (size_t j = 0; j < n; ++j) {
                const T bj = brow[j];
                c0[j] += v0 * bj;
                c1[j] += v1 * bj;
                c2[j] += v2 * bj;
                c3[j] += v3 * bj;
            }
        }
    }
    for (; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (size_t l = 0; l < k; ++l) {
            const T ail = arow[l];
            const T* brow = b + l * n;
            for (size_t j = 0; j < n; ++j) crow[j] += ail * brow[j];
        }
    }
}

template <typename T>
void transpose(const T* a, T* at, size_t m, size_t n) {
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) at[j * m + i] = a[i * n + j];
}

template <typename T>
bool any_requires_grad(const std::vector<Tensor<T>>& xs) {
    for (const auto& x : xs)
        if (x.requires_grad()) return true;
    return false;
}

template <typename T>
Tensor<T> randn_tensor(Shape shape, Rng& rng, double stddev) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t.at(i) = T(rng.normal(0.0, stddev));
    return t;
}

// Marks the output as a graph node and appends the backward record when a
// tape is active and the value actually depends on tracked parameters.
template <typename T, typename Fn>
void track(Tensor<T>& out, bool inputs_need_grad, const char* op, Fn&& backward) {
    if (inputs_need_grad && grad_enabled<T>()) {
        out.set_requires_grad(true);
        Tape<T>::current()->record(op, std::forward<Fn>(backward));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: (m x k) * (k x n) -> (m x n).  d a = g * b^T, d b = a^T * g.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.dim() != 2 || b.dim() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
    }
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::gemm_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);

    const bool need = a.requires_grad() || b.requires_grad();
    detail::track(out, need, "matmul", [a, b, out, m, k, n]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad().data();
        if (a.requires_grad()) {
            std::vector<T> bt(k * n);
            detail::transpose(b.ptr(), bt.data(), k, n);
            detail::gemm_nn(g, bt.data(), a.ensure_grad().data(), m, n, k, true);
        }
        if (b.requires_grad()) {
            std::vector<T> at(m * k);
            detail::transpose(a.ptr(), at.data(), m, k);
            detail::gemm_nn(at.data(), g, b.ensure_grad().data(), k, m, n, true);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// add with the broadcasts the models need: equal shapes, [N x d] + [d] bias
// rows, or [1] scalar.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    enum class Mode { Equal, BiasRow, Scalar } mode;
    if (a.numel() == b.numel() && a.shape() == b.shape()) {
        mode = Mode::Equal;
    } else if (b.numel() == 1) {
        mode = Mode::Scalar;
    } else if (a.dim() == 2 && b.numel() == a.cols() &&
               (b.dim() == 1 || (b.dim() == 2 && b.rows() == 1))) {
        mode = Mode::BiasRow;
    } else {
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " + " +
                         shape_str(b.shape()));
    }

    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const size_t n = a.numel();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    switch (mode) {
        case Mode::Equal:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case Mode::Scalar:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[0];
            break;
        case Mode::BiasRow: {
            const size_t cols = a.cols();
            for (size_t r = 0; r < n; r += cols)
                for (size_t j = 0; j < cols; ++j) po[r + j] = pa[r + j] + pb[j];
            break;
        }
    }

    const bool need = a.requires_grad() || b.requires_grad();
    detail::track(out, need, "add", [a, b, out, mode]() mutable {
        if (!out.has_grad()) return;
        const std::vector<T>& g = out.grad();
        if (a.requires_grad()) {
            std::vector<T>& ga = a.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            std::vector<T>& gb = b.ensure_grad();
            switch (mode) {
                case Mode::Equal:
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                    break;
                case Mode::Scalar: {
                    T s = 0;
                    for (T v : g) s += v;
                    gb[0] += s;
                    break;
                }
                case Mode::BiasRow: {
                    const size_t cols = b.numel();
                    for (size_t r = 0; r < g.size(); r += cols)
                        for (size_t j = 0; j < cols; ++j) gb[j] += g[r + j];
                    break;
                }
            }
        }
    });
    return out;
}

// Fused y = x W + b. One output pass instead of matmul-then-add.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.dim() != 2 || w.dim() != 2 || x.cols() != w.rows() || b.numel() != w.cols())
        throw ShapeError("affine shape mismatch: " + shape_str(x.shape()) + " * " +
                         shape_str(w.shape()) + " + " + shape_str(b.shape()));
    const size_t m = x.rows(), k = x.cols(), n = w.cols();
    Tensor<T> out = Tensor<T>::zeros({m, n});
    T* po = out.ptr();
    const T* pb = b.ptr();
    for (size_t i = 0; i < m; ++i) std::copy_n(pb, n, po + i * n);
    detail::gemm_nn(x.ptr(), w.ptr(), po, m, k, n, true);

    const bool need = x.requires_grad() || w.requires_grad() || b.requires_grad();
    detail::track(out, need, "affine", [x, w, b, out, m, k, n]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad().data();
        if (x.requires_grad()) {
            std::vector<T> wt(k * n);
            detail::transpose(w.ptr(), wt.data(), k, n);
            detail::gemm_nn(g, wt.data(), x.ensure_grad().data(), m, n, k, true);
        }
        if (w.requires_grad()) {
            std::vector<T> xt(m * k);
            detail::transpose(x.ptr(), xt.data(), m, k);
            detail::gemm_nn(xt.data(), g, w.ensure_grad().data(), k, m, n, true);
        }
        if (b.requires_grad()) {
            std::vector<T>& gb = b.ensure_grad();
            for (size_t r = 0; r < m * n; r += n)
                for (size_t j = 0; j < n; ++j) gb[j] += g[r + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise (Hadamard) product. Broadcasts on the right operand:
// [N x d] * [d] scales columns per row, [N x d] * [N x 1] scales rows,
// [1] scales everything.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    enum class Mode { Equal, RowVec, ColVec, Scalar } mode;
    if (a.shape() == b.shape()) {
        mode = Mode::Equal;
    } else if (b.numel() == 1) {
        mode = Mode::Scalar;
    } else if (a.dim() == 2 && b.numel() == a.cols() &&
               (b.dim() == 1 || (b.dim() == 2 && b.rows() == 1))) {
        mode = Mode::RowVec;
    } else if (a.dim() == 2 && b.dim() == 2 && b.cols() == 1 && b.rows() == a.rows()) {
        mode = Mode::ColVec;
    } else {
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
    }

    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const size_t n = a.numel();
    const size_t cols = a.dim() == 2 ? a.cols() : a.numel();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    switch (mode) {
        case Mode::Equal:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
        case Mode::Scalar:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[0];
            break;
        case Mode::RowVec:
            for (size_t r = 0; r < n; r += cols)
                for (size_t j = 0; j < cols; ++j) po[r + j] = pa[r + j] * pb[j];
            break;
        case Mode::ColVec:
            for (size_t r = 0, i = 0; i < n; ++r, i += cols)
                for (size_t j = 0; j < cols; ++j) po[i + j] = pa[i + j] * pb[r];
            break;
    }

    const bool need = a.requires_grad() || b.requires_grad();
    detail::track(out, need, "mul", [a, b, out, mode, cols]() mutable {
        if (!out.has_grad()) return;
        const std::vector<T>& g = out.grad();
        const T* pa = a.ptr();
        const T* pb = b.ptr();
        if (a.requires_grad()) {
            std::vector<T>& ga = a.ensure_grad();
            switch (mode) {
                case Mode::Equal:
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i];
                    break;
                case Mode::Scalar:
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[0];
                    break;
                case Mode::RowVec:
                    for (size_t r = 0; r < g.size(); r += cols)
                        for (size_t j = 0; j < cols; ++j) ga[r + j] += g[r + j] * pb[j];
                    break;
                case Mode::ColVec:
                    for (size_t r = 0, i = 0; i < g.size(); ++r, i += cols)
                        for (size_t j = 0; j < cols; ++j) ga[i + j] += g[i + j] * pb[r];
                    break;
            }
        }
        if (b.requires_grad()) {
            std::vector<T>& gb = b.ensure_grad();
            switch (mode) {
                case Mode::Equal:
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa[i];
                    break;
                case Mode::Scalar: {
                    T s = 0;
                    for (size_t i = 0; i < g.size(); ++i) s += g[i] * pa[i];
                    gb[0] += s;
                    break;
                }
                case Mode::RowVec:
                    for (size_t r = 0; r < g.size(); r += cols)
                        for (size_t j = 0; j < cols; ++j) gb[j] += g[r + j] * pa[r + j];
                    break;
                case Mode::ColVec:
                    for (size_t r = 0, i = 0; i < g.size(); ++r, i += cols)
                        for (size_t j = 0; j < cols; ++j) gb[r] += g[i + j] * pa[i + j];
                    break;
            }
        }
    });
    return out;
}

// Elementwise quotient, equal shapes. Zero denominators are an error.
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("div shape mismatch: " + shape_str(a.shape()) + " / " +
                         shape_str(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) {
        if (b.at(i) == T(0)) throw NumericError("div by zero at index " + std::to_string(i));
        out.at(i) = a.at(i) / b.at(i);
    }
    const bool need = a.requires_grad() || b.requires_grad();
    detail::track(out, need, "div", [a, b, out]() mutable {
        if (!out.has_grad()) return;
        const std::vector<T>& g = out.grad();
        if (a.requires_grad()) {
            std::vector<T>& ga = a.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / b.at(i);
        }
        if (b.requires_grad()) {
            std::vector<T>& gb = b.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i)
                gb[i] -= g[i] * a.at(i) / (b.at(i) * b.at(i));
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * T(s);
    detail::track(out, a.requires_grad(), "scale", [a, out, s]() mutable {
        if (!out.has_grad()) return;
        std::vector<T>& ga = a.ensure_grad();
        const std::vector<T>& g = out.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * T(s);
    });
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, scale(b, -1.0));
}

// max(0, x); subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) > T(0) ? a.at(i) : T(0);
    detail::track(out, a.requires_grad(), "relu", [a, out]() mutable {
        if (!out.has_grad()) return;
        std::vector<T>& ga = a.ensure_grad();
        const std::vector<T>& g = out.grad();
        for (size_t i = 0; i < g.size(); ++i)
            if (a.at(i) > T(0)) ga[i] += g[i];
    });
    return out;
}

// Max-subtracted softmax along an axis of a 1-D or 2-D tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
    const bool is1d = a.dim() == 1;
    if (is1d && axis != 0) throw ShapeError("softmax: axis out of range for 1-D tensor");
    if (!is1d && (a.dim() != 2 || (axis != 0 && axis != 1)))
        throw ShapeError("softmax: expected 1-D or 2-D tensor with axis 0/1, got " +
                         shape_str(a.shape()) + " axis " + std::to_string(axis));

    const size_t rows = is1d ? 1 : a.rows();
    const size_t cols = is1d ? a.numel() : a.cols();
    // Normalize along rows; axis 0 on 2-D works on the transposed view.
    const bool along_cols = is1d || axis == 1;
    const size_t groups = along_cols ? rows : cols;
    const size_t extent = along_cols ? cols : rows;
    const size_t stride = along_cols ? 1 : cols;

    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t gidx = 0; gidx < groups; ++gidx) {
        const size_t base = along_cols ? gidx * cols : gidx;
        T mx = a.at(base);
        for (size_t i = 1; i < extent; ++i) mx = std::max(mx, a.at(base + i * stride));
        T denom = 0;
        for (size_t i = 0; i < extent; ++i) {
            T e = std::exp(a.at(base + i * stride) - mx);
            out.at(base + i * stride) = e;
            denom += e;
        }
        for (size_t i = 0; i < extent; ++i) out.at(base + i * stride) /= denom;
    }
    check_finite(out, "softmax");

    detail::track(out, a.requires_grad(), "softmax",
                  [a, out, groups, extent, stride, along_cols, cols]() mutable {
                      if (!out.has_grad()) return;
                      std::vector<T>& ga = a.ensure_grad();
                      const std::vector<T>& g = out.grad();
                      for (size_t gidx = 0; gidx < groups; ++gidx) {
                          const size_t base = along_cols ? gidx * cols : gidx;
                          T dot = 0;
                          for (size_t i = 0; i < extent; ++i) {
                              const size_t k = base + i * stride;
                              dot += g[k] * out.at(k);
                          }
                          for (size_t i = 0; i < extent; ++i) {
                              const size_t k = base + i * stride;
                              ga[k] += out.at(k) * (g[k] - dot);
                          }
                      }
                  });
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (size_t i = 0; i < a.numel(); ++i) s += a.at(i);
    Tensor<T> out = Tensor<T>::scalar(s);
    detail::track(out, a.requires_grad(), "sum", [a, out]() mutable {
        if (!out.has_grad()) return;
        const T g = out.grad()[0];
        std::vector<T>& ga = a.ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), 1.0 / double(a.numel()));
}

// axis 0 collapses rows -> [cols]; axis 1 collapses cols -> [rows].
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
    if (a.dim() != 2 || (axis != 0 && axis != 1))
        throw ShapeError("sum_axis: expected 2-D tensor with axis 0/1");
    const size_t rows = a.rows(), cols = a.cols();
    Tensor<T> out = Tensor<T>::zeros({axis == 0 ? cols : rows});
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c) out.at(axis == 0 ? c : r) += a.at(r, c);
    detail::track(out, a.requires_grad(), "sum_axis", [a, out, rows, cols, axis]() mutable {
        if (!out.has_grad()) return;
        std::vector<T>& ga = a.ensure_grad();
        const std::vector<T>& g = out.grad();
        for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[axis == 0 ? c : r];
    });
    return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis) {
    const double n = axis == 0 ? double(a.rows()) : double(a.cols());
    return scale(sum_axis(a, axis), 1.0 / n);
}

// Row-wise layer normalization of [N x d] with learned gain/bias of shape [d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5) {
    if (x.dim() != 2 || gain.numel() != x.cols() || bias.numel() != x.cols())
        throw ShapeError("layer_norm: expected [N x d] with d-sized gain/bias");
    const size_t rows = x.rows(), d = x.cols();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    Tensor<T> xhat = Tensor<T>::zeros(x.shape());
    std::vector<T> inv_std(rows);
    for (size_t r = 0; r < rows; ++r) {
        T mu = 0;
        for (size_t c = 0; c < d; ++c) mu += x.at(r, c);
        mu /= T(d);
        T var = 0;
        for (size_t c = 0; c < d; ++c) {
            const T dv = x.at(r, c) - mu;
            var += dv * dv;
        }
        var /= T(d);
        const T istd = T(1) / std::sqrt(var + T(eps));
        inv_std[r] = istd;
        for (size_t c = 0; c < d; ++c) {
            const T xh = (x.at(r, c) - mu) * istd;
            xhat.at(r, c) = xh;
            out.at(r, c) = xh * gain.at(c) + bias.at(c);
        }
    }
    check_finite(out, "layer_norm");

    const bool need = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    detail::track(out, need, "layer_norm",
                  [x, gain, bias, out, xhat, inv_std, rows, d]() mutable {
                      if (!out.has_grad()) return;
                      const std::vector<T>& g = out.grad();
                      if (gain.requires_grad()) {
                          std::vector<T>& gg = gain.ensure_grad();
                          for (size_t r = 0; r < rows; ++r)
                              for (size_t c = 0; c < d; ++c)
                                  gg[c] += g[r * d + c] * xhat.at(r, c);
                      }
                      if (bias.requires_grad()) {
                          std::vector<T>& gb = bias.ensure_grad();
                          for (size_t r = 0; r < rows; ++r)
                              for (size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
                      }
                      if (x.requires_grad()) {
                          std::vector<T>& gx = x.ensure_grad();
                          for (size_t r = 0; r < rows; ++r) {
                              T m1 = 0, m2 = 0;
                              for (size_t c = 0; c < d; ++c) {
                                  const T dxh = g[r * d + c] * gain.at(c);
                                  m1 += dxh;
                                  m2 += dxh * xhat.at(r, c);
                              }
                              m1 /= T(d);
                              m2 /= T(d);
                              for (size_t c = 0; c < d; ++c) {
                                  const T dxh = g[r * d + c] * gain.at(c);
                                  gx[r * d + c] += inv_std[r] * (dxh - m1 - xhat.at(r, c) * m2);
                              }
                          }
                      }
                  });
    return out;
}

// Inverted dropout: kept activations are scaled by 1/(1-p) at train time so
// eval is the identity (and returns the input tensor unchanged).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool train, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must be in [0, 1)");
    if (!train || p == 0.0) return x;
    const size_t n = x.numel();
    Tensor<T> mask = Tensor<T>::zeros(x.shape());
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T keep = T(1.0 / (1.0 - p));
    const T* px = x.ptr();
    T* pm = mask.ptr();
    T* po = out.ptr();
    for (size_t i = 0; i < n; ++i) {
        const T m = rng.bernoulli(p) ? T(0) : keep;
        pm[i] = m;
        po[i] = px[i] * m;
    }
    detail::track(out, x.requires_grad(), "dropout", [x, mask, out]() mutable {
        if (!out.has_grad()) return;
        std::vector<T>& gx = x.ensure_grad();
        const std::vector<T>& g = out.grad();
        const T* pm = mask.ptr();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * pm[i];
    });
    return out;
}

// Row gather from an embedding table: out[i] = table[ids[i]].
template <typename T>
Tensor<T> embedding(const std::vector<int>& ids, const Tensor<T>& table) {
    if (table.dim() != 2) throw ShapeError("embedding: table must be 2-D");
    const size_t v = table.rows(), d = table.cols();
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || size_t(ids[i]) >= v)
            throw DataError("embedding: token id " + std::to_string(ids[i]) + " at position " +
                            std::to_string(i) + " out of range [0, " + std::to_string(v) + ")");
    }
    Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.ptr() + size_t(ids[i]) * d, d, out.ptr() + i * d);
    detail::track(out, table.requires_grad(), "embedding", [ids, table, out, d]() mutable {
        if (!out.has_grad()) return;
        std::vector<T>& gt = table.ensure_grad();
        const std::vector<T>& g = out.grad();
        for (size_t i = 0; i < ids.size(); ++i)
            for (size_t c = 0; c < d; ++c) gt[size_t(ids[i]) * d + c] += g[i * d + c];
    });
    return out;
}

// Mean cross-entropy over rows of [B x C] logits, with log-sum-exp stability.
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.dim() != 2 || logits.rows() != labels.size())
        throw ShapeError("cross_entropy_loss: logits " + shape_str(logits.shape()) +
                         " vs " + std::to_string(labels.size()) + " labels");
    const size_t b = logits.rows(), c = logits.cols();
    Tensor<T> probs = Tensor<T>::zeros(logits.shape());
    T total = 0;
    for (size_t r = 0; r < b; ++r) {
        if (labels[r] < 0 || size_t(labels[r]) >= c)
            throw DataError("cross_entropy_loss: label " + std::to_string(labels[r]) +
                            " out of range for " + std::to_string(c) + " classes");
        T mx = logits.at(r, 0);
        for (size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(r, j));
        T denom = 0;
        for (size_t j = 0; j < c; ++j) {
            const T e = std::exp(logits.at(r, j) - mx);
            probs.at(r, j) = e;
            denom += e;
        }
        for (size_t j = 0; j < c; ++j) probs.at(r, j) /= denom;
        total += std::log(denom) + mx - logits.at(r, size_t(labels[r]));
    }
    Tensor<T> out = Tensor<T>::scalar(total / T(b));
    check_finite(out, "cross_entropy_loss");
    detail::track(out, logits.requires_grad(), "cross_entropy_loss",
                  [logits, labels, probs, out, b, c]() mutable {
                      if (!out.has_grad()) return;
                      const T g = out.grad()[0] / T(b);
                      std::vector<T>& gl = logits.ensure_grad();
                      for (size_t r = 0; r < b; ++r)
                          for (size_t j = 0; j < c; ++j) {
                              T p = probs.at(r, j);
                              if (j == size_t(labels[r])) p -= T(1);
                              gl[r * c + j] += g * p;
                          }
                  });
    return out;
}

// Mean squared error against a constant target.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const std::vector<T>& target) {
    if (pred.numel() != target.size())
        throw ShapeError("mse_loss: " + std::to_string(pred.numel()) + " predictions vs " +
                         std::to_string(target.size()) + " targets");
    const size_t n = pred.numel();
    T total = 0;
    for (size_t i = 0; i < n; ++i) {
        const T d = pred.at(i) - target[i];
        total += d * d;
    }
    Tensor<T> out = Tensor<T>::scalar(total / T(n));
    check_finite(out, "mse_loss");
    detail::track(out, pred.requires_grad(), "mse_loss", [pred, target, out, n]() mutable {
        if (!out.has_grad()) return;
        const T g = out.grad()[0] * T(2) / T(n);
        std::vector<T>& gp = pred.ensure_grad();
        for (size_t i = 0; i < n; ++i) gp[i] += g * (pred.at(i) - target[i]);
    });
    return out;
}

// Concatenation along axis 0 (rows) or axis 1 (cols). 1-D tensors join on
// axis 0. Used to assemble full-split prediction vectors before metrics so
// correlation is computed once over the whole split.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const size_t dim = parts[0].dim();
    if ((dim == 1 && axis != 0) || (dim == 2 && axis != 0 && axis != 1) || dim > 2)
        throw ShapeError("concat: unsupported rank/axis");

    Shape out_shape = parts[0].shape();
    for (size_t i = 1; i < parts.size(); ++i) {
        const auto& s = parts[i].shape();
        if (s.size() != dim) throw ShapeError("concat: rank mismatch");
        if (dim == 2 && axis == 0 && s[1] != out_shape[1])
            throw ShapeError("concat: column mismatch");
        if (dim == 2 && axis == 1 && s[0] != out_shape[0])
            throw ShapeError("concat: row mismatch");
        out_shape[size_t(axis)] += s[size_t(axis)];
    }

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    std::vector<size_t> offsets(parts.size());
    if (dim == 1 || axis == 0) {
        size_t pos = 0;
        for (size_t i = 0; i < parts.size(); ++i) {
            offsets[i] = pos;
            std::copy_n(parts[i].ptr(), parts[i].numel(), out.ptr() + pos);
            pos += parts[i].numel();
        }
    } else {
        const size_t rows = out_shape[0], out_cols = out_shape[1];
        size_t col0 = 0;
        for (size_t i = 0; i < parts.size(); ++i) {
            offsets[i] = col0;
            const size_t pc = parts[i].cols();
            for (size_t r = 0; r < rows; ++r)
                std::copy_n(parts[i].ptr() + r * pc, pc, out.ptr() + r * out_cols + col0);
            col0 += pc;
        }
    }

    detail::track(out, detail::any_requires_grad(parts), "concat",
                  [parts, out, offsets, axis, dim]() mutable {
                      if (!out.has_grad()) return;
                      const std::vector<T>& g = out.grad();
                      for (size_t i = 0; i < parts.size(); ++i) {
                          if (!parts[i].requires_grad()) continue;
                          std::vector<T>& gp = parts[i].ensure_grad();
                          if (dim == 1 || axis == 0) {
                              for (size_t k = 0; k < gp.size(); ++k) gp[k] += g[offsets[i] + k];
                          } else {
                              const size_t out_cols = out.cols(), pc = parts[i].cols();
                              for (size_t r = 0; r < parts[i].rows(); ++r)
                                  for (size_t c = 0; c < pc; ++c)
                                      gp[r * pc + c] += g[r * out_cols + offsets[i] + c];
                          }
                      }
                  });
    return out;
}

// 2-D transpose as a graph op (used for weight tying).
template <typename T>
Tensor<T> transpose_op(const Tensor<T>& a) {
    if (a.dim() != 2) throw ShapeError("transpose: expected 2-D tensor");
    const size_t m = a.rows(), n = a.cols();
    Tensor<T> out = Tensor<T>::zeros({n, m});
    detail::transpose(a.ptr(), out.ptr(), m, n);
    detail::track(out, a.requires_grad(), "transpose", [a, out, m, n]() mutable {
        if (!out.has_grad()) return;
        std::vector<T>& ga = a.ensure_grad();
        const std::vector<T>& g = out.grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor<T> out = Tensor<T>::from(std::move(shape), a.vec());
    detail::track(out, a.requires_grad(), "reshape", [a, out]() mutable {
        if (!out.has_grad()) return;
        std::vector<T>& ga = a.ensure_grad();
        const std::vector<T>& g = out.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

// Row gather; backward scatter-adds.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& a, const std::vector<size_t>& rows) {
    if (a.dim() != 2) throw ShapeError("take_rows: expected 2-D tensor");
    const size_t d = a.cols();
    for (size_t r : rows)
        if (r >= a.rows()) throw ShapeError("take_rows: row index out of range");
    Tensor<T> out = Tensor<T>::zeros({rows.size(), d});
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(a.ptr() + rows[i] * d, d, out.ptr() + i * d);
    detail::track(out, a.requires_grad(), "take_rows", [a, out, rows, d]() mutable {
        if (!out.has_grad()) return;
        std::vector<T>& ga = a.ensure_grad();
        const std::vector<T>& g = out.grad();
        for (size_t i = 0; i < rows.size(); ++i)
            for (size_t c = 0; c < d; ++c) ga[rows[i] * d + c] += g[i * d + c];
    });
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, size_t r0, size_t r1) {
    if (a.dim() != 2 || r1 > a.rows() || r0 >= r1)
        throw ShapeError("slice_rows: bad range");
    std::vector<size_t> rows(r1 - r0);
    for (size_t i = 0; i < rows.size(); ++i) rows[i] = r0 + i;
    return take_rows(a, rows);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, size_t c0, size_t c1) {
    if (a.dim() != 2 || c1 > a.cols() || c0 >= c1)
        throw ShapeError("slice_cols: bad range");
    const size_t rows = a.rows(), cols = a.cols(), width = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros({rows, width});
    for (size_t r = 0; r < rows; ++r)
        std::copy_n(a.ptr() + r * cols + c0, width, out.ptr() + r * width);
    detail::track(out, a.requires_grad(), "slice_cols", [a, out, rows, cols, c0, width]() mutable {
        if (!out.has_grad()) return;
        std::vector<T>& ga = a.ensure_grad();
        const std::vector<T>& g = out.grad();
        for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < width; ++c) ga[r * cols + c0 + c] += g[r * width + c];
    });
    return out;
}

// Batched multi-head scaled dot-product self-attention over packed rows.
// q/k/v are [B*T x d]; head h occupies columns [h*dh, (h+1)*dh).
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              size_t batch, size_t seq_len, size_t n_heads) {
    if (q.dim() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("multihead_attention: q/k/v shapes must match");
    const size_t d = q.cols();
    if (q.rows() != batch * seq_len || d % n_heads != 0)
        throw ShapeError("multihead_attention: inconsistent batch/seq/head layout");
    const size_t dh = d / n_heads;
    const T att_scale = T(1) / std::sqrt(T(dh));

    Tensor<T> out = Tensor<T>::zeros(q.shape());
    // Row-major probs per (b, h): seq_len x seq_len.
    Tensor<T> probs = Tensor<T>::zeros({batch * n_heads, seq_len * seq_len});
    std::vector<T> scores(seq_len);
    for (size_t b = 0; b < batch; ++b) {
        const size_t row0 = b * seq_len;
        for (size_t h = 0; h < n_heads; ++h) {
            const size_t col0 = h * dh;
            T* prob = probs.ptr() + (b * n_heads + h) * seq_len * seq_len;
            for (size_t t = 0; t < seq_len; ++t) {
                const T* qrow = q.ptr() + (row0 + t) * d + col0;
                T mx = -std::numeric_limits<T>::infinity();
                for (size_t u = 0; u < seq_len; ++u) {
                    const T* krow = k.ptr() + (row0 + u) * d + col0;
                    T s = 0;
                    for (size_t c = 0; c < dh; ++c) s += qrow[c] * krow[c];
                    s *= att_scale;
                    scores[u] = s;
                    mx = std::max(mx, s);
                }
                T denom = 0;
                for (size_t u = 0; u < seq_len; ++u) {
                    const T e = std::exp(scores[u] - mx);
                    prob[t * seq_len + u] = e;
                    denom += e;
                }
                T* orow = out.ptr() + (row0 + t) * d + col0;
                for (size_t u = 0; u < seq_len; ++u) {
                    const T p = prob[t * seq_len + u] / denom;
                    prob[t * seq_len + u] = p;
                    const T* vrow = v.ptr() + (row0 + u) * d + col0;
                    for (size_t c = 0; c < dh; ++c) orow[c] += p * vrow[c];
                }
            }
        }
    }

    const bool need = q.requires_grad() || k.requires_grad() || v.requires_grad();
    detail::track(out, need, "multihead_attention",
                  [q, k, v, out, probs, batch, seq_len, n_heads, dh, d, att_scale]() mutable {
        if (!out.has_grad()) return;
        const std::vector<T>& g = out.grad();
        std::vector<T>* gq = q.requires_grad() ? &q.ensure_grad() : nullptr;
        std::vector<T>* gk = k.requires_grad() ? &k.ensure_grad() : nullptr;
        std::vector<T>* gv = v.requires_grad() ? &v.ensure_grad() : nullptr;
        std::vector<T> gprob(seq_len), gscore(seq_len);
        for (size_t b = 0; b < batch; ++b) {
            const size_t row0 = b * seq_len;
            for (size_t h = 0; h < n_heads; ++h) {
                const size_t col0 = h * dh;
                const T* prob = probs.ptr() + (b * n_heads + h) * seq_len * seq_len;
                for (size_t t = 0; t < seq_len; ++t) {
                    const T* grow = g.data() + (row0 + t) * d + col0;
                    // d probs and softmax backward for this query position
                    T dot = 0;
                    for (size_t u = 0; u < seq_len; ++u) {
                        const T* vrow = v.ptr() + (row0 + u) * d + col0;
                        T s = 0;
                        for (size_t c = 0; c < dh; ++c) s += grow[c] * vrow[c];
                        gprob[u] = s;
                        dot += s * prob[t * seq_len + u];
                    }
                    for (size_t u = 0; u < seq_len; ++u)
                        gscore[u] = prob[t * seq_len + u] * (gprob[u] - dot) * att_scale;
                    if (gv) {
                        for (size_t u = 0; u < seq_len; ++u) {
                            T* gvrow = gv->data() + (row0 + u) * d + col0;
                            const T p = prob[t * seq_len + u];
                            for (size_t c = 0; c < dh; ++c) gvrow[c] += p * grow[c];
                        }
                    }
                    if (gq) {
                        T* gqrow = gq->data() + (row0 + t) * d + col0;
                        for (size_t u = 0; u < seq_len; ++u) {
                            const T* krow = k.ptr() + (row0 + u) * d + col0;
                            for (size_t c = 0; c < dh; ++c) gqrow[c] += gscore[u] * krow[c];
                        }
                    }
                    if (gk) {
                        const T* qrow = q.ptr() + (row0 + t) * d + col0;
                        for (size_t u = 0; u < seq_len; ++u) {
                            T* gkrow = gk->data() + (row0 + u) * d + col0;
                            for (size_t c = 0; c < dh; ++c) gkrow[c] += gscore[u] * qrow[c];
                        }
                    }
                }
            }
        }
    });
    return out;
}

}  // namespace scalearn
