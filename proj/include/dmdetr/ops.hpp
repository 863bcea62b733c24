#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dmdetr/tensor.hpp"

namespace dmdetr {

namespace detail {

// C(m x n) (+)= op(A) * op(B), row-major. Hand-rolled on purpose: each C[i][j]
// accumulates in a fixed l = 0..k-1 order that never depends on m or n, so
// results for existing rows are bit-identical when a sequence grows. Library
// BLAS kernels switch blocking with the extents and break that property.
inline void gemm(bool ta, bool tb, int m, int n, int k, const double* a, const double* b,
                 double* c, double beta) {
    if (beta == 0.0) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    // Materializing op(A) keeps the hot loops on contiguous loads; the copy
    // touches no arithmetic, so it cannot perturb results.
    thread_local std::vector<double> at;
    if (ta) {
        if (at.size() < static_cast<std::size_t>(m) * k)
            at.resize(static_cast<std::size_t>(m) * k);
        for (int l = 0; l < k; ++l)
            for (int i = 0; i < m; ++i)
                at[static_cast<std::size_t>(i) * k + l] = a[static_cast<std::size_t>(l) * m + i];
        a = at.data();
    }
    int k4 = k & ~3;
    auto av = [&](int i, int l) { return a[static_cast<std::size_t>(i) * k + l]; };
    if (!tb) {
        // i, l(x4), j with the same grouped expression for every row: the
        // accumulation pattern of C[i][j] depends on k alone.
        for (int i = 0; i < m; ++i) {
            double* crow = c + static_cast<std::size_t>(i) * n;
            int l = 0;
            for (; l < k4; l += 4) {
                double a0 = av(i, l), a1 = av(i, l + 1), a2 = av(i, l + 2), a3 = av(i, l + 3);
                const double* b0 = b + static_cast<std::size_t>(l) * n;
                const double* b1 = b0 + n;
                const double* b2 = b1 + n;
                const double* b3 = b2 + n;
                for (int j = 0; j < n; ++j)
                    crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            for (; l < k; ++l) {
                double a0 = av(i, l);
                const double* brow = b + static_cast<std::size_t>(l) * n;
                for (int j = 0; j < n; ++j) crow[j] += a0 * brow[j];
            }
        }
    } else {
        // dot products with four independent accumulators, combined in a
        // fixed tree; again only k shapes the rounding sequence
        for (int i = 0; i < m; ++i) {
            double* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const double* bj = b + static_cast<std::size_t>(j) * k;
                double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
                int l = 0;
                for (; l < k4; l += 4) {
                    s0 += av(i, l) * bj[l];
                    s1 += av(i, l + 1) * bj[l + 1];
                    s2 += av(i, l + 2) * bj[l + 2];
                    s3 += av(i, l + 3) * bj[l + 3];
                }
                double acc = (s0 + s1) + (s2 + s3);
                for (; l < k; ++l) acc += av(i, l) * bj[l];
                crow[j] += acc;
            }
        }
    }
}

}  // namespace detail

// ---- matmul ---------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
                     bool trans_b = false) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul: expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int m = trans_a ? a.dim(1) : a.dim(0);
    int ka = trans_a ? a.dim(0) : a.dim(1);
    int kb = trans_b ? b.dim(1) : b.dim(0);
    int n = trans_b ? b.dim(0) : b.dim(1);
    if (ka != kb)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         (trans_a ? "^T" : "") + " vs " + shape_str(b.shape()) +
                         (trans_b ? "^T" : ""));
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    detail::gemm(trans_a, trans_b, m, n, ka, a.values().data(), b.values().data(), out.data(),
                 0.0);
    return make_op({m, n}, std::move(out), {a, b}, [a, b, m, n, ka, trans_a, trans_b](TensorNode& o) mutable {
        const double* g = o.grad.data();
        if (a.requires_grad()) {
            double* ga = a.grad().data();
            if (!trans_a) {
                // dA = G * op(B)^T
                if (!trans_b)
                    detail::gemm(false, true, m, ka, n, g, b.values().data(), ga, 1.0);
                else
                    detail::gemm(false, false, m, ka, n, g, b.values().data(), ga, 1.0);
            } else {
                // dA = op(B) * G^T
                if (!trans_b)
                    detail::gemm(false, true, ka, m, n, b.values().data(), g, ga, 1.0);
                else
                    detail::gemm(true, true, ka, m, n, b.values().data(), g, ga, 1.0);
            }
        }
        if (b.requires_grad()) {
            double* gb = b.grad().data();
            if (!trans_b) {
                // dB = op(A)^T * G
                if (!trans_a)
                    detail::gemm(true, false, ka, n, m, a.values().data(), g, gb, 1.0);
                else
                    detail::gemm(false, false, ka, n, m, a.values().data(), g, gb, 1.0);
            } else {
                // dB = G^T * op(A)
                if (!trans_a)
                    detail::gemm(true, false, n, ka, m, g, a.values().data(), gb, 1.0);
                else
                    detail::gemm(true, true, n, ka, m, g, a.values().data(), gb, 1.0);
            }
        }
    });
}

// y = x*W + b, with b broadcast over rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1)
        throw ShapeError("linear: bad ranks " + shape_str(x.shape()) + ", " +
                         shape_str(w.shape()) + ", " + shape_str(b.shape()));
    if (x.dim(1) != w.dim(0) || w.dim(1) != b.dim(0))
        throw ShapeError("linear: shapes disagree " + shape_str(x.shape()) + " * " +
                         shape_str(w.shape()) + " + " + shape_str(b.shape()));
    int m = x.dim(0), k = x.dim(1), n = w.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        std::copy(b.values().begin(), b.values().end(), out.begin() + static_cast<std::size_t>(i) * n);
    detail::gemm(false, false, m, n, k, x.values().data(), w.values().data(), out.data(), 1.0);
    return make_op({m, n}, std::move(out), {x, w, b}, [x, w, b, m, k, n](TensorNode& o) mutable {
        const double* g = o.grad.data();
        if (x.requires_grad())
            detail::gemm(false, true, m, k, n, g, w.values().data(), x.grad().data(), 1.0);
        if (w.requires_grad())
            detail::gemm(true, false, k, n, m, x.values().data(), g, w.grad().data(), 1.0);
        if (b.requires_grad()) {
            double* gb = b.grad().data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[j] += g[static_cast<std::size_t>(i) * n + j];
        }
    });
}

// ---- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode& o) mutable {
        if (a.requires_grad()) {
            double* g = a.grad().data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (b.requires_grad()) {
            double* g = b.grad().data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode& o) mutable {
        if (a.requires_grad()) {
            double* g = a.grad().data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (b.requires_grad()) {
            double* g = b.grad().data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode& o) mutable {
        if (a.requires_grad()) {
            double* g = a.grad().data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * b.values()[i];
        }
        if (b.requires_grad()) {
            double* g = b.grad().data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * a.values()[i];
        }
    });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] / b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode& o) mutable {
        if (a.requires_grad()) {
            double* g = a.grad().data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] / b.values()[i];
        }
        if (b.requires_grad()) {
            double* g = b.grad().data();
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[i] -= o.grad[i] * o.value[i] / b.values()[i];
        }
    });
}

// y = alpha*x + beta, elementwise with scalar coefficients
inline Tensor affine(const Tensor& x, double alpha, double beta = 0.0) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * x.values()[i] + beta;
    return make_op(x.shape(), std::move(out), {x}, [x, alpha](TensorNode& o) mutable {
        if (!x.requires_grad()) return;
        double* g = x.grad().data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += alpha * o.grad[i];
    });
}

inline Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
    return make_op(x.shape(), std::move(out), {x}, [x](TensorNode& o) mutable {
        if (!x.requires_grad()) return;
        double* g = x.grad().data();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (x.values()[i] > 0.0) g[i] += o.grad[i];
    });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.values()[i]));
    return make_op(x.shape(), std::move(out), {x}, [x](TensorNode& o) mutable {
        if (!x.requires_grad()) return;
        double* g = x.grad().data();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            g[i] += o.grad[i] * o.value[i] * (1.0 - o.value[i]);
    });
}

inline Tensor abs_t(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x.values()[i]);
    return make_op(x.shape(), std::move(out), {x}, [x](TensorNode& o) mutable {
        if (!x.requires_grad()) return;
        double* g = x.grad().data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            double v = x.values()[i];
            g[i] += o.grad[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
        }
    });
}

// Ties route the gradient to the first operand.
inline Tensor emin(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "min");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.values()[i], b.values()[i]);
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode& o) mutable {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            bool pick_a = a.values()[i] <= b.values()[i];
            const Tensor& t = pick_a ? a : b;
            if (t.requires_grad()) t.grad()[i] += o.grad[i];
        }
    });
}

inline Tensor emax(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.values()[i], b.values()[i]);
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode& o) mutable {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            bool pick_a = a.values()[i] >= b.values()[i];
            const Tensor& t = pick_a ? a : b;
            if (t.requires_grad()) t.grad()[i] += o.grad[i];
        }
    });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_op({1}, {s}, {x}, [x](TensorNode& o) mutable {
        if (!x.requires_grad()) return;
        double* g = x.grad().data();
        for (std::size_t i = 0; i < x.size(); ++i) g[i] += o.grad[0];
    });
}

// Adds a row vector to every row of a 2-d tensor.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (x.ndim() != 2 || v.ndim() != 1 || x.dim(1) != v.dim(0))
        throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    int n = x.dim(0), c = x.dim(1);
    std::vector<double> out(x.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<std::size_t>(i) * c + j] = x.values()[static_cast<std::size_t>(i) * c + j] + v.values()[j];
    return make_op(x.shape(), std::move(out), {x, v}, [x, v, n, c](TensorNode& o) mutable {
        if (x.requires_grad()) {
            double* g = x.grad().data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (v.requires_grad()) {
            double* g = v.grad().data();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j) g[j] += o.grad[static_cast<std::size_t>(i) * c + j];
        }
    });
}

// ---- shape ops ------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    std::vector<double> out = x.values();
    return make_op(std::move(shape), std::move(out), {x}, [x](TensorNode& o) mutable {
        if (!x.requires_grad()) return;
        double* g = x.grad().data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    int nd = parts[0].ndim();
    if (nd == 1 || (nd == 2 && axis == 0)) {
        // stack along the first axis
        int cols = nd == 2 ? parts[0].dim(1) : 1;
        int rows = 0;
        for (const auto& p : parts) {
            if (p.ndim() != nd || (nd == 2 && p.dim(1) != cols))
                throw ShapeError("concat: incompatible part " + shape_str(p.shape()));
            rows += p.dim(0);
        }
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(rows) * cols);
        for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
        Shape shape = nd == 2 ? Shape{rows, cols} : Shape{rows};
        return make_op(std::move(shape), std::move(out), parts, [parts](TensorNode& o) mutable {
            std::size_t off = 0;
            for (auto& p : parts) {
                if (p.requires_grad()) {
                    double* g = p.grad().data();
                    for (std::size_t i = 0; i < p.size(); ++i) g[i] += o.grad[off + i];
                }
                off += p.size();
            }
        });
    }
    if (nd == 2 && axis == 1) {
        int rows = parts[0].dim(0);
        int cols = 0;
        for (const auto& p : parts) {
            if (p.ndim() != 2 || p.dim(0) != rows)
                throw ShapeError("concat: incompatible part " + shape_str(p.shape()));
            cols += p.dim(1);
        }
        std::vector<double> out(static_cast<std::size_t>(rows) * cols);
        int coff = 0;
        for (const auto& p : parts) {
            int pc = p.dim(1);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < pc; ++j)
                    out[static_cast<std::size_t>(i) * cols + coff + j] =
                        p.values()[static_cast<std::size_t>(i) * pc + j];
            coff += pc;
        }
        return make_op({rows, cols}, std::move(out), parts, [parts, rows, cols](TensorNode& o) mutable {
            int coff = 0;
            for (auto& p : parts) {
                int pc = p.dim(1);
                if (p.requires_grad()) {
                    double* g = p.grad().data();
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < pc; ++j)
                            g[static_cast<std::size_t>(i) * pc + j] +=
                                o.grad[static_cast<std::size_t>(i) * cols + coff + j];
                }
                coff += pc;
            }
        });
    }
    throw ShapeError("concat: unsupported axis " + std::to_string(axis));
}

inline std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int>& sizes) {
    int total = 0;
    for (int s : sizes) total += s;
    std::vector<Tensor> out;
    if ((x.ndim() == 1 || axis == 0)) {
        if (total != x.dim(0))
            throw ShapeError("split: sizes sum to " + std::to_string(total) + ", axis extent is " +
                             std::to_string(x.dim(0)));
        int cols = x.ndim() == 2 ? x.dim(1) : 1;
        int roff = 0;
        for (int s : sizes) {
            int start = roff;
            std::vector<double> part(x.values().begin() + static_cast<std::size_t>(start) * cols,
                                     x.values().begin() + static_cast<std::size_t>(start + s) * cols);
            Shape shape = x.ndim() == 2 ? Shape{s, cols} : Shape{s};
            out.push_back(make_op(std::move(shape), std::move(part), {x},
                                  [x, start, cols](TensorNode& o) mutable {
                                      if (!x.requires_grad()) return;
                                      double* g = x.grad().data() + static_cast<std::size_t>(start) * cols;
                                      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                                  }));
            roff += s;
        }
        return out;
    }
    if (x.ndim() == 2 && axis == 1) {
        if (total != x.dim(1))
            throw ShapeError("split: sizes sum to " + std::to_string(total) + ", axis extent is " +
                             std::to_string(x.dim(1)));
        int rows = x.dim(0), cols = x.dim(1);
        int coff = 0;
        for (int s : sizes) {
            int start = coff;
            std::vector<double> part(static_cast<std::size_t>(rows) * s);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < s; ++j)
                    part[static_cast<std::size_t>(i) * s + j] =
                        x.values()[static_cast<std::size_t>(i) * cols + start + j];
            out.push_back(make_op({rows, s}, std::move(part), {x},
                                  [x, start, rows, cols, s](TensorNode& o) mutable {
                                      if (!x.requires_grad()) return;
                                      double* g = x.grad().data();
                                      for (int i = 0; i < rows; ++i)
                                          for (int j = 0; j < s; ++j)
                                              g[static_cast<std::size_t>(i) * cols + start + j] +=
                                                  o.grad[static_cast<std::size_t>(i) * s + j];
                                  }));
            coff += s;
        }
        return out;
    }
    throw ShapeError("split: unsupported axis " + std::to_string(axis));
}

// ---- softmax / layer norm -------------------------------------------------

namespace detail {
inline void softmax_strided(const double* x, double* y, int n, int stride) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[static_cast<std::size_t>(i) * stride]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        double e = std::exp(x[static_cast<std::size_t>(i) * stride] - mx);
        y[static_cast<std::size_t>(i) * stride] = e;
        s += e;
    }
    for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i) * stride] /= s;
}
inline void softmax_backward_strided(const double* y, const double* gy, double* gx, int n,
                                     int stride) {
    double dot = 0.0;
    for (int i = 0; i < n; ++i)
        dot += y[static_cast<std::size_t>(i) * stride] * gy[static_cast<std::size_t>(i) * stride];
    for (int i = 0; i < n; ++i)
        gx[static_cast<std::size_t>(i) * stride] +=
            y[static_cast<std::size_t>(i) * stride] * (gy[static_cast<std::size_t>(i) * stride] - dot);
}
}  // namespace detail

// Numerically stable softmax along `axis` of a 1-d or 2-d tensor.
inline Tensor softmax(const Tensor& x, int axis = -1) {
    int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd)
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
    std::vector<double> out(x.size());
    int lanes, n, stride, lane_step;
    if (nd == 1) {
        lanes = 1;
        n = x.dim(0);
        stride = 1;
        lane_step = 0;
    } else if (axis == 1) {
        lanes = x.dim(0);
        n = x.dim(1);
        stride = 1;
        lane_step = x.dim(1);
    } else {
        lanes = x.dim(1);
        n = x.dim(0);
        stride = x.dim(1);
        lane_step = 1;
    }
    for (int l = 0; l < lanes; ++l)
        detail::softmax_strided(x.values().data() + static_cast<std::size_t>(l) * lane_step,
                                out.data() + static_cast<std::size_t>(l) * lane_step, n, stride);
    return make_op(x.shape(), std::move(out), {x},
                   [x, lanes, n, stride, lane_step](TensorNode& o) mutable {
                       if (!x.requires_grad()) return;
                       for (int l = 0; l < lanes; ++l)
                           detail::softmax_backward_strided(
                               o.value.data() + static_cast<std::size_t>(l) * lane_step,
                               o.grad.data() + static_cast<std::size_t>(l) * lane_step,
                               x.grad().data() + static_cast<std::size_t>(l) * lane_step, n, stride);
                   });
}

// Row-wise softmax where masked columns get exactly zero weight. Requires at
// least one unmasked column.
inline Tensor masked_softmax_rows(const Tensor& x, const Mask& mask) {
    if (x.ndim() != 2) throw ShapeError("masked_softmax_rows: expects 2-d, got " + shape_str(x.shape()));
    int rows = x.dim(0), cols = x.dim(1);
    if (static_cast<int>(mask.size()) != cols)
        throw ShapeError("masked_softmax_rows: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(cols) + " columns");
    bool any = false;
    for (auto m : mask) any = any || (m != 0);
    if (!any) throw MaskError("masked_softmax_rows: all keys masked");
    std::vector<double> out(x.size(), 0.0);
    for (int i = 0; i < rows; ++i) {
        const double* xr = x.values().data() + static_cast<std::size_t>(i) * cols;
        double* yr = out.data() + static_cast<std::size_t>(i) * cols;
        double mx = -1e300;
        for (int j = 0; j < cols; ++j)
            if (mask[j]) mx = std::max(mx, xr[j]);
        double s = 0.0;
        for (int j = 0; j < cols; ++j) {
            if (mask[j]) {
                yr[j] = std::exp(xr[j] - mx);
                s += yr[j];
            }
        }
        for (int j = 0; j < cols; ++j)
            if (mask[j]) yr[j] /= s;
    }
    return make_op(x.shape(), std::move(out), {x}, [x, mask, rows, cols](TensorNode& o) mutable {
        if (!x.requires_grad()) return;
        for (int i = 0; i < rows; ++i) {
            const double* y = o.value.data() + static_cast<std::size_t>(i) * cols;
            const double* gy = o.grad.data() + static_cast<std::size_t>(i) * cols;
            double* gx = x.grad().data() + static_cast<std::size_t>(i) * cols;
            double dot = 0.0;
            for (int j = 0; j < cols; ++j)
                if (mask[j]) dot += y[j] * gy[j];
            for (int j = 0; j < cols; ++j)
                if (mask[j]) gx[j] += y[j] * (gy[j] - dot);
        }
    });
}

// Normalizes each row of x to zero mean / unit variance, then applies the
// affine (gain, bias). eps guards zero-variance rows.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.ndim() < 1) throw ShapeError("layer_norm: scalar input");
    int c = x.dim(x.ndim() - 1);
    if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != c || bias.dim(0) != c)
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
    int rows = static_cast<int>(x.size()) / c;
    std::vector<double> out(x.size());
    std::vector<double> mu(rows), istd(rows);
    for (int i = 0; i < rows; ++i) {
        const double* xr = x.values().data() + static_cast<std::size_t>(i) * c;
        double m = 0.0;
        for (int j = 0; j < c; ++j) m += xr[j];
        m /= c;
        double v = 0.0;
        for (int j = 0; j < c; ++j) v += (xr[j] - m) * (xr[j] - m);
        v /= c;
        mu[i] = m;
        istd[i] = 1.0 / std::sqrt(v + eps);
        double* yr = out.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j)
            yr[j] = gain.values()[j] * (xr[j] - m) * istd[i] + bias.values()[j];
    }
    return make_op(x.shape(), std::move(out), {x, gain, bias},
                   [x, gain, bias, rows, c, mu = std::move(mu), istd = std::move(istd)](TensorNode& o) mutable {
                       for (int i = 0; i < rows; ++i) {
                           const double* xr = x.values().data() + static_cast<std::size_t>(i) * c;
                           const double* gy = o.grad.data() + static_cast<std::size_t>(i) * c;
                           double is = istd[i], m = mu[i];
                           if (gain.requires_grad() || bias.requires_grad()) {
                               for (int j = 0; j < c; ++j) {
                                   double xhat = (xr[j] - m) * is;
                                   if (gain.requires_grad()) gain.grad()[j] += gy[j] * xhat;
                                   if (bias.requires_grad()) bias.grad()[j] += gy[j];
                               }
                           }
                           if (x.requires_grad()) {
                               double* gx = x.grad().data() + static_cast<std::size_t>(i) * c;
                               // dxhat = gy * gain; dx via the standard layer-norm backward
                               double s1 = 0.0, s2 = 0.0;
                               for (int j = 0; j < c; ++j) {
                                   double dxh = gy[j] * gain.values()[j];
                                   s1 += dxh;
                                   s2 += dxh * (xr[j] - m) * is;
                               }
                               for (int j = 0; j < c; ++j) {
                                   double dxh = gy[j] * gain.values()[j];
                                   double xhat = (xr[j] - m) * is;
                                   gx[j] += is * (dxh - s1 / c - xhat * s2 / c);
                               }
                           }
                       }
                   });
}

// ---- masked mean ----------------------------------------------------------

// Mean over rows where mask=1; masked rows contribute nothing, bit-exactly.
inline Tensor masked_mean(const Tensor& x, const Mask& mask) {
    if (x.ndim() != 2) throw ShapeError("masked_mean: expects 2-d, got " + shape_str(x.shape()));
    int n = x.dim(0), c = x.dim(1);
    if (static_cast<int>(mask.size()) != n)
        throw ShapeError("masked_mean: mask length " + std::to_string(mask.size()) + " vs " +
                         std::to_string(n) + " rows");
    int cnt = 0;
    for (auto m : mask) cnt += (m != 0);
    if (cnt == 0) throw MaskError("masked_mean: all rows masked");
    std::vector<double> out(c, 0.0);
    for (int i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const double* xr = x.values().data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) out[j] += xr[j];
    }
    for (int j = 0; j < c; ++j) out[j] /= cnt;
    return make_op({c}, std::move(out), {x}, [x, mask, n, c, cnt](TensorNode& o) mutable {
        if (!x.requires_grad()) return;
        for (int i = 0; i < n; ++i) {
            if (!mask[i]) continue;
            double* gx = x.grad().data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) gx[j] += o.grad[j] / cnt;
        }
    });
}

// ---- dropout --------------------------------------------------------------

// Inverted dropout; identity when not training or rate == 0. The mask comes
// from the caller's SeededRng so runs replay bit-exactly.
inline Tensor dropout(const Tensor& x, double rate, SeededRng* rng, bool training) {
    if (!training || rate <= 0.0) return x;
    if (rng == nullptr) throw ContractError("dropout: training requires an rng");
    double keep = 1.0 - rate;
    std::vector<std::uint8_t> m(x.size());
    for (auto& b : m) b = rng->uniform() < keep ? 1 : 0;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] ? x.values()[i] / keep : 0.0;
    return make_op(x.shape(), std::move(out), {x}, [x, m = std::move(m), keep](TensorNode& o) mutable {
        if (!x.requires_grad()) return;
        double* g = x.grad().data();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (m[i]) g[i] += o.grad[i] / keep;
    });
}

// ---- embedding ------------------------------------------------------------

inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding: table must be 2-d");
    int vocab = table.dim(0), c = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw DataError("embedding: token id " + std::to_string(id) +
                            " outside vocab of size " + std::to_string(vocab));
    int n = static_cast<int>(ids.size());
    std::vector<double> out(static_cast<std::size_t>(n) * c);
    for (int i = 0; i < n; ++i)
        std::copy(table.values().begin() + static_cast<std::size_t>(ids[i]) * c,
                  table.values().begin() + static_cast<std::size_t>(ids[i] + 1) * c,
                  out.begin() + static_cast<std::size_t>(i) * c);
    return make_op({n, c}, std::move(out), {table}, [table, ids, n, c](TensorNode& o) mutable {
        if (!table.requires_grad()) return;
        for (int i = 0; i < n; ++i) {
            double* g = table.grad().data() + static_cast<std::size_t>(ids[i]) * c;
            const double* go = o.grad.data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) g[j] += go[j];
        }
    });
}

// ---- bilinear sampling ----------------------------------------------------

// Samples rows of a flattened G x G x C grid (row index y*G + x) at normalized
// coordinates, align-corners style: u = x*(G-1), clamped to [0, G-1] so
// out-of-bounds points take the border features. Differentiable w.r.t. both
// the grid and the coordinates; the coordinate gradient is zero in the
// clamped region.
inline Tensor bilinear_sample(const Tensor& grid, const Tensor& coords, int g) {
    if (grid.ndim() != 2 || grid.dim(0) != g * g)
        throw ShapeError("bilinear_sample: grid " + shape_str(grid.shape()) + " is not " +
                         std::to_string(g) + "^2 rows");
    if (coords.ndim() != 2 || coords.dim(1) != 2)
        throw ShapeError("bilinear_sample: coords must be P x 2, got " + shape_str(coords.shape()));
    int p = coords.dim(0), c = grid.dim(1);
    std::vector<double> out(static_cast<std::size_t>(p) * c);
    struct Cell {
        int i0, j0;
        double fu, fv;
        bool du_alive, dv_alive;
    };
    std::vector<Cell> cells(p);
    for (int k = 0; k < p; ++k) {
        double x = coords.values()[static_cast<std::size_t>(k) * 2];
        double y = coords.values()[static_cast<std::size_t>(k) * 2 + 1];
        double u_raw = x * (g - 1), v_raw = y * (g - 1);
        double u = std::clamp(u_raw, 0.0, static_cast<double>(g - 1));
        double v = std::clamp(v_raw, 0.0, static_cast<double>(g - 1));
        Cell cell;
        cell.du_alive = g > 1 && u_raw >= 0.0 && u_raw <= g - 1;
        cell.dv_alive = g > 1 && v_raw >= 0.0 && v_raw <= g - 1;
        cell.j0 = std::min(static_cast<int>(u), std::max(g - 2, 0));
        cell.i0 = std::min(static_cast<int>(v), std::max(g - 2, 0));
        cell.fu = u - cell.j0;
        cell.fv = v - cell.i0;
        cells[k] = cell;
        int j1 = std::min(cell.j0 + 1, g - 1), i1 = std::min(cell.i0 + 1, g - 1);
        const double* g00 = grid.values().data() + static_cast<std::size_t>(cell.i0 * g + cell.j0) * c;
        const double* g01 = grid.values().data() + static_cast<std::size_t>(cell.i0 * g + j1) * c;
        const double* g10 = grid.values().data() + static_cast<std::size_t>(i1 * g + cell.j0) * c;
        const double* g11 = grid.values().data() + static_cast<std::size_t>(i1 * g + j1) * c;
        double* o = out.data() + static_cast<std::size_t>(k) * c;
        double fu = cell.fu, fv = cell.fv;
        for (int ch = 0; ch < c; ++ch)
            o[ch] = (1 - fv) * ((1 - fu) * g00[ch] + fu * g01[ch]) +
                    fv * ((1 - fu) * g10[ch] + fu * g11[ch]);
    }
    return make_op({p, c}, std::move(out), {grid, coords},
                   [grid, coords, g, p, c, cells = std::move(cells)](TensorNode& o) mutable {
                       for (int k = 0; k < p; ++k) {
                           const Cell& cell = cells[k];
                           int j1 = std::min(cell.j0 + 1, g - 1), i1 = std::min(cell.i0 + 1, g - 1);
                           double fu = cell.fu, fv = cell.fv;
                           const double* go = o.grad.data() + static_cast<std::size_t>(k) * c;
                           const double* g00 = grid.values().data() + static_cast<std::size_t>(cell.i0 * g + cell.j0) * c;
                           const double* g01 = grid.values().data() + static_cast<std::size_t>(cell.i0 * g + j1) * c;
                           const double* g10 = grid.values().data() + static_cast<std::size_t>(i1 * g + cell.j0) * c;
                           const double* g11 = grid.values().data() + static_cast<std::size_t>(i1 * g + j1) * c;
                           if (grid.requires_grad()) {
                               double* gg = grid.grad().data();
                               double* d00 = gg + static_cast<std::size_t>(cell.i0 * g + cell.j0) * c;
                               double* d01 = gg + static_cast<std::size_t>(cell.i0 * g + j1) * c;
                               double* d10 = gg + static_cast<std::size_t>(i1 * g + cell.j0) * c;
                               double* d11 = gg + static_cast<std::size_t>(i1 * g + j1) * c;
                               for (int ch = 0; ch < c; ++ch) {
                                   d00[ch] += go[ch] * (1 - fv) * (1 - fu);
                                   d01[ch] += go[ch] * (1 - fv) * fu;
                                   d10[ch] += go[ch] * fv * (1 - fu);
                                   d11[ch] += go[ch] * fv * fu;
                               }
                           }
                           if (coords.requires_grad()) {
                               double du = 0.0, dv = 0.0;
                               for (int ch = 0; ch < c; ++ch) {
                                   du += go[ch] * ((1 - fv) * (g01[ch] - g00[ch]) + fv * (g11[ch] - g10[ch]));
                                   dv += go[ch] * ((1 - fu) * (g10[ch] - g00[ch]) + fu * (g11[ch] - g01[ch]));
                               }
                               double* gc = coords.grad().data() + static_cast<std::size_t>(k) * 2;
                               if (cell.du_alive) gc[0] += du * (g - 1);
                               if (cell.dv_alive) gc[1] += dv * (g - 1);
                           }
                       }
                   });
}

}  // namespace dmdetr
