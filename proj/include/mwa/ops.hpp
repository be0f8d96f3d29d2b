#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "mwa/tensor.hpp"

// Differentiable primitives. Forward results are computed eagerly; when a
// GradTape is active and an input participates in gradients, a backward
// closure is recorded. Closures treat an absent output gradient as zero and
// never accumulate into nodes with requires_grad == false.

namespace mwa {

namespace detail {

template <typename T>
using ConstMat = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using MutMat = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// c(m×n) += a(m×k) · b(k×n)
template <typename T>
void gemm_acc_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    MutMat<T>(c, m, n).noalias() += ConstMat<T>(a, m, k) * ConstMat<T>(b, k, n);
}

// c(m×n) += a(m×k) · b(n×k)ᵀ
template <typename T>
void gemm_acc_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    MutMat<T>(c, m, n).noalias() += ConstMat<T>(a, m, k) * ConstMat<T>(b, n, k).transpose();
}

// c(k×n) += a(m×k)ᵀ · b(m×n)
template <typename T>
void gemm_acc_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    MutMat<T>(c, k, n).noalias() += ConstMat<T>(a, m, k).transpose() * ConstMat<T>(b, m, n);
}

template <typename T>
bool tracing(std::initializer_list<const Tensor<T>*> ins) {
    if (!GradTape<T>::active()) return false;
    for (const auto* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
void require_2d(const Tensor<T>& t, const char* who) {
    if (t.ndim() != 2)
        throw std::invalid_argument(std::string(who) + " requires a 2-D tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([an = a.node(), bn = b.node(), on = out.node()] {
            if (!on->has_grad()) return;
            const size_t n = on->grad.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = c * px[i];
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node(), c] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += c * on->grad[i];
        });
    }
    return out;
}

/// Adds a 1-D vector to every row of x (rows = all leading axes collapsed,
/// C = last axis). Covers both linear-layer bias and positional tables.
template <typename T>
Tensor<T> add_broadcast_rows(const Tensor<T>& x, const Tensor<T>& v) {
    if (v.ndim() != 1 || v.dim(0) != x.last_dim())
        throw std::invalid_argument("add_broadcast_rows: vector " + shape_str(v.shape()) +
                                    " does not match last axis of " + shape_str(x.shape()));
    const std::int64_t rows = x.rows();
    const int c = x.last_dim();
    Tensor<T> out(x.shape());
    const T* px = x.data();
    const T* pv = v.data();
    T* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] + pv[j];
    if (detail::tracing<T>({&x, &v})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), vn = v.node(), on = out.node(), rows, c] {
            if (!on->has_grad()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < c; ++j) vn->grad[j] += on->grad[r * c + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul dimension mismatch: " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    detail::gemm_acc_nn(a.data(), b.data(), out.data(), m, k, n);
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
            if (!on->has_grad()) return;
            if (an->requires_grad) {
                an->ensure_grad();  // dA += G · Bᵀ
                detail::gemm_acc_nt(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB += Aᵀ · G
                detail::gemm_acc_tn(an->value.data(), on->grad.data(), bn->grad.data(), m, k, n);
            }
        });
    }
    return out;
}

/// a(m×k) · b(n×k)ᵀ without materializing the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "matmul_nt");
    detail::require_2d(b, "matmul_nt");
    if (a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_nt dimension mismatch: " + shape_str(a.shape()) + " · " +
                                    shape_str(b.shape()) + "T");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> out({m, n});
    detail::gemm_acc_nt(a.data(), b.data(), out.data(), m, k, n);
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
            if (!on->has_grad()) return;
            if (an->requires_grad) {
                an->ensure_grad();  // dA += G · B
                detail::gemm_acc_nn(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB += Gᵀ · A
                detail::gemm_acc_tn(on->grad.data(), an->value.data(), bn->grad.data(), m, n, k);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
    detail::require_2d(x, "transpose2d");
    const int m = x.dim(0), n = x.dim(1);
    Tensor<T> out({n, m});
    const T* px = x.data();
    T* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[j * m + i] = px[i * n + j];
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node(), m, n] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) xn->grad[i * n + j] += on->grad[j * m + i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node()] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            // subgradient at exactly 0 is 0
            for (size_t i = 0; i < on->grad.size(); ++i)
                if (xn->value[i] > T(0)) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

/// Last-axis LayerNorm with population variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const int d = x.last_dim();
    if (gamma.numel() != d || beta.numel() != d)
        throw std::invalid_argument("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                                    shape_str(beta.shape()) + " do not match last axis of " + shape_str(x.shape()));
    if (eps < T(0)) throw std::invalid_argument("layer_norm: eps must be non-negative");
    const std::int64_t rows = x.rows();
    Tensor<T> out(x.shape());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    auto means = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();
    T* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        T mu = T(0);
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= T(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            T c = row[j] - mu;
            var += c * c;
        }
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        (*means)[static_cast<size_t>(r)] = mu;
        (*inv_std)[static_cast<size_t>(r)] = inv;
        for (int j = 0; j < d; ++j) po[r * d + j] = (row[j] - mu) * inv * pg[j] + pb[j];
    }
    if (detail::tracing<T>({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(),
                                       inv_std, means, rows, d] {
            if (!on->has_grad()) return;
            const T* px = xn->value.data();
            const T* pg = gn->value.data();
            const T* pgo = on->grad.data();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T mu = (*means)[static_cast<size_t>(r)];
                const T inv = (*inv_std)[static_cast<size_t>(r)];
                const T* row = px + r * d;
                const T* go = pgo + r * d;
                if (gn->requires_grad || bn->requires_grad) {
                    for (int j = 0; j < d; ++j) {
                        if (bn->requires_grad) bn->grad[j] += go[j];
                        if (gn->requires_grad) gn->grad[j] += go[j] * (row[j] - mu) * inv;
                    }
                }
                if (xn->requires_grad) {
                    T sum_dy = T(0), sum_dy_xhat = T(0);
                    for (int j = 0; j < d; ++j) {
                        const T dy = go[j] * pg[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * (row[j] - mu) * inv;
                    }
                    const T m1 = sum_dy / T(d);
                    const T m2 = sum_dy_xhat / T(d);
                    for (int j = 0; j < d; ++j) {
                        const T xhat = (row[j] - mu) * inv;
                        xn->grad[r * d + j] += inv * (go[j] * pg[j] - m1 - xhat * m2);
                    }
                }
            }
        });
    }
    return out;
}

/// Max-subtracted softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    const int d = x.last_dim();
    const std::int64_t rows = x.rows();
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        T mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        T z = T(0);
        for (int j = 0; j < d; ++j) {
            po[r * d + j] = std::exp(row[j] - mx);
            z += po[r * d + j];
        }
        for (int j = 0; j < d; ++j) po[r * d + j] /= z;
    }
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node(), rows, d] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* y = on->value.data() + r * d;
                const T* g = on->grad.data() + r * d;
                T dot = T(0);
                for (int j = 0; j < d; ++j) dot += g[j] * y[j];
                for (int j = 0; j < d; ++j) xn->grad[r * d + j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    const int d = x.last_dim();
    const std::int64_t rows = x.rows();
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        T mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        T z = T(0);
        for (int j = 0; j < d; ++j) z += std::exp(row[j] - mx);
        const T lse = mx + std::log(z);
        for (int j = 0; j < d; ++j) po[r * d + j] = row[j] - lse;
    }
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node(), rows, d] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* y = on->value.data() + r * d;
                const T* g = on->grad.data() + r * d;
                T gsum = T(0);
                for (int j = 0; j < d; ++j) gsum += g[j];
                for (int j = 0; j < d; ++j) xn->grad[r * d + j] += g[j] - std::exp(y[j]) * gsum;
            }
        });
    }
    return out;
}

/// Row lookup: out[i] = table[ids[i]]. Gradient scatter-adds into the table.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::int32_t>& ids) {
    detail::require_2d(table, "embedding_lookup");
    const int vocab = table.dim(0), d = table.dim(1);
    for (std::int32_t id : ids)
        if (id < 0 || id >= vocab)
            throw std::invalid_argument("token id " + std::to_string(id) + " out of vocabulary range [0, " +
                                        std::to_string(vocab) + ")");
    Tensor<T> out({static_cast<int>(ids.size()), d});
    const T* pt = table.data();
    T* po = out.data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(pt + static_cast<std::int64_t>(ids[i]) * d, d, po + static_cast<std::int64_t>(i) * d);
    if (detail::tracing<T>({&table})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([tn = table.node(), on = out.node(), ids, d] {
            if (!on->has_grad() || !tn->requires_grad) return;
            tn->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i) {
                const T* g = on->grad.data() + static_cast<std::int64_t>(i) * d;
                T* dst = tn->grad.data() + static_cast<std::int64_t>(ids[i]) * d;
                for (int j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::int64_t>& idx) {
    const int c = x.last_dim();
    const std::int64_t rows = x.rows();
    for (std::int64_t i : idx)
        if (i < 0 || i >= rows) throw std::invalid_argument("gather_rows index out of range");
    Tensor<T> out({static_cast<int>(idx.size()), c});
    const T* px = x.data();
    T* po = out.data();
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(px + idx[i] * c, c, po + static_cast<std::int64_t>(i) * c);
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node(), idx, c] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (size_t i = 0; i < idx.size(); ++i) {
                const T* g = on->grad.data() + static_cast<std::int64_t>(i) * c;
                T* dst = xn->grad.data() + idx[i] * c;
                for (int j = 0; j < c; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

/// Places row i of x at row idx[i] of an otherwise-zero [total_rows × C]
/// output. Indices must be unique.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& x, const std::vector<std::int64_t>& idx, std::int64_t total_rows) {
    const int c = x.last_dim();
    if (static_cast<std::int64_t>(idx.size()) != x.rows())
        throw std::invalid_argument("scatter_rows: index count does not match row count");
    std::vector<char> seen(static_cast<size_t>(total_rows), 0);
    for (std::int64_t i : idx) {
        if (i < 0 || i >= total_rows) throw std::invalid_argument("scatter_rows index out of range");
        if (seen[static_cast<size_t>(i)]++) throw std::invalid_argument("scatter_rows duplicate index");
    }
    Tensor<T> out({static_cast<int>(total_rows), c});
    const T* px = x.data();
    T* po = out.data();
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(px + static_cast<std::int64_t>(i) * c, c, po + idx[i] * c);
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node(), idx, c] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (size_t i = 0; i < idx.size(); ++i) {
                const T* g = on->grad.data() + idx[i] * c;
                T* dst = xn->grad.data() + static_cast<std::int64_t>(i) * c;
                for (int j = 0; j < c; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

/// n stacked copies of a 1-D vector.
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& v, std::int64_t n) {
    if (v.ndim() != 1) throw std::invalid_argument("tile_rows requires a 1-D tensor, got " + shape_str(v.shape()));
    const int c = v.dim(0);
    Tensor<T> out({static_cast<int>(n), c});
    T* po = out.data();
    for (std::int64_t r = 0; r < n; ++r) std::copy_n(v.data(), c, po + r * c);
    if (detail::tracing<T>({&v})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([vn = v.node(), on = out.node(), n, c] {
            if (!on->has_grad() || !vn->requires_grad) return;
            vn->ensure_grad();
            for (std::int64_t r = 0; r < n; ++r)
                for (int j = 0; j < c; ++j) vn->grad[j] += on->grad[r * c + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.values()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node()] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (auto& g : xn->grad) g += on->grad[0];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.values()) s += v;
    const T n = static_cast<T>(x.numel());
    Tensor<T> out = Tensor<T>::scalar(s / n);
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node(), n] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (auto& g : xn->grad) g += on->grad[0] / n;
        });
    }
    return out;
}

/// Mean of the main diagonal of a square matrix.
template <typename T>
Tensor<T> mean_diag(const Tensor<T>& x) {
    detail::require_2d(x, "mean_diag");
    if (x.dim(0) != x.dim(1))
        throw std::invalid_argument("mean_diag requires a square matrix, got " + shape_str(x.shape()));
    const int n = x.dim(0);
    T s = T(0);
    for (int i = 0; i < n; ++i) s += x.data()[static_cast<std::int64_t>(i) * n + i];
    Tensor<T> out = Tensor<T>::scalar(s / static_cast<T>(n));
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node(), n] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            const T g = on->grad[0] / static_cast<T>(n);
            for (int i = 0; i < n; ++i) xn->grad[static_cast<std::int64_t>(i) * n + i] += g;
        });
    }
    return out;
}

/// Row-wise L2 normalization to unit norm.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    const int c = x.last_dim();
    const std::int64_t rows = x.rows();
    Tensor<T> out(x.shape());
    auto inv_norm = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const T* px = x.data();
    T* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        T s = T(0);
        for (int j = 0; j < c; ++j) s += px[r * c + j] * px[r * c + j];
        const T n = std::sqrt(s);
        const T inv = T(1) / std::max(n, static_cast<T>(1e-30));
        (*inv_norm)[static_cast<size_t>(r)] = inv;
        for (int j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] * inv;
    }
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([xn = x.node(), on = out.node(), inv_norm, rows, c] {
            if (!on->has_grad() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T inv = (*inv_norm)[static_cast<size_t>(r)];
                const T* y = on->value.data() + r * c;
                const T* g = on->grad.data() + r * c;
                T dot = T(0);
                for (int j = 0; j < c; ++j) dot += g[j] * y[j];
                for (int j = 0; j < c; ++j) xn->grad[r * c + j] += inv * (g[j] - y[j] * dot);
            }
        });
    }
    return out;
}

/// Scaled dot-product attention over h heads. q, k, v are [(batch·tokens) × d]
/// with head channels interleaved along d; output has the same layout.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    int batch, int tokens, int heads) {
    detail::require_2d(q, "attention");
    const int d = q.dim(1);
    if (k.shape() != q.shape() || v.shape() != q.shape())
        throw std::invalid_argument("attention q/k/v shape mismatch: " + shape_str(q.shape()) + ", " +
                                    shape_str(k.shape()) + ", " + shape_str(v.shape()));
    if (q.dim(0) != batch * tokens)
        throw std::invalid_argument("attention row count does not equal batch·tokens");
    if (d % heads != 0) throw std::invalid_argument("attention: model dim not divisible by head count");
    const int hd = d / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));

    Tensor<T> out({batch * tokens, d});
    auto probs = std::make_shared<std::vector<T>>(
        static_cast<size_t>(batch) * heads * tokens * tokens);
    const T* pq = q.data();
    const T* pk = k.data();
    const T* pv = v.data();
    T* po = out.data();
    std::vector<T> row(static_cast<size_t>(tokens));
    for (int b = 0; b < batch; ++b) {
        const std::int64_t base = static_cast<std::int64_t>(b) * tokens * d;
        for (int h = 0; h < heads; ++h) {
            const int off = h * hd;
            T* p = probs->data() + (static_cast<std::int64_t>(b) * heads + h) * tokens * tokens;
            for (int t = 0; t < tokens; ++t) {
                const T* qr = pq + base + static_cast<std::int64_t>(t) * d + off;
                T mx = -std::numeric_limits<T>::infinity();
                for (int s = 0; s < tokens; ++s) {
                    const T* kr = pk + base + static_cast<std::int64_t>(s) * d + off;
                    T dot = T(0);
                    for (int c = 0; c < hd; ++c) dot += qr[c] * kr[c];
                    row[static_cast<size_t>(s)] = dot * inv_sqrt;
                    mx = std::max(mx, row[static_cast<size_t>(s)]);
                }
                T z = T(0);
                for (int s = 0; s < tokens; ++s) {
                    row[static_cast<size_t>(s)] = std::exp(row[static_cast<size_t>(s)] - mx);
                    z += row[static_cast<size_t>(s)];
                }
                T* ctx = po + base + static_cast<std::int64_t>(t) * d + off;
                for (int s = 0; s < tokens; ++s) {
                    const T w = row[static_cast<size_t>(s)] / z;
                    p[static_cast<std::int64_t>(t) * tokens + s] = w;
                    const T* vr = pv + base + static_cast<std::int64_t>(s) * d + off;
                    for (int c = 0; c < hd; ++c) ctx[c] += w * vr[c];
                }
            }
        }
    }
    if (detail::tracing<T>({&q, &k, &v})) {
        out.set_requires_grad(true);
        GradTape<T>::active()->record([qn = q.node(), kn = k.node(), vn = v.node(), on = out.node(),
                                       probs, batch, tokens, heads, hd, d, inv_sqrt] {
            if (!on->has_grad()) return;
            if (qn->requires_grad) qn->ensure_grad();
            if (kn->requires_grad) kn->ensure_grad();
            if (vn->requires_grad) vn->ensure_grad();
            std::vector<T> dp(static_cast<size_t>(tokens));
            std::vector<T> ds(static_cast<size_t>(tokens));
            for (int b = 0; b < batch; ++b) {
                const std::int64_t base = static_cast<std::int64_t>(b) * tokens * d;
                for (int h = 0; h < heads; ++h) {
                    const int off = h * hd;
                    const T* p = probs->data() + (static_cast<std::int64_t>(b) * heads + h) * tokens * tokens;
                    for (int t = 0; t < tokens; ++t) {
                        const T* go = on->grad.data() + base + static_cast<std::int64_t>(t) * d + off;
                        // dP[t][s] = dOut[t]·V[s]; dV[s] += P[t][s]·dOut[t]
                        for (int s = 0; s < tokens; ++s) {
                            const T* vr = vn->value.data() + base + static_cast<std::int64_t>(s) * d + off;
                            T dot = T(0);
                            for (int c = 0; c < hd; ++c) dot += go[c] * vr[c];
                            dp[static_cast<size_t>(s)] = dot;
                            if (vn->requires_grad) {
                                T* dv = vn->grad.data() + base + static_cast<std::int64_t>(s) * d + off;
                                const T w = p[static_cast<std::int64_t>(t) * tokens + s];
                                for (int c = 0; c < hd; ++c) dv[c] += w * go[c];
                            }
                        }
                        if (!qn->requires_grad && !kn->requires_grad) continue;
                        // softmax backward on the score row
                        T dot = T(0);
                        for (int s = 0; s < tokens; ++s)
                            dot += dp[static_cast<size_t>(s)] * p[static_cast<std::int64_t>(t) * tokens + s];
                        for (int s = 0; s < tokens; ++s)
                            ds[static_cast<size_t>(s)] =
                                p[static_cast<std::int64_t>(t) * tokens + s] * (dp[static_cast<size_t>(s)] - dot);
                        const T* qr = qn->value.data() + base + static_cast<std::int64_t>(t) * d + off;
                        T* dq = qn->requires_grad ? qn->grad.data() + base + static_cast<std::int64_t>(t) * d + off
                                                  : nullptr;
                        for (int s = 0; s < tokens; ++s) {
                            const T w = ds[static_cast<size_t>(s)] * inv_sqrt;
                            const T* kr = kn->value.data() + base + static_cast<std::int64_t>(s) * d + off;
                            if (dq)
                                for (int c = 0; c < hd; ++c) dq[c] += w * kr[c];
                            if (kn->requires_grad) {
                                T* dk = kn->grad.data() + base + static_cast<std::int64_t>(s) * d + off;
                                for (int c = 0; c < hd; ++c) dk[c] += w * qr[c];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

/// matmul + bias, the building block of every projection in the model.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_broadcast_rows(matmul(x, w), b);
}

}  // namespace mwa
