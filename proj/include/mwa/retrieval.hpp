#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "mwa/ops.hpp"

namespace mwa {

/// Bidirectional contrastive loss over the in-batch similarity matrix:
/// mean cross-entropy of matched pairs against all in-batch candidates,
/// averaged over the image→text and text→image directions.
template <typename T>
Tensor<T> info_nce_loss(const Tensor<T>& img_emb, const Tensor<T>& txt_emb, T temperature) {
    detail::require_2d(img_emb, "info_nce_loss");
    if (img_emb.shape() != txt_emb.shape())
        throw std::invalid_argument("info_nce_loss: embedding shapes differ: " + shape_str(img_emb.shape()) +
                                    " vs " + shape_str(txt_emb.shape()));
    if (!(temperature > T(0))) throw std::invalid_argument("info_nce_loss: temperature must be positive");
    assert_finite(img_emb, "info_nce_loss image embeddings");
    assert_finite(txt_emb, "info_nce_loss text embeddings");

    Tensor<T> s = scale(matmul_nt(img_emb, txt_emb), T(1) / temperature);
    Tensor<T> img_to_txt = mean_diag(log_softmax(s));
    Tensor<T> txt_to_img = mean_diag(log_softmax(transpose2d(s)));
    return scale(add(img_to_txt, txt_to_img), T(-0.5));
}

struct RecallPair {
    double ir = 0.0;  // text→image
    double tr = 0.0;  // image→text
};

/// Recall@k over a square similarity matrix S with S[i][j] = <image_i, text_j>
/// and ground truth on the diagonal. Ties rank the lower index first.
template <typename T>
RecallPair recall_at_k(const Tensor<T>& s, int k) {
    detail::require_2d(s, "recall_at_k");
    const int n = s.dim(0);
    if (s.dim(1) != n)
        throw std::invalid_argument("recall_at_k requires a square matrix, got " + shape_str(s.shape()));
    if (k < 1 || k > n)
        throw std::invalid_argument("recall_at_k: k = " + std::to_string(k) + " out of range [1, " +
                                    std::to_string(n) + "]");
    const T* p = s.data();
    int tr_hits = 0;
    int ir_hits = 0;
    for (int i = 0; i < n; ++i) {
        const T diag = p[static_cast<std::int64_t>(i) * n + i];
        int row_rank = 1;
        int col_rank = 1;
        for (int j = 0; j < n; ++j) {
            const T row_v = p[static_cast<std::int64_t>(i) * n + j];
            const T col_v = p[static_cast<std::int64_t>(j) * n + i];
            if (row_v > diag || (row_v == diag && j < i)) ++row_rank;
            if (col_v > diag || (col_v == diag && j < i)) ++col_rank;
        }
        if (row_rank <= k) ++tr_hits;  // image i finds text i among row i
        if (col_rank <= k) ++ir_hits;  // text i finds image i among column i
    }
    RecallPair r;
    r.tr = static_cast<double>(tr_hits) / n;
    r.ir = static_cast<double>(ir_hits) / n;
    return r;
}

/// One evaluation row: recalls at k ∈ {1,5,10} (clamped to the split size)
/// plus the mean training loss of the epoch that produced it.
struct RetrievalMetrics {
    double ir1 = 0, ir5 = 0, ir10 = 0;
    double tr1 = 0, tr5 = 0, tr10 = 0;
    double loss = 0;
};

/// Full-split evaluation from a precomputed similarity matrix.
template <typename T>
RetrievalMetrics evaluate_similarity(const Tensor<T>& s) {
    const int n = s.dim(0);
    const T* p = s.data();
    for (std::int64_t i = 0; i < s.numel(); ++i)
        if (!(std::abs(static_cast<double>(p[i])) <= 1.0 + 1e-5))
            throw std::runtime_error("similarity entry " + std::to_string(static_cast<double>(p[i])) +
                                     " outside [-1, 1]; embeddings are not unit-norm");
    RetrievalMetrics m;
    RecallPair r1 = recall_at_k(s, std::min(1, n));
    RecallPair r5 = recall_at_k(s, std::min(5, n));
    RecallPair r10 = recall_at_k(s, std::min(10, n));
    m.ir1 = r1.ir;
    m.tr1 = r1.tr;
    m.ir5 = r5.ir;
    m.tr5 = r5.tr;
    m.ir10 = r10.ir;
    m.tr10 = r10.tr;
    return m;
}

/// Mean over rows of the Euclidean distance between corresponding rows of
/// a and b — the embedding-movement measure behind the transfer analysis.
template <typename T>
double mean_row_distance(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "mean_row_distance");
    if (a.shape() != b.shape())
        throw std::invalid_argument("mean_row_distance: shapes differ: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int rows = a.dim(0);
    const int cols = a.dim(1);
    const T* pa = a.data();
    const T* pb = b.data();
    double total = 0.0;
    for (int i = 0; i < rows; ++i) {
        double sq = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double diff = static_cast<double>(pa[static_cast<std::int64_t>(i) * cols + j]) -
                                static_cast<double>(pb[static_cast<std::int64_t>(i) * cols + j]);
            sq += diff * diff;
        }
        total += std::sqrt(sq);
    }
    return rows == 0 ? 0.0 : total / rows;
}

}  // namespace mwa
