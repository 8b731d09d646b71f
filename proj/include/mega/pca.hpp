#pragma once

#include "mega/tensor.hpp"

namespace mega::num {

// Principal-subspace projector: z = basis * (h - mean), h' = mean + basis^T * z.
// `basis` has k orthonormal rows of length d.
struct PcaProjector {
    std::vector<float> mean;               // d
    TensorF32 basis;                       // k x d
    std::vector<float> explained_variance; // k ratios, descending, sum <= 1

    size_t k() const { return basis.rows(); }
    size_t dim() const { return basis.cols(); }

    std::vector<float> project(std::span<const float> h) const;
    std::vector<float> reconstruct(std::span<const float> z) const;
    // Projects every row of an n x d matrix into n x k coordinates.
    TensorF32 project_rows(const TensorF32& data) const;
};

// Fits a k-dimensional PCA of the rows of `data` (n x d). Uses the d x d
// sample covariance when d <= n, otherwise the n x n Gram matrix. Throws when
// k is out of range [1, min(n-1, d)] or when the data has fewer than k
// directions of positive variance, unless `allow_zero_variance` is set, in
// which case the basis is completed with zero-variance directions.
PcaProjector pca_fit(const TensorF32& data, size_t k, bool allow_zero_variance = false);

// Number of directions with numerically positive variance; the largest k
// that pca_fit accepts without the zero-variance flag.
size_t pca_rank(const TensorF32& data);

} // namespace mega::num
