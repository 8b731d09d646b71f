#pragma once

#include "mega/tensor.hpp"

namespace mega::num {

// Square symmetric matrix, f32 row-major. Symmetry is validated on
// construction: |S[i,j] - S[j,i]| <= 1e-5 * (1 + |S[i,j]|).
struct SymmetricMatrix {
    size_t dim = 0;
    std::vector<float> data; // dim x dim row-major

    SymmetricMatrix() = default;
    SymmetricMatrix(size_t dim_, std::vector<float> data_);
    static SymmetricMatrix from_tensor(const TensorF32& m);
    static SymmetricMatrix identity(size_t n);
    static SymmetricMatrix diagonal(std::span<const float> d);

    float at(size_t i, size_t j) const { return data[i * dim + j]; }
    float& at(size_t i, size_t j) { return data[i * dim + j]; }
    TensorF32 to_tensor() const;
    double frobenius() const;
};

// C = A * B for 2-D tensors, double accumulation, fixed row-major loop order.
TensorF32 matmul(const TensorF32& a, const TensorF32& b);
// y = M * x.
std::vector<float> matvec(const TensorF32& m, std::span<const float> x);

struct EigResult {
    std::vector<float> eigenvalues; // descending
    TensorF32 eigenvectors;         // dim x dim, column j pairs with eigenvalue j
};

// Symmetric eigendecomposition via cyclic Jacobi rotations (double
// internally). Throws on non-symmetric input or when the sweep budget is
// exhausted before the off-diagonal mass vanishes.
EigResult sym_eig(const SymmetricMatrix& s);

// Symmetric PSD square root: R with R*R ~= S. Eigenvalues below zero are
// clamped to `floor` before square-rooting. Throws if S is materially
// indefinite (some eigenvalue < -1e-3 * ||S||_F).
SymmetricMatrix sqrtm_psd(const SymmetricMatrix& s, float floor = 0.0f);

// Sample covariance of the rows of `data` (n x d), 1/(n-1) normalization,
// double accumulation. Means are returned through `mean_out` when non-null.
SymmetricMatrix covariance(const TensorF32& data, std::vector<float>* mean_out = nullptr);

} // namespace mega::num
