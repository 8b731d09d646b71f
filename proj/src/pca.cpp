#include "mega/pca.hpp"

#include "mega/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace mega::num {

std::vector<float> PcaProjector::project(std::span<const float> h) const {
    if (h.size() != dim()) throw Error("PcaProjector::project: dimension mismatch");
    std::vector<float> centered(dim());
    for (size_t j = 0; j < dim(); ++j) centered[j] = h[j] - mean[j];
    return matvec(basis, centered);
}

std::vector<float> PcaProjector::reconstruct(std::span<const float> z) const {
    if (z.size() != k()) throw Error("PcaProjector::reconstruct: dimension mismatch");
    std::vector<float> h(mean.begin(), mean.end());
    for (size_t j = 0; j < dim(); ++j) {
        double acc = double(h[j]);
        for (size_t i = 0; i < k(); ++i) acc += double(basis.at(i, j)) * double(z[i]);
        h[j] = float(acc);
    }
    return h;
}

TensorF32 PcaProjector::project_rows(const TensorF32& data) const {
    TensorF32 out({data.rows(), k()}, 0.0f);
    for (size_t i = 0; i < data.rows(); ++i) {
        std::vector<float> z = project(data.row(i));
        std::copy(z.begin(), z.end(), out.row(i).begin());
    }
    return out;
}

namespace {

struct SpectrumInfo {
    EigResult eig;       // of covariance (d<=n) or Gram (d>n) matrix
    double total_var;    // trace of the sample covariance
    bool gram;           // eigensystem is of the n x n Gram matrix
    std::vector<float> mean;
};

constexpr double kVarianceEps = 1e-12;

SpectrumInfo data_spectrum(const TensorF32& data) {
    const size_t n = data.rows(), d = data.cols();
    SpectrumInfo info;
    if (d <= n) {
        SymmetricMatrix cov = covariance(data, &info.mean);
        info.eig = sym_eig(cov);
        double tr = 0.0;
        for (size_t i = 0; i < d; ++i) tr += double(cov.at(i, i));
        info.total_var = tr;
        info.gram = false;
    } else {
        // Gram route: eigenvectors u of X_c X_c^T / (n-1) lift to principal
        // directions X_c^T u / sqrt(lambda (n-1)).
        std::vector<double> mean(d, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j) mean[j] += double(data.at(i, j));
        for (size_t j = 0; j < d; ++j) mean[j] /= double(n);
        info.mean.resize(d);
        for (size_t j = 0; j < d; ++j) info.mean[j] = float(mean[j]);

        TensorF32 gram({n, n}, 0.0f);
        double tr = 0.0;
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = i; j < n; ++j) {
                double acc = 0.0;
                for (size_t l = 0; l < d; ++l)
                    acc += (double(data.at(i, l)) - mean[l]) * (double(data.at(j, l)) - mean[l]);
                acc /= double(n - 1);
                gram.at(i, j) = float(acc);
                gram.at(j, i) = float(acc);
            }
            tr += double(gram.at(i, i));
        }
        info.eig = sym_eig(SymmetricMatrix::from_tensor(gram));
        info.total_var = tr;
        info.gram = true;
    }
    return info;
}

} // namespace

size_t pca_rank(const TensorF32& data) {
    SpectrumInfo info = data_spectrum(data);
    const double lead = info.eig.eigenvalues.empty() ? 0.0 : double(info.eig.eigenvalues[0]);
    const double cutoff = std::max(kVarianceEps, 1e-6 * std::max(lead, 0.0));
    size_t rank = 0;
    for (float w : info.eig.eigenvalues)
        if (double(w) > cutoff) ++rank;
    return std::min(rank, std::min(data.rows() - 1, data.cols()));
}

PcaProjector pca_fit(const TensorF32& data, size_t k, bool allow_zero_variance) {
    const size_t n = data.rows(), d = data.cols();
    if (n < 2) throw Error("pca_fit: need at least 2 rows");
    const size_t k_max = std::min(n - 1, d);
    if (k < 1 || k > k_max) {
        throw Error("pca_fit: k=" + std::to_string(k) + " out of range [1," +
                    std::to_string(k_max) + "]");
    }
    data.check_finite("pca_fit input");

    SpectrumInfo info = data_spectrum(data);
    const double lead = info.eig.eigenvalues.empty() ? 0.0 : double(info.eig.eigenvalues[0]);
    const double cutoff = std::max(kVarianceEps, 1e-6 * std::max(lead, 0.0));
    size_t positive = 0;
    for (float w : info.eig.eigenvalues)
        if (double(w) > cutoff) ++positive;
    if (positive < k && !allow_zero_variance) {
        throw Error("pca_fit: data has only " + std::to_string(positive) +
                    " directions of positive variance, k=" + std::to_string(k) +
                    " requested (pass allow_zero_variance to permit)");
    }

    PcaProjector proj;
    proj.mean = info.mean;
    proj.basis = TensorF32({k, d}, 0.0f);
    proj.explained_variance.resize(k);

    const double denom = info.total_var > kVarianceEps ? info.total_var : 1.0;
    for (size_t c = 0; c < k; ++c) {
        double lambda = std::max(0.0, double(info.eig.eigenvalues[c]));
        proj.explained_variance[c] = float(lambda / denom);
        if (!info.gram) {
            for (size_t j = 0; j < d; ++j) proj.basis.at(c, j) = info.eig.eigenvectors.at(j, c);
        } else {
            // Lift Gram eigenvector; a zero-variance direction has no lift and
            // stays a zero row (only reachable with allow_zero_variance).
            if (lambda <= cutoff) continue;
            double scale = 1.0 / std::sqrt(lambda * double(n - 1));
            for (size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (size_t i = 0; i < n; ++i)
                    acc += (double(data.at(i, j)) - double(info.mean[j])) *
                           double(info.eig.eigenvectors.at(i, c));
                proj.basis.at(c, j) = float(acc * scale);
            }
        }
    }

    // Covariance-route eigenvectors of repeated eigenvalues are orthonormal by
    // construction; the Gram lift can drift at f32 scale, so re-orthonormalize.
    for (size_t c = 0; c < k; ++c) {
        std::vector<double> row(d);
        for (size_t j = 0; j < d; ++j) row[j] = double(proj.basis.at(c, j));
        for (size_t p = 0; p < c; ++p) {
            double r = 0.0;
            for (size_t j = 0; j < d; ++j) r += row[j] * double(proj.basis.at(p, j));
            for (size_t j = 0; j < d; ++j) row[j] -= r * double(proj.basis.at(p, j));
        }
        double nrm = 0.0;
        for (size_t j = 0; j < d; ++j) nrm += row[j] * row[j];
        nrm = std::sqrt(nrm);
        if (nrm <= 1e-12) {
            // Zero-variance completion: take the first standard basis vector
            // with a usable residual against the rows above.
            for (size_t t = 0; t < d && nrm <= 1e-6; ++t) {
                std::fill(row.begin(), row.end(), 0.0);
                row[t] = 1.0;
                for (size_t p = 0; p < c; ++p) {
                    double r = 0.0;
                    for (size_t j = 0; j < d; ++j) r += row[j] * double(proj.basis.at(p, j));
                    for (size_t j = 0; j < d; ++j) row[j] -= r * double(proj.basis.at(p, j));
                }
                nrm = 0.0;
                for (size_t j = 0; j < d; ++j) nrm += row[j] * row[j];
                nrm = std::sqrt(nrm);
            }
        }
        for (size_t j = 0; j < d; ++j) proj.basis.at(c, j) = float(row[j] / nrm);
    }
    proj.basis.check_finite("pca basis");
    return proj;
}

} // namespace mega::num
