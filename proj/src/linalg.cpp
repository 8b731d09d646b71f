#include "mega/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mega::num {

SymmetricMatrix::SymmetricMatrix(size_t dim_, std::vector<float> data_)
    : dim(dim_), data(std::move(data_)) {
    if (data.size() != dim * dim) {
        throw Error("SymmetricMatrix: expected " + std::to_string(dim * dim) + " entries, got " +
                    std::to_string(data.size()));
    }
    check_finite(data, "SymmetricMatrix");
    for (size_t i = 0; i < dim; ++i) {
        for (size_t j = i + 1; j < dim; ++j) {
            float a = at(i, j), b = at(j, i);
            if (std::fabs(a - b) > 1e-5f * (1.0f + std::fabs(a))) {
                throw Error("SymmetricMatrix: asymmetric at (" + std::to_string(i) + "," +
                            std::to_string(j) + "): " + std::to_string(a) + " vs " +
                            std::to_string(b));
            }
        }
    }
}

SymmetricMatrix SymmetricMatrix::from_tensor(const TensorF32& m) {
    if (m.ndim() != 2 || m.rows() != m.cols()) {
        throw Error("SymmetricMatrix: non-square tensor of shape " + shape_str(m.shape));
    }
    return SymmetricMatrix(m.rows(), m.data);
}

SymmetricMatrix SymmetricMatrix::identity(size_t n) {
    return from_tensor(TensorF32::identity(n));
}

SymmetricMatrix SymmetricMatrix::diagonal(std::span<const float> d) {
    TensorF32 m({d.size(), d.size()}, 0.0f);
    for (size_t i = 0; i < d.size(); ++i) m.at(i, i) = d[i];
    return from_tensor(m);
}

TensorF32 SymmetricMatrix::to_tensor() const { return TensorF32({dim, dim}, data); }

double SymmetricMatrix::frobenius() const { return norm2(data); }

TensorF32 matmul(const TensorF32& a, const TensorF32& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw Error("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                    shape_str(b.shape));
    }
    size_t n = a.rows(), k = a.cols(), m = b.cols();
    TensorF32 c({n, m}, 0.0f);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (size_t l = 0; l < k; ++l) acc += double(a.at(i, l)) * double(b.at(l, j));
            c.at(i, j) = float(acc);
        }
    }
    c.check_finite("matmul result");
    return c;
}

std::vector<float> matvec(const TensorF32& m, std::span<const float> x) {
    if (m.ndim() != 2 || m.cols() != x.size()) {
        throw Error("matvec: incompatible shapes " + shape_str(m.shape) + " x vector of " +
                    std::to_string(x.size()));
    }
    std::vector<float> y(m.rows());
    for (size_t i = 0; i < m.rows(); ++i) y[i] = float(dot(m.row(i), x));
    check_finite(y, "matvec result");
    return y;
}

namespace {

// One cyclic Jacobi pass gives quadratic convergence once the off-diagonal
// mass is small; 64 sweeps is far beyond what dims <= ~1600 need.
constexpr int kMaxJacobiSweeps = 64;

double offdiag_norm(const std::vector<double>& a, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) acc += a[i * n + j] * a[i * n + j];
    return std::sqrt(2.0 * acc);
}

} // namespace

EigResult sym_eig(const SymmetricMatrix& s) {
    const size_t n = s.dim;
    std::vector<double> a(n * n);
    for (size_t i = 0; i < n * n; ++i) a[i] = double(s.data[i]);
    // Symmetrize exactly so rotations stay consistent.
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            double m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = a[j * n + i] = m;
        }

    std::vector<double> v(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

    const double scale = std::max(norm2(s.data), 1e-300);
    const double tol = 1e-14 * scale;

    bool converged = n < 2;
    for (int sweep = 0; sweep < kMaxJacobiSweeps && !converged; ++sweep) {
        if (offdiag_norm(a, n) <= tol) {
            converged = true;
            break;
        }
        for (size_t p = 0; p + 1 < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (std::fabs(apq) <= 1e-300) continue;
                double app = a[p * n + p], aqq = a[q * n + q];
                double theta = 0.5 * (aqq - app) / apq;
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(1.0 + theta * theta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double sn = t * c;

                for (size_t i = 0; i < n; ++i) {
                    double aip = a[i * n + p], aiq = a[i * n + q];
                    a[i * n + p] = c * aip - sn * aiq;
                    a[i * n + q] = sn * aip + c * aiq;
                }
                for (size_t i = 0; i < n; ++i) {
                    double api = a[p * n + i], aqi = a[q * n + i];
                    a[p * n + i] = c * api - sn * aqi;
                    a[q * n + i] = sn * api + c * aqi;
                }
                for (size_t i = 0; i < n; ++i) {
                    double vip = v[i * n + p], viq = v[i * n + q];
                    v[i * n + p] = c * vip - sn * viq;
                    v[i * n + q] = sn * vip + c * viq;
                }
            }
        }
    }
    if (!converged && offdiag_norm(a, n) > tol) {
        throw Error("sym_eig: Jacobi iteration did not converge within " +
                    std::to_string(kMaxJacobiSweeps) + " sweeps");
    }

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t x, size_t y) { return a[x * n + x] > a[y * n + y]; });

    EigResult out;
    out.eigenvalues.resize(n);
    out.eigenvectors = TensorF32({n, n}, 0.0f);
    for (size_t j = 0; j < n; ++j) {
        size_t src = order[j];
        out.eigenvalues[j] = float(a[src * n + src]);
        for (size_t i = 0; i < n; ++i) out.eigenvectors.at(i, j) = float(v[i * n + src]);
    }
    return out;
}

SymmetricMatrix sqrtm_psd(const SymmetricMatrix& s, float floor) {
    if (floor < 0.0f) throw Error("sqrtm_psd: negative floor");
    EigResult eig = sym_eig(s);
    const double fro = std::max(s.frobenius(), 1e-300);
    const size_t n = s.dim;

    for (float w : eig.eigenvalues) {
        if (double(w) < -1e-3 * fro) {
            throw Error("sqrtm_psd: materially indefinite input (eigenvalue " +
                        std::to_string(w) + ", ||S||_F " + std::to_string(fro) + ")");
        }
    }

    std::vector<double> sq(n);
    for (size_t i = 0; i < n; ++i) {
        double w = double(eig.eigenvalues[i]);
        if (w < 0.0) w = double(floor);
        sq[i] = std::sqrt(w);
    }

    TensorF32 r({n, n}, 0.0f);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i; j < n; ++j) {
            double acc = 0.0;
            for (size_t l = 0; l < n; ++l)
                acc += double(eig.eigenvectors.at(i, l)) * sq[l] *
                       double(eig.eigenvectors.at(j, l));
            r.at(i, j) = float(acc);
            r.at(j, i) = float(acc);
        }
    }
    return SymmetricMatrix::from_tensor(r);
}

SymmetricMatrix covariance(const TensorF32& data, std::vector<float>* mean_out) {
    size_t n = data.rows(), d = data.cols();
    if (n < 2) throw Error("covariance: need at least 2 rows");

    std::vector<double> mean(d, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) mean[j] += double(data.at(i, j));
    for (size_t j = 0; j < d; ++j) mean[j] /= double(n);

    std::vector<double> cov(d * d, 0.0);
    std::vector<double> centered(d);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < d; ++j) centered[j] = double(data.at(i, j)) - mean[j];
        for (size_t a = 0; a < d; ++a)
            for (size_t b = a; b < d; ++b) cov[a * d + b] += centered[a] * centered[b];
    }
    const double norm = 1.0 / double(n - 1);
    TensorF32 out({d, d}, 0.0f);
    for (size_t a1 = 0; a1 < d; ++a1)
        for (size_t b = a1; b < d; ++b) {
            float v = float(cov[a1 * d + b] * norm);
            out.at(a1, b) = v;
            out.at(b, a1) = v;
        }

    if (mean_out) {
        mean_out->resize(d);
        for (size_t j = 0; j < d; ++j) (*mean_out)[j] = float(mean[j]);
    }
    return SymmetricMatrix::from_tensor(out);
}

} // namespace mega::num
