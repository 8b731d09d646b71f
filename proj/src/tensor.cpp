#include "mega/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace mega::num {

static size_t shape_product(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) {
        if (d == 0) throw Error("TensorF32: zero dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

TensorF32::TensorF32(std::vector<size_t> shape_, float fill)
    : shape(std::move(shape_)), data(shape_product(shape), fill) {}

TensorF32::TensorF32(std::vector<size_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    if (shape_product(shape) != data.size()) {
        throw Error("TensorF32: shape " + shape_str(shape) + " does not match " +
                    std::to_string(data.size()) + " elements");
    }
}

TensorF32 TensorF32::identity(size_t n) {
    TensorF32 m({n, n}, 0.0f);
    for (size_t i = 0; i < n; ++i) m.at(i, i) = 1.0f;
    return m;
}

size_t TensorF32::rows() const {
    if (ndim() != 2) throw Error("TensorF32: rows() on non-matrix of shape " + shape_str(shape));
    return shape[0];
}

size_t TensorF32::cols() const {
    if (ndim() != 2) throw Error("TensorF32: cols() on non-matrix of shape " + shape_str(shape));
    return shape[1];
}

float& TensorF32::at(size_t i, size_t j) { return data[i * cols() + j]; }
float TensorF32::at(size_t i, size_t j) const { return data[i * cols() + j]; }

std::span<float> TensorF32::row(size_t i) {
    size_t c = cols();
    return {data.data() + i * c, c};
}

std::span<const float> TensorF32::row(size_t i) const {
    size_t c = cols();
    return {data.data() + i * c, c};
}

void TensorF32::check_finite(const std::string& what) const {
    mega::num::check_finite(data, what);
}

bool all_finite(std::span<const float> v) {
    for (float x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void check_finite(std::span<const float> v, const std::string& what) {
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw Error(what + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

double dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw Error("dot: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
    return acc;
}

double norm2(std::span<const float> v) {
    double acc = 0.0;
    for (float x : v) acc += double(x) * double(x);
    return std::sqrt(acc);
}

double frobenius_norm(const TensorF32& m) { return norm2(m.data); }

double euclidean_distance(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw Error("euclidean_distance: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = double(a[i]) - double(b[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

std::string shape_str(const std::vector<size_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

} // namespace mega::num
