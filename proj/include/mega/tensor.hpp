#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mega {

// Thrown for every contract violation surfaced by the library: bad shapes,
// non-finite values, malformed files, out-of-range arguments.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace num {

// Dense row-major f32 tensor. Storage is 32-bit; accumulation inside
// operations is 64-bit.
struct TensorF32 {
    std::vector<size_t> shape;
    std::vector<float> data;

    TensorF32() = default;
    TensorF32(std::vector<size_t> shape_, float fill = 0.0f);
    TensorF32(std::vector<size_t> shape_, std::vector<float> data_);

    static TensorF32 matrix(size_t rows, size_t cols, float fill = 0.0f) {
        return TensorF32({rows, cols}, fill);
    }
    static TensorF32 vector(size_t n, float fill = 0.0f) { return TensorF32({n}, fill); }
    static TensorF32 identity(size_t n);

    size_t size() const { return data.size(); }
    size_t ndim() const { return shape.size(); }
    size_t rows() const;
    size_t cols() const;

    float& at(size_t i, size_t j);
    float at(size_t i, size_t j) const;

    std::span<float> row(size_t i);
    std::span<const float> row(size_t i) const;

    bool same_shape(const TensorF32& other) const { return shape == other.shape; }

    // Throws if any entry is NaN or Inf. `what` names the tensor in the message.
    void check_finite(const std::string& what) const;
};

bool all_finite(std::span<const float> v);
void check_finite(std::span<const float> v, const std::string& what);

// Sum, dot and norms accumulate in double.
double dot(std::span<const float> a, std::span<const float> b);
double norm2(std::span<const float> v);
double frobenius_norm(const TensorF32& m);
double euclidean_distance(std::span<const float> a, std::span<const float> b);

std::string shape_str(const std::vector<size_t>& shape);

} // namespace num
} // namespace mega
