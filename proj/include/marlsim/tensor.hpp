#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <vector>

namespace marlsim {

// Dense row-major matrix of doubles. Deliberately minimal: the policy math
// needs exact, order-stable arithmetic more than it needs BLAS.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }

    std::size_t size() const { return a.size(); }

    void zero() { std::fill(a.begin(), a.end(), 0.0); }

    void add(const Matrix& o) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += o.a[i];
    }

    void scale(double s) {
        for (double& x : a) x *= s;
    }

    double frobenius_norm() const {
        double s = 0.0;
        for (double x : a) s += x * x;
        return std::sqrt(s);
    }

    bool operator==(const Matrix& o) const { return rows == o.rows && cols == o.cols && a == o.a; }
};

struct F64Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

    std::size_t byte_length() const { return data.size() * sizeof(double); }

    bool operator==(const F64Tensor& o) const { return shape == o.shape && data == o.data; }
};

// Little-endian byte helpers used by every serialized payload in the store.
inline void append_bytes(std::vector<std::uint8_t>& out, const void* src, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(src);
    out.insert(out.end(), p, p + n);
}

inline void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) { append_bytes(out, &v, 8); }
inline void append_f64(std::vector<std::uint8_t>& out, double v) { append_bytes(out, &v, 8); }

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

    std::uint64_t read_u64() {
        std::uint64_t v;
        std::memcpy(&v, buf_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }

    double read_f64() {
        double v;
        std::memcpy(&v, buf_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }

    void read_into(void* dst, std::size_t n) {
        std::memcpy(dst, buf_.data() + pos_, n);
        pos_ += n;
    }

    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    const std::vector<std::uint8_t>& buf_;
    std::size_t pos_ = 0;
};

}  // namespace marlsim
