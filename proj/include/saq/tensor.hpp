#pragma once

// Dense row-major double tensors plus the binary container format shared by
// checkpoints and tensor dumps. Everything here is deliberately simple: the
// lab runs 2-d toy problems and 64-wide MLPs, so there is no need for views,
// strides, or expression templates.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace saq {

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> extents)
        : shape(std::move(extents)), data(count_of(shape), 0.0) {}

    Tensor(std::vector<std::size_t> extents, std::vector<double> values)
        : shape(std::move(extents)), data(std::move(values)) {
        if (count_of(shape) != data.size())
            throw std::invalid_argument("Tensor: shape does not match data length");
    }

    static std::size_t count_of(const std::vector<std::size_t>& extents) {
        std::size_t n = 1;
        for (std::size_t e : extents) n *= e;
        return n;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool empty() const { return data.empty(); }

    // Row/column accessors for the common rank-2 case; rank-1 tensors are
    // treated as a single row.
    std::size_t rows() const { return rank() < 2 ? (rank() == 1 ? 1 : 0) : shape[0]; }
    std::size_t cols() const {
        if (rank() == 0) return 0;
        return rank() == 1 ? shape[0] : shape[1];
    }

    double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double abs_max() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::abs(v));
        return m;
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += other.data[i];
        return *this;
    }

    Tensor& operator-=(const Tensor& other) {
        require_same_shape(other, "-=");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= other.data[i];
        return *this;
    }

    Tensor& operator*=(double a) {
        for (double& v : data) v *= a;
        return *this;
    }

    void fill(double v) {
        for (double& x : data) x = v;
    }

  private:
    void require_same_shape(const Tensor& other, const char* op) const {
        if (!same_shape(other))
            throw std::invalid_argument(std::string("Tensor: shape mismatch in ") + op);
    }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

inline Tensor operator+(Tensor a, const Tensor& b) { a += b; return a; }
inline Tensor operator-(Tensor a, const Tensor& b) { a -= b; return a; }
inline Tensor operator*(Tensor a, double s) { a *= s; return a; }
inline Tensor operator*(double s, Tensor a) { a *= s; return a; }

// y += a * x
inline void axpy(double a, const Tensor& x, Tensor& y) {
    if (!x.same_shape(y)) throw std::invalid_argument("axpy: shape mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] += a * x.data[i];
}

inline double dot(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("dot: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

// Mean of squared elementwise differences over the whole tensor. Written once
// and reused by both the trajectory-MSE metric and the error-lab deviation
// measurements so the two agree to the last bit.
inline double mean_squared_deviation(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mean_squared_deviation: shape mismatch");
    if (a.empty()) throw std::invalid_argument("mean_squared_deviation: empty tensors");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Binary container. Layout (all little-endian):
//   magic   "SAQT" (4 bytes)
//   version u32    (currently 1)
//   rank    u32
//   extents u64[rank]
//   data    f64[product(extents)]
// A QuantizedTensor (see quant.hpp) reuses the same header and replaces the
// f64 payload with (scale f64, zero_point u32, bit_width u32, codes u16[]).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'S', 'A', 'Q', 'T'};

namespace detail {

inline void put_bytes(std::ostream& os, const unsigned char* p, std::size_t n) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff)};
    put_bytes(os, b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(os, b, 8);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(os, bits);
}

inline void get_bytes(std::istream& is, unsigned char* p, std::size_t n) {
    is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw std::runtime_error("tensor container: truncated stream");
}

inline std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    get_bytes(is, b, 2);
    return static_cast<std::uint16_t>(b[0] | (std::uint16_t(b[1]) << 8));
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    get_bytes(is, b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    get_bytes(is, b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is) {
    std::uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

inline void put_header(std::ostream& os, const std::vector<std::size_t>& shape) {
    put_bytes(os, reinterpret_cast<const unsigned char*>(kContainerMagic), 4);
    put_u32(os, kContainerVersion);
    put_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t e : shape) put_u64(os, static_cast<std::uint64_t>(e));
}

inline std::vector<std::size_t> get_header(std::istream& is) {
    unsigned char magic[4];
    get_bytes(is, magic, 4);
    for (int i = 0; i < 4; ++i)
        if (magic[i] != static_cast<unsigned char>(kContainerMagic[i]))
            throw std::runtime_error("tensor container: bad magic");
    const std::uint32_t version = get_u32(is);
    if (version != kContainerVersion)
        throw std::runtime_error("tensor container: unsupported version " + std::to_string(version));
    const std::uint32_t rank = get_u32(is);
    if (rank > 8) throw std::runtime_error("tensor container: implausible rank");
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(get_u64(is));
    return shape;
}

} // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    detail::put_header(os, t.shape);
    for (double v : t.data) detail::put_f64(os, v);
    if (!os) throw std::runtime_error("tensor container: write failed");
}

inline Tensor read_tensor(std::istream& is) {
    Tensor t(detail::get_header(is));
    for (double& v : t.data) v = detail::get_f64(is);
    return t;
}

} // namespace saq
