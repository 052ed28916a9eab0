#pragma once

// Affine (asymmetric, per-tensor) integer quantization:
//
//   code(x) = clamp(round_half_even(x / s) + z, 0, 2^b - 1)
//   deq(c)  = s * (c - z)
//
// with bit-widths b in [2, 8], unsigned codes, scale s > 0 and integer zero
// point z in [0, 2^b - 1]. Rounding is round-half-to-even throughout (ties at
// .5 go to the even integer), which is what std::nearbyint does under the
// default FE_TONEAREST mode; nothing in this codebase touches the FP
// environment.

#include "saq/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace saq {

inline double round_half_even(double x) { return std::nearbyint(x); }

// Range lower than this is treated as degenerate and widened so the scale
// stays positive (all-zero calibration tensors hit this path).
inline constexpr double kDegenerateRange = 1e-8;

struct QuantSpec {
    double scale = 1.0;
    std::int64_t zero_point = 0;
    int bit_width = 8;

    std::int64_t qmax() const { return (std::int64_t{1} << bit_width) - 1; }

    void validate() const {
        if (bit_width < 2 || bit_width > 8)
            throw std::invalid_argument("QuantSpec: bit_width must be in [2, 8]");
        if (!(scale > 0.0) || !std::isfinite(scale))
            throw std::invalid_argument("QuantSpec: scale must be positive and finite");
        if (zero_point < 0 || zero_point > qmax())
            throw std::invalid_argument("QuantSpec: zero_point out of [0, 2^b - 1]");
    }
};

struct QuantizedTensor {
    std::vector<std::size_t> shape;
    std::vector<std::uint16_t> codes;
    QuantSpec spec;
};

inline std::int64_t quantize_value(double x, const QuantSpec& spec) {
    const double c = round_half_even(x / spec.scale) + static_cast<double>(spec.zero_point);
    if (!(c > 0.0)) return 0; // negated comparison so NaN clamps low instead of UB
    const double qmax = static_cast<double>(spec.qmax());
    if (c >= qmax) return spec.qmax();
    return static_cast<std::int64_t>(c);
}

inline double dequantize_value(std::int64_t code, const QuantSpec& spec) {
    return spec.scale * (static_cast<double>(code) - static_cast<double>(spec.zero_point));
}

inline double fake_quant_value(double x, const QuantSpec& spec) {
    return dequantize_value(quantize_value(x, spec), spec);
}

inline QuantizedTensor quantize(const Tensor& x, const QuantSpec& spec) {
    spec.validate();
    QuantizedTensor q;
    q.shape = x.shape;
    q.spec = spec;
    q.codes.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x.data[i]))
            throw std::invalid_argument("quantize: non-finite input at flat index " +
                                        std::to_string(i));
        q.codes[i] = static_cast<std::uint16_t>(quantize_value(x.data[i], spec));
    }
    return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
    q.spec.validate();
    Tensor t(q.shape);
    if (t.size() != q.codes.size())
        throw std::invalid_argument("dequantize: shape does not match code count");
    for (std::size_t i = 0; i < q.codes.size(); ++i)
        t.data[i] = dequantize_value(static_cast<std::int64_t>(q.codes[i]), q.spec);
    return t;
}

inline Tensor fake_quant(const Tensor& x, const QuantSpec& spec) {
    spec.validate();
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i)
        out.data[i] = fake_quant_value(x.data[i], spec);
    return out;
}

// Min/max calibration. The range is nudged to include zero first (standard
// asymmetric-quantization convention) so the zero point always lands inside
// [0, 2^b - 1] and exact zeros stay exact; a fully degenerate range (all-zero
// tensor) is widened by kDegenerateRange.
inline QuantSpec fit_qparams_minmax(const Tensor& x, int bit_width) {
    if (x.empty())
        throw std::invalid_argument("fit_qparams_minmax: empty tensor");
    if (bit_width < 2 || bit_width > 8)
        throw std::invalid_argument("fit_qparams_minmax: bit_width must be in [2, 8]");
    double lo = 0.0, hi = 0.0;
    for (double v : x.data) {
        if (!std::isfinite(v))
            throw std::invalid_argument("fit_qparams_minmax: non-finite input");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo < kDegenerateRange) hi = lo + kDegenerateRange;

    QuantSpec spec;
    spec.bit_width = bit_width;
    const double qmax = static_cast<double>(spec.qmax());
    spec.scale = (hi - lo) / qmax;
    double z = round_half_even(-lo / spec.scale);
    z = std::min(std::max(z, 0.0), qmax);
    spec.zero_point = static_cast<std::int64_t>(z);
    spec.validate();
    return spec;
}

// ---------------------------------------------------------------------------
// Container IO: shared header from tensor.hpp, payload (scale f64,
// zero_point u32, bit_width u32, codes u16[]).
// ---------------------------------------------------------------------------

inline void write_quantized_tensor(std::ostream& os, const QuantizedTensor& q) {
    q.spec.validate();
    detail::put_header(os, q.shape);
    detail::put_f64(os, q.spec.scale);
    detail::put_u32(os, static_cast<std::uint32_t>(q.spec.zero_point));
    detail::put_u32(os, static_cast<std::uint32_t>(q.spec.bit_width));
    for (std::uint16_t c : q.codes) detail::put_u16(os, c);
    if (!os) throw std::runtime_error("quantized tensor: write failed");
}

inline QuantizedTensor read_quantized_tensor(std::istream& is) {
    QuantizedTensor q;
    q.shape = detail::get_header(is);
    q.spec.scale = detail::get_f64(is);
    q.spec.zero_point = static_cast<std::int64_t>(detail::get_u32(is));
    q.spec.bit_width = static_cast<int>(detail::get_u32(is));
    q.spec.validate();
    q.codes.resize(Tensor::count_of(q.shape));
    for (auto& c : q.codes) c = detail::get_u16(is);
    return q;
}

} // namespace saq
