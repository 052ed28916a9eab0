// Tensor container + affine quantizer suite.
//
// Oracle strategy: the container byte layout is pinned against a hand-built
// byte string; quantizer properties (round-trip bound, monotonicity, clamp
// saturation) are checked by exhaustive/randomized scans computed here with
// independent arithmetic rather than by re-calling the library formulas.

#include <catch2/catch_amalgamated.hpp>

#include "saq/quant.hpp"
#include "saq/rng.hpp"
#include "saq/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <sstream>

using namespace saq;

TEST_CASE("tensor shape/data consistency is enforced") {
    REQUIRE_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
    Tensor t({2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE(t.rows() == 2);
    REQUIRE(t.cols() == 3);
    t.at(1, 2) = 5.0;
    REQUIRE(t.data[5] == 5.0);
}

TEST_CASE("container round-trips tensors bitwise") {
    Rng rng(123);
    for (std::size_t trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> shape;
        const std::size_t rank = 1 + (rng.next_u64() % 3);
        for (std::size_t r = 0; r < rank; ++r) shape.push_back(1 + (rng.next_u64() % 7));
        Tensor t(shape);
        for (double& v : t.data) v = rng.normal() * 1e3;
        std::stringstream ss;
        write_tensor(ss, t);
        Tensor back = read_tensor(ss);
        REQUIRE(back.shape == t.shape);
        REQUIRE(back.data.size() == t.data.size());
        REQUIRE(std::memcmp(back.data.data(), t.data.data(),
                            t.data.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("container byte layout is exactly as documented") {
    // Hand-assembled expectation for a [1, 2] tensor holding {1.0, -2.0}.
    Tensor t({1, 2}, {1.0, -2.0});
    std::stringstream ss;
    write_tensor(ss, t);
    const std::string bytes = ss.str();

    std::string expect;
    expect += "SAQT";
    auto push_u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) expect += static_cast<char>((v >> (8 * i)) & 0xff);
    };
    auto push_u64 = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) expect += static_cast<char>((v >> (8 * i)) & 0xff);
    };
    push_u32(1);            // version
    push_u32(2);            // rank
    push_u64(1);            // extent 0
    push_u64(2);            // extent 1
    auto push_f64 = [&](double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        push_u64(bits);
    };
    push_f64(1.0);
    push_f64(-2.0);

    REQUIRE(bytes == expect);
}

TEST_CASE("container rejects corrupted streams") {
    Tensor t({3}, {1.0, 2.0, 3.0});
    std::stringstream ss;
    write_tensor(ss, t);
    std::string bytes = ss.str();

    SECTION("bad magic") {
        bytes[0] = 'X';
        std::stringstream bad(bytes);
        REQUIRE_THROWS_AS(read_tensor(bad), std::runtime_error);
    }
    SECTION("truncated payload") {
        std::stringstream bad(bytes.substr(0, bytes.size() - 4));
        REQUIRE_THROWS_AS(read_tensor(bad), std::runtime_error);
    }
}

TEST_CASE("round-half-even matches the pinned tie table") {
    REQUIRE(round_half_even(0.5) == 0.0);
    REQUIRE(round_half_even(1.5) == 2.0);
    REQUIRE(round_half_even(2.5) == 2.0);
    REQUIRE(round_half_even(3.5) == 4.0);
    REQUIRE(round_half_even(-0.5) == 0.0);
    REQUIRE(round_half_even(-1.5) == -2.0);
    REQUIRE(round_half_even(-2.5) == -2.0);
    REQUIRE(round_half_even(126.5) == 126.0);
    REQUIRE(round_half_even(127.5) == 128.0);
    REQUIRE(round_half_even(0.4999999) == 0.0);
    REQUIRE(round_half_even(0.5000001) == 1.0);
}

TEST_CASE("quantizer reproduces the worked tie example") {
    QuantSpec spec{0.1, 128, 8};
    // 0.05 / 0.1 = 0.5 -> ties-to-even -> 0 -> code 128 -> dequantizes to 0.
    REQUIRE(quantize_value(0.05, spec) == 128);
    REQUIRE(fake_quant_value(0.05, spec) == 0.0);
}

TEST_CASE("quant spec validation rejects bad parameters") {
    REQUIRE_THROWS_AS((QuantSpec{0.1, 0, 1}).validate(), std::invalid_argument);
    REQUIRE_THROWS_AS((QuantSpec{0.1, 0, 9}).validate(), std::invalid_argument);
    REQUIRE_THROWS_AS((QuantSpec{0.0, 0, 8}).validate(), std::invalid_argument);
    REQUIRE_THROWS_AS((QuantSpec{-0.5, 0, 8}).validate(), std::invalid_argument);
    REQUIRE_THROWS_AS((QuantSpec{0.1, -1, 8}).validate(), std::invalid_argument);
    REQUIRE_THROWS_AS((QuantSpec{0.1, 256, 8}).validate(), std::invalid_argument);
    REQUIRE_NOTHROW((QuantSpec{0.1, 255, 8}).validate());
    REQUIRE_NOTHROW((QuantSpec{0.1, 3, 2}).validate());
}

TEST_CASE("quantize rejects non-finite input") {
    QuantSpec spec{0.1, 8, 4};
    Tensor bad({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
    REQUIRE_THROWS_AS(quantize(bad, spec), std::invalid_argument);
    Tensor inf({1}, {std::numeric_limits<double>::infinity()});
    REQUIRE_THROWS_AS(quantize(inf, spec), std::invalid_argument);
}

TEST_CASE("round-trip error is bounded by half a scale inside the range") {
    // Exhaustive dense scan per bit-width with independently computed bounds:
    // representable range is [-s*z, s*(qmax - z)].
    Rng rng(777);
    for (int b : {2, 3, 4, 8}) {
        const std::int64_t qmax = (std::int64_t{1} << b) - 1;
        for (int trial = 0; trial < 8; ++trial) {
            QuantSpec spec;
            spec.bit_width = b;
            spec.scale = std::exp(rng.uniform(-4.0, 1.0));
            spec.zero_point = static_cast<std::int64_t>(rng.next_u64() % (qmax + 1));
            spec.validate();
            const double lo = -spec.scale * static_cast<double>(spec.zero_point);
            const double hi = spec.scale * static_cast<double>(qmax - spec.zero_point);
            for (int i = 0; i <= 2000; ++i) {
                const double x = lo + (hi - lo) * static_cast<double>(i) / 2000.0;
                const double err = std::abs(fake_quant_value(x, spec) - x);
                REQUIRE(err <= 0.5 * spec.scale * (1.0 + 1e-12));
            }
        }
    }
}

TEST_CASE("codes saturate at the clamp boundaries") {
    QuantSpec spec{0.05, 2, 2}; // qmax = 3
    REQUIRE(quantize_value(-1e9, spec) == 0);
    REQUIRE(quantize_value(1e9, spec) == 3);
    // Outside the representable range the round-trip error can exceed s/2 but
    // the dequantized value must equal the clamped endpoint.
    REQUIRE(fake_quant_value(-1e9, spec) == dequantize_value(0, spec));
    REQUIRE(fake_quant_value(1e9, spec) == dequantize_value(3, spec));
}

TEST_CASE("quantization is monotone on random pairs") {
    Rng rng(2024);
    for (int b : {2, 4, 8}) {
        QuantSpec spec;
        spec.bit_width = b;
        spec.scale = 0.037;
        spec.zero_point = (std::int64_t{1} << (b - 1));
        for (int i = 0; i < 10000; ++i) {
            double x = rng.uniform(-10.0, 10.0);
            double y = rng.uniform(-10.0, 10.0);
            if (x > y) std::swap(x, y);
            REQUIRE(quantize_value(x, spec) <= quantize_value(y, spec));
        }
    }
}

TEST_CASE("min-max calibration covers the data and pins zero") {
    SECTION("mixed-sign data") {
        Tensor x({5}, {-1.0, 0.25, 2.0, -0.5, 1.0});
        for (int b : {2, 4, 8}) {
            QuantSpec spec = fit_qparams_minmax(x, b);
            REQUIRE(spec.bit_width == b);
            REQUIRE(spec.scale == Catch::Approx(3.0 / static_cast<double>(spec.qmax())));
            // zero must round-trip exactly through the affine map
            REQUIRE(fake_quant_value(0.0, spec) == 0.0);
            // all calibration points must land inside the clamp range
            for (double v : x.data) {
                const std::int64_t c = quantize_value(v, spec);
                REQUIRE(c >= 0);
                REQUIRE(c <= spec.qmax());
                REQUIRE(std::abs(fake_quant_value(v, spec) - v) <=
                        0.5 * spec.scale * (1.0 + 1e-12));
            }
        }
    }
    SECTION("constant positive tensor includes zero in the range") {
        Tensor x({4}, {3.0, 3.0, 3.0, 3.0});
        QuantSpec spec = fit_qparams_minmax(x, 8);
        REQUIRE(spec.zero_point == 0);
        REQUIRE(spec.scale == Catch::Approx(3.0 / 255.0));
        const double rt = fake_quant_value(3.0, spec);
        REQUIRE(rt == Catch::Approx(3.0).margin(1e-12));
    }
    SECTION("all-zero tensor gets the degenerate widening") {
        Tensor x({3}, {0.0, 0.0, 0.0});
        QuantSpec spec = fit_qparams_minmax(x, 8);
        REQUIRE(spec.scale > 0.0);
        REQUIRE(spec.scale == Catch::Approx(1e-8 / 255.0));
        REQUIRE(quantize_value(0.0, spec) == spec.zero_point);
        REQUIRE(fake_quant_value(0.0, spec) == 0.0);
    }
    SECTION("errors") {
        REQUIRE_THROWS_AS(fit_qparams_minmax(Tensor(), 8), std::invalid_argument);
        Tensor x({1}, {1.0});
        REQUIRE_THROWS_AS(fit_qparams_minmax(x, 1), std::invalid_argument);
        REQUIRE_THROWS_AS(fit_qparams_minmax(x, 9), std::invalid_argument);
        Tensor nanx({1}, {std::numeric_limits<double>::quiet_NaN()});
        REQUIRE_THROWS_AS(fit_qparams_minmax(nanx, 8), std::invalid_argument);
    }
}

TEST_CASE("quantized tensors round-trip through the container") {
    Rng rng(55);
    Tensor x({3, 4});
    for (double& v : x.data) v = rng.normal();
    QuantSpec spec = fit_qparams_minmax(x, 4);
    QuantizedTensor q = quantize(x, spec);

    std::stringstream ss;
    write_quantized_tensor(ss, q);
    QuantizedTensor back = read_quantized_tensor(ss);

    REQUIRE(back.shape == q.shape);
    REQUIRE(back.codes == q.codes);
    REQUIRE(back.spec.scale == q.spec.scale);
    REQUIRE(back.spec.zero_point == q.spec.zero_point);
    REQUIRE(back.spec.bit_width == q.spec.bit_width);

    Tensor deq_a = dequantize(q);
    Tensor deq_b = dequantize(back);
    REQUIRE(std::memcmp(deq_a.data.data(), deq_b.data.data(),
                        deq_a.size() * sizeof(double)) == 0);
}
