#include <gtest/gtest.h>

#include <cfenv>
#include <cmath>
#include <cstdint>
#include <random>

#include "edgerel/fixedpoint.hpp"
#include "support.hpp"

using namespace edgerel;
using test::fmt;

namespace {

// Value of a raw W-bit pattern read as two's complement (or unsigned),
// computed bit by bit without touching the library.
double pattern_value(std::uint32_t bits, int w, int f, bool is_signed) {
    double v = 0.0;
    for (int j = 0; j < w; ++j) {
        if (((bits >> j) & 1u) == 0) continue;
        const double weight = std::ldexp(1.0, j - f);
        v += (is_signed && j == w - 1) ? -weight : weight;
    }
    return v;
}

std::uint32_t pattern_of(std::int64_t code, int w) { return static_cast<std::uint32_t>(code) & ((1u << w) - 1u); }

} // namespace

TEST(Quantize, Examples) {
    const auto f = fmt(6, 1);
    EXPECT_EQ(fx::quantize(0.0, f), 0.0);
    EXPECT_EQ(fx::quantize(0.30, f), 0.3125);
    EXPECT_EQ(fx::to_code(0.30, f), 10);
    EXPECT_EQ(fx::quantize(2.0, f), 31.0 / 32.0);
    EXPECT_EQ(fx::quantize(-2.0, f), -1.0);
}

TEST(Quantize, RoundingModes) {
    auto f = fmt(6, 1);
    // 2.5 and 3.5 LSBs: ties go to the even code.
    EXPECT_EQ(fx::to_code(2.5 / 32, f), 2);
    EXPECT_EQ(fx::to_code(3.5 / 32, f), 4);
    EXPECT_EQ(fx::to_code(-2.5 / 32, f), -2);
    f.rounding = fx::Rounding::truncate;
    EXPECT_EQ(fx::to_code(3.9 / 32, f), 3);
    EXPECT_EQ(fx::to_code(-0.1 / 32, f), -1); // truncation is toward -inf
    f.overflow = fx::Overflow::wrap;
    EXPECT_EQ(fx::to_code(1.0, f), -32);
    EXPECT_EQ(fx::to_code(33.0 / 32, f), -31);
}

TEST(Quantize, UnsignedRange) {
    const auto f = fmt(6, 2, false);
    EXPECT_EQ(f.min_value(), 0.0);
    EXPECT_EQ(f.max_value(), 4.0 - 1.0 / 16);
    EXPECT_EQ(fx::quantize(-1.0, f), 0.0);
    EXPECT_EQ(fx::quantize(9.0, f), f.max_value());
}

TEST(Quantize, Errors) {
    EXPECT_THROW(fx::quantize(NAN, fmt(6, 1)), Error);
    EXPECT_THROW(fx::quantize(INFINITY, fmt(6, 1)), Error);
    EXPECT_THROW(fx::signed_format(1, 1), Error);
    EXPECT_THROW(fx::signed_format(33, 1), Error);
    EXPECT_THROW(fx::signed_format(6, 0), Error);
    EXPECT_THROW(fx::signed_format(6, 7), Error);
    EXPECT_THROW(fx::flip_bit({0, fmt(6, 1)}, 6), Error);
    EXPECT_THROW(fx::flip_bit({0, fmt(6, 1)}, -1), Error);
}

TEST(Encode, Examples) {
    const auto f = fmt(6, 1);
    EXPECT_EQ(fx::encode(0.5, f).code, 16);
    EXPECT_EQ(fx::decode({-16, f}), -0.5);
}

TEST(Encode, RoundTripAllCodesW6) {
    for (bool s : {true, false}) {
        const auto f = fmt(6, s ? 1 : 2, s);
        for (std::int64_t c = f.min_code(); c <= f.max_code(); ++c) {
            EXPECT_EQ(fx::encode(fx::decode({c, f}), f).code, c);
            EXPECT_EQ(fx::decode({c, f}), pattern_value(pattern_of(c, 6), 6, f.frac_bits(), s));
        }
    }
}

TEST(Encode, DecodeOfEncodeIsQuantize) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int w : {2, 4, 6, 8, 12, 16, 32})
        for (int i = 0; i < 2000; ++i) {
            const auto f = fmt(w, std::min(w, 2));
            const double x = u(rng);
            EXPECT_EQ(fx::decode(fx::encode(x, f)), fx::quantize(x, f));
        }
}

TEST(FlipBit, Examples) {
    const auto f = fmt(6, 1);
    const auto c = fx::flip_bit({16, f}, 5);
    EXPECT_EQ(c.code, -16);
    EXPECT_EQ(fx::decode(c), -0.5);
    const auto z = fx::flip_bit({0, f}, 0);
    EXPECT_EQ(z.code, 1);
    EXPECT_EQ(fx::decode(z), 1.0 / 32);
}

TEST(FlipBit, InvolutionExhaustiveW6) {
    const auto f = fmt(6, 1);
    for (std::int64_t c = f.min_code(); c <= f.max_code(); ++c)
        for (int j = 0; j < 6; ++j) {
            const fx::BitCode b{c, f};
            const auto once = fx::flip_bit(b, j);
            EXPECT_NE(once.code, c);
            EXPECT_GE(once.code, f.min_code());
            EXPECT_LE(once.code, f.max_code());
            EXPECT_EQ(fx::flip_bit(once, j), b);
        }
}

TEST(BitValueDelta, Examples) {
    const auto f = fmt(6, 1);
    EXPECT_EQ(fx::bit_value_delta({0, f}, 0), 1.0 / 32);
    EXPECT_EQ(fx::bit_value_delta({0, f}, 5), -1.0);
}

TEST(BitValueDelta, ExhaustiveOracleW4) {
    for (bool s : {true, false})
        for (int i = 1; i <= 4; ++i) {
            const auto f = fmt(4, i, s);
            for (std::int64_t c = f.min_code(); c <= f.max_code(); ++c)
                for (int j = 0; j < 4; ++j) {
                    const auto bits = pattern_of(c, 4);
                    const double want =
                        pattern_value(bits ^ (1u << j), 4, 4 - i, s) - pattern_value(bits, 4, 4 - i, s);
                    const double got = fx::bit_value_delta({c, f}, j);
                    EXPECT_EQ(got, want) << "signed=" << s << " I=" << i << " code=" << c << " bit=" << j;
                    // Magnitude is a power of two fixed by the bit position.
                    EXPECT_EQ(std::abs(got), std::ldexp(1.0, j - (4 - i)));
                    if (s && j == 3) {
                        EXPECT_EQ(got, (c < 0 ? 1.0 : -1.0) * std::ldexp(1.0, 3 - (4 - i)));
                    }
                }
        }
}

TEST(BitValueDelta, Antisymmetry) {
    const auto f = fmt(8, 3);
    for (std::int64_t c = f.min_code(); c <= f.max_code(); ++c)
        for (int j = 0; j < 8; ++j) {
            const fx::BitCode b{c, f};
            EXPECT_EQ(fx::bit_value_delta(b, j), -fx::bit_value_delta(fx::flip_bit(b, j), j));
        }
}

TEST(QuantizeProperties, IdempotentHalfLsbMonotone) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int w : {2, 3, 6, 8, 16, 24}) {
        for (int i : {1, 2}) {
            for (bool s : {true, false}) {
                for (auto r : {fx::Rounding::half_even, fx::Rounding::truncate}) {
                    fx::Format f{w, i, s, r, fx::Overflow::saturate};
                    std::vector<double> xs(500);
                    for (double& x : xs) x = u(rng);
                    std::sort(xs.begin(), xs.end());
                    double prev = -INFINITY;
                    for (double x : xs) {
                        const double q = fx::quantize(x, f);
                        EXPECT_EQ(fx::quantize(q, f), q);
                        EXPECT_TRUE(fx::in_range(q, f));
                        if (fx::in_range(x, f)) {
                            const double bound = r == fx::Rounding::half_even ? 0.5 * f.lsb() : f.lsb();
                            EXPECT_LE(std::abs(q - x), bound);
                        }
                        EXPECT_LE(prev, q);
                        prev = q;
                    }
                }
            }
        }
    }
}

TEST(Rescale, MatchesRoundedRealDivision) {
    // Oracle: exact real value, rounded by the FPU in round-to-nearest-even
    // mode, then clamped. Values are small enough to be exact in a double.
    ASSERT_EQ(std::fegetround(), FE_TONEAREST);
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::int64_t> v(-(std::int64_t{1} << 40), std::int64_t{1} << 40);
    for (int from : {0, 5, 12, 20, 30}) {
        for (const auto& f : {fmt(16, 6), fmt(8, 2), fmt(12, 1, false), fmt(32, 16)}) {
            for (int n = 0; n < 3000; ++n) {
                const std::int64_t value = n < 16 ? (n - 8) << std::max(0, from - f.frac_bits() - 1) : v(rng);
                const double scaled = std::ldexp(static_cast<double>(value), f.frac_bits() - from);
                double want = std::nearbyint(scaled);
                want = std::clamp(want, static_cast<double>(f.min_code()), static_cast<double>(f.max_code()));
                EXPECT_EQ(fx::rescale(value, from, f), static_cast<std::int64_t>(want))
                    << "value=" << value << " from=" << from;
            }
        }
    }
}

TEST(Rescale, TruncateAndWrap) {
    fx::Format f{6, 1, true, fx::Rounding::truncate, fx::Overflow::wrap};
    // 40 / 2 = 20 fits; 100 / 2 = 50 wraps to 50 - 64.
    EXPECT_EQ(fx::rescale(40, 6, f), 20);
    EXPECT_EQ(fx::rescale(100, 6, f), -14);
    EXPECT_EQ(fx::rescale(-3, 6, f), -2); // floor(-1.5)
    EXPECT_EQ(fx::rescale(7, 3, f), 28);  // left shift
}
