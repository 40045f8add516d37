#pragma once

// Two's-complement fixed-point semantics shared by the fake-quant path, the
// integer interpreter, and the C emitter. A format has W total bits, I
// integer bits (sign included when signed) and F = W - I fractional bits.
// Signed range is [-2^(I-1), 2^(I-1) - 2^-F]; unsigned is [0, 2^I - 2^-F].

#include <cmath>
#include <cstdint>
#include <string>

#include "edgerel/error.hpp"

namespace edgerel::fx {

enum class Rounding { half_even, truncate };
enum class Overflow { saturate, wrap };

struct Format {
    int total_bits = 6;
    int int_bits = 1;
    bool is_signed = true;
    Rounding rounding = Rounding::half_even;
    Overflow overflow = Overflow::saturate;

    constexpr int frac_bits() const noexcept { return total_bits - int_bits; }

    constexpr std::int64_t min_code() const noexcept {
        return is_signed ? -(std::int64_t{1} << (total_bits - 1)) : 0;
    }
    constexpr std::int64_t max_code() const noexcept {
        return is_signed ? (std::int64_t{1} << (total_bits - 1)) - 1
                         : (std::int64_t{1} << total_bits) - 1;
    }

    double lsb() const noexcept { return std::ldexp(1.0, -frac_bits()); }
    double min_value() const noexcept { return std::ldexp(static_cast<double>(min_code()), -frac_bits()); }
    double max_value() const noexcept { return std::ldexp(static_cast<double>(max_code()), -frac_bits()); }

    void validate() const {
        if (total_bits < 2 || total_bits > 32)
            throw Error("fixed-point format: total bits must be in [2, 32], got " + std::to_string(total_bits));
        if (int_bits < 1 || int_bits > total_bits)
            throw Error("fixed-point format: integer bits must be in [1, W], got " + std::to_string(int_bits));
    }

    friend bool operator==(const Format&, const Format&) = default;
};

// Signed W-bit format with I integer bits and the default rne/saturate modes.
inline Format signed_format(int total_bits, int int_bits) {
    Format f{total_bits, int_bits, true, Rounding::half_even, Overflow::saturate};
    f.validate();
    return f;
}

inline Format unsigned_format(int total_bits, int int_bits) {
    Format f{total_bits, int_bits, false, Rounding::half_even, Overflow::saturate};
    f.validate();
    return f;
}

struct BitCode {
    std::int64_t code = 0;
    Format format;

    friend bool operator==(const BitCode&, const BitCode&) = default;
};

namespace detail {

inline double round_half_even(double s) {
    const double fl = std::floor(s);
    const double d = s - fl;
    if (d > 0.5) return fl + 1.0;
    if (d < 0.5) return fl;
    return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

// Reduce an integer into the W-bit window of the format.
inline std::int64_t wrap_code(std::int64_t v, const Format& fmt) {
    const auto mask = (std::uint64_t{1} << fmt.total_bits) - 1;
    auto bits = static_cast<std::uint64_t>(v) & mask;
    if (fmt.is_signed && (bits >> (fmt.total_bits - 1)) != 0) bits |= ~mask;
    return static_cast<std::int64_t>(bits);
}

inline std::int64_t apply_overflow(std::int64_t v, const Format& fmt) {
    if (fmt.overflow == Overflow::saturate) {
        if (v < fmt.min_code()) return fmt.min_code();
        if (v > fmt.max_code()) return fmt.max_code();
        return v;
    }
    return wrap_code(v, fmt);
}

} // namespace detail

// Integer code for x under fmt's rounding and overflow modes.
inline std::int64_t to_code(double x, const Format& fmt) {
    if (!std::isfinite(x)) throw Error("quantize: non-finite input");
    const double scaled = std::ldexp(x, fmt.frac_bits());
    double r = fmt.rounding == Rounding::half_even ? detail::round_half_even(scaled) : std::floor(scaled);
    if (fmt.overflow == Overflow::saturate) {
        if (r < static_cast<double>(fmt.min_code())) return fmt.min_code();
        if (r > static_cast<double>(fmt.max_code())) return fmt.max_code();
        return static_cast<std::int64_t>(r);
    }
    // Keep the integer conversion in range; 2^W divides the modulus exactly.
    const double modulus = std::ldexp(1.0, fmt.total_bits);
    r = std::fmod(r, modulus);
    return detail::wrap_code(static_cast<std::int64_t>(r), fmt);
}

inline double to_real(std::int64_t code, const Format& fmt) noexcept {
    return std::ldexp(static_cast<double>(code), -fmt.frac_bits());
}

inline double quantize(double x, const Format& fmt) { return to_real(to_code(x, fmt), fmt); }

inline BitCode encode(double x, const Format& fmt) { return {to_code(x, fmt), fmt}; }

inline double decode(const BitCode& c) noexcept { return to_real(c.code, c.format); }

inline bool in_range(double x, const Format& fmt) noexcept {
    return x >= fmt.min_value() && x <= fmt.max_value();
}

inline BitCode flip_bit(const BitCode& c, int bit) {
    if (bit < 0 || bit >= c.format.total_bits)
        throw Error("flip_bit: bit index " + std::to_string(bit) + " outside [0, " +
                    std::to_string(c.format.total_bits) + ")");
    const auto toggled = static_cast<std::int64_t>(static_cast<std::uint64_t>(c.code) ^ (std::uint64_t{1} << bit));
    return {detail::wrap_code(toggled, c.format), c.format};
}

// Value change caused by toggling one bit: +-2^(j-F) below the sign bit,
// -+2^(W-1-F) for the sign bit of a signed format.
inline double bit_value_delta(const BitCode& c, int bit) { return decode(flip_bit(c, bit)) - decode(c); }

// Requantize an integer value carrying `from_frac` fractional bits into fmt.
// Right shifts use fmt's rounding mode; this is the reference the emitted C
// code mirrors.
inline std::int64_t rescale(std::int64_t value, int from_frac, const Format& fmt) {
    const int shift = from_frac - fmt.frac_bits();
    std::int64_t q = value;
    if (shift > 0) {
        q = value >> shift;
        if (fmt.rounding == Rounding::half_even) {
            const std::int64_t rem = value - (q << shift);
            const std::int64_t half = std::int64_t{1} << (shift - 1);
            if (rem > half || (rem == half && (q & 1) != 0)) ++q;
        }
    } else if (shift < 0) {
        q = value << (-shift);
    }
    return detail::apply_overflow(q, fmt);
}

} // namespace edgerel::fx
