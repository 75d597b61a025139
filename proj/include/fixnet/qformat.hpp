// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace fixnet {

using wide_int = __int128;

/// Fixed-point number format. A raw integer r in this format represents the
/// real value r * 2^-frac_bits. Storage widths are 4, 8, 16 or 32 bits;
/// widened product formats (see qmul) may carry intermediate widths.
/// frac_bits may be negative or exceed total_bits-1 to reach very large or
/// very small dynamic ranges.
struct QFormat {
    int total_bits = 8;
    int frac_bits = 0;
    bool is_signed = true;

    QFormat() = default;
    QFormat(int total, int frac, bool sign = true);

    int64_t raw_min() const {
        return is_signed ? -(int64_t(1) << (total_bits - 1)) : 0;
    }
    int64_t raw_max() const {
        return is_signed ? (int64_t(1) << (total_bits - 1)) - 1
                         : (int64_t(1) << total_bits) - 1;
    }
    /// Quantization step 2^-frac_bits.
    double lsb() const { return std::ldexp(1.0, -frac_bits); }
    double min_value() const { return std::ldexp(double(raw_min()), -frac_bits); }
    double max_value() const { return std::ldexp(double(raw_max()), -frac_bits); }

    /// Report string form, e.g. "Qs8.6" (signed) or "Qu8.6" (unsigned).
    std::string to_string() const;
    /// Parses the to_string() form. Throws std::runtime_error on bad input.
    static QFormat parse(const std::string& s);

    bool operator==(const QFormat&) const = default;
};

/// A single quantized value: raw integer plus its format.
struct QValue {
    int64_t raw = 0;
    QFormat fmt{};

    double value() const { return std::ldexp(double(raw), -fmt.frac_bits); }
};

/// Integer tensor sharing one format.
struct QTensor {
    std::vector<int64_t> raw;
    QFormat fmt{};

    double value(size_t i) const { return std::ldexp(double(raw[i]), -fmt.frac_bits); }
    std::vector<double> values() const;
};

/// Wide accumulator for sums of fixed-point products. The 128-bit raw keeps
/// the accumulation exact for any mix of storage widths up to 32x32-bit
/// products; to_real() is exact while |raw| < 2^53.
struct Accumulator {
    wide_int raw = 0;
    int frac_bits = 0;

    Accumulator() = default;
    explicit Accumulator(int frac) : raw(0), frac_bits(frac) {}
    static Accumulator from_raw(wide_int r, int frac) {
        Accumulator a(frac);
        a.raw = r;
        return a;
    }
    double to_real() const { return std::ldexp(double(raw), -frac_bits); }
};

/// Round-to-nearest (ties away from zero) then saturate. Returns the raw
/// integer; throws std::invalid_argument on non-finite input.
int64_t quantize_raw(double x, const QFormat& fmt);

/// quantize() composed with value(): nearest representable value under
/// round-to-nearest ties-away-from-zero, saturated to the format range.
QValue quantize(double x, const QFormat& fmt);

inline double dequantize(const QValue& q) { return q.value(); }

/// Exact widening multiply: result format has total_bits = a.total + b.total
/// and frac_bits = a.frac + b.frac, so no rounding ever occurs.
/// Requires both operands at most 16 bits wide.
QValue qmul(const QValue& a, const QValue& b);

/// Exact accumulation. p must carry the accumulator's frac_bits.
/// Overflow of the 128-bit raw is a hard error (misconfigured headroom).
Accumulator acc_add(Accumulator acc, const QValue& p);

/// Pure integer requantization: shift with round-to-nearest ties away from
/// zero, then saturate. Bit-exact with quantize(acc.to_real(), target) while
/// the accumulator value is exactly representable in double.
int64_t requantize_raw(wide_int acc_raw, int acc_frac, const QFormat& target);
QValue requantize(const Accumulator& acc, const QFormat& target);

/// Min/max calibration: picks frac_bits so the observed range just fits.
/// For signed formats frac_bits = total - 1 - max(0, ceil(log2(max_abs + eps)))
/// with eps = 2^-30; all-zero samples yield frac_bits = total - 1.
/// Throws on an empty collection or non-finite samples.
QFormat choose_format(std::span<const double> samples, int total_bits, bool is_signed = true);

}  // namespace fixnet
