// SPDX-License-Identifier: Apache-2.0
#include "fixnet/qformat.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace fixnet {

QFormat::QFormat(int total, int frac, bool sign)
    : total_bits(total), frac_bits(frac), is_signed(sign) {
    // Storage widths are 4/8/16/32; 12/20/24 arise only as widened multiply
    // results of <=16-bit operands.
    if (total != 4 && total != 8 && total != 12 && total != 16 && total != 20 &&
        total != 24 && total != 32)
        throw std::invalid_argument("QFormat: unsupported total_bits " + std::to_string(total));
}

std::string QFormat::to_string() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "Q%c%d.%d", is_signed ? 's' : 'u', total_bits, frac_bits);
    return buf;
}

QFormat QFormat::parse(const std::string& s) {
    char sign = 0;
    int total = 0, frac = 0;
    if (std::sscanf(s.c_str(), "Q%c%d.%d", &sign, &total, &frac) != 3 ||
        (sign != 's' && sign != 'u'))
        throw std::runtime_error("QFormat::parse: bad format string '" + s + "'");
    return QFormat(total, frac, sign == 's');
}

std::vector<double> QTensor::values() const {
    std::vector<double> out(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) out[i] = value(i);
    return out;
}

int64_t quantize_raw(double x, const QFormat& fmt) {
    if (!std::isfinite(x))
        throw std::invalid_argument("quantize: non-finite input");
    // ldexp is exact (pure exponent shift); round() is ties-away-from-zero.
    const double scaled = std::ldexp(x, fmt.frac_bits);
    const double rounded = std::round(scaled);
    // Compare in double space before casting; raw bounds for storage widths
    // (<= 32 bits) are exactly representable.
    const double lo = double(fmt.raw_min());
    const double hi = double(fmt.raw_max());
    if (rounded <= lo) return fmt.raw_min();
    if (rounded >= hi) return fmt.raw_max();
    return int64_t(rounded);
}

QValue quantize(double x, const QFormat& fmt) {
    return QValue{quantize_raw(x, fmt), fmt};
}

QValue qmul(const QValue& a, const QValue& b) {
    if (a.fmt.total_bits > 16 || b.fmt.total_bits > 16)
        throw std::invalid_argument("qmul: operands must be at most 16 bits");
    QFormat wide(a.fmt.total_bits + b.fmt.total_bits,
                 a.fmt.frac_bits + b.fmt.frac_bits,
                 a.fmt.is_signed || b.fmt.is_signed);
    // n-bit * m-bit product always fits n+m bits, so this is exact.
    return QValue{a.raw * b.raw, wide};
}

Accumulator acc_add(Accumulator acc, const QValue& p) {
    if (p.fmt.frac_bits != acc.frac_bits)
        throw std::invalid_argument("acc_add: operand frac_bits does not match accumulator");
    wide_int sum;
    if (__builtin_add_overflow(acc.raw, wide_int(p.raw), &sum))
        throw std::runtime_error("acc_add: accumulator overflow (headroom misconfigured)");
    acc.raw = sum;
    return acc;
}

int64_t requantize_raw(wide_int acc_raw, int acc_frac, const QFormat& target) {
    const int shift = acc_frac - target.frac_bits;
    wide_int shifted;
    if (shift == 0) {
        shifted = acc_raw;
    } else if (shift < 0) {
        // Gaining fractional bits: exact left shift, saturating on overflow.
        const int up = -shift;
        if (up >= 64) {
            shifted = acc_raw == 0 ? 0
                      : acc_raw > 0 ? wide_int(target.raw_max()) + 1
                                    : wide_int(target.raw_min()) - 1;
        } else {
            const wide_int limit = wide_int(1) << 62;
            if (acc_raw > (limit >> up) || acc_raw < -(limit >> up))
                shifted = acc_raw > 0 ? limit : -limit;
            else
                shifted = acc_raw << up;
        }
    } else if (shift >= 127) {
        shifted = 0;  // |acc_raw| < 2^127 implies magnitude < 1/2 ulp
    } else {
        // Round to nearest, ties away from zero, on the magnitude.
        const bool neg = acc_raw < 0;
        const wide_int mag = neg ? -acc_raw : acc_raw;
        const wide_int half = wide_int(1) << (shift - 1);
        wide_int q = (mag + half) >> shift;
        shifted = neg ? -q : q;
    }
    if (shifted <= wide_int(target.raw_min())) return target.raw_min();
    if (shifted >= wide_int(target.raw_max())) return target.raw_max();
    return int64_t(shifted);
}

QValue requantize(const Accumulator& acc, const QFormat& target) {
    return QValue{requantize_raw(acc.raw, acc.frac_bits, target), target};
}

QFormat choose_format(std::span<const double> samples, int total_bits, bool is_signed) {
    if (samples.empty())
        throw std::invalid_argument("choose_format: empty sample collection");
    double max_abs = 0.0;
    for (double v : samples) {
        if (!std::isfinite(v))
            throw std::invalid_argument("choose_format: non-finite sample");
        max_abs = std::max(max_abs, std::fabs(v));
    }
    constexpr double kEps = 0x1p-30;  // guards log2 of zero
    const int int_bits = std::max(0, int(std::ceil(std::log2(max_abs + kEps))));
    const int frac = is_signed ? total_bits - 1 - int_bits : total_bits - int_bits;
    return QFormat(total_bits, max_abs == 0.0 ? total_bits - 1 : frac, is_signed);
}

}  // namespace fixnet
