// SPDX-License-Identifier: Apache-2.0
#include "fixnet/qforward.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fixnet {

bool PrecisionAssignment::all_float() const {
    if (!input.is_float()) return false;
    for (const auto& s : weights) if (!s.is_float()) return false;
    for (const auto& s : acts) if (!s.is_float()) return false;
    return true;
}

bool PrecisionAssignment::any_fixed_act() const {
    if (!input.is_float()) return true;
    for (const auto& s : acts) if (!s.is_float()) return true;
    return false;
}

void PrecisionAssignment::validate(const NetworkSpec& net) const {
    if (int(weights.size()) != net.num_layers() || int(acts.size()) != net.num_layers())
        throw std::invalid_argument("assignment does not cover every layer");
}

PrecisionAssignment uniform_assignment(const NetworkSpec& net, Precision weight_bits,
                                       Precision act_bits, int final_act_bits) {
    PrecisionAssignment a;
    a.input.prec = act_bits;
    a.weights.resize(size_t(net.num_layers()));
    a.acts.resize(size_t(net.num_layers()));
    for (auto& s : a.weights) s.prec = weight_bits;
    for (auto& s : a.acts) s.prec = act_bits;
    // The softmax input keeps at least final_act_bits regardless of the grid width.
    if (!act_bits.is_float())
        a.acts.back().prec = Precision{std::max(final_act_bits, act_bits.bits)};
    return a;
}

PrecisionAssignment assignment_from_spec(const NetworkSpec& net, int final_act_bits) {
    PrecisionAssignment a;
    a.weights.resize(size_t(net.num_layers()));
    a.acts.resize(size_t(net.num_layers()));
    bool any_fixed = false;
    for (int l = 0; l < net.num_layers(); ++l) {
        a.weights[size_t(l)].prec = net.layers[size_t(l)].weight_bits;
        a.acts[size_t(l)].prec = net.layers[size_t(l)].act_bits;
        if (!net.layers[size_t(l)].act_bits.is_float()) any_fixed = true;
    }
    a.input.prec = net.layers[0].act_bits;
    if (any_fixed && !a.acts.back().is_float() && a.acts.back().prec.bits < final_act_bits)
        a.acts.back().prec = Precision{final_act_bits};
    return a;
}

void calibrate_activations(PrecisionAssignment& assign, const NetworkSpec& net,
                           const Parameters& params, const Tensor& calib_batch) {
    assign.validate(net);
    const std::vector<int> dummy(size_t(calib_batch.shape[0]), 0);
    const Trace trace = forward_float(net, params, calib_batch, dummy);
    if (!assign.input.is_float() && !assign.input.fmt)
        assign.input.fmt = choose_format(calib_batch.data, assign.input.prec.bits);
    for (int l = 0; l < net.num_layers(); ++l) {
        PrecisionSlot& slot = assign.acts[size_t(l)];
        if (slot.is_float() || slot.fmt) continue;
        std::vector<double> samples = trace.layers[size_t(l)].pre.data;
        if (net.layers[size_t(l)].relu)
            for (double& v : samples) v = v > 0.0 ? v : 0.0;
        slot.fmt = choose_format(samples, slot.prec.bits);
    }
}

QuantizedView quantize_weights(const NetworkSpec& net, const Parameters& params,
                               const PrecisionAssignment& assign) {
    assign.validate(net);
    QuantizedView view;
    view.layers.resize(size_t(net.num_layers()));
    for (int l = 0; l < net.num_layers(); ++l) {
        const PrecisionSlot& slot = assign.weights[size_t(l)];
        QuantizedView::LayerView& lv = view.layers[size_t(l)];
        const Tensor& master = params.layers[size_t(l)].weight;
        if (slot.is_float()) {
            lv.weight = master;
            continue;
        }
        const QFormat fmt = slot.fmt ? *slot.fmt : choose_format(master.data, slot.prec.bits);
        lv.fmt = fmt;
        lv.raw.resize(master.data.size());
        lv.weight = Tensor(master.shape);
        for (size_t i = 0; i < master.data.size(); ++i) {
            lv.raw[i] = quantize_raw(master.data[i], fmt);
            lv.weight.data[i] = std::ldexp(double(lv.raw[i]), -fmt.frac_bits);
        }
    }
    return view;
}

QValue effective_relu_q(const Accumulator& acc, const QFormat& act_fmt) {
    const wide_int r = acc.raw > 0 ? acc.raw : 0;
    return QValue{requantize_raw(r, acc.frac_bits, act_fmt), act_fmt};
}

double effective_relu(const Accumulator& acc, const std::optional<QFormat>& act_fmt) {
    if (!act_fmt) return std::max(0.0, acc.to_real());
    return effective_relu_q(acc, *act_fmt).value();
}

namespace {

// Activation state flowing between layers: dequantized values plus, when the
// producing format was fixed point, the aligned raw integers.
struct ActState {
    Tensor values;
    std::optional<QFormat> fmt;
    std::vector<int64_t> raw;
};

// Step 1 + Step 2 over raw integers. Products of n-bit and m-bit operands are
// exact in the widened n+m-bit sense; the accumulator template gives int64
// fast paths when headroom allows and 128-bit otherwise.
template <typename AccT>
void linear_fixed(const NetworkSpec& net, const std::vector<LayerDims>& dims, int l,
                  std::span<const int64_t> wraw, std::span<const int64_t> xraw,
                  const Tensor& bias, int batch, int acc_frac, Tensor& pre) {
    const LayerSpec& ls = net.layers[size_t(l)];
    const LayerDims& d = dims[size_t(l)];
    if (ls.kind == LayerKind::Fc) {
        const int in_n = int(d.fan_in), out_n = d.out_c;
        for (int n = 0; n < batch; ++n) {
            const int64_t* x = &xraw[size_t(n) * in_n];
            for (int o = 0; o < out_n; ++o) {
                const int64_t* w = &wraw[size_t(o) * in_n];
                AccT acc = 0;
                for (int f = 0; f < in_n; ++f) acc += AccT(w[f]) * AccT(x[f]);
                pre.data[size_t(n) * out_n + o] =
                    std::ldexp(double(acc), -acc_frac) + bias[o];
            }
        }
        return;
    }
    const int C = d.in_c, H = d.in_h, W = d.in_w, K = ls.kernel, S = ls.stride, P = ls.pad;
    const int OC = d.out_c, OH = d.conv_h, OW = d.conv_w;
    for (int n = 0; n < batch; ++n)
        for (int o = 0; o < OC; ++o) {
            double* out_plane = &pre.data[(size_t(n) * OC + o) * OH * OW];
            for (int y = 0; y < OH; ++y) {
                const int iy0 = y * S - P;
                for (int x = 0; x < OW; ++x) {
                    const int ix0 = x * S - P;
                    AccT acc = 0;
                    for (int c = 0; c < C; ++c) {
                        const int64_t* in_plane = &xraw[(size_t(n) * C + c) * H * W];
                        const int64_t* w_plane = &wraw[((size_t(o) * C + c) * K) * K];
                        for (int ky = 0; ky < K; ++ky) {
                            const int iy = iy0 + ky;
                            if (iy < 0 || iy >= H) continue;
                            const int kx_lo = std::max(0, -ix0);
                            const int kx_hi = std::min(K, W - ix0);
                            const int64_t* in_row = in_plane + size_t(iy) * W + ix0;
                            const int64_t* w_row = w_plane + size_t(ky) * K;
                            for (int kx = kx_lo; kx < kx_hi; ++kx)
                                acc += AccT(w_row[kx]) * AccT(in_row[kx]);
                        }
                    }
                    out_plane[size_t(y) * OW + x] =
                        std::ldexp(double(acc), -acc_frac) + bias[o];
                }
            }
        }
}

int ceil_log2(int64_t n) {
    int b = 0;
    while ((int64_t(1) << b) < n) ++b;
    return b;
}

}  // namespace

Trace forward_quantized_view(const NetworkSpec& net, const QuantizedView& view,
                             const Parameters& params, const PrecisionAssignment& assign,
                             const Tensor& batch, std::span<const int> labels) {
    assign.validate(net);
    const auto dims = net.resolve_dims();
    const int n = batch.shape[0];
    for (int l = 0; l < net.num_layers(); ++l) {
        if (!assign.acts[size_t(l)].is_float() && !assign.acts[size_t(l)].fmt)
            throw std::invalid_argument("activation formats not calibrated (layer " +
                                        std::to_string(l + 1) + ")");
        if (!assign.weights[size_t(l)].is_float() && !view.layers[size_t(l)].fmt)
            throw std::invalid_argument("weight view not quantized (layer " +
                                        std::to_string(l + 1) + ")");
    }
    if (!assign.input.is_float() && !assign.input.fmt)
        throw std::invalid_argument("input format not calibrated");

    Trace trace;
    trace.batch = n;
    trace.layers.resize(size_t(net.num_layers()));

    ActState cur;
    if (assign.input.is_float()) {
        cur.values = batch;
    } else {
        const QFormat fmt = *assign.input.fmt;
        cur.fmt = fmt;
        cur.values = Tensor(batch.shape);
        cur.raw.resize(batch.data.size());
        for (size_t i = 0; i < batch.data.size(); ++i) {
            cur.raw[i] = quantize_raw(batch.data[i], fmt);
            cur.values.data[i] = std::ldexp(double(cur.raw[i]), -fmt.frac_bits);
        }
    }

    for (int l = 0; l < net.num_layers(); ++l) {
        const LayerSpec& ls = net.layers[size_t(l)];
        const LayerDims& d = dims[size_t(l)];
        const QuantizedView::LayerView& wv = view.layers[size_t(l)];
        Trace::Layer& tl = trace.layers[size_t(l)];
        tl.input = cur.values;
        tl.weight_used = wv.weight;

        if (wv.fmt && cur.fmt) {
            const int acc_frac = wv.fmt->frac_bits + cur.fmt->frac_bits;
            tl.pre = Tensor(ls.kind == LayerKind::Fc
                                ? std::vector<int>{n, d.out_c}
                                : std::vector<int>{n, d.out_c, d.conv_h, d.conv_w});
            const int prod_bits = wv.fmt->total_bits + cur.fmt->total_bits - 2;
            if (prod_bits + ceil_log2(std::max<int64_t>(1, d.fan_in)) <= 62)
                linear_fixed<int64_t>(net, dims, l, wv.raw, cur.raw,
                                      params.layers[size_t(l)].bias, n, acc_frac, tl.pre);
            else
                linear_fixed<wide_int>(net, dims, l, wv.raw, cur.raw,
                                       params.layers[size_t(l)].bias, n, acc_frac, tl.pre);
        } else {
            tl.pre = layer_linear_float(net, dims, l, wv.weight,
                                        params.layers[size_t(l)].bias, cur.values, n);
        }

        ActState next;
        Tensor h = tl.pre;
        if (ls.relu)
            for (double& v : h.data) v = v > 0.0 ? v : 0.0;
        const PrecisionSlot& aslot = assign.acts[size_t(l)];
        if (!aslot.is_float()) {
            const QFormat fmt = *aslot.fmt;
            next.fmt = fmt;
            next.raw.resize(h.data.size());
            for (size_t i = 0; i < h.data.size(); ++i) {
                next.raw[i] = quantize_raw(h.data[i], fmt);
                h.data[i] = std::ldexp(double(next.raw[i]), -fmt.frac_bits);
            }
        }
        if (ls.pool) {
            next.values = maxpool2x2(h, n, d.out_c, d.conv_h, d.conv_w, tl.pool_argmax);
            if (next.fmt) {
                std::vector<int64_t> pooled(tl.pool_argmax.size());
                for (size_t i = 0; i < tl.pool_argmax.size(); ++i)
                    pooled[i] = next.raw[size_t(tl.pool_argmax[i])];
                next.raw = std::move(pooled);
            }
        } else {
            next.values = std::move(h);
        }
        tl.output = next.values;
        cur = std::move(next);
    }

    trace.logits = Tensor({n, net.num_classes}, cur.values.data);
    trace.loss = softmax_cross_entropy(trace.logits, labels, &trace.probs);
    return trace;
}

Trace forward_quantized(const NetworkSpec& net, const Parameters& params,
                        const PrecisionAssignment& assign, const Tensor& batch,
                        std::span<const int> labels) {
    const QuantizedView view = quantize_weights(net, params, assign);
    return forward_quantized_view(net, view, params, assign, batch, labels);
}

}  // namespace fixnet
