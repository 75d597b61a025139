// SPDX-License-Identifier: Apache-2.0
#include "fixnet/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace fixnet {

Precision Precision::parse(const std::string& s) {
    if (s == "float") return Precision{0};
    const int bits = std::stoi(s);
    if (bits != 4 && bits != 8 && bits != 16 && bits != 32)
        throw std::invalid_argument("Precision: bits must be 4, 8, 16, 32 or 'float'");
    return Precision{bits};
}

std::vector<LayerDims> NetworkSpec::resolve_dims() const {
    std::vector<LayerDims> dims(layers.size());
    int c = input_channels, h = input_height, w = input_width;
    for (size_t l = 0; l < layers.size(); ++l) {
        const LayerSpec& ls = layers[l];
        LayerDims& d = dims[l];
        d.in_c = c; d.in_h = h; d.in_w = w;
        if (ls.kind == LayerKind::Conv) {
            d.conv_h = (h + 2 * ls.pad - ls.kernel) / ls.stride + 1;
            d.conv_w = (w + 2 * ls.pad - ls.kernel) / ls.stride + 1;
            if (d.conv_h <= 0 || d.conv_w <= 0)
                throw std::invalid_argument("layer " + std::to_string(l + 1) + ": conv output is empty");
            d.out_c = ls.out_channels;
            d.out_h = d.conv_h; d.out_w = d.conv_w;
            d.fan_in = int64_t(c) * ls.kernel * ls.kernel;
            d.weight_count = int64_t(ls.out_channels) * d.fan_in;
            if (ls.pool) {
                if (d.out_h % 2 || d.out_w % 2)
                    throw std::invalid_argument("layer " + std::to_string(l + 1) + ": 2x2 pool needs even extents");
                d.out_h /= 2; d.out_w /= 2;
            }
        } else {
            if (ls.pool) throw std::invalid_argument("fc layers do not pool");
            d.conv_h = d.conv_w = 1;
            d.out_c = ls.out_channels;
            d.out_h = d.out_w = 1;
            d.fan_in = int64_t(c) * h * w;
            d.weight_count = int64_t(ls.out_channels) * d.fan_in;
        }
        c = d.out_c; h = d.out_h; w = d.out_w;
    }
    return dims;
}

void NetworkSpec::validate() const {
    if (layers.size() < 2)
        throw std::invalid_argument("network needs at least 2 layers");
    if (input_height <= 0 || input_width <= 0 || input_channels <= 0)
        throw std::invalid_argument("bad input extents");
    if (num_classes < 2)
        throw std::invalid_argument("need at least 2 classes");
    const auto dims = resolve_dims();
    const LayerDims& last = dims.back();
    if (int64_t(last.out_c) * last.out_h * last.out_w != num_classes)
        throw std::invalid_argument("final layer must emit num_classes values");
}

int64_t Parameters::count() const {
    int64_t n = 0;
    for (const auto& lp : layers) n += lp.weight.size() + lp.bias.size();
    return n;
}

bool Parameters::bitwise_equal(const Parameters& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& a = layers[l];
        const auto& b = o.layers[l];
        if (a.weight.data.size() != b.weight.data.size() ||
            a.bias.data.size() != b.bias.data.size())
            return false;
        if (std::memcmp(a.weight.data.data(), b.weight.data.data(),
                        a.weight.data.size() * sizeof(double)) != 0)
            return false;
        if (std::memcmp(a.bias.data.data(), b.bias.data.data(),
                        a.bias.data.size() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

Parameters init_parameters(const NetworkSpec& net, Rng& rng) {
    const auto dims = net.resolve_dims();
    Parameters p;
    p.layers.resize(net.layers.size());
    for (size_t l = 0; l < net.layers.size(); ++l) {
        const LayerSpec& ls = net.layers[l];
        const LayerDims& d = dims[l];
        if (ls.kind == LayerKind::Conv)
            p.layers[l].weight = Tensor({ls.out_channels, d.in_c, ls.kernel, ls.kernel});
        else
            p.layers[l].weight = Tensor({ls.out_channels, int(d.fan_in)});
        p.layers[l].bias = Tensor({ls.out_channels});
        const double bound = std::sqrt(6.0 / double(d.fan_in));
        for (double& v : p.layers[l].weight.data) v = rng.uniform(-bound, bound);
    }
    return p;
}

Tensor layer_linear_float(const NetworkSpec& net, const std::vector<LayerDims>& dims,
                          int l, const Tensor& weight, const Tensor& bias,
                          const Tensor& input, int batch) {
    const LayerSpec& ls = net.layers[size_t(l)];
    const LayerDims& d = dims[size_t(l)];
    if (ls.kind == LayerKind::Fc) {
        const int in_n = int(d.fan_in), out_n = d.out_c;
        Tensor pre({batch, out_n});
        for (int n = 0; n < batch; ++n) {
            const double* x = &input.data[size_t(n) * in_n];
            for (int o = 0; o < out_n; ++o) {
                const double* w = &weight.data[size_t(o) * in_n];
                double acc = bias[o];
                for (int f = 0; f < in_n; ++f) acc += w[f] * x[f];
                pre.data[size_t(n) * out_n + o] = acc;
            }
        }
        return pre;
    }
    const int C = d.in_c, H = d.in_h, W = d.in_w, K = ls.kernel, S = ls.stride, P = ls.pad;
    const int OC = d.out_c, OH = d.conv_h, OW = d.conv_w;
    Tensor pre({batch, OC, OH, OW});
    for (int n = 0; n < batch; ++n) {
        for (int o = 0; o < OC; ++o) {
            double* out_plane = &pre.data[(size_t(n) * OC + o) * OH * OW];
            for (int y = 0; y < OH; ++y) {
                const int iy0 = y * S - P;
                for (int x = 0; x < OW; ++x) {
                    const int ix0 = x * S - P;
                    double acc = bias[o];
                    for (int c = 0; c < C; ++c) {
                        const double* in_plane = &input.data[(size_t(n) * C + c) * H * W];
                        const double* w_plane = &weight.data[((size_t(o) * C + c) * K) * K];
                        for (int ky = 0; ky < K; ++ky) {
                            const int iy = iy0 + ky;
                            if (iy < 0 || iy >= H) continue;
                            const int kx_lo = std::max(0, -ix0);
                            const int kx_hi = std::min(K, W - ix0);
                            const double* in_row = in_plane + size_t(iy) * W + ix0;
                            const double* w_row = w_plane + size_t(ky) * K;
                            for (int kx = kx_lo; kx < kx_hi; ++kx)
                                acc += w_row[kx] * in_row[kx];
                        }
                    }
                    out_plane[size_t(y) * OW + x] = acc;
                }
            }
        }
    }
    return pre;
}

Tensor maxpool2x2(const Tensor& in, int batch, int channels, int h, int w,
                  std::vector<int32_t>& argmax) {
    const int oh = h / 2, ow = w / 2;
    Tensor out({batch, channels, oh, ow});
    argmax.assign(size_t(batch) * channels * oh * ow, 0);
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
            const size_t in_base = (size_t(n) * channels + c) * h * w;
            const size_t out_base = (size_t(n) * channels + c) * oh * ow;
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    // First maximum in scan order wins ties (deterministic).
                    int32_t best = int32_t(in_base + size_t(2 * y) * w + 2 * x);
                    double bv = in.data[size_t(best)];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const int32_t idx = int32_t(in_base + size_t(2 * y + dy) * w + (2 * x + dx));
                            if (in.data[size_t(idx)] > bv) { bv = in.data[size_t(idx)]; best = idx; }
                        }
                    out.data[out_base + size_t(y) * ow + x] = bv;
                    argmax[out_base + size_t(y) * ow + x] = best;
                }
        }
    return out;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* probs_out) {
    const int n = logits.shape[0], k = logits.shape[1];
    if (int(labels.size()) != n)
        throw std::invalid_argument("labels size does not match batch");
    Tensor probs({n, k});
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = &logits.data[size_t(i) * k];
        double m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) sum += std::exp(row[j] - m);
        const double lse = m + std::log(sum);
        for (int j = 0; j < k; ++j)
            probs.data[size_t(i) * k + j] = std::exp(row[j] - lse);
        loss += lse - row[labels[size_t(i)]];
    }
    if (probs_out) *probs_out = std::move(probs);
    return loss / n;
}

Tensor loss_grad_logits(const Tensor& probs, std::span<const int> labels) {
    const int n = probs.shape[0], k = probs.shape[1];
    Tensor d = probs;
    for (int i = 0; i < n; ++i) {
        d.data[size_t(i) * k + labels[size_t(i)]] -= 1.0;
        for (int j = 0; j < k; ++j) d.data[size_t(i) * k + j] /= n;
    }
    return d;
}

Trace forward_float(const NetworkSpec& net, const Parameters& params,
                    const Tensor& batch, std::span<const int> labels) {
    const auto dims = net.resolve_dims();
    if (batch.shape.size() != 4 || batch.shape[1] != net.input_channels ||
        batch.shape[2] != net.input_height || batch.shape[3] != net.input_width)
        throw std::invalid_argument("batch shape " + batch.shape_str() + " does not match network input");
    const int n = batch.shape[0];
    Trace trace;
    trace.batch = n;
    trace.layers.resize(net.layers.size());
    Tensor cur = batch;
    for (int l = 0; l < net.num_layers(); ++l) {
        const LayerSpec& ls = net.layers[size_t(l)];
        const LayerDims& d = dims[size_t(l)];
        Trace::Layer& tl = trace.layers[size_t(l)];
        tl.input = cur;
        tl.weight_used = params.layers[size_t(l)].weight;
        tl.pre = layer_linear_float(net, dims, l, tl.weight_used,
                                    params.layers[size_t(l)].bias, cur, n);
        Tensor h = tl.pre;
        if (ls.relu)
            for (double& v : h.data) v = v > 0.0 ? v : 0.0;
        if (ls.pool)
            tl.output = maxpool2x2(h, n, d.out_c, d.conv_h, d.conv_w, tl.pool_argmax);
        else
            tl.output = std::move(h);
        cur = tl.output;
    }
    trace.logits = Tensor({n, net.num_classes}, cur.data);
    trace.loss = softmax_cross_entropy(trace.logits, labels, &trace.probs);
    return trace;
}

GradientSet backprop_from_output(const NetworkSpec& net, const Trace& trace,
                                 const Tensor& dlogits) {
    const auto dims = net.resolve_dims();
    const int batch = trace.batch;
    GradientSet g;
    const size_t L = net.layers.size();
    g.dweight.resize(L);
    g.dbias.resize(L);
    g.dpre.resize(L);
    Tensor dout = dlogits;
    for (int l = int(L) - 1; l >= 0; --l) {
        const LayerSpec& ls = net.layers[size_t(l)];
        const LayerDims& d = dims[size_t(l)];
        const Trace::Layer& tl = trace.layers[size_t(l)];

        Tensor dh;
        if (ls.pool) {
            dh = Tensor(tl.pre.shape);
            for (size_t i = 0; i < tl.pool_argmax.size(); ++i)
                dh.data[size_t(tl.pool_argmax[i])] += dout.data[i];
        } else {
            dh = Tensor(tl.pre.shape, std::move(dout.data));
        }
        // The quantization step, when present, is treated as identity here;
        // the ReLU derivative is the presumed 1{a > 0}.
        Tensor& dpre = dh;
        if (ls.relu)
            for (size_t i = 0; i < dpre.data.size(); ++i)
                if (!(tl.pre.data[i] > 0.0)) dpre.data[i] = 0.0;

        g.dweight[size_t(l)] = Tensor(tl.weight_used.shape);
        g.dbias[size_t(l)] = Tensor({d.out_c});
        Tensor dx(tl.input.shape);
        const Tensor& weight = tl.weight_used;

        if (ls.kind == LayerKind::Fc) {
            const int in_n = int(d.fan_in), out_n = d.out_c;
            for (int n = 0; n < batch; ++n) {
                const double* x = &tl.input.data[size_t(n) * in_n];
                double* dxr = &dx.data[size_t(n) * in_n];
                for (int o = 0; o < out_n; ++o) {
                    const double gg = dpre.data[size_t(n) * out_n + o];
                    if (gg == 0.0) continue;
                    g.dbias[size_t(l)][o] += gg;
                    double* dw = &g.dweight[size_t(l)].data[size_t(o) * in_n];
                    const double* w = &weight.data[size_t(o) * in_n];
                    for (int f = 0; f < in_n; ++f) {
                        dw[f] += gg * x[f];
                        dxr[f] += gg * w[f];
                    }
                }
            }
        } else {
            const int C = d.in_c, H = d.in_h, W = d.in_w, K = ls.kernel, S = ls.stride, P = ls.pad;
            const int OC = d.out_c, OH = d.conv_h, OW = d.conv_w;
            for (int n = 0; n < batch; ++n)
                for (int o = 0; o < OC; ++o) {
                    const double* dplane = &dpre.data[(size_t(n) * OC + o) * OH * OW];
                    for (int y = 0; y < OH; ++y) {
                        const int iy0 = y * S - P;
                        for (int x = 0; x < OW; ++x) {
                            const double gg = dplane[size_t(y) * OW + x];
                            if (gg == 0.0) continue;
                            g.dbias[size_t(l)][o] += gg;
                            const int ix0 = x * S - P;
                            for (int c = 0; c < C; ++c) {
                                const double* in_plane = &tl.input.data[(size_t(n) * C + c) * H * W];
                                double* dx_plane = &dx.data[(size_t(n) * C + c) * H * W];
                                const double* w_plane = &weight.data[((size_t(o) * C + c) * K) * K];
                                double* dw_plane = &g.dweight[size_t(l)].data[((size_t(o) * C + c) * K) * K];
                                for (int ky = 0; ky < K; ++ky) {
                                    const int iy = iy0 + ky;
                                    if (iy < 0 || iy >= H) continue;
                                    const int kx_lo = std::max(0, -ix0);
                                    const int kx_hi = std::min(K, W - ix0);
                                    const double* in_row = in_plane + size_t(iy) * W + ix0;
                                    double* dx_row = dx_plane + size_t(iy) * W + ix0;
                                    const double* w_row = w_plane + size_t(ky) * K;
                                    double* dw_row = dw_plane + size_t(ky) * K;
                                    for (int kx = kx_lo; kx < kx_hi; ++kx) {
                                        dw_row[kx] += gg * in_row[kx];
                                        dx_row[kx] += gg * w_row[kx];
                                    }
                                }
                            }
                        }
                    }
                }
        }
        g.dpre[size_t(l)] = std::move(dpre);
        dout = std::move(dx);
    }
    return g;
}

GradientSet backward_presumed(const NetworkSpec& net, const Trace& trace,
                              std::span<const int> labels) {
    if (trace.layers.empty() || trace.layers[0].pre.data.empty())
        throw std::invalid_argument("backward: forward pass not cached");
    return backprop_from_output(net, trace, loss_grad_logits(trace.probs, labels));
}

std::set<int> all_layers_mask(const NetworkSpec& net) {
    std::set<int> m;
    for (int l = 0; l < net.num_layers(); ++l) m.insert(l);
    return m;
}

void sgd_step(Parameters& params, const GradientSet& grads, double lr,
              const std::set<int>& mask) {
    if (mask.empty())
        throw std::invalid_argument("sgd_step: empty trainable mask");
    if (!(lr > 0.0))
        throw std::invalid_argument("sgd_step: lr must be positive");
    for (int l : mask) {
        if (l < 0 || size_t(l) >= params.layers.size())
            throw std::invalid_argument("sgd_step: layer index out of range");
        LayerParams& lp = params.layers[size_t(l)];
        const Tensor& dw = grads.dweight[size_t(l)];
        const Tensor& db = grads.dbias[size_t(l)];
        for (size_t i = 0; i < lp.weight.data.size(); ++i) lp.weight.data[i] -= lr * dw.data[i];
        for (size_t i = 0; i < lp.bias.data.size(); ++i) lp.bias.data[i] -= lr * db.data[i];
    }
}

}  // namespace fixnet
