// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fixnet/harness.hpp"
#include "fixnet/net.hpp"
#include "gradcheck.hpp"

using namespace fixnet;

namespace {

NetworkSpec small_net() {
    NetworkSpec net;
    net.input_channels = 1;
    net.input_height = 8;
    net.input_width = 8;
    net.num_classes = 4;
    LayerSpec conv;
    conv.kind = LayerKind::Conv;
    conv.out_channels = 3;
    conv.kernel = 3; conv.pad = 1;
    conv.relu = true; conv.pool = true;
    LayerSpec fc1;
    fc1.kind = LayerKind::Fc;
    fc1.out_channels = 6;
    fc1.relu = true;
    LayerSpec fc2;
    fc2.kind = LayerKind::Fc;
    fc2.out_channels = 4;
    fc2.relu = false;
    net.layers = {conv, fc1, fc2};
    net.validate();
    return net;
}

Tensor random_batch(const NetworkSpec& net, int n, Rng& rng, double scale = 0.5) {
    Tensor b({n, net.input_channels, net.input_height, net.input_width});
    for (double& v : b.data) v = rng.uniform(-scale, scale);
    return b;
}

std::vector<int> random_labels(int n, int classes, Rng& rng) {
    std::vector<int> y(static_cast<size_t>(n));
    for (int& v : y) v = int(rng.below(uint64_t(classes)));
    return y;
}

// Independent straight-line reimplementation used as the forward oracle:
// explicit padded buffers, HWC-ordered loops, plain softmax.
double oracle_loss(const NetworkSpec& net, const Parameters& params, const Tensor& batch,
                   const std::vector<int>& labels) {
    const int n = batch.shape[0];
    double total = 0.0;
    for (int s = 0; s < n; ++s) {
        int c = net.input_channels, h = net.input_height, w = net.input_width;
        std::vector<double> cur(size_t(c) * h * w);
        for (size_t i = 0; i < cur.size(); ++i) cur[i] = batch.data[size_t(s) * cur.size() + i];
        for (int l = 0; l < net.num_layers(); ++l) {
            const LayerSpec& ls = net.layers[size_t(l)];
            const Tensor& W = params.layers[size_t(l)].weight;
            const Tensor& B = params.layers[size_t(l)].bias;
            std::vector<double> next;
            int nc, nh, nw;
            if (ls.kind == LayerKind::Fc) {
                nc = ls.out_channels; nh = 1; nw = 1;
                next.assign(size_t(nc), 0.0);
                for (int o = 0; o < nc; ++o) {
                    double acc = 0.0;
                    for (size_t f = 0; f < cur.size(); ++f)
                        acc += W.data[size_t(o) * cur.size() + f] * cur[f];
                    next[size_t(o)] = acc + B[o];
                }
            } else {
                const int K = ls.kernel, S = ls.stride, P = ls.pad;
                const int ph = h + 2 * P, pw = w + 2 * P;
                std::vector<double> padded(size_t(c) * ph * pw, 0.0);
                for (int cc = 0; cc < c; ++cc)
                    for (int y = 0; y < h; ++y)
                        for (int x = 0; x < w; ++x)
                            padded[(size_t(cc) * ph + y + P) * pw + x + P] =
                                cur[(size_t(cc) * h + y) * w + x];
                nc = ls.out_channels;
                nh = (h + 2 * P - K) / S + 1;
                nw = (w + 2 * P - K) / S + 1;
                next.assign(size_t(nc) * nh * nw, 0.0);
                for (int y = 0; y < nh; ++y)
                    for (int x = 0; x < nw; ++x)
                        for (int o = 0; o < nc; ++o) {
                            double acc = B[o];
                            for (int ky = 0; ky < K; ++ky)
                                for (int kx = 0; kx < K; ++kx)
                                    for (int cc = 0; cc < c; ++cc)
                                        acc += W.data[((size_t(o) * c + cc) * K + ky) * K + kx] *
                                               padded[(size_t(cc) * ph + y * S + ky) * pw + x * S + kx];
                            next[(size_t(o) * nh + y) * nw + x] = acc;
                        }
            }
            if (ls.relu)
                for (double& v : next) v = std::max(0.0, v);
            if (ls.pool) {
                std::vector<double> pooled(size_t(nc) * (nh / 2) * (nw / 2));
                for (int o = 0; o < nc; ++o)
                    for (int y = 0; y < nh / 2; ++y)
                        for (int x = 0; x < nw / 2; ++x) {
                            double m = -1e300;
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx)
                                    m = std::max(m, next[(size_t(o) * nh + 2 * y + dy) * nw +
                                                         2 * x + dx]);
                            pooled[(size_t(o) * (nh / 2) + y) * (nw / 2) + x] = m;
                        }
                next = std::move(pooled);
                nh /= 2; nw /= 2;
            }
            cur = std::move(next);
            c = nc; h = nh; w = nw;
        }
        double mx = cur[0];
        for (double v : cur) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : cur) z += std::exp(v - mx);
        total += -std::log(std::exp(cur[size_t(labels[size_t(s)])] - mx) / z);
    }
    return total / n;
}

}  // namespace

TEST_CASE("forward_float: zero parameters give uniform softmax loss") {
    const NetworkSpec net = small_net();
    Rng rng(1);
    Parameters params;
    const auto dims = net.resolve_dims();
    params.layers.resize(net.layers.size());
    for (size_t l = 0; l < net.layers.size(); ++l) {
        params.layers[l].weight = net.layers[l].kind == LayerKind::Conv
            ? Tensor({net.layers[l].out_channels, dims[l].in_c, net.layers[l].kernel, net.layers[l].kernel})
            : Tensor({net.layers[l].out_channels, int(dims[l].fan_in)});
        params.layers[l].bias = Tensor({net.layers[l].out_channels});
    }
    const Tensor batch = random_batch(net, 5, rng);
    const std::vector<int> labels{0, 1, 2, 3, 0};
    const Trace t = forward_float(net, params, batch, labels);
    for (const auto& tl : t.layers)
        for (double v : tl.pre.data) CHECK(v == 0.0);
    CHECK(t.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("forward_float: single fc layer hand value") {
    NetworkSpec net;
    net.input_channels = 1;
    net.input_height = 1;
    net.input_width = 2;
    net.num_classes = 1;
    LayerSpec fc;
    fc.kind = LayerKind::Fc;
    fc.out_channels = 1;
    fc.relu = false;
    net.layers = {fc};

    Parameters params;
    params.layers.resize(1);
    params.layers[0].weight = Tensor({1, 2}, {0.5, 0.25});
    params.layers[0].bias = Tensor({1});

    const Tensor batch({1, 1, 1, 2}, {0.5, 0.5});
    const std::vector<int> labels{0};
    const Trace t = forward_float(net, params, batch, labels);
    CHECK(t.layers[0].pre.data[0] == 0.375);
}

TEST_CASE("forward_float: shape mismatch is an error") {
    const NetworkSpec net = small_net();
    Rng rng(2);
    const Parameters params = init_parameters(net, rng);
    const Tensor bad({2, 1, 7, 8});
    const std::vector<int> labels{0, 1};
    CHECK_THROWS_AS(forward_float(net, params, bad, labels), std::invalid_argument);
}

TEST_CASE("forward_float matches the straight-line oracle") {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const NetworkSpec net = small_net();
        Rng init(100 + uint64_t(trial));
        const Parameters params = init_parameters(net, init);
        const Tensor batch = random_batch(net, 4, rng);
        const std::vector<int> labels = random_labels(4, net.num_classes, rng);
        const Trace t = forward_float(net, params, batch, labels);
        const double ref = oracle_loss(net, params, batch, labels);
        CHECK(std::fabs(t.loss - ref) <= 1e-12 * std::max(1.0, std::fabs(ref)));
    }
}

TEST_CASE("backprop: zero output error gives zero gradients") {
    const NetworkSpec net = small_net();
    Rng rng(4);
    const Parameters params = init_parameters(net, rng);
    const Tensor batch = random_batch(net, 3, rng);
    const std::vector<int> labels{0, 1, 2};
    const Trace t = forward_float(net, params, batch, labels);
    const Tensor zero({3, net.num_classes});
    const GradientSet g = backprop_from_output(net, t, zero);
    for (const Tensor& dw : g.dweight)
        for (double v : dw.data) CHECK(v == 0.0);
    for (const Tensor& db : g.dbias)
        for (double v : db.data) CHECK(v == 0.0);
}

TEST_CASE("backprop: dead ReLU blocks all upstream gradients") {
    const NetworkSpec net = small_net();
    Rng rng(5);
    Parameters params = init_parameters(net, rng);
    // Large negative biases in the first layer kill every activation there.
    for (double& b : params.layers[0].bias.data) b = -100.0;
    const Tensor batch = random_batch(net, 3, rng);
    const std::vector<int> labels{0, 1, 2};
    const Trace t = forward_float(net, params, batch, labels);
    const GradientSet g = backward_presumed(net, t, labels);
    for (double v : g.dweight[0].data) CHECK(v == 0.0);
    for (double v : g.dbias[0].data) CHECK(v == 0.0);
    // Inputs to layer 2 are all zero, so its weight gradients vanish too,
    // but its bias gradient does not.
    for (double v : g.dweight[1].data) CHECK(v == 0.0);
}

TEST_CASE("backward matches finite differences on a small net") {
    const NetworkSpec net = small_net();
    Rng rng(6);
    Parameters params = init_parameters(net, rng);
    const Tensor batch = random_batch(net, 4, rng);
    const std::vector<int> labels = random_labels(4, net.num_classes, rng);
    const auto stats = testutil::fd_check_float(net, params, batch, labels,
                                                1e-4, 1e-4, 1e-8, 60, 77);
    CHECK(stats.checked > 100);
    CHECK(stats.passed == stats.checked);
}

TEST_CASE("backward: single linear layer matches finite differences tightly") {
    NetworkSpec net;
    net.input_channels = 1;
    net.input_height = 1;
    net.input_width = 3;
    net.num_classes = 2;
    LayerSpec fc;
    fc.kind = LayerKind::Fc;
    fc.out_channels = 2;
    fc.relu = false;
    net.layers = {fc};

    Rng rng(7);
    Parameters params;
    params.layers.resize(1);
    params.layers[0].weight = Tensor({2, 3});
    for (double& v : params.layers[0].weight.data) v = rng.uniform(-1.0, 1.0);
    params.layers[0].bias = Tensor({2}, {0.1, -0.2});

    Tensor batch({2, 1, 1, 3});
    for (double& v : batch.data) v = rng.uniform(-1.0, 1.0);
    const std::vector<int> labels{0, 1};

    const Trace t = forward_float(net, params, batch, labels);
    const GradientSet g = backward_presumed(net, t, labels);
    for (int64_t i = 0; i < params.layers[0].weight.size(); ++i) {
        const double w0 = params.layers[0].weight[i];
        params.layers[0].weight[i] = w0 + 1e-4;
        const double lp = forward_float(net, params, batch, labels).loss;
        params.layers[0].weight[i] = w0 - 1e-4;
        const double lm = forward_float(net, params, batch, labels).loss;
        params.layers[0].weight[i] = w0;
        const double fd = (lp - lm) / 2e-4;
        CHECK(std::fabs(fd - g.dweight[0][i]) <=
              1e-6 * std::max({1.0, std::fabs(fd), std::fabs(g.dweight[0][i])}));
    }
}

TEST_CASE("sgd_step: definition, masking, linearity") {
    const NetworkSpec net = small_net();
    Rng rng(8);
    Parameters params = init_parameters(net, rng);

    GradientSet g;
    for (const auto& lp : params.layers) {
        g.dweight.push_back(Tensor(lp.weight.shape));
        g.dbias.push_back(Tensor(lp.bias.shape));
    }
    CHECK_THROWS_AS(sgd_step(params, g, 0.1, {}), std::invalid_argument);

    // Single weight: w=1.0, grad=0.5, lr=0.1 -> 0.95.
    Parameters single = params;
    single.layers[1].weight.data[0] = 1.0;
    g.dweight[1].data[0] = 0.5;
    sgd_step(single, g, 0.1, {1});
    CHECK(single.layers[1].weight.data[0] == 0.95);
    // Only layer 1 changed (mask {1}); others bit-identical.
    CHECK(single.layers[0].weight.data == params.layers[0].weight.data);
    CHECK(single.layers[2].weight.data == params.layers[2].weight.data);

    // Two steps with the same grad equal one step with doubled lr.
    Parameters twice = params, once = params;
    for (Tensor& dw : g.dweight)
        for (double& v : dw.data) v = rng.uniform(-1.0, 1.0);
    sgd_step(twice, g, 0.05, {0, 1, 2});
    sgd_step(twice, g, 0.05, {0, 1, 2});
    sgd_step(once, g, 0.10, {0, 1, 2});
    for (size_t l = 0; l < once.layers.size(); ++l)
        for (size_t i = 0; i < once.layers[l].weight.data.size(); ++i)
            CHECK(twice.layers[l].weight.data[i] ==
                  doctest::Approx(once.layers[l].weight.data[i]).epsilon(1e-12));
}

TEST_CASE("training is deterministic for a fixed seed") {
    const NetworkSpec net = small_net();
    SyntheticSpec spec;
    spec.classes = 4;
    spec.count = 64;
    spec.size = 8;
    const Dataset data = make_synthetic(spec, 42);
    TrainFloatConfig cfg;
    cfg.epochs = 2;
    cfg.lr = 0.05;
    cfg.batch_size = 16;
    const FinetuneResult a = train_float(net, data, cfg, 9);
    const FinetuneResult b = train_float(net, data, cfg, 9);
    CHECK(a.params.bitwise_equal(b.params));
    const FinetuneResult c = train_float(net, data, cfg, 10);
    CHECK(!a.params.bitwise_equal(c.params));
}

TEST_CASE("frozen layers stay bit-identical through training") {
    const NetworkSpec net = small_net();
    SyntheticSpec spec;
    spec.classes = 4;
    spec.count = 64;
    spec.size = 8;
    const Dataset data = make_synthetic(spec, 43);
    Rng rng(11);
    const Parameters start = init_parameters(net, rng);

    StrategyConfig cfg;
    cfg.epochs = 2;
    cfg.lr = 0.05;
    cfg.batch_size = 16;
    cfg.top_k_layers = 1;
    const PrecisionAssignment assign = uniform_assignment(net, Precision{8}, Precision{8});
    const FinetuneResult r = finetune_top_layers(net, start, assign, data, cfg);
    for (size_t l = 0; l + 1 < net.layers.size(); ++l) {
        CHECK(r.params.layers[l].weight.data == start.layers[l].weight.data);
        CHECK(r.params.layers[l].bias.data == start.layers[l].bias.data);
    }
    CHECK(r.params.layers.back().weight.data != start.layers.back().weight.data);
}
