// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient checking shared by the unit and acceptance
// suites. Central differences with a fixed step; points where the
// perturbation flips a ReLU sign or a pooling argmax (a kink crossing) are
// excluded rather than compared.
#pragma once

#include <cmath>
#include <functional>

#include "fixnet/net.hpp"
#include "fixnet/qforward.hpp"
#include "fixnet/rng.hpp"

namespace fixnet::testutil {

struct FdStats {
    int64_t checked = 0;
    int64_t passed = 0;
    int64_t skipped = 0;  // kink-adjacent
    double max_rel = 0.0;

    double pass_rate() const { return checked == 0 ? 1.0 : double(passed) / double(checked); }
};

inline bool same_kink_pattern(const NetworkSpec& net, const Trace& a, const Trace& b) {
    for (size_t l = 0; l < a.layers.size(); ++l) {
        if (net.layers[l].relu) {
            const Tensor& pa = a.layers[l].pre;
            const Tensor& pb = b.layers[l].pre;
            for (size_t i = 0; i < pa.data.size(); ++i)
                if ((pa.data[i] > 0.0) != (pb.data[i] > 0.0)) return false;
        }
        if (a.layers[l].pool_argmax != b.layers[l].pool_argmax) return false;
    }
    return true;
}

inline bool fd_agree(double fd, double grad, double tol, double abs_floor, double* rel_out) {
    const double scale = std::max(std::fabs(fd), std::fabs(grad));
    const double err = std::fabs(fd - grad);
    if (err <= abs_floor) {
        if (rel_out) *rel_out = 0.0;
        return true;
    }
    const double rel = err / scale;
    if (rel_out) *rel_out = rel;
    return rel <= tol;
}

/// Checks dloss/dw for weights of layer `layer` (all layers when layer < 0)
/// against central differences of `loss_at(w_tensor)` where the perturbation
/// is applied to the tensor the forward actually consumes.
/// `forward` must return a fresh trace for the current tensor contents.
struct FdProblem {
    std::function<Trace()> forward;       // trace at current weights
    double* weight_data = nullptr;        // tensor to perturb
    int64_t weight_count = 0;
    const double* grad_data = nullptr;    // analytic gradient for that tensor
};

inline void fd_check_tensor(const NetworkSpec& net, FdProblem prob, double step, double tol,
                            double abs_floor, int64_t max_checks, Rng& rng, FdStats& stats) {
    std::vector<int64_t> order(size_t(prob.weight_count));
    for (int64_t i = 0; i < prob.weight_count; ++i) order[size_t(i)] = i;
    if (max_checks > 0 && max_checks < prob.weight_count) rng.shuffle(order);
    const int64_t n = max_checks > 0 ? std::min(max_checks, prob.weight_count)
                                     : prob.weight_count;
    for (int64_t k = 0; k < n; ++k) {
        const int64_t i = order[size_t(k)];
        const double w0 = prob.weight_data[i];
        prob.weight_data[i] = w0 + step;
        const Trace tp = prob.forward();
        prob.weight_data[i] = w0 - step;
        const Trace tm = prob.forward();
        prob.weight_data[i] = w0;
        if (!same_kink_pattern(net, tp, tm)) {
            ++stats.skipped;
            continue;
        }
        const double fd = (tp.loss - tm.loss) / (2.0 * step);
        double rel = 0.0;
        ++stats.checked;
        if (fd_agree(fd, prob.grad_data[i], tol, abs_floor, &rel)) ++stats.passed;
        stats.max_rel = std::max(stats.max_rel, rel);
    }
}

/// Float-network check: perturbs the master weights of every layer.
inline FdStats fd_check_float(const NetworkSpec& net, Parameters params, const Tensor& batch,
                              std::span<const int> labels, double step, double tol,
                              double abs_floor, int64_t max_checks_per_layer, uint64_t seed) {
    FdStats stats;
    Rng rng(seed);
    const Trace base = forward_float(net, params, batch, labels);
    const GradientSet grads = backward_presumed(net, base, labels);
    for (int l = 0; l < net.num_layers(); ++l) {
        FdProblem prob;
        prob.forward = [&]() { return forward_float(net, params, batch, labels); };
        prob.weight_data = params.layers[size_t(l)].weight.data.data();
        prob.weight_count = params.layers[size_t(l)].weight.size();
        prob.grad_data = grads.dweight[size_t(l)].data.data();
        fd_check_tensor(net, prob, step, tol, abs_floor, max_checks_per_layer, rng, stats);
    }
    return stats;
}

/// Quantized-pipeline check for one layer: perturbs that layer's weight VIEW
/// (the values the arithmetic consumes). With float activations above the
/// layer and constant inputs below, the loss is smooth in these values away
/// from ReLU kinks, so the presumed gradient must match.
inline FdStats fd_check_view_layer(const NetworkSpec& net, const Parameters& params,
                                   QuantizedView view, PrecisionAssignment assign,
                                   int layer, const Tensor& batch, std::span<const int> labels,
                                   double step, double tol, double abs_floor,
                                   int64_t max_checks, uint64_t seed) {
    FdStats stats;
    Rng rng(seed);
    // Perturbed weights leave the quantization grid, so the probed layer must
    // run on the real-arithmetic kernel. For on-grid values that kernel is
    // equivalent to the integer path, which is what makes this check valid.
    view.layers[size_t(layer)].fmt.reset();
    view.layers[size_t(layer)].raw.clear();
    assign.weights[size_t(layer)] = PrecisionSlot{};
    const Trace base = forward_quantized_view(net, view, params, assign, batch, labels);
    const GradientSet grads = backward_presumed(net, base, labels);
    FdProblem prob;
    prob.forward = [&]() {
        return forward_quantized_view(net, view, params, assign, batch, labels);
    };
    prob.weight_data = view.layers[size_t(layer)].weight.data.data();
    prob.weight_count = view.layers[size_t(layer)].weight.size();
    prob.grad_data = grads.dweight[size_t(layer)].data.data();
    fd_check_tensor(net, prob, step, tol, abs_floor, max_checks, rng, stats);
    return stats;
}

}  // namespace fixnet::testutil
