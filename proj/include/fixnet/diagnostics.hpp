// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "fixnet/qforward.hpp"

namespace fixnet {

/// Per-layer agreement between weight gradients computed over the quantized
/// forward pass and over the float forward pass, at the same master weights.
struct MismatchReport {
    struct LayerStat {
        int layer = 0;              // 1-based
        double cosine_mean = 0.0;   // in [-1, 1]
        double rel_err_mean = 0.0;  // |G_q - G_f| / |G_f|
        int defined_batches = 0;
        std::string flag;           // "ok" or "undefined"
    };
    std::vector<LayerStat> layers;
    int batches = 0;
    std::string weight_precision;
    std::string act_precision;

    std::string to_csv() const;
    std::string to_json() const;
};

MismatchReport mismatch_per_layer(const NetworkSpec& net, const Parameters& params,
                                  const PrecisionAssignment& assign,
                                  const std::vector<Tensor>& batches,
                                  const std::vector<std::vector<int>>& labels);

/// Central-difference probe of the quantized loss along the presumed
/// gradient: delta = [C_q(w + eta d) - C_q(w - eta d)] / (2 eta |d|),
/// so positive delta means stepping against the gradient lowers the
/// quantized loss. eta is sized so the induced activation perturbation is
/// about step_scale LSBs of the finest activation format; on a float
/// assignment it falls back to a small parameter-space step and delta
/// approaches |d|. "flat" flags a staircase plateau (identical losses).
struct DescentReport {
    double delta = 0.0;
    double eta = 0.0;
    double grad_norm = 0.0;
    int sign = 0;
    std::string flag;  // "ok" or "flat"
};

DescentReport descent_check(const NetworkSpec& net, const Parameters& params,
                            const PrecisionAssignment& assign, const Tensor& batch,
                            std::span<const int> labels, double step_scale = 1.0);

/// Spearman rank correlation (average ranks on ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace fixnet
