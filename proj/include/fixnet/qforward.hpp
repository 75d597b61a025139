// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "fixnet/net.hpp"
#include "fixnet/qformat.hpp"

namespace fixnet {

/// Precision request plus, once calibrated, the concrete format.
struct PrecisionSlot {
    Precision prec{};
    std::optional<QFormat> fmt;

    bool is_float() const { return prec.is_float(); }
    std::string to_string() const { return fmt ? fmt->to_string() : prec.to_string(); }
};

/// Per-layer weight and activation precision, plus the format of the network
/// input (the activation of a virtual layer 0).
struct PrecisionAssignment {
    PrecisionSlot input;
    std::vector<PrecisionSlot> weights;
    std::vector<PrecisionSlot> acts;

    bool all_float() const;
    bool any_fixed_act() const;
    void validate(const NetworkSpec& net) const;
};

/// Uniform grid-protocol assignment: one weight width, one activation width,
/// with the final layer's activation held at final_act_bits (16 by default)
/// whenever activations are fixed point. The input shares the activation
/// width. Formats are unresolved until calibrate_activations() runs.
PrecisionAssignment uniform_assignment(const NetworkSpec& net, Precision weight_bits,
                                       Precision act_bits, int final_act_bits = 16);

/// Per-layer assignment taken from the LayerSpec precision fields.
PrecisionAssignment assignment_from_spec(const NetworkSpec& net, int final_act_bits = 16);

/// Chooses activation (and input) formats from a float forward pass over the
/// calibration batch. Weight formats are derived from the weight tensors at
/// quantize_weights() time, not here.
void calibrate_activations(PrecisionAssignment& assign, const NetworkSpec& net,
                           const Parameters& params, const Tensor& calib_batch);

/// Quantized snapshot of the weights; the master copy is never modified.
struct QuantizedView {
    struct LayerView {
        Tensor weight;               // quantized values (or the master copy when float)
        std::vector<int64_t> raw;    // raw integers, empty when float
        std::optional<QFormat> fmt;
    };
    std::vector<LayerView> layers;
};

QuantizedView quantize_weights(const NetworkSpec& net, const Parameters& params,
                               const PrecisionAssignment& assign);

/// Saturating staircase activation: ReLU then requantization to act_fmt, or
/// exact ReLU when the activation stays float.
double effective_relu(const Accumulator& acc, const std::optional<QFormat>& act_fmt);
QValue effective_relu_q(const Accumulator& acc, const QFormat& act_fmt);

/// Emulated fixed-point forward pass: exact widening multiplies, exact wide
/// accumulation, then rounding/saturation into the layer's activation format.
/// Layers whose operands are all float run the float kernels bit-identically.
/// The returned trace feeds backward_presumed() unchanged.
Trace forward_quantized(const NetworkSpec& net, const Parameters& params,
                        const PrecisionAssignment& assign, const Tensor& batch,
                        std::span<const int> labels);

/// Same pass over a prebuilt weight view (training loops, gradient probes).
Trace forward_quantized_view(const NetworkSpec& net, const QuantizedView& view,
                             const Parameters& params, const PrecisionAssignment& assign,
                             const Tensor& batch, std::span<const int> labels);

}  // namespace fixnet
