// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fixnet/rng.hpp"
#include "fixnet/tensor.hpp"

namespace fixnet {

/// Per-tensor precision request: bits in {4, 8, 16, 32}, or 0 for float.
struct Precision {
    int bits = 0;
    bool is_float() const { return bits == 0; }
    bool operator==(const Precision&) const = default;

    std::string to_string() const { return bits == 0 ? "float" : std::to_string(bits); }
    static Precision parse(const std::string& s);
};

enum class LayerKind { Conv, Fc };

struct LayerSpec {
    LayerKind kind = LayerKind::Fc;
    int out_channels = 0;   // conv: output channels, fc: output features
    int kernel = 3;         // conv only
    int stride = 1;         // conv only
    int pad = 0;            // conv only
    bool relu = true;
    bool pool = false;      // 2x2 max-pool after the activation (conv only)
    Precision weight_bits{};
    Precision act_bits{};
};

/// Input/output extents of one layer, resolved from the stack.
struct LayerDims {
    int in_c = 0, in_h = 0, in_w = 0;
    int conv_h = 0, conv_w = 0;          // extent after conv / fc (pre-pool)
    int out_c = 0, out_h = 0, out_w = 0; // extent after optional pooling
    int64_t weight_count = 0;
    int64_t fan_in = 0;
};

struct NetworkSpec {
    int input_channels = 1;
    int input_height = 0;
    int input_width = 0;
    int num_classes = 0;
    std::vector<LayerSpec> layers;

    int num_layers() const { return int(layers.size()); }
    /// Resolves per-layer shapes; throws on incompatible stacks.
    std::vector<LayerDims> resolve_dims() const;
    void validate() const;
};

struct LayerParams {
    Tensor weight;  // conv: [out_c, in_c, k, k]; fc: [out, in]
    Tensor bias;    // [out]
};

/// Full-precision master copy of all trainable tensors.
struct Parameters {
    std::vector<LayerParams> layers;

    int64_t count() const;
    bool bitwise_equal(const Parameters& o) const;
};

/// He-style uniform fan-in initialization; biases start at zero.
Parameters init_parameters(const NetworkSpec& net, Rng& rng);

/// Everything the forward pass caches for back-propagation: layer inputs,
/// pre-activations (after bias, before the activation function), outputs,
/// pooling argmax positions, and the weights actually used (which differ
/// from the master copy when a quantized view is active).
struct Trace {
    struct Layer {
        Tensor input;             // values consumed by the layer
        Tensor pre;               // pre-activation a^(l)
        Tensor output;            // after activation (+quantization, +pool)
        std::vector<int32_t> pool_argmax;  // flat index into `pre` per pooled output
        Tensor weight_used;
    };
    std::vector<Layer> layers;
    Tensor logits;  // [N, classes]
    Tensor probs;
    double loss = 0.0;
    int batch = 0;
};

/// Weight gradients, bias gradients and error signals dC/da per layer.
struct GradientSet {
    std::vector<Tensor> dweight;
    std::vector<Tensor> dbias;
    std::vector<Tensor> dpre;
};

/// Float forward pass with exact ReLU; returns all cached activations plus
/// the softmax cross-entropy loss.
Trace forward_float(const NetworkSpec& net, const Parameters& params,
                    const Tensor& batch, std::span<const int> labels);

/// Mean softmax cross-entropy and its gradient with respect to the logits.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* probs_out);
Tensor loss_grad_logits(const Tensor& probs, std::span<const int> labels);

/// Reverse pass using the presumed ReLU derivative 1{a > 0}, evaluated at
/// whatever pre-activations the forward pass cached (float or quantized).
GradientSet backward_presumed(const NetworkSpec& net, const Trace& trace,
                              std::span<const int> labels);

/// Reverse pass from an explicit output error signal (dC/d logits).
GradientSet backprop_from_output(const NetworkSpec& net, const Trace& trace,
                                 const Tensor& dlogits);

/// In-place SGD update restricted to the layers in `mask` (0-based indices).
/// An empty mask is a configuration error.
void sgd_step(Parameters& params, const GradientSet& grads, double lr,
              const std::set<int>& mask);

std::set<int> all_layers_mask(const NetworkSpec& net);

// Shared per-layer float kernels (also used by the quantized pipeline when a
// layer is fully float, so the all-float paths are bit-identical).
Tensor layer_linear_float(const NetworkSpec& net, const std::vector<LayerDims>& dims,
                          int l, const Tensor& weight, const Tensor& bias,
                          const Tensor& input, int batch);
Tensor maxpool2x2(const Tensor& in, int batch, int channels, int h, int w,
                  std::vector<int32_t>& argmax);

}  // namespace fixnet
