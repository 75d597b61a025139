// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fixnet/net.hpp"
#include "fixnet/qforward.hpp"

namespace fixnet {

nlohmann::json net_to_json(const NetworkSpec& net);
NetworkSpec net_from_json(const nlohmann::json& j);

/// Checkpoint container: 8-byte magic "FXNTCKPT", little-endian u64 header
/// length, JSON header (network spec + tensor directory with name, shape,
/// dtype, byte offset), then the raw little-endian float64 payload.
/// Quantized checkpoints carry a per-tensor "qformat" annotation.
struct Checkpoint {
    NetworkSpec net;
    Parameters params;
    std::vector<std::optional<QFormat>> weight_formats;  // per layer, empty if none
};

void save_checkpoint(const std::string& path, const NetworkSpec& net, const Parameters& params,
                     const std::vector<std::optional<QFormat>>* weight_formats = nullptr);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fixnet
