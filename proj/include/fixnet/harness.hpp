// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fixnet/dataset.hpp"
#include "fixnet/strategies.hpp"

namespace fixnet {

/// Reference stacks used by the experiments and tests.
/// "ref8": 6 conv + 2 fc with two 2x2 max-pools, "desk6": 4 conv + 2 fc,
/// "tiny3": 1 conv + 2 fc (smoke tests). Input extents must be divisible by
/// the pooling factor (4 for ref8/desk6, 2 for tiny3).
NetworkSpec preset_network(const std::string& name, int channels, int height, int width,
                           int classes);

struct DatasetConfig {
    std::string kind = "synthetic";  // "synthetic" or "idx"
    SyntheticSpec synthetic{};
    int test_count = 1000;
    std::string train_images, train_labels, test_images, test_labels;  // idx paths
    int limit = 0;

    DataSplit load(uint64_t seed) const;
    std::string describe() const;
};

struct TrainFloatConfig {
    double lr = 0.05;
    int epochs = 6;
    int batch_size = 32;
};

struct RunConfig {
    uint64_t seed = 1;
    std::string output_dir = "out";
    int topk = 1;
    NetworkSpec network;
    DatasetConfig dataset;
    StrategyConfig strategy;
    TrainFloatConfig train_float;
    std::vector<Precision> grid_weights{Precision{4}, Precision{8}, Precision{16}, Precision{0}};
    std::vector<Precision> grid_acts{Precision{4}, Precision{8}, Precision{16}, Precision{0}};
};

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

/// Percentage of samples whose true label is not among the k largest logits;
/// ties broken in favor of lower class indices. Pass a calibrated assignment
/// to evaluate the quantized network, or nullptr for the float network.
double evaluate_topk(const NetworkSpec& net, const Parameters& params,
                     const PrecisionAssignment* assign, const Dataset& data, int k);

/// Builds a uniform assignment and calibrates it on the first samples of the
/// calibration source.
PrecisionAssignment calibrated_assignment(const NetworkSpec& net, const Parameters& params,
                                          Precision weight_bits, Precision act_bits,
                                          const Dataset& calib_source, int calib_samples);

/// From-scratch float training (plain SGD over shuffled minibatches).
FinetuneResult train_float(const NetworkSpec& net, const Dataset& data,
                           const TrainFloatConfig& cfg, uint64_t seed);

struct GridCell {
    bool na = false;
    double error = 0.0;
};

struct GridReport {
    std::vector<Precision> weight_axis;
    std::vector<Precision> act_axis;
    std::vector<std::vector<GridCell>> cells;  // [act][weight]
    std::string strategy;
    uint64_t seed = 0;
    std::string dataset;
    int epochs = 0;
    int topk = 1;

    const GridCell& at(int act_idx, int weight_idx) const {
        return cells[size_t(act_idx)][size_t(weight_idx)];
    }
    std::string to_csv() const;
    std::string to_json() const;
};

/// Applies cfg.strategy to every (weight, activation) grid cell starting from
/// the given float checkpoint and reports top-k errors ("n/a" on divergence).
GridReport run_grid(const RunConfig& cfg, const NetworkSpec& net, const Parameters& start,
                    const DataSplit& data);

}  // namespace fixnet
