// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fixnet/rng.hpp"
#include "fixnet/tensor.hpp"

namespace fixnet {

struct Dataset {
    Tensor images;            // [N, C, H, W], zero-mean unit-range floats
    std::vector<int> labels;  // [N]
    int num_classes = 0;

    int size() const { return images.shape.empty() ? 0 : images.shape[0]; }
    /// Copies samples [begin, begin+count) into a batch tensor.
    Tensor slice(int begin, int count) const;
    Tensor gather(const std::vector<int>& idx) const;
    std::vector<int> gather_labels(const std::vector<int>& idx) const;
};

struct DataSplit {
    Dataset train;
    Dataset test;
};

/// IDX image/label files (big-endian, magic 0x00000803 / 0x00000801).
/// Pixels are mapped to [-0.5, 0.5]. Parse errors name the byte offset and
/// the expected versus actual byte counts.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int limit = 0);

struct SyntheticSpec {
    int classes = 10;
    int count = 4000;
    int size = 16;           // square images
    double noise = 0.05;     // per-pixel Gaussian noise
    double class_scale = 0.12;  // amplitude of the class-specific pattern
    double background_scale = 1.0;
    double bulk_scale = 1.0;  // shrinks the blob part relative to hot patches
    int hot_patches = 0;      // full-amplitude 2x2 patches at random positions
};

/// Seeded generator: each class is a fixed mixture of Gaussian bumps riding
/// on a shared background field with per-sample gain, plus pixel noise.
/// `seed` fixes the class patterns, `stream` the per-sample draws, so
/// train/test splits share classes but never samples. Same arguments ->
/// bit-identical dataset.
Dataset make_synthetic(const SyntheticSpec& spec, uint64_t seed, uint64_t stream = 0);

}  // namespace fixnet
