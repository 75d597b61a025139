// SPDX-License-Identifier: Apache-2.0
#include "fixnet/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace fixnet {

Tensor Dataset::slice(int begin, int count) const {
    std::vector<int> idx(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) idx[size_t(i)] = begin + i;
    return gather(idx);
}

Tensor Dataset::gather(const std::vector<int>& idx) const {
    const int c = images.shape[1], h = images.shape[2], w = images.shape[3];
    const size_t stride = size_t(c) * h * w;
    Tensor out({int(idx.size()), c, h, w});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(images.data.begin() + size_t(idx[i]) * stride, stride,
                    out.data.begin() + i * stride);
    return out;
}

std::vector<int> Dataset::gather_labels(const std::vector<int>& idx) const {
    std::vector<int> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[size_t(idx[i])];
    return out;
}

namespace {

uint32_t read_be32(std::istream& in, const std::string& path, size_t offset) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(path + ": truncated at byte " + std::to_string(offset) +
                                 " (expected 4 more bytes)");
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | b[3];
}

std::vector<unsigned char> read_payload(std::istream& in, const std::string& path,
                                        size_t header, size_t expected) {
    std::vector<unsigned char> buf(expected);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(expected));
    const size_t got = size_t(in.gcount());
    if (got != expected)
        throw std::runtime_error(path + ": truncated payload, expected " +
                                 std::to_string(header + expected) + " bytes total, got " +
                                 std::to_string(header + got));
    return buf;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path, int limit) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("cannot open " + images_path);
    const uint32_t img_magic = read_be32(img, images_path, 0);
    if (img_magic != 0x00000803u) {
        char hex[16];
        std::snprintf(hex, sizeof(hex), "0x%08X", img_magic);
        throw std::runtime_error(images_path + ": bad magic " + hex +
                                 " at byte 0 (want 0x00000803)");
    }
    const uint32_t n = read_be32(img, images_path, 4);
    const uint32_t rows = read_be32(img, images_path, 8);
    const uint32_t cols = read_be32(img, images_path, 12);
    const auto pixels = read_payload(img, images_path, 16, size_t(n) * rows * cols);

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error("cannot open " + labels_path);
    const uint32_t lab_magic = read_be32(lab, labels_path, 0);
    if (lab_magic != 0x00000801u) {
        char hex[16];
        std::snprintf(hex, sizeof(hex), "0x%08X", lab_magic);
        throw std::runtime_error(labels_path + ": bad magic " + hex +
                                 " at byte 0 (want 0x00000801)");
    }
    const uint32_t ln = read_be32(lab, labels_path, 4);
    if (ln != n)
        throw std::runtime_error(labels_path + ": label count " + std::to_string(ln) +
                                 " does not match image count " + std::to_string(n));
    const auto raw_labels = read_payload(lab, labels_path, 8, ln);

    uint32_t take = n;
    if (limit > 0 && uint32_t(limit) < n) take = uint32_t(limit);

    Dataset ds;
    ds.images = Tensor({int(take), 1, int(rows), int(cols)});
    ds.labels.resize(take);
    int max_label = 0;
    for (uint32_t i = 0; i < take; ++i) {
        ds.labels[i] = raw_labels[i];
        max_label = std::max(max_label, int(raw_labels[i]));
        for (uint32_t p = 0; p < rows * cols; ++p)
            ds.images.data[size_t(i) * rows * cols + p] =
                double(pixels[size_t(i) * rows * cols + p]) / 255.0 - 0.5;
    }
    ds.num_classes = max_label + 1;
    return ds;
}

Dataset make_synthetic(const SyntheticSpec& spec, uint64_t seed, uint64_t stream) {
    const int s = spec.size;
    const int pix = s * s;

    // Shared background and per-class bump mixtures. Class information rides
    // at class_scale on top of a background of unit scale, so aggressive
    // activation quantization (whose step is set by the full dynamic range)
    // erases class detail long before it erases the background.
    auto render_bumps = [&](Rng& rng, int bumps, double amplitude, std::vector<double>& out) {
        for (int b = 0; b < bumps; ++b) {
            const double cy = rng.uniform(1.0, s - 2.0);
            const double cx = rng.uniform(1.0, s - 2.0);
            const double sigma = rng.uniform(0.08, 0.22) * s;
            const double amp = amplitude * (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.6, 1.0);
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                    out[size_t(y) * s + x] += amp * std::exp(-d2 / (2.0 * sigma * sigma));
                }
        }
    };

    Rng proto_rng(mix_seed(seed, 0xBACC));
    std::vector<double> background(size_t(pix), 0.0);
    render_bumps(proto_rng, 4, spec.background_scale, background);

    std::vector<std::vector<double>> class_patterns(size_t(spec.classes));
    for (int c = 0; c < spec.classes; ++c) {
        Rng crng(mix_seed(seed, 0xC1A55, uint64_t(c)));
        class_patterns[size_t(c)].assign(size_t(pix), 0.0);
        render_bumps(crng, 3, spec.class_scale, class_patterns[size_t(c)]);
    }

    Dataset ds;
    ds.num_classes = spec.classes;
    ds.images = Tensor({spec.count, 1, s, s});
    ds.labels.resize(size_t(spec.count));

    std::vector<int> order(size_t(spec.count));
    for (int i = 0; i < spec.count; ++i) order[size_t(i)] = i % spec.classes;
    Rng shuffle_rng(mix_seed(seed, 0x50FF1E, stream));
    shuffle_rng.shuffle(order);

    Rng sample_rng(mix_seed(seed, 0xDA7A, stream));
    for (int i = 0; i < spec.count; ++i) {
        const int c = order[size_t(i)];
        ds.labels[size_t(i)] = c;
        const double gain = sample_rng.uniform(0.8, 1.2);
        double* img = &ds.images.data[size_t(i) * pix];
        for (int p = 0; p < pix; ++p) {
            const double v = gain * background[size_t(p)] + class_patterns[size_t(c)][size_t(p)] +
                             spec.noise * sample_rng.normal();
            // Fixed squash keeps pixels in [-0.5, 0.5] deterministically.
            img[p] = 0.5 * spec.bulk_scale * std::tanh(v);
        }
        // Hot patches: class-irrelevant full-amplitude 2x2 blocks on the
        // border ring. They give the activation distributions the heavy
        // tails of real networks, so min/max-calibrated formats spend their
        // range on rare spikes, while barely occluding the class bumps.
        for (int hp = 0; hp < spec.hot_patches; ++hp) {
            const int side = int(sample_rng.below(4));
            const int along = int(sample_rng.below(uint64_t(s - 1)));
            int y, x;
            switch (side) {
                case 0: y = 0; x = along; break;
                case 1: y = s - 2; x = along; break;
                case 2: y = along; x = 0; break;
                default: y = along; x = s - 2; break;
            }
            const double amp = sample_rng.uniform() < 0.5 ? -0.5 : 0.5;
            img[size_t(y) * s + x] = amp;
            img[size_t(y) * s + x + 1] = amp;
            img[size_t(y + 1) * s + x] = amp;
            img[size_t(y + 1) * s + x + 1] = amp;
        }
    }
    return ds;
}

}  // namespace fixnet
