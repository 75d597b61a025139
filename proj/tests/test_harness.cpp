// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fixnet/harness.hpp"
#include "fixnet/serialize.hpp"

using namespace fixnet;
namespace fs = std::filesystem;

namespace {

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void push_be32(std::vector<unsigned char>& v, uint32_t x) {
    v.push_back((x >> 24) & 0xFF);
    v.push_back((x >> 16) & 0xFF);
    v.push_back((x >> 8) & 0xFF);
    v.push_back(x & 0xFF);
}

// Single fc layer with identity weights: logits == flattened input.
NetworkSpec identity_net(int k) {
    NetworkSpec net;
    net.input_channels = 1;
    net.input_height = 1;
    net.input_width = k;
    net.num_classes = k;
    LayerSpec fc;
    fc.kind = LayerKind::Fc;
    fc.out_channels = k;
    fc.relu = false;
    net.layers = {fc};
    return net;
}

Parameters identity_params(int k) {
    Parameters p;
    p.layers.resize(1);
    p.layers[0].weight = Tensor({k, k});
    for (int i = 0; i < k; ++i) p.layers[0].weight.data[size_t(i) * k + i] = 1.0;
    p.layers[0].bias = Tensor({k});
    return p;
}

Dataset logits_dataset(const Tensor& logits, const std::vector<int>& labels, int k) {
    Dataset d;
    d.images = Tensor({logits.shape[0], 1, 1, k}, logits.data);
    d.labels = labels;
    d.num_classes = k;
    return d;
}

}  // namespace

TEST_CASE("idx loader: round trip, magic and truncation errors") {
    const fs::path dir = fs::temp_directory_path() / "fixnet_idx_test";
    fs::create_directories(dir);
    const std::string img_path = (dir / "img.idx").string();
    const std::string lab_path = (dir / "lab.idx").string();

    std::vector<unsigned char> img;
    push_be32(img, 0x00000803);
    push_be32(img, 3);
    push_be32(img, 4);
    push_be32(img, 4);
    for (int i = 0; i < 48; ++i) img.push_back((unsigned char)(i * 5));
    write_bytes(img_path, img);

    std::vector<unsigned char> lab;
    push_be32(lab, 0x00000801);
    push_be32(lab, 3);
    lab.push_back(2);
    lab.push_back(0);
    lab.push_back(1);
    write_bytes(lab_path, lab);

    const Dataset ds = load_idx(img_path, lab_path);
    CHECK(ds.size() == 3);
    CHECK(ds.images.shape == std::vector<int>{3, 1, 4, 4});
    CHECK(ds.labels == std::vector<int>{2, 0, 1});
    CHECK(ds.num_classes == 3);
    CHECK(ds.images.data[0] == doctest::Approx(-0.5));
    CHECK(ds.images.data[1] == doctest::Approx(5.0 / 255.0 - 0.5));
    for (double v : ds.images.data) {
        CHECK(v >= -0.5);
        CHECK(v <= 0.5);
    }

    // Bad magic names the offending value.
    std::vector<unsigned char> bad = img;
    bad[3] = 0x99;
    write_bytes(img_path + ".bad", bad);
    CHECK_THROWS_WITH_AS(load_idx(img_path + ".bad", lab_path),
                         doctest::Contains("bad magic"), std::runtime_error);

    // Truncation reports expected vs actual byte counts.
    std::vector<unsigned char> trunc(img.begin(), img.begin() + 40);
    write_bytes(img_path + ".trunc", trunc);
    try {
        load_idx(img_path + ".trunc", lab_path);
        FAIL("expected truncation error");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("truncated") != std::string::npos);
        CHECK(msg.find("64") != std::string::npos);  // expected total
        CHECK(msg.find("40") != std::string::npos);  // actual
    }

    // Label/image count mismatch.
    std::vector<unsigned char> lab2;
    push_be32(lab2, 0x00000801);
    push_be32(lab2, 2);
    lab2.push_back(0);
    lab2.push_back(1);
    write_bytes(lab_path + ".short", lab2);
    CHECK_THROWS_AS(load_idx(img_path, lab_path + ".short"), std::runtime_error);
}

TEST_CASE("synthetic generator: deterministic per seed") {
    SyntheticSpec spec;
    spec.classes = 10;
    spec.count = 1000;
    spec.size = 8;
    const Dataset a = make_synthetic(spec, 5);
    const Dataset b = make_synthetic(spec, 5);
    CHECK(a.images.data == b.images.data);
    CHECK(a.labels == b.labels);
    const Dataset c = make_synthetic(spec, 6);
    CHECK(a.images.data != c.images.data);
    // Balanced labels, pixels inside the unit range.
    std::vector<int> counts(10, 0);
    for (int y : a.labels) ++counts[size_t(y)];
    for (int n : counts) CHECK(n == 100);
    for (double v : a.images.data) {
        CHECK(v >= -0.5);
        CHECK(v <= 0.5);
    }
}

TEST_CASE("evaluate_topk: strict winner, ties, and preconditions") {
    const int k = 4;
    const NetworkSpec net = identity_net(k);
    const Parameters params = identity_params(k);

    Tensor logits({3, k}, {
        0.1, 0.9, 0.2, 0.0,   // label 1 wins strictly
        0.5, 0.5, 0.0, 0.0,   // tie: class 0 takes the slot
        0.5, 0.5, 0.0, 0.0,
    });
    const Dataset d = logits_dataset(logits, {1, 0, 1}, k);
    CHECK(evaluate_topk(net, params, nullptr, d, 1) == doctest::Approx(100.0 / 3.0));

    CHECK_THROWS_AS(evaluate_topk(net, params, nullptr, d, 0), std::invalid_argument);
    CHECK_THROWS_AS(evaluate_topk(net, params, nullptr, d, 4), std::invalid_argument);
}

TEST_CASE("evaluate_topk: uniform random classifier is ~90% wrong at k=1") {
    const int k = 10;
    const NetworkSpec net = identity_net(k);
    const Parameters params = identity_params(k);
    Rng rng(12);
    const int n = 10000;
    Tensor logits({n, k});
    for (double& v : logits.data) v = rng.uniform(-1.0, 1.0);
    std::vector<int> labels(static_cast<size_t>(n));
    for (int& y : labels) y = int(rng.below(10));
    const Dataset d = logits_dataset(logits, labels, k);
    const double err = evaluate_topk(net, params, nullptr, d, 1);
    CHECK(err > 87.0);
    CHECK(err < 93.0);
}

TEST_CASE("evaluate_topk: matches a sort-based oracle on all permutations") {
    const int k = 4;
    const NetworkSpec net = identity_net(k);
    const Parameters params = identity_params(k);
    std::vector<double> base{0.1, 0.2, 0.3, 0.4};
    std::sort(base.begin(), base.end());
    int idx = 0;
    do {
        for (int label = 0; label < k; ++label) {
            Tensor logits({1, k}, std::vector<double>(base.begin(), base.end()));
            const Dataset d = logits_dataset(logits, {label}, k);
            for (int kk = 1; kk < k; ++kk) {
                // Oracle: position of the label among indices sorted by
                // descending logit, lower index first on ties.
                std::vector<int> order{0, 1, 2, 3};
                std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                    return base[size_t(a)] > base[size_t(b)];
                });
                const int rank =
                    int(std::find(order.begin(), order.end(), label) - order.begin());
                const double expect = rank < kk ? 0.0 : 100.0;
                CHECK(evaluate_topk(net, params, nullptr, d, kk) == expect);
            }
        }
        ++idx;
    } while (std::next_permutation(base.begin(), base.end()) && idx < 24);
}

TEST_CASE("checkpoint: bitwise round trip with and without formats") {
    const fs::path dir = fs::temp_directory_path() / "fixnet_ckpt_test";
    fs::create_directories(dir);
    const std::string path = (dir / "a.ckpt").string();

    const NetworkSpec net = preset_network("tiny3", 1, 8, 8, 4);
    Rng rng(3);
    const Parameters params = init_parameters(net, rng);
    save_checkpoint(path, net, params);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.params.bitwise_equal(params));
    CHECK(ck.net.num_classes == 4);
    CHECK(ck.net.layers.size() == net.layers.size());
    for (const auto& f : ck.weight_formats) CHECK(!f.has_value());

    // Quantized snapshot carries per-tensor formats.
    const PrecisionAssignment assign = uniform_assignment(net, Precision{8}, Precision{0});
    const QuantizedView view = quantize_weights(net, params, assign);
    Parameters snap = params;
    std::vector<std::optional<QFormat>> fmts;
    for (size_t l = 0; l < view.layers.size(); ++l) {
        snap.layers[l].weight = view.layers[l].weight;
        fmts.push_back(view.layers[l].fmt);
    }
    save_checkpoint(path, net, snap, &fmts);
    const Checkpoint qck = load_checkpoint(path);
    CHECK(qck.params.bitwise_equal(snap));
    for (size_t l = 0; l < qck.weight_formats.size(); ++l) {
        REQUIRE(qck.weight_formats[l].has_value());
        CHECK(*qck.weight_formats[l] == *fmts[l]);
    }

    // Corrupt magic.
    std::ofstream bad(path, std::ios::binary);
    bad << "NOTACKPT";
    bad.close();
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
}

TEST_CASE("run config: json parsing and validation") {
    const nlohmann::json j = {
        {"seed", 7},
        {"topk", 1},
        {"network", {{"preset", "tiny3"}}},
        {"dataset", {{"kind", "synthetic"}, {"classes", 4}, {"train", 64}, {"test", 32}, {"size", 8}}},
        {"strategy", {{"name", "p2"}, {"lr", 0.02}, {"epochs", 3}, {"top_k_layers", 2}}},
        {"grid", {{"weights", {"8", "float"}}, {"acts", {"4"}}}},
    };
    const RunConfig cfg = run_config_from_json(j);
    CHECK(cfg.seed == 7);
    CHECK(cfg.network.num_layers() == 3);
    CHECK(cfg.strategy.strategy == Strategy::P2);
    CHECK(cfg.strategy.lr == 0.02);
    CHECK(cfg.strategy.top_k_layers == 2);
    CHECK(cfg.grid_weights.size() == 2);
    CHECK(cfg.grid_weights[0].bits == 8);
    CHECK(cfg.grid_weights[1].is_float());
    CHECK(cfg.grid_acts.size() == 1);
    CHECK(cfg.dataset.synthetic.count == 64);

    nlohmann::json missing = j;
    missing.erase("network");
    CHECK_THROWS_AS(run_config_from_json(missing), std::invalid_argument);

    nlohmann::json bad_strategy = j;
    bad_strategy["strategy"]["name"] = "p9";
    CHECK_THROWS_AS(run_config_from_json(bad_strategy), std::invalid_argument);
}

TEST_CASE("run_grid: float-only cell equals the checkpoint error; byte-identical reruns") {
    nlohmann::json j = {
        {"seed", 3},
        {"network", {{"preset", "tiny3"}}},
        {"dataset", {{"kind", "synthetic"}, {"classes", 4}, {"train", 96}, {"test", 64}, {"size", 8}}},
        {"strategy", {{"name", "none"}}},
        {"grid", {{"weights", {"float"}}, {"acts", {"float"}}}},
    };
    const RunConfig cfg = run_config_from_json(j);
    const DataSplit data = cfg.dataset.load(cfg.seed);
    TrainFloatConfig tf;
    tf.epochs = 1;
    const FinetuneResult trained = train_float(cfg.network, data.train, tf, cfg.seed);
    const GridReport rep = run_grid(cfg, cfg.network, trained.params, data);
    const double base = evaluate_topk(cfg.network, trained.params, nullptr, data.test, 1);
    CHECK(rep.at(0, 0).error == base);
    CHECK(rep.to_csv().rfind("activation_bits,wfloat\n", 0) == 0);

    // Small mixed grid through the vanilla path, repeated: byte-identical.
    j["strategy"] = {{"name", "vanilla"}, {"epochs", 1}, {"lr", 0.02}};
    j["grid"] = {{"weights", {"8", "float"}}, {"acts", {"8", "float"}}};
    const RunConfig cfg2 = run_config_from_json(j);
    const GridReport r1 = run_grid(cfg2, cfg2.network, trained.params, data);
    const GridReport r2 = run_grid(cfg2, cfg2.network, trained.params, data);
    CHECK(r1.to_csv() == r2.to_csv());
    CHECK(r1.to_json() == r2.to_json());
    // Every cell populated.
    for (const auto& row : r1.cells)
        for (const GridCell& c : row) CHECK((c.na || (c.error >= 0.0 && c.error <= 100.0)));
}
