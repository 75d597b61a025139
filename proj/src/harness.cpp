// SPDX-License-Identifier: Apache-2.0
#include "fixnet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include "fixnet/serialize.hpp"

namespace fixnet {

using nlohmann::json;

NetworkSpec preset_network(const std::string& name, int channels, int height, int width,
                           int classes) {
    NetworkSpec net;
    net.input_channels = channels;
    net.input_height = height;
    net.input_width = width;
    net.num_classes = classes;
    auto conv = [](int out, bool pool) {
        LayerSpec ls;
        ls.kind = LayerKind::Conv;
        ls.out_channels = out;
        ls.kernel = 3; ls.stride = 1; ls.pad = 1;
        ls.relu = true; ls.pool = pool;
        return ls;
    };
    auto fc = [](int out, bool relu) {
        LayerSpec ls;
        ls.kind = LayerKind::Fc;
        ls.out_channels = out;
        ls.relu = relu;
        return ls;
    };
    if (name == "ref8") {
        net.layers = {conv(8, false), conv(8, true),  conv(16, false), conv(16, true),
                      conv(16, false), conv(24, false), fc(48, true),   fc(classes, false)};
    } else if (name == "desk6") {
        net.layers = {conv(8, false), conv(8, true), conv(16, true), conv(16, false),
                      fc(32, true), fc(classes, false)};
    } else if (name == "tiny3") {
        net.layers = {conv(4, true), fc(16, true), fc(classes, false)};
    } else {
        throw std::invalid_argument("unknown network preset '" + name + "'");
    }
    net.validate();
    return net;
}

DataSplit DatasetConfig::load(uint64_t seed) const {
    DataSplit split;
    if (kind == "synthetic") {
        split.train = make_synthetic(synthetic, seed, 0);
        SyntheticSpec test_spec = synthetic;
        test_spec.count = test_count;
        split.test = make_synthetic(test_spec, seed, 1);
    } else if (kind == "idx") {
        split.train = load_idx(train_images, train_labels, limit);
        split.test = load_idx(test_images, test_labels, limit);
    } else {
        throw std::invalid_argument("dataset kind must be 'synthetic' or 'idx'");
    }
    return split;
}

std::string DatasetConfig::describe() const {
    if (kind == "synthetic") {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "synthetic(classes=%d,train=%d,test=%d,size=%d)",
                      synthetic.classes, synthetic.count, test_count, synthetic.size);
        return buf;
    }
    return "idx(" + train_images + ")";
}

RunConfig run_config_from_json(const json& j) {
    RunConfig cfg;
    cfg.seed = j.value("seed", uint64_t(1));
    cfg.output_dir = j.value("output_dir", std::string("out"));
    cfg.topk = j.value("topk", 1);

    if (j.contains("dataset")) {
        const json& dj = j.at("dataset");
        cfg.dataset.kind = dj.value("kind", std::string("synthetic"));
        cfg.dataset.synthetic.classes = dj.value("classes", 10);
        cfg.dataset.synthetic.count = dj.value("train", 4000);
        cfg.dataset.synthetic.size = dj.value("size", 16);
        cfg.dataset.synthetic.noise = dj.value("noise", 0.12);
        cfg.dataset.synthetic.class_scale = dj.value("class_scale", 0.3);
        cfg.dataset.synthetic.background_scale = dj.value("background_scale", 1.0);
        cfg.dataset.synthetic.bulk_scale = dj.value("bulk_scale", 1.0);
        cfg.dataset.synthetic.hot_patches = dj.value("hot_patches", 0);
        cfg.dataset.test_count = dj.value("test", 1000);
        cfg.dataset.train_images = dj.value("train_images", std::string());
        cfg.dataset.train_labels = dj.value("train_labels", std::string());
        cfg.dataset.test_images = dj.value("test_images", std::string());
        cfg.dataset.test_labels = dj.value("test_labels", std::string());
        cfg.dataset.limit = dj.value("limit", 0);
    }

    if (j.contains("network")) {
        const json& nj = j.at("network");
        if (nj.contains("preset")) {
            const int size = cfg.dataset.kind == "synthetic" ? cfg.dataset.synthetic.size : 28;
            const int classes = cfg.dataset.kind == "synthetic" ? cfg.dataset.synthetic.classes : 10;
            cfg.network = preset_network(nj.at("preset").get<std::string>(),
                                         nj.value("channels", 1), nj.value("height", size),
                                         nj.value("width", size), nj.value("classes", classes));
        } else {
            cfg.network = net_from_json(nj);
        }
    } else {
        throw std::invalid_argument("config: missing 'network'");
    }

    if (j.contains("strategy")) {
        const json& sj = j.at("strategy");
        cfg.strategy.strategy = parse_strategy(sj.value("name", std::string("none")));
        cfg.strategy.lr = sj.value("lr", 0.01);
        cfg.strategy.epochs = sj.value("epochs", 2);
        cfg.strategy.batch_size = sj.value("batch_size", 32);
        cfg.strategy.top_k_layers = sj.value("top_k_layers", 1);
        cfg.strategy.divergence_factor = sj.value("divergence_factor", 3.0);
        cfg.strategy.calib_samples = sj.value("calib_samples", 256);
        cfg.strategy.quantize_master = sj.value("quantize_master", false);
    }
    cfg.strategy.seed = cfg.seed;

    if (j.contains("train_float")) {
        const json& tj = j.at("train_float");
        cfg.train_float.lr = tj.value("lr", 0.05);
        cfg.train_float.epochs = tj.value("epochs", 6);
        cfg.train_float.batch_size = tj.value("batch_size", 32);
    }

    auto parse_axis = [](const json& arr) {
        std::vector<Precision> axis;
        for (const json& v : arr)
            axis.push_back(Precision::parse(v.is_string() ? v.get<std::string>()
                                                          : std::to_string(v.get<int>())));
        return axis;
    };
    if (j.contains("grid")) {
        if (j.at("grid").contains("weights")) cfg.grid_weights = parse_axis(j.at("grid").at("weights"));
        if (j.at("grid").contains("acts")) cfg.grid_acts = parse_axis(j.at("grid").at("acts"));
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

double evaluate_topk(const NetworkSpec& net, const Parameters& params,
                     const PrecisionAssignment* assign, const Dataset& data, int k) {
    if (k < 1 || k >= data.num_classes)
        throw std::invalid_argument("evaluate_topk: need 1 <= k < num_classes");
    const int n = data.size();
    int wrong = 0;
    const int chunk = 128;
    for (int at = 0; at < n; at += chunk) {
        const int m = std::min(chunk, n - at);
        const Tensor batch = data.slice(at, m);
        std::vector<int> labels(data.labels.begin() + at, data.labels.begin() + at + m);
        const Trace trace = assign ? forward_quantized(net, params, *assign, batch, labels)
                                   : forward_float(net, params, batch, labels);
        const int K = net.num_classes;
        for (int i = 0; i < m; ++i) {
            const double* row = &trace.logits.data[size_t(i) * K];
            const int y = labels[size_t(i)];
            int rank = 0;
            for (int c = 0; c < K; ++c) {
                if (row[c] > row[y]) ++rank;
                else if (row[c] == row[y] && c < y) ++rank;
            }
            if (rank >= k) ++wrong;
        }
    }
    return 100.0 * double(wrong) / double(n);
}

PrecisionAssignment calibrated_assignment(const NetworkSpec& net, const Parameters& params,
                                          Precision weight_bits, Precision act_bits,
                                          const Dataset& calib_source, int calib_samples) {
    PrecisionAssignment a = uniform_assignment(net, weight_bits, act_bits);
    const Tensor calib = calib_source.slice(0, std::min(calib_samples, calib_source.size()));
    calibrate_activations(a, net, params, calib);
    return a;
}

FinetuneResult train_float(const NetworkSpec& net, const Dataset& data,
                           const TrainFloatConfig& cfg, uint64_t seed) {
    Rng init_rng(mix_seed(seed, 0x1417));
    const Parameters params = init_parameters(net, init_rng);
    StrategyConfig sc;
    sc.strategy = Strategy::Vanilla;
    sc.lr = cfg.lr;
    sc.epochs = cfg.epochs;
    sc.batch_size = cfg.batch_size;
    sc.seed = seed;
    const PrecisionAssignment all_float = uniform_assignment(net, Precision{0}, Precision{0});
    return finetune_vanilla(net, params, all_float, data, sc);
}

namespace {

std::string cell_str(const GridCell& c) {
    if (c.na) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", c.error);
    return buf;
}

}  // namespace

std::string GridReport::to_csv() const {
    std::string out = "activation_bits";
    for (const Precision& w : weight_axis) out += ",w" + w.to_string();
    out += "\n";
    for (size_t a = 0; a < act_axis.size(); ++a) {
        out += act_axis[a].to_string();
        for (size_t w = 0; w < weight_axis.size(); ++w)
            out += "," + cell_str(cells[a][w]);
        out += "\n";
    }
    return out;
}

std::string GridReport::to_json() const {
    json j;
    j["strategy"] = strategy;
    j["seed"] = seed;
    j["dataset"] = dataset;
    j["epochs"] = epochs;
    j["topk"] = topk;
    j["weight_axis"] = json::array();
    for (const Precision& w : weight_axis) j["weight_axis"].push_back(w.to_string());
    j["act_axis"] = json::array();
    for (const Precision& a : act_axis) j["act_axis"].push_back(a.to_string());
    j["cells"] = json::array();
    for (size_t a = 0; a < act_axis.size(); ++a)
        for (size_t w = 0; w < weight_axis.size(); ++w) {
            json cj;
            cj["weights"] = weight_axis[w].to_string();
            cj["acts"] = act_axis[a].to_string();
            if (cells[a][w].na) cj["error"] = "n/a";
            else cj["error"] = cells[a][w].error;
            j["cells"].push_back(cj);
        }
    return j.dump(2) + "\n";
}

GridReport run_grid(const RunConfig& cfg, const NetworkSpec& net, const Parameters& start,
                    const DataSplit& data) {
    GridReport rep;
    rep.weight_axis = cfg.grid_weights;
    rep.act_axis = cfg.grid_acts;
    rep.strategy = strategy_name(cfg.strategy.strategy);
    rep.seed = cfg.seed;
    rep.dataset = cfg.dataset.describe();
    rep.epochs = cfg.strategy.epochs;
    rep.topk = cfg.topk;
    rep.cells.assign(cfg.grid_acts.size(),
                     std::vector<GridCell>(cfg.grid_weights.size()));

    const double float_baseline = evaluate_topk(net, start, nullptr, data.test, cfg.topk);

    // The float-weight columns of the "adapt then evaluate" strategies reuse
    // the unmodified checkpoint; with fixed weights there is a single
    // weights-only training run per column, shared across activation rows.
    std::map<int, FinetuneResult> p1_cache;
    auto p1_base = [&](Precision w) -> const Parameters& {
        if (w.is_float()) return start;
        auto it = p1_cache.find(w.bits);
        if (it == p1_cache.end()) {
            StrategyConfig sc = cfg.strategy;
            sc.seed = mix_seed(cfg.seed, 0xB1, uint64_t(w.bits));
            it = p1_cache.emplace(w.bits,
                                  finetune_float_activations(net, start, w, data.train, sc))
                     .first;
        }
        return it->second.params;
    };

    for (size_t ai = 0; ai < cfg.grid_acts.size(); ++ai) {
        for (size_t wi = 0; wi < cfg.grid_weights.size(); ++wi) {
            const Precision W = cfg.grid_weights[wi];
            const Precision A = cfg.grid_acts[ai];
            GridCell& cell = rep.cells[ai][wi];

            if (W.is_float() && A.is_float()) {
                cell.error = float_baseline;  // no quantization path touched
                continue;
            }

            StrategyConfig sc = cfg.strategy;
            sc.seed = mix_seed(cfg.seed, uint64_t(W.bits) + 1, uint64_t(A.bits) + 1);

            auto eval_at = [&](const Parameters& p) {
                if (W.is_float() && A.is_float())
                    return evaluate_topk(net, p, nullptr, data.test, cfg.topk);
                const PrecisionAssignment a = calibrated_assignment(
                    net, p, W, A, data.train, sc.calib_samples);
                return evaluate_topk(net, p, &a, data.test, cfg.topk);
            };

            switch (cfg.strategy.strategy) {
                case Strategy::None:
                    cell.error = eval_at(start);
                    break;
                case Strategy::Vanilla: {
                    const PrecisionAssignment a = uniform_assignment(net, W, A);
                    const FinetuneResult r = finetune_vanilla(net, start, a, data.train, sc);
                    if (r.log.diverged) cell.na = true;
                    else cell.error = eval_at(r.params);
                    break;
                }
                case Strategy::P1:
                    cell.error = eval_at(p1_base(W));
                    break;
                case Strategy::P2:
                case Strategy::P3: {
                    const Parameters& base = p1_base(W);
                    if (A.is_float()) {
                        cell.error = eval_at(base);
                        break;
                    }
                    const PrecisionAssignment a = uniform_assignment(net, W, A);
                    FinetuneResult r;
                    if (cfg.strategy.strategy == Strategy::P2) {
                        r = finetune_top_layers(net, base, a, data.train, sc);
                    } else {
                        const PhasePlan plan = build_phase_plan(net.num_layers(), sc.epochs);
                        r = finetune_bottom_up(net, base, a, data.train, plan, sc);
                    }
                    if (r.log.diverged) cell.na = true;
                    else cell.error = eval_at(r.params);
                    break;
                }
            }
        }
    }
    return rep;
}

}  // namespace fixnet
