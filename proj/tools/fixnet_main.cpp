// SPDX-License-Identifier: Apache-2.0
//
// fixnet CLI: float pre-training, fixed-point quantization baselines,
// quantization-aware fine-tuning strategies, gradient-mismatch diagnostics
// and bit-width grid experiments.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fixnet/diagnostics.hpp"
#include "fixnet/harness.hpp"
#include "fixnet/serialize.hpp"

namespace fs = std::filesystem;
using namespace fixnet;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string output_dir;
    uint64_t seed = 0;
    bool seed_set = false;
};

RunConfig load_config(const CommonOpts& opts) {
    if (opts.config_path.empty())
        throw std::runtime_error("--config is required");
    RunConfig cfg = load_run_config(opts.config_path);
    if (opts.seed_set) {
        cfg.seed = opts.seed;
        cfg.strategy.seed = opts.seed;
    }
    if (!opts.output_dir.empty()) cfg.output_dir = opts.output_dir;
    fs::create_directories(cfg.output_dir);
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

std::string wa_tag(const std::string& w, const std::string& a) {
    return "w" + w + "_a" + a;
}

int cmd_train_float(const CommonOpts& opts) {
    const RunConfig cfg = load_config(opts);
    const DataSplit data = cfg.dataset.load(cfg.seed);
    const FinetuneResult res = train_float(cfg.network, data.train, cfg.train_float, cfg.seed);
    const double err = evaluate_topk(cfg.network, res.params, nullptr, data.test, cfg.topk);
    const std::string ckpt = cfg.output_dir + "/float.ckpt";
    save_checkpoint(ckpt, cfg.network, res.params);
    res.log.write_csv(cfg.output_dir + "/train_float_log.csv");
    std::printf("train-float: top-%d error %.2f%%  -> %s\n", cfg.topk, err, ckpt.c_str());
    return 0;
}

int cmd_quantize(const CommonOpts& opts, const std::string& ckpt_path,
                 const std::string& wbits, const std::string& abits) {
    const RunConfig cfg = load_config(opts);
    const Checkpoint ck = load_checkpoint(ckpt_path.empty() ? cfg.output_dir + "/float.ckpt"
                                                            : ckpt_path);
    const DataSplit data = cfg.dataset.load(cfg.seed);
    const Precision W = Precision::parse(wbits), A = Precision::parse(abits);
    const PrecisionAssignment assign = calibrated_assignment(
        ck.net, ck.params, W, A, data.train, cfg.strategy.calib_samples);
    const double err = (W.is_float() && A.is_float())
                           ? evaluate_topk(ck.net, ck.params, nullptr, data.test, cfg.topk)
                           : evaluate_topk(ck.net, ck.params, &assign, data.test, cfg.topk);

    const QuantizedView view = quantize_weights(ck.net, ck.params, assign);
    std::vector<std::optional<QFormat>> fmts;
    Parameters snap = ck.params;
    for (size_t l = 0; l < view.layers.size(); ++l) {
        fmts.push_back(view.layers[l].fmt);
        snap.layers[l].weight = view.layers[l].weight;
    }
    const std::string out_ckpt =
        cfg.output_dir + "/quantized_" + wa_tag(wbits, abits) + ".ckpt";
    save_checkpoint(out_ckpt, ck.net, snap, &fmts);
    std::printf("quantize: W=%s A=%s top-%d error %.2f%% (no fine-tuning) -> %s\n",
                wbits.c_str(), abits.c_str(), cfg.topk, err, out_ckpt.c_str());
    return 0;
}

int cmd_finetune(const CommonOpts& opts, const std::string& ckpt_path,
                 const std::string& strategy, const std::string& wbits,
                 const std::string& abits) {
    RunConfig cfg = load_config(opts);
    cfg.strategy.strategy = parse_strategy(strategy);
    const Checkpoint ck = load_checkpoint(ckpt_path.empty() ? cfg.output_dir + "/float.ckpt"
                                                            : ckpt_path);
    const DataSplit data = cfg.dataset.load(cfg.seed);
    const Precision W = Precision::parse(wbits), A = Precision::parse(abits);

    FinetuneResult res;
    switch (cfg.strategy.strategy) {
        case Strategy::Vanilla:
            res = finetune_vanilla(ck.net, ck.params, uniform_assignment(ck.net, W, A),
                                   data.train, cfg.strategy);
            break;
        case Strategy::P1:
            res = finetune_float_activations(ck.net, ck.params, W, data.train, cfg.strategy);
            break;
        case Strategy::P2:
            res = finetune_top_layers(ck.net, ck.params, uniform_assignment(ck.net, W, A),
                                      data.train, cfg.strategy);
            break;
        case Strategy::P3:
            res = finetune_bottom_up(ck.net, ck.params, uniform_assignment(ck.net, W, A),
                                     data.train,
                                     build_phase_plan(ck.net.num_layers(), cfg.strategy.epochs),
                                     cfg.strategy);
            break;
        default:
            throw std::runtime_error("finetune: strategy must be vanilla, p1, p2 or p3");
    }

    const std::string tag = strategy + "_" + wa_tag(wbits, abits);
    res.log.write_csv(cfg.output_dir + "/" + tag + "_log.csv");
    save_checkpoint(cfg.output_dir + "/" + tag + ".ckpt", ck.net, res.params);
    if (res.log.diverged) {
        std::printf("finetune %s: diverged at step %lld (recorded as n/a)\n", strategy.c_str(),
                    static_cast<long long>(res.log.divergence_step));
        return 0;  // an expected experimental outcome
    }
    const PrecisionAssignment assign = calibrated_assignment(
        ck.net, res.params, W, A, data.train, cfg.strategy.calib_samples);
    const double err = (W.is_float() && A.is_float())
                           ? evaluate_topk(ck.net, res.params, nullptr, data.test, cfg.topk)
                           : evaluate_topk(ck.net, res.params, &assign, data.test, cfg.topk);
    std::printf("finetune %s: W=%s A=%s top-%d error %.2f%%\n", strategy.c_str(), wbits.c_str(),
                abits.c_str(), cfg.topk, err);
    return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& ckpt_path, const std::string& wbits,
             const std::string& abits) {
    const RunConfig cfg = load_config(opts);
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const DataSplit data = cfg.dataset.load(cfg.seed);
    const Precision W = Precision::parse(wbits), A = Precision::parse(abits);
    double err;
    if (W.is_float() && A.is_float()) {
        err = evaluate_topk(ck.net, ck.params, nullptr, data.test, cfg.topk);
    } else {
        const PrecisionAssignment assign = calibrated_assignment(
            ck.net, ck.params, W, A, data.train, cfg.strategy.calib_samples);
        err = evaluate_topk(ck.net, ck.params, &assign, data.test, cfg.topk);
    }
    std::printf("eval: W=%s A=%s top-%d error %.2f%%\n", wbits.c_str(), abits.c_str(), cfg.topk,
                err);
    return 0;
}

int cmd_diagnose(const CommonOpts& opts, const std::string& ckpt_path, const std::string& wbits,
                 const std::string& abits, int batches, double step_scale) {
    const RunConfig cfg = load_config(opts);
    const Checkpoint ck = load_checkpoint(ckpt_path.empty() ? cfg.output_dir + "/float.ckpt"
                                                            : ckpt_path);
    const DataSplit data = cfg.dataset.load(cfg.seed);
    const Precision W = Precision::parse(wbits), A = Precision::parse(abits);
    const PrecisionAssignment assign = uniform_assignment(ck.net, W, A);

    Rng rng(mix_seed(cfg.seed, 0xD1A6));
    std::vector<Tensor> bt;
    std::vector<std::vector<int>> bl;
    const int bs = cfg.strategy.batch_size;
    for (int b = 0; b < batches; ++b) {
        std::vector<int> idx(static_cast<size_t>(bs));
        for (int i = 0; i < bs; ++i) idx[size_t(i)] = int(rng.below(uint64_t(data.train.size())));
        bt.push_back(data.train.gather(idx));
        bl.push_back(data.train.gather_labels(idx));
    }
    const MismatchReport rep = mismatch_per_layer(ck.net, ck.params, assign, bt, bl);
    write_text(cfg.output_dir + "/mismatch.csv", rep.to_csv());
    write_text(cfg.output_dir + "/mismatch.json", rep.to_json());

    const DescentReport dr =
        descent_check(ck.net, ck.params, assign, bt[0], bl[0], step_scale);
    nlohmann::json dj;
    dj["delta"] = dr.delta;
    dj["eta"] = dr.eta;
    dj["grad_norm"] = dr.grad_norm;
    dj["sign"] = dr.sign;
    dj["flag"] = dr.flag;
    write_text(cfg.output_dir + "/descent.json", dj.dump(2) + "\n");

    std::printf("diagnose: W=%s A=%s over %d batches\n", wbits.c_str(), abits.c_str(), batches);
    std::printf("%s", rep.to_csv().c_str());
    std::printf("descent: delta=%.6g flag=%s\n", dr.delta, dr.flag.c_str());
    return 0;
}

int cmd_grid(const CommonOpts& opts, const std::string& ckpt_path) {
    const RunConfig cfg = load_config(opts);
    const DataSplit data = cfg.dataset.load(cfg.seed);
    Parameters start;
    NetworkSpec net = cfg.network;
    if (!ckpt_path.empty()) {
        Checkpoint ck = load_checkpoint(ckpt_path);
        net = ck.net;
        start = std::move(ck.params);
    } else {
        std::printf("grid: no checkpoint given, training float baseline first\n");
        const FinetuneResult res = train_float(net, data.train, cfg.train_float, cfg.seed);
        start = res.params;
        save_checkpoint(cfg.output_dir + "/float.ckpt", net, start);
    }
    const GridReport rep = run_grid(cfg, net, start, data);
    const std::string base = cfg.output_dir + "/grid_" + rep.strategy;
    write_text(base + ".csv", rep.to_csv());
    write_text(base + ".json", rep.to_json());
    std::printf("%s", rep.to_csv().c_str());
    std::printf("grid: wrote %s.csv and %s.json\n", base.c_str(), base.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fixed-point inference emulation and quantization-aware fine-tuning"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string ckpt, wbits = "float", abits = "float", strategy = "vanilla";
    int batches = 50;
    double step_scale = 1.0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opts.config_path, "JSON run configuration")->required();
        sub->add_option("--out", opts.output_dir, "output directory (overrides config)");
        sub->add_option("--seed", opts.seed, "seed (overrides config)")
            ->each([&](const std::string&) { opts.seed_set = true; });
    };

    CLI::App* train = app.add_subcommand("train-float", "train the float baseline from scratch");
    add_common(train);

    CLI::App* quant = app.add_subcommand("quantize", "no-fine-tune fixed point baseline");
    add_common(quant);
    quant->add_option("--checkpoint", ckpt, "float checkpoint (default <out>/float.ckpt)");
    quant->add_option("--weight-bits", wbits, "4|8|16|32|float");
    quant->add_option("--act-bits", abits, "4|8|16|32|float");

    CLI::App* ft = app.add_subcommand("finetune", "quantization-aware fine-tuning");
    add_common(ft);
    ft->add_option("--checkpoint", ckpt, "starting checkpoint (default <out>/float.ckpt)");
    ft->add_option("--strategy", strategy, "vanilla|p1|p2|p3")->required();
    ft->add_option("--weight-bits", wbits, "4|8|16|32|float");
    ft->add_option("--act-bits", abits, "4|8|16|32|float");

    CLI::App* ev = app.add_subcommand("eval", "top-k error of a checkpoint");
    add_common(ev);
    ev->add_option("--checkpoint", ckpt, "checkpoint to evaluate")->required();
    ev->add_option("--weight-bits", wbits, "4|8|16|32|float");
    ev->add_option("--act-bits", abits, "4|8|16|32|float");

    CLI::App* diag = app.add_subcommand("diagnose", "gradient mismatch and descent reports");
    add_common(diag);
    diag->add_option("--checkpoint", ckpt, "checkpoint (default <out>/float.ckpt)");
    diag->add_option("--weight-bits", wbits, "4|8|16|32|float");
    diag->add_option("--act-bits", abits, "4|8|16|32|float");
    diag->add_option("--batches", batches, "number of probe batches");
    diag->add_option("--step-scale", step_scale, "descent probe step in activation LSBs");

    CLI::App* grid = app.add_subcommand("grid", "bit-width grid experiment");
    add_common(grid);
    grid->add_option("--checkpoint", ckpt, "float checkpoint (trained here when omitted)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train_float(opts);
        if (quant->parsed()) return cmd_quantize(opts, ckpt, wbits, abits);
        if (ft->parsed()) return cmd_finetune(opts, ckpt, strategy, wbits, abits);
        if (ev->parsed()) return cmd_eval(opts, ckpt, wbits, abits);
        if (diag->parsed()) return cmd_diagnose(opts, ckpt, wbits, abits, batches, step_scale);
        if (grid->parsed()) return cmd_grid(opts, ckpt);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
