// SPDX-License-Identifier: Apache-2.0
#include "fixnet/strategies.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace fixnet {

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::None: return "none";
        case Strategy::Vanilla: return "vanilla";
        case Strategy::P1: return "p1";
        case Strategy::P2: return "p2";
        case Strategy::P3: return "p3";
    }
    return "?";
}

Strategy parse_strategy(const std::string& s) {
    if (s == "none") return Strategy::None;
    if (s == "vanilla") return Strategy::Vanilla;
    if (s == "p1") return Strategy::P1;
    if (s == "p2") return Strategy::P2;
    if (s == "p3") return Strategy::P3;
    throw std::invalid_argument("unknown strategy '" + s + "'");
}

void StrategyConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (top_k_layers < 1) throw std::invalid_argument("top_k_layers must be >= 1");
    if (!(divergence_factor > 1.0)) throw std::invalid_argument("divergence_factor must be > 1");
}

void TrainLog::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "step,phase,loss,lr,trainable_layer\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%d,%.8f,%.6g,%s\n",
                      static_cast<long long>(r.step), r.phase, r.loss, r.lr,
                      r.trainable.c_str());
        out << buf;
    }
}

void PhasePlan::validate(int num_layers) const {
    if (num_layers < 2)
        throw std::invalid_argument("phase plan needs a network with at least 2 layers");
    if (int(phases.size()) != num_layers - 1)
        throw std::invalid_argument("phase plan must have exactly num_layers-1 phases");
    for (int p = 0; p < int(phases.size()); ++p) {
        const Phase& ph = phases[size_t(p)];
        if (ph.trainable_layer != p + 1)
            throw std::invalid_argument("phase " + std::to_string(p + 1) +
                                        " must train layer " + std::to_string(p + 2));
        if (ph.trainable_layer == 0)
            throw std::invalid_argument("layer 1 is quantized but never fine-tuned");
        if (int(ph.fixed_act_layers.size()) != p + 1)
            throw std::invalid_argument("phase " + std::to_string(p + 1) +
                                        " must fix exactly " + std::to_string(p + 1) +
                                        " activation layers");
        for (int j = 0; j <= p; ++j)
            if (ph.fixed_act_layers[size_t(j)] != j)
                throw std::invalid_argument("fixed-point activations must grow bottom-to-top");
        if (ph.epochs < 1)
            throw std::invalid_argument("phase epochs must be >= 1");
    }
}

PhasePlan build_phase_plan(int num_layers, int epochs_per_phase) {
    if (num_layers < 2)
        throw std::invalid_argument("build_phase_plan: need at least 2 layers");
    if (epochs_per_phase < 1)
        throw std::invalid_argument("build_phase_plan: epochs_per_phase must be >= 1");
    PhasePlan plan;
    for (int p = 1; p < num_layers; ++p) {
        Phase ph;
        ph.trainable_layer = p;
        ph.epochs = epochs_per_phase;
        for (int j = 0; j < p; ++j) ph.fixed_act_layers.push_back(j);
        plan.phases.push_back(std::move(ph));
    }
    plan.validate(num_layers);
    return plan;
}

PrecisionAssignment phase_assignment(const PrecisionAssignment& target, const Phase& phase) {
    PrecisionAssignment a = target;
    for (auto& s : a.acts) s = PrecisionSlot{};  // all float
    for (int l : phase.fixed_act_layers) a.acts[size_t(l)] = target.acts[size_t(l)];
    // Input joins the fixed set together with layer 1.
    if (std::find(phase.fixed_act_layers.begin(), phase.fixed_act_layers.end(), 0) ==
        phase.fixed_act_layers.end())
        a.input = PrecisionSlot{};
    return a;
}

bool DivergenceMonitor::observe(double loss) {
    if (!std::isfinite(loss)) return true;
    recent_.push_back(loss);
    if (recent_.size() > kWindow) recent_.erase(recent_.begin());
    ++seen_;
    if (seen_ == int64_t(kWindow))
        baseline_ = std::accumulate(recent_.begin(), recent_.end(), 0.0) / double(kWindow);
    if (seen_ >= int64_t(kWindow)) {
        const double trailing =
            std::accumulate(recent_.begin(), recent_.end(), 0.0) / double(recent_.size());
        if (trailing > factor_ * baseline_) {
            if (++streak_ >= kStreak) return true;
        } else {
            streak_ = 0;
        }
    }
    return false;
}

namespace {

std::string mask_label(const std::set<int>& mask, int num_layers) {
    if (int(mask.size()) == num_layers) return "all";
    std::string s;
    for (int l : mask) s += (s.empty() ? "" : ";") + std::to_string(l + 1);
    return s;
}

// One fine-tuning stage: epochs over shuffled minibatches with the given
// assignment and trainable mask. Appends to log; returns false on divergence.
bool train_stage(const NetworkSpec& net, Parameters& params,
                 const PrecisionAssignment& assign, const Dataset& data,
                 const std::set<int>& mask, int epochs, int phase,
                 const StrategyConfig& cfg, Rng& rng, int64_t& step,
                 TrainLog& log, DivergenceMonitor& monitor) {
    const std::string trainable = mask_label(mask, net.num_layers());
    std::vector<int> order(size_t(data.size()));
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (int at = 0; at + cfg.batch_size <= data.size(); at += cfg.batch_size) {
            const std::vector<int> idx(order.begin() + at, order.begin() + at + cfg.batch_size);
            const Tensor batch = data.gather(idx);
            const std::vector<int> labels = data.gather_labels(idx);

            QuantizedView view = quantize_weights(net, params, assign);
            const Trace trace = forward_quantized_view(net, view, params, assign, batch, labels);
            const GradientSet grads = backward_presumed(net, trace, labels);
            sgd_step(params, grads, cfg.lr, mask);
            if (cfg.quantize_master) {
                const QuantizedView after = quantize_weights(net, params, assign);
                for (int l : mask)
                    if (after.layers[size_t(l)].fmt)
                        params.layers[size_t(l)].weight = after.layers[size_t(l)].weight;
            }

            log.rows.push_back({step, phase, trace.loss, cfg.lr, trainable});
            ++step;
            if (monitor.observe(trace.loss)) {
                log.diverged = true;
                log.divergence_step = step - 1;
                return false;
            }
        }
    }
    return true;
}

Tensor calibration_batch(const Dataset& data, int samples) {
    return data.slice(0, std::min(samples, data.size()));
}

}  // namespace

FinetuneResult finetune_vanilla(const NetworkSpec& net, const Parameters& start,
                                const PrecisionAssignment& assign, const Dataset& data,
                                const StrategyConfig& cfg) {
    cfg.validate();
    PrecisionAssignment a = assign;
    calibrate_activations(a, net, start, calibration_batch(data, cfg.calib_samples));
    FinetuneResult res{start, {}};
    Rng rng(mix_seed(cfg.seed, 0xF7));
    DivergenceMonitor monitor(cfg.divergence_factor);
    int64_t step = 0;
    train_stage(net, res.params, a, data, all_layers_mask(net), cfg.epochs, 0, cfg, rng,
                step, res.log, monitor);
    return res;
}

FinetuneResult finetune_float_activations(const NetworkSpec& net, const Parameters& start,
                                          Precision weight_bits, const Dataset& data,
                                          const StrategyConfig& cfg) {
    cfg.validate();
    const PrecisionAssignment a =
        uniform_assignment(net, weight_bits, Precision{0});  // activations stay float
    FinetuneResult res{start, {}};
    Rng rng(mix_seed(cfg.seed, 0xF7));
    DivergenceMonitor monitor(cfg.divergence_factor);
    int64_t step = 0;
    train_stage(net, res.params, a, data, all_layers_mask(net), cfg.epochs, 0, cfg, rng,
                step, res.log, monitor);
    return res;
}

FinetuneResult finetune_top_layers(const NetworkSpec& net, const Parameters& start,
                                   const PrecisionAssignment& assign, const Dataset& data,
                                   const StrategyConfig& cfg) {
    cfg.validate();
    if (cfg.top_k_layers >= net.num_layers())
        throw std::invalid_argument("top_k_layers must be smaller than the layer count");
    PrecisionAssignment a = assign;
    calibrate_activations(a, net, start, calibration_batch(data, cfg.calib_samples));
    std::set<int> mask;
    for (int l = net.num_layers() - cfg.top_k_layers; l < net.num_layers(); ++l) mask.insert(l);
    FinetuneResult res{start, {}};
    Rng rng(mix_seed(cfg.seed, 0xF7));
    DivergenceMonitor monitor(cfg.divergence_factor);
    int64_t step = 0;
    train_stage(net, res.params, a, data, mask, cfg.epochs, 0, cfg, rng, step, res.log, monitor);
    return res;
}

FinetuneResult finetune_bottom_up(const NetworkSpec& net, const Parameters& start,
                                  const PrecisionAssignment& assign, const Dataset& data,
                                  const PhasePlan& plan, const StrategyConfig& cfg) {
    cfg.validate();
    plan.validate(net.num_layers());
    PrecisionAssignment target = assign;
    calibrate_activations(target, net, start, calibration_batch(data, cfg.calib_samples));
    FinetuneResult res{start, {}};
    Rng rng(mix_seed(cfg.seed, 0xF7));
    int64_t step = 0;
    for (size_t p = 0; p < plan.phases.size(); ++p) {
        const Phase& phase = plan.phases[p];
        const PrecisionAssignment pa = phase_assignment(target, phase);
        const std::set<int> mask{phase.trainable_layer};
        // Each phase is its own fine-tuning stage: the divergence baseline
        // restarts with it (the loss scale changes as activations switch to
        // fixed point).
        DivergenceMonitor monitor(cfg.divergence_factor);
        if (!train_stage(net, res.params, pa, data, mask, phase.epochs, int(p) + 1, cfg, rng,
                         step, res.log, monitor))
            break;
    }
    return res;
}

}  // namespace fixnet
