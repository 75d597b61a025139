// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fixnet/dataset.hpp"
#include "fixnet/qforward.hpp"

namespace fixnet {

enum class Strategy { None, Vanilla, P1, P2, P3 };

std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& s);

struct StrategyConfig {
    Strategy strategy = Strategy::Vanilla;
    double lr = 0.01;
    int epochs = 2;            // total epochs (per phase for the bottom-up schedule)
    int batch_size = 32;
    int top_k_layers = 1;      // layers fine-tuned by the top-layers strategy
    double divergence_factor = 3.0;
    int calib_samples = 256;
    uint64_t seed = 1;
    bool quantize_master = false;  // ablation: store master weights in fixed point

    void validate() const;
};

struct TrainLogRow {
    int64_t step = 0;
    int phase = 0;   // 0 outside the bottom-up schedule, else 1-based
    double loss = 0.0;
    double lr = 0.0;
    std::string trainable;  // "all" or semicolon-joined 1-based layer indices
};

/// Loss divergence is an expected experimental outcome, recorded rather than
/// raised: non-finite loss, or the trailing mean exceeding factor x its value
/// at fine-tuning start for 200 consecutive steps.
struct TrainLog {
    std::vector<TrainLogRow> rows;
    bool diverged = false;
    int64_t divergence_step = -1;

    void write_csv(const std::string& path) const;
};

struct FinetuneResult {
    Parameters params;
    TrainLog log;
};

/// Implements the divergence criterion: a non-finite loss diverges at once;
/// otherwise the trailing window mean must exceed factor x the mean of the
/// first window for 200 consecutive steps.
class DivergenceMonitor {
  public:
    explicit DivergenceMonitor(double factor) : factor_(factor) {}

    /// Returns true once the run counts as diverged.
    bool observe(double loss);

    static constexpr size_t kWindow = 20;
    static constexpr int kStreak = 200;

  private:
    double factor_;
    std::vector<double> recent_;
    double baseline_ = 0.0;
    int64_t seen_ = 0;
    int streak_ = 0;
};

/// One fine-tuning phase of the bottom-up schedule (all indices 0-based).
struct Phase {
    int trainable_layer = 0;
    std::vector<int> fixed_act_layers;
    int epochs = 1;
};

struct PhasePlan {
    std::vector<Phase> phases;
    /// Throws unless the plan is the strict bottom-to-top single sweep:
    /// num_layers-1 phases, phase p trains layer p+1, fixed-point activation
    /// sets {1..p} growing by one, layer 1 never trainable.
    void validate(int num_layers) const;
};

PhasePlan build_phase_plan(int num_layers, int epochs_per_phase);

/// Fine-tunes every layer with the full target assignment active.
FinetuneResult finetune_vanilla(const NetworkSpec& net, const Parameters& start,
                                const PrecisionAssignment& assign, const Dataset& data,
                                const StrategyConfig& cfg);

/// Quantized weights, float activations; the result can then be evaluated
/// under any activation width.
FinetuneResult finetune_float_activations(const NetworkSpec& net, const Parameters& start,
                                          Precision weight_bits, const Dataset& data,
                                          const StrategyConfig& cfg);

/// Fine-tunes only the top cfg.top_k_layers layers at full target precision.
FinetuneResult finetune_top_layers(const NetworkSpec& net, const Parameters& start,
                                   const PrecisionAssignment& assign, const Dataset& data,
                                   const StrategyConfig& cfg);

/// Bottom-to-top schedule: one trainable layer per phase, fixed-point
/// activations enabled from the bottom up, so the gradients reaching the
/// trainable layer always come through float activations.
FinetuneResult finetune_bottom_up(const NetworkSpec& net, const Parameters& start,
                                  const PrecisionAssignment& assign, const Dataset& data,
                                  const PhasePlan& plan, const StrategyConfig& cfg);

/// Per-phase assignment: target weight widths everywhere, target activation
/// formats only for the layers in `phase.fixed_act_layers`, float above.
PrecisionAssignment phase_assignment(const PrecisionAssignment& target, const Phase& phase);

}  // namespace fixnet
