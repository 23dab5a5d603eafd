#pragma once

#include <map>
#include <optional>
#include <vector>

#include "lmc/tensor.hpp"

namespace lmc {

// Batch sums of per-example contribution scores and their ratio.
struct ContributionStats {
    double s_v_sum = 0.0;
    double s_t_sum = 0.0;
};

enum class ModulationMode { VisualOnly, Symmetric };

inline const char* modulation_mode_name(ModulationMode m) {
    return m == ModulationMode::VisualOnly ? "visual_only" : "symmetric";
}

// Per-task modulation bookkeeping: the batch coefficients recorded for the
// running task and the averaged coefficient of the finished one.
struct ModulationState {
    double alpha = 0.5;
    ModulationMode mode = ModulationMode::Symmetric;
    std::vector<double> g_history;
    std::optional<double> G_prev;
};

// s_i = softmax(partial logits of one modality)[true label of i], per example.
// Partial logits are 1 x C rows from the modality-split head output.
std::pair<std::vector<double>, std::vector<double>> contribution_scores(
    const std::vector<Tensor>& partial_logits_v, const std::vector<Tensor>& partial_logits_t,
    const std::vector<int>& labels);

ContributionStats accumulate(const std::vector<double>& s_v, const std::vector<double>& s_t);

// gamma = sum s^t / sum s^v
double ratio(const ContributionStats& stats);

// g = 1 - tanh(alpha * gamma) for gamma > 1, else 1.
double coefficient(double gamma, double alpha);

// Batch coefficient under the configured mode. In symmetric mode the ratio is
// first folded to the dominant-over-weaker side.
double batch_coefficient(const ModulationState& state, double gamma);

void record_coefficient(ModulationState& state, double g);

// Mean of the recorded per-batch coefficients; clears the history and stores
// the result as G_prev for the next task.
double finish_task(ModulationState& state);

// Per-tag scales for one update. Task 1 uses the current-batch coefficient;
// later tasks reuse the previous task's averaged coefficient for every batch.
// visual_only mode always slows the visual encoder; symmetric mode slows
// whichever modality currently dominates.
std::map<Modality, double> modulated_scales(const ModulationState& state, double gamma,
                                            int task_index);

}  // namespace lmc
