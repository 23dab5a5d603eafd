#include "lmc/balance.hpp"

#include <cmath>
#include <numeric>

namespace lmc {

namespace {

double label_probability(const Tensor& logits, int label) {
    int c = logits.cols();
    if (logits.rows() != 1) throw DimError("contribution_scores: partial logits must be a single row");
    if (label < 0 || label >= c)
        throw LabelError("contribution_scores: label " + std::to_string(label) + " out of range [0," +
                         std::to_string(c) + ")");
    double mx = logits.data[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.data[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(logits.data[j] - mx);
    return std::exp(logits.data[label] - mx) / sum;
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> contribution_scores(
    const std::vector<Tensor>& partial_logits_v, const std::vector<Tensor>& partial_logits_t,
    const std::vector<int>& labels) {
    if (partial_logits_v.size() != labels.size() || partial_logits_t.size() != labels.size())
        throw InputError("contribution_scores: list length mismatch");
    std::vector<double> s_v, s_t;
    s_v.reserve(labels.size());
    s_t.reserve(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        s_v.push_back(label_probability(partial_logits_v[i], labels[i]));
        s_t.push_back(label_probability(partial_logits_t[i], labels[i]));
    }
    return {std::move(s_v), std::move(s_t)};
}

ContributionStats accumulate(const std::vector<double>& s_v, const std::vector<double>& s_t) {
    ContributionStats st;
    st.s_v_sum = std::accumulate(s_v.begin(), s_v.end(), 0.0);
    st.s_t_sum = std::accumulate(s_t.begin(), s_t.end(), 0.0);
    return st;
}

double ratio(const ContributionStats& stats) {
    if (!(stats.s_v_sum > 0.0))
        throw StateError("degenerate batch: visual contribution sum is zero");
    return stats.s_t_sum / stats.s_v_sum;
}

double coefficient(double gamma, double alpha) {
    if (!(alpha > 0.0)) throw ConfigError("modulation alpha must be positive");
    if (gamma > 1.0) return 1.0 - std::tanh(alpha * gamma);
    return 1.0;
}

double batch_coefficient(const ModulationState& state, double gamma) {
    if (state.mode == ModulationMode::VisualOnly) return coefficient(gamma, state.alpha);
    double dominant = gamma > 1.0 ? gamma : (gamma > 0.0 ? 1.0 / gamma : 1.0);
    return coefficient(dominant, state.alpha);
}

void record_coefficient(ModulationState& state, double g) {
    if (!(g > 0.0 && g <= 1.0))
        throw StateError("modulation coefficient " + std::to_string(g) + " outside (0, 1]");
    state.g_history.push_back(g);
}

double finish_task(ModulationState& state) {
    if (state.g_history.empty()) throw StateError("finish_task: no coefficients recorded");
    double sum = std::accumulate(state.g_history.begin(), state.g_history.end(), 0.0);
    double G = sum / static_cast<double>(state.g_history.size());
    state.g_history.clear();
    state.G_prev = G;
    return G;
}

std::map<Modality, double> modulated_scales(const ModulationState& state, double gamma,
                                            int task_index) {
    if (task_index < 1) throw ConfigError("task index must be 1-based");
    double g;
    if (task_index == 1) {
        g = batch_coefficient(state, gamma);
    } else {
        if (!state.G_prev)
            throw StateError("modulated_scales: no averaged coefficient from the previous task");
        g = *state.G_prev;
    }

    std::map<Modality, double> scales;
    if (state.mode == ModulationMode::VisualOnly) {
        scales[Modality::Visual] = g;
    } else {
        if (gamma > 1.0)
            scales[Modality::Textual] = g;
        else if (gamma < 1.0)
            scales[Modality::Visual] = g;
    }
    return scales;
}

}  // namespace lmc
