#pragma once

#include <optional>

#include "lmc/encoder.hpp"
#include "lmc/tensor.hpp"

namespace lmc {

struct DistillConfig {
    double lambda = 1.0;
    // distill post-softmax maps instead of the prescaled ones
    bool post_softmax = false;

    void validate() const {
        if (lambda < 0.0) throw ConfigError("distill lambda must be non-negative");
    }
};

// Sum over the query (height) axis: one value per key position.
Tensor pool_attention(const Tensor& map);
Val pool_attention(Tape& tape, Val map);

// L2 norm of ReLU(old - new): only attention mass missing from the new map
// is penalized.
double asym_delta(const Tensor& old_pooled, const Tensor& new_pooled);
Val asym_delta(Tape& tape, const Tensor& old_pooled, Val new_pooled);

// Sum of asym_delta over streams, interaction layers, heads and examples,
// divided by the batch size. Differentiable with respect to the live maps
// only; the old snapshot enters as constants.
Val attention_distill_loss(Tape& tape, const AttentionSnapshot& old_snap,
                           const LiveAttention& new_attn, bool post_softmax = false);

// L_all = lambda * L_AD + L_CE (ad absent on the first task).
Val total_loss(Tape& tape, Val ce, std::optional<Val> ad, double lambda);

}  // namespace lmc
