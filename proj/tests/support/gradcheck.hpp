#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "lmc/tensor.hpp"

namespace lmc::testsupport {

// Central finite differences against analytic gradients.
//
// `loss` must rebuild the forward graph from the current parameter values and
// return the loss value. Analytic grads are taken from the parameters after
// `backward_pass` runs (which must zero, forward and backward).
struct GradCheck {
    double step = 1e-6;
    double denom_floor = 1e-3;

    double max_rel_err(const std::function<double()>& loss,
                       const std::function<void()>& backward_pass,
                       std::vector<lmc::Parameter*> params, std::mt19937_64& rng,
                       int coords_per_param = 4) const {
        for (auto* p : params) p->zero_grad();
        backward_pass();
        std::vector<lmc::Tensor> analytic;
        analytic.reserve(params.size());
        for (auto* p : params) analytic.push_back(p->grad);

        double worst = 0.0;
        for (size_t pi = 0; pi < params.size(); ++pi) {
            lmc::Parameter& p = *params[pi];
            int n = static_cast<int>(p.value.data.size());
            int checks = std::min(coords_per_param, n);
            for (int c = 0; c < checks; ++c) {
                int j = static_cast<int>(rng() % n);
                double saved = p.value.data[j];
                p.value.data[j] = saved + step;
                double lp = loss();
                p.value.data[j] = saved - step;
                double lm = loss();
                p.value.data[j] = saved;
                double fd = (lp - lm) / (2.0 * step);
                double an = analytic[pi].data[j];
                double rel = std::abs(fd - an) /
                             std::max({std::abs(fd), std::abs(an), denom_floor});
                worst = std::max(worst, rel);
            }
        }
        for (auto* p : params) p->zero_grad();
        return worst;
    }
};

}  // namespace lmc::testsupport
