#pragma once

#include <cmath>
#include <vector>

#include "facet/core/tensor.hpp"
#include "facet/nn/graph.hpp"

// Central-difference gradient oracle. `build` maps a vector of graph leaves
// (one per input tensor) to a scalar node; it is re-invoked for every
// perturbed evaluation, so any randomness must be captured as fixed tensors.
// Inputs are probed in double precision: float32 finite differences are too
// noisy to certify a 1e-4 relative tolerance.

namespace gradcheck {

template <class F>
double eval_scalar(F& build, std::vector<facet::Tensor<double>>& inputs) {
    std::vector<facet::nn::Var<double>> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(facet::nn::leaf(t, false));
    return build(vars)->val[0];
}

// Returns the worst per-element relative error between analytic and numeric
// gradients, with the denominator floored at `floor_denom` so exact zeros
// compare by absolute error.
template <class F>
double max_rel_err(F build, std::vector<facet::Tensor<double>> inputs, double h = 1e-5,
                   double floor_denom = 1e-3) {
    std::vector<facet::nn::Var<double>> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(facet::nn::leaf(t, true));
    auto root = build(vars);
    facet::nn::backward(root);
    std::vector<facet::Tensor<double>> analytic;
    for (auto& v : vars) analytic.push_back(v->grad_ref().clone());

    double worst = 0;
    for (size_t k = 0; k < inputs.size(); ++k) {
        for (long long i = 0; i < inputs[k].numel(); ++i) {
            double orig = inputs[k][i];
            inputs[k][i] = orig + h;
            double fp = eval_scalar(build, inputs);
            inputs[k][i] = orig - h;
            double fm = eval_scalar(build, inputs);
            inputs[k][i] = orig;
            double num = (fp - fm) / (2 * h);
            double a = analytic[k][i];
            double err =
                std::abs(a - num) / std::max({floor_denom, std::abs(a), std::abs(num)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace gradcheck
