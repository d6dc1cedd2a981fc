#pragma once

#include <cmath>
#include <vector>

#include "facet/core/error.hpp"
#include "facet/nn/layers.hpp"

namespace facet::nn {

// Adam with optional global-norm gradient clipping. Skips parameters marked
// non-trainable. Deterministic: plain loops, fixed order.
template <class T>
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables clipping
    long long t = 0;

    void step(const std::vector<Parameter<T>*>& ps) {
        double scale = 1.0;
        if (clip_norm > 0) {
            double n2 = 0;
            for (auto* p : ps) {
                if (!p->trainable) continue;
                for (T g : *p->grad.store) n2 += static_cast<double>(g) * g;
            }
            double n = std::sqrt(n2);
            if (n > clip_norm) scale = clip_norm / n;
        }
        ++t;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto* p : ps) {
            if (!p->trainable) continue;
            for (long long i = 0; i < p->value.numel(); ++i) {
                double g = static_cast<double>(p->grad[i]) * scale;
                double m = beta1 * p->m[i] + (1 - beta1) * g;
                double v = beta2 * p->v[i] + (1 - beta2) * g * g;
                p->m[i] = static_cast<T>(m);
                p->v[i] = static_cast<T>(v);
                p->value[i] -= static_cast<T>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
            }
        }
    }
};

}  // namespace facet::nn
