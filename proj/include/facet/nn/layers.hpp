#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/nn/graph.hpp"
#include "facet/nn/ops.hpp"

namespace facet::nn {

// A named trainable tensor plus its gradient and Adam moments. Gradient
// storage is shared with every graph leaf created from it, so backward
// accumulates here directly.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value, grad, m, v;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> init)
        : name(std::move(n)),
          value(std::move(init)),
          grad(Tensor<T>::zeros(value.shape)),
          m(Tensor<T>::zeros(value.shape)),
          v(Tensor<T>::zeros(value.shape)) {}
};

template <class T>
Var<T> pvar(Parameter<T>& p) {
    auto n = leaf(p.value, p.trainable);
    n->grad = p.grad;  // same shape as value, so grad_ref() keeps this storage
    return n;
}

enum class Init { he, xavier, zero };

template <class T>
Tensor<T> init_tensor(std::vector<int> shape, Init init, int fan_in, int fan_out, Rng& rng) {
    Tensor<T> t(std::move(shape));
    if (init == Init::zero) return t;
    if (init == Init::he) {
        double s = std::sqrt(2.0 / fan_in);
        for (auto& v : *t.store) v = static_cast<T>(s * rng.normal());
    } else {
        double b = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : *t.store) v = static_cast<T>(b * (2.0 * rng.uniform() - 1.0));
    }
    return t;
}

template <class T>
struct Conv2dLayer {
    Parameter<T> W, b;
    int stride = 1;

    Conv2dLayer() = default;
    Conv2dLayer(const std::string& name, int in_c, int out_c, int k, int stride_, Init init,
                Rng& rng)
        : W(name + ".W", init_tensor<T>({out_c, in_c, k, k}, init, in_c * k * k, out_c * k * k,
                                        rng)),
          b(name + ".b", Tensor<T>::zeros({out_c})),
          stride(stride_) {}

    Var<T> operator()(const Var<T>& x) { return conv2d(x, pvar(W), pvar(b), stride); }

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&W);
        out.push_back(&b);
    }
};

template <class T>
struct LinearLayer {
    Parameter<T> W, b;

    LinearLayer() = default;
    LinearLayer(const std::string& name, int in, int out, Init init, Rng& rng)
        : W(name + ".W", init_tensor<T>({out, in}, init, in, out, rng)),
          b(name + ".b", Tensor<T>::zeros({out})) {}

    Var<T> operator()(const Var<T>& x) { return linear(pvar(W), x, pvar(b)); }

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&W);
        out.push_back(&b);
    }
};

template <class T>
void set_trainable(std::vector<Parameter<T>*>& ps, bool trainable) {
    for (auto* p : ps) p->trainable = trainable;
}

template <class T>
void zero_grads(std::vector<Parameter<T>*>& ps) {
    for (auto* p : ps) std::fill(p->grad.store->begin(), p->grad.store->end(), T(0));
}

}  // namespace facet::nn
