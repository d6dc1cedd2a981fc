#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <vector>

#include "facet/core/error.hpp"

namespace facet {

// Dense row-major tensor (last dimension fastest). Storage is shared between
// copies; clone() makes it private. Image layout is CHW, batches NCHW,
// flow fields are channel 0 = x offset, channel 1 = y offset.
template <class T>
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<T>> store;

    Tensor() : store(std::make_shared<std::vector<T>>()) {}

    explicit Tensor(std::vector<int> s)
        : shape(std::move(s)), store(std::make_shared<std::vector<T>>(count(shape), T(0))) {}

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.store->begin(), t.store->end(), v);
        return t;
    }

    static Tensor from(std::vector<int> s, std::vector<T> vals) {
        if (count(s) != static_cast<long long>(vals.size()))
            throw Error(errc::shape_mismatch, "tensor init size does not match shape");
        Tensor t;
        t.shape = std::move(s);
        t.store = std::make_shared<std::vector<T>>(std::move(vals));
        return t;
    }

    static long long count(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) {
            if (d < 0) throw Error(errc::shape_mismatch, "negative dimension");
            n *= d;
        }
        return n;
    }

    long long numel() const { return static_cast<long long>(store->size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(i); }

    T* data() { return store->data(); }
    const T* data() const { return store->data(); }

    T& operator[](long long i) { return (*store)[i]; }
    const T& operator[](long long i) const { return (*store)[i]; }

    // Indexed access for up to 4 dims; no stride tricks, plain row-major.
    T& at(int i) { return (*store)[i]; }
    T& at(int i, int j) { return (*store)[static_cast<long long>(i) * shape[1] + j]; }
    const T& at(int i, int j) const { return (*store)[static_cast<long long>(i) * shape[1] + j]; }
    T& at(int i, int j, int k) {
        return (*store)[(static_cast<long long>(i) * shape[1] + j) * shape[2] + k];
    }
    const T& at(int i, int j, int k) const {
        return (*store)[(static_cast<long long>(i) * shape[1] + j) * shape[2] + k];
    }
    T& at(int i, int j, int k, int l) {
        return (*store)[((static_cast<long long>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    const T& at(int i, int j, int k, int l) const {
        return (*store)[((static_cast<long long>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.store = std::make_shared<std::vector<T>>(*store);
        return t;
    }

    Tensor reshaped(std::vector<int> s) const {
        if (count(s) != numel()) throw Error(errc::shape_mismatch, "reshape element count mismatch");
        Tensor t;
        t.shape = std::move(s);
        t.store = store;
        return t;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.shape = shape;
        t.store = std::make_shared<std::vector<U>>(store->size());
        for (size_t i = 0; i < store->size(); ++i) (*t.store)[i] = static_cast<U>((*store)[i]);
        return t;
    }

    bool all_finite() const {
        for (T v : *store)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <class T>
double mean_abs(const Tensor<T>& t) {
    if (t.numel() == 0) return 0.0;
    double s = 0;
    for (T v : *t.store) s += std::abs(static_cast<double>(v));
    return s / static_cast<double>(t.numel());
}

template <class T>
double mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw Error(errc::shape_mismatch, "mean_abs_diff shape mismatch");
    double s = 0;
    for (long long i = 0; i < a.numel(); ++i)
        s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    return a.numel() ? s / static_cast<double>(a.numel()) : 0.0;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw Error(errc::shape_mismatch, "max_abs_diff shape mismatch");
    double m = 0;
    for (long long i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace facet
