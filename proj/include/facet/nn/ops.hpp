#pragma once

#include <Eigen/Core>

#include <cmath>
#include <utility>
#include <vector>

#include "facet/core/error.hpp"
#include "facet/core/image_ops.hpp"
#include "facet/core/tensor.hpp"
#include "facet/nn/graph.hpp"

namespace facet::nn {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapM = Eigen::Map<const MatRM<T>>;

// ---- elementwise -----------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val)) throw Error(errc::shape_mismatch, "add shape mismatch");
    Tensor<T> out(a->val.shape);
    for (long long i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (int k = 0; k < 2; ++k)
            if (self.inputs[k]->requires_grad) {
                Tensor<T>& g = self.inputs[k]->grad_ref();
                for (long long i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
            }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val)) throw Error(errc::shape_mismatch, "sub shape mismatch");
    Tensor<T> out(a->val.shape);
    for (long long i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        if (self.inputs[0]->requires_grad) {
            Tensor<T>& g = self.inputs[0]->grad_ref();
            for (long long i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
            Tensor<T>& g = self.inputs[1]->grad_ref();
            for (long long i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val)) throw Error(errc::shape_mismatch, "mul shape mismatch");
    Tensor<T> out(a->val.shape);
    for (long long i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        const Tensor<T>& av = self.inputs[0]->val;
        const Tensor<T>& bv = self.inputs[1]->val;
        if (self.inputs[0]->requires_grad) {
            Tensor<T>& g = self.inputs[0]->grad_ref();
            for (long long i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (self.inputs[1]->requires_grad) {
            Tensor<T>& g = self.inputs[1]->grad_ref();
            for (long long i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

// out = a * x + b, scalar coefficients.
template <class T>
Var<T> scale_shift(const Var<T>& x, double a, double b = 0.0) {
    Tensor<T> out(x->val.shape);
    for (long long i = 0; i < out.numel(); ++i)
        out[i] = static_cast<T>(a * x->val[i] + b);
    return make_node<T>(std::move(out), {x}, [a](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        for (long long i = 0; i < g.numel(); ++i) g[i] += static_cast<T>(a) * self.grad[i];
    });
}

template <class T>
Var<T> scale(const Var<T>& x, double a) {
    return scale_shift(x, a, 0.0);
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out(x->val.shape);
    for (long long i = 0; i < out.numel(); ++i) out[i] = x->val[i] > T(0) ? x->val[i] : T(0);
    return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        const Tensor<T>& xv = self.inputs[0]->val;
        for (long long i = 0; i < g.numel(); ++i)
            if (xv[i] > T(0)) g[i] += self.grad[i];
    });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, double slope = 0.2) {
    Tensor<T> out(x->val.shape);
    for (long long i = 0; i < out.numel(); ++i)
        out[i] = x->val[i] > T(0) ? x->val[i] : static_cast<T>(slope) * x->val[i];
    return make_node<T>(std::move(out), {x}, [slope](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        const Tensor<T>& xv = self.inputs[0]->val;
        for (long long i = 0; i < g.numel(); ++i)
            g[i] += (xv[i] > T(0) ? T(1) : static_cast<T>(slope)) * self.grad[i];
    });
}

template <class T>
Var<T> tanh_op(const Var<T>& x) {
    Tensor<T> out(x->val.shape);
    for (long long i = 0; i < out.numel(); ++i) out[i] = std::tanh(x->val[i]);
    return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        for (long long i = 0; i < g.numel(); ++i)
            g[i] += (T(1) - self.val[i] * self.val[i]) * self.grad[i];
    });
}

template <class T>
Var<T> exp_op(const Var<T>& x) {
    Tensor<T> out(x->val.shape);
    for (long long i = 0; i < out.numel(); ++i) out[i] = std::exp(x->val[i]);
    return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        for (long long i = 0; i < g.numel(); ++i) g[i] += self.val[i] * self.grad[i];
    });
}

// clamp(x + 0.5, 0, 1): cheap squashing onto [0,1] whose neutral point (x = 0)
// lands at 0.5 with unit slope, so zero-initialized heads start at mid-gray
// and do not saturate the way a sigmoid's tails would.
template <class T>
Var<T> squash01(const Var<T>& x) {
    Tensor<T> out(x->val.shape);
    for (long long i = 0; i < out.numel(); ++i)
        out[i] = std::min(std::max(x->val[i] + T(0.5), T(0)), T(1));
    return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        const Tensor<T>& xv = self.inputs[0]->val;
        for (long long i = 0; i < g.numel(); ++i) {
            T s = xv[i] + T(0.5);
            if (s > T(0) && s < T(1)) g[i] += self.grad[i];
        }
    });
}

// Identity forward, no gradient back.
template <class T>
Var<T> detach(const Var<T>& x) {
    return constant(x->val.clone());
}

// Identity forward, gradient multiplied by -lambda: adversarial branches
// descend while the shared trunk ascends.
template <class T>
Var<T> grad_reverse(const Var<T>& x, double lambda) {
    return make_node<T>(x->val.clone(), {x}, [lambda](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        for (long long i = 0; i < g.numel(); ++i)
            g[i] -= static_cast<T>(lambda) * self.grad[i];
    });
}

// ---- shape -----------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& x, std::vector<int> shape) {
    Tensor<T> out = x->val.reshaped(shape).clone();
    return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        for (long long i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

// Slice along the first axis (channels of CHW, elements of a vector).
template <class T>
Var<T> slice0(const Var<T>& x, int begin, int count) {
    if (x->val.ndim() < 1 || begin < 0 || count <= 0 || begin + count > x->val.dim(0))
        throw Error(errc::bounds, "slice0 out of range");
    long long inner = x->val.numel() / x->val.dim(0);
    std::vector<int> oshape = x->val.shape;
    oshape[0] = count;
    Tensor<T> out(oshape);
    std::copy_n(x->val.data() + begin * inner, count * inner, out.data());
    return make_node<T>(std::move(out), {x}, [begin, inner](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        for (long long i = 0; i < self.grad.numel(); ++i)
            g[begin * inner + i] += self.grad[i];
    });
}

// Concatenate along the first axis; trailing dims must match.
template <class T>
Var<T> concat0(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw Error(errc::bad_args, "concat0 of nothing");
    std::vector<int> oshape = xs[0]->val.shape;
    long long inner = xs[0]->val.numel() / std::max(1, xs[0]->val.dim(0));
    int total = 0;
    for (const auto& x : xs) {
        std::vector<int> s = x->val.shape;
        if (s.size() != oshape.size() ||
            !std::equal(s.begin() + 1, s.end(), oshape.begin() + 1))
            throw Error(errc::shape_mismatch, "concat0 trailing dims differ");
        total += s[0];
    }
    oshape[0] = total;
    Tensor<T> out(oshape);
    long long off = 0;
    for (const auto& x : xs) {
        std::copy_n(x->val.data(), x->val.numel(), out.data() + off);
        off += x->val.numel();
    }
    return make_node<T>(std::move(out), xs, [inner](Node<T>& self) {
        long long off = 0;
        for (auto& in : self.inputs) {
            long long n = in->val.numel();
            if (in->requires_grad) {
                Tensor<T>& g = in->grad_ref();
                for (long long i = 0; i < n; ++i) g[i] += self.grad[off + i];
            }
            off += n;
        }
        (void)inner;
    });
}

// ---- reductions and losses -------------------------------------------------

template <class T>
Var<T> sum_all(const Var<T>& x) {
    T s = 0;
    for (long long i = 0; i < x->val.numel(); ++i) s += x->val[i];
    return make_node<T>(Tensor<T>::from({1}, {s}), {x}, [](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        for (long long i = 0; i < g.numel(); ++i) g[i] += self.grad[0];
    });
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x->val.numel()));
}

// Mean |a - b| over all elements. Subgradient 0 at ties.
template <class T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val)) throw Error(errc::shape_mismatch, "l1_loss shape mismatch");
    double s = 0;
    for (long long i = 0; i < a->val.numel(); ++i)
        s += std::abs(static_cast<double>(a->val[i]) - static_cast<double>(b->val[i]));
    T v = static_cast<T>(s / static_cast<double>(a->val.numel()));
    return make_node<T>(Tensor<T>::from({1}, {v}), {a, b}, [](Node<T>& self) {
        const Tensor<T>& av = self.inputs[0]->val;
        const Tensor<T>& bv = self.inputs[1]->val;
        T w = self.grad[0] / static_cast<T>(av.numel());
        for (long long i = 0; i < av.numel(); ++i) {
            T s = av[i] > bv[i] ? w : (av[i] < bv[i] ? -w : T(0));
            if (self.inputs[0]->requires_grad) self.inputs[0]->grad_ref()[i] += s;
            if (self.inputs[1]->requires_grad) self.inputs[1]->grad_ref()[i] -= s;
        }
    });
}

// Sum of squared differences (latent distances).
template <class T>
Var<T> sum_sq_diff(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val))
        throw Error(errc::shape_mismatch, "sum_sq_diff shape mismatch");
    double s = 0;
    for (long long i = 0; i < a->val.numel(); ++i) {
        double d = static_cast<double>(a->val[i]) - static_cast<double>(b->val[i]);
        s += d * d;
    }
    return make_node<T>(Tensor<T>::from({1}, {static_cast<T>(s)}), {a, b}, [](Node<T>& self) {
        const Tensor<T>& av = self.inputs[0]->val;
        const Tensor<T>& bv = self.inputs[1]->val;
        T w = T(2) * self.grad[0];
        for (long long i = 0; i < av.numel(); ++i) {
            T d = w * (av[i] - bv[i]);
            if (self.inputs[0]->requires_grad) self.inputs[0]->grad_ref()[i] += d;
            if (self.inputs[1]->requires_grad) self.inputs[1]->grad_ref()[i] -= d;
        }
    });
}

// Mean squared error.
template <class T>
Var<T> mse_loss(const Var<T>& a, const Var<T>& b) {
    return scale(sum_sq_diff(a, b), 1.0 / static_cast<double>(a->val.numel()));
}

// Sum of squares of one tensor.
template <class T>
Var<T> sum_sq(const Var<T>& x) {
    double s = 0;
    for (long long i = 0; i < x->val.numel(); ++i)
        s += static_cast<double>(x->val[i]) * static_cast<double>(x->val[i]);
    return make_node<T>(Tensor<T>::from({1}, {static_cast<T>(s)}), {x}, [](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        const Tensor<T>& xv = self.inputs[0]->val;
        T w = T(2) * self.grad[0];
        for (long long i = 0; i < g.numel(); ++i) g[i] += w * xv[i];
    });
}

// sqrt(x + eps) on a scalar node. eps keeps the zero-flow start finite; the
// chain rule through a sum of squares still yields an exactly zero gradient
// there because d(sum x^2)/dx vanishes first.
template <class T>
Var<T> sqrt_op(const Var<T>& x, double eps = 1e-12) {
    if (x->val.numel() != 1) throw Error(errc::shape_mismatch, "sqrt_op expects scalar");
    T v = static_cast<T>(std::sqrt(static_cast<double>(x->val[0]) + eps));
    return make_node<T>(Tensor<T>::from({1}, {v}), {x}, [](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        self.inputs[0]->grad_ref()[0] += self.grad[0] / (T(2) * self.val[0]);
    });
}

// KL(q || N(0, I)) for diagonal gaussians, summed over dimensions:
// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar).
template <class T>
Var<T> kl_unit(const Var<T>& mu, const Var<T>& logvar) {
    if (!mu->val.same_shape(logvar->val))
        throw Error(errc::shape_mismatch, "kl_unit shape mismatch");
    double s = 0;
    for (long long i = 0; i < mu->val.numel(); ++i) {
        double m = mu->val[i], lv = logvar->val[i];
        s += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
    }
    return make_node<T>(Tensor<T>::from({1}, {static_cast<T>(s)}), {mu, logvar},
                        [](Node<T>& self) {
                            const Tensor<T>& m = self.inputs[0]->val;
                            const Tensor<T>& lv = self.inputs[1]->val;
                            T w = self.grad[0];
                            for (long long i = 0; i < m.numel(); ++i) {
                                if (self.inputs[0]->requires_grad)
                                    self.inputs[0]->grad_ref()[i] += w * m[i];
                                if (self.inputs[1]->requires_grad)
                                    self.inputs[1]->grad_ref()[i] +=
                                        w * T(0.5) * (std::exp(lv[i]) - T(1));
                            }
                        });
}

// z = mu + exp(0.5 * logvar) * eps with a caller-supplied draw, so a loss is
// a deterministic function of (inputs, noise) and finite differences see the
// same noise.
template <class T>
Var<T> reparam(const Var<T>& mu, const Var<T>& logvar, const Tensor<T>& eps) {
    return add(mu, mul(exp_op(scale(logvar, 0.5)), constant(eps.clone())));
}

// Cross entropy of softmax(logits) against a hard target index.
template <class T>
Var<T> softmax_ce(const Var<T>& logits, int target) {
    if (logits->val.ndim() != 1) throw Error(errc::shape_mismatch, "softmax_ce expects vector");
    int n = logits->val.dim(0);
    if (target < 0 || target >= n) throw Error(errc::bounds, "softmax_ce target out of range");
    double mx = logits->val[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(logits->val[i]));
    double lse = 0;
    for (int i = 0; i < n; ++i) lse += std::exp(static_cast<double>(logits->val[i]) - mx);
    lse = std::log(lse) + mx;
    T loss = static_cast<T>(lse - static_cast<double>(logits->val[target]));
    return make_node<T>(Tensor<T>::from({1}, {loss}), {logits}, [target, lse](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        const Tensor<T>& l = self.inputs[0]->val;
        T w = self.grad[0];
        for (int i = 0; i < l.dim(0); ++i) {
            T p = static_cast<T>(std::exp(static_cast<double>(l[i]) - lse));
            g[i] += w * (p - (i == target ? T(1) : T(0)));
        }
    });
}

// Weighted sum of scalar nodes; zero-weight terms are dropped.
template <class T>
Var<T> wsum(const std::vector<std::pair<double, Var<T>>>& terms) {
    Var<T> acc;
    for (const auto& [w, v] : terms) {
        if (w == 0.0) continue;
        Var<T> t = w == 1.0 ? v : scale(v, w);
        acc = acc ? add(acc, t) : t;
    }
    if (!acc) throw Error(errc::bad_args, "wsum of nothing");
    return acc;
}

// ---- linear algebra --------------------------------------------------------

// y = W x + b for a vector x; W is {out, in}, b is {out}.
template <class T>
Var<T> linear(const Var<T>& W, const Var<T>& x, const Var<T>& b) {
    if (W->val.ndim() != 2 || x->val.ndim() != 1 || b->val.ndim() != 1)
        throw Error(errc::shape_mismatch, "linear expects W{o,i} x{i} b{o}");
    int o = W->val.dim(0), in = W->val.dim(1);
    if (x->val.dim(0) != in || b->val.dim(0) != o)
        throw Error(errc::dim_mismatch, "linear dims disagree");
    Tensor<T> out({o});
    CMapM<T> Wm(W->val.data(), o, in);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xv(x->val.data(), in);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> yv(out.data(), o);
    yv.noalias() = Wm * xv;
    for (int i = 0; i < o; ++i) out[i] += b->val[i];
    return make_node<T>(std::move(out), {W, x, b}, [o, in](Node<T>& self) {
        CMapM<T> Wm(self.inputs[0]->val.data(), o, in);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xv(self.inputs[1]->val.data(), in);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> gy(self.grad.data(), o);
        if (self.inputs[0]->requires_grad) {
            MapM<T> gW(self.inputs[0]->grad_ref().data(), o, in);
            gW.noalias() += gy * xv.transpose();
        }
        if (self.inputs[1]->requires_grad) {
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gx(self.inputs[1]->grad_ref().data(),
                                                               in);
            gx.noalias() += Wm.transpose() * gy;
        }
        if (self.inputs[2]->requires_grad) {
            Tensor<T>& gb = self.inputs[2]->grad_ref();
            for (int i = 0; i < o; ++i) gb[i] += self.grad[i];
        }
    });
}

// ---- convolution -----------------------------------------------------------

template <class T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, Tensor<T>& cols, int oh,
            int ow) {
    int ic = x.dim(0), h = x.dim(1), w = x.dim(2);
    T* cp = cols.data();
    for (int c = 0; c < ic; ++c)
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                const T* plane = x.data() + static_cast<long long>(c) * h * w;
                for (int oy = 0; oy < oh; ++oy) {
                    int sy = oy * stride + dy - pad;
                    for (int ox = 0; ox < ow; ++ox) {
                        int sx = ox * stride + dx - pad;
                        *cp++ = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                    ? plane[static_cast<long long>(sy) * w + sx]
                                    : T(0);
                    }
                }
            }
}

template <class T>
void col2im_add(const Tensor<T>& cols, int kh, int kw, int stride, int pad, Tensor<T>& gx, int oh,
                int ow) {
    int ic = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
    const T* cp = cols.data();
    for (int c = 0; c < ic; ++c)
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                T* plane = gx.data() + static_cast<long long>(c) * h * w;
                for (int oy = 0; oy < oh; ++oy) {
                    int sy = oy * stride + dy - pad;
                    for (int ox = 0; ox < ow; ++ox, ++cp) {
                        int sx = ox * stride + dx - pad;
                        if (sy >= 0 && sy < h && sx >= 0 && sx < w)
                            plane[static_cast<long long>(sy) * w + sx] += *cp;
                    }
                }
            }
}

// 2-D convolution (cross-correlation) via im2col + GEMM. x is {ic,h,w},
// W {oc,ic,kh,kw}, b {oc}. The unfolded matrix is kept for the backward pass.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& W, const Var<T>& b, int stride = 1, int pad = -1) {
    if (x->val.ndim() != 3 || W->val.ndim() != 4 || b->val.ndim() != 1)
        throw Error(errc::shape_mismatch, "conv2d expects x{c,h,w} W{o,c,kh,kw} b{o}");
    int ic = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    int oc = W->val.dim(0), kh = W->val.dim(2), kw = W->val.dim(3);
    if (W->val.dim(1) != ic) throw Error(errc::dim_mismatch, "conv2d channel mismatch");
    if (b->val.dim(0) != oc) throw Error(errc::dim_mismatch, "conv2d bias mismatch");
    if (pad < 0) pad = kh / 2;  // "same" for odd kernels at stride 1
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (w + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw Error(errc::shape_mismatch, "conv2d empty output");

    int k = ic * kh * kw;
    Tensor<T> cols({k, oh * ow});
    im2col(x->val, kh, kw, stride, pad, cols, oh, ow);

    Tensor<T> out({oc, oh, ow});
    {
        CMapM<T> Wm(W->val.data(), oc, k);
        CMapM<T> Cm(cols.data(), k, oh * ow);
        MapM<T> Ym(out.data(), oc, oh * ow);
        Ym.noalias() = Wm * Cm;
    }
    for (int o = 0; o < oc; ++o) {
        T bv = b->val[o];
        T* plane = out.data() + static_cast<long long>(o) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) plane[i] += bv;
    }

    return make_node<T>(
        std::move(out), {x, W, b},
        [cols, kh, kw, stride, pad, oh, ow, k, oc](Node<T>& self) {
            CMapM<T> gY(self.grad.data(), oc, oh * ow);
            if (self.inputs[1]->requires_grad) {
                CMapM<T> Cm(cols.data(), k, oh * ow);
                MapM<T> gW(self.inputs[1]->grad_ref().data(), oc, k);
                gW.noalias() += gY * Cm.transpose();
            }
            if (self.inputs[2]->requires_grad) {
                Tensor<T>& gb = self.inputs[2]->grad_ref();
                for (int o = 0; o < oc; ++o) gb[o] += gY.row(o).sum();
            }
            if (self.inputs[0]->requires_grad) {
                Tensor<T> gcols({k, oh * ow});
                CMapM<T> Wm(self.inputs[1]->val.data(), oc, k);
                MapM<T> gC(gcols.data(), k, oh * ow);
                gC.noalias() = Wm.transpose() * gY;
                col2im_add(gcols, kh, kw, stride, pad, self.inputs[0]->grad_ref(), oh, ow);
            }
        });
}

// ---- spatial ---------------------------------------------------------------

template <class T>
Var<T> upsample_nearest2(const Var<T>& x) {
    if (x->val.ndim() != 3) throw Error(errc::shape_mismatch, "upsample_nearest2 expects CHW");
    int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    Tensor<T> out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out.at(ch, y, xx) = x->val.at(ch, y / 2, xx / 2);
    return make_node<T>(std::move(out), {x}, [c, h, w](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    g.at(ch, y / 2, xx / 2) += self.grad.at(ch, y, xx);
    });
}

// Differentiable backward warp, matching apply_warp's forward semantics.
// Gradients flow to both the image and the flow. The flow derivative is the
// analytic bilinear slope, zeroed where clamping pins the sample to the edge.
template <class T>
Var<T> grid_warp(const Var<T>& img, const Var<T>& flow) {
    if (img->val.ndim() != 3) throw Error(errc::shape_mismatch, "grid_warp expects CHW image");
    int c = img->val.dim(0), h = img->val.dim(1), w = img->val.dim(2);
    if (flow->val.ndim() != 3 || flow->val.dim(0) != 2 || flow->val.dim(1) != h ||
        flow->val.dim(2) != w)
        throw Error(errc::shape_mismatch, "grid_warp flow must be 2xHxW");

    Tensor<T> out({c, h, w});
    const T* fx = flow->val.data();
    const T* fy = flow->val.data() + static_cast<long long>(h) * w;
    for (int ch = 0; ch < c; ++ch) {
        const T* plane = img->val.data() + static_cast<long long>(ch) * h * w;
        T* op = out.data() + static_cast<long long>(ch) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                long long i = static_cast<long long>(y) * w + x;
                op[i] = bilinear_at(plane, h, w, x + static_cast<double>(fx[i]),
                                    y + static_cast<double>(fy[i]));
            }
    }

    return make_node<T>(std::move(out), {img, flow}, [c, h, w](Node<T>& self) {
        const Tensor<T>& iv = self.inputs[0]->val;
        const Tensor<T>& fv = self.inputs[1]->val;
        bool need_img = self.inputs[0]->requires_grad;
        bool need_flow = self.inputs[1]->requires_grad;
        Tensor<T>* gi = need_img ? &self.inputs[0]->grad_ref() : nullptr;
        Tensor<T>* gf = need_flow ? &self.inputs[1]->grad_ref() : nullptr;
        const T* fx = fv.data();
        const T* fy = fv.data() + static_cast<long long>(h) * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                long long i = static_cast<long long>(y) * w + x;
                double sx = x + static_cast<double>(fx[i]);
                double sy = y + static_cast<double>(fy[i]);
                double xc = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
                double yc = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
                int x0 = static_cast<int>(std::floor(xc));
                int y0 = static_cast<int>(std::floor(yc));
                int x1 = std::min(x0 + 1, w - 1);
                int y1 = std::min(y0 + 1, h - 1);
                double ffx = xc - x0, ffy = yc - y0;
                bool in_x = sx > 0.0 && sx < w - 1;
                bool in_y = sy > 0.0 && sy < h - 1;
                double gsx = 0, gsy = 0;
                for (int ch = 0; ch < c; ++ch) {
                    double g = self.grad[(static_cast<long long>(ch) * h + y) * w + x];
                    if (g == 0) continue;
                    const T* plane = iv.data() + static_cast<long long>(ch) * h * w;
                    double v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
                    double v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
                    if (need_img) {
                        T* gp = gi->data() + static_cast<long long>(ch) * h * w;
                        gp[y0 * w + x0] += static_cast<T>(g * (1 - ffx) * (1 - ffy));
                        gp[y0 * w + x1] += static_cast<T>(g * ffx * (1 - ffy));
                        gp[y1 * w + x0] += static_cast<T>(g * (1 - ffx) * ffy);
                        gp[y1 * w + x1] += static_cast<T>(g * ffx * ffy);
                    }
                    if (need_flow) {
                        if (in_x)
                            gsx += g * ((1 - ffy) * (v01 - v00) + ffy * (v11 - v10));
                        if (in_y)
                            gsy += g * ((1 - ffx) * (v10 - v00) + ffx * (v11 - v01));
                    }
                }
                if (need_flow) {
                    (*gf)[i] += static_cast<T>(gsx);
                    (*gf)[static_cast<long long>(h) * w + i] += static_cast<T>(gsy);
                }
            }
    });
}

// Forward differences along x and y for every channel, replicate edge
// (zero at the last column/row). Output is {2c, h, w}: first the d/dx planes,
// then the d/dy planes.
template <class T>
Var<T> spatial_grad(const Var<T>& x) {
    if (x->val.ndim() != 3) throw Error(errc::shape_mismatch, "spatial_grad expects CHW");
    int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    Tensor<T> out({2 * c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                T v = x->val.at(ch, y, xx);
                out.at(ch, y, xx) = xx + 1 < w ? x->val.at(ch, y, xx + 1) - v : T(0);
                out.at(c + ch, y, xx) = y + 1 < h ? x->val.at(ch, y + 1, xx) - v : T(0);
            }
    return make_node<T>(std::move(out), {x}, [c, h, w](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    T gx = self.grad.at(ch, y, xx);
                    T gy = self.grad.at(c + ch, y, xx);
                    if (xx + 1 < w) {
                        g.at(ch, y, xx + 1) += gx;
                        g.at(ch, y, xx) -= gx;
                    }
                    if (y + 1 < h) {
                        g.at(ch, y + 1, xx) += gy;
                        g.at(ch, y, xx) -= gy;
                    }
                }
    });
}

// Multiply a multichannel image by a single-channel map, broadcast over
// channels (wrinkle shading of a neutral texture).
template <class T>
Var<T> mul_bc(const Var<T>& img, const Var<T>& map1) {
    if (img->val.ndim() != 3 || map1->val.ndim() != 3 || map1->val.dim(0) != 1 ||
        map1->val.dim(1) != img->val.dim(1) || map1->val.dim(2) != img->val.dim(2))
        throw Error(errc::shape_mismatch, "mul_bc expects CHW and 1HW");
    int c = img->val.dim(0), h = img->val.dim(1), w = img->val.dim(2);
    long long hw = static_cast<long long>(h) * w;
    Tensor<T> out(img->val.shape);
    for (int ch = 0; ch < c; ++ch)
        for (long long i = 0; i < hw; ++i)
            out[ch * hw + i] = img->val[ch * hw + i] * map1->val[i];
    return make_node<T>(std::move(out), {img, map1}, [c, hw](Node<T>& self) {
        const Tensor<T>& iv = self.inputs[0]->val;
        const Tensor<T>& mv = self.inputs[1]->val;
        if (self.inputs[0]->requires_grad) {
            Tensor<T>& g = self.inputs[0]->grad_ref();
            for (int ch = 0; ch < c; ++ch)
                for (long long i = 0; i < hw; ++i)
                    g[ch * hw + i] += self.grad[ch * hw + i] * mv[i];
        }
        if (self.inputs[1]->requires_grad) {
            Tensor<T>& g = self.inputs[1]->grad_ref();
            for (int ch = 0; ch < c; ++ch)
                for (long long i = 0; i < hw; ++i)
                    g[i] += self.grad[ch * hw + i] * iv[ch * hw + i];
        }
    });
}

// ---- rigid transform -------------------------------------------------------

// Normalize a 4-vector onto the unit sphere.
template <class T>
Var<T> quat_normalize(const Var<T>& q) {
    if (q->val.ndim() != 1 || q->val.dim(0) != 4)
        throw Error(errc::shape_mismatch, "quat_normalize expects 4-vector");
    double n2 = 0;
    for (int i = 0; i < 4; ++i) n2 += static_cast<double>(q->val[i]) * q->val[i];
    double n = std::sqrt(n2);
    if (n < 1e-12) throw Error(errc::nan_input, "quat_normalize of near-zero quaternion");
    Tensor<T> out({4});
    for (int i = 0; i < 4; ++i) out[i] = static_cast<T>(q->val[i] / n);
    return make_node<T>(std::move(out), {q}, [n](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        double dot = 0;
        for (int i = 0; i < 4; ++i) dot += static_cast<double>(self.val[i]) * self.grad[i];
        for (int i = 0; i < 4; ++i)
            g[i] += static_cast<T>((static_cast<double>(self.grad[i]) - self.val[i] * dot) / n);
    });
}

namespace detail {
// Rotation matrix of a unit quaternion (w,x,y,z) and its four partials.
template <class T>
void quat_rot(const T* q, double R[3][3]) {
    double w = q[0], x = q[1], y = q[2], z = q[3];
    R[0][0] = 1 - 2 * (y * y + z * z);
    R[0][1] = 2 * (x * y - w * z);
    R[0][2] = 2 * (x * z + w * y);
    R[1][0] = 2 * (x * y + w * z);
    R[1][1] = 1 - 2 * (x * x + z * z);
    R[1][2] = 2 * (y * z - w * x);
    R[2][0] = 2 * (x * z - w * y);
    R[2][1] = 2 * (y * z + w * x);
    R[2][2] = 1 - 2 * (x * x + y * y);
}

template <class T>
void quat_rot_partials(const T* q, double dR[4][3][3]) {
    double w = q[0], x = q[1], y = q[2], z = q[3];
    double dw[3][3] = {{0, -2 * z, 2 * y}, {2 * z, 0, -2 * x}, {-2 * y, 2 * x, 0}};
    double dx[3][3] = {{0, 2 * y, 2 * z}, {2 * y, -4 * x, -2 * w}, {2 * z, 2 * w, -4 * x}};
    double dy[3][3] = {{-4 * y, 2 * x, 2 * w}, {2 * x, 0, 2 * z}, {-2 * w, 2 * z, -4 * y}};
    double dz[3][3] = {{-4 * z, -2 * w, 2 * x}, {2 * w, -4 * z, 2 * y}, {2 * x, 2 * y, 0}};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            dR[0][r][c] = dw[r][c];
            dR[1][r][c] = dx[r][c];
            dR[2][r][c] = dy[r][c];
            dR[3][r][c] = dz[r][c];
        }
}
}  // namespace detail

// Rigid transform of a position map {3,h,w}: out_p = R(q) p + t, with q a unit
// quaternion (normalize upstream) and t a 3-vector. Differentiable in all
// three arguments.
template <class T>
Var<T> apply_rigid(const Var<T>& geo, const Var<T>& q, const Var<T>& t) {
    if (geo->val.ndim() != 3 || geo->val.dim(0) != 3)
        throw Error(errc::shape_mismatch, "apply_rigid expects 3xHxW position map");
    if (q->val.numel() != 4 || t->val.numel() != 3)
        throw Error(errc::shape_mismatch, "apply_rigid expects q{4} t{3}");
    int h = geo->val.dim(1), w = geo->val.dim(2);
    long long hw = static_cast<long long>(h) * w;
    double R[3][3];
    detail::quat_rot(q->val.data(), R);
    Tensor<T> out(geo->val.shape);
    const T* p = geo->val.data();
    for (long long i = 0; i < hw; ++i) {
        double v[3] = {static_cast<double>(p[i]), static_cast<double>(p[hw + i]),
                       static_cast<double>(p[2 * hw + i])};
        for (int r = 0; r < 3; ++r)
            out[r * hw + i] = static_cast<T>(R[r][0] * v[0] + R[r][1] * v[1] + R[r][2] * v[2] +
                                             static_cast<double>(t->val[r]));
    }
    return make_node<T>(std::move(out), {geo, q, t}, [hw](Node<T>& self) {
        const Tensor<T>& pv = self.inputs[0]->val;
        const T* qv = self.inputs[1]->val.data();
        double R[3][3];
        detail::quat_rot(qv, R);
        double dR[4][3][3];
        bool need_q = self.inputs[1]->requires_grad;
        if (need_q) detail::quat_rot_partials(qv, dR);
        bool need_p = self.inputs[0]->requires_grad;
        bool need_t = self.inputs[2]->requires_grad;
        double gq[4] = {0, 0, 0, 0}, gt[3] = {0, 0, 0};
        for (long long i = 0; i < hw; ++i) {
            double g[3] = {static_cast<double>(self.grad[i]),
                           static_cast<double>(self.grad[hw + i]),
                           static_cast<double>(self.grad[2 * hw + i])};
            double v[3] = {static_cast<double>(pv[i]), static_cast<double>(pv[hw + i]),
                           static_cast<double>(pv[2 * hw + i])};
            if (need_p) {
                Tensor<T>& gp = self.inputs[0]->grad_ref();
                for (int c = 0; c < 3; ++c)
                    gp[c * hw + i] +=
                        static_cast<T>(R[0][c] * g[0] + R[1][c] * g[1] + R[2][c] * g[2]);
            }
            if (need_q)
                for (int k = 0; k < 4; ++k)
                    for (int r = 0; r < 3; ++r)
                        gq[k] += g[r] * (dR[k][r][0] * v[0] + dR[k][r][1] * v[1] +
                                         dR[k][r][2] * v[2]);
            if (need_t)
                for (int r = 0; r < 3; ++r) gt[r] += g[r];
        }
        if (need_q) {
            Tensor<T>& gn = self.inputs[1]->grad_ref();
            for (int k = 0; k < 4; ++k) gn[k] += static_cast<T>(gq[k]);
        }
        if (need_t) {
            Tensor<T>& gn = self.inputs[2]->grad_ref();
            for (int r = 0; r < 3; ++r) gn[r] += static_cast<T>(gt[r]);
        }
    });
}

// rms over pixels of the per-pixel vector magnitude of a {c,h,w} field:
// sqrt(sum(x^2) / (h*w)).
template <class T>
Var<T> rms_field(const Var<T>& x) {
    if (x->val.ndim() != 3) throw Error(errc::shape_mismatch, "rms_field expects CHW");
    double hw = static_cast<double>(x->val.dim(1)) * x->val.dim(2);
    return sqrt_op(scale(sum_sq(x), 1.0 / hw));
}

template <class T>
Var<T> clamp01(const Var<T>& x) {
    Tensor<T> out(x->val.shape);
    for (long long i = 0; i < out.numel(); ++i)
        out[i] = std::min(std::max(x->val[i], T(0)), T(1));
    return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        const Tensor<T>& xv = self.inputs[0]->val;
        for (long long i = 0; i < g.numel(); ++i)
            if (xv[i] > T(0) && xv[i] < T(1)) g[i] += self.grad[i];
    });
}

// Per-pixel normalization of a {3,h,w} vector field onto unit length.
template <class T>
Var<T> normalize3(const Var<T>& x, double eps = 1e-9) {
    if (x->val.ndim() != 3 || x->val.dim(0) != 3)
        throw Error(errc::shape_mismatch, "normalize3 expects {3,h,w}");
    long long hw = static_cast<long long>(x->val.dim(1)) * x->val.dim(2);
    Tensor<T> out(x->val.shape);
    for (long long i = 0; i < hw; ++i) {
        double v0 = x->val[i], v1 = x->val[hw + i], v2 = x->val[2 * hw + i];
        double n = std::sqrt(v0 * v0 + v1 * v1 + v2 * v2 + eps);
        out[i] = static_cast<T>(v0 / n);
        out[hw + i] = static_cast<T>(v1 / n);
        out[2 * hw + i] = static_cast<T>(v2 / n);
    }
    return make_node<T>(std::move(out), {x}, [hw, eps](Node<T>& self) {
        if (!self.inputs[0]->requires_grad) return;
        Tensor<T>& g = self.inputs[0]->grad_ref();
        const Tensor<T>& xv = self.inputs[0]->val;
        for (long long i = 0; i < hw; ++i) {
            double v[3] = {static_cast<double>(xv[i]), static_cast<double>(xv[hw + i]),
                           static_cast<double>(xv[2 * hw + i])};
            double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + eps);
            double u[3] = {v[0] / n, v[1] / n, v[2] / n};
            double go[3] = {static_cast<double>(self.grad[i]),
                            static_cast<double>(self.grad[hw + i]),
                            static_cast<double>(self.grad[2 * hw + i])};
            double d = u[0] * go[0] + u[1] * go[1] + u[2] * go[2];
            g[i] += static_cast<T>((go[0] - u[0] * d) / n);
            g[hw + i] += static_cast<T>((go[1] - u[1] * d) / n);
            g[2 * hw + i] += static_cast<T>((go[2] - u[2] * d) / n);
        }
    });
}

// L1 restricted to a binary {1,h,w} mask, normalized by the covered area.
// An all-zero mask yields exactly zero with no gradient.
template <class T>
Var<T> masked_l1(const Var<T>& a, const Var<T>& b, const Tensor<T>& mask) {
    if (!a->val.same_shape(b->val)) throw Error(errc::shape_mismatch, "masked_l1 shape mismatch");
    if (mask.ndim() != 3 || mask.dim(0) != 1 || mask.dim(1) != a->val.dim(1) ||
        mask.dim(2) != a->val.dim(2))
        throw Error(errc::shape_mismatch, "masked_l1 mask must be {1,h,w} matching images");
    long long hw = static_cast<long long>(mask.dim(1)) * mask.dim(2);
    int c = a->val.dim(0);
    double area = 0;
    for (long long i = 0; i < hw; ++i) area += mask[i];
    if (area == 0) return constant(Tensor<T>::zeros({1}));
    double s = 0;
    for (int ch = 0; ch < c; ++ch)
        for (long long i = 0; i < hw; ++i)
            s += mask[i] * std::abs(static_cast<double>(a->val[ch * hw + i]) -
                                    static_cast<double>(b->val[ch * hw + i]));
    T v = static_cast<T>(s / (c * area));
    return make_node<T>(Tensor<T>::from({1}, {v}), {a, b}, [mask, c, hw, area](Node<T>& self) {
        const Tensor<T>& av = self.inputs[0]->val;
        const Tensor<T>& bv = self.inputs[1]->val;
        T w = self.grad[0] / static_cast<T>(c * area);
        for (int ch = 0; ch < c; ++ch)
            for (long long i = 0; i < hw; ++i) {
                if (mask[i] == T(0)) continue;
                long long k = ch * hw + i;
                T s = av[k] > bv[k] ? w : (av[k] < bv[k] ? -w : T(0));
                s *= mask[i];
                if (self.inputs[0]->requires_grad) self.inputs[0]->grad_ref()[k] += s;
                if (self.inputs[1]->requires_grad) self.inputs[1]->grad_ref()[k] -= s;
            }
    });
}

// Append one constant-valued channel to a {c,h,w} feature map (the decoder's
// identity-indicator input).
template <class T>
Var<T> append_channel(const Var<T>& x, double value) {
    if (x->val.ndim() != 3) throw Error(errc::shape_mismatch, "append_channel expects CHW");
    return concat0<T>({x, constant(Tensor<T>::full({1, x->val.dim(1), x->val.dim(2)},
                                                   static_cast<T>(value)))});
}

}  // namespace facet::nn
