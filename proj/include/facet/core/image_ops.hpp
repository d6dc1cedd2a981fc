#pragma once

#include <cmath>

#include "facet/core/error.hpp"
#include "facet/core/tensor.hpp"

namespace facet {

// Bilinear sample with clamp-to-edge. Coordinates are pixel indices; the
// caller passes already-offset positions.
template <class T>
inline T bilinear_at(const T* plane, int h, int w, double sx, double sy) {
    double xc = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
    double yc = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
    int x0 = static_cast<int>(std::floor(xc));
    int y0 = static_cast<int>(std::floor(yc));
    int x1 = std::min(x0 + 1, w - 1);
    int y1 = std::min(y0 + 1, h - 1);
    double fx = xc - x0;
    double fy = yc - y0;
    double v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
    double v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
    double top = v00 + fx * (v01 - v00);
    double bot = v10 + fx * (v11 - v10);
    return static_cast<T>(top + fy * (bot - top));
}

// Backward warp: out(p) = in(p + flow(p)), bilinear, clamp-to-edge.
// channels: flow is {2, H, W} with channel 0 = x offset, 1 = y offset.
// Zero flow reproduces the input bit-exactly.
template <class T>
Tensor<T> apply_warp(const Tensor<T>& img, const Tensor<T>& flow) {
    if (img.ndim() != 3) throw Error(errc::shape_mismatch, "apply_warp expects CHW image");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (flow.ndim() != 3 || flow.dim(0) != 2 || flow.dim(1) != h || flow.dim(2) != w)
        throw Error(errc::shape_mismatch, "apply_warp flow must be 2xHxW matching image");
    if (!flow.all_finite()) throw Error(errc::nan_input, "apply_warp flow not finite");
    Tensor<T> out({c, h, w});
    const T* fx = flow.data();
    const T* fy = flow.data() + static_cast<long long>(h) * w;
    bool zero_flow = true;
    for (long long i = 0; i < static_cast<long long>(h) * w && zero_flow; ++i)
        zero_flow = fx[i] == T(0) && fy[i] == T(0);
    if (zero_flow) {
        std::copy(img.store->begin(), img.store->end(), out.store->begin());
        return out;
    }
    for (int ch = 0; ch < c; ++ch) {
        const T* plane = img.data() + static_cast<long long>(ch) * h * w;
        T* op = out.data() + static_cast<long long>(ch) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                long long i = static_cast<long long>(y) * w + x;
                op[i] = bilinear_at(plane, h, w, x + static_cast<double>(fx[i]),
                                    y + static_cast<double>(fy[i]));
            }
    }
    return out;
}

// Bilinear resize by integer factor, half-pixel-center convention
// (output (x,y) samples input at ((x+0.5)/f - 0.5)), clamp-to-edge.
// Constant fields stay constant.
template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& img, int factor) {
    if (img.ndim() != 3) throw Error(errc::shape_mismatch, "upsample expects CHW");
    if (factor < 1) throw Error(errc::bad_args, "upsample factor must be >= 1");
    if (factor == 1) return img.clone();
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    int oh = h * factor, ow = w * factor;
    Tensor<T> out({c, oh, ow});
    for (int ch = 0; ch < c; ++ch) {
        const T* plane = img.data() + static_cast<long long>(ch) * h * w;
        T* op = out.data() + static_cast<long long>(ch) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            double sy = (y + 0.5) / factor - 0.5;
            for (int x = 0; x < ow; ++x) {
                double sx = (x + 0.5) / factor - 0.5;
                op[static_cast<long long>(y) * ow + x] = bilinear_at(plane, h, w, sx, sy);
            }
        }
    }
    return out;
}

// Box average over factor x factor blocks. Requires exact divisibility.
template <class T>
Tensor<T> downsample_box(const Tensor<T>& img, int factor) {
    if (img.ndim() != 3) throw Error(errc::shape_mismatch, "downsample expects CHW");
    if (factor < 1) throw Error(errc::bad_args, "downsample factor must be >= 1");
    if (factor == 1) return img.clone();
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h % factor || w % factor)
        throw Error(errc::shape_mismatch, "downsample requires divisible resolution");
    int oh = h / factor, ow = w / factor;
    Tensor<T> out({c, oh, ow});
    double inv = 1.0 / (static_cast<double>(factor) * factor);
    for (int ch = 0; ch < c; ++ch) {
        const T* plane = img.data() + static_cast<long long>(ch) * h * w;
        T* op = out.data() + static_cast<long long>(ch) * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double s = 0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx)
                        s += plane[static_cast<long long>(y * factor + dy) * w + x * factor + dx];
                op[static_cast<long long>(y) * ow + x] = static_cast<T>(s * inv);
            }
    }
    return out;
}

// Nearest-neighbor upsample by integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& img, int factor) {
    if (img.ndim() != 3) throw Error(errc::shape_mismatch, "upsample expects CHW");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor<T> out({c, h * factor, w * factor});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h * factor; ++y)
            for (int x = 0; x < w * factor; ++x)
                out.at(ch, y, x) = img.at(ch, y / factor, x / factor);
    return out;
}

// Anisotropic total variation: mean over pixels and channels of
// |forward dx| + |forward dy| (zero at the replicated last row/column).
template <class T>
double total_variation(const Tensor<T>& img) {
    if (img.ndim() != 3) throw Error(errc::shape_mismatch, "total_variation expects CHW");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    double s = 0;
    for (int ch = 0; ch < c; ++ch) {
        const T* p = img.data() + static_cast<long long>(ch) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double v = p[y * w + x];
                if (x + 1 < w) s += std::abs(p[y * w + x + 1] - v);
                if (y + 1 < h) s += std::abs(p[(y + 1) * w + x] - v);
            }
    }
    return s / (static_cast<double>(c) * h * w);
}

}  // namespace facet
