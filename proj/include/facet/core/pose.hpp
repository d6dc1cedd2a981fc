#pragma once

#include <array>
#include <cmath>

#include "facet/core/rng.hpp"

namespace facet {

// Plain 3-vector. A struct (not std::array) so the operators below are found
// by argument-dependent lookup from any namespace.
struct Vec3 {
    double c[3] = {0, 0, 0};
    double& operator[](int i) { return c[i]; }
    double operator[](int i) const { return c[i]; }
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized(const Vec3& a) {
    double n = norm(a);
    return n > 0 ? (1.0 / n) * a : Vec3{0, 0, 0};
}

// Unit quaternion (w, x, y, z).
struct Quat {
    double w = 1, x = 0, y = 0, z = 0;

    static Quat identity() { return {}; }

    static Quat from_axis_angle(const Vec3& axis, double angle_rad) {
        Vec3 u = normalized(axis);
        double h = 0.5 * angle_rad;
        double s = std::sin(h);
        return {std::cos(h), s * u[0], s * u[1], s * u[2]};
    }

    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    Quat normalized_q() const {
        double n = norm();
        if (n == 0) return identity();
        return {w / n, x / n, y / n, z / n};
    }

    Quat conjugate() const { return {w, -x, -y, -z}; }

    Quat operator*(const Quat& o) const {
        return {w * o.w - x * o.x - y * o.y - z * o.z,
                w * o.x + x * o.w + y * o.z - z * o.y,
                w * o.y - x * o.z + y * o.w + z * o.x,
                w * o.z + x * o.y - y * o.x + z * o.w};
    }

    Vec3 rotate(const Vec3& p) const {
        // q p q* expanded; assumes unit norm.
        Vec3 u{x, y, z};
        Vec3 t = 2.0 * cross(u, p);
        return p + w * t + cross(u, t);
    }

    // Rotation angle in radians, in [0, pi].
    double angle() const {
        double cw = std::min(1.0, std::abs(w / std::max(norm(), 1e-300)));
        return 2.0 * std::acos(cw);
    }

    std::array<double, 9> to_matrix() const {
        double xx = x * x, yy = y * y, zz = z * z;
        double xy = x * y, xz = x * z, yz = y * z;
        double wx = w * x, wy = w * y, wz = w * z;
        return {1 - 2 * (yy + zz), 2 * (xy - wz),     2 * (xz + wy),
                2 * (xy + wz),     1 - 2 * (xx + zz), 2 * (yz - wx),
                2 * (xz - wy),     2 * (yz + wx),     1 - 2 * (xx + yy)};
    }
};

// Rigid transform: rotation then translation, millimeters.
struct PoseTransform {
    Quat rot;
    Vec3 trans{0, 0, 0};

    static PoseTransform identity() { return {}; }

    Vec3 apply(const Vec3& p) const { return rot.rotate(p) + trans; }

    PoseTransform inverse() const {
        Quat r = rot.conjugate();
        return {r, -1.0 * r.rotate(trans)};
    }

    PoseTransform compose(const PoseTransform& inner) const {
        // (*this) after inner: p -> this(inner(p))
        return {(rot * inner.rot).normalized_q(), rot.rotate(inner.trans) + trans};
    }

    bool near_identity(double tol) const {
        return rot.angle() <= tol && norm(trans) <= tol;
    }
};

// Random rigid transform: rotation angle uniform in [-max_angle, +max_angle]
// about a uniform random axis, translation uniform per axis.
inline PoseTransform random_pose(Rng& rng, double max_angle_rad, double max_trans) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    if (norm(axis) < 1e-12) axis = {0, 0, 1};
    double angle = rng.uniform(-max_angle_rad, max_angle_rad);
    Vec3 t{rng.uniform(-max_trans, max_trans), rng.uniform(-max_trans, max_trans),
           rng.uniform(-max_trans, max_trans)};
    return {Quat::from_axis_angle(axis, angle), t};
}

}  // namespace facet
