#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace focal3d {

// Normalize an angle into [-pi, pi).
inline double normalize_yaw(double yaw) {
    double y = std::remainder(yaw, 2.0 * M_PI);  // (-pi, pi]
    if (y >= M_PI) y -= 2.0 * M_PI;
    return y;
}

// Oriented 3D bounding box: center, size, rotation about the vertical axis.
struct Box3D {
    double x = 0.0, y = 0.0, z = 0.0;  // center, meters
    double l = 1.0, w = 1.0, h = 1.0;  // size, meters
    double yaw = 0.0;                  // radians, kept normalized in [-pi, pi)

    Box3D() = default;
    Box3D(double cx, double cy, double cz, double bl, double bw, double bh, double byaw)
        : x(cx), y(cy), z(cz), l(bl), w(bw), h(bh), yaw(normalize_yaw(byaw)) {
        if (!(l > 0.0 && w > 0.0 && h > 0.0))
            throw std::domain_error("Box3D: sizes must be strictly positive");
    }

    double volume() const { return l * w * h; }
    double bev_area() const { return l * w; }
    double z_min() const { return z - 0.5 * h; }
    double z_max() const { return z + 0.5 * h; }
};

struct Detection {
    Box3D box;
    double score = 0.0;  // posterior probability in [0, 1]
};

// 24 reals: (x, y, z) of the 8 corners. Canonical order: bottom face
// counterclockwise starting at (+l/2, +w/2), then the top face in the same
// x-y order.
using CornerResidual24 = std::array<double, 24>;

// (dx, dy, dz, dl, dw, dh, dyaw) relative to an anchor box.
using AnchorResidual7 = std::array<double, 7>;

inline CornerResidual24 corners24(const Box3D& b) {
    static constexpr double sx[4] = {+0.5, -0.5, -0.5, +0.5};
    static constexpr double sy[4] = {+0.5, +0.5, -0.5, -0.5};
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    CornerResidual24 out{};
    for (int face = 0; face < 2; ++face) {
        const double lz = b.z + (face == 0 ? -0.5 : +0.5) * b.h;
        for (int k = 0; k < 4; ++k) {
            const double lx = sx[k] * b.l, ly = sy[k] * b.w;
            const int i = 3 * (4 * face + k);
            out[i + 0] = b.x + lx * c - ly * s;
            out[i + 1] = b.y + lx * s + ly * c;
            out[i + 2] = lz;
        }
    }
    return out;
}

// Best-fit box from 24 corner coordinates in canonical order. Exact inverse of
// corners24 for valid boxes; for perturbed corners it averages the edges.
inline Box3D box_from_corners24(const CornerResidual24& c) {
    auto px = [&](int k) { return c[3 * k + 0]; };
    auto py = [&](int k) { return c[3 * k + 1]; };
    auto pz = [&](int k) { return c[3 * k + 2]; };
    double cx = 0, cy = 0, cz = 0;
    for (int k = 0; k < 8; ++k) {
        cx += px(k);
        cy += py(k);
        cz += pz(k);
    }
    cx /= 8.0;
    cy /= 8.0;
    cz /= 8.0;
    // +l edges: 1->0, 2->3 on each face; +w edges: 3->0, 2->1 on each face.
    double lx = 0, ly = 0, wx = 0, wy = 0;
    for (int f = 0; f < 8; f += 4) {
        lx += px(f + 0) - px(f + 1) + px(f + 3) - px(f + 2);
        ly += py(f + 0) - py(f + 1) + py(f + 3) - py(f + 2);
        wx += px(f + 0) - px(f + 3) + px(f + 1) - px(f + 2);
        wy += py(f + 0) - py(f + 3) + py(f + 1) - py(f + 2);
    }
    lx /= 4.0;
    ly /= 4.0;
    wx /= 4.0;
    wy /= 4.0;
    const double h = (pz(4) + pz(5) + pz(6) + pz(7) - pz(0) - pz(1) - pz(2) - pz(3)) / 4.0;
    return Box3D(cx, cy, cz, std::hypot(lx, ly), std::hypot(wx, wy), h, std::atan2(ly, lx));
}

// --- Anchor-relative 7-residual parameterization --------------------------
// Center offsets normalized by the anchor BEV diagonal (z by anchor height),
// log-ratio sizes, raw yaw difference.

inline double anchor_bev_diagonal(const Box3D& a) { return std::hypot(a.l, a.w); }

inline AnchorResidual7 encode7(const Box3D& b, const Box3D& a) {
    const double d = anchor_bev_diagonal(a);
    if (!(d > 0.0)) throw std::domain_error("encode7: degenerate anchor (zero BEV diagonal)");
    return {(b.x - a.x) / d,       (b.y - a.y) / d,       (b.z - a.z) / a.h,
            std::log(b.l / a.l),   std::log(b.w / a.w),   std::log(b.h / a.h),
            b.yaw - a.yaw};
}

inline Box3D decode7(const AnchorResidual7& r, const Box3D& a) {
    const double d = anchor_bev_diagonal(a);
    if (!(d > 0.0)) throw std::domain_error("decode7: degenerate anchor (zero BEV diagonal)");
    return Box3D(a.x + r[0] * d, a.y + r[1] * d, a.z + r[2] * a.h, a.l * std::exp(r[3]),
                 a.w * std::exp(r[4]), a.h * std::exp(r[5]), a.yaw + r[6]);
}

// --- Rotated-rectangle overlap ---------------------------------------------

struct Vec2 {
    double x = 0.0, y = 0.0;
};

inline double polygon_area(const std::vector<Vec2>& p) {
    double a = 0.0;
    const size_t n = p.size();
    for (size_t i = 0; i < n; ++i) {
        const Vec2& u = p[i];
        const Vec2& v = p[(i + 1) % n];
        a += u.x * v.y - v.x * u.y;
    }
    return 0.5 * std::abs(a);
}

inline std::array<Vec2, 4> bev_corners(const Box3D& b) {
    static constexpr double sx[4] = {+0.5, -0.5, -0.5, +0.5};
    static constexpr double sy[4] = {+0.5, +0.5, -0.5, -0.5};
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    std::array<Vec2, 4> out;
    for (int k = 0; k < 4; ++k) {
        const double lx = sx[k] * b.l, ly = sy[k] * b.w;
        out[k] = {b.x + lx * c - ly * s, b.y + lx * s + ly * c};
    }
    return out;  // counterclockwise
}

// Sutherland-Hodgman clip of a convex subject polygon against a convex,
// counterclockwise clip polygon.
inline std::vector<Vec2> clip_convex(std::vector<Vec2> subject, const std::array<Vec2, 4>& clip) {
    constexpr double kEps = 1e-12;
    for (int e = 0; e < 4 && !subject.empty(); ++e) {
        const Vec2 a = clip[static_cast<size_t>(e)];
        const Vec2 b = clip[static_cast<size_t>((e + 1) % 4)];
        const double ex = b.x - a.x, ey = b.y - a.y;
        auto side = [&](const Vec2& p) { return ex * (p.y - a.y) - ey * (p.x - a.x); };
        std::vector<Vec2> out;
        out.reserve(subject.size() + 2);
        const size_t n = subject.size();
        for (size_t i = 0; i < n; ++i) {
            const Vec2& cur = subject[i];
            const Vec2& nxt = subject[(i + 1) % n];
            const double sc = side(cur), sn = side(nxt);
            if (sc >= -kEps) out.push_back(cur);
            if ((sc > kEps && sn < -kEps) || (sc < -kEps && sn > kEps)) {
                const double t = sc / (sc - sn);
                out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
            }
        }
        subject = std::move(out);
    }
    return subject;
}

// Footprint intersection area of two oriented boxes. Slivers below 1e-10 m^2
// count as zero overlap.
inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
    const auto ca = bev_corners(a);
    const auto cb = bev_corners(b);
    const std::vector<Vec2> subject(ca.begin(), ca.end());
    const auto poly = clip_convex(subject, cb);
    if (poly.size() < 3) return 0.0;
    const double area = polygon_area(poly);
    return area < 1e-10 ? 0.0 : area;
}

inline double bev_iou(const Box3D& a, const Box3D& b) {
    const double inter = bev_intersection_area(a, b);
    if (inter <= 0.0) return 0.0;
    const double uni = a.bev_area() + b.bev_area() - inter;
    return std::clamp(inter / uni, 0.0, 1.0);
}

inline double iou3d(const Box3D& a, const Box3D& b) {
    const double dz = std::min(a.z_max(), b.z_max()) - std::max(a.z_min(), b.z_min());
    if (dz <= 0.0) return 0.0;
    const double inter = bev_intersection_area(a, b) * dz;
    if (inter <= 0.0) return 0.0;
    const double uni = a.volume() + b.volume() - inter;
    return std::clamp(inter / uni, 0.0, 1.0);
}

enum class IouMetric { bev, box3d };

inline double iou(const Box3D& a, const Box3D& b, IouMetric metric) {
    return metric == IouMetric::bev ? bev_iou(a, b) : iou3d(a, b);
}

// Greedy NMS. Detections are visited in descending score order (ties broken by
// lower original index); a detection is suppressed iff its IoU with an already
// kept detection exceeds the threshold. Returns kept indices in visit order.
inline std::vector<size_t> nms(const std::vector<Detection>& dets, double iou_threshold,
                               IouMetric metric = IouMetric::bev) {
    if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0))
        throw std::domain_error("nms: threshold must be in [0, 1]");
    std::vector<size_t> order(dets.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t i, size_t j) { return dets[i].score > dets[j].score; });
    std::vector<size_t> kept;
    for (size_t idx : order) {
        bool suppressed = false;
        for (size_t k : kept) {
            if (iou(dets[idx].box, dets[k].box, metric) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(idx);
    }
    return kept;
}

// Point-in-box test, boundary inclusive (used for label support counts).
inline bool point_in_box(const Box3D& b, double px, double py, double pz, double eps = 1e-9) {
    const double dz = pz - b.z;
    if (std::abs(dz) > 0.5 * b.h + eps) return false;
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double dx = px - b.x, dy = py - b.y;
    const double bx = dx * c + dy * s;
    const double by = -dx * s + dy * c;
    return std::abs(bx) <= 0.5 * b.l + eps && std::abs(by) <= 0.5 * b.w + eps;
}

}  // namespace focal3d
