#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "focal3d/targets.hpp"
#include "focal3d/tensor.hpp"

namespace focal3d {

// Posterior probabilities are clamped away from {0, 1} before any logarithm;
// the loss is singular at p_t = 0.
inline constexpr double kProbClamp = 1e-7;

inline double clamp_prob(double p) {
    return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// One binary classification sample: ground truth y in {+1, -1}, logit x,
// probability p = sigmoid(x) for the y=+1 class, and the posterior p_t
// (p for positives, 1-p for negatives).
struct LossSample {
    int y = +1;
    double x = 0.0;
    double p = 0.5;
    double p_t = 0.5;

    static LossSample from_logit(int y, double x) {
        if (!std::isfinite(x)) throw std::domain_error("LossSample: non-finite logit");
        if (y != +1 && y != -1) throw std::domain_error("LossSample: y must be +1 or -1");
        LossSample s;
        s.y = y;
        s.x = x;
        s.p = sigmoid(x);
        s.p_t = y > 0 ? s.p : 1.0 - s.p;
        return s;
    }

    static LossSample from_prob(int y, double p) {
        if (!std::isfinite(p)) throw std::domain_error("LossSample: non-finite probability");
        if (y != +1 && y != -1) throw std::domain_error("LossSample: y must be +1 or -1");
        LossSample s;
        s.y = y;
        s.p = p;
        const double pc = clamp_prob(p);
        s.x = std::log(pc / (1.0 - pc));
        s.p_t = y > 0 ? p : 1.0 - p;
        return s;
    }
};

enum class LossMode { original, enhanced };
enum class ClsKind { bce, focal };
enum class RegKind { square, smooth_l1 };

// Scalar-loss and composite-loss settings. alpha weights the positive class,
// beta the negative class, eta scales the whole classification term, lambda is
// an extra single-class weight (1 by default).
struct LossConfig {
    double gamma = 0.0;
    double alpha = 1.0;
    double beta = 1.0;
    double eta = 1.0;
    double lambda = 1.0;
    LossMode mode = LossMode::enhanced;
    ClsKind cls_kind = ClsKind::focal;
    RegKind reg_kind = RegKind::smooth_l1;

    void validate() const {
        if (!(gamma >= 0.0)) throw std::domain_error("LossConfig: gamma must be >= 0");
        if (!(alpha > 0.0 && beta > 0.0 && eta > 0.0 && lambda > 0.0))
            throw std::domain_error("LossConfig: alpha, beta, eta, lambda must be > 0");
    }

    double class_weight(int y) const { return lambda * (y > 0 ? alpha : beta); }
};

// --- Scalar losses ---------------------------------------------------------

inline double bce_from_pt(double p_t) { return -std::log(clamp_prob(p_t)); }

inline double bce(const LossSample& s) { return bce_from_pt(s.p_t); }

// d(bce)/dx = y (p_t - 1).
inline double bce_grad(const LossSample& s) { return s.y * (clamp_prob(s.p_t) - 1.0); }

inline double focal_from_pt(double p_t, double gamma) {
    if (!(gamma >= 0.0)) throw std::domain_error("focal: gamma must be >= 0");
    const double pc = clamp_prob(p_t);
    return -std::pow(1.0 - pc, gamma) * std::log(pc);
}

// d(focal)/dx = y (1 - p_t)^gamma (gamma p_t log p_t + p_t - 1).
inline double focal_grad_from_pt(int y, double p_t, double gamma) {
    if (!(gamma >= 0.0)) throw std::domain_error("focal_grad: gamma must be >= 0");
    const double pc = clamp_prob(p_t);
    return y * std::pow(1.0 - pc, gamma) * (gamma * pc * std::log(pc) + pc - 1.0);
}

inline double focal(const LossSample& s, const LossConfig& cfg) {
    return cfg.class_weight(s.y) * focal_from_pt(s.p_t, cfg.gamma);
}

inline double focal_grad(const LossSample& s, const LossConfig& cfg) {
    return cfg.class_weight(s.y) * focal_grad_from_pt(s.y, s.p_t, cfg.gamma);
}

// --- Regression losses ------------------------------------------------------

inline double square_loss(std::span<const double> u, std::span<const double> u_star) {
    if (u.size() != u_star.size()) throw std::invalid_argument("square_loss: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        const double d = u[i] - u_star[i];
        acc += d * d;
    }
    return acc;
}

// Per-component Huber with transition at 1.
inline double smooth_l1(std::span<const double> u, std::span<const double> u_star) {
    if (u.size() != u_star.size()) throw std::invalid_argument("smooth_l1: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        const double d = std::abs(u[i] - u_star[i]);
        acc += d <= 1.0 ? 0.5 * d * d : d - 0.5;
    }
    return acc;
}

inline double regression_loss(RegKind kind, std::span<const double> u, std::span<const double> u_star) {
    return kind == RegKind::square ? square_loss(u, u_star) : smooth_l1(u, u_star);
}

// --- Composite detection loss ------------------------------------------------

// total = cls + reg; cls = eta * (pos_part + neg_part). In enhanced mode the
// parts are per-class means weighted by alpha/beta and the regression term is
// mean-normalized over positives; in original mode all three are raw sums with
// alpha = beta = 1.
struct LossBreakdown {
    double total = 0.0;
    double cls = 0.0;
    double reg = 0.0;
    double pos_part = 0.0;
    double neg_part = 0.0;
    int64_t n_pos = 0;
    int64_t n_neg = 0;
};

inline LossBreakdown composite_loss(const Tensor& pmap_logits, const Tensor& rmap,
                                    const TargetAssignment& ta, const LossConfig& cfg) {
    cfg.validate();
    const MapLayout layout = MapLayout::infer(pmap_logits, rmap, ta);

    double pos_sum = 0.0, neg_sum = 0.0, reg_sum = 0.0;
    auto cls_loss = [&](double p_t) {
        return cfg.cls_kind == ClsKind::bce ? bce_from_pt(p_t) : focal_from_pt(p_t, cfg.gamma);
    };

    const int64_t n = ta.total();
    for (int64_t a = 0; a < n; ++a) {
        const int8_t label = ta.labels[static_cast<size_t>(a)];
        if (label == 0) continue;
        const double x = pmap_logits.v[static_cast<size_t>(a)];
        if (!std::isfinite(x)) throw std::domain_error("composite loss: non-finite logit");
        const double p = sigmoid(x);
        if (label > 0)
            pos_sum += cls_loss(p);
        else
            neg_sum += cls_loss(1.0 - p);
    }

    std::vector<double> u(static_cast<size_t>(layout.res_len));
    for (size_t pi = 0; pi < ta.positive_anchors.size(); ++pi) {
        const int64_t a = ta.positive_anchors[pi];
        const auto& u_star = ta.residuals[pi];
        if (static_cast<int64_t>(u_star.size()) != layout.res_len)
            throw std::invalid_argument("composite loss: target residual length mismatch");
        for (int64_t k = 0; k < layout.res_len; ++k)
            u[static_cast<size_t>(k)] = rmap.v[static_cast<size_t>(layout.residual_offset(a, k))];
        reg_sum += regression_loss(cfg.reg_kind, u, u_star);
    }

    LossBreakdown out;
    out.n_pos = ta.n_pos;
    out.n_neg = ta.n_neg;
    if (cfg.mode == LossMode::original) {
        out.pos_part = pos_sum;
        out.neg_part = neg_sum;
        out.reg = reg_sum;
    } else {
        // N_pos = 0 frames: positive and regression terms are defined as 0.
        out.pos_part = ta.n_pos > 0 ? cfg.alpha * pos_sum / static_cast<double>(ta.n_pos) : 0.0;
        out.neg_part = ta.n_neg > 0 ? cfg.beta * neg_sum / static_cast<double>(ta.n_neg) : 0.0;
        out.reg = ta.n_pos > 0 ? reg_sum / static_cast<double>(ta.n_pos) : 0.0;
    }
    out.cls = cfg.eta * (out.pos_part + out.neg_part);
    out.total = out.cls + out.reg;
    return out;
}

inline const char* to_string(LossMode m) { return m == LossMode::original ? "original" : "enhanced"; }
inline const char* to_string(ClsKind k) { return k == ClsKind::bce ? "bce" : "focal"; }
inline const char* to_string(RegKind k) { return k == RegKind::square ? "square" : "smooth_l1"; }

inline LossMode loss_mode_from(const std::string& s) {
    if (s == "original") return LossMode::original;
    if (s == "enhanced") return LossMode::enhanced;
    throw std::invalid_argument("unknown loss mode: " + s);
}
inline ClsKind cls_kind_from(const std::string& s) {
    if (s == "bce") return ClsKind::bce;
    if (s == "focal") return ClsKind::focal;
    throw std::invalid_argument("unknown cls_kind: " + s);
}
inline RegKind reg_kind_from(const std::string& s) {
    if (s == "square") return RegKind::square;
    if (s == "smooth_l1") return RegKind::smooth_l1;
    throw std::invalid_argument("unknown reg_kind: " + s);
}

}  // namespace focal3d
