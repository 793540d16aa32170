#pragma once

// Composite detection loss expressed through the autodiff primitives, so that
// parameter gradients flow from Eqs.-style breakdowns without using the
// closed-form scalar derivatives (those stay available as an independent
// cross-check).

#include <cstdint>
#include <vector>

#include "focal3d/autodiff.hpp"
#include "focal3d/losses.hpp"
#include "focal3d/targets.hpp"

namespace focal3d {

struct CompositeLossGraph {
    ad::Var total;        // scalar
    LossBreakdown value;  // numeric breakdown of the same computation
};

namespace detail {
// -(1 - p_t)^gamma * log(p_t) per element, built from primitives.
inline ad::Var cls_term(const ad::Var& p_t, const LossConfig& cfg) {
    auto pc = ad::vclamp(p_t, kProbClamp, 1.0 - kProbClamp);
    auto nll = ad::neg(ad::vlog(pc));
    if (cfg.cls_kind == ClsKind::bce || cfg.gamma == 0.0) return nll;
    auto weight = ad::vpow(ad::rsub_const(1.0, pc), cfg.gamma);
    return ad::mul(weight, nll);
}
}  // namespace detail

inline CompositeLossGraph composite_loss_graph(const ad::Var& pmap_logits, const ad::Var& rmap,
                                               const TargetAssignment& ta, const LossConfig& cfg) {
    cfg.validate();
    const MapLayout layout = MapLayout::infer(pmap_logits->t, rmap->t, ta);

    std::vector<int64_t> pos_idx, neg_idx;
    for (int64_t a = 0; a < ta.total(); ++a) {
        const int8_t l = ta.labels[static_cast<size_t>(a)];
        if (l > 0)
            pos_idx.push_back(a);
        else if (l < 0)
            neg_idx.push_back(a);
    }

    const bool enhanced = cfg.mode == LossMode::enhanced;
    ad::Var total = ad::constant(Tensor::scalar(0.0));

    ad::Var pos_term, neg_term, reg_term;
    if (!pos_idx.empty()) {
        auto logits = ad::gather(pmap_logits, pos_idx);
        auto p_t = ad::vsigmoid(logits);
        auto sum = ad::vsum(detail::cls_term(p_t, cfg));
        const double w = enhanced ? cfg.eta * cfg.alpha / static_cast<double>(ta.n_pos) : cfg.eta;
        pos_term = ad::scale(sum, w);

        // regression over positive anchors only
        std::vector<int64_t> uidx;
        std::vector<double> ustar;
        uidx.reserve(pos_idx.size() * static_cast<size_t>(layout.res_len));
        for (size_t pi = 0; pi < ta.positive_anchors.size(); ++pi) {
            const int64_t a = ta.positive_anchors[pi];
            for (int64_t k = 0; k < layout.res_len; ++k) {
                uidx.push_back(layout.residual_offset(a, k));
                ustar.push_back(ta.residuals[pi][static_cast<size_t>(k)]);
            }
        }
        auto u = ad::gather(rmap, uidx);
        auto d = ad::sub(u, ad::constant(Tensor({static_cast<int64_t>(ustar.size())}, ustar)));
        auto per = cfg.reg_kind == RegKind::square ? ad::mul(d, d) : ad::vhuber(d);
        auto rsum = ad::vsum(per);
        reg_term = enhanced ? ad::scale(rsum, 1.0 / static_cast<double>(ta.n_pos)) : rsum;
    }
    if (!neg_idx.empty()) {
        auto logits = ad::gather(pmap_logits, neg_idx);
        auto p_t = ad::rsub_const(1.0, ad::vsigmoid(logits));
        auto sum = ad::vsum(detail::cls_term(p_t, cfg));
        const double w = enhanced ? cfg.eta * cfg.beta / static_cast<double>(ta.n_neg) : cfg.eta;
        neg_term = ad::scale(sum, w);
    }

    CompositeLossGraph out;
    out.value.n_pos = ta.n_pos;
    out.value.n_neg = ta.n_neg;
    if (pos_term) {
        total = ad::add(total, pos_term);
        out.value.pos_part = pos_term->t.v[0] / cfg.eta;
    }
    if (neg_term) {
        total = ad::add(total, neg_term);
        out.value.neg_part = neg_term->t.v[0] / cfg.eta;
    }
    if (reg_term) {
        total = ad::add(total, reg_term);
        out.value.reg = reg_term->t.v[0];
    }
    out.value.cls = cfg.eta * (out.value.pos_part + out.value.neg_part);
    out.value.total = out.value.cls + out.value.reg;
    out.total = total;
    return out;
}

}  // namespace focal3d
