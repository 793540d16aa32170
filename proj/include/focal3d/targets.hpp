#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "focal3d/tensor.hpp"

namespace focal3d {

// Per-anchor classification/regression targets shared by the loss and the
// training loop. Anchor ids follow the prediction-map layout: for a P-Map of
// shape (A, spatial...) anchor id = a * spatial + flat_spatial_index, i.e. the
// flat index into the map itself.
struct TargetAssignment {
    std::vector<int8_t> labels;                    // +1 positive, -1 negative, 0 ignore
    std::vector<int64_t> positive_anchors;         // ascending anchor ids
    std::vector<std::vector<double>> residuals;    // aligned with positive_anchors
    int residual_length = 0;                       // 24 (corner) or 7 (anchor)
    int64_t n_pos = 0;
    int64_t n_neg = 0;
    // Optional per-anchor vertical slice for imbalance reports.
    std::vector<int32_t> anchor_z_slice;
    int32_t z_slices = 1;
    std::vector<std::string> notes;  // logged events (e.g. center collisions)

    int64_t total() const { return static_cast<int64_t>(labels.size()); }
    int64_t n_ignore() const { return total() - n_pos - n_neg; }

    void recount() {
        n_pos = n_neg = 0;
        for (int8_t l : labels) {
            if (l > 0) ++n_pos;
            else if (l < 0) ++n_neg;
        }
    }
};

// Address computation between anchor ids and the (P-Map, R-Map) tensor pair.
// Works for both detector families: 3D-FCN has one anchor per map cell and
// 24 residual channels; VoxelNet has A anchors per BEV cell and 7 residual
// channels per anchor.
struct MapLayout {
    int64_t anchors_per_cell = 1;
    int64_t res_len = 0;
    int64_t spatial = 0;

    static MapLayout infer(const Tensor& pmap, const Tensor& rmap, const TargetAssignment& ta) {
        if (pmap.rank() < 2 || rmap.rank() < 2)
            throw std::invalid_argument("composite loss: maps must have a channel axis");
        MapLayout m;
        m.anchors_per_cell = pmap.dim(0);
        m.spatial = pmap.numel() / std::max<int64_t>(1, m.anchors_per_cell);
        if (rmap.numel() % std::max<int64_t>(1, rmap.dim(0)) != 0 ||
            rmap.numel() / std::max<int64_t>(1, rmap.dim(0)) != m.spatial)
            throw std::invalid_argument("composite loss: R-Map spatial size " + rmap.shape_str() +
                                        " does not match P-Map " + pmap.shape_str());
        if (rmap.dim(0) % m.anchors_per_cell != 0)
            throw std::invalid_argument("composite loss: R-Map channels not divisible by anchor count");
        m.res_len = rmap.dim(0) / m.anchors_per_cell;
        if (ta.total() != pmap.numel())
            throw std::invalid_argument("composite loss: target count " + std::to_string(ta.total()) +
                                        " does not match P-Map " + pmap.shape_str());
        if (ta.residual_length != 0 && ta.residual_length != m.res_len)
            throw std::invalid_argument("composite loss: residual length mismatch");
        return m;
    }

    // R-Map flat offset of residual component k for the given anchor id.
    int64_t residual_offset(int64_t anchor, int64_t k) const {
        const int64_t a = anchor / spatial;
        const int64_t s = anchor % spatial;
        return (a * res_len + k) * spatial + s;
    }
};

}  // namespace focal3d
