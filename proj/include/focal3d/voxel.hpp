#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "focal3d/common.hpp"
#include "focal3d/tensor.hpp"

namespace focal3d {

struct Point {
    double x = 0.0, y = 0.0, z = 0.0;
    double r = 0.0;  // reflectance in [0, 1]
};

struct PointCloud {
    std::vector<Point> points;
    size_t size() const { return points.size(); }
};

// Voxel grid geometry. Dimensions are counted (D, H, W) = (z, x, y); voxel
// sizes follow the same axis order. Cells are half-open intervals: a point on
// a voxel's upper face belongs to the next voxel, and a point on the grid's
// upper boundary is dropped.
struct VoxelGridSpec {
    double x0 = 0.0, y0 = 0.0, z0 = 0.0;  // grid origin, meters
    double vz = 1.0, vx = 1.0, vy = 1.0;  // voxel size per axis, meters
    int64_t nd = 1, nh = 1, nw = 1;       // counts: D (z), H (x), W (y)

    void validate() const {
        if (!(vz > 0.0 && vx > 0.0 && vy > 0.0))
            throw std::invalid_argument("VoxelGridSpec: voxel sizes must be positive");
        if (nd < 1 || nh < 1 || nw < 1)
            throw std::invalid_argument("VoxelGridSpec: dimensions must be >= 1");
    }

    int64_t cells() const { return nd * nh * nw; }
    int64_t flat(int64_t iz, int64_t ix, int64_t iy) const { return (iz * nh + ix) * nw + iy; }

    // floor((coord - origin) / voxel_size) per axis; false if out of bounds.
    bool index_of(const Point& p, int64_t& iz, int64_t& ix, int64_t& iy) const {
        const double fz = std::floor((p.z - z0) / vz);
        const double fx = std::floor((p.x - x0) / vx);
        const double fy = std::floor((p.y - y0) / vy);
        if (fz < 0 || fx < 0 || fy < 0 || fz >= static_cast<double>(nd) ||
            fx >= static_cast<double>(nh) || fy >= static_cast<double>(nw))
            return false;
        iz = static_cast<int64_t>(fz);
        ix = static_cast<int64_t>(fx);
        iy = static_cast<int64_t>(fy);
        return true;
    }

    double voxel_center_x(int64_t ix) const { return x0 + (static_cast<double>(ix) + 0.5) * vx; }
    double voxel_center_y(int64_t iy) const { return y0 + (static_cast<double>(iy) + 0.5) * vy; }
    double voxel_center_z(int64_t iz) const { return z0 + (static_cast<double>(iz) + 0.5) * vz; }
};

// Car-detection grid presets.
inline VoxelGridSpec grid_preset(const std::string& name) {
    VoxelGridSpec g;
    if (name == "3dfcn-car") {
        // 0.1 m voxels, x lateral [-40, 40), y forward [0, 80), z [-2, 2).
        g.x0 = -40.0; g.y0 = 0.0; g.z0 = -2.0;
        g.vz = 0.1; g.vx = 0.1; g.vy = 0.1;
        g.nd = 40; g.nh = 800; g.nw = 800;
    } else if (name == "voxelnet-car") {
        // (10, 400, 352) cells: z [-3, 1) at 0.4 m, x [-40, 40) at 0.2 m,
        // y forward [0, 70.4) at 0.2 m.
        g.x0 = -40.0; g.y0 = 0.0; g.z0 = -3.0;
        g.vz = 0.4; g.vx = 0.2; g.vy = 0.2;
        g.nd = 10; g.nh = 400; g.nw = 352;
    } else if (name == "3dfcn-mini") {
        // Desk-scale scene: x [0, 25.6), y [-12.8, 12.8), z [-1.4, 5.0).
        g.x0 = 0.0; g.y0 = -12.8; g.z0 = -1.4;
        g.vz = 0.4; g.vx = 0.4; g.vy = 0.4;
        g.nd = 16; g.nh = 64; g.nw = 64;
    } else if (name == "voxelnet-mini") {
        // Desk-scale scene: x [0, 19.2), y [-9.6, 9.6), z [-1, 3).
        g.x0 = 0.0; g.y0 = -9.6; g.z0 = -1.0;
        g.vz = 0.4; g.vx = 0.4; g.vy = 0.4;
        g.nd = 10; g.nh = 48; g.nw = 48;
    } else {
        throw config_error("unknown grid preset: " + name);
    }
    return g;
}

// Binary occupancy grid: 1 iff at least one point fell in the voxel.
struct DenseOccupancy {
    VoxelGridSpec spec;
    std::vector<uint8_t> cells;
    size_t dropped_points = 0;  // out-of-bounds points, counted not stored
};

inline DenseOccupancy voxelize_occupancy(const PointCloud& cloud, const VoxelGridSpec& spec) {
    spec.validate();
    DenseOccupancy occ;
    occ.spec = spec;
    occ.cells.assign(static_cast<size_t>(spec.cells()), 0);
    for (const Point& p : cloud.points) {
        int64_t iz, ix, iy;
        if (spec.index_of(p, iz, ix, iy))
            occ.cells[static_cast<size_t>(spec.flat(iz, ix, iy))] = 1;
        else
            ++occ.dropped_points;
    }
    return occ;
}

// Sparse per-voxel point lists with the 7-feature row layout
// (x, y, z, r, x - cx, y - cy, z - cz) where (cx, cy, cz) is the centroid of
// the retained rows of that voxel.
struct SparseVoxelSet {
    struct Voxel {
        int64_t iz = 0, ix = 0, iy = 0;
        std::vector<std::array<double, 7>> rows;
    };
    VoxelGridSpec spec;
    std::vector<Voxel> voxels;  // sorted by flat index
    int64_t max_rows = 0;       // the T used to build this set
    size_t dropped_points = 0;
};

inline constexpr int64_t kUnlimitedRows = std::numeric_limits<int64_t>::max();

// Deterministic given (cloud, spec, T, seed): per-voxel point lists are
// gathered in original point order, over-full voxels are subsampled with a
// per-voxel seeded shuffle prefix, and the retained rows are re-sorted by
// original point index.
inline SparseVoxelSet voxelize_sparse(const PointCloud& cloud, const VoxelGridSpec& spec,
                                      int64_t max_points_per_voxel, uint64_t seed) {
    spec.validate();
    if (max_points_per_voxel < 1)
        throw std::domain_error("voxelize_sparse: max points per voxel must be >= 1");

    std::map<int64_t, std::vector<size_t>> by_voxel;
    size_t dropped = 0;
    for (size_t i = 0; i < cloud.points.size(); ++i) {
        int64_t iz, ix, iy;
        if (spec.index_of(cloud.points[i], iz, ix, iy))
            by_voxel[spec.flat(iz, ix, iy)].push_back(i);
        else
            ++dropped;
    }

    SparseVoxelSet out;
    out.spec = spec;
    out.max_rows = max_points_per_voxel;
    out.dropped_points = dropped;
    out.voxels.reserve(by_voxel.size());
    for (auto& [flat, indices] : by_voxel) {
        if (static_cast<int64_t>(indices.size()) > max_points_per_voxel) {
            Rng rng(derive_seed(seed, "voxel-subsample", static_cast<uint64_t>(flat)));
            rng.shuffle(indices);
            indices.resize(static_cast<size_t>(max_points_per_voxel));
            std::sort(indices.begin(), indices.end());
        }
        SparseVoxelSet::Voxel vox;
        vox.iy = flat % spec.nw;
        vox.ix = (flat / spec.nw) % spec.nh;
        vox.iz = flat / (spec.nw * spec.nh);
        double cx = 0, cy = 0, cz = 0;
        for (size_t i : indices) {
            cx += cloud.points[i].x;
            cy += cloud.points[i].y;
            cz += cloud.points[i].z;
        }
        const double n = static_cast<double>(indices.size());
        cx /= n;
        cy /= n;
        cz /= n;
        vox.rows.reserve(indices.size());
        for (size_t i : indices) {
            const Point& p = cloud.points[i];
            vox.rows.push_back({p.x, p.y, p.z, p.r, p.x - cx, p.y - cy, p.z - cz});
        }
        out.voxels.push_back(std::move(vox));
    }
    return out;
}

// Per-voxel feature vectors ready for scattering into a dense tensor.
struct VoxelFeature {
    int64_t iz = 0, ix = 0, iy = 0;
    std::vector<double> f;
};

// Scatter per-voxel features into a dense (C, D, H, W) tensor; empty voxels
// stay zero; duplicate indices are a structural error.
inline Tensor scatter_to_dense(const std::vector<VoxelFeature>& features, const VoxelGridSpec& spec,
                               int64_t channels) {
    spec.validate();
    Tensor t({channels, spec.nd, spec.nh, spec.nw});
    std::vector<uint8_t> seen(static_cast<size_t>(spec.cells()), 0);
    const int64_t cell_count = spec.cells();
    for (const VoxelFeature& vf : features) {
        if (static_cast<int64_t>(vf.f.size()) != channels)
            throw std::invalid_argument("scatter_to_dense: feature length != channel count");
        if (vf.iz < 0 || vf.ix < 0 || vf.iy < 0 || vf.iz >= spec.nd || vf.ix >= spec.nh || vf.iy >= spec.nw)
            throw std::invalid_argument("scatter_to_dense: voxel index out of bounds");
        const int64_t flat = spec.flat(vf.iz, vf.ix, vf.iy);
        if (seen[static_cast<size_t>(flat)])
            throw std::invalid_argument("scatter_to_dense: duplicate voxel index");
        seen[static_cast<size_t>(flat)] = 1;
        for (int64_t c = 0; c < channels; ++c)
            t.v[static_cast<size_t>(c * cell_count + flat)] = vf.f[static_cast<size_t>(c)];
    }
    return t;
}

// Exact inverse of scatter_to_dense over the occupied entries.
inline std::vector<VoxelFeature> gather_from_dense(const Tensor& t, const VoxelGridSpec& spec,
                                                   const std::vector<VoxelFeature>& reference) {
    const int64_t channels = t.dim(0);
    const int64_t cell_count = spec.cells();
    std::vector<VoxelFeature> out;
    out.reserve(reference.size());
    for (const VoxelFeature& vf : reference) {
        VoxelFeature g;
        g.iz = vf.iz;
        g.ix = vf.ix;
        g.iy = vf.iy;
        g.f.resize(static_cast<size_t>(channels));
        const int64_t flat = spec.flat(vf.iz, vf.ix, vf.iy);
        for (int64_t c = 0; c < channels; ++c)
            g.f[static_cast<size_t>(c)] = t.v[static_cast<size_t>(c * cell_count + flat)];
        out.push_back(std::move(g));
    }
    return out;
}

struct OccupancyStats {
    int64_t non_empty = 0;
    double fraction = 0.0;
    std::vector<int64_t> per_z;  // indexed by z slice, sums to non_empty
};

inline OccupancyStats occupancy_stats(const DenseOccupancy& occ) {
    OccupancyStats st;
    st.per_z.assign(static_cast<size_t>(occ.spec.nd), 0);
    const int64_t slice = occ.spec.nh * occ.spec.nw;
    for (int64_t i = 0; i < static_cast<int64_t>(occ.cells.size()); ++i) {
        if (occ.cells[static_cast<size_t>(i)]) {
            ++st.non_empty;
            ++st.per_z[static_cast<size_t>(i / slice)];
        }
    }
    st.fraction = occ.spec.cells() > 0
                      ? static_cast<double>(st.non_empty) / static_cast<double>(occ.spec.cells())
                      : 0.0;
    return st;
}

inline OccupancyStats occupancy_stats(const SparseVoxelSet& sv) {
    OccupancyStats st;
    st.per_z.assign(static_cast<size_t>(sv.spec.nd), 0);
    st.non_empty = static_cast<int64_t>(sv.voxels.size());
    for (const auto& v : sv.voxels) ++st.per_z[static_cast<size_t>(v.iz)];
    st.fraction = sv.spec.cells() > 0
                      ? static_cast<double>(st.non_empty) / static_cast<double>(sv.spec.cells())
                      : 0.0;
    return st;
}

}  // namespace focal3d
