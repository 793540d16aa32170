#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "focal3d/autodiff.hpp"
#include "focal3d/common.hpp"
#include "focal3d/voxel.hpp"

namespace focal3d::net {

using ad::Var;

enum class LayerKind { conv3d, conv2d, deconv2d, fc, relu, batchnorm, sigmoid, vfe };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv3d: return "conv3d";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::deconv2d: return "deconv2d";
        case LayerKind::fc: return "fc";
        case LayerKind::relu: return "relu";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::vfe: return "vfe";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind = LayerKind::conv3d;
    std::string name;
    std::array<int64_t, 3> kernel{1, 1, 1};  // (kd, kh, kw); 2-D layers use the last two
    std::array<int64_t, 3> stride{1, 1, 1};
    std::array<int64_t, 3> pad{0, 0, 0};
    int64_t filters = 1;  // output channels / units

    void validate() const {
        for (int i = 0; i < 3; ++i)
            if (kernel[static_cast<size_t>(i)] < 1 || stride[static_cast<size_t>(i)] < 1 ||
                pad[static_cast<size_t>(i)] < 0)
                throw std::invalid_argument("LayerSpec " + name + ": kernel/stride must be >= 1");
        if (filters < 1) throw std::invalid_argument("LayerSpec " + name + ": filters must be >= 1");
    }
};

// Anchor geometry shared by target assignment and decoding.
struct AnchorSpec {
    double l = 3.9, w = 1.6, h = 1.56;  // car mean size
    double z_center = -1.0;
    std::vector<double> yaws{0.0, M_PI / 2};

    double bev_diagonal() const { return std::hypot(l, w); }
    double diagonal3() const { return std::sqrt(l * l + w * w + h * h); }
};

struct NetworkConfig {
    std::string family;  // "3dfcn" or "voxelnet"
    std::string preset;
    VoxelGridSpec grid;
    AnchorSpec anchor;
    int64_t max_points_per_voxel = 35;

    // 3dfcn: body conv blocks (conv3d + relu + batchnorm each) and two heads
    std::vector<LayerSpec> body;
    LayerSpec head_pmap;
    LayerSpec head_rmap;

    // voxelnet: feature net (vfe, vfe, fc), middle conv blocks, rpn blocks
    std::vector<LayerSpec> feature_net;
    std::vector<LayerSpec> middle;
    struct RpnBlock {
        LayerSpec conv_in;               // stride-2 entry conv
        std::vector<LayerSpec> convs;    // stride-1 convs
        LayerSpec deconv;                // branch deconv back to head resolution
    };
    std::vector<RpnBlock> rpn_blocks;

    int64_t pmap_channels() const { return family == "3dfcn" ? 1 : static_cast<int64_t>(anchor.yaws.size()); }
    int64_t rmap_channels() const {
        return family == "3dfcn" ? 24 : 7 * static_cast<int64_t>(anchor.yaws.size());
    }

    // 3dfcn head grid: three stride-2 body convs downsample by 8 per axis.
    int64_t head_downsample() const { return family == "3dfcn" ? 8 : 2; }

    std::array<int64_t, 3> head_dims() const {
        auto ceil_div = [](int64_t a, int64_t b) { return (a + b - 1) / b; };
        if (family == "3dfcn")
            return {ceil_div(grid.nd, 8), ceil_div(grid.nh, 8), ceil_div(grid.nw, 8)};
        return {1, ceil_div(grid.nh, 2), ceil_div(grid.nw, 2)};
    }

    int64_t anchor_count() const {
        const auto hd = head_dims();
        if (family == "3dfcn") return hd[0] * hd[1] * hd[2];
        return static_cast<int64_t>(anchor.yaws.size()) * hd[1] * hd[2];
    }

    void validate() const {
        grid.validate();
        if (family != "3dfcn" && family != "voxelnet")
            throw config_error("NetworkConfig: unknown family " + family);
        if (family == "3dfcn") {
            if (head_pmap.filters != 1 || head_rmap.filters != 24)
                throw config_error("3dfcn heads must emit 1 (P-Map) and 24 (R-Map) channels");
            for (const auto& l : body) l.validate();
        } else {
            if (head_pmap.filters != pmap_channels() || head_rmap.filters != rmap_channels())
                throw config_error("voxelnet heads must emit " + std::to_string(pmap_channels()) +
                                   "/" + std::to_string(rmap_channels()) + " channels");
            for (const auto& l : feature_net) l.validate();
            for (const auto& l : middle) l.validate();
            for (const auto& b : rpn_blocks) {
                b.conv_in.validate();
                b.deconv.validate();
                for (const auto& l : b.convs) l.validate();
            }
        }
        if (!(anchor.l > 0 && anchor.w > 0 && anchor.h > 0))
            throw config_error("anchor sizes must be positive");
        if (anchor.yaws.empty()) throw config_error("anchor yaw set must be nonempty");
    }
};

namespace detail {
inline LayerSpec conv3d_spec(std::string name, int64_t k, std::array<int64_t, 3> stride,
                             std::array<int64_t, 3> pad, int64_t filters) {
    LayerSpec l;
    l.kind = LayerKind::conv3d;
    l.name = std::move(name);
    l.kernel = {k, k, k};
    l.stride = stride;
    l.pad = pad;
    l.filters = filters;
    return l;
}
inline LayerSpec conv2d_spec(std::string name, int64_t k, int64_t stride, int64_t filters) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.name = std::move(name);
    l.kernel = {1, k, k};
    l.stride = {1, stride, stride};
    l.pad = {0, k / 2, k / 2};
    l.filters = filters;
    return l;
}
inline LayerSpec deconv2d_spec(std::string name, int64_t k, int64_t stride, int64_t filters) {
    LayerSpec l;
    l.kind = LayerKind::deconv2d;
    l.name = std::move(name);
    l.kernel = {1, k, k};
    l.stride = {1, stride, stride};
    l.filters = filters;
    return l;
}
inline LayerSpec fc_spec(std::string name, int64_t units, LayerKind kind = LayerKind::fc) {
    LayerSpec l;
    l.kind = kind;
    l.name = std::move(name);
    l.filters = units;
    return l;
}
}  // namespace detail

// Presets follow the published layer tables; "mini" variants shrink channels
// ~4x and grids ~8x while keeping layer kinds, stride pattern, and head
// channel semantics.
inline NetworkConfig network_preset(const std::string& name) {
    using namespace detail;
    NetworkConfig c;
    c.preset = name;
    if (name == "3dfcn-full" || name == "3dfcn-mini") {
        const bool full = name == "3dfcn-full";
        c.family = "3dfcn";
        c.grid = grid_preset(full ? "3dfcn-car" : "3dfcn-mini");
        const int64_t f1 = full ? 32 : 8, f2 = full ? 64 : 16, f3 = full ? 96 : 24;
        c.body = {conv3d_spec("conv3d_1", 5, {2, 2, 2}, {2, 2, 2}, f1),
                  conv3d_spec("conv3d_2", 5, {2, 2, 2}, {2, 2, 2}, f2),
                  conv3d_spec("conv3d_3", 3, {2, 2, 2}, {1, 1, 1}, f3),
                  conv3d_spec("conv3d_4", 3, {1, 1, 1}, {1, 1, 1}, f3)};
        c.head_pmap = conv3d_spec("conv3d_obj", 3, {1, 1, 1}, {1, 1, 1}, 1);
        c.head_rmap = conv3d_spec("conv3d_cor", 3, {1, 1, 1}, {1, 1, 1}, 24);
        c.anchor.z_center = full ? 0.0 : 0.78;
        c.anchor.yaws = {0.0};
    } else if (name == "voxelnet-full" || name == "voxelnet-mini") {
        const bool full = name == "voxelnet-full";
        c.family = "voxelnet";
        c.grid = grid_preset(full ? "voxelnet-car" : "voxelnet-mini");
        const int64_t v1 = full ? 32 : 8, v2 = full ? 128 : 32;
        const int64_t fm = full ? 64 : 16;
        const int64_t r1 = full ? 128 : 32, r3 = full ? 256 : 64, rd = full ? 256 : 64;
        c.feature_net = {fc_spec("vfe_1", v1, LayerKind::vfe), fc_spec("vfe_2", v2, LayerKind::vfe),
                         fc_spec("fc_1", v2)};
        c.middle = {conv3d_spec("mid_conv3d_1", 3, {2, 1, 1}, {1, 1, 1}, fm),
                    conv3d_spec("mid_conv3d_2", 3, {1, 1, 1}, {0, 1, 1}, fm),
                    conv3d_spec("mid_conv3d_3", 3, {2, 1, 1}, {1, 1, 1}, fm)};
        NetworkConfig::RpnBlock b1, b2, b3;
        b1.conv_in = conv2d_spec("rpn1_conv_0", 3, 2, r1);
        for (int i = 1; i <= 3; ++i) b1.convs.push_back(conv2d_spec("rpn1_conv_" + std::to_string(i), 3, 1, r1));
        b1.deconv = deconv2d_spec("rpn1_deconv", 3, 1, rd);
        b2.conv_in = conv2d_spec("rpn2_conv_0", 3, 2, r1);
        for (int i = 1; i <= 5; ++i) b2.convs.push_back(conv2d_spec("rpn2_conv_" + std::to_string(i), 3, 1, r1));
        b2.deconv = deconv2d_spec("rpn2_deconv", 2, 2, rd);
        b3.conv_in = conv2d_spec("rpn3_conv_0", 3, 2, r3);
        for (int i = 1; i <= 5; ++i) b3.convs.push_back(conv2d_spec("rpn3_conv_" + std::to_string(i), 3, 1, r3));
        b3.deconv = deconv2d_spec("rpn3_deconv", 4, 4, rd);
        c.rpn_blocks = {b1, b2, b3};
        c.head_pmap = conv2d_spec("prob_map", 1, 1, 2);
        c.head_rmap = conv2d_spec("reg_map", 1, 1, 14);
        c.anchor.z_center = full ? -1.0 : 0.78;
        c.anchor.yaws = {0.0, M_PI / 2};
    } else {
        throw config_error("unknown network preset: " + name);
    }
    c.validate();
    return c;
}

// --- parameters ---------------------------------------------------------------

// Ordered map keeps optimizer walks and checkpoints deterministic.
using ParamMap = std::map<std::string, Var>;

namespace detail {
inline Var he_uniform(ParamMap& params, const std::string& name, std::vector<int64_t> shape,
                      int64_t fan_in, uint64_t seed) {
    Tensor t(shape);
    Rng rng(derive_seed(seed, name));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.v) v = rng.uniform(-bound, bound);
    auto p = ad::param(std::move(t), name);
    params[name] = p;
    return p;
}

inline void zeros_param(ParamMap& params, const std::string& name, std::vector<int64_t> shape) {
    params[name] = ad::param(Tensor(std::move(shape)), name);
}

inline void bn_params(ParamMap& params, const std::string& prefix, int64_t channels) {
    params[prefix + ".scale"] = ad::param(Tensor::full({channels}, 1.0), prefix + ".scale");
    params[prefix + ".shift"] = ad::param(Tensor({channels}), prefix + ".shift");
    auto mean = ad::make_var(Tensor({channels}), false, prefix + ".running_mean");
    auto var = ad::make_var(Tensor::full({channels}, 1.0), false, prefix + ".running_var");
    params[prefix + ".running_mean"] = mean;
    params[prefix + ".running_var"] = var;
}

inline void conv_params(ParamMap& params, const LayerSpec& l, int64_t c_in, uint64_t seed, bool bn) {
    const auto [kd, kh, kw] = l.kernel;
    const int64_t fan_in = c_in * kd * kh * kw;
    if (l.kind == LayerKind::deconv2d)
        he_uniform(params, l.name + ".w", {c_in, l.filters, kh, kw}, fan_in, seed);
    else if (l.kind == LayerKind::conv2d)
        he_uniform(params, l.name + ".w", {l.filters, c_in, kh, kw}, fan_in, seed);
    else
        he_uniform(params, l.name + ".w", {l.filters, c_in, kd, kh, kw}, fan_in, seed);
    zeros_param(params, l.name + ".b", {l.filters});
    if (bn) bn_params(params, l.name + ".bn", l.filters);
}

inline void fc_params(ParamMap& params, const std::string& name, int64_t in, int64_t out,
                      uint64_t seed, bool bn) {
    he_uniform(params, name + ".w", {in, out}, in, seed);
    zeros_param(params, name + ".b", {out});
    if (bn) bn_params(params, name + ".bn", out);
}
}  // namespace detail

inline ParamMap init_params(const NetworkConfig& cfg, uint64_t seed) {
    cfg.validate();
    ParamMap p;
    if (cfg.family == "3dfcn") {
        int64_t c = 1;
        for (const auto& l : cfg.body) {
            detail::conv_params(p, l, c, seed, true);
            c = l.filters;
        }
        detail::conv_params(p, cfg.head_pmap, c, seed, false);
        detail::conv_params(p, cfg.head_rmap, c, seed, false);
    } else {
        int64_t c = 7;
        for (const auto& l : cfg.feature_net) {
            const int64_t out = l.kind == LayerKind::vfe ? l.filters / 2 : l.filters;
            detail::fc_params(p, l.name, c, out, seed, true);
            c = l.filters;
        }
        for (const auto& l : cfg.middle) {
            detail::conv_params(p, l, c, seed, true);
            c = l.filters;
        }
        // middle output depth after the stride pattern
        int64_t d = cfg.grid.nd;
        for (const auto& l : cfg.middle)
            d = ad::detail::conv_out(d, l.kernel[0], l.stride[0], l.pad[0]);
        int64_t cc = c * d;
        int64_t branch_in = 0;
        for (const auto& b : cfg.rpn_blocks) {
            detail::conv_params(p, b.conv_in, cc, seed, true);
            cc = b.conv_in.filters;
            for (const auto& l : b.convs) {
                detail::conv_params(p, l, cc, seed, true);
                cc = l.filters;
            }
            detail::conv_params(p, b.deconv, cc, seed, true);
            branch_in += b.deconv.filters;
        }
        detail::conv_params(p, cfg.head_pmap, branch_in, seed, false);
        detail::conv_params(p, cfg.head_rmap, branch_in, seed, false);
    }
    return p;
}

inline Var get_param(const ParamMap& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::logic_error("missing parameter: " + name);
    return it->second;
}

// --- batchnorm with tracked statistics -----------------------------------------

// Normalization uses the current sample's per-channel statistics in both
// training and inference (the desk-scale batch is one frame, so this is
// per-frame normalization); gradients flow through the statistics. The
// tracked running statistics are updated with momentum 0.9 during training
// and ride along in checkpoints as diagnostics.
inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.9;

// Normalize with the tracked running statistics (constants): the single-voxel
// vfe_layer op uses this so its output is exactly invariant to row
// duplication and permutation.
inline Var apply_batchnorm_tracked(const Var& x, const ParamMap& params, const std::string& prefix) {
    return ad::batchnorm(x, get_param(params, prefix + ".scale"), get_param(params, prefix + ".shift"),
                         get_param(params, prefix + ".running_mean"),
                         get_param(params, prefix + ".running_var"), 1e-5, prefix);
}

inline Var apply_batchnorm(const Var& x, const ParamMap& params, const std::string& prefix,
                           bool training) {
    auto scale = get_param(params, prefix + ".scale");
    auto shift = get_param(params, prefix + ".shift");
    std::vector<double> bm, bv;
    auto y = ad::batchnorm_train(x, scale, shift, kBnEps, &bm, &bv, prefix);
    if (training) {
        auto mean = get_param(params, prefix + ".running_mean");
        auto var = get_param(params, prefix + ".running_var");
        const int64_t C = scale->numel();
        for (int64_t c = 0; c < C; ++c) {
            mean->t.v[static_cast<size_t>(c)] = kBnMomentum * mean->t.v[static_cast<size_t>(c)] +
                                                (1.0 - kBnMomentum) * bm[static_cast<size_t>(c)];
            var->t.v[static_cast<size_t>(c)] = kBnMomentum * var->t.v[static_cast<size_t>(c)] +
                                               (1.0 - kBnMomentum) * bv[static_cast<size_t>(c)];
        }
    }
    return y;
}

// --- forward graphs -------------------------------------------------------------

struct ForwardResult {
    Var pmap_logits;
    Var rmap;
};

inline Var apply_conv3d_block(const Var& x, const LayerSpec& l, const ParamMap& params, bool training) {
    auto y = ad::conv3d(x, get_param(params, l.name + ".w"), get_param(params, l.name + ".b"),
                        l.stride, l.pad, l.name);
    y = ad::vrelu(y);
    return apply_batchnorm(y, params, l.name + ".bn", training);
}

inline Var apply_conv2d_block(const Var& x, const LayerSpec& l, const ParamMap& params, bool training) {
    auto y = ad::conv2d(x, get_param(params, l.name + ".w"), get_param(params, l.name + ".b"),
                        {l.stride[1], l.stride[2]}, {l.pad[1], l.pad[2]}, l.name);
    y = ad::vrelu(y);
    return apply_batchnorm(y, params, l.name + ".bn", training);
}

inline ForwardResult forward_3dfcn(const NetworkConfig& cfg, const ParamMap& params,
                                   const DenseOccupancy& occ, bool training = false) {
    if (cfg.family != "3dfcn") throw std::invalid_argument("forward_3dfcn: config family mismatch");
    Tensor in({1, occ.spec.nd, occ.spec.nh, occ.spec.nw});
    for (size_t i = 0; i < occ.cells.size(); ++i) in.v[i] = occ.cells[i] ? 1.0 : 0.0;
    Var x = ad::constant(std::move(in), "occupancy");
    for (const auto& l : cfg.body) x = apply_conv3d_block(x, l, params, training);
    auto pmap = ad::conv3d(x, get_param(params, cfg.head_pmap.name + ".w"),
                           get_param(params, cfg.head_pmap.name + ".b"), cfg.head_pmap.stride,
                           cfg.head_pmap.pad, cfg.head_pmap.name);
    auto rmap = ad::conv3d(x, get_param(params, cfg.head_rmap.name + ".w"),
                           get_param(params, cfg.head_rmap.name + ".b"), cfg.head_rmap.stride,
                           cfg.head_rmap.pad, cfg.head_rmap.name);
    return {pmap, rmap};
}

// One VFE stage: pointwise fc+bn+relu, segment max, concat of point-wise and
// aggregated features.
inline Var apply_vfe(const Var& rows, const LayerSpec& l, const ParamMap& params,
                     const std::vector<int64_t>& offsets, bool training, bool tracked_stats = false) {
    auto y = ad::matmul(rows, get_param(params, l.name + ".w"), l.name);
    y = ad::bias_add_rows(y, get_param(params, l.name + ".b"), l.name);
    y = tracked_stats ? apply_batchnorm_tracked(y, params, l.name + ".bn")
                      : apply_batchnorm(y, params, l.name + ".bn", training);
    y = ad::vrelu(y);
    auto agg = ad::segment_max(y, offsets, l.name + ".max");
    auto bcast = ad::segment_broadcast(agg, offsets, l.name + ".bcast");
    return ad::concat_cols(y, bcast, l.name + ".concat");
}

// FeatureNet on a stacked row matrix: (vfe, vfe, fc) then the final per-voxel
// elementwise max. Returns (V, C) voxel features.
inline Var feature_net_forward(const NetworkConfig& cfg, const ParamMap& params, const Var& rows,
                               const std::vector<int64_t>& offsets, bool training,
                               bool tracked_stats = false) {
    Var x = rows;
    for (const auto& l : cfg.feature_net) {
        if (l.kind == LayerKind::vfe) {
            x = apply_vfe(x, l, params, offsets, training, tracked_stats);
        } else {
            auto y = ad::matmul(x, get_param(params, l.name + ".w"), l.name);
            y = ad::bias_add_rows(y, get_param(params, l.name + ".b"), l.name);
            y = tracked_stats ? apply_batchnorm_tracked(y, params, l.name + ".bn")
                              : apply_batchnorm(y, params, l.name + ".bn", training);
            x = ad::vrelu(y);
        }
    }
    return ad::segment_max(x, offsets, "featurenet.max");
}

// Spec-facing single-voxel entry point: runs the FeatureNet stack on one
// voxel's rows and returns its aggregated feature vector.
inline std::vector<double> vfe_layer(const NetworkConfig& cfg, const ParamMap& params,
                                     const std::vector<std::array<double, 7>>& voxel_rows) {
    if (voxel_rows.empty()) throw std::domain_error("vfe_layer: empty voxel");
    Tensor rows({static_cast<int64_t>(voxel_rows.size()), 7});
    for (size_t i = 0; i < voxel_rows.size(); ++i)
        for (int k = 0; k < 7; ++k) rows.v[i * 7 + static_cast<size_t>(k)] = voxel_rows[i][static_cast<size_t>(k)];
    auto out = feature_net_forward(cfg, params, ad::constant(std::move(rows)),
                                   {0, static_cast<int64_t>(voxel_rows.size())}, false,
                                   /*tracked_stats=*/true);
    return out->t.v;
}

inline ForwardResult forward_voxelnet(const NetworkConfig& cfg, const ParamMap& params,
                                      const SparseVoxelSet& sv, bool training = false) {
    if (cfg.family != "voxelnet") throw std::invalid_argument("forward_voxelnet: config family mismatch");
    // stack rows; remember per-voxel segments and cell indices
    int64_t n_rows = 0;
    for (const auto& v : sv.voxels) n_rows += static_cast<int64_t>(v.rows.size());
    std::vector<int64_t> offsets{0};
    std::vector<int64_t> cells;
    Tensor rows({std::max<int64_t>(n_rows, 0), 7});
    int64_t r = 0;
    for (const auto& v : sv.voxels) {
        for (const auto& row : v.rows) {
            for (int k = 0; k < 7; ++k) rows.v[static_cast<size_t>(r * 7 + k)] = row[static_cast<size_t>(k)];
            ++r;
        }
        offsets.push_back(r);
        cells.push_back(sv.spec.flat(v.iz, v.ix, v.iy));
    }

    Var dense;
    const int64_t feat_c = cfg.feature_net.back().filters;
    if (sv.voxels.empty()) {
        dense = ad::constant(Tensor({feat_c, sv.spec.nd, sv.spec.nh, sv.spec.nw}), "scatter");
    } else {
        auto vox_feat = feature_net_forward(cfg, params, ad::constant(std::move(rows), "points"),
                                            offsets, training);
        dense = ad::scatter_voxels(vox_feat, cells, {sv.spec.nd, sv.spec.nh, sv.spec.nw}, "scatter");
    }

    Var x = dense;
    for (const auto& l : cfg.middle) x = apply_conv3d_block(x, l, params, training);
    // (C, D', H, W) -> bird's-eye-view (C*D', H, W)
    x = ad::reshape(x, {x->t.dim(0) * x->t.dim(1), x->t.dim(2), x->t.dim(3)});

    std::vector<Var> branches;
    const auto hd = cfg.head_dims();
    for (const auto& b : cfg.rpn_blocks) {
        x = apply_conv2d_block(x, b.conv_in, params, training);
        for (const auto& l : b.convs) x = apply_conv2d_block(x, l, params, training);
        auto up = ad::deconv2d(x, get_param(params, b.deconv.name + ".w"),
                               get_param(params, b.deconv.name + ".b"),
                               {b.deconv.stride[1], b.deconv.stride[2]}, {hd[1], hd[2]},
                               b.deconv.name);
        up = ad::vrelu(up);
        branches.push_back(apply_batchnorm(up, params, b.deconv.name + ".bn", training));
    }
    auto feat = ad::concat_channels(branches, "rpn.concat");
    auto pmap = ad::conv2d(feat, get_param(params, cfg.head_pmap.name + ".w"),
                           get_param(params, cfg.head_pmap.name + ".b"), {1, 1}, {0, 0},
                           cfg.head_pmap.name);
    auto rmap = ad::conv2d(feat, get_param(params, cfg.head_rmap.name + ".w"),
                           get_param(params, cfg.head_rmap.name + ".b"), {1, 1}, {0, 0},
                           cfg.head_rmap.name);
    return {pmap, rmap};
}

using FrameInput = std::variant<DenseOccupancy, SparseVoxelSet>;

inline ForwardResult forward(const NetworkConfig& cfg, const ParamMap& params, const FrameInput& in,
                             bool training = false) {
    if (std::holds_alternative<DenseOccupancy>(in))
        return forward_3dfcn(cfg, params, std::get<DenseOccupancy>(in), training);
    return forward_voxelnet(cfg, params, std::get<SparseVoxelSet>(in), training);
}

// --- FLOPs estimate -------------------------------------------------------------

// multiply-add counts x2: 2*K*C_in*C_out*spatial_out for convolutions (the
// transposed conv contributes 2*K*C_in*C_out*spatial_in multiply-adds), and
// 2*in*out*rows for fc/vfe layers under the given row assumption.
struct LayerCost {
    std::string name;
    LayerKind kind;
    double flops = 0.0;
};

inline std::vector<LayerCost> flops_estimate(const NetworkConfig& cfg,
                                             int64_t assumed_occupied_voxels = 5300,
                                             int64_t assumed_rows_per_voxel = 10) {
    cfg.validate();
    std::vector<LayerCost> out;
    auto conv_cost = [&](const LayerSpec& l, int64_t c_in, int64_t spatial) {
        const double k = static_cast<double>(l.kernel[0] * l.kernel[1] * l.kernel[2]);
        out.push_back({l.name, l.kind,
                       2.0 * k * static_cast<double>(c_in) * static_cast<double>(l.filters) *
                           static_cast<double>(spatial)});
    };
    if (cfg.family == "3dfcn") {
        int64_t c = 1, d = cfg.grid.nd, h = cfg.grid.nh, w = cfg.grid.nw;
        for (const auto& l : cfg.body) {
            d = ad::detail::conv_out(d, l.kernel[0], l.stride[0], l.pad[0]);
            h = ad::detail::conv_out(h, l.kernel[1], l.stride[1], l.pad[1]);
            w = ad::detail::conv_out(w, l.kernel[2], l.stride[2], l.pad[2]);
            conv_cost(l, c, d * h * w);
            c = l.filters;
        }
        conv_cost(cfg.head_pmap, c, d * h * w);
        conv_cost(cfg.head_rmap, c, d * h * w);
    } else {
        const int64_t rows = assumed_occupied_voxels * assumed_rows_per_voxel;
        int64_t c = 7;
        for (const auto& l : cfg.feature_net) {
            const int64_t units = l.kind == LayerKind::vfe ? l.filters / 2 : l.filters;
            out.push_back({l.name, l.kind,
                           2.0 * static_cast<double>(c) * static_cast<double>(units) *
                               static_cast<double>(rows)});
            c = l.filters;
        }
        int64_t d = cfg.grid.nd, h = cfg.grid.nh, w = cfg.grid.nw;
        for (const auto& l : cfg.middle) {
            d = ad::detail::conv_out(d, l.kernel[0], l.stride[0], l.pad[0]);
            h = ad::detail::conv_out(h, l.kernel[1], l.stride[1], l.pad[1]);
            w = ad::detail::conv_out(w, l.kernel[2], l.stride[2], l.pad[2]);
            conv_cost(l, c, d * h * w);
            c = l.filters;
        }
        c = c * d;
        const auto hd = cfg.head_dims();
        for (const auto& b : cfg.rpn_blocks) {
            h = ad::detail::conv_out(h, b.conv_in.kernel[1], b.conv_in.stride[1], b.conv_in.pad[1]);
            w = ad::detail::conv_out(w, b.conv_in.kernel[2], b.conv_in.stride[2], b.conv_in.pad[2]);
            conv_cost(b.conv_in, c, h * w);
            c = b.conv_in.filters;
            for (const auto& l : b.convs) {
                conv_cost(l, c, h * w);
                c = l.filters;
            }
            // transposed conv: one kernel application per input cell
            const double k = static_cast<double>(b.deconv.kernel[1] * b.deconv.kernel[2]);
            out.push_back({b.deconv.name, b.deconv.kind,
                           2.0 * k * static_cast<double>(c) * static_cast<double>(b.deconv.filters) *
                               static_cast<double>(h * w)});
        }
        int64_t branch_c = 0;
        for (const auto& b : cfg.rpn_blocks) branch_c += b.deconv.filters;
        conv_cost(cfg.head_pmap, branch_c, hd[1] * hd[2]);
        conv_cost(cfg.head_rmap, branch_c, hd[1] * hd[2]);
    }
    return out;
}

// --- checkpoints ------------------------------------------------------------------

// A checkpoint is <prefix>.bin (concatenated little-endian float64 arrays) plus
// <prefix>.json listing names, shapes and byte offsets.
inline void save_checkpoint(const std::string& prefix, const ParamMap& params) {
    nlohmann::json manifest;
    manifest["version"] = kToolkitVersion;
    manifest["arrays"] = nlohmann::json::array();
    std::ofstream bin(prefix + ".bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw data_error("cannot write checkpoint: " + prefix + ".bin");
    int64_t offset = 0;
    for (const auto& [name, var] : params) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = var->t.shape;
        entry["offset"] = offset;
        manifest["arrays"].push_back(entry);
        const auto bytes = static_cast<std::streamsize>(var->t.v.size() * sizeof(double));
        bin.write(reinterpret_cast<const char*>(var->t.v.data()), bytes);
        offset += bytes;
    }
    bin.close();
    std::ofstream js(prefix + ".json", std::ios::trunc);
    js << manifest.dump(2) << "\n";
}

inline ParamMap load_checkpoint(const std::string& prefix, bool check_version = true) {
    std::ifstream js(prefix + ".json");
    if (!js) throw data_error("cannot read checkpoint manifest: " + prefix + ".json");
    nlohmann::json manifest = nlohmann::json::parse(js);
    const std::string version = manifest.value("version", "?");
    if (check_version && version != kToolkitVersion)
        throw data_error("checkpoint version mismatch: file " + version + " vs toolkit " +
                         kToolkitVersion);
    std::ifstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) throw data_error("cannot read checkpoint data: " + prefix + ".bin");
    ParamMap params;
    for (const auto& entry : manifest["arrays"]) {
        const std::string name = entry["name"];
        std::vector<int64_t> shape = entry["shape"].get<std::vector<int64_t>>();
        Tensor t(shape);
        bin.seekg(entry["offset"].get<int64_t>());
        bin.read(reinterpret_cast<char*>(t.v.data()),
                 static_cast<std::streamsize>(t.v.size() * sizeof(double)));
        if (!bin) throw data_error("truncated checkpoint: " + prefix + ".bin at array " + name);
        const bool trainable = name.find(".running_") == std::string::npos;
        params[name] = ad::make_var(std::move(t), trainable, name);
    }
    return params;
}

}  // namespace focal3d::net
