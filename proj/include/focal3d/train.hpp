#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "focal3d/analysis.hpp"
#include "focal3d/data.hpp"
#include "focal3d/loss_graph.hpp"
#include "focal3d/losses.hpp"
#include "focal3d/network.hpp"
#include "focal3d/targets.hpp"

namespace focal3d {

// --- anchors and target assignment ---------------------------------------------

// Head-resolution grid of the 3D-FCN: the body downsamples by 8 per axis.
inline VoxelGridSpec head_grid_3dfcn(const net::NetworkConfig& cfg) {
    VoxelGridSpec g = cfg.grid;
    auto ceil_div = [](int64_t a, int64_t b) { return (a + b - 1) / b; };
    g.vz *= 8;
    g.vx *= 8;
    g.vy *= 8;
    g.nd = ceil_div(cfg.grid.nd, 8);
    g.nh = ceil_div(cfg.grid.nh, 8);
    g.nw = ceil_div(cfg.grid.nw, 8);
    return g;
}

// The voxel containing an object center becomes the positive anchor, carrying
// the 24 corner offsets from the voxel center normalized by the anchor
// diagonal; every other voxel is negative. Center collisions keep the larger
// support and log the event.
inline TargetAssignment assign_targets_3dfcn(const VoxelGridSpec& head_grid,
                                             const std::vector<Label>& labels,
                                             const net::AnchorSpec& anchor) {
    head_grid.validate();
    TargetAssignment ta;
    ta.residual_length = 24;
    ta.labels.assign(static_cast<size_t>(head_grid.cells()), -1);
    ta.z_slices = static_cast<int32_t>(head_grid.nd);
    ta.anchor_z_slice.resize(static_cast<size_t>(head_grid.cells()));
    const int64_t slice = head_grid.nh * head_grid.nw;
    for (int64_t a = 0; a < head_grid.cells(); ++a)
        ta.anchor_z_slice[static_cast<size_t>(a)] = static_cast<int32_t>(a / slice);

    const double diag = anchor.diagonal3();
    std::map<int64_t, size_t> owner;  // cell -> label index
    for (size_t li = 0; li < labels.size(); ++li) {
        const Box3D& b = labels[li].box;
        Point center{b.x, b.y, b.z, 0};
        int64_t iz, ix, iy;
        if (!head_grid.index_of(center, iz, ix, iy)) {
            ta.notes.push_back("label outside head grid skipped: " + labels[li].type);
            continue;
        }
        const int64_t cell = head_grid.flat(iz, ix, iy);
        auto it = owner.find(cell);
        if (it != owner.end()) {
            const size_t other = it->second;
            ta.notes.push_back("center collision in voxel " + std::to_string(cell) +
                               ": kept larger-support label");
            if (labels[li].support <= labels[other].support) continue;
        }
        owner[cell] = li;
    }

    for (const auto& [cell, li] : owner) {
        const Box3D& b = labels[li].box;
        const auto corners = corners24(b);
        const double cx = head_grid.voxel_center_x((cell / head_grid.nw) % head_grid.nh);
        const double cy = head_grid.voxel_center_y(cell % head_grid.nw);
        const double cz = head_grid.voxel_center_z(cell / slice);
        std::vector<double> res(24);
        for (int k = 0; k < 8; ++k) {
            res[static_cast<size_t>(3 * k + 0)] = (corners[static_cast<size_t>(3 * k + 0)] - cx) / diag;
            res[static_cast<size_t>(3 * k + 1)] = (corners[static_cast<size_t>(3 * k + 1)] - cy) / diag;
            res[static_cast<size_t>(3 * k + 2)] = (corners[static_cast<size_t>(3 * k + 2)] - cz) / diag;
        }
        ta.labels[static_cast<size_t>(cell)] = +1;
        ta.positive_anchors.push_back(cell);
        ta.residuals.push_back(std::move(res));
    }
    ta.recount();
    return ta;
}

inline Box3D decode_corner_residual(const std::vector<double>& res, double cx, double cy, double cz,
                                    double diag) {
    CornerResidual24 corners{};
    for (int k = 0; k < 8; ++k) {
        corners[static_cast<size_t>(3 * k + 0)] = res[static_cast<size_t>(3 * k + 0)] * diag + cx;
        corners[static_cast<size_t>(3 * k + 1)] = res[static_cast<size_t>(3 * k + 1)] * diag + cy;
        corners[static_cast<size_t>(3 * k + 2)] = res[static_cast<size_t>(3 * k + 2)] * diag + cz;
    }
    return box_from_corners24(corners);
}

// Anchor boxes in P-Map order: yaw-major over head BEV cells.
inline std::vector<Box3D> make_anchors(const net::NetworkConfig& cfg) {
    const auto hd = cfg.head_dims();
    const double cell_x = cfg.grid.vx * static_cast<double>(cfg.head_downsample());
    const double cell_y = cfg.grid.vy * static_cast<double>(cfg.head_downsample());
    std::vector<Box3D> anchors;
    anchors.reserve(static_cast<size_t>(cfg.anchor_count()));
    for (double yaw : cfg.anchor.yaws)
        for (int64_t ix = 0; ix < hd[1]; ++ix)
            for (int64_t iy = 0; iy < hd[2]; ++iy)
                anchors.emplace_back(cfg.grid.x0 + (static_cast<double>(ix) + 0.5) * cell_x,
                                     cfg.grid.y0 + (static_cast<double>(iy) + 0.5) * cell_y,
                                     cfg.anchor.z_center, cfg.anchor.l, cfg.anchor.w, cfg.anchor.h,
                                     yaw);
    return anchors;
}

// VoxelNet matching: an anchor is positive when its BEV IoU with some label
// reaches pos_iou or it is that label's best anchor; negative when the best
// IoU stays below neg_iou; ignored otherwise. Positives carry encode7
// residuals against their best label.
inline TargetAssignment assign_targets_voxelnet(const net::NetworkConfig& cfg,
                                                const std::vector<Label>& labels, double pos_iou,
                                                double neg_iou) {
    if (!(0.0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1.0))
        throw std::domain_error("assign_targets_voxelnet: need 0 <= neg_iou <= pos_iou <= 1");
    const auto anchors = make_anchors(cfg);
    const int64_t n = static_cast<int64_t>(anchors.size());
    TargetAssignment ta;
    ta.residual_length = 7;
    ta.labels.assign(static_cast<size_t>(n), 0);
    ta.z_slices = static_cast<int32_t>(cfg.grid.nd);
    {
        int64_t iz = static_cast<int64_t>(std::floor((cfg.anchor.z_center - cfg.grid.z0) / cfg.grid.vz));
        iz = std::clamp<int64_t>(iz, 0, cfg.grid.nd - 1);
        ta.anchor_z_slice.assign(static_cast<size_t>(n), static_cast<int32_t>(iz));
    }

    std::vector<double> best_iou(static_cast<size_t>(n), 0.0);
    std::vector<int64_t> best_label(static_cast<size_t>(n), -1);
    std::vector<int64_t> label_best_anchor(labels.size(), -1);
    std::vector<double> label_best_iou(labels.size(), -1.0);

    for (int64_t a = 0; a < n; ++a) {
        const Box3D& ab = anchors[static_cast<size_t>(a)];
        const double reach_a = 0.5 * std::hypot(ab.l, ab.w);
        for (size_t li = 0; li < labels.size(); ++li) {
            const Box3D& lb = labels[li].box;
            const double reach = reach_a + 0.5 * std::hypot(lb.l, lb.w);
            if (std::hypot(lb.x - ab.x, lb.y - ab.y) > reach) continue;  // disjoint footprints
            const double v = bev_iou(ab, lb);
            if (v > best_iou[static_cast<size_t>(a)]) {
                best_iou[static_cast<size_t>(a)] = v;
                best_label[static_cast<size_t>(a)] = static_cast<int64_t>(li);
            }
            if (v > label_best_iou[li]) {
                label_best_iou[li] = v;
                label_best_anchor[li] = a;
            }
        }
    }
    // argmax fallback keeps every label matched to at least one anchor
    for (size_t li = 0; li < labels.size(); ++li) {
        if (label_best_anchor[li] < 0 || !(label_best_iou[li] > 0.0))
            ta.notes.push_back("label " + std::to_string(li) + " overlaps no anchor");
    }
    for (size_t li = 0; li < labels.size(); ++li)
        if (label_best_anchor[li] >= 0 && label_best_iou[li] > 0.0) {
            const int64_t a = label_best_anchor[li];
            best_label[static_cast<size_t>(a)] = static_cast<int64_t>(li);
            best_iou[static_cast<size_t>(a)] = std::max(best_iou[static_cast<size_t>(a)], pos_iou);
        }

    for (int64_t a = 0; a < n; ++a) {
        if (best_label[static_cast<size_t>(a)] >= 0 && best_iou[static_cast<size_t>(a)] >= pos_iou) {
            ta.labels[static_cast<size_t>(a)] = +1;
            ta.positive_anchors.push_back(a);
            const auto& lb = labels[static_cast<size_t>(best_label[static_cast<size_t>(a)])].box;
            const auto r = encode7(lb, anchors[static_cast<size_t>(a)]);
            ta.residuals.emplace_back(r.begin(), r.end());
        } else if (best_iou[static_cast<size_t>(a)] < neg_iou) {
            ta.labels[static_cast<size_t>(a)] = -1;
        }
    }
    ta.recount();
    return ta;
}

// --- prediction ---------------------------------------------------------------------

struct PredictConfig {
    double score_cut = 0.5;    // exclusive lower bound on kept scores
    double nms_iou = 0.8;
    IouMetric nms_metric = IouMetric::bev;
    uint64_t voxelize_seed = 0;
};

inline net::FrameInput frame_input(const net::NetworkConfig& cfg, const Frame& frame,
                                   uint64_t voxelize_seed) {
    if (cfg.family == "3dfcn") return voxelize_occupancy(frame.cloud, cfg.grid);
    return voxelize_sparse(frame.cloud, cfg.grid, cfg.max_points_per_voxel,
                           derive_seed(voxelize_seed, "voxelize", fnv1a64(frame.id)));
}

inline bool finite_box(const Box3D& b) {
    return std::isfinite(b.x) && std::isfinite(b.y) && std::isfinite(b.z) && std::isfinite(b.l) &&
           std::isfinite(b.w) && std::isfinite(b.h) && std::isfinite(b.yaw);
}

inline std::vector<Detection> decode_detections(const net::NetworkConfig& cfg, const Tensor& pmap,
                                                const Tensor& rmap, const PredictConfig& pc) {
    std::vector<Detection> raw;
    const int64_t n = pmap.numel();
    const MapLayout layout{pmap.dim(0), rmap.dim(0) / pmap.dim(0), n / pmap.dim(0)};
    if (cfg.family == "3dfcn") {
        const auto hg = head_grid_3dfcn(cfg);
        const double diag = cfg.anchor.diagonal3();
        const int64_t slice = hg.nh * hg.nw;
        for (int64_t a = 0; a < n; ++a) {
            const double score = sigmoid(pmap.v[static_cast<size_t>(a)]);
            if (!(score > pc.score_cut)) continue;
            std::vector<double> res(24);
            for (int64_t k = 0; k < 24; ++k)
                res[static_cast<size_t>(k)] = rmap.v[static_cast<size_t>(layout.residual_offset(a, k))];
            const double cx = hg.voxel_center_x((a / hg.nw) % hg.nh);
            const double cy = hg.voxel_center_y(a % hg.nw);
            const double cz = hg.voxel_center_z(a / slice);
            try {
                Detection d{decode_corner_residual(res, cx, cy, cz, diag), score};
                if (finite_box(d.box)) raw.push_back(d);
            } catch (const std::domain_error&) {
                // degenerate corner set (zero edge); not a detection
            }
        }
    } else {
        const auto anchors = make_anchors(cfg);
        for (int64_t a = 0; a < n; ++a) {
            const double score = sigmoid(pmap.v[static_cast<size_t>(a)]);
            if (!(score > pc.score_cut)) continue;
            AnchorResidual7 r;
            for (int64_t k = 0; k < 7; ++k)
                r[static_cast<size_t>(k)] = rmap.v[static_cast<size_t>(layout.residual_offset(a, k))];
            try {
                Detection d{decode7(r, anchors[static_cast<size_t>(a)]), score};
                if (finite_box(d.box)) raw.push_back(d);
            } catch (const std::domain_error&) {
            }
        }
    }
    const auto kept = nms(raw, pc.nms_iou, pc.nms_metric);
    std::vector<Detection> out;
    out.reserve(kept.size());
    for (size_t k : kept) out.push_back(raw[k]);
    return out;
}

inline std::vector<Detection> predict(const net::NetworkConfig& cfg, const net::ParamMap& params,
                                      const Frame& frame, const PredictConfig& pc) {
    const auto input = frame_input(cfg, frame, pc.voxelize_seed);
    const auto maps = net::forward(cfg, params, input, false);
    return decode_detections(cfg, maps.pmap_logits->t, maps.rmap->t, pc);
}

// --- training --------------------------------------------------------------------------

struct TrainConfig {
    int64_t epochs_phase1 = 30;
    int64_t epochs_phase2 = 30;
    double lr = 0.01;
    double lr2_factor = 0.1;  // phase-2 learning rate is lr2_factor * lr
    int64_t batch_size = 2;
    double momentum = 0.9;
    std::string optimizer = "sgd";
    LossConfig loss;  // gamma applies to phase 2; phase 1 runs gamma = 0
    uint64_t seed = 0;
    int64_t checkpoint_every = 1;  // epochs
    double score_cut = 0.5;
    double nms_iou = 0.8;
    IouMetric nms_metric = IouMetric::bev;
    double pos_iou = 0.6, neg_iou = 0.45;
    double overlap_bev = 0.5, overlap_3d = 0.5;

    void validate() const {
        if (epochs_phase1 < 0 || epochs_phase2 < 0) throw config_error("negative epoch count");
        if (!(lr > 0.0) || !(lr2_factor > 0.0)) throw config_error("learning rates must be > 0");
        if (batch_size < 1) throw config_error("batch size must be >= 1");
        if (optimizer != "sgd" && optimizer != "adam")
            throw config_error("unknown optimizer: " + optimizer);
        loss.validate();
    }

    double phase_lr(int phase) const { return phase == 1 ? lr : lr * lr2_factor; }
    LossConfig phase_loss(int phase) const {
        LossConfig l = loss;
        if (phase == 1) l.gamma = 0.0;  // BCE warm-up phase
        return l;
    }
};

struct TrainResult {
    std::string run_dir;
    std::optional<double> best_map;
    std::string best_checkpoint;
    double first_loss = 0.0;
    double last_loss = 0.0;
    std::optional<double> final_map;
};

namespace detail {
// SGD with momentum, or Adam when TrainConfig.optimizer says so.
struct SgdState {
    std::map<std::string, std::vector<double>> velocity;  // momentum / first moment
    std::map<std::string, std::vector<double>> second;    // Adam second moment
    bool adam = false;
    int64_t t = 0;

    void step(net::ParamMap& params, double lr, double momentum) {
        ++t;
        const double beta1 = adam ? 0.9 : momentum;
        const double beta2 = 0.999;
        const double bias1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bias2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& [name, var] : params) {
            if (!var->requires_grad) continue;
            if (var->t.grad.empty()) continue;
            auto& vel = velocity[name];
            if (vel.size() != var->t.v.size()) vel.assign(var->t.v.size(), 0.0);
            if (!adam) {
                for (size_t i = 0; i < var->t.v.size(); ++i) {
                    vel[i] = beta1 * vel[i] + var->t.grad[i];
                    var->t.v[i] -= lr * vel[i];
                }
            } else {
                auto& sec = second[name];
                if (sec.size() != var->t.v.size()) sec.assign(var->t.v.size(), 0.0);
                for (size_t i = 0; i < var->t.v.size(); ++i) {
                    const double g = var->t.grad[i];
                    vel[i] = beta1 * vel[i] + (1.0 - beta1) * g;
                    sec[i] = beta2 * sec[i] + (1.0 - beta2) * g * g;
                    var->t.v[i] -=
                        lr * (vel[i] / bias1) / (std::sqrt(sec[i] / bias2) + 1e-8);
                }
            }
        }
    }
};

inline void zero_param_grads(net::ParamMap& params) {
    for (auto& [name, var] : params) {
        var->t.ensure_grad();
        var->t.zero_grad();
    }
}
}  // namespace detail

struct PreparedFrame {
    std::string id;
    net::FrameInput input;
    TargetAssignment targets;
};

inline PreparedFrame prepare_frame(const net::NetworkConfig& cfg, const TrainConfig& tcfg,
                                   const Frame& frame) {
    PreparedFrame p;
    p.id = frame.id;
    p.input = frame_input(cfg, frame, tcfg.seed);
    if (cfg.family == "3dfcn")
        p.targets = assign_targets_3dfcn(head_grid_3dfcn(cfg), frame.labels, cfg.anchor);
    else
        p.targets = assign_targets_voxelnet(cfg, frame.labels, tcfg.pos_iou, tcfg.neg_iou);
    return p;
}

inline APResult evaluate_model(const net::NetworkConfig& cfg, const net::ParamMap& params,
                               const std::vector<Frame>& frames, const TrainConfig& tcfg) {
    PredictConfig pc;
    pc.score_cut = tcfg.score_cut;
    pc.nms_iou = tcfg.nms_iou;
    pc.nms_metric = tcfg.nms_metric;
    pc.voxelize_seed = tcfg.seed;
    std::vector<EvalFrame> eval;
    eval.reserve(frames.size());
    for (const auto& f : frames) eval.push_back({predict(cfg, params, f, pc), f.labels});
    return evaluate_ap(eval, tcfg.overlap_bev, tcfg.overlap_3d);
}

// Two-phase schedule: epochs_phase1 at gamma = 0 and lr, then epochs_phase2 at
// the configured gamma and lr2_factor * lr. Writes metrics.csv, periodic
// checkpoints, and a best-model marker (best 3D mAP) under run_dir.
inline TrainResult train(const net::NetworkConfig& cfg, const TrainConfig& tcfg,
                         const std::vector<Frame>& train_frames,
                         const std::vector<Frame>& val_frames, const std::string& run_dir,
                         const nlohmann::json* resolved_config = nullptr) {
    namespace fs = std::filesystem;
    cfg.validate();
    tcfg.validate();
    if (train_frames.empty()) throw data_error("train: empty dataset");
    fs::create_directories(run_dir);
    if (resolved_config) {
        std::ofstream cj(fs::path(run_dir) / "config.json", std::ios::trunc);
        cj << resolved_config->dump(2) << "\n";
    }

    std::vector<PreparedFrame> prepared;
    prepared.reserve(train_frames.size());
    for (const auto& f : train_frames) prepared.push_back(prepare_frame(cfg, tcfg, f));

    auto params = net::init_params(cfg, derive_seed(tcfg.seed, "params"));
    detail::SgdState sgd;
    sgd.adam = tcfg.optimizer == "adam";

    std::ofstream metrics(fs::path(run_dir) / "metrics.csv", std::ios::trunc);
    metrics << "step,epoch,loss,cls_pos,cls_neg,reg,val_map\n";

    TrainResult result;
    result.run_dir = run_dir;
    const int64_t total_epochs = tcfg.epochs_phase1 + tcfg.epochs_phase2;
    int64_t step = 0;
    for (int64_t epoch = 0; epoch < total_epochs; ++epoch) {
        const int phase = epoch < tcfg.epochs_phase1 ? 1 : 2;
        const double lr = tcfg.phase_lr(phase);
        const LossConfig loss_cfg = tcfg.phase_loss(phase);

        std::vector<size_t> order(prepared.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(tcfg.seed, "epoch-shuffle", static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        for (size_t b = 0; b < order.size(); b += static_cast<size_t>(tcfg.batch_size)) {
            const size_t hi = std::min(order.size(), b + static_cast<size_t>(tcfg.batch_size));
            const double inv = 1.0 / static_cast<double>(hi - b);
            detail::zero_param_grads(params);
            LossBreakdown mean{};
            for (size_t i = b; i < hi; ++i) {
                const auto& pf = prepared[order[i]];
                const auto maps = net::forward(cfg, params, pf.input, true);
                auto graph = composite_loss_graph(maps.pmap_logits, maps.rmap, pf.targets, loss_cfg);
                if (!std::isfinite(graph.value.total))
                    throw numeric_error("train: non-finite loss at step " + std::to_string(step) +
                                        " frame " + pf.id);
                ad::backward(graph.total, inv);
                mean.total += inv * graph.value.total;
                mean.pos_part += inv * graph.value.pos_part;
                mean.neg_part += inv * graph.value.neg_part;
                mean.reg += inv * graph.value.reg;
            }
            sgd.step(params, lr, tcfg.momentum);
            if (step == 0) result.first_loss = mean.total;
            result.last_loss = mean.total;
            ++step;

            std::string val_col;
            const bool epoch_end = hi == order.size();
            if (epoch_end) {
                const auto ap = val_frames.empty()
                                    ? APResult{}
                                    : evaluate_model(cfg, params, val_frames, tcfg);
                if (ap.map3d) {
                    val_col = format_double(*ap.map3d);
                    if (!result.best_map || *ap.map3d > *result.best_map) {
                        result.best_map = ap.map3d;
                        const std::string prefix =
                            (fs::path(run_dir) / "ckpt_best").string();
                        net::save_checkpoint(prefix, params);
                        result.best_checkpoint = prefix;
                        std::ofstream best(fs::path(run_dir) / "best.txt", std::ios::trunc);
                        best << "ckpt_best\n";
                    }
                    result.final_map = ap.map3d;
                }
            }
            metrics << step << "," << epoch << "," << format_double(mean.total) << ","
                    << format_double(mean.pos_part) << "," << format_double(mean.neg_part) << ","
                    << format_double(mean.reg) << "," << val_col << "\n";
        }

        if (tcfg.checkpoint_every > 0 && ((epoch + 1) % tcfg.checkpoint_every == 0)) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "ckpt_%04lld", static_cast<long long>(epoch + 1));
            net::save_checkpoint((fs::path(run_dir) / buf).string(), params);
        }
    }
    net::save_checkpoint((fs::path(run_dir) / "ckpt_final").string(), params);
    if (result.best_checkpoint.empty()) {
        net::save_checkpoint((fs::path(run_dir) / "ckpt_best").string(), params);
        result.best_checkpoint = (fs::path(run_dir) / "ckpt_best").string();
        std::ofstream best(fs::path(run_dir) / "best.txt", std::ios::trunc);
        best << "ckpt_best\n";
    }
    metrics.close();
    return result;
}

}  // namespace focal3d
