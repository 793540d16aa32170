#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "focal3d/analysis.hpp"
#include "focal3d/common.hpp"
#include "focal3d/data.hpp"
#include "focal3d/network.hpp"
#include "focal3d/train.hpp"

namespace focal3d {

using nlohmann::json;

// --- closed schema -----------------------------------------------------------

// Unknown keys are errors: typos in gamma/alpha/beta/eta must not pass
// silently. The tree lists every accepted key per object.
inline const json& config_schema() {
    static const json schema = {
        {"seed", nullptr},
        {"detector", nullptr},
        {"out", nullptr},
        {"data",
         {{"dir", nullptr}, {"min_points", nullptr}, {"calibration", nullptr}, {"split_seed", nullptr}}},
        {"scene",
         {{"count", nullptr},
          {"objects", nullptr},
          {"size_mean", nullptr},
          {"size_sigma", nullptr},
          {"points_per_object", nullptr},
          {"clutter", nullptr},
          {"ground_z", nullptr},
          {"yaw_max", nullptr},
          {"x_range", nullptr},
          {"y_range", nullptr}}},
        {"grid",
         {{"origin", {{"x", nullptr}, {"y", nullptr}, {"z", nullptr}}},
          {"voxel_size", {{"z", nullptr}, {"x", nullptr}, {"y", nullptr}}},
          {"dims", {{"z", nullptr}, {"x", nullptr}, {"y", nullptr}}}}},
        {"loss",
         {{"gamma", nullptr},
          {"alpha", nullptr},
          {"beta", nullptr},
          {"eta", nullptr},
          {"lambda", nullptr},
          {"mode", nullptr},
          {"cls_kind", nullptr},
          {"reg_kind", nullptr}}},
        {"train",
         {{"epochs_phase1", nullptr},
          {"epochs_phase2", nullptr},
          {"lr", nullptr},
          {"lr2_factor", nullptr},
          {"batch_size", nullptr},
          {"momentum", nullptr},
          {"optimizer", nullptr},
          {"checkpoint_every", nullptr},
          {"score_cut", nullptr},
          {"nms_iou", nullptr},
          {"nms_metric", nullptr},
          {"pos_iou", nullptr},
          {"neg_iou", nullptr},
          {"max_points_per_voxel", nullptr}}},
        {"eval", {{"overlap_bev", nullptr}, {"overlap_3d", nullptr}, {"ap_interp", nullptr}}},
        {"analysis",
         {{"gammas", nullptr},
          {"bins", nullptr},
          {"neg_samples", nullptr},
          {"pos_samples", nullptr},
          {"hardest_k", nullptr}}}};
    return schema;
}

inline void validate_against_schema(const json& cfg, const json& schema, const std::string& prefix) {
    if (!cfg.is_object()) throw config_error("config node " + (prefix.empty() ? "<root>" : prefix) + " must be an object");
    std::vector<std::string> unknown;
    for (const auto& [key, value] : cfg.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!schema.contains(key)) {
            unknown.push_back(path);
            continue;
        }
        if (schema[key].is_object() && !schema[key].empty())
            validate_against_schema(value, schema[key], path);
    }
    if (!unknown.empty()) {
        std::string msg = "unknown config key";
        if (unknown.size() > 1) msg += "s";
        msg += ":";
        for (const auto& k : unknown) msg += " " + k;
        throw config_error(msg);
    }
}

inline void validate_config(const json& cfg) { validate_against_schema(cfg, config_schema(), ""); }

inline void require_key(const json& cfg, const std::string& dotted) {
    const json* node = &cfg;
    std::string path = dotted;
    size_t start = 0;
    while (true) {
        const size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (!node->is_object() || !node->contains(key))
            throw config_error("missing required key: " + dotted);
        node = &(*node)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
}

// Apply a --set key=value override; values parse as JSON with a string
// fallback so --set detector=voxelnet-mini works unquoted.
inline void apply_override(json& cfg, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw config_error("--set expects key=value, got: " + assignment);
    const std::string dotted = assignment.substr(0, eq);
    const std::string value_text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(value_text);
    } catch (const json::parse_error&) {
        value = value_text;
    }
    json* node = &cfg;
    size_t start = 0;
    while (true) {
        const size_t dot = dotted.find('.', start);
        const std::string key = dotted.substr(start, dot - start);
        if (key.empty()) throw config_error("--set: empty key segment in " + dotted);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

// --- resolution ----------------------------------------------------------------

struct ResolvedConfig {
    uint64_t seed = 0;
    std::string detector = "voxelnet-mini";
    std::string out;
    std::string data_dir;
    int64_t min_points = 10;
    std::string calibration = "identity";
    uint64_t split_seed = 0;
    net::NetworkConfig network;
    TrainConfig train_cfg;
    SceneRecipe scene;
    int64_t scene_count = 0;
    double overlap_bev = 0.5, overlap_3d = 0.5;
    ApInterp interp = ApInterp::p11;
    std::vector<double> gammas{0.0, 0.5, 1.0, 2.0};
    int bins = 20;
    int64_t neg_samples = 100000, pos_samples = 1000;
    std::vector<int> hardest_ks{1, 10, 20};
    json resolved;  // fully-expanded config for manifests and run dirs
};

inline LossConfig loss_from_json(const json& j) {
    LossConfig l;
    l.gamma = j.value("gamma", 0.0);
    l.alpha = j.value("alpha", 1.0);
    l.beta = j.value("beta", 1.0);
    l.eta = j.value("eta", 1.0);
    l.lambda = j.value("lambda", 1.0);
    l.mode = loss_mode_from(j.value("mode", std::string("enhanced")));
    l.cls_kind = cls_kind_from(j.value("cls_kind", std::string("focal")));
    l.reg_kind = reg_kind_from(j.value("reg_kind", std::string("smooth_l1")));
    l.validate();
    return l;
}

inline json loss_to_json(const LossConfig& l) {
    return json{{"gamma", l.gamma},   {"alpha", l.alpha},
                {"beta", l.beta},     {"eta", l.eta},
                {"mode", to_string(l.mode)}, {"cls_kind", to_string(l.cls_kind)},
                {"reg_kind", to_string(l.reg_kind)}};
}

inline json grid_to_json(const VoxelGridSpec& g) {
    return json{{"origin", {{"x", g.x0}, {"y", g.y0}, {"z", g.z0}}},
                {"voxel_size", {{"z", g.vz}, {"x", g.vx}, {"y", g.vy}}},
                {"dims", {{"z", g.nd}, {"x", g.nh}, {"y", g.nw}}}};
}

inline VoxelGridSpec grid_from_json(const json& j, VoxelGridSpec base) {
    if (j.contains("origin")) {
        base.x0 = j["origin"].value("x", base.x0);
        base.y0 = j["origin"].value("y", base.y0);
        base.z0 = j["origin"].value("z", base.z0);
    }
    if (j.contains("voxel_size")) {
        base.vz = j["voxel_size"].value("z", base.vz);
        base.vx = j["voxel_size"].value("x", base.vx);
        base.vy = j["voxel_size"].value("y", base.vy);
    }
    if (j.contains("dims")) {
        base.nd = j["dims"].value("z", base.nd);
        base.nh = j["dims"].value("x", base.nh);
        base.nw = j["dims"].value("y", base.nw);
    }
    base.validate();
    return base;
}

inline SceneRecipe scene_from_json(const json& j, uint64_t seed) {
    SceneRecipe r;
    r.seed = seed;
    if (j.contains("objects")) {
        r.min_objects = j["objects"].at(0);
        r.max_objects = j["objects"].at(1);
    }
    if (j.contains("size_mean"))
        for (int i = 0; i < 3; ++i) r.size_mean[static_cast<size_t>(i)] = j["size_mean"].at(static_cast<size_t>(i));
    if (j.contains("size_sigma"))
        for (int i = 0; i < 3; ++i) r.size_sigma[static_cast<size_t>(i)] = j["size_sigma"].at(static_cast<size_t>(i));
    if (j.contains("points_per_object")) {
        r.min_points = j["points_per_object"].at(0);
        r.max_points = j["points_per_object"].at(1);
    }
    r.clutter_points = j.value("clutter", r.clutter_points);
    r.ground_z = j.value("ground_z", r.ground_z);
    r.yaw_max = j.value("yaw_max", r.yaw_max);
    if (j.contains("x_range")) {
        r.x_min = j["x_range"].at(0);
        r.x_max = j["x_range"].at(1);
    }
    if (j.contains("y_range")) {
        r.y_min = j["y_range"].at(0);
        r.y_max = j["y_range"].at(1);
    }
    r.validate();
    return r;
}

inline json scene_to_json(const SceneRecipe& r, int64_t count) {
    return json{{"count", count},
                {"objects", {r.min_objects, r.max_objects}},
                {"size_mean", r.size_mean},
                {"size_sigma", r.size_sigma},
                {"points_per_object", {r.min_points, r.max_points}},
                {"clutter", r.clutter_points},
                {"ground_z", r.ground_z},
                {"yaw_max", r.yaw_max},
                {"x_range", {r.x_min, r.x_max}},
                {"y_range", {r.y_min, r.y_max}}};
}

inline ResolvedConfig resolve_config(const json& cfg) {
    validate_config(cfg);
    ResolvedConfig r;
    r.seed = cfg.value("seed", 0);
    r.detector = cfg.value("detector", std::string("voxelnet-mini"));
    r.out = cfg.value("out", std::string(""));
    r.network = net::network_preset(r.detector);
    if (cfg.contains("grid")) r.network.grid = grid_from_json(cfg["grid"], r.network.grid);

    const json data = cfg.value("data", json::object());
    r.data_dir = data.value("dir", std::string(""));
    r.min_points = data.value("min_points", int64_t{10});
    r.calibration = data.value("calibration", std::string("identity"));
    if (r.calibration != "identity" && r.calibration != "kitti")
        throw config_error("data.calibration must be identity or kitti");
    r.split_seed = data.value("split_seed", r.seed);

    r.scene = scene_from_json(cfg.value("scene", json::object()), r.seed);
    r.scene_count = cfg.value("scene", json::object()).value("count", int64_t{0});

    if (cfg.contains("loss")) r.train_cfg.loss = loss_from_json(cfg["loss"]);
    const json tj = cfg.value("train", json::object());
    auto& t = r.train_cfg;
    t.epochs_phase1 = tj.value("epochs_phase1", t.epochs_phase1);
    t.epochs_phase2 = tj.value("epochs_phase2", t.epochs_phase2);
    t.lr = tj.value("lr", t.lr);
    t.lr2_factor = tj.value("lr2_factor", t.lr2_factor);
    t.batch_size = tj.value("batch_size", t.batch_size);
    t.momentum = tj.value("momentum", t.momentum);
    t.optimizer = tj.value("optimizer", t.optimizer);
    t.checkpoint_every = tj.value("checkpoint_every", t.checkpoint_every);
    t.score_cut = tj.value("score_cut", t.score_cut);
    t.nms_iou = tj.value("nms_iou", t.nms_iou);
    const std::string metric = tj.value("nms_metric", std::string("bev"));
    if (metric == "bev")
        t.nms_metric = IouMetric::bev;
    else if (metric == "3d")
        t.nms_metric = IouMetric::box3d;
    else
        throw config_error("train.nms_metric must be bev or 3d");
    t.pos_iou = tj.value("pos_iou", t.pos_iou);
    t.neg_iou = tj.value("neg_iou", t.neg_iou);
    t.seed = r.seed;
    r.network.max_points_per_voxel = tj.value("max_points_per_voxel", r.network.max_points_per_voxel);

    const json ej = cfg.value("eval", json::object());
    r.overlap_bev = ej.value("overlap_bev", r.overlap_bev);
    r.overlap_3d = ej.value("overlap_3d", r.overlap_3d);
    const std::string interp = ej.value("ap_interp", std::string("11pt"));
    if (interp == "11pt")
        r.interp = ApInterp::p11;
    else if (interp == "40pt")
        r.interp = ApInterp::p40;
    else
        throw config_error("eval.ap_interp must be 11pt or 40pt");
    t.overlap_bev = r.overlap_bev;
    t.overlap_3d = r.overlap_3d;

    const json aj = cfg.value("analysis", json::object());
    if (aj.contains("gammas")) r.gammas = aj["gammas"].get<std::vector<double>>();
    r.bins = aj.value("bins", r.bins);
    r.neg_samples = aj.value("neg_samples", r.neg_samples);
    r.pos_samples = aj.value("pos_samples", r.pos_samples);
    if (aj.contains("hardest_k")) r.hardest_ks = aj["hardest_k"].get<std::vector<int>>();
    for (double g : r.gammas)
        if (!(g >= 0.0)) throw config_error("analysis.gammas must be >= 0");

    t.validate();

    // fully-resolved view for manifests and run directories
    r.resolved = json{
        {"seed", r.seed},
        {"detector", r.detector},
        {"out", r.out},
        {"data",
         {{"dir", r.data_dir},
          {"min_points", r.min_points},
          {"calibration", r.calibration},
          {"split_seed", r.split_seed}}},
        {"scene", scene_to_json(r.scene, r.scene_count)},
        {"grid", grid_to_json(r.network.grid)},
        {"loss", loss_to_json(t.loss)},
        {"train",
         {{"epochs_phase1", t.epochs_phase1},
          {"epochs_phase2", t.epochs_phase2},
          {"lr", t.lr},
          {"lr2_factor", t.lr2_factor},
          {"phase1_lr", t.phase_lr(1)},
          {"phase2_lr", t.phase_lr(2)},
          {"batch_size", t.batch_size},
          {"momentum", t.momentum},
          {"optimizer", t.optimizer},
          {"checkpoint_every", t.checkpoint_every},
          {"score_cut", t.score_cut},
          {"nms_iou", t.nms_iou},
          {"nms_metric", metric},
          {"pos_iou", t.pos_iou},
          {"neg_iou", t.neg_iou},
          {"max_points_per_voxel", r.network.max_points_per_voxel}}},
        {"eval", {{"overlap_bev", r.overlap_bev}, {"overlap_3d", r.overlap_3d}, {"ap_interp", interp}}},
        {"analysis",
         {{"gammas", r.gammas},
          {"bins", r.bins},
          {"neg_samples", r.neg_samples},
          {"pos_samples", r.pos_samples},
          {"hardest_k", r.hardest_ks}}}};
    return r;
}

// --- run manifests ------------------------------------------------------------------

inline std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return "missing";
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 14];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    char hex[20];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

struct ManifestWriter {
    json manifest;
    std::string out_path;

    ManifestWriter(const std::string& command, const ResolvedConfig& cfg, const std::string& out_dir) {
        manifest["command"] = command;
        manifest["toolkit_version"] = kToolkitVersion;
        manifest["seed"] = cfg.seed;
        manifest["config"] = cfg.resolved;
        manifest["inputs"] = json::object();
        manifest["started_at"] = iso8601_now();
        out_path = (std::filesystem::path(out_dir) / "manifest.json").string();
    }

    void add_input(const std::string& path) { manifest["inputs"][path] = file_digest(path); }

    void finish() {
        manifest["finished_at"] = iso8601_now();
        std::filesystem::create_directories(std::filesystem::path(out_path).parent_path());
        std::ofstream out(out_path, std::ios::trunc);
        if (!out) throw data_error("cannot write manifest: " + out_path);
        out << manifest.dump(2) << "\n";
    }
};

}  // namespace focal3d
