#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "focal3d/config.hpp"

namespace focal3d::cli {

namespace fs = std::filesystem;

inline json load_config_json(const std::string& config_path, const std::vector<std::string>& sets) {
    json cfg = json::object();
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw data_error("cannot open config: " + config_path);
        try {
            cfg = json::parse(in);
        } catch (const json::parse_error& e) {
            throw config_error(std::string("config parse error: ") + e.what());
        }
    }
    for (const auto& s : sets) apply_override(cfg, s);
    return cfg;
}

inline std::string require_out(const ResolvedConfig& cfg) {
    if (cfg.out.empty()) throw config_error("missing required key: out");
    return cfg.out;
}

// --- dataset helpers -----------------------------------------------------------

inline Calibration calibration_for(const ResolvedConfig& cfg, const std::string& frame_id) {
    if (cfg.calibration == "identity") return Calibration::identity_mode();
    const auto path = fs::path(cfg.data_dir) / "calib" / (frame_id + ".txt");
    return load_calibration(path.string());
}

inline std::vector<Frame> load_frames(const ResolvedConfig& cfg, const std::vector<std::string>& ids) {
    std::vector<Frame> frames;
    frames.reserve(ids.size());
    for (const auto& id : ids) {
        Frame f = load_frame(cfg.data_dir, id, calibration_for(cfg, id));
        frames.push_back(filter_sparse_boxes(f, cfg.min_points));
    }
    return frames;
}

inline void add_dir_inputs(ManifestWriter& mw, const std::string& data_dir,
                           const std::vector<std::string>& ids) {
    for (const auto& id : ids) {
        mw.add_input((fs::path(data_dir) / "velodyne" / (id + ".bin")).string());
        const auto label = fs::path(data_dir) / "label_2" / (id + ".txt");
        if (fs::exists(label)) mw.add_input(label.string());
    }
}

// --- subcommands ------------------------------------------------------------------

inline int cmd_gen_data(const ResolvedConfig& cfg) {
    const std::string out = require_out(cfg);
    fs::create_directories(fs::path(out) / "velodyne");
    fs::create_directories(fs::path(out) / "label_2");
    ManifestWriter mw("gen-data", cfg, out);
    for (int64_t i = 0; i < cfg.scene_count; ++i) {
        SceneRecipe recipe = cfg.scene;
        recipe.seed = derive_seed(cfg.seed, "frame", static_cast<uint64_t>(i));
        Frame frame = generate_scene(recipe);
        char id[16];
        std::snprintf(id, sizeof(id), "%06lld", static_cast<long long>(i));
        frame.id = id;
        save_velodyne((fs::path(out) / "velodyne" / (frame.id + ".bin")).string(), frame.cloud);
        write_labels((fs::path(out) / "label_2" / (frame.id + ".txt")).string(), frame.labels);
    }
    mw.finish();
    std::cout << "gen-data: wrote " << cfg.scene_count << " frames to " << out << "\n";
    return 0;
}

inline int cmd_train(const ResolvedConfig& cfg) {
    if (cfg.data_dir.empty()) throw config_error("missing required key: data.dir");
    const std::string out = require_out(cfg);
    const auto ids = frame_ids(cfg.data_dir);
    const auto [train_ids, val_ids] = split_train_val(ids, cfg.split_seed);
    fs::create_directories(out);
    save_split((fs::path(out) / "split_train.txt").string(), train_ids);
    save_split((fs::path(out) / "split_val.txt").string(), val_ids);

    ManifestWriter mw("train", cfg, out);
    add_dir_inputs(mw, cfg.data_dir, ids);

    const auto train_frames = load_frames(cfg, train_ids);
    const auto val_frames = load_frames(cfg, val_ids);
    const auto result = train(cfg.network, cfg.train_cfg, train_frames, val_frames, out, &cfg.resolved);
    mw.finish();
    std::cout << "train: " << train_ids.size() << " train / " << val_ids.size()
              << " val frames, final loss " << format_double(result.last_loss);
    if (result.best_map) std::cout << ", best 3D mAP " << format_double(*result.best_map);
    std::cout << "\n";
    return 0;
}

inline int cmd_predict(const ResolvedConfig& cfg, const std::string& checkpoint) {
    if (cfg.data_dir.empty()) throw config_error("missing required key: data.dir");
    if (checkpoint.empty()) throw config_error("missing required option: --checkpoint");
    const std::string out = require_out(cfg);
    fs::create_directories(out);
    ManifestWriter mw("predict", cfg, out);
    mw.add_input(checkpoint + ".bin");
    mw.add_input(checkpoint + ".json");
    const auto params = net::load_checkpoint(checkpoint);
    PredictConfig pc;
    pc.score_cut = cfg.train_cfg.score_cut;
    pc.nms_iou = cfg.train_cfg.nms_iou;
    pc.nms_metric = cfg.train_cfg.nms_metric;
    pc.voxelize_seed = cfg.seed;
    const auto ids = frame_ids(cfg.data_dir);
    add_dir_inputs(mw, cfg.data_dir, ids);
    size_t total = 0;
    for (const auto& id : ids) {
        const Frame f = load_frame(cfg.data_dir, id, calibration_for(cfg, id));
        const auto dets = predict(cfg.network, params, f, pc);
        total += dets.size();
        write_results((fs::path(out) / (id + ".txt")).string(), dets);
    }
    mw.finish();
    std::cout << "predict: " << total << " detections across " << ids.size() << " frames\n";
    return 0;
}

inline int cmd_eval(const ResolvedConfig& cfg, const std::string& checkpoint,
                    const std::string& results_dir) {
    if (cfg.data_dir.empty()) throw config_error("missing required key: data.dir");
    if (checkpoint.empty() && results_dir.empty())
        throw config_error("eval needs --checkpoint or --results");
    const std::string out = require_out(cfg);
    fs::create_directories(out);
    ManifestWriter mw("eval", cfg, out);
    const auto ids = frame_ids(cfg.data_dir);
    add_dir_inputs(mw, cfg.data_dir, ids);

    std::vector<EvalFrame> eval_frames;
    if (!checkpoint.empty()) {
        mw.add_input(checkpoint + ".bin");
        mw.add_input(checkpoint + ".json");
        const auto params = net::load_checkpoint(checkpoint);
        PredictConfig pc;
        pc.score_cut = cfg.train_cfg.score_cut;
        pc.nms_iou = cfg.train_cfg.nms_iou;
        pc.nms_metric = cfg.train_cfg.nms_metric;
        pc.voxelize_seed = cfg.seed;
        for (const auto& id : ids) {
            Frame f = load_frame(cfg.data_dir, id, calibration_for(cfg, id));
            f = filter_sparse_boxes(f, cfg.min_points);
            eval_frames.push_back({predict(cfg.network, params, f, pc), f.labels});
        }
    } else {
        for (const auto& id : ids) {
            Frame f = load_frame(cfg.data_dir, id, calibration_for(cfg, id));
            f = filter_sparse_boxes(f, cfg.min_points);
            const auto result_path = fs::path(results_dir) / (id + ".txt");
            std::vector<Detection> dets;
            if (fs::exists(result_path)) {
                mw.add_input(result_path.string());
                dets = parse_results(result_path.string());
            }
            eval_frames.push_back({std::move(dets), f.labels});
        }
    }
    const auto ap = evaluate_ap(eval_frames, cfg.overlap_bev, cfg.overlap_3d, cfg.interp);
    const json report = ap_to_json(ap);
    std::ofstream rep(fs::path(out) / "ap_report.json", std::ios::trunc);
    rep << report.dump(2) << "\n";
    rep.close();
    mw.finish();
    std::cout << report.dump(2) << "\n";
    return 0;
}

// Builds a (y, p_t) dump from a checkpoint by sampling anchor posteriors over
// the dataset, capped at the configured sizes in deterministic anchor order.
inline PredictionDump dump_from_checkpoint(const ResolvedConfig& cfg, const std::string& checkpoint) {
    const auto params = net::load_checkpoint(checkpoint);
    PredictionDump dump;
    int64_t want_pos = cfg.pos_samples, want_neg = cfg.neg_samples;
    const auto ids = frame_ids(cfg.data_dir);
    for (const auto& id : ids) {
        if (want_pos <= 0 && want_neg <= 0) break;
        Frame f = load_frame(cfg.data_dir, id, calibration_for(cfg, id));
        f = filter_sparse_boxes(f, cfg.min_points);
        const auto pf = prepare_frame(cfg.network, cfg.train_cfg, f);
        const auto maps = net::forward(cfg.network, params, pf.input, false);
        const auto& logits = maps.pmap_logits->t;
        for (int64_t a = 0; a < pf.targets.total(); ++a) {
            const int8_t label = pf.targets.labels[static_cast<size_t>(a)];
            if (label == 0) continue;
            const double p = sigmoid(logits.v[static_cast<size_t>(a)]);
            const double p_t = label > 0 ? p : 1.0 - p;
            if (label > 0 && want_pos > 0) {
                dump.entries.push_back({+1, clamp_prob(p_t)});
                --want_pos;
            } else if (label < 0 && want_neg > 0) {
                dump.entries.push_back({-1, clamp_prob(p_t)});
                --want_neg;
            }
        }
    }
    return dump;
}

inline int cmd_analyze(const ResolvedConfig& cfg, const std::string& dump_path,
                       const std::string& checkpoint) {
    if (dump_path.empty() && checkpoint.empty())
        throw config_error("analyze needs --dump or --checkpoint");
    const std::string out = require_out(cfg);
    fs::create_directories(out);
    ManifestWriter mw("analyze", cfg, out);

    PredictionDump dump;
    if (!dump_path.empty()) {
        mw.add_input(dump_path);
        dump = read_dump_csv(dump_path);
    } else {
        mw.add_input(checkpoint + ".bin");
        dump = dump_from_checkpoint(cfg, checkpoint);
        write_dump_csv((fs::path(out) / "dump.csv").string(), dump);
    }

    bool has_pos = false, has_neg = false;
    for (const auto& e : dump.entries) (e.y > 0 ? has_pos : has_neg) = true;
    for (double g : cfg.gammas) {
        const std::string tag = format_double(g);
        if (has_pos)
            write_curve_csv((fs::path(out) / ("cdf_pos_gamma" + tag + ".csv")).string(),
                            loss_cdf(dump, g, +1));
        if (has_neg)
            write_curve_csv((fs::path(out) / ("cdf_neg_gamma" + tag + ".csv")).string(),
                            loss_cdf(dump, g, -1));
    }
    write_sweep_csv((fs::path(out) / "gamma_sweep.csv").string(),
                    gamma_sweep(dump, cfg.gammas, cfg.hardest_ks));
    if (has_pos) {
        std::vector<double> pos_pt;
        for (const auto& e : dump.entries)
            if (e.y > 0) pos_pt.push_back(e.p_t);
        write_histogram_csv((fs::path(out) / "posterior_hist.csv").string(),
                            posterior_histogram(pos_pt, cfg.bins));
    }
    mw.finish();
    std::cout << "analyze: " << dump.entries.size() << " samples, outputs in " << out << "\n";
    return 0;
}

inline int cmd_imbalance(const ResolvedConfig& cfg) {
    if (cfg.data_dir.empty()) throw config_error("missing required key: data.dir");
    const std::string out = require_out(cfg);
    fs::create_directories(out);
    ManifestWriter mw("imbalance", cfg, out);
    const auto ids = frame_ids(cfg.data_dir);
    add_dir_inputs(mw, cfg.data_dir, ids);
    ImbalanceReport agg;
    bool first = true;
    for (const auto& id : ids) {
        Frame f = load_frame(cfg.data_dir, id, calibration_for(cfg, id));
        f = filter_sparse_boxes(f, cfg.min_points);
        const auto pf = prepare_frame(cfg.network, cfg.train_cfg, f);
        const auto r = imbalance_report(pf.targets);
        if (first) {
            agg = r;
            first = false;
        } else {
            agg.n_pos += r.n_pos;
            agg.n_neg += r.n_neg;
            for (size_t z = 0; z < agg.pos_per_z.size() && z < r.pos_per_z.size(); ++z) {
                agg.pos_per_z[z] += r.pos_per_z[z];
                agg.neg_per_z[z] += r.neg_per_z[z];
            }
        }
    }
    agg.ratio = static_cast<double>(agg.n_neg) / static_cast<double>(std::max<int64_t>(agg.n_pos, 1));
    write_imbalance_csv((fs::path(out) / "imbalance.csv").string(), agg);
    mw.finish();
    std::cout << "imbalance: anchors/frame " << cfg.network.anchor_count() << ", positives "
              << agg.n_pos << ", negatives " << agg.n_neg << ", ratio " << format_double(agg.ratio)
              << "\n";
    return 0;
}

inline int cmd_flops(const ResolvedConfig& cfg) {
    const auto costs = net::flops_estimate(cfg.network);
    std::cout << "layer,kind,gflops\n";
    double total = 0;
    for (const auto& c : costs) {
        std::cout << c.name << "," << net::to_string(c.kind) << "," << format_double(c.flops / 1e9)
                  << "\n";
        total += c.flops;
    }
    std::cout << "total,," << format_double(total / 1e9) << "\n";
    if (!cfg.out.empty()) {
        fs::create_directories(cfg.out);
        ManifestWriter mw("flops", cfg, cfg.out);
        std::ofstream out(fs::path(cfg.out) / "flops.csv", std::ios::trunc);
        out << "layer,kind,gflops\n";
        for (const auto& c : costs)
            out << c.name << "," << net::to_string(c.kind) << "," << format_double(c.flops / 1e9)
                << "\n";
        out << "total,," << format_double(total / 1e9) << "\n";
        mw.finish();
    }
    return 0;
}

// --- entry point ------------------------------------------------------------------------

inline int run(std::vector<std::string> args) {
    CLI::App app{"desk-scale focal-loss 3D detection toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, checkpoint, results_dir, dump_path;
    std::vector<std::string> sets;
    std::string out_flag, data_flag, detector_flag;
    int64_t seed_flag = -1, count_flag = -1;

    app.add_option("--config", config_path, "JSON config file")->capture_default_str();
    app.add_option("--set", sets, "override config keys, key=value (repeatable)");
    app.add_option("--out", out_flag, "output directory (mirrors config key out)");
    app.add_option("--data", data_flag, "dataset directory (mirrors data.dir)");
    app.add_option("--detector", detector_flag, "detector preset (mirrors detector)");
    app.add_option("--seed", seed_flag, "seed (mirrors config key seed)");

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--count", count_flag, "number of frames (mirrors scene.count)");
    auto* tr = app.add_subcommand("train", "run the two-phase training schedule");
    auto* pr = app.add_subcommand("predict", "write KITTI-format detections for a dataset");
    pr->add_option("--checkpoint", checkpoint, "checkpoint prefix (without .bin/.json)");
    auto* ev = app.add_subcommand("eval", "evaluate AP against dataset labels");
    ev->add_option("--checkpoint", checkpoint, "checkpoint prefix");
    ev->add_option("--results", results_dir, "directory of predicted result files");
    auto* an = app.add_subcommand("analyze", "loss CDFs, gamma sweep, posterior histogram");
    an->add_option("--dump", dump_path, "prediction dump CSV (y,p_t)");
    an->add_option("--checkpoint", checkpoint, "checkpoint prefix to sample a dump from");
    auto* im = app.add_subcommand("imbalance", "fore-background imbalance report");
    auto* fl = app.add_subcommand("flops", "per-layer multiply-add estimate for the preset");

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("focal3d");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        json cfg_json = load_config_json(config_path, sets);
        if (!out_flag.empty()) cfg_json["out"] = out_flag;
        if (!data_flag.empty()) cfg_json["data"]["dir"] = data_flag;
        if (!detector_flag.empty()) cfg_json["detector"] = detector_flag;
        if (seed_flag >= 0) cfg_json["seed"] = seed_flag;
        if (count_flag >= 0) cfg_json["scene"]["count"] = count_flag;

        if (tr->parsed() || an->parsed()) require_key(cfg_json, "loss.gamma");
        const ResolvedConfig cfg = resolve_config(cfg_json);

        if (gen->parsed()) return cmd_gen_data(cfg);
        if (tr->parsed()) return cmd_train(cfg);
        if (pr->parsed()) return cmd_predict(cfg, checkpoint);
        if (ev->parsed()) return cmd_eval(cfg, checkpoint, results_dir);
        if (an->parsed()) return cmd_analyze(cfg, dump_path, checkpoint);
        if (im->parsed()) return cmd_imbalance(cfg);
        if (fl->parsed()) return cmd_flops(cfg);
        throw config_error("no subcommand");
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace focal3d::cli
