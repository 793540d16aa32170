#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "focal3d/common.hpp"
#include "focal3d/data.hpp"
#include "focal3d/geometry.hpp"
#include "focal3d/losses.hpp"
#include "focal3d/targets.hpp"

namespace focal3d {

// --- prediction dumps -------------------------------------------------------

// (y, p_t) pairs sampled from a model's anchor outputs.
struct PredictionDump {
    struct Entry {
        int8_t y;     // +1 / -1
        double p_t;   // clamped into (0,1) on use
    };
    std::vector<Entry> entries;
};

inline void write_dump_csv(const std::string& path, const PredictionDump& dump) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot write dump: " + path);
    out << "y,p_t\n";
    for (const auto& e : dump.entries)
        out << static_cast<int>(e.y) << "," << format_double(e.p_t) << "\n";
}

inline PredictionDump read_dump_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open dump: " + path);
    PredictionDump dump;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1) {
            if (line.rfind("y,p_t", 0) != 0)
                throw data_error(path + ": expected header y,p_t");
            continue;
        }
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw data_error(path + ":" + std::to_string(lineno) + ": malformed dump row");
        const int y = std::stoi(line.substr(0, comma));
        const double pt = std::strtod(line.c_str() + comma + 1, nullptr);
        if (y != 1 && y != -1)
            throw data_error(path + ":" + std::to_string(lineno) + ": y must be +-1");
        dump.entries.push_back({static_cast<int8_t>(y), pt});
    }
    return dump;
}

// Synthetic dump: negatives skewed easy (p_t mass near 1), positives mixed.
inline PredictionDump make_beta_dump(size_t n_neg, size_t n_pos, uint64_t seed,
                                     double neg_a = 6.0, double neg_b = 1.0, double pos_a = 3.0,
                                     double pos_b = 1.5) {
    Rng rng(derive_seed(seed, "beta-dump"));
    PredictionDump dump;
    dump.entries.reserve(n_neg + n_pos);
    for (size_t i = 0; i < n_neg; ++i)
        dump.entries.push_back({-1, clamp_prob(rng.beta(neg_a, neg_b))});
    for (size_t i = 0; i < n_pos; ++i)
        dump.entries.push_back({+1, clamp_prob(rng.beta(pos_a, pos_b))});
    return dump;
}

// --- cumulative loss distribution ---------------------------------------------

// x = fraction of samples (sorted low loss to high), y = normalized cumulative
// loss; nondecreasing with terminal value 1.
struct CDFCurve {
    std::vector<double> x, y;
};

inline CDFCurve loss_cdf(const PredictionDump& dump, double gamma, int class_filter) {
    if (class_filter != +1 && class_filter != -1)
        throw std::domain_error("loss_cdf: class filter must be +1 or -1");
    std::vector<double> losses;
    for (const auto& e : dump.entries)
        if (e.y == class_filter) losses.push_back(focal_from_pt(e.p_t, gamma));
    if (losses.empty()) throw std::domain_error("loss_cdf: no samples of the requested class");
    std::sort(losses.begin(), losses.end());
    double total = 0.0;
    for (double l : losses) total += l;
    CDFCurve curve;
    curve.x.reserve(losses.size());
    curve.y.reserve(losses.size());
    double cum = 0.0;
    const double n = static_cast<double>(losses.size());
    for (size_t k = 0; k < losses.size(); ++k) {
        cum += losses[k];
        curve.x.push_back(static_cast<double>(k + 1) / n);
        curve.y.push_back(total > 0.0 ? cum / total : static_cast<double>(k + 1) / n);
    }
    return curve;
}

inline void write_curve_csv(const std::string& path, const CDFCurve& curve) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot write curve: " + path);
    out << "x,y\n";
    for (size_t i = 0; i < curve.x.size(); ++i)
        out << format_double(curve.x[i]) << "," << format_double(curve.y[i]) << "\n";
}

// --- posterior probability histogram --------------------------------------------

struct Histogram {
    std::vector<double> edges;    // bins + 1 uniform edges over [0, 1]
    std::vector<int64_t> counts;  // sums to the number of inputs

    int peak_bin() const {
        int best = 0;
        for (size_t i = 1; i < counts.size(); ++i)
            if (counts[i] > counts[static_cast<size_t>(best)]) best = static_cast<int>(i);
        return best;
    }
};

inline Histogram posterior_histogram(const std::vector<double>& scores, int bins) {
    if (bins < 2) throw std::domain_error("posterior_histogram: bins must be >= 2");
    Histogram h;
    h.edges.resize(static_cast<size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i)
        h.edges[static_cast<size_t>(i)] = static_cast<double>(i) / static_cast<double>(bins);
    h.counts.assign(static_cast<size_t>(bins), 0);
    for (double s : scores) {
        int idx = static_cast<int>(std::floor(s * bins));
        idx = std::clamp(idx, 0, bins - 1);
        ++h.counts[static_cast<size_t>(idx)];
    }
    return h;
}

inline void write_histogram_csv(const std::string& path, const Histogram& h) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot write histogram: " + path);
    out << "bin_lo,bin_hi,count\n";
    for (size_t i = 0; i < h.counts.size(); ++i)
        out << format_double(h.edges[i]) << "," << format_double(h.edges[i + 1]) << ","
            << h.counts[i] << "\n";
}

// --- fore-background imbalance -----------------------------------------------------

struct ImbalanceReport {
    int64_t n_pos = 0;
    int64_t n_neg = 0;
    double ratio = 0.0;  // n_neg / max(n_pos, 1)
    std::vector<int64_t> pos_per_z, neg_per_z;
};

inline ImbalanceReport imbalance_report(const TargetAssignment& ta) {
    ImbalanceReport r;
    r.n_pos = ta.n_pos;
    r.n_neg = ta.n_neg;
    r.ratio = static_cast<double>(ta.n_neg) / static_cast<double>(std::max<int64_t>(ta.n_pos, 1));
    const size_t slices = static_cast<size_t>(std::max<int32_t>(ta.z_slices, 1));
    r.pos_per_z.assign(slices, 0);
    r.neg_per_z.assign(slices, 0);
    for (size_t a = 0; a < ta.labels.size(); ++a) {
        const int32_t z = ta.anchor_z_slice.empty() ? 0 : ta.anchor_z_slice[a];
        if (ta.labels[a] > 0)
            ++r.pos_per_z[static_cast<size_t>(z)];
        else if (ta.labels[a] < 0)
            ++r.neg_per_z[static_cast<size_t>(z)];
    }
    return r;
}

inline void write_imbalance_csv(const std::string& path, const ImbalanceReport& r) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot write imbalance report: " + path);
    out << "z_slice,positive,negative\n";
    for (size_t z = 0; z < r.pos_per_z.size(); ++z)
        out << z << "," << r.pos_per_z[z] << "," << r.neg_per_z[z] << "\n";
    out << "total," << r.n_pos << "," << r.n_neg << "\n";
    out << "ratio," << format_double(r.ratio) << ",\n";
}

// --- hardest-k% loss shares ----------------------------------------------------------

struct GammaSweepRow {
    double gamma = 0.0;
    std::vector<std::pair<int, double>> shares;  // (k percent, share of total loss)
};

inline std::vector<GammaSweepRow> gamma_sweep(const PredictionDump& dump,
                                              const std::vector<double>& gammas,
                                              const std::vector<int>& ks = {1, 10, 20}) {
    if (dump.entries.empty()) throw std::domain_error("gamma_sweep: empty dump");
    std::vector<GammaSweepRow> rows;
    for (double g : gammas) {
        std::vector<double> losses;
        losses.reserve(dump.entries.size());
        for (const auto& e : dump.entries) losses.push_back(focal_from_pt(e.p_t, g));
        std::sort(losses.begin(), losses.end(), std::greater<double>());
        double total = 0.0;
        for (double l : losses) total += l;
        GammaSweepRow row;
        row.gamma = g;
        for (int k : ks) {
            const auto m = std::max<size_t>(
                1, static_cast<size_t>(std::llround(static_cast<double>(losses.size()) * k / 100.0)));
            double top = 0.0;
            for (size_t i = 0; i < m && i < losses.size(); ++i) top += losses[i];
            row.shares.push_back({k, total > 0.0 ? top / total : 0.0});
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void write_sweep_csv(const std::string& path, const std::vector<GammaSweepRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot write sweep: " + path);
    out << "gamma";
    if (!rows.empty())
        for (const auto& [k, _] : rows.front().shares) out << ",hardest_" << k << "pct";
    out << "\n";
    for (const auto& row : rows) {
        out << format_double(row.gamma);
        for (const auto& [_, share] : row.shares) out << "," << format_double(share);
        out << "\n";
    }
}

// --- average precision -----------------------------------------------------------------

struct EvalFrame {
    std::vector<Detection> dets;
    std::vector<Label> labels;
};

enum class ApInterp { p11, p40 };

// Greedy score-descending matching; each label matched at most once. Labels
// harder than the evaluated difficulty are "ignored": detections matched to
// them are dropped from the ranking instead of counting as false positives.
// Returns the interpolated AP in percent, or nullopt when the difficulty
// bucket has no target labels.
inline std::optional<double> average_precision(const std::vector<EvalFrame>& frames,
                                               IouMetric metric, double overlap, int difficulty,
                                               ApInterp interp = ApInterp::p11) {
    if (!(overlap > 0.0 && overlap <= 1.0))
        throw std::domain_error("average_precision: overlap must be in (0, 1]");
    struct DetRef {
        size_t frame, det;
        double score;
    };
    std::vector<DetRef> order;
    int64_t n_targets = 0;
    std::vector<std::vector<int8_t>> gt_state(frames.size());  // 0 free, 1 matched
    std::vector<std::vector<bool>> gt_target(frames.size());
    for (size_t f = 0; f < frames.size(); ++f) {
        gt_state[f].assign(frames[f].labels.size(), 0);
        gt_target[f].resize(frames[f].labels.size());
        for (size_t g = 0; g < frames[f].labels.size(); ++g) {
            const bool target = frames[f].labels[g].difficulty <= difficulty;
            gt_target[f][g] = target;
            if (target) ++n_targets;
        }
        for (size_t d = 0; d < frames[f].dets.size(); ++d)
            order.push_back({f, d, frames[f].dets[d].score});
    }
    if (n_targets == 0) return std::nullopt;
    std::stable_sort(order.begin(), order.end(),
                     [](const DetRef& a, const DetRef& b) { return a.score > b.score; });

    std::vector<double> precision, recall;
    int64_t tp = 0, fp = 0;
    for (const auto& ref : order) {
        const auto& det = frames[ref.frame].dets[ref.det];
        double best_iou = 0.0;
        size_t best_g = 0;
        bool found = false;
        const auto& labels = frames[ref.frame].labels;
        for (size_t g = 0; g < labels.size(); ++g) {
            if (gt_state[ref.frame][g]) continue;
            const double v = iou(det.box, labels[g].box, metric);
            if (v >= overlap && v > best_iou) {
                best_iou = v;
                best_g = g;
                found = true;
            }
        }
        if (found) {
            gt_state[ref.frame][best_g] = 1;
            if (gt_target[ref.frame][best_g])
                ++tp;
            else
                continue;  // matched an ignored label: drop from the ranking
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_targets));
    }

    const int points = interp == ApInterp::p11 ? 11 : 40;
    double acc = 0.0;
    for (int i = 0; i < points; ++i) {
        const double r = interp == ApInterp::p11
                             ? static_cast<double>(i) / 10.0
                             : static_cast<double>(i + 1) / 40.0;
        double pmax = 0.0;
        for (size_t j = 0; j < recall.size(); ++j)
            if (recall[j] >= r - 1e-12) pmax = std::max(pmax, precision[j]);
        acc += pmax;
    }
    return 100.0 * acc / static_cast<double>(points);
}

struct APResult {
    std::optional<double> bev[3];    // easy, moderate, hard
    std::optional<double> box3d[3];
    std::optional<double> map3d;     // mean of the defined 3D APs
};

inline APResult evaluate_ap(const std::vector<EvalFrame>& frames, double overlap_bev,
                            double overlap_3d, ApInterp interp = ApInterp::p11) {
    APResult r;
    double sum = 0.0;
    int defined = 0;
    for (int d = 0; d < 3; ++d) {
        r.bev[d] = average_precision(frames, IouMetric::bev, overlap_bev, d, interp);
        r.box3d[d] = average_precision(frames, IouMetric::box3d, overlap_3d, d, interp);
        if (r.box3d[d]) {
            sum += *r.box3d[d];
            ++defined;
        }
    }
    if (defined > 0) r.map3d = sum / defined;
    return r;
}

inline nlohmann::json ap_to_json(const APResult& r) {
    nlohmann::json j;
    const char* names[3] = {"easy", "moderate", "hard"};
    for (int d = 0; d < 3; ++d) {
        j["bev_ap"][names[d]] = r.bev[d] ? nlohmann::json(*r.bev[d]) : nlohmann::json(nullptr);
        j["3d_ap"][names[d]] = r.box3d[d] ? nlohmann::json(*r.box3d[d]) : nlohmann::json(nullptr);
    }
    j["3d_map"] = r.map3d ? nlohmann::json(*r.map3d) : nlohmann::json(nullptr);
    return j;
}

}  // namespace focal3d
