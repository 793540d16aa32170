#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "focal3d/common.hpp"
#include "focal3d/geometry.hpp"
#include "focal3d/voxel.hpp"

namespace focal3d {

enum Difficulty : int { kEasy = 0, kModerate = 1, kHard = 2, kIgnored = 3 };

struct Label {
    std::string type = "Car";
    Box3D box;
    int difficulty = kIgnored;
    int64_t support = 0;  // points inside the box, recomputed from geometry
};

struct Frame {
    std::string id;
    PointCloud cloud;
    std::vector<Label> labels;
};

// --- Velodyne binary (packed little-endian float32 x,y,z,r quadruples) --------

inline PointCloud load_velodyne(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open velodyne file: " + path);
    in.seekg(0, std::ios::end);
    const auto size = static_cast<size_t>(in.tellg());
    if (size % 16 != 0)
        throw data_error(path + ": truncated velodyne record at byte " +
                         std::to_string(size - size % 16));
    in.seekg(0);
    std::vector<float> raw(size / 4);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(size));
    if (!in) throw data_error(path + ": short read");
    PointCloud cloud;
    cloud.points.reserve(raw.size() / 4);
    for (size_t i = 0; i + 3 < raw.size(); i += 4)
        cloud.points.push_back({raw[i], raw[i + 1], raw[i + 2], raw[i + 3]});
    return cloud;
}

inline void save_velodyne(const std::string& path, const PointCloud& cloud) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write velodyne file: " + path);
    std::vector<float> raw;
    raw.reserve(cloud.points.size() * 4);
    for (const Point& p : cloud.points) {
        raw.push_back(static_cast<float>(p.x));
        raw.push_back(static_cast<float>(p.y));
        raw.push_back(static_cast<float>(p.z));
        raw.push_back(static_cast<float>(p.r));
    }
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(float)));
}

// --- calibration ----------------------------------------------------------------

// Camera-to-LiDAR transform from a KITTI calib file (R0_rect + Tr_velo_to_cam).
// The identity mode treats label coordinates as already LiDAR-frame with the
// location at the box bottom center and rotation equal to the LiDAR yaw.
struct Calibration {
    bool identity = true;
    std::array<double, 9> r0{1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::array<double, 12> tr{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};  // [R|t]

    static Calibration identity_mode() { return Calibration{}; }

    // p_velo = Tr^-1 (R0^-1 p_cam)   (both factors are rigid)
    std::array<double, 3> cam_to_lidar(double cx, double cy, double cz) const {
        if (identity) return {cx, cy, cz};
        const double rx = r0[0] * cx + r0[3] * cy + r0[6] * cz;  // R0^T p
        const double ry = r0[1] * cx + r0[4] * cy + r0[7] * cz;
        const double rz = r0[2] * cx + r0[5] * cy + r0[8] * cz;
        const double dx = rx - tr[3], dy = ry - tr[7], dz = rz - tr[11];
        return {tr[0] * dx + tr[4] * dy + tr[8] * dz,   // R^T (p - t)
                tr[1] * dx + tr[5] * dy + tr[9] * dz,
                tr[2] * dx + tr[6] * dy + tr[10] * dz};
    }

    double cam_yaw_to_lidar(double ry) const { return identity ? ry : -ry - M_PI / 2; }
};

inline Calibration load_calibration(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open calibration file: " + path);
    Calibration c;
    c.identity = false;
    bool have_r0 = false, have_tr = false;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "R0_rect:" || key == "R_rect") {
            for (auto& v : c.r0)
                if (!(ss >> v)) throw data_error(path + ": malformed R0_rect");
            have_r0 = true;
        } else if (key == "Tr_velo_to_cam:" || key == "Tr_velo_cam") {
            for (auto& v : c.tr)
                if (!(ss >> v)) throw data_error(path + ": malformed Tr_velo_to_cam");
            have_tr = true;
        }
    }
    if (!have_r0 || !have_tr)
        throw data_error(path + ": missing R0_rect or Tr_velo_to_cam");
    return c;
}

// --- KITTI label text -------------------------------------------------------------

// 15 whitespace-delimited columns: type truncated occluded alpha bbox(4)
// h w l x y z rotation_y; result files append a trailing score.
struct RawLabelRow {
    std::string type;
    double truncated = 0, occluded = 0, alpha = 0;
    double bbox[4] = {0, 0, 0, 0};
    double h = 0, w = 0, l = 0;
    double x = 0, y = 0, z = 0;
    double rotation_y = 0;
    std::optional<double> score;
};

inline RawLabelRow parse_label_row(const std::string& line, const std::string& where, int lineno) {
    std::istringstream ss(line);
    RawLabelRow r;
    double occ;
    if (!(ss >> r.type >> r.truncated >> occ >> r.alpha >> r.bbox[0] >> r.bbox[1] >> r.bbox[2] >>
          r.bbox[3] >> r.h >> r.w >> r.l >> r.x >> r.y >> r.z >> r.rotation_y))
        throw data_error(where + ":" + std::to_string(lineno) + ": malformed label row");
    r.occluded = occ;
    double s;
    if (ss >> s) r.score = s;
    return r;
}

inline int kitti_difficulty(const RawLabelRow& r) {
    const double height = r.bbox[3] - r.bbox[1];
    const int occ = static_cast<int>(r.occluded);
    if (height >= 40.0 && occ <= 0 && r.truncated <= 0.15) return kEasy;
    if (height >= 25.0 && occ <= 1 && r.truncated <= 0.30) return kModerate;
    if (height >= 25.0 && occ <= 2 && r.truncated <= 0.50) return kHard;
    return kIgnored;
}

// Synthetic frames have no image-plane boxes; difficulty comes from support.
inline int support_difficulty(int64_t support) {
    if (support >= 120) return kEasy;
    if (support >= 40) return kModerate;
    return kHard;
}

inline Box3D label_row_to_box(const RawLabelRow& r, const Calibration& calib) {
    const auto c = calib.cam_to_lidar(r.x, r.y, r.z);
    // KITTI locations are bottom centers
    return Box3D(c[0], c[1], c[2] + r.h / 2, r.l, r.w, r.h, calib.cam_yaw_to_lidar(r.rotation_y));
}

inline std::vector<Label> parse_labels(const std::string& path, const Calibration& calib) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open label file: " + path);
    std::vector<Label> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const RawLabelRow r = parse_label_row(line, path, lineno);
        if (r.type == "DontCare") continue;
        Label lab;
        lab.type = r.type;
        lab.box = label_row_to_box(r, calib);
        lab.difficulty = calib.identity ? kIgnored : kitti_difficulty(r);
        out.push_back(std::move(lab));
    }
    return out;
}

// Identity-mode emitter used by the synthetic pipeline and prediction dumps.
inline std::string format_label_line(const std::string& type, const Box3D& b,
                                     std::optional<double> score = std::nullopt) {
    std::string s = type;
    auto push = [&s](double v) { s += " " + format_double(v); };
    push(0.0);                    // truncated
    s += " 0";                    // occluded
    push(-10.0);                  // alpha (not computed)
    push(0.0); push(0.0); push(50.0); push(50.0);  // image bbox placeholder
    push(b.h); push(b.w); push(b.l);
    push(b.x); push(b.y); push(b.z - b.h / 2);     // bottom center
    push(b.yaw);
    if (score) push(*score);
    return s;
}

inline void write_labels(const std::string& path, const std::vector<Label>& labels) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot write label file: " + path);
    for (const auto& l : labels) out << format_label_line(l.type, l.box) << "\n";
}

inline void write_results(const std::string& path, const std::vector<Detection>& dets,
                          const std::string& type = "Car") {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot write result file: " + path);
    for (const auto& d : dets) out << format_label_line(type, d.box, d.score) << "\n";
}

inline std::vector<Detection> parse_results(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open result file: " + path);
    std::vector<Detection> out;
    std::string line;
    int lineno = 0;
    const auto calib = Calibration::identity_mode();
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const RawLabelRow r = parse_label_row(line, path, lineno);
        if (!r.score)
            throw data_error(path + ":" + std::to_string(lineno) + ": result row missing score");
        out.push_back({label_row_to_box(r, calib), *r.score});
    }
    return out;
}

// --- frame assembly -----------------------------------------------------------------

// Containment epsilon absorbs the float32 storage precision of on-surface
// points, keeping supports stable across save/load round trips.
inline int64_t count_support(const PointCloud& cloud, const Box3D& box) {
    int64_t n = 0;
    for (const Point& p : cloud.points)
        if (point_in_box(box, p.x, p.y, p.z, 1e-5)) ++n;
    return n;
}

// Support is recomputed from geometry, never trusted from input; identity-mode
// (synthetic) difficulty is derived from it.
inline void refresh_supports(Frame& frame, bool support_difficulty_tags) {
    for (auto& l : frame.labels) {
        l.support = count_support(frame.cloud, l.box);
        if (support_difficulty_tags) l.difficulty = support_difficulty(l.support);
    }
}

inline Frame load_frame(const std::string& data_dir, const std::string& id,
                        const Calibration& calib) {
    namespace fs = std::filesystem;
    Frame f;
    f.id = id;
    f.cloud = load_velodyne((fs::path(data_dir) / "velodyne" / (id + ".bin")).string());
    const auto label_path = fs::path(data_dir) / "label_2" / (id + ".txt");
    if (fs::exists(label_path)) f.labels = parse_labels(label_path.string(), calib);
    refresh_supports(f, calib.identity);
    return f;
}

inline std::vector<std::string> frame_ids(const std::string& data_dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> ids;
    const auto dir = fs::path(data_dir) / "velodyne";
    if (!fs::exists(dir)) throw data_error("no velodyne directory under " + data_dir);
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".bin") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Removes labels whose recomputed support is below min_points (strictly
// "fewer than": a box with exactly min_points survives).
inline Frame filter_sparse_boxes(const Frame& frame, int64_t min_points,
                                 size_t* removed = nullptr) {
    if (min_points < 0) throw std::domain_error("filter_sparse_boxes: min_points must be >= 0");
    Frame out;
    out.id = frame.id;
    out.cloud = frame.cloud;
    size_t dropped = 0;
    for (const auto& l : frame.labels) {
        if (l.support < min_points)
            ++dropped;
        else
            out.labels.push_back(l);
    }
    if (removed) *removed = dropped;
    return out;
}

// --- train/val split -----------------------------------------------------------------

inline std::pair<std::vector<std::string>, std::vector<std::string>> split_train_val(
    std::vector<std::string> ids, uint64_t seed) {
    if (ids.empty()) throw data_error("split_train_val: empty id list");
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, "train-val-split"));
    rng.shuffle(ids);
    const size_t n_train = (ids.size() + 1) / 2;
    std::vector<std::string> train(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::string> val(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    return {train, val};
}

inline void save_split(const std::string& path, const std::vector<std::string>& ids) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot write split file: " + path);
    for (const auto& id : ids) out << id << "\n";
}

inline std::vector<std::string> load_split(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open split file: " + path);
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    return ids;
}

// --- synthetic scenes -------------------------------------------------------------------

// Desk-scale LiDAR scene: car-like boxes resting on a ground plane, surface
// point samples on the five visible faces, uniform ground clutter.
struct SceneRecipe {
    int64_t min_objects = 1, max_objects = 4;
    std::array<double, 3> size_mean{3.9, 1.6, 1.56};
    std::array<double, 3> size_sigma{0.25, 0.12, 0.10};
    int64_t min_points = 60, max_points = 300;  // per object
    int64_t clutter_points = 600;
    double ground_z = 0.0;
    double x_min = 0.0, x_max = 19.2;
    double y_min = -9.6, y_max = 9.6;
    double yaw_max = M_PI;  // object yaw sampled uniformly in [-yaw_max, yaw_max)
    uint64_t seed = 0;

    void validate() const {
        if (min_objects < 0 || max_objects < min_objects)
            throw config_error("SceneRecipe: bad object count range");
        if (min_points < 1 || max_points < min_points)
            throw config_error("SceneRecipe: bad points-per-object range");
        if (clutter_points < 0) throw config_error("SceneRecipe: negative clutter count");
        if (!(x_max > x_min && y_max > y_min)) throw config_error("SceneRecipe: empty extent");
        if (!(yaw_max >= 0.0 && yaw_max <= M_PI)) throw config_error("SceneRecipe: yaw_max must be in [0, pi]");
        for (int i = 0; i < 3; ++i) {
            if (!(size_mean[static_cast<size_t>(i)] > 0) || size_sigma[static_cast<size_t>(i)] < 0)
                throw config_error("SceneRecipe: bad size distribution");
        }
    }
};

namespace detail {
// Generated clouds are stored as float32; snapping at generation time makes
// the save/load round trip bit-exact.
inline Point snap_f32(const Point& p) {
    return {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z),
            static_cast<float>(p.r)};
}

inline Point sample_face_point(Rng& rng, const Box3D& b) {
    // faces: 0 top, 1..2 +-x (l ends), 3..4 +-y (w sides), weighted by area
    const double a_top = b.l * b.w;
    const double a_lx = b.w * b.h;   // each of the two l-end faces
    const double a_wy = b.l * b.h;   // each of the two w-side faces
    const double total = a_top + 2 * a_lx + 2 * a_wy;
    double u = rng.uniform() * total;
    double lx, ly, lz;
    if (u < a_top) {
        lx = rng.uniform(-0.5, 0.5) * b.l;
        ly = rng.uniform(-0.5, 0.5) * b.w;
        lz = 0.5 * b.h;
    } else if ((u -= a_top) < 2 * a_lx) {
        const double side = u < a_lx ? 0.5 : -0.5;
        lx = side * b.l;
        ly = rng.uniform(-0.5, 0.5) * b.w;
        lz = rng.uniform(-0.5, 0.5) * b.h;
    } else {
        u -= 2 * a_lx;
        const double side = u < a_wy ? 0.5 : -0.5;
        lx = rng.uniform(-0.5, 0.5) * b.l;
        ly = side * b.w;
        lz = rng.uniform(-0.5, 0.5) * b.h;
    }
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    return {b.x + lx * c - ly * s, b.y + lx * s + ly * c, b.z + lz, rng.uniform()};
}

inline Box3D inflate(const Box3D& b, double margin) {
    return Box3D(b.x, b.y, b.z, b.l + margin, b.w + margin, b.h, b.yaw);
}
}  // namespace detail

inline Frame generate_scene(const SceneRecipe& recipe) {
    recipe.validate();
    Rng rng(derive_seed(recipe.seed, "scene"));
    Frame frame;

    const int64_t n_objects =
        recipe.min_objects +
        static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(recipe.max_objects - recipe.min_objects + 1)));

    std::vector<Box3D> placed;
    for (int64_t i = 0; i < n_objects; ++i) {
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
            double dims[3];
            for (int d = 0; d < 3; ++d) {
                const double v = rng.normal(recipe.size_mean[static_cast<size_t>(d)],
                                            recipe.size_sigma[static_cast<size_t>(d)]);
                dims[d] = std::max(v, 0.4 * recipe.size_mean[static_cast<size_t>(d)]);
            }
            const double margin = 0.5 * std::hypot(dims[0], dims[1]);
            if (recipe.x_max - recipe.x_min < 2 * margin || recipe.y_max - recipe.y_min < 2 * margin)
                continue;
            const double yaw = recipe.yaw_max > 0 ? rng.uniform(-recipe.yaw_max, recipe.yaw_max) : 0.0;
            const double cx = rng.uniform(recipe.x_min + margin, recipe.x_max - margin);
            const double cy = rng.uniform(recipe.y_min + margin, recipe.y_max - margin);
            Box3D box(cx, cy, recipe.ground_z + dims[2] / 2, dims[0], dims[1], dims[2], yaw);
            bool overlap = false;
            for (const auto& other : placed)
                if (bev_iou(detail::inflate(box, 0.4), detail::inflate(other, 0.4)) > 0.0)
                    overlap = true;
            if (!overlap) {
                placed.push_back(box);
                ok = true;
            }
        }
        if (!ok) throw data_error("generate_scene: unsatisfiable placement after bounded retries");
    }

    for (const auto& box : placed) {
        const int64_t n_points =
            recipe.min_points +
            static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(recipe.max_points - recipe.min_points + 1)));
        for (int64_t p = 0; p < n_points; ++p)
            frame.cloud.points.push_back(detail::snap_f32(detail::sample_face_point(rng, box)));
        Label lab;
        lab.type = "Car";
        lab.box = box;
        frame.labels.push_back(lab);
    }

    for (int64_t p = 0; p < recipe.clutter_points; ++p)
        frame.cloud.points.push_back(detail::snap_f32({rng.uniform(recipe.x_min, recipe.x_max),
                                                       rng.uniform(recipe.y_min, recipe.y_max),
                                                       recipe.ground_z, rng.uniform()}));

    refresh_supports(frame, true);
    return frame;
}

}  // namespace focal3d
