#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "focal3d/data.hpp"
#include "test_helpers.hpp"

using namespace focal3d;
namespace fs = std::filesystem;

namespace {
struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("focal3d_data_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};
}  // namespace

TEST_CASE("velodyne io") {
    TempDir tmp;
    const auto file = (tmp.path / "c.bin").string();
    SECTION("0-byte file is an empty cloud") {
        std::ofstream(file, std::ios::binary).close();
        CHECK(load_velodyne(file).points.empty());
    }
    SECTION("single quadruple decodes") {
        const float vals[4] = {1.0f, 2.0f, 3.0f, 0.5f};
        std::ofstream out(file, std::ios::binary);
        out.write(reinterpret_cast<const char*>(vals), 16);
        out.close();
        const auto c = load_velodyne(file);
        REQUIRE(c.points.size() == 1);
        CHECK(c.points[0].x == 1.0);
        CHECK(c.points[0].y == 2.0);
        CHECK(c.points[0].z == 3.0);
        CHECK(c.points[0].r == 0.5);
    }
    SECTION("truncated file reports the byte offset") {
        const char junk[21] = {0};
        std::ofstream out(file, std::ios::binary);
        out.write(junk, 21);
        out.close();
        try {
            load_velodyne(file);
            FAIL("expected data_error");
        } catch (const data_error& e) {
            CHECK(std::string(e.what()).find("byte 16") != std::string::npos);
        }
    }
    SECTION("write-then-read round trip is bit-exact") {
        Rng rng(3);
        PointCloud cloud;
        for (int i = 0; i < 500; ++i)
            cloud.points.push_back({static_cast<float>(rng.uniform(-50, 50)),
                                    static_cast<float>(rng.uniform(-50, 50)),
                                    static_cast<float>(rng.uniform(-3, 3)),
                                    static_cast<float>(rng.uniform())});
        save_velodyne(file, cloud);
        const auto back = load_velodyne(file);
        REQUIRE(back.points.size() == cloud.points.size());
        for (size_t i = 0; i < cloud.points.size(); ++i) {
            CHECK(back.points[i].x == cloud.points[i].x);
            CHECK(back.points[i].y == cloud.points[i].y);
            CHECK(back.points[i].z == cloud.points[i].z);
            CHECK(back.points[i].r == cloud.points[i].r);
        }
    }
}

TEST_CASE("label parsing") {
    TempDir tmp;
    const auto file = (tmp.path / "l.txt").string();
    const auto calib = Calibration::identity_mode();
    SECTION("field mapping h w l and bottom-center z") {
        std::ofstream(file) << "Car 0.0 0 -10 0 0 50 50 1.5 1.6 3.9 10.0 2.0 0.0 0.3\n";
        const auto labels = parse_labels(file, calib);
        REQUIRE(labels.size() == 1);
        CHECK(labels[0].box.l == 3.9);
        CHECK(labels[0].box.w == 1.6);
        CHECK(labels[0].box.h == 1.5);
        CHECK(labels[0].box.x == 10.0);
        CHECK(labels[0].box.y == 2.0);
        CHECK(labels[0].box.z == Catch::Approx(0.75));
        CHECK(labels[0].box.yaw == Catch::Approx(0.3));
    }
    SECTION("DontCare rows are excluded") {
        std::ofstream(file) << "DontCare -1 -1 -10 0 0 10 10 -1 -1 -1 -1000 -1000 -1000 -10\n"
                            << "Car 0.0 0 -10 0 0 50 50 1.5 1.6 3.9 1 2 0 0\n";
        CHECK(parse_labels(file, calib).size() == 1);
    }
    SECTION("malformed row names the line") {
        std::ofstream(file) << "Car 0.0 0 -10 0 0 50 50 1.5 1.6 3.9 1 2 0 0\n"
                            << "Car bogus\n";
        try {
            parse_labels(file, calib);
            FAIL("expected data_error");
        } catch (const data_error& e) {
            CHECK(std::string(e.what()).find(":2") != std::string::npos);
        }
    }
    SECTION("emit-then-parse round trip preserves numeric fields") {
        Rng rng(5);
        std::vector<Label> labels;
        for (int i = 0; i < 50; ++i) {
            Label l;
            l.box = focal3d::testing::random_box(rng);
            labels.push_back(l);
        }
        write_labels(file, labels);
        const auto back = parse_labels(file, calib);
        REQUIRE(back.size() == labels.size());
        for (size_t i = 0; i < labels.size(); ++i) {
            CHECK(std::abs(back[i].box.x - labels[i].box.x) < 1e-6);
            CHECK(std::abs(back[i].box.y - labels[i].box.y) < 1e-6);
            CHECK(std::abs(back[i].box.z - labels[i].box.z) < 1e-6);
            CHECK(std::abs(back[i].box.l - labels[i].box.l) < 1e-6);
            CHECK(std::abs(back[i].box.w - labels[i].box.w) < 1e-6);
            CHECK(std::abs(back[i].box.h - labels[i].box.h) < 1e-6);
            CHECK(std::abs(back[i].box.yaw - labels[i].box.yaw) < 1e-6);
        }
    }
    SECTION("camera-frame conversion with an explicit calibration") {
        // 90-degree rotation about z plus a translation as Tr, identity R0
        const auto calib_file = (tmp.path / "calib.txt").string();
        std::ofstream(calib_file) << "R0_rect: 1 0 0 0 1 0 0 0 1\n"
                                  << "Tr_velo_to_cam: 0 -1 0 0.5 1 0 0 -0.2 0 0 1 0.1\n";
        const auto c = load_calibration(calib_file);
        // cam point (0.5, -0.2, 0.1) maps back to the lidar origin
        const auto p = c.cam_to_lidar(0.5, -0.2, 0.1);
        CHECK(std::abs(p[0]) < 1e-12);
        CHECK(std::abs(p[1]) < 1e-12);
        CHECK(std::abs(p[2]) < 1e-12);
        CHECK(c.cam_yaw_to_lidar(0.0) == Catch::Approx(-M_PI / 2));
    }
}

TEST_CASE("filter_sparse_boxes") {
    Frame f;
    f.id = "x";
    // box at origin with 10 interior points; another with none
    Label a, b;
    a.box = Box3D(0, 0, 0, 2, 2, 2, 0);
    b.box = Box3D(10, 10, 0, 2, 2, 2, 0);
    f.labels = {a, b};
    for (int i = 0; i < 10; ++i) f.cloud.points.push_back({0.1 * i - 0.5, 0, 0, 0});
    refresh_supports(f, true);
    CHECK(f.labels[0].support == 10);
    CHECK(f.labels[1].support == 0);

    size_t removed = 0;
    SECTION("default threshold removes empty boxes, keeps exactly-10 boxes") {
        const auto kept = filter_sparse_boxes(f, 10, &removed);
        REQUIRE(kept.labels.size() == 1);
        CHECK(removed == 1);
        CHECK(kept.labels[0].support == 10);
    }
    SECTION("min_points = 0 is the identity") {
        const auto kept = filter_sparse_boxes(f, 0, &removed);
        CHECK(kept.labels.size() == 2);
        CHECK(removed == 0);
    }
}

TEST_CASE("train/val split") {
    SECTION("two ids split 1/1") {
        const auto [train, val] = split_train_val({"b", "a"}, 1);
        CHECK(train.size() == 1);
        CHECK(val.size() == 1);
        CHECK(train[0] != val[0]);
    }
    SECTION("7481 ids split 3741/3740, deterministic, disjoint") {
        std::vector<std::string> ids;
        for (int i = 0; i < 7481; ++i) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%06d", i);
            ids.push_back(buf);
        }
        const auto [train, val] = split_train_val(ids, 42);
        CHECK(train.size() == 3741);
        CHECK(val.size() == 3740);
        const auto [train2, val2] = split_train_val(ids, 42);
        CHECK(train == train2);
        CHECK(val == val2);
        std::set<std::string> all(train.begin(), train.end());
        for (const auto& id : val) CHECK(all.insert(id).second);
        CHECK(all.size() == ids.size());
        const auto [train3, _] = split_train_val(ids, 43);
        CHECK(train3 != train);
    }
    SECTION("split file round trip") {
        TempDir tmp;
        const auto file = (tmp.path / "split.txt").string();
        const std::vector<std::string> ids{"000001", "000007", "000010"};
        save_split(file, ids);
        CHECK(load_split(file) == ids);
    }
}

TEST_CASE("synthetic scenes") {
    SceneRecipe recipe;
    recipe.seed = 11;
    SECTION("zero objects means clutter only") {
        SceneRecipe r = recipe;
        r.min_objects = r.max_objects = 0;
        const auto f = generate_scene(r);
        CHECK(f.labels.empty());
        CHECK(f.cloud.points.size() == static_cast<size_t>(r.clutter_points));
    }
    SECTION("supports meet the recipe point count and pass the sparse filter") {
        for (uint64_t seed = 0; seed < 20; ++seed) {
            SceneRecipe r = recipe;
            r.seed = seed;
            const auto f = generate_scene(r);
            CHECK(!f.labels.empty());
            for (const auto& l : f.labels) {
                CHECK(l.support >= r.min_points);
                CHECK(l.difficulty != kIgnored);
            }
            size_t removed = 0;
            filter_sparse_boxes(f, r.min_points, &removed);
            CHECK(removed == 0);
        }
    }
    SECTION("boxes are pairwise BEV-disjoint") {
        for (uint64_t seed = 100; seed < 120; ++seed) {
            SceneRecipe r = recipe;
            r.seed = seed;
            r.max_objects = 5;
            const auto f = generate_scene(r);
            for (size_t i = 0; i + 1 < f.labels.size(); ++i)
                for (size_t j = i + 1; j < f.labels.size(); ++j)
                    CHECK(bev_iou(f.labels[i].box, f.labels[j].box) == 0.0);
        }
    }
    SECTION("deterministic per seed") {
        const auto a = generate_scene(recipe);
        const auto b = generate_scene(recipe);
        REQUIRE(a.cloud.points.size() == b.cloud.points.size());
        for (size_t i = 0; i < a.cloud.points.size(); ++i) {
            CHECK(a.cloud.points[i].x == b.cloud.points[i].x);
            CHECK(a.cloud.points[i].r == b.cloud.points[i].r);
        }
        REQUIRE(a.labels.size() == b.labels.size());
        for (size_t i = 0; i < a.labels.size(); ++i)
            CHECK(a.labels[i].box.yaw == b.labels[i].box.yaw);
    }
    SECTION("occupancy stays sparse on the mini grid") {
        const auto grid = grid_preset("voxelnet-mini");
        double worst = 0.0;
        for (uint64_t seed = 0; seed < 100; ++seed) {
            SceneRecipe r = recipe;
            r.seed = seed;
            const auto f = generate_scene(r);
            const auto st = occupancy_stats(voxelize_occupancy(f.cloud, grid));
            worst = std::max(worst, st.fraction);
        }
        CHECK(worst < 0.05);
        CHECK(worst > 0.0);
    }
    SECTION("unsatisfiable placement raises a generation error") {
        SceneRecipe r = recipe;
        r.min_objects = r.max_objects = 40;  // cannot pack 40 cars into the default extent
        CHECK_THROWS_AS(generate_scene(r), data_error);
    }
}

TEST_CASE("frame save/load round trip is exact") {
    TempDir tmp;
    fs::create_directories(tmp.path / "velodyne");
    fs::create_directories(tmp.path / "label_2");
    SceneRecipe recipe;
    recipe.seed = 77;
    auto f = generate_scene(recipe);
    f.id = "000000";
    save_velodyne((tmp.path / "velodyne" / "000000.bin").string(), f.cloud);
    write_labels((tmp.path / "label_2" / "000000.txt").string(), f.labels);

    const auto back = load_frame(tmp.path.string(), "000000", Calibration::identity_mode());
    REQUIRE(back.cloud.points.size() == f.cloud.points.size());
    for (size_t i = 0; i < f.cloud.points.size(); ++i) {
        CHECK(back.cloud.points[i].x == f.cloud.points[i].x);
        CHECK(back.cloud.points[i].y == f.cloud.points[i].y);
        CHECK(back.cloud.points[i].z == f.cloud.points[i].z);
        CHECK(back.cloud.points[i].r == f.cloud.points[i].r);
    }
    REQUIRE(back.labels.size() == f.labels.size());
    for (size_t i = 0; i < f.labels.size(); ++i) {
        CHECK(back.labels[i].support == f.labels[i].support);
        CHECK(back.labels[i].difficulty == f.labels[i].difficulty);
        CHECK(std::abs(back.labels[i].box.x - f.labels[i].box.x) < 1e-12);
        CHECK(std::abs(back.labels[i].box.yaw - f.labels[i].box.yaw) < 1e-12);
    }
    CHECK(frame_ids(tmp.path.string()) == std::vector<std::string>{"000000"});
}

TEST_CASE("result files carry the trailing score column") {
    TempDir tmp;
    const auto file = (tmp.path / "000000.txt").string();
    Rng rng(9);
    std::vector<Detection> dets;
    for (int i = 0; i < 20; ++i)
        dets.push_back({focal3d::testing::random_box(rng), rng.uniform()});
    write_results(file, dets);
    const auto back = parse_results(file);
    REQUIRE(back.size() == dets.size());
    for (size_t i = 0; i < dets.size(); ++i) {
        CHECK(back[i].score == dets[i].score);
        CHECK(std::abs(back[i].box.x - dets[i].box.x) < 1e-9);
    }
    // label rows without a score are rejected by the result parser
    write_labels(file, {Label{}});
    CHECK_THROWS_AS(parse_results(file), data_error);
}
