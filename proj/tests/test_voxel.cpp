#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "focal3d/voxel.hpp"

using namespace focal3d;

namespace {
VoxelGridSpec small_grid() {
    VoxelGridSpec g;
    g.x0 = 0.0;
    g.y0 = 0.0;
    g.z0 = 0.0;
    g.vz = g.vx = g.vy = 1.0;
    g.nd = 4;
    g.nh = 5;
    g.nw = 6;
    return g;
}

PointCloud random_cloud(Rng& rng, size_t n, double zmax = 4, double xmax = 5, double ymax = 6) {
    PointCloud c;
    for (size_t i = 0; i < n; ++i)
        c.points.push_back({rng.uniform(0, xmax), rng.uniform(0, ymax), rng.uniform(0, zmax),
                            rng.uniform()});
    return c;
}
}  // namespace

TEST_CASE("occupancy basics") {
    const auto g = small_grid();
    SECTION("empty cloud -> all-zero grid") {
        const auto occ = voxelize_occupancy(PointCloud{}, g);
        for (auto c : occ.cells) CHECK(c == 0);
        const auto st = occupancy_stats(occ);
        CHECK(st.non_empty == 0);
        CHECK(st.fraction == 0.0);
        for (auto z : st.per_z) CHECK(z == 0);
    }
    SECTION("single point at the origin fills voxel (0,0,0)") {
        PointCloud c;
        c.points.push_back({0.0, 0.0, 0.0, 0.5});
        const auto occ = voxelize_occupancy(c, g);
        CHECK(occupancy_stats(occ).non_empty == 1);
        CHECK(occ.cells[static_cast<size_t>(g.flat(0, 0, 0))] == 1);
    }
    SECTION("upper-boundary points are dropped, upper-face points go to the next voxel") {
        PointCloud c;
        c.points.push_back({1.0, 0.5, 0.5, 0.0});  // x exactly on face between ix 0 and 1
        c.points.push_back({5.0, 0.5, 0.5, 0.0});  // x on the grid's upper boundary
        const auto occ = voxelize_occupancy(c, g);
        CHECK(occ.cells[static_cast<size_t>(g.flat(0, 1, 0))] == 1);
        CHECK(occ.dropped_points == 1);
        CHECK(occupancy_stats(occ).non_empty == 1);
    }
    SECTION("full grid -> fraction 1") {
        PointCloud c;
        for (int64_t iz = 0; iz < g.nd; ++iz)
            for (int64_t ix = 0; ix < g.nh; ++ix)
                for (int64_t iy = 0; iy < g.nw; ++iy)
                    c.points.push_back({ix + 0.5, iy + 0.5, iz + 0.5, 0.0});
        const auto st = occupancy_stats(voxelize_occupancy(c, g));
        CHECK(st.fraction == 1.0);
        int64_t sum = 0;
        for (auto z : st.per_z) sum += z;
        CHECK(sum == st.non_empty);
    }
}

TEST_CASE("sparse voxelization") {
    const auto g = small_grid();
    SECTION("one point per voxel -> single rows with zero offsets") {
        PointCloud c;
        c.points.push_back({0.25, 0.25, 0.25, 0.1});
        c.points.push_back({2.5, 3.5, 1.5, 0.9});
        const auto sv = voxelize_sparse(c, g, 35, 7);
        REQUIRE(sv.voxels.size() == 2);
        for (const auto& v : sv.voxels) {
            REQUIRE(v.rows.size() == 1);
            CHECK(v.rows[0][4] == 0.0);
            CHECK(v.rows[0][5] == 0.0);
            CHECK(v.rows[0][6] == 0.0);
        }
    }
    SECTION("over-capacity voxel clamps to T rows") {
        PointCloud c;
        for (int i = 0; i < 20; ++i) c.points.push_back({0.5, 0.5, 0.5, 0.5});
        const auto sv = voxelize_sparse(c, g, 10, 3);
        REQUIRE(sv.voxels.size() == 1);
        CHECK(sv.voxels[0].rows.size() == 10);
    }
    SECTION("centroid offsets sum to zero per voxel") {
        Rng rng(5);
        const auto cloud = random_cloud(rng, 500);
        const auto sv = voxelize_sparse(cloud, g, 8, 11);
        for (const auto& v : sv.voxels) {
            double sx = 0, sy = 0, sz = 0;
            for (const auto& r : v.rows) {
                sx += r[4];
                sy += r[5];
                sz += r[6];
            }
            CHECK(std::abs(sx) < 1e-9);
            CHECK(std::abs(sy) < 1e-9);
            CHECK(std::abs(sz) < 1e-9);
        }
    }
    SECTION("presence matches dense occupancy (cross-encoding oracle)") {
        Rng rng(6);
        const auto cloud = random_cloud(rng, 800);
        const auto occ = voxelize_occupancy(cloud, g);
        for (int64_t t : {int64_t{1}, int64_t{4}, kUnlimitedRows}) {
            const auto sv = voxelize_sparse(cloud, g, t, 13);
            std::set<int64_t> present;
            for (const auto& v : sv.voxels) present.insert(g.flat(v.iz, v.ix, v.iy));
            int64_t occupied = 0;
            for (int64_t i = 0; i < static_cast<int64_t>(occ.cells.size()); ++i) {
                if (occ.cells[static_cast<size_t>(i)]) {
                    ++occupied;
                    CHECK(present.count(i) == 1);
                }
            }
            CHECK(static_cast<int64_t>(present.size()) == occupied);
            CHECK(sv.dropped_points == occ.dropped_points);
        }
    }
    SECTION("deterministic for a fixed seed, varies across seeds") {
        Rng rng(8);
        PointCloud c;
        for (int i = 0; i < 40; ++i) c.points.push_back({0.1 + 0.02 * i, 0.5, 0.5, 0.01 * i});
        const auto a = voxelize_sparse(c, g, 5, 21);
        const auto b = voxelize_sparse(c, g, 5, 21);
        REQUIRE(a.voxels.size() == b.voxels.size());
        for (size_t i = 0; i < a.voxels.size(); ++i) {
            REQUIRE(a.voxels[i].rows.size() == b.voxels[i].rows.size());
            for (size_t r = 0; r < a.voxels[i].rows.size(); ++r)
                for (int k = 0; k < 7; ++k)
                    CHECK(a.voxels[i].rows[r][k] == b.voxels[i].rows[r][k]);
        }
        const auto other = voxelize_sparse(c, g, 5, 22);
        bool any_diff = false;
        for (size_t r = 0; r < 5; ++r)
            if (a.voxels[0].rows[r][3] != other.voxels[0].rows[r][3]) any_diff = true;
        CHECK(any_diff);
    }
}

TEST_CASE("scatter/gather") {
    const auto g = small_grid();
    SECTION("empty set -> zero tensor") {
        const auto t = scatter_to_dense({}, g, 3);
        CHECK(t.shape == std::vector<int64_t>{3, 4, 5, 6});
        for (double v : t.v) CHECK(v == 0.0);
    }
    SECTION("single voxel feature lands at its index only") {
        std::vector<VoxelFeature> f{{1, 2, 3, {1.0, 2.0, 3.0}}};
        const auto t = scatter_to_dense(f, g, 3);
        const int64_t cells = g.cells();
        for (int64_t c = 0; c < 3; ++c)
            CHECK(t.v[static_cast<size_t>(c * cells + g.flat(1, 2, 3))] == static_cast<double>(c + 1));
        double sum = 0;
        for (double v : t.v) sum += v;
        CHECK(sum == 6.0);
    }
    SECTION("gather(scatter(x)) == x bit-exactly") {
        Rng rng(12);
        std::vector<VoxelFeature> f;
        std::set<int64_t> used;
        for (int i = 0; i < 30; ++i) {
            VoxelFeature vf;
            vf.iz = static_cast<int64_t>(rng.uniform_int(4));
            vf.ix = static_cast<int64_t>(rng.uniform_int(5));
            vf.iy = static_cast<int64_t>(rng.uniform_int(6));
            if (!used.insert(g.flat(vf.iz, vf.ix, vf.iy)).second) continue;
            for (int c = 0; c < 4; ++c) vf.f.push_back(rng.uniform(-10, 10));
            f.push_back(vf);
        }
        const auto t = scatter_to_dense(f, g, 4);
        const auto back = gather_from_dense(t, g, f);
        REQUIRE(back.size() == f.size());
        for (size_t i = 0; i < f.size(); ++i)
            for (int c = 0; c < 4; ++c) CHECK(back[i].f[static_cast<size_t>(c)] == f[i].f[static_cast<size_t>(c)]);
    }
    SECTION("duplicate index is a structural error") {
        std::vector<VoxelFeature> f{{0, 0, 0, {1.0}}, {0, 0, 0, {2.0}}};
        CHECK_THROWS_AS(scatter_to_dense(f, g, 1), std::invalid_argument);
    }
}

TEST_CASE("grid presets") {
    const auto fcn = grid_preset("3dfcn-car");
    CHECK(fcn.nd * fcn.nh * fcn.nw == 40 * 800 * 800);
    const auto vox = grid_preset("voxelnet-car");
    CHECK(vox.nd == 10);
    CHECK(vox.nh == 400);
    CHECK(vox.nw == 352);
    CHECK_THROWS_AS(grid_preset("nope"), config_error);
    grid_preset("voxelnet-mini").validate();
    grid_preset("3dfcn-mini").validate();
}
