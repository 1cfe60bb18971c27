#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "dp/cloth.hpp"
#include "dp/verify.hpp"

using namespace dp;
namespace fs = std::filesystem;

TEST_CASE("zero gravity, zero velocity, no pin: state constant over time") {
    ClothTemplate tmpl = default_template(ShapeClass::towel, 200.0);
    SimParams params;
    params.gravity = 0.0;
    ClothSim sim(tmpl, params);
    const auto p0 = sim.state().positions;
    for (int i = 0; i < 200; ++i) sim.substep();
    const auto& p1 = sim.state().positions;
    for (std::size_t i = 0; i < p0.size(); ++i) {
        CHECK(p1[i].x == p0[i].x);
        CHECK(p1[i].y == p0[i].y);
        CHECK(p1[i].z == p0[i].z);
    }
}

TEST_CASE("single free particle follows the semi-implicit Euler recurrence") {
    // v_{k+1} = v_k - g dt, z_{k+1} = z_k + v_{k+1} dt from rest:
    // drop after n steps = g dt^2 (1 + 2 + ... + n).
    ClothMesh mesh;
    mesh.rest_positions = {{0, 0, 1.0}};
    mesh.particle_mass = 0.01;
    SimParams params;
    params.frame_hz = 100.0;
    params.substeps = 1;  // dt = 0.01
    ClothSim sim(mesh, params);
    for (int i = 0; i < 10; ++i) sim.substep();
    const double expected_drop = 9.81 * 0.01 * 0.01 * 55.0;
    CHECK(sim.state().positions[0].z == doctest::Approx(1.0 - expected_drop).epsilon(1e-12));
    CHECK(expected_drop == doctest::Approx(0.0539550).epsilon(1e-9));
}

TEST_CASE("post-release energy is non-increasing per frame for default templates") {
    const SuiteResult r = suite_energy_monotonic(1001);
    INFO(r.detail);
    CHECK(r.pass);
}

TEST_CASE("simulation is deterministic given template and seed") {
    const ClothTemplate tmpl = default_template(ShapeClass::shirt, 220.0);
    const DropResult a = simulate_drop(tmpl, 77, 12);
    const DropResult b = simulate_drop(tmpl, 77, 12);
    REQUIRE(a.states.size() == b.states.size());
    CHECK(a.states.size() == 12u * SimParams{}.substeps);
    for (std::size_t i = 0; i < a.states.size(); ++i)
        for (std::size_t p = 0; p < a.states[i].positions.size(); ++p) {
            CHECK(a.states[i].positions[p].x == b.states[i].positions[p].x);
            CHECK(a.states[i].positions[p].z == b.states[i].positions[p].z);
        }
}

TEST_CASE("pinned particle has zero velocity while pinned") {
    const ClothTemplate tmpl = default_template(ShapeClass::towel, 150.0);
    const DropResult drop = simulate_drop(tmpl, 5, 8);
    for (const auto& st : drop.states) {
        if (st.pinned < 0) continue;
        const Vec3& v = st.velocities[static_cast<std::size_t>(st.pinned)];
        CHECK(v.x == 0.0);
        CHECK(v.y == 0.0);
        CHECK(v.z == 0.0);
    }
}

TEST_CASE("unstable stiffness explodes with a diagnostic naming dt and stiffness") {
    ClothTemplate tmpl = default_template(ShapeClass::towel, 100.0);
    tmpl.stiffness = 5e6;
    try {
        simulate_drop(tmpl, 3, 30);
        FAIL("expected SimulationError");
    } catch (const SimulationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("dt=") != std::string::npos);
        CHECK(msg.find("stiffness=") != std::string::npos);
    }
}

TEST_CASE("heavier templates land sooner under the default drag model") {
    CHECK_NOTHROW(verify_mass_ordering());
}

TEST_CASE("depth render: flat cloth at height h encodes camera_z - h within 1 mm") {
    const double h = 0.42;
    std::vector<Vec3> pos{{-0.1, -0.1, h}, {0.1, -0.1, h}, {-0.1, 0.1, h}, {0.1, 0.1, h}};
    std::vector<std::array<int, 3>> tris{{0, 1, 2}, {1, 3, 2}};
    Camera cam;
    cam.height_m = 2.0;
    cam.image_w = cam.image_h = 64;
    cam.view_w_m = cam.view_h_m = 0.5;
    const ImageU16 img = render_depth(pos, tris, cam);
    const std::uint16_t expected = static_cast<std::uint16_t>(std::lround((2.0 - h) * 1000.0));
    int cloth_px = 0;
    for (auto v : img.pixels)
        if (v != 2000) {
            ++cloth_px;
            CHECK(std::abs(static_cast<int>(v) - static_cast<int>(expected)) <= 1);
        }
    CHECK(cloth_px > 0);
}

TEST_CASE("depth render: empty scene is a uniform ground-distance image") {
    Camera cam;
    const ImageU16 img = render_depth({}, {}, cam);
    for (auto v : img.pixels) CHECK(v == 2000);
}

TEST_CASE("depth render: nearer surface wins, checked against a brute-force oracle") {
    // Folded cloth: a low quad partially covered by a high quad.
    std::vector<Vec3> pos{{-0.2, -0.2, 0.1}, {0.2, -0.2, 0.1}, {-0.2, 0.2, 0.1}, {0.2, 0.2, 0.1},
                          {-0.05, -0.2, 0.3}, {0.2, -0.2, 0.3}, {-0.05, 0.2, 0.3}, {0.2, 0.2, 0.3}};
    std::vector<std::array<int, 3>> tris{{0, 1, 2}, {1, 3, 2}, {4, 5, 6}, {5, 7, 6}};
    Camera cam;
    cam.image_w = cam.image_h = 80;
    cam.view_w_m = cam.view_h_m = 0.6;
    const ImageU16 img = render_depth(pos, tris, cam);

    // Oracle: full per-pixel point-in-triangle scan over every triangle.
    auto oracle_depth = [&](int px, int py) {
        const double x = (px + 0.5) / cam.image_w * cam.view_w_m - cam.view_w_m / 2;
        const double y = cam.view_h_m / 2 - (py + 0.5) / cam.image_h * cam.view_h_m;
        double best_z = -1;
        bool hit = false;
        for (const auto& t : tris) {
            const Vec3 &a = pos[static_cast<std::size_t>(t[0])], &b = pos[static_cast<std::size_t>(t[1])],
                       &c = pos[static_cast<std::size_t>(t[2])];
            const double area = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
            if (std::abs(area) < 1e-15) continue;
            const double wa = ((b.x - x) * (c.y - y) - (c.x - x) * (b.y - y)) / area;
            const double wb = ((c.x - x) * (a.y - y) - (a.x - x) * (c.y - y)) / area;
            const double wc = 1.0 - wa - wb;
            if (wa < -1e-9 || wb < -1e-9 || wc < -1e-9) continue;
            const double z = wa * a.z + wb * b.z + wc * c.z;
            if (!hit || z > best_z) {
                best_z = z;
                hit = true;
            }
        }
        return hit ? static_cast<int>(std::lround((cam.height_m - best_z) * 1000)) : 2000;
    };
    for (int py = 0; py < cam.image_h; ++py)
        for (int px = 0; px < cam.image_w; ++px)
            CHECK(static_cast<int>(img.at(px, py)) == oracle_depth(px, py));
}

TEST_CASE("degenerate camera is a config error") {
    Camera cam;
    cam.height_m = 0.0;
    CHECK_THROWS_AS(render_depth({}, {}, cam), UsageError);
}

namespace {
std::map<std::string, std::string> tree_digest(const fs::path& root) {
    std::map<std::string, std::string> digest;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream is(entry.path(), std::ios::binary);
        const std::string bytes{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
        digest[fs::relative(entry.path(), root).string()] =
            std::to_string(fnv1a64(bytes.data(), bytes.size())) + ":" + std::to_string(bytes.size());
    }
    return digest;
}
}  // namespace

TEST_CASE("tiny dataset generation is byte-identical across runs of the same seed") {
    DatasetSpec spec = DatasetSpec::toy();
    spec.garments_per_class = 1;
    spec.sequences_per_garment = 1;
    spec.frames_per_sequence = 6;
    spec.image_size = 48;
    const fs::path a = fs::temp_directory_path() / "dp_gen_a";
    const fs::path b = fs::temp_directory_path() / "dp_gen_b";
    fs::remove_all(a);
    fs::remove_all(b);
    generate_dataset(spec, a, 7);
    generate_dataset(spec, b, 7);
    CHECK(tree_digest(a) == tree_digest(b));

    const GarmentManifest m = load_manifest(a / "manifest.json");
    CHECK(m.garments.size() == 5);
    int png_count = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a))
        if (entry.path().extension() == ".png") ++png_count;
    CHECK(png_count == 5 * 6 * 3);  // depth + rgb + mask per frame
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("generated masses cover all three weight bins") {
    DatasetSpec spec = DatasetSpec::toy();
    spec.garments_per_class = 2;
    spec.sequences_per_garment = 1;
    spec.frames_per_sequence = 4;
    spec.image_size = 32;
    const fs::path dir = fs::temp_directory_path() / "dp_gen_bins";
    fs::remove_all(dir);
    const GarmentManifest m = generate_dataset(spec, dir, 3);
    std::set<WeightClass> bins;
    for (const auto& g : m.garments) bins.insert(weight_bin(g.mass_grams));
    CHECK(bins.size() == 3);
    fs::remove_all(dir);
}

TEST_CASE("paper-scale spec counts 40000 depth frames") {
    CHECK(DatasetSpec::paper_scale().total_depth_frames() == 40000);
}

TEST_CASE("silhouettes: five distinct documented outlines") {
    for (int c = 0; c < kShapeClassCount; ++c) {
        const auto poly = silhouette(static_cast<ShapeClass>(c));
        CHECK(poly.size() >= 4);
    }
    CHECK(silhouette(ShapeClass::pant) != silhouette(ShapeClass::shirt));
    CHECK(silhouette(ShapeClass::sweater) != silhouette(ShapeClass::shirt));
}
