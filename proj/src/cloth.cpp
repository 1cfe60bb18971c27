#include "dp/cloth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <random>
#include <sstream>

namespace dp {

std::vector<std::array<double, 2>> silhouette(ShapeClass shape) {
    // Flat outlines in meters, origin-centered. Legs/sleeves are part of the
    // polygon so the particle grid keeps the garment topology.
    switch (shape) {
        case ShapeClass::pant:
            return {{-0.17, 0.30}, {0.17, 0.30},  {0.17, 0.02},   {0.07, -0.30}, {0.015, -0.30},
                    {0.0, -0.04},  {-0.015, -0.30}, {-0.07, -0.30}, {-0.17, 0.02}};
        case ShapeClass::shirt:
            return {{-0.15, 0.22}, {0.15, 0.22},  {0.38, 0.16},  {0.38, 0.07},  {0.15, 0.10},
                    {0.15, -0.22}, {-0.15, -0.22}, {-0.15, 0.10}, {-0.38, 0.07}, {-0.38, 0.16}};
        case ShapeClass::sweater:
            return {{-0.19, 0.23}, {0.19, 0.23},  {0.42, 0.15},  {0.42, 0.02},  {0.19, 0.06},
                    {0.19, -0.23}, {-0.19, -0.23}, {-0.19, 0.06}, {-0.42, 0.02}, {-0.42, 0.15}};
        case ShapeClass::towel:
            return {{-0.18, -0.25}, {0.18, -0.25}, {0.18, 0.25}, {-0.18, 0.25}};
        case ShapeClass::tshirt:
            return {{-0.17, 0.20}, {0.17, 0.20},  {0.28, 0.14},  {0.28, 0.02},  {0.17, 0.05},
                    {0.17, -0.20}, {-0.17, -0.20}, {-0.17, 0.05}, {-0.28, 0.02}, {-0.28, 0.14}};
    }
    throw UsageError("silhouette: bad shape class");
}

namespace {

constexpr double kGridSpacing = 0.032;  // meters between neighbouring particles
constexpr double kReferenceParticleMass = 0.001;  // kg, anchors the drag model

bool point_in_polygon(double x, double y, const std::vector<std::array<double, 2>>& poly) {
    bool inside = false;
    const std::size_t n = poly.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const double xi = poly[i][0], yi = poly[i][1];
        const double xj = poly[j][0], yj = poly[j][1];
        if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
    }
    return inside;
}

}  // namespace

ClothTemplate default_template(ShapeClass shape, double mass_grams, double stiffness_scale, double size_scale) {
    if (!(mass_grams > 0.0)) throw UsageError("default_template: mass must be positive");
    ClothTemplate t;
    t.shape_class = shape;
    t.outline = silhouette(shape);
    for (auto& v : t.outline) {
        v[0] *= size_scale;
        v[1] *= size_scale;
    }
    double min_x = t.outline[0][0], max_x = min_x, min_y = t.outline[0][1], max_y = min_y;
    for (const auto& v : t.outline) {
        min_x = std::min(min_x, v[0]);
        max_x = std::max(max_x, v[0]);
        min_y = std::min(min_y, v[1]);
        max_y = std::max(max_y, v[1]);
    }
    t.grid_nx = std::max(4, static_cast<int>(std::lround((max_x - min_x) / kGridSpacing)) + 1);
    t.grid_ny = std::max(4, static_cast<int>(std::lround((max_y - min_y) / kGridSpacing)) + 1);
    t.mass_grams = mass_grams;
    t.stiffness = 120.0 * stiffness_scale;
    t.damping = 0.55;
    return t;
}

ClothMesh build_mesh(const ClothTemplate& tmpl) {
    if (tmpl.outline.size() < 3) throw UsageError("cloth template needs a polygon outline");
    if (tmpl.grid_nx < 2 || tmpl.grid_ny < 2) throw UsageError("cloth template grid must be at least 2x2");
    if (!(tmpl.mass_grams > 0.0)) throw UsageError("cloth template mass must be positive");
    if (!(tmpl.damping > 0.0 && tmpl.damping < 1.0))
        throw UsageError("cloth template damping must be in (0,1)");

    double min_x = tmpl.outline[0][0], max_x = min_x, min_y = tmpl.outline[0][1], max_y = min_y;
    for (const auto& v : tmpl.outline) {
        min_x = std::min(min_x, v[0]);
        max_x = std::max(max_x, v[0]);
        min_y = std::min(min_y, v[1]);
        max_y = std::max(max_y, v[1]);
    }
    const double sx = (max_x - min_x) / (tmpl.grid_nx - 1);
    const double sy = (max_y - min_y) / (tmpl.grid_ny - 1);

    ClothMesh mesh;
    mesh.shape_class = tmpl.shape_class;
    std::vector<int> index(static_cast<std::size_t>(tmpl.grid_nx) * tmpl.grid_ny, -1);
    auto grid_at = [&](int ix, int iy) -> int& { return index[static_cast<std::size_t>(iy) * tmpl.grid_nx + ix]; };

    for (int iy = 0; iy < tmpl.grid_ny; ++iy)
        for (int ix = 0; ix < tmpl.grid_nx; ++ix) {
            const double x = min_x + ix * sx;
            const double y = min_y + iy * sy;
            if (point_in_polygon(x, y, tmpl.outline)) {
                grid_at(ix, iy) = static_cast<int>(mesh.rest_positions.size());
                mesh.rest_positions.push_back({x, y, 0.0});
            }
        }
    if (mesh.rest_positions.size() < 4)
        throw UsageError("cloth template grid too coarse: only " + std::to_string(mesh.rest_positions.size()) +
                         " particles fall inside the outline");

    mesh.particle_mass = tmpl.mass_grams / 1000.0 / static_cast<double>(mesh.rest_positions.size());
    // Air drag anchored to a 1 g reference particle losing (1 - damping) of
    // its velocity per 30 Hz frame; heavier particles retain more speed.
    mesh.drag_coeff = kReferenceParticleMass * (-std::log(tmpl.damping)) * 30.0;

    auto add_spring = [&](int a, int b, double ks) {
        if (a < 0 || b < 0) return;
        const Vec3 d = mesh.rest_positions[static_cast<std::size_t>(b)] -
                       mesh.rest_positions[static_cast<std::size_t>(a)];
        mesh.springs.push_back({a, b, std::sqrt(dot(d, d)), ks});
    };

    for (int iy = 0; iy < tmpl.grid_ny; ++iy)
        for (int ix = 0; ix < tmpl.grid_nx; ++ix) {
            const int p = grid_at(ix, iy);
            if (p < 0) continue;
            // structural
            if (ix + 1 < tmpl.grid_nx) add_spring(p, grid_at(ix + 1, iy), tmpl.stiffness);
            if (iy + 1 < tmpl.grid_ny) add_spring(p, grid_at(ix, iy + 1), tmpl.stiffness);
            // shear
            if (ix + 1 < tmpl.grid_nx && iy + 1 < tmpl.grid_ny) add_spring(p, grid_at(ix + 1, iy + 1), 0.5 * tmpl.stiffness);
            if (ix + 1 < tmpl.grid_nx && iy > 0) add_spring(p, grid_at(ix + 1, iy - 1), 0.5 * tmpl.stiffness);
            // bend
            if (ix + 2 < tmpl.grid_nx) add_spring(p, grid_at(ix + 2, iy), 0.25 * tmpl.stiffness);
            if (iy + 2 < tmpl.grid_ny) add_spring(p, grid_at(ix, iy + 2), 0.25 * tmpl.stiffness);
        }

    for (int iy = 0; iy + 1 < tmpl.grid_ny; ++iy)
        for (int ix = 0; ix + 1 < tmpl.grid_nx; ++ix) {
            const int a = grid_at(ix, iy), b = grid_at(ix + 1, iy);
            const int c = grid_at(ix, iy + 1), d = grid_at(ix + 1, iy + 1);
            if (a >= 0 && b >= 0 && c >= 0 && d >= 0) {
                mesh.triangles.push_back({a, b, c});
                mesh.triangles.push_back({b, d, c});
            }
        }
    return mesh;
}

ClothSim::ClothSim(const ClothTemplate& tmpl, const SimParams& params)
    : ClothSim(build_mesh(tmpl), params) {}

ClothSim::ClothSim(ClothMesh mesh, const SimParams& params) : mesh_(std::move(mesh)), params_(params) {
    if (params_.substeps <= 0 || params_.frame_hz <= 0) throw UsageError("sim params: bad frame rate");
    state_.positions = mesh_.rest_positions;
    state_.velocities.assign(mesh_.rest_positions.size(), {});
    state_.dt = params_.dt();
    forces_.resize(mesh_.rest_positions.size());
}

void ClothSim::pin(int particle, Vec3 target) {
    if (particle < 0 || particle >= static_cast<int>(state_.positions.size()))
        throw UsageError("pin: particle out of range");
    state_.pinned = particle;
    pin_target_ = target;
}

void ClothSim::move_pin(Vec3 target) {
    if (state_.pinned < 0) throw UsageError("move_pin without a pinned particle");
    pin_target_ = target;
}

void ClothSim::release() { state_.pinned = -1; }

void ClothSim::substep() {
    const double dt = params_.dt();
    const double m = mesh_.particle_mass;
    const std::size_t n = state_.positions.size();

    for (auto& f : forces_) f = {0.0, 0.0, -params_.gravity * m};

    for (const Spring& s : mesh_.springs) {
        const Vec3 d = state_.positions[static_cast<std::size_t>(s.b)] -
                       state_.positions[static_cast<std::size_t>(s.a)];
        const double len = std::sqrt(dot(d, d));
        if (len <= 1e-12) continue;
        const Vec3 dir = (1.0 / len) * d;
        const Vec3 vrel = state_.velocities[static_cast<std::size_t>(s.b)] -
                          state_.velocities[static_cast<std::size_t>(s.a)];
        const double mag = s.ks * (len - s.rest) + params_.spring_damping * dot(vrel, dir);
        const Vec3 f = mag * dir;
        forces_[static_cast<std::size_t>(s.a)] = forces_[static_cast<std::size_t>(s.a)] + f;
        forces_[static_cast<std::size_t>(s.b)] = forces_[static_cast<std::size_t>(s.b)] - f;
    }

    const double drag_factor = mesh_.drag_coeff > 0.0 ? std::exp(-mesh_.drag_coeff * dt / m) : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        Vec3& v = state_.velocities[i];
        Vec3& p = state_.positions[i];
        v = v + (dt / m) * forces_[i];
        v = drag_factor * v;
        // Restitution-0 ground contact: never step through the plane, then
        // bleed tangential speed while touching it.
        if (p.z + dt * v.z < 0.0) v.z = -p.z / dt;
        if (p.z <= 1e-9) {
            v.x *= 1.0 - params_.ground_friction;
            v.y *= 1.0 - params_.ground_friction;
        }
        p = p + dt * v;
        if (p.z < 0.0) p.z = 0.0;
    }

    if (state_.pinned >= 0) {
        state_.positions[static_cast<std::size_t>(state_.pinned)] = pin_target_;
        state_.velocities[static_cast<std::size_t>(state_.pinned)] = {};
    }

    state_.time += dt;

    const double limit = params_.explosion_limit_m;
    for (const Vec3& p : state_.positions)
        if (std::abs(p.x) > limit || std::abs(p.y) > limit || std::abs(p.z) > limit) {
            std::ostringstream os;
            os << "cloth simulation exploded (position beyond " << limit << " m); dt=" << dt
               << " s, stiffness=" << (mesh_.springs.empty() ? 0.0 : mesh_.springs.front().ks) << " N/m";
            throw SimulationError(os.str());
        }
}

void ClothSim::step_frame() {
    for (int i = 0; i < params_.substeps; ++i) substep();
}

double ClothSim::energy() const {
    const double m = mesh_.particle_mass;
    double e = 0.0;
    for (std::size_t i = 0; i < state_.positions.size(); ++i) {
        e += 0.5 * m * dot(state_.velocities[i], state_.velocities[i]);
        e += m * params_.gravity * state_.positions[i].z;
    }
    for (const Spring& s : mesh_.springs) {
        const Vec3 d = state_.positions[static_cast<std::size_t>(s.b)] -
                       state_.positions[static_cast<std::size_t>(s.a)];
        const double stretch = std::sqrt(dot(d, d)) - s.rest;
        e += 0.5 * s.ks * stretch * stretch;
    }
    return e;
}

int run_drop(const ClothTemplate& tmpl, std::uint64_t seed, int frame_count, const SimParams& params,
             const std::function<void(int, const ClothSim&)>& per_frame) {
    if (frame_count <= 0) throw UsageError("run_drop: frame_count must be positive");
    ClothSim sim(tmpl, params);
    std::mt19937_64 rng(derive_seed(seed, 0xd201));

    const auto particles = static_cast<int>(sim.state().positions.size());
    const int grasp = static_cast<int>(rng() % static_cast<std::uint64_t>(particles));
    std::uniform_real_distribution<double> height_dist(0.45, 0.55);
    std::uniform_real_distribution<double> offset_dist(-0.08, 0.08);
    const Vec3 start = sim.state().positions[static_cast<std::size_t>(grasp)];
    const Vec3 target{start.x + offset_dist(rng), start.y + offset_dist(rng), height_dist(rng)};

    const double release_time = params.lift_seconds + params.hold_seconds;
    const int release_frame = static_cast<int>(release_time * params.frame_hz) + 1;

    sim.pin(grasp, start);
    for (int frame = 0; frame < frame_count; ++frame) {
        for (int s = 0; s < params.substeps; ++s) {
            const double t = sim.state().time;
            if (t < params.lift_seconds) {
                const double u = t / params.lift_seconds;
                const double w = u * u * (3.0 - 2.0 * u);  // smoothstep
                sim.move_pin(start + w * (target - start));
            } else if (t < release_time) {
                sim.move_pin(target);
            } else if (sim.state().pinned >= 0) {
                sim.release();
            }
            sim.substep();
        }
        per_frame(frame, sim);
    }
    return release_frame;
}

DropResult simulate_drop(const ClothTemplate& tmpl, std::uint64_t seed, int frame_count,
                         const SimParams& params) {
    DropResult result;
    result.mesh = build_mesh(tmpl);
    result.states.reserve(static_cast<std::size_t>(frame_count) * params.substeps);

    // Mirrors run_drop but records every substep state.
    ClothSim sim(tmpl, params);
    std::mt19937_64 rng(derive_seed(seed, 0xd201));
    const auto particles = static_cast<int>(sim.state().positions.size());
    const int grasp = static_cast<int>(rng() % static_cast<std::uint64_t>(particles));
    std::uniform_real_distribution<double> height_dist(0.45, 0.55);
    std::uniform_real_distribution<double> offset_dist(-0.08, 0.08);
    const Vec3 start = sim.state().positions[static_cast<std::size_t>(grasp)];
    const Vec3 target{start.x + offset_dist(rng), start.y + offset_dist(rng), height_dist(rng)};
    const double release_time = params.lift_seconds + params.hold_seconds;
    result.release_frame = static_cast<int>(release_time * params.frame_hz) + 1;

    sim.pin(grasp, start);
    for (int frame = 0; frame < frame_count; ++frame) {
        for (int s = 0; s < params.substeps; ++s) {
            const double t = sim.state().time;
            if (t < params.lift_seconds) {
                const double u = t / params.lift_seconds;
                const double w = u * u * (3.0 - 2.0 * u);
                sim.move_pin(start + w * (target - start));
            } else if (t < release_time) {
                sim.move_pin(target);
            } else if (sim.state().pinned >= 0) {
                sim.release();
            }
            sim.substep();
            result.states.push_back(sim.state());
        }
    }
    return result;
}

namespace {

struct RasterHit {
    double z = -1.0;  // surface height; below ground means "background"
    bool hit = false;
};

void check_camera(const Camera& cam) {
    if (cam.height_m <= 0.0 || cam.view_w_m <= 0.0 || cam.view_h_m <= 0.0 || cam.image_w <= 0 ||
        cam.image_h <= 0)
        throw UsageError("degenerate camera configuration");
}

// Orthographic top-down rasterisation: per pixel keep the surface nearest to
// the camera (largest z).
std::vector<RasterHit> rasterize(const std::vector<Vec3>& pos,
                                 const std::vector<std::array<int, 3>>& tris, const Camera& cam) {
    check_camera(cam);
    std::vector<RasterHit> buf(static_cast<std::size_t>(cam.image_w) * cam.image_h);
    const double px_per_m_x = cam.image_w / cam.view_w_m;
    const double px_per_m_y = cam.image_h / cam.view_h_m;

    auto to_px_x = [&](double x) { return (x + cam.view_w_m / 2) * px_per_m_x - 0.5; };
    auto to_px_y = [&](double y) { return (cam.view_h_m / 2 - y) * px_per_m_y - 0.5; };

    for (const auto& tri : tris) {
        const Vec3& a = pos[static_cast<std::size_t>(tri[0])];
        const Vec3& b = pos[static_cast<std::size_t>(tri[1])];
        const Vec3& c = pos[static_cast<std::size_t>(tri[2])];
        const double ax = to_px_x(a.x), ay = to_px_y(a.y);
        const double bx = to_px_x(b.x), by = to_px_y(b.y);
        const double cx = to_px_x(c.x), cy = to_px_y(c.y);
        const double area = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay);
        if (std::abs(area) < 1e-12) continue;  // edge-on triangle projects to nothing

        const int x0 = std::max(0, static_cast<int>(std::floor(std::min({ax, bx, cx}))));
        const int x1 = std::min(cam.image_w - 1, static_cast<int>(std::ceil(std::max({ax, bx, cx}))));
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min({ay, by, cy}))));
        const int y1 = std::min(cam.image_h - 1, static_cast<int>(std::ceil(std::max({ay, by, cy}))));
        for (int py = y0; py <= y1; ++py)
            for (int px = x0; px <= x1; ++px) {
                const double wa = ((bx - px) * (cy - py) - (cx - px) * (by - py)) / area;
                const double wb = ((cx - px) * (ay - py) - (ax - px) * (cy - py)) / area;
                const double wc = 1.0 - wa - wb;
                if (wa < -1e-9 || wb < -1e-9 || wc < -1e-9) continue;
                const double z = wa * a.z + wb * b.z + wc * c.z;
                RasterHit& hit = buf[static_cast<std::size_t>(py) * cam.image_w + px];
                if (!hit.hit || z > hit.z) {
                    hit.hit = true;
                    hit.z = z;
                }
            }
    }
    return buf;
}

void hsv_to_rgb(double h, double s, double v, std::uint8_t& r, std::uint8_t& g, std::uint8_t& b) {
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double rf = 0, gf = 0, bf = 0;
    if (hp < 1) rf = c, gf = x;
    else if (hp < 2) rf = x, gf = c;
    else if (hp < 3) gf = c, bf = x;
    else if (hp < 4) gf = x, bf = c;
    else if (hp < 5) rf = x, bf = c;
    else rf = c, bf = x;
    const double m = v - c;
    r = static_cast<std::uint8_t>(std::lround(std::clamp(rf + m, 0.0, 1.0) * 255.0));
    g = static_cast<std::uint8_t>(std::lround(std::clamp(gf + m, 0.0, 1.0) * 255.0));
    b = static_cast<std::uint8_t>(std::lround(std::clamp(bf + m, 0.0, 1.0) * 255.0));
}

std::uint64_t pixel_hash(std::uint64_t seed, std::uint64_t x, std::uint64_t y) {
    return derive_seed(seed, (x << 32) ^ y);
}

}  // namespace

ImageU16 render_depth(const std::vector<Vec3>& positions, const std::vector<std::array<int, 3>>& triangles,
                      const Camera& camera) {
    const auto buf = rasterize(positions, triangles, camera);
    ImageU16 img;
    img.width = camera.image_w;
    img.height = camera.image_h;
    img.pixels.resize(buf.size());
    const double ground_mm = camera.height_m * 1000.0;
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const double depth_mm =
            buf[i].hit ? (camera.height_m - buf[i].z - camera.surface_offset_m) * 1000.0 : ground_mm;
        img.pixels[i] = static_cast<std::uint16_t>(std::clamp(std::lround(depth_mm), 0l, 65535l));
    }
    return img;
}

ImageU8 render_mask(const std::vector<Vec3>& positions, const std::vector<std::array<int, 3>>& triangles,
                    const Camera& camera) {
    const auto buf = rasterize(positions, triangles, camera);
    ImageU8 img;
    img.width = camera.image_w;
    img.height = camera.image_h;
    img.channels = 1;
    img.pixels.resize(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i].hit ? 255 : 0;
    return img;
}

ImageU8 render_rgb(const std::vector<Vec3>& positions, const std::vector<std::array<int, 3>>& triangles,
                   const Camera& camera, const GarmentColor& color, std::uint64_t noise_seed) {
    const auto buf = rasterize(positions, triangles, camera);
    ImageU8 img;
    img.width = camera.image_w;
    img.height = camera.image_h;
    img.channels = 3;
    img.pixels.resize(buf.size() * 3);
    for (int y = 0; y < camera.image_h; ++y)
        for (int x = 0; x < camera.image_w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * camera.image_w + x;
            std::uint8_t r, g, b;
            if (buf[i].hit) {
                // Height shading keeps the garment's V well under the backdrop's.
                const double shade = std::clamp(0.75 + 0.5 * (buf[i].z / 0.6), 0.6, 1.25);
                hsv_to_rgb(color.hue, color.sat, std::clamp(color.val * shade, 0.05, 0.66), r, g, b);
            } else {
                const double jitter =
                    static_cast<double>(pixel_hash(noise_seed, static_cast<std::uint64_t>(x),
                                                   static_cast<std::uint64_t>(y)) % 25) / 255.0;
                hsv_to_rgb(122.0, 0.68, 0.72 + jitter, r, g, b);
            }
            img.pixels[i * 3 + 0] = r;
            img.pixels[i * 3 + 1] = g;
            img.pixels[i * 3 + 2] = b;
        }
    return img;
}

DatasetSpec DatasetSpec::toy() {
    DatasetSpec s;
    s.garments_per_class = 2;
    s.sequences_per_garment = 2;
    s.frames_per_sequence = 40;
    s.image_size = 128;
    return s;
}

DatasetSpec DatasetSpec::paper_scale() {
    DatasetSpec s;
    s.garments_per_class = 4;
    s.sequences_per_garment = 10;
    s.frames_per_sequence = 200;
    s.image_size = 256;
    return s;
}

std::int64_t DatasetSpec::total_depth_frames() const {
    return static_cast<std::int64_t>(kShapeClassCount) * garments_per_class * sequences_per_garment *
           frames_per_sequence;
}

namespace {

double mass_for_bin(WeightClass bin, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> light(100.0, 170.0);
    std::uniform_real_distribution<double> medium(190.0, 290.0);
    std::uniform_real_distribution<double> heavy(320.0, 450.0);
    switch (bin) {
        case WeightClass::light: return light(rng);
        case WeightClass::medium: return medium(rng);
        case WeightClass::heavy: return heavy(rng);
    }
    throw UsageError("bad weight bin");
}

GarmentColor garment_color(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double u = u01(rng);
    GarmentColor c;
    // Skip the backdrop's green band entirely.
    c.hue = u < 0.4 ? 60.0 * (u / 0.4) : 180.0 + 180.0 * ((u - 0.4) / 0.6);
    c.sat = 0.4 + 0.4 * u01(rng);
    c.val = 0.35 + 0.25 * u01(rng);
    return c;
}

int landing_frame(const ClothTemplate& tmpl, std::uint64_t seed, int frame_count, const SimParams& params) {
    // Settled crumples keep standing folds, so "landed" is a mean-height
    // criterion rather than a max-height one.
    int landed = frame_count;
    run_drop(tmpl, seed, frame_count, params, [&](int frame, const ClothSim& sim) {
        if (landed < frame_count) return;
        if (sim.state().pinned >= 0) return;
        double sum_z = 0.0;
        for (const Vec3& p : sim.state().positions) sum_z += p.z;
        if (sum_z / static_cast<double>(sim.state().positions.size()) < 0.035) landed = frame;
    });
    return landed;
}

}  // namespace

void verify_mass_ordering(const SimParams& params) {
    // Same silhouette and stiffness, three masses; heavier must land sooner.
    const int frames = 120;
    const std::uint64_t seed = 41;
    const int heavy = landing_frame(default_template(ShapeClass::towel, 400.0), seed, frames, params);
    const int medium = landing_frame(default_template(ShapeClass::towel, 250.0), seed, frames, params);
    const int light = landing_frame(default_template(ShapeClass::towel, 120.0), seed, frames, params);
    if (!(heavy < medium && medium < light))
        throw InvariantError("mass/drag ordering violated: landing frames heavy=" + std::to_string(heavy) +
                             " medium=" + std::to_string(medium) + " light=" + std::to_string(light));
}

GarmentManifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir,
                                 std::uint64_t seed) {
    if (spec.garments_per_class < 1 || spec.sequences_per_garment < 1 || spec.frames_per_sequence < 4)
        throw UsageError("dataset spec: need >= 1 garment, >= 1 sequence, >= 4 frames");
    verify_mass_ordering(spec.sim);

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    Camera camera = spec.camera;
    camera.image_w = spec.image_size;
    camera.image_h = spec.image_size;
    camera.surface_offset_m = 0.005;

    GarmentManifest manifest;
    manifest.root = out_dir;

    struct SeqJob {
        std::size_t garment_idx;
        int seq_idx;
        ClothTemplate tmpl;
        GarmentColor color;
        std::uint64_t seq_seed;
    };
    std::vector<SeqJob> jobs;

    for (int cls = 0; cls < kShapeClassCount; ++cls) {
        for (int j = 0; j < spec.garments_per_class; ++j) {
            const auto shape = static_cast<ShapeClass>(cls);
            std::mt19937_64 grng(derive_seed(seed, 0x6a00 + static_cast<std::uint64_t>(cls * 100 + j)));
            const auto bin = static_cast<WeightClass>((cls * spec.garments_per_class + j) % kWeightClassCount);
            const double mass = mass_for_bin(bin, grng);
            std::uniform_real_distribution<double> stiff_jitter(0.9, 1.1);
            std::uniform_real_distribution<double> size_jitter(0.92, 1.08);
            const double boost = spec.heavy_stiffness_boost && bin == WeightClass::heavy ? 1.5 : 1.0;
            ClothTemplate tmpl =
                default_template(shape, mass, boost * stiff_jitter(grng), size_jitter(grng));
            const GarmentColor color = garment_color(grng);

            char id[32];
            std::snprintf(id, sizeof(id), "%s_%02d", to_string(shape), j);
            GarmentInfo info;
            info.id = id;
            info.shape_class = shape;
            info.mass_grams = mass;
            for (int s = 0; s < spec.sequences_per_garment; ++s) {
                char seq_name[32];
                std::snprintf(seq_name, sizeof(seq_name), "seq_%02d", s);
                SequenceRef ref;
                ref.frame_count = spec.frames_per_sequence;
                ref.fps = spec.fps;
                ref.depth_dir = std::string(id) + "/" + seq_name + "/depth";
                ref.rgb_dir = std::string(id) + "/" + seq_name + "/rgb";
                if (spec.emit_masks) ref.mask_dir = std::string(id) + "/" + seq_name + "/mask";
                info.sequences.push_back(ref);
                jobs.push_back({manifest.garments.size(), s, tmpl, color,
                                derive_seed(seed, 0x5e00 + static_cast<std::uint64_t>(cls * 1000 + j * 100 + s))});
            }
            manifest.garments.push_back(std::move(info));
        }
    }

    std::exception_ptr failure;
    std::mutex failure_mu;
    parallel_for(static_cast<std::int64_t>(jobs.size()), 1, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t ji = b; ji < e; ++ji) {
            const SeqJob& job = jobs[static_cast<std::size_t>(ji)];
            try {
                const SequenceRef& ref =
                    manifest.garments[job.garment_idx].sequences[static_cast<std::size_t>(job.seq_idx)];
                const auto depth_dir = out_dir / ref.depth_dir;
                const auto rgb_dir = out_dir / ref.rgb_dir;
                std::filesystem::create_directories(depth_dir);
                if (spec.emit_rgb) std::filesystem::create_directories(rgb_dir);
                if (spec.emit_masks) std::filesystem::create_directories(out_dir / ref.mask_dir);

                run_drop(job.tmpl, job.seq_seed, spec.frames_per_sequence, spec.sim,
                         [&](int frame, const ClothSim& sim) {
                             char name[32];
                             std::snprintf(name, sizeof(name), "frame_%05d.png", frame);
                             const auto& pos = sim.state().positions;
                             const auto& tris = sim.mesh().triangles;
                             write_png16(depth_dir / name, render_depth(pos, tris, camera));
                             if (spec.emit_rgb)
                                 write_png8(rgb_dir / name,
                                            render_rgb(pos, tris, camera, job.color,
                                                       derive_seed(job.seq_seed, static_cast<std::uint64_t>(frame))));
                             if (spec.emit_masks)
                                 write_png8(out_dir / ref.mask_dir / name, render_mask(pos, tris, camera));
                         });
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mu);
                if (!failure) failure = std::current_exception();
            }
        }
    });
    if (failure) std::rethrow_exception(failure);

    save_manifest(out_dir / "manifest.json", manifest);
    return manifest;
}

}  // namespace dp
