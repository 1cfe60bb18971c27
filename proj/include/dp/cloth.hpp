#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "dp/dataset.hpp"
#include "dp/image.hpp"

namespace dp {

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

/// Garment silhouette and material for the mass-spring model.
struct ClothTemplate {
    ShapeClass shape_class = ShapeClass::towel;
    std::vector<std::array<double, 2>> outline;  // meters, flat layout
    int grid_nx = 0, grid_ny = 0;                // particle grid across the bounding box
    double mass_grams = 200.0;
    double stiffness = 120.0;  // structural spring constant, N/m
    double damping = 0.7;      // in (0,1): per-frame velocity retention of a 1 g reference particle
};

/// Documented silhouette vertex lists for the five shape classes.
std::vector<std::array<double, 2>> silhouette(ShapeClass shape);

ClothTemplate default_template(ShapeClass shape, double mass_grams, double stiffness_scale = 1.0,
                               double size_scale = 1.0);

struct SimParams {
    double frame_hz = 30.0;
    int substeps = 32;          // dt = 1 / (frame_hz * substeps)
    double gravity = 9.81;      // m/s^2
    double spring_damping = 0.01;    // N*s/m along each spring
    double ground_friction = 0.25;   // tangential velocity loss per contact substep
    double explosion_limit_m = 10.0;
    double lift_seconds = 0.4;
    double hold_seconds = 0.1;

    double dt() const { return 1.0 / (frame_hz * substeps); }
};

struct Spring {
    int a = 0, b = 0;
    double rest = 0.0;
    double ks = 0.0;
};

struct ClothMesh {
    ShapeClass shape_class = ShapeClass::towel;
    std::vector<Vec3> rest_positions;  // flat on the ground plane
    std::vector<Spring> springs;       // structural, shear and bend
    std::vector<std::array<int, 3>> triangles;
    double particle_mass = 0.001;  // kg
    double drag_coeff = 0.0;       // kg/s, per-particle linear air drag
};

/// Particle grid over the silhouette with structural, shear and bend springs.
ClothMesh build_mesh(const ClothTemplate& tmpl);

struct SimState {
    std::vector<Vec3> positions;
    std::vector<Vec3> velocities;
    int pinned = -1;  // particle id or -1
    double time = 0.0;
    double dt = 0.0;
};

/// Semi-implicit Euler cloth integrator with air drag, spring damping and a
/// restitution-0 ground plane at z = 0.
class ClothSim {
  public:
    ClothSim(const ClothTemplate& tmpl, const SimParams& params);
    ClothSim(ClothMesh mesh, const SimParams& params);

    const ClothMesh& mesh() const { return mesh_; }
    const SimState& state() const { return state_; }
    SimState& state() { return state_; }

    void pin(int particle, Vec3 target);
    void move_pin(Vec3 target);
    void release();

    /// One dt step; throws SimulationError when positions blow past the
    /// explosion limit.
    void substep();
    void step_frame();  // substeps() integrator steps

    /// Kinetic + gravitational + elastic energy of the current state.
    double energy() const;

  private:
    ClothMesh mesh_;
    SimParams params_;
    SimState state_;
    Vec3 pin_target_;
    std::vector<Vec3> forces_;
};

struct DropResult {
    ClothMesh mesh;
    std::vector<SimState> states;  // one per substep, frame_count * substeps total
    int release_frame = 0;
};

/// Grasp-lift-drop script: a seeded random particle is lifted to a random
/// point around 0.5 m along a smoothstep trajectory, held briefly, then
/// released to fall under gravity.
DropResult simulate_drop(const ClothTemplate& tmpl, std::uint64_t seed, int frame_count,
                         const SimParams& params = {});

/// Streaming variant: per_frame(frame_index, sim) runs at every frame
/// boundary without retaining substep states.
int run_drop(const ClothTemplate& tmpl, std::uint64_t seed, int frame_count, const SimParams& params,
             const std::function<void(int, const ClothSim&)>& per_frame);

/// Orthographic top-down camera over the ground plane, centered at origin.
struct Camera {
    double height_m = 2.0;
    double view_w_m = 1.1, view_h_m = 1.1;
    int image_w = 128, image_h = 128;
    double surface_offset_m = 0.0;  // rendered cloth thickness
};

/// Z-buffer over cloth triangles; background encodes the camera-to-ground
/// distance. Output is millimeters.
ImageU16 render_depth(const std::vector<Vec3>& positions, const std::vector<std::array<int, 3>>& triangles,
                      const Camera& camera);
ImageU8 render_mask(const std::vector<Vec3>& positions, const std::vector<std::array<int, 3>>& triangles,
                    const Camera& camera);

struct GarmentColor {
    double hue = 220.0;  // degrees, kept outside the backdrop's green band
    double sat = 0.6;
    double val = 0.5;
};

/// Green backdrop with per-pixel value jitter; garment shaded by height.
ImageU8 render_rgb(const std::vector<Vec3>& positions, const std::vector<std::array<int, 3>>& triangles,
                   const Camera& camera, const GarmentColor& color, std::uint64_t noise_seed);

struct DatasetSpec {
    int garments_per_class = 2;
    int sequences_per_garment = 2;
    int frames_per_sequence = 40;
    int image_size = 128;
    double fps = 30.0;
    bool heavy_stiffness_boost = true;  // sweaters-vs-cotton analogue
    bool emit_rgb = true;
    bool emit_masks = true;
    SimParams sim;
    Camera camera;

    static DatasetSpec toy();
    static DatasetSpec paper_scale();  // 5 x 4 x 10 x 200 layout

    std::int64_t total_depth_frames() const;
};

/// Writes manifest.json plus per-sequence PNG frames under out_dir. Fully
/// reproducible from the seed; masses cycle through the three weight bins.
GarmentManifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir,
                                 std::uint64_t seed);

/// Checks that heavier templates (same stiffness) land in fewer frames than
/// lighter ones under the default drag model; throws InvariantError if the
/// ordering breaks.
void verify_mass_ordering(const SimParams& params = {});

}  // namespace dp
