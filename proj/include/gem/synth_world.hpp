#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gem/lidar_geom.hpp"

// Procedural LiDAR world: a ground plane plus axis-aligned boxes, some of
// them moving at constant velocity, observed from an ego vehicle that
// follows a straight, constant-curvature, or stationary profile.
namespace gem::synth {

enum class EgoProfile { kStraight, kArc, kStop };

std::string to_string(EgoProfile p);
EgoProfile parse_ego_profile(const std::string& s);

/// SE(2) motion relative to the previous frame, in the previous ego frame.
struct EgoStatus {
  double dx = 0.0;
  double dy = 0.0;
  double dyaw = 0.0;
};

struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;
};

Pose2 compose(const Pose2& pose, const EgoStatus& delta);
EgoStatus relative_motion(const Pose2& from, const Pose2& to);

struct Box {
  double cx = 0, cy = 0, cz = 0;  // world-frame center at t = 0
  double hx = 1, hy = 1, hz = 1;  // half extents
  double vx = 0, vy = 0;          // m/s, zero for static boxes
  bool dynamic = false;

  Box at_time(double t) const;
};

struct SceneGeometry {
  double ground_z = -1.8;  // world z of the ground plane (sensor sits at z = 0)
  bool has_ground = true;
  std::vector<Box> boxes;

  SceneGeometry at_time(double t) const;
};

struct SceneSpec {
  int64_t n_static_boxes = 8;
  int64_t n_dynamic_boxes = 3;
  double size_min = 1.5;  // footprint side length range, meters
  double size_max = 4.5;
  double height_min = 1.5;
  double height_max = 2.6;
  double speed_min = 1.0;  // dynamic box speed range, m/s
  double speed_max = 4.0;
  double spawn_min = 6.0;  // spawn radius range around the ego path, meters
  double spawn_max = 30.0;
  double corridor_half_width = 2.5;
  EgoProfile ego = EgoProfile::kStraight;
  double ego_speed = 3.0;     // m/s
  double ego_yaw_rate = 0.2;  // rad/s, signed, arcs only
  int64_t frames = 12;
  double frame_dt = 0.5;
  uint64_t seed = 0;
  double sensor_height = 1.8;
  geom::SensorConfig sensor;
  int64_t bev_size = 64;
  double bev_extent = 64.0;

  void validate() const;
};

/// Ego-centered occupancy raster; row i spans x, column j spans y, both
/// from -extent/2 upward. Class ids: 0 free, 1 static, 2 dynamic.
struct BEVLayout {
  int64_t size = 0;
  double extent = 0.0;
  std::vector<uint8_t> grid;

  uint8_t at(int64_t i, int64_t j) const { return grid[static_cast<size_t>(i * size + j)]; }
};

struct SceneFrame {
  geom::PointCloud cloud;
  geom::RangeImage range;
  EgoStatus ego;
  Pose2 pose;
  BEVLayout layout;
  std::vector<uint8_t> dynamic_mask;   // per point of `cloud`
  std::vector<uint8_t> dynamic_cells;  // per range-image cell
};

struct Sweep {
  geom::RangeImage range;
  std::vector<uint8_t> dynamic_cells;
};

struct RenderedCloud {
  geom::PointCloud cloud;
  std::vector<uint8_t> dynamic;
};

// Nearest hit along a world-frame ray, or a negative value for none.
// Sets `dynamic` when the nearest primitive is a moving box.
double cast_ray(const SceneGeometry& scene, double ox, double oy, double oz, double dx, double dy, double dz,
                bool& dynamic);

/// Ray-casts every cell-center ray of the sensor at `pose`.
Sweep render_range(const SceneGeometry& scene, const Pose2& pose, const geom::SensorConfig& cfg);
RenderedCloud render_sweep(const SceneGeometry& scene, const Pose2& pose, const geom::SensorConfig& cfg);

BEVLayout rasterize_bev(const SceneGeometry& scene, const Pose2& pose, double extent, int64_t size);

std::vector<EgoStatus> ego_deltas(const SceneSpec& spec);
SceneGeometry sample_scene(const SceneSpec& spec);

/// Deterministic given spec.seed.
std::vector<SceneFrame> generate_sequence(const SceneSpec& spec);

// --- dataset directory ------------------------------------------------

void write_sequence(const std::filesystem::path& dir, const SceneSpec& spec, const std::vector<SceneFrame>& frames);

struct LoadedSequence {
  std::vector<geom::PointCloud> clouds;
  std::vector<EgoStatus> ego;
  std::vector<BEVLayout> layouts;
  std::vector<std::vector<uint8_t>> dynamic_masks;
};

LoadedSequence read_sequence(const std::filesystem::path& dir);

}  // namespace gem::synth
