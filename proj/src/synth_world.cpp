#include "gem/synth_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gem/binary_io.hpp"
#include "gem/rng.hpp"

namespace gem::synth {

std::string to_string(EgoProfile p) {
  switch (p) {
    case EgoProfile::kStraight: return "straight";
    case EgoProfile::kArc: return "arc";
    case EgoProfile::kStop: return "stop";
  }
  return "straight";
}

EgoProfile parse_ego_profile(const std::string& s) {
  if (s == "straight") return EgoProfile::kStraight;
  if (s == "arc") return EgoProfile::kArc;
  if (s == "stop") return EgoProfile::kStop;
  throw Error("unknown ego profile '" + s + "' (expected straight, arc or stop)");
}

Pose2 compose(const Pose2& pose, const EgoStatus& d) {
  const double c = std::cos(pose.yaw), s = std::sin(pose.yaw);
  return {pose.x + c * d.dx - s * d.dy, pose.y + s * d.dx + c * d.dy, pose.yaw + d.dyaw};
}

EgoStatus relative_motion(const Pose2& from, const Pose2& to) {
  const double c = std::cos(from.yaw), s = std::sin(from.yaw);
  const double ex = to.x - from.x, ey = to.y - from.y;
  return {c * ex + s * ey, -s * ex + c * ey, to.yaw - from.yaw};
}

Box Box::at_time(double t) const {
  Box b = *this;
  b.cx += vx * t;
  b.cy += vy * t;
  return b;
}

SceneGeometry SceneGeometry::at_time(double t) const {
  SceneGeometry g = *this;
  for (Box& b : g.boxes) b = b.at_time(t);
  return g;
}

void SceneSpec::validate() const {
  auto fail = [](const std::string& m) { throw Error("scene spec: " + m); };
  if (frames < 2) fail("frames must be >= 2");
  if (n_static_boxes < 0 || n_dynamic_boxes < 0) fail("box counts must be non-negative");
  if (!(size_min > 0 && size_min <= size_max)) fail("invalid box size range");
  if (!(height_min > 0 && height_min <= height_max)) fail("invalid box height range");
  if (!(speed_min >= 0 && speed_min <= speed_max)) fail("invalid velocity range");
  if (!(spawn_min > 0 && spawn_min <= spawn_max)) fail("invalid spawn radius range");
  if (!(frame_dt > 0)) fail("frame_dt must be positive");
  if (!(sensor_height > 0)) fail("sensor_height must be positive");
  if (bev_size < 16) fail("bev_size must be >= 16");
  if (!(bev_extent > 0)) fail("bev_extent must be positive");
  sensor.validate();
}

namespace {

// Slab test from an origin outside the box. Returns entry distance or -1.
double ray_box(const Box& b, double ox, double oy, double oz, double dx, double dy, double dz) {
  const double lo[3] = {b.cx - b.hx, b.cy - b.hy, b.cz - b.hz};
  const double hi[3] = {b.cx + b.hx, b.cy + b.hy, b.cz + b.hz};
  const double o[3] = {ox, oy, oz};
  const double d[3] = {dx, dy, dz};
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo[a] || o[a] > hi[a]) return -1.0;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a];
    double tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t0 <= 0.0) return -1.0;  // miss, or origin inside the box
  return t0;
}

bool contains_xy(const Box& b, double x, double y) {
  return std::abs(x - b.cx) <= b.hx && std::abs(y - b.cy) <= b.hy;
}

double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  while (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

}  // namespace

double cast_ray(const SceneGeometry& scene, double ox, double oy, double oz, double dx, double dy, double dz,
                bool& dynamic) {
  double best = -1.0;
  dynamic = false;
  if (scene.has_ground && dz < -1e-12 && oz > scene.ground_z) {
    best = (scene.ground_z - oz) / dz;
  }
  for (const Box& b : scene.boxes) {
    const double t = ray_box(b, ox, oy, oz, dx, dy, dz);
    if (t > 0 && (best < 0 || t < best)) {
      best = t;
      dynamic = b.dynamic;
    }
  }
  return best;
}

Sweep render_range(const SceneGeometry& scene, const Pose2& pose, const geom::SensorConfig& cfg) {
  cfg.validate();
  const int64_t H = cfg.n_lasers, W = cfg.n_azimuth;
  Sweep out{geom::RangeImage(H, W, cfg.r_max), std::vector<uint8_t>(static_cast<size_t>(H * W), 0)};
  std::vector<double> best(static_cast<size_t>(H * W), -1.0);

  // Precomputed sensor-frame ray directions.
  std::vector<double> cos_el(static_cast<size_t>(H)), sin_el(static_cast<size_t>(H));
  for (int64_t r = 0; r < H; ++r) {
    const double e = cfg.elevation_of_row(static_cast<double>(r) + 0.5);
    cos_el[static_cast<size_t>(r)] = std::cos(e);
    sin_el[static_cast<size_t>(r)] = std::sin(e);
  }
  std::vector<double> wx(static_cast<size_t>(W)), wy(static_cast<size_t>(W));
  for (int64_t c = 0; c < W; ++c) {
    const double az = cfg.azimuth_of_col(static_cast<double>(c) + 0.5) + pose.yaw;
    wx[static_cast<size_t>(c)] = std::cos(az);
    wy[static_cast<size_t>(c)] = std::sin(az);
  }

  auto offer = [&](int64_t r, int64_t c, double t, bool dyn) {
    const size_t k = static_cast<size_t>(r * W + c);
    if (t > 0 && (best[k] < 0 || t < best[k])) {
      best[k] = t;
      out.dynamic_cells[k] = dyn ? 1 : 0;
    }
  };

  if (scene.has_ground && scene.ground_z < 0.0) {
    for (int64_t r = 0; r < H; ++r) {
      const double dz = sin_el[static_cast<size_t>(r)];
      if (dz >= -1e-12) continue;
      const double t = scene.ground_z / dz;
      for (int64_t c = 0; c < W; ++c) offer(r, c, t, false);
    }
  }

  // Each box only touches the columns spanned by its footprint.
  const double Wd = static_cast<double>(W);
  for (const Box& b : scene.boxes) {
    int64_t c_begin = 0, c_end = W - 1;
    if (!contains_xy(b, pose.x, pose.y)) {
      const double center = std::atan2(b.cy - pose.y, b.cx - pose.x);
      double lo = 0.0, hi = 0.0;
      for (int sx = -1; sx <= 1; sx += 2)
        for (int sy = -1; sy <= 1; sy += 2) {
          const double a = wrap_angle(std::atan2(b.cy + sy * b.hy - pose.y, b.cx + sx * b.hx - pose.x) - center);
          lo = std::min(lo, a);
          hi = std::max(hi, a);
        }
      // Sensor-frame azimuth interval -> column interval (columns run clockwise).
      const double az_hi = center + hi - pose.yaw, az_lo = center + lo - pose.yaw;
      c_begin = static_cast<int64_t>(std::floor(0.5 * (1.0 - az_hi / std::numbers::pi) * Wd)) - 1;
      c_end = static_cast<int64_t>(std::floor(0.5 * (1.0 - az_lo / std::numbers::pi) * Wd)) + 1;
    }
    for (int64_t cc = c_begin; cc <= c_end; ++cc) {
      const int64_t c = ((cc % W) + W) % W;
      for (int64_t r = 0; r < H; ++r) {
        const double ce = cos_el[static_cast<size_t>(r)];
        const double t = ray_box(b, pose.x, pose.y, 0.0, ce * wx[static_cast<size_t>(c)],
                                 ce * wy[static_cast<size_t>(c)], sin_el[static_cast<size_t>(r)]);
        offer(r, c, t, b.dynamic);
      }
    }
  }

  for (int64_t k = 0; k < H * W; ++k) {
    const double t = best[static_cast<size_t>(k)];
    if (t >= cfg.r_min && t <= cfg.r_max) {
      out.range.ranges[static_cast<size_t>(k)] = t;
      out.range.valid[static_cast<size_t>(k)] = 1;
    } else {
      out.dynamic_cells[static_cast<size_t>(k)] = 0;
    }
  }
  return out;
}

RenderedCloud render_sweep(const SceneGeometry& scene, const Pose2& pose, const geom::SensorConfig& cfg) {
  Sweep sweep = render_range(scene, pose, cfg);
  RenderedCloud out;
  out.cloud = geom::unproject(sweep.range, cfg);
  for (size_t k = 0; k < sweep.dynamic_cells.size(); ++k)
    if (sweep.range.valid[k]) out.dynamic.push_back(sweep.dynamic_cells[k]);
  return out;
}

BEVLayout rasterize_bev(const SceneGeometry& scene, const Pose2& pose, double extent, int64_t size) {
  if (size < 16) throw Error("rasterize_bev: grid size must be >= 16");
  if (!(extent > 0)) throw Error("rasterize_bev: extent must be positive");
  BEVLayout out{size, extent, std::vector<uint8_t>(static_cast<size_t>(size * size), 0)};
  const double cell = extent / static_cast<double>(size);
  const double c = std::cos(pose.yaw), s = std::sin(pose.yaw);
  auto paint = [&](bool dynamic_pass) {
    for (int64_t i = 0; i < size; ++i) {
      const double ex = -0.5 * extent + (static_cast<double>(i) + 0.5) * cell;
      for (int64_t j = 0; j < size; ++j) {
        const double ey = -0.5 * extent + (static_cast<double>(j) + 0.5) * cell;
        const double wxp = pose.x + c * ex - s * ey;
        const double wyp = pose.y + s * ex + c * ey;
        for (const Box& b : scene.boxes) {
          if (b.dynamic != dynamic_pass) continue;
          if (wxp >= b.cx - b.hx && wxp < b.cx + b.hx && wyp >= b.cy - b.hy && wyp < b.cy + b.hy) {
            out.grid[static_cast<size_t>(i * size + j)] = dynamic_pass ? 2 : 1;
            break;
          }
        }
      }
    }
  };
  paint(false);
  paint(true);
  return out;
}

std::vector<EgoStatus> ego_deltas(const SceneSpec& spec) {
  std::vector<EgoStatus> out(static_cast<size_t>(spec.frames));
  EgoStatus step;
  const double v = spec.ego_speed, dt = spec.frame_dt;
  switch (spec.ego) {
    case EgoProfile::kStraight: step = {v * dt, 0.0, 0.0}; break;
    case EgoProfile::kArc: {
      const double w = spec.ego_yaw_rate;
      if (std::abs(w) < 1e-12) {
        step = {v * dt, 0.0, 0.0};
      } else {
        step = {v * std::sin(w * dt) / w, v * (1.0 - std::cos(w * dt)) / w, w * dt};
      }
      break;
    }
    case EgoProfile::kStop: step = {0.0, 0.0, 0.0}; break;
  }
  for (size_t k = 1; k < out.size(); ++k) out[k] = step;
  return out;
}

SceneGeometry sample_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, Stream::kScene));
  SceneGeometry scene;
  scene.ground_z = -spec.sensor_height;

  std::vector<Pose2> path;
  Pose2 pose;
  for (const EgoStatus& d : ego_deltas(spec)) {
    pose = compose(pose, d);
    path.push_back(pose);
  }
  auto path_clearance = [&](double x, double y) {
    double best = std::numeric_limits<double>::infinity();
    for (const Pose2& p : path) best = std::min(best, std::hypot(x - p.x, y - p.y));
    return best;
  };
  const double t_end = spec.frame_dt * static_cast<double>(spec.frames - 1);

  auto place = [&](bool dynamic) {
    Box b;
    b.dynamic = dynamic;
    for (int attempt = 0; attempt < 200; ++attempt) {
      b.hx = 0.5 * rng.uniform(spec.size_min, spec.size_max);
      b.hy = 0.5 * rng.uniform(spec.size_min, spec.size_max);
      const double height = rng.uniform(spec.height_min, spec.height_max);
      b.hz = 0.5 * height;
      b.cz = scene.ground_z + b.hz;
      const double radius = rng.uniform(spec.spawn_min, spec.spawn_max);
      const double angle = rng.uniform(-std::numbers::pi, std::numbers::pi);
      b.cx = radius * std::cos(angle);
      b.cy = radius * std::sin(angle);
      b.vx = b.vy = 0.0;
      if (dynamic) {
        const double speed = rng.uniform(spec.speed_min, spec.speed_max);
        const double heading = rng.uniform(-std::numbers::pi, std::numbers::pi);
        b.vx = speed * std::cos(heading);
        b.vy = speed * std::sin(heading);
      }
      const double margin = spec.corridor_half_width + std::hypot(b.hx, b.hy);
      const Box end = b.at_time(t_end);
      if (path_clearance(b.cx, b.cy) > margin && path_clearance(end.cx, end.cy) > margin) return b;
    }
    return b;  // dense scenes keep the last candidate
  };
  for (int64_t i = 0; i < spec.n_static_boxes; ++i) scene.boxes.push_back(place(false));
  for (int64_t i = 0; i < spec.n_dynamic_boxes; ++i) scene.boxes.push_back(place(true));
  return scene;
}

std::vector<SceneFrame> generate_sequence(const SceneSpec& spec) {
  spec.validate();
  const SceneGeometry scene = sample_scene(spec);
  const std::vector<EgoStatus> deltas = ego_deltas(spec);
  std::vector<SceneFrame> frames(static_cast<size_t>(spec.frames));
  Pose2 pose;
  for (int64_t k = 0; k < spec.frames; ++k) {
    SceneFrame& f = frames[static_cast<size_t>(k)];
    f.ego = deltas[static_cast<size_t>(k)];
    pose = compose(pose, f.ego);
    f.pose = pose;
    const SceneGeometry now = scene.at_time(spec.frame_dt * static_cast<double>(k));
    Sweep sweep = render_range(now, pose, spec.sensor);
    f.cloud = geom::unproject(sweep.range, spec.sensor);
    for (size_t c = 0; c < sweep.dynamic_cells.size(); ++c)
      if (sweep.range.valid[c]) f.dynamic_mask.push_back(sweep.dynamic_cells[c]);
    f.range = std::move(sweep.range);
    f.dynamic_cells = std::move(sweep.dynamic_cells);
    f.layout = rasterize_bev(now, pose, spec.bev_extent, spec.bev_size);
  }
  return frames;
}

namespace {

std::string frame_name(const char* stem, size_t k) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu.bin", stem, k);
  return buf;
}

}  // namespace

void write_sequence(const std::filesystem::path& dir, const SceneSpec& spec, const std::vector<SceneFrame>& frames) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json m;
  nlohmann::ordered_json s;
  s["n_static_boxes"] = spec.n_static_boxes;
  s["n_dynamic_boxes"] = spec.n_dynamic_boxes;
  s["size_min"] = spec.size_min;
  s["size_max"] = spec.size_max;
  s["height_min"] = spec.height_min;
  s["height_max"] = spec.height_max;
  s["speed_min"] = spec.speed_min;
  s["speed_max"] = spec.speed_max;
  s["spawn_min"] = spec.spawn_min;
  s["spawn_max"] = spec.spawn_max;
  s["corridor_half_width"] = spec.corridor_half_width;
  s["ego"] = to_string(spec.ego);
  s["ego_speed"] = spec.ego_speed;
  s["ego_yaw_rate"] = spec.ego_yaw_rate;
  s["frames"] = spec.frames;
  s["frame_dt"] = spec.frame_dt;
  s["seed"] = spec.seed;
  s["sensor_height"] = spec.sensor_height;
  s["bev_size"] = spec.bev_size;
  s["bev_extent"] = spec.bev_extent;
  s["sensor"] = {{"n_lasers", spec.sensor.n_lasers}, {"n_azimuth", spec.sensor.n_azimuth},
                 {"fov_up", spec.sensor.fov_up},     {"fov_down", spec.sensor.fov_down},
                 {"r_min", spec.sensor.r_min},       {"r_max", spec.sensor.r_max}};
  m["spec"] = s;
  m["frame_count"] = frames.size();
  io::write_text(dir / "manifest.json", m.dump(2) + "\n");

  std::ostringstream ego;
  ego << "frame,dx,dy,dyaw\n";
  ego.precision(17);
  for (size_t k = 0; k < frames.size(); ++k) {
    const SceneFrame& f = frames[k];
    ego << k << ',' << f.ego.dx << ',' << f.ego.dy << ',' << f.ego.dyaw << '\n';
    geom::write_point_cloud(dir / frame_name("frame", k), f.cloud);
    io::write_file(dir / frame_name("layout", k), f.layout.grid);
    io::write_file(dir / frame_name("dyn", k), f.dynamic_mask);
  }
  io::write_text(dir / "ego.csv", ego.str());
}

LoadedSequence read_sequence(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
  const auto count = manifest.at("frame_count").get<size_t>();
  const auto bev_size = manifest.at("spec").at("bev_size").get<int64_t>();
  const auto bev_extent = manifest.at("spec").at("bev_extent").get<double>();
  LoadedSequence out;
  for (size_t k = 0; k < count; ++k) {
    out.clouds.push_back(geom::read_point_cloud(dir / frame_name("frame", k)));
    BEVLayout layout{bev_size, bev_extent, io::read_file(dir / frame_name("layout", k))};
    if (static_cast<int64_t>(layout.grid.size()) != bev_size * bev_size) throw Error("layout size mismatch");
    out.layouts.push_back(std::move(layout));
    out.dynamic_masks.push_back(io::read_file(dir / frame_name("dyn", k)));
    if (out.dynamic_masks.back().size() != out.clouds.back().size()) {
      throw Error("dynamic mask length does not match point count in frame " + std::to_string(k));
    }
  }
  std::istringstream ego(io::read_text(dir / "ego.csv"));
  std::string line;
  std::getline(ego, line);
  while (std::getline(ego, line)) {
    if (line.empty()) continue;
    EgoStatus e;
    size_t idx;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf", &idx, &e.dx, &e.dy, &e.dyaw) != 4) {
      throw Error("malformed ego.csv line: " + line);
    }
    out.ego.push_back(e);
  }
  if (out.ego.size() != count) throw Error("ego.csv row count does not match frame count");
  return out;
}

}  // namespace gem::synth
