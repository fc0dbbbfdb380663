#include "gem/lidar_geom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "gem/binary_io.hpp"

namespace gem::geom {

void SensorConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error("sensor config: " + msg); };
  if (n_lasers < 2) fail("n_lasers must be >= 2");
  if (n_azimuth < 4) fail("n_azimuth must be >= 4");
  if (!(fov_down < fov_up)) fail("fov_down must be below fov_up");
  if (!(r_min > 0.0)) fail("r_min must be positive");
  if (!(r_min < r_max)) fail("r_min must be below r_max");
}

double SensorConfig::elevation_of_row(double row_center) const {
  return fov_down + (1.0 - row_center / static_cast<double>(n_lasers)) * (fov_up - fov_down);
}

double SensorConfig::azimuth_of_col(double col_center) const {
  return std::numbers::pi * (1.0 - 2.0 * col_center / static_cast<double>(n_azimuth));
}

double SensorConfig::col_pitch() const { return 2.0 * std::numbers::pi / static_cast<double>(n_azimuth); }

RangeImage::RangeImage(int64_t h, int64_t w, double sentinel)
    : height(h),
      width(w),
      ranges(static_cast<size_t>(h * w), sentinel),
      valid(static_cast<size_t>(h * w), 0) {}

int64_t RangeImage::valid_count() const {
  return static_cast<int64_t>(std::count(valid.begin(), valid.end(), uint8_t{1}));
}

Cell cell_of(const Point3& p, const SensorConfig& cfg) {
  const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
  const double elev = r > 0 ? std::asin(std::clamp(p.z / r, -1.0, 1.0)) : 0.0;
  const double H = static_cast<double>(cfg.n_lasers), W = static_cast<double>(cfg.n_azimuth);
  auto row = static_cast<int64_t>(std::floor((1.0 - (elev - cfg.fov_down) / (cfg.fov_up - cfg.fov_down)) * H));
  row = std::clamp<int64_t>(row, 0, cfg.n_lasers - 1);
  auto col = static_cast<int64_t>(std::floor(0.5 * (1.0 - std::atan2(p.y, p.x) / std::numbers::pi) * W));
  col %= cfg.n_azimuth;
  if (col < 0) col += cfg.n_azimuth;
  return {row, col};
}

RangeImage project(const PointCloud& cloud, const SensorConfig& cfg) {
  cfg.validate();
  RangeImage img(cfg.n_lasers, cfg.n_azimuth, cfg.r_max);
  for (size_t i = 0; i < cloud.points.size(); ++i) {
    const Point3& p = cloud.points[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      std::ostringstream os;
      os << "project: non-finite coordinate at point " << i;
      throw Error(os.str());
    }
    const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    if (r < cfg.r_min || r > cfg.r_max) continue;
    const Cell c = cell_of(p, cfg);
    const size_t k = static_cast<size_t>(c.row * img.width + c.col);
    if (!img.valid[k] || r < img.ranges[k]) {
      img.ranges[k] = r;
      img.valid[k] = 1;
    }
  }
  return img;
}

Point3 ray_direction(int64_t row, int64_t col, const SensorConfig& cfg) {
  const double elev = cfg.elevation_of_row(static_cast<double>(row) + 0.5);
  const double az = cfg.azimuth_of_col(static_cast<double>(col) + 0.5);
  return {std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az), std::sin(elev)};
}

PointCloud unproject(const RangeImage& img, const SensorConfig& cfg) {
  if (img.height != cfg.n_lasers || img.width != cfg.n_azimuth) {
    throw Error("unproject: image size does not match sensor config");
  }
  PointCloud cloud;
  for (int64_t r = 0; r < img.height; ++r)
    for (int64_t c = 0; c < img.width; ++c) {
      if (!img.is_valid(r, c)) continue;
      const Point3 d = ray_direction(r, c, cfg);
      const double range = img.range(r, c);
      cloud.points.push_back({d.x * range, d.y * range, d.z * range});
    }
  return cloud;
}

double normalize_range(double r, const SensorConfig& cfg) {
  const double lo = std::log(cfg.r_min), hi = std::log(cfg.r_max);
  const double v = (std::log(std::clamp(r, cfg.r_min, cfg.r_max)) - lo) / (hi - lo);
  return 2.0 * v - 1.0;
}

double denormalize_range(double v, const SensorConfig& cfg) {
  const double lo = std::log(cfg.r_min), hi = std::log(cfg.r_max);
  const double r = std::exp(lo + 0.5 * (v + 1.0) * (hi - lo));
  return std::clamp(r, cfg.r_min, cfg.r_max);
}

void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  std::vector<uint8_t> buf;
  buf.reserve(cloud.size() * 16);
  for (size_t i = 0; i < cloud.size(); ++i) {
    const Point3& p = cloud.points[i];
    io::put(buf, static_cast<float>(p.x));
    io::put(buf, static_cast<float>(p.y));
    io::put(buf, static_cast<float>(p.z));
    io::put(buf, static_cast<float>(cloud.intensity.empty() ? 0.0 : cloud.intensity[i]));
  }
  io::write_file(path, buf);
}

PointCloud read_point_cloud(const std::filesystem::path& path) {
  auto bytes = io::read_file(path);
  if (bytes.size() % 16 != 0) throw Error("point cloud file size is not a multiple of 16: " + path.string());
  io::Reader in(std::move(bytes));
  PointCloud cloud;
  while (!in.done()) {
    Point3 p;
    p.x = in.get<float>();
    p.y = in.get<float>();
    p.z = in.get<float>();
    cloud.points.push_back(p);
    cloud.intensity.push_back(in.get<float>());
  }
  return cloud;
}

void write_range_image(const std::filesystem::path& path, const RangeImage& img) {
  std::vector<uint8_t> buf;
  io::put_bytes(buf, "GEMRIMG1", 8);
  io::put(buf, static_cast<uint32_t>(img.height));
  io::put(buf, static_cast<uint32_t>(img.width));
  for (double r : img.ranges) io::put(buf, static_cast<float>(r));
  io::write_file(path, buf);
}

RangeImage read_range_image(const std::filesystem::path& path, const SensorConfig& cfg) {
  io::Reader in(io::read_file(path));
  if (in.get_string(8) != "GEMRIMG1") throw Error("bad range image magic: " + path.string());
  const auto h = static_cast<int64_t>(in.get<uint32_t>());
  const auto w = static_cast<int64_t>(in.get<uint32_t>());
  RangeImage img(h, w, cfg.r_max);
  for (int64_t i = 0; i < h * w; ++i) {
    const double r = in.get<float>();
    img.ranges[static_cast<size_t>(i)] = r;
    img.valid[static_cast<size_t>(i)] = (r >= cfg.r_min && r < cfg.r_max) ? 1 : 0;
    if (!img.valid[static_cast<size_t>(i)]) img.ranges[static_cast<size_t>(i)] = cfg.r_max;
  }
  if (!in.done()) throw Error("trailing bytes in range image: " + path.string());
  return img;
}

}  // namespace gem::geom
