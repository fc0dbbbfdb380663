#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "gem/tensor.hpp"

namespace gem::geom {

/// Spinning-LiDAR sensor model: `n_lasers` rows by `n_azimuth` columns.
struct SensorConfig {
  int64_t n_lasers = 32;
  int64_t n_azimuth = 1024;
  double fov_up = 10.0 * 3.14159265358979323846 / 180.0;     // radians
  double fov_down = -30.0 * 3.14159265358979323846 / 180.0;  // radians
  double r_min = 1.0;                                         // meters
  double r_max = 70.0;                                        // meters

  // Throws gem::Error naming the violated bound.
  void validate() const;

  double elevation_of_row(double row_center) const;
  double azimuth_of_col(double col_center) const;
  // Angular pitch between adjacent rows / columns, radians.
  double row_pitch() const { return (fov_up - fov_down) / static_cast<double>(n_lasers); }
  double col_pitch() const;
  bool operator==(const SensorConfig&) const = default;
};

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct PointCloud {
  std::vector<Point3> points;
  std::vector<double> intensity;  // empty, or one value in [0, 1] per point

  size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// H x W first-return ranges. Invalid cells hold the r_max sentinel.
struct RangeImage {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> ranges;
  std::vector<uint8_t> valid;

  RangeImage() = default;
  RangeImage(int64_t h, int64_t w, double sentinel);

  double& range(int64_t row, int64_t col) { return ranges[static_cast<size_t>(row * width + col)]; }
  double range(int64_t row, int64_t col) const { return ranges[static_cast<size_t>(row * width + col)]; }
  bool is_valid(int64_t row, int64_t col) const { return valid[static_cast<size_t>(row * width + col)] != 0; }
  int64_t valid_count() const;
};

struct Cell {
  int64_t row = 0;
  int64_t col = 0;
};

// Spherical projection cell of a point (no range filtering).
Cell cell_of(const Point3& p, const SensorConfig& cfg);

/// Projects a cloud to a range image; the nearest return wins each cell.
/// Points outside [r_min, r_max] are dropped; non-finite coordinates throw.
RangeImage project(const PointCloud& cloud, const SensorConfig& cfg);

/// One point per valid cell, placed on the cell-center ray.
PointCloud unproject(const RangeImage& img, const SensorConfig& cfg);

// Unit direction of the cell-center ray.
Point3 ray_direction(int64_t row, int64_t col, const SensorConfig& cfg);

// Log-range normalization to [-1, 1] over [r_min, r_max] and its inverse.
double normalize_range(double r, const SensorConfig& cfg);
double denormalize_range(double v, const SensorConfig& cfg);

// --- file formats -----------------------------------------------------

/// Point cloud file: little-endian float32 (x, y, z, intensity) records.
void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_point_cloud(const std::filesystem::path& path);

/// Range image file: "GEMRIMG1", uint32 H, uint32 W, float32 H*W row-major.
/// On load, cells at or beyond r_max are marked invalid.
void write_range_image(const std::filesystem::path& path, const RangeImage& img);
RangeImage read_range_image(const std::filesystem::path& path, const SensorConfig& cfg);

}  // namespace gem::geom
