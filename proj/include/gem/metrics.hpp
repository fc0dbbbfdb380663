#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gem/lidar_geom.hpp"

// Point-cloud and range-image evaluation metrics. Functions that can be
// undefined for a given input return std::nullopt rather than throwing.
namespace gem::metrics {

using geom::PointCloud;
using geom::Point3;

/// 0.5 * (mean NN distance P->Q + mean NN distance Q->P), unsquared.
std::optional<double> chamfer(const PointCloud& p, const PointCloud& q);

/// Chamfer over points within planar distance `radius` of the sensor; each
/// side filters its own points.
std::optional<double> chamfer_inner(const PointCloud& p, const PointCloud& q, double radius = 10.0);

struct DepthErrors {
  double l1 = 0.0;      // meters
  double absrel = 0.0;  // percent
};

/// Over mutually valid pixels.
std::optional<DepthErrors> depth_errors(const geom::RangeImage& truth, const geom::RangeImage& pred);

/// |1 - median / mean|.
std::optional<double> stability_ratio(const std::vector<double>& errs);

/// Ego-centered bins x bins counts over a square of side `extent`.
struct BEVHistogram {
  int64_t bins = 0;
  double extent = 0.0;
  std::vector<double> counts;

  double total() const;
  std::vector<double> normalized() const;
};

BEVHistogram bev_histogram(const PointCloud& cloud, int64_t bins = 100, double extent = 100.0);

/// Base-2 Jensen-Shannon divergence, in [0, 1].
std::optional<double> jsd(const BEVHistogram& a, const BEVHistogram& b);

/// Mean over `ref` of the minimum squared L2 distance between normalized
/// histograms to any member of `gen`. Unscaled; reports multiply by 1e4.
std::optional<double> mmd(const std::vector<BEVHistogram>& gen, const std::vector<BEVHistogram>& ref);

struct EmdResult {
  double value = 0.0;  // mean matched distance, meters
  int64_t n = 0;       // matched pairs
  bool approximate = false;
};

// Exact assignment up to this size; greedy matching with pairwise 2-opt
// refinement above.
inline constexpr int64_t kEmdExactMax = 64;

/// Both clouds are uniformly subsampled (deterministically, by `seed`) to
/// min(|P|, |Q|, cap) points before matching.
std::optional<EmdResult> emd_small(const PointCloud& p, const PointCloud& q, int64_t cap = 256, uint64_t seed = 0);

// Optimal assignment cost matrix solver (row i -> column result[i]).
std::vector<int64_t> hungarian(const std::vector<double>& cost, int64_t n);

}  // namespace gem::metrics
