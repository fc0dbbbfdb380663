#include "gem/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "gem/rng.hpp"

namespace gem::metrics {

namespace {

double dist(const Point3& a, const Point3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Nearest-neighbor queries through a uniform voxel hash; exact because the
// search expands shell by shell until no closer cell can exist.
class NearestIndex {
 public:
  explicit NearestIndex(const std::vector<Point3>& pts) : pts_(pts) {
    double lo[3] = {1e300, 1e300, 1e300}, hi[3] = {-1e300, -1e300, -1e300};
    for (const auto& p : pts) {
      const double v[3] = {p.x, p.y, p.z};
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::min(lo[k], v[k]);
        hi[k] = std::max(hi[k], v[k]);
      }
    }
    double volume = 1.0;
    for (int k = 0; k < 3; ++k) {
      origin_[k] = lo[k];
      volume *= std::max(hi[k] - lo[k], 1e-3);
    }
    cell_ = std::max(std::cbrt(volume / std::max<double>(1.0, static_cast<double>(pts.size()) / 2.0)), 1e-3);
    for (int k = 0; k < 3; ++k) dims_[k] = static_cast<int64_t>((hi[k] - lo[k]) / cell_) + 1;
    start_.assign(static_cast<size_t>(dims_[0] * dims_[1] * dims_[2] + 1), 0);
    std::vector<int64_t> key(pts.size());
    for (size_t i = 0; i < pts.size(); ++i) {
      key[i] = flat(coord(pts[i]));
      ++start_[static_cast<size_t>(key[i] + 1)];
    }
    std::partial_sum(start_.begin(), start_.end(), start_.begin());
    order_.resize(pts.size());
    std::vector<int64_t> fill(start_.begin(), start_.end() - 1);
    for (size_t i = 0; i < pts.size(); ++i) order_[static_cast<size_t>(fill[static_cast<size_t>(key[i])]++)] = i;
  }

  double nearest(const Point3& q) const {
    const auto c = coord(q);
    double best = std::numeric_limits<double>::infinity();
    const int64_t max_shell = std::max({dims_[0], dims_[1], dims_[2]}) + 1;
    for (int64_t s = 0; s <= max_shell; ++s) {
      // Every point in shell s is at least (s - 1) * cell_ away.
      if (s > 0 && static_cast<double>(s - 1) * cell_ > best) break;
      for (int64_t i = c[0] - s; i <= c[0] + s; ++i)
        for (int64_t j = c[1] - s; j <= c[1] + s; ++j)
          for (int64_t k = c[2] - s; k <= c[2] + s; ++k) {
            if (std::max({std::abs(i - c[0]), std::abs(j - c[1]), std::abs(k - c[2])}) != s) continue;
            if (i < 0 || j < 0 || k < 0 || i >= dims_[0] || j >= dims_[1] || k >= dims_[2]) continue;
            const int64_t f = flat({i, j, k});
            for (int64_t m = start_[static_cast<size_t>(f)]; m < start_[static_cast<size_t>(f + 1)]; ++m)
              best = std::min(best, dist(q, pts_[order_[static_cast<size_t>(m)]]));
          }
    }
    return best;
  }

 private:
  std::array<int64_t, 3> coord(const Point3& p) const {
    const double v[3] = {p.x, p.y, p.z};
    std::array<int64_t, 3> c{};
    for (int k = 0; k < 3; ++k)
      c[static_cast<size_t>(k)] = std::clamp<int64_t>(static_cast<int64_t>(std::floor((v[k] - origin_[k]) / cell_)),
                                                      0, dims_[k] - 1);
    return c;
  }
  int64_t flat(const std::array<int64_t, 3>& c) const { return (c[0] * dims_[1] + c[1]) * dims_[2] + c[2]; }

  const std::vector<Point3>& pts_;
  double origin_[3] = {0, 0, 0};
  double cell_ = 1.0;
  int64_t dims_[3] = {1, 1, 1};
  std::vector<int64_t> start_;
  std::vector<size_t> order_;
};

double mean_nn(const std::vector<Point3>& from, const std::vector<Point3>& to) {
  NearestIndex index(to);
  double s = 0.0;
  for (const auto& p : from) s += index.nearest(p);
  return s / static_cast<double>(from.size());
}

std::vector<Point3> within(const PointCloud& c, double radius) {
  std::vector<Point3> out;
  for (const auto& p : c.points)
    if (std::hypot(p.x, p.y) <= radius) out.push_back(p);
  return out;
}

}  // namespace

std::optional<double> chamfer(const PointCloud& p, const PointCloud& q) {
  if (p.empty() || q.empty()) return std::nullopt;
  return 0.5 * (mean_nn(p.points, q.points) + mean_nn(q.points, p.points));
}

std::optional<double> chamfer_inner(const PointCloud& p, const PointCloud& q, double radius) {
  if (!(radius > 0)) throw Error("chamfer_inner: radius must be positive");
  PointCloud a, b;
  a.points = within(p, radius);
  b.points = within(q, radius);
  return chamfer(a, b);
}

std::optional<DepthErrors> depth_errors(const geom::RangeImage& truth, const geom::RangeImage& pred) {
  if (truth.height != pred.height || truth.width != pred.width) throw Error("depth_errors: image size mismatch");
  double l1 = 0.0, rel = 0.0;
  int64_t n = 0;
  for (size_t k = 0; k < truth.ranges.size(); ++k) {
    if (!truth.valid[k] || !pred.valid[k]) continue;
    const double e = std::abs(truth.ranges[k] - pred.ranges[k]);
    l1 += e;
    rel += e / truth.ranges[k];
    ++n;
  }
  if (n == 0) return std::nullopt;
  return DepthErrors{l1 / static_cast<double>(n), 100.0 * rel / static_cast<double>(n)};
}

std::optional<double> stability_ratio(const std::vector<double>& errs) {
  if (errs.empty()) return std::nullopt;
  std::vector<double> v = errs;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  const double median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n);
  if (mean == 0.0) return std::nullopt;
  return std::abs(1.0 - median / mean);
}

double BEVHistogram::total() const { return std::accumulate(counts.begin(), counts.end(), 0.0); }

std::vector<double> BEVHistogram::normalized() const {
  const double t = total();
  if (!(t > 0)) throw Error("bev histogram: zero total");
  std::vector<double> out(counts.size());
  for (size_t i = 0; i < counts.size(); ++i) out[i] = counts[i] / t;
  return out;
}

BEVHistogram bev_histogram(const PointCloud& cloud, int64_t bins, double extent) {
  if (bins < 1 || !(extent > 0)) throw Error("bev_histogram: bins and extent must be positive");
  BEVHistogram h{bins, extent, std::vector<double>(static_cast<size_t>(bins * bins), 0.0)};
  const double cell = extent / static_cast<double>(bins);
  for (const auto& p : cloud.points) {
    const auto i = static_cast<int64_t>(std::floor((p.x + 0.5 * extent) / cell));
    const auto j = static_cast<int64_t>(std::floor((p.y + 0.5 * extent) / cell));
    if (i < 0 || j < 0 || i >= bins || j >= bins) continue;
    h.counts[static_cast<size_t>(i * bins + j)] += 1.0;
  }
  return h;
}

std::optional<double> jsd(const BEVHistogram& a, const BEVHistogram& b) {
  if (a.counts.size() != b.counts.size()) throw Error("jsd: histogram size mismatch");
  if (!(a.total() > 0) || !(b.total() > 0)) return std::nullopt;
  const auto p = a.normalized(), q = b.normalized();
  double s = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    // Summed per bin so swapping the arguments is exact.
    const double tp = p[i] > 0 ? 0.5 * p[i] * std::log2(p[i] / m) : 0.0;
    const double tq = q[i] > 0 ? 0.5 * q[i] * std::log2(q[i] / m) : 0.0;
    s += tp + tq;
  }
  return std::clamp(s, 0.0, 1.0);
}

std::optional<double> mmd(const std::vector<BEVHistogram>& gen, const std::vector<BEVHistogram>& ref) {
  if (gen.empty() || ref.empty()) return std::nullopt;
  std::vector<std::vector<double>> g;
  for (const auto& h : gen) {
    if (!(h.total() > 0)) return std::nullopt;
    g.push_back(h.normalized());
  }
  double acc = 0.0;
  for (const auto& h : ref) {
    if (!(h.total() > 0)) return std::nullopt;
    const auto r = h.normalized();
    double best = std::numeric_limits<double>::infinity();
    for (const auto& cand : g) {
      if (cand.size() != r.size()) throw Error("mmd: histogram size mismatch");
      double d = 0.0;
      for (size_t i = 0; i < r.size(); ++i) d += (r[i] - cand[i]) * (r[i] - cand[i]);
      best = std::min(best, d);
    }
    acc += best;
  }
  return acc / static_cast<double>(ref.size());
}

// Shortest augmenting path assignment with potentials, O(n^3).
std::vector<int64_t> hungarian(const std::vector<double>& cost, int64_t n) {
  if (static_cast<int64_t>(cost.size()) != n * n) throw Error("hungarian: cost must be n x n");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n + 1), 0.0), v(static_cast<size_t>(n + 1), 0.0);
  std::vector<int64_t> match(static_cast<size_t>(n + 1), 0), way(static_cast<size_t>(n + 1), 0);
  for (int64_t i = 1; i <= n; ++i) {
    match[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n + 1), inf);
    std::vector<char> used(static_cast<size_t>(n + 1), 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int64_t i0 = match[static_cast<size_t>(j0)];
      double delta = inf;
      int64_t j1 = 0;
      for (int64_t j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost[static_cast<size_t>((i0 - 1) * n + j - 1)] - u[static_cast<size_t>(i0)] -
                           v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(match[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<size_t>(j0)] != 0);
    do {
      const int64_t j1 = way[static_cast<size_t>(j0)];
      match[static_cast<size_t>(j0)] = match[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int64_t> row_to_col(static_cast<size_t>(n));
  for (int64_t j = 1; j <= n; ++j) row_to_col[static_cast<size_t>(match[static_cast<size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

namespace {

std::vector<Point3> subsample(const std::vector<Point3>& pts, int64_t n, Rng& rng) {
  std::vector<size_t> idx(pts.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (int64_t i = 0; i < n; ++i) {
    const auto j = static_cast<size_t>(rng.uniform_int(i, static_cast<int64_t>(idx.size()) - 1));
    std::swap(idx[static_cast<size_t>(i)], idx[j]);
  }
  std::vector<Point3> out;
  for (int64_t i = 0; i < n; ++i) out.push_back(pts[idx[static_cast<size_t>(i)]]);
  return out;
}

}  // namespace

std::optional<EmdResult> emd_small(const PointCloud& p, const PointCloud& q, int64_t cap, uint64_t seed) {
  if (p.empty() || q.empty()) return std::nullopt;
  const int64_t n = std::min({static_cast<int64_t>(p.size()), static_cast<int64_t>(q.size()), cap});
  std::vector<Point3> a = p.points, b = q.points;
  if (static_cast<int64_t>(a.size()) > n) {
    Rng rng(derive_seed(seed, Stream::kEval, 0));
    a = subsample(a, n, rng);
  }
  if (static_cast<int64_t>(b.size()) > n) {
    Rng rng(derive_seed(seed, Stream::kEval, 1));
    b = subsample(b, n, rng);
  }
  std::vector<double> cost(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) cost[static_cast<size_t>(i * n + j)] = dist(a[static_cast<size_t>(i)], b[static_cast<size_t>(j)]);

  EmdResult res;
  res.n = n;
  std::vector<int64_t> assign;
  if (n <= kEmdExactMax) {
    assign = hungarian(cost, n);
  } else {
    res.approximate = true;
    // Greedy over globally sorted edges, then pairwise swaps until no swap
    // lowers the cost.
    std::vector<int64_t> edges(static_cast<size_t>(n * n));
    std::iota(edges.begin(), edges.end(), 0);
    std::sort(edges.begin(), edges.end(), [&](int64_t x, int64_t y) {
      return cost[static_cast<size_t>(x)] < cost[static_cast<size_t>(y)] ||
             (cost[static_cast<size_t>(x)] == cost[static_cast<size_t>(y)] && x < y);
    });
    assign.assign(static_cast<size_t>(n), -1);
    std::vector<char> col_used(static_cast<size_t>(n), 0);
    for (int64_t e : edges) {
      const int64_t i = e / n, j = e % n;
      if (assign[static_cast<size_t>(i)] < 0 && !col_used[static_cast<size_t>(j)]) {
        assign[static_cast<size_t>(i)] = j;
        col_used[static_cast<size_t>(j)] = 1;
      }
    }
    for (bool improved = true; improved;) {
      improved = false;
      for (int64_t i = 0; i < n; ++i)
        for (int64_t k = i + 1; k < n; ++k) {
          const int64_t ji = assign[static_cast<size_t>(i)], jk = assign[static_cast<size_t>(k)];
          const double now = cost[static_cast<size_t>(i * n + ji)] + cost[static_cast<size_t>(k * n + jk)];
          const double swapped = cost[static_cast<size_t>(i * n + jk)] + cost[static_cast<size_t>(k * n + ji)];
          if (swapped < now - 1e-12) {
            std::swap(assign[static_cast<size_t>(i)], assign[static_cast<size_t>(k)]);
            improved = true;
          }
        }
    }
  }
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) total += cost[static_cast<size_t>(i * n + assign[static_cast<size_t>(i)])];
  res.value = total / static_cast<double>(n);
  return res;
}

}  // namespace gem::metrics
