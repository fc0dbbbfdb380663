#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gem/metrics.hpp"
#include "gem/rng.hpp"

using namespace gem;
using namespace gem::metrics;

namespace {

PointCloud random_cloud(Rng& rng, int n, double spread = 10.0) {
  PointCloud c;
  for (int i = 0; i < n; ++i)
    c.points.push_back({rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-2, 2)});
  return c;
}

double d3(const Point3& a, const Point3& b) { return std::sqrt(std::pow(a.x - b.x, 2) + std::pow(a.y - b.y, 2) + std::pow(a.z - b.z, 2)); }

double brute_chamfer(const PointCloud& p, const PointCloud& q) {
  auto one = [](const PointCloud& a, const PointCloud& b) {
    double s = 0;
    for (const auto& x : a.points) {
      double best = 1e300;
      for (const auto& y : b.points) best = std::min(best, d3(x, y));
      s += best;
    }
    return s / a.size();
  };
  return 0.5 * (one(p, q) + one(q, p));
}

BEVHistogram random_hist(Rng& rng, int64_t bins) {
  BEVHistogram h{bins, 10.0, std::vector<double>(bins * bins)};
  for (auto& c : h.counts) c = rng.uniform(0, 1) < 0.3 ? 0.0 : std::floor(rng.uniform(0, 10));
  h.counts[0] += 1;
  return h;
}

PointCloud shifted(const PointCloud& c, double dx, double dy, double dz) {
  PointCloud o = c;
  for (auto& p : o.points) p = {p.x + dx, p.y + dy, p.z + dz};
  return o;
}

}  // namespace

TEST_CASE("chamfer basics") {
  Rng rng(1);
  auto p = random_cloud(rng, 30);
  CHECK(chamfer(p, p).value() == 0.0);
  PointCloud a, b;
  a.points = {{0, 0, 0}};
  b.points = {{1, 0, 0}};
  CHECK(chamfer(a, b).value() == 1.0);
  CHECK_FALSE(chamfer(a, PointCloud{}).has_value());
}

TEST_CASE("chamfer matches brute force and is symmetric and translation invariant") {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    auto p = random_cloud(rng, 50), q = random_cloud(rng, 37, 5.0);
    const double c = chamfer(p, q).value();
    CHECK(std::abs(c - brute_chamfer(p, q)) < 1e-9);
    CHECK(std::abs(c - chamfer(q, p).value()) < 1e-12);
    CHECK(std::abs(c - chamfer(shifted(p, 3, -1, 2), shifted(q, 3, -1, 2)).value()) < 1e-6);
  }
  // Clustered and far-apart clouds stress the voxel search.
  auto far = shifted(random_cloud(rng, 40, 0.1), 500, 0, 0);
  auto near = random_cloud(rng, 40, 0.1);
  CHECK(std::abs(chamfer(far, near).value() - brute_chamfer(far, near)) < 1e-9);
}

TEST_CASE("inner chamfer filters each side by planar radius") {
  Rng rng(3);
  auto p = random_cloud(rng, 40, 5.0), q = random_cloud(rng, 40, 5.0);
  CHECK(chamfer_inner(p, q, 100.0).value() == chamfer(p, q).value());
  CHECK_FALSE(chamfer_inner(shifted(p, 50, 0, 0), shifted(q, 50, 0, 0), 10.0).has_value());
  auto big_p = random_cloud(rng, 50, 20.0), big_q = random_cloud(rng, 50, 20.0);
  PointCloud fp, fq;
  for (auto& x : big_p.points)
    if (std::hypot(x.x, x.y) <= 10.0) fp.points.push_back(x);
  for (auto& x : big_q.points)
    if (std::hypot(x.x, x.y) <= 10.0) fq.points.push_back(x);
  CHECK(std::abs(chamfer_inner(big_p, big_q, 10.0).value() - brute_chamfer(fp, fq)) < 1e-9);
  CHECK(chamfer_inner(big_p, big_q, 1e9).value() == chamfer(big_p, big_q).value());
}

TEST_CASE("depth errors") {
  geom::RangeImage a(2, 2, 70), b(2, 2, 70);
  for (int k = 0; k < 4; ++k) {
    a.ranges[k] = 10;
    b.ranges[k] = 11;
    a.valid[k] = b.valid[k] = 1;
  }
  auto e = depth_errors(a, b).value();
  CHECK(e.l1 == doctest::Approx(1.0));
  CHECK(e.absrel == doctest::Approx(10.0));
  auto same = depth_errors(a, a).value();
  CHECK(same.l1 == 0.0);
  CHECK(same.absrel == 0.0);
  std::fill(b.valid.begin(), b.valid.end(), 0);
  CHECK_FALSE(depth_errors(a, b).has_value());

  Rng rng(4);
  geom::RangeImage r(8, 8, 70), h(8, 8, 70);
  double l1 = 0, rel = 0;
  int n = 0;
  for (int k = 0; k < 64; ++k) {
    r.ranges[k] = rng.uniform(1, 60);
    h.ranges[k] = rng.uniform(1, 60);
    r.valid[k] = rng.uniform(0, 1) < 0.8;
    h.valid[k] = rng.uniform(0, 1) < 0.8;
    if (r.valid[k] && h.valid[k]) {
      l1 += std::abs(r.ranges[k] - h.ranges[k]);
      rel += std::abs(r.ranges[k] - h.ranges[k]) / r.ranges[k];
      ++n;
    }
  }
  auto er = depth_errors(r, h).value();
  CHECK(er.l1 == doctest::Approx(l1 / n).epsilon(1e-12));
  CHECK(er.absrel == doctest::Approx(100 * rel / n).epsilon(1e-12));
}

TEST_CASE("stability ratio") {
  CHECK(stability_ratio({2, 2, 2}).value() == 0.0);
  CHECK(stability_ratio({1, 1, 4}).value() == doctest::Approx(0.5));
  CHECK(stability_ratio({1, 2, 3}).value() == doctest::Approx(0.0));
  CHECK_FALSE(stability_ratio({0, 0}).has_value());
  CHECK_FALSE(stability_ratio({}).has_value());
}

TEST_CASE("jsd bounds and two-KL oracle") {
  Rng rng(5);
  auto a = random_hist(rng, 6), b = random_hist(rng, 6);
  CHECK(jsd(a, a).value() == 0.0);
  BEVHistogram x{2, 1.0, {1, 0, 0, 0}}, y{2, 1.0, {0, 0, 3, 0}};
  CHECK(jsd(x, y).value() == doctest::Approx(1.0).epsilon(1e-15));
  const auto p = a.normalized(), q = b.normalized();
  auto kl = [](const std::vector<double>& u, const std::vector<double>& m) {
    double s = 0;
    for (size_t i = 0; i < u.size(); ++i)
      if (u[i] > 0) s += u[i] * (std::log(u[i]) - std::log(m[i])) / std::log(2.0);
    return s;
  };
  std::vector<double> m(p.size());
  for (size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  const double ref = 0.5 * kl(p, m) + 0.5 * kl(q, m);
  CHECK(std::abs(jsd(a, b).value() - ref) < 1e-9);
  CHECK(jsd(a, b).value() == jsd(b, a).value());
  BEVHistogram zero{6, 10.0, std::vector<double>(36, 0.0)};
  CHECK_FALSE(jsd(a, zero).has_value());
}

TEST_CASE("bev histogram normalizes exactly") {
  Rng rng(6);
  auto c = random_cloud(rng, 500, 60.0);
  auto h = bev_histogram(c);
  CHECK(h.counts.size() == 100 * 100);
  const auto n = h.normalized();
  CHECK(std::abs(std::accumulate(n.begin(), n.end(), 0.0) - 1.0) < 1e-9);
}

TEST_CASE("mmd matches exhaustive min search") {
  Rng rng(7);
  std::vector<BEVHistogram> gen, ref;
  for (int i = 0; i < 5; ++i) {
    gen.push_back(random_hist(rng, 4));
    ref.push_back(random_hist(rng, 4));
  }
  double acc = 0;
  for (auto& r : ref) {
    double best = 1e300;
    for (auto& g : gen) {
      const auto a = r.normalized(), b = g.normalized();
      double d = 0;
      for (size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
      best = std::min(best, d);
    }
    acc += best;
  }
  CHECK(std::abs(mmd(gen, ref).value() - acc / 5) < 1e-12);
  auto super = gen;
  super.insert(super.end(), ref.begin(), ref.end());
  CHECK(mmd(super, ref).value() == 0.0);
  const auto a = gen[0].normalized(), b = ref[0].normalized();
  double d = 0;
  for (size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(mmd({gen[0]}, {ref[0]}).value() == doctest::Approx(d).epsilon(1e-14));
  CHECK_FALSE(mmd({}, ref).has_value());
}

TEST_CASE("emd small cases") {
  Rng rng(8);
  auto p = random_cloud(rng, 20);
  CHECK(emd_small(p, p).value().value == 0.0);
  PointCloud a, b;
  a.points = {{0, 0, 0}, {1, 0, 0}};
  b.points = {{1, 0, 0}, {0, 0, 0}};
  CHECK(emd_small(a, b).value().value == 0.0);
  b.points = {{1, 1, 0}, {0, 1, 0}};
  CHECK(emd_small(a, b).value().value == doctest::Approx(1.0));
  CHECK_FALSE(emd_small(a, PointCloud{}).has_value());
}

TEST_CASE("emd equals the factorial oracle on eight points") {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = random_cloud(rng, 8), q = random_cloud(rng, 8);
    std::vector<int> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
      double s = 0;
      for (int i = 0; i < 8; ++i) s += d3(p.points[i], q.points[perm[i]]);
      best = std::min(best, s / 8);
    } while (std::next_permutation(perm.begin(), perm.end()));
    auto r = emd_small(p, q).value();
    CHECK_FALSE(r.approximate);
    CHECK(std::abs(r.value - best) < 1e-9);
    CHECK(std::abs(emd_small(q, p).value().value - best) < 1e-9);
    CHECK(std::abs(emd_small(shifted(p, 1, 2, 3), shifted(q, 1, 2, 3)).value().value - best) < 1e-9);
  }
}

TEST_CASE("emd above the exact limit is flagged and bounded by greedy") {
  Rng rng(10);
  auto p = random_cloud(rng, 300), q = random_cloud(rng, 300);
  auto r = emd_small(p, q).value();
  CHECK(r.approximate);
  CHECK(r.n == 256);
  CHECK(r.value > 0);
}
