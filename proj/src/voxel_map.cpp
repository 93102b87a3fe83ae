#include "qlio/voxel_map.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>

namespace qlio {

namespace {

bool closer(const Vec3& query, const Vec3& a, const Vec3& b) {
  const double da = (a - query).squaredNorm();
  const double db = (b - query).squaredNorm();
  if (da != db) return da < db;
  return std::lexicographical_compare(a.data(), a.data() + 3, b.data(), b.data() + 3);
}

}  // namespace

std::size_t VoxelMap::CellHash::operator()(const CellIndex& c) const noexcept {
  std::uint64_t h = static_cast<std::uint64_t>(c[0]) * 73856093ULL;
  h ^= static_cast<std::uint64_t>(c[1]) * 19349663ULL;
  h ^= static_cast<std::uint64_t>(c[2]) * 83492791ULL;
  return static_cast<std::size_t>(h);
}

VoxelMap::VoxelMap(VoxelMapParams params) : params_(params) {
  if (!(params_.voxel_edge > 0.0) || params_.cell_cap == 0 || !(params_.search_radius > 0.0)) {
    throw InvalidArgument("voxel map parameters must be positive");
  }
}

VoxelMap::CellIndex VoxelMap::cell_of(const Vec3& p) const {
  CellIndex c;
  for (int i = 0; i < 3; ++i) {
    c[i] = static_cast<std::int64_t>(std::floor(p[i] / params_.voxel_edge));
  }
  return c;
}

std::span<const Vec3> VoxelMap::cell(const CellIndex& index) const {
  const auto it = cells_.find(index);
  if (it == cells_.end()) return {};
  return it->second;
}

bool VoxelMap::insert(const Vec3& point) {
  if (!point.allFinite()) {
    throw InvalidArgument("voxel map: non-finite point");
  }
  const CellIndex c = cell_of(point);
  std::vector<Vec3>& residents = cells_[c];
  if (residents.size() >= params_.cell_cap) return false;
  const double min_sep = 0.25 * params_.voxel_edge;
  for (const Vec3& r : residents) {
    if ((r - point).squaredNorm() < min_sep * min_sep) return false;
  }
  residents.push_back(point);
  if (size_ == 0) {
    lo_ = hi_ = c;
  } else {
    for (int i = 0; i < 3; ++i) {
      lo_[i] = std::min(lo_[i], c[i]);
      hi_[i] = std::max(hi_[i], c[i]);
    }
  }
  ++size_;
  return true;
}

std::size_t VoxelMap::insert(std::span<const Vec3> points) {
  std::size_t stored = 0;
  for (const Vec3& p : points) stored += insert(p) ? 1 : 0;
  return stored;
}

std::vector<Vec3> VoxelMap::knn(const Vec3& query, std::size_t k) const {
  if (k == 0) {
    throw InvalidArgument("knn: k must be at least 1");
  }
  std::vector<Vec3> best;
  if (size_ == 0) return best;

  const double edge = params_.voxel_edge;
  const double radius = params_.search_radius;
  const double r2 = radius * radius;
  const CellIndex center = cell_of(query);
  const auto max_ring = static_cast<std::int64_t>(std::ceil(radius / edge)) + 1;

  // Worst k-th distance so far; once every cell within the next ring is
  // guaranteed farther than it, the search can stop.
  const auto consider = [&](const Vec3& p) {
    if ((p - query).squaredNorm() > r2) return;
    if (best.size() < k) {
      best.insert(std::upper_bound(best.begin(), best.end(), p,
                                   [&](const Vec3& a, const Vec3& b) { return closer(query, a, b); }),
                  p);
    } else if (closer(query, p, best.back())) {
      best.pop_back();
      best.insert(std::upper_bound(best.begin(), best.end(), p,
                                   [&](const Vec3& a, const Vec3& b) { return closer(query, a, b); }),
                  p);
    }
  };

  for (std::int64_t ring = 0; ring <= max_ring; ++ring) {
    // Ring `ring` covers cells with Chebyshev distance exactly `ring`; any
    // point in it is at least (ring - 1) * edge from the query.
    const double ring_min = std::max<double>(0.0, static_cast<double>(ring - 1) * edge);
    if (ring_min > radius) break;
    if (best.size() == k && ring_min * ring_min > (best.back() - query).squaredNorm()) break;

    std::int64_t lo[3], hi[3];
    bool empty = false;
    for (int i = 0; i < 3; ++i) {
      lo[i] = std::max(center[i] - ring, lo_[i]);
      hi[i] = std::min(center[i] + ring, hi_[i]);
      if (lo[i] > hi[i]) empty = true;
    }
    if (empty) continue;
    for (std::int64_t x = lo[0]; x <= hi[0]; ++x) {
      const bool x_edge = std::abs(x - center[0]) == ring;
      for (std::int64_t y = lo[1]; y <= hi[1]; ++y) {
        const bool xy_edge = x_edge || std::abs(y - center[1]) == ring;
        for (std::int64_t z = lo[2]; z <= hi[2]; ++z) {
          if (!xy_edge && std::abs(z - center[2]) != ring) {
            // Interior cell of the ring cube: jump to the far face.
            if (z < center[2] + ring) z = std::max(z, center[2] + ring - 1);
            continue;
          }
          const auto it = cells_.find({x, y, z});
          if (it == cells_.end()) continue;
          for (const Vec3& p : it->second) consider(p);
        }
      }
    }
  }
  return best;
}

PlaneFitResult plane_fit(std::span<const Vec3> points, double threshold) {
  if (points.size() != 5) {
    throw InvalidArgument("plane_fit: exactly 5 points required");
  }
  Eigen::Matrix<double, 5, 3> a;
  for (int i = 0; i < 5; ++i) {
    if (!points[i].allFinite()) throw InvalidArgument("plane_fit: non-finite point");
    a.row(i) = points[i].transpose();
  }
  PlaneFitResult result;
  Eigen::JacobiSVD<Eigen::Matrix<double, 5, 3>> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (sv(2) > 0.0 && sv(0) / sv(2) <= kPlaneFitMaxCondition) {
    const Vec3 n = svd.solve(-Eigen::Matrix<double, 5, 1>::Ones());
    const double norm = n.norm();
    if (!(norm > 0.0) || !n.allFinite()) return result;
    result.plane.normal = n / norm;
    result.plane.offset = 1.0 / norm;
  } else {
    // Ill-conditioned either because the points are collinear or because
    // their plane passes through the origin. Only the latter is fitted,
    // from the centered points.
    const Eigen::RowVector3d centroid = a.colwise().mean();
    const Eigen::Matrix<double, 5, 3> centered = a.rowwise() - centroid;
    Eigen::JacobiSVD<Eigen::Matrix<double, 5, 3>> csvd(centered, Eigen::ComputeFullV);
    const Vec3 csv = csvd.singularValues();
    if (!(csv(1) > csv(0) / kPlaneFitMaxCondition)) return result;
    result.plane.normal = csvd.matrixV().col(2);
    result.plane.offset = -result.plane.normal.dot(centroid.transpose());
  }
  double worst = 0.0;
  for (const Vec3& q : points) {
    worst = std::max(worst, std::abs(result.plane.normal.dot(q) + result.plane.offset));
  }
  result.plane.fit_residual = worst;
  result.status = worst <= threshold ? PlaneFitStatus::kAccepted
                                     : PlaneFitStatus::kThresholdExceeded;
  return result;
}

}  // namespace qlio
