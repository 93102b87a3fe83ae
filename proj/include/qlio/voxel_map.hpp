#pragma once

#include "qlio/common.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

namespace qlio {

struct VoxelMapParams {
  double voxel_edge = 0.5;
  std::size_t cell_cap = 32;
  double search_radius = 5.0;
};

/// World-frame point map bucketed into cubic voxels.
/// Single writer: insert must not overlap with knn.
class VoxelMap {
 public:
  explicit VoxelMap(VoxelMapParams params = {});

  /// Points closer than voxel_edge / 4 to a resident of their cell are
  /// dropped, and a full cell accepts nothing further.
  /// Returns the number of points stored.
  std::size_t insert(std::span<const Vec3> points);
  bool insert(const Vec3& point);

  /// Up to k stored points nearest to `query`, ascending by distance, ties
  /// broken lexicographically on coordinates. Only points within the search
  /// radius are considered.
  std::vector<Vec3> knn(const Vec3& query, std::size_t k) const;

  std::size_t size() const { return size_; }
  std::size_t cell_count() const { return cells_.size(); }
  const VoxelMapParams& params() const { return params_; }

  using CellIndex = std::array<std::int64_t, 3>;
  CellIndex cell_of(const Vec3& p) const;
  /// Residents of one cell (empty when unoccupied).
  std::span<const Vec3> cell(const CellIndex& index) const;

 private:
  struct CellHash {
    std::size_t operator()(const CellIndex& c) const noexcept;
  };

  VoxelMapParams params_;
  std::unordered_map<CellIndex, std::vector<Vec3>, CellHash> cells_;
  CellIndex lo_{0, 0, 0};
  CellIndex hi_{-1, -1, -1};
  std::size_t size_ = 0;
};

struct Plane {
  Vec3 normal = Vec3::UnitZ();  // unit length
  double offset = 0.0;          // normal . q + offset = 0
  double fit_residual = 0.0;    // max |normal . q_i + offset| over the fitted points
};

enum class PlaneFitStatus { kAccepted, kDegenerate, kThresholdExceeded };

struct PlaneFitResult {
  PlaneFitStatus status = PlaneFitStatus::kDegenerate;
  Plane plane;

  bool accepted() const { return status == PlaneFitStatus::kAccepted; }
};

inline constexpr double kPlaneFitThreshold = 0.1;
inline constexpr double kPlaneFitMaxCondition = 1e8;

/// Least-squares fit of q_i . n = -1 over exactly five points. Planes through
/// the origin are not representable in this parameterization.
PlaneFitResult plane_fit(std::span<const Vec3> points, double threshold = kPlaneFitThreshold);

}  // namespace qlio
