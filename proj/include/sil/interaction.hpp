#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sil/clustering.hpp"
#include "sil/mlp.hpp"

namespace sil {

/// Axis-aligned box in pixel units. Membership is half-open: [x1,x2) x [y1,y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid() const { return x1 < x2 && y1 < y2; }
  bool contains(Point2 p) const { return x1 <= p.x && p.x < x2 && y1 <= p.y && p.y < y2; }
  Point2 center() const { return {(x1 + x2) / 2, (y1 + y2) / 2}; }
  double half_diagonal() const { return std::hypot(x2 - x1, y2 - y1) / 2; }
  friend bool operator==(const Box&, const Box&) = default;
};

/// An entity: its box, an optional category, and the reference feature g.
template <typename Scalar>
struct EntityBox {
  Box box;
  std::optional<int> class_id;
  std::string label;
  Tensor2<Scalar> g;  // 1 x D
};

/// For every entity, the indices of the centres that fall inside its box.
struct BoxCenterMap {
  std::vector<std::vector<int>> members;
};

/// Per-entity weights aligned with BoxCenterMap::members.
using EntityWeights = std::vector<std::vector<double>>;

/// How the distance sum in the aggregation denominator is measured.
enum class DistanceMode {
  raw,         // pixels
  normalized,  // divided by half the box diagonal
};

/// How centre-to-box-centre distance turns into a weight.
enum class WeightVariant {
  distance,  // proportional to distance
  inverse,   // proportional to 1 / (1 + distance)
};

template <typename Scalar>
BoxCenterMap filter_centers(const std::vector<EntityBox<Scalar>>& entities, const std::vector<Point2>& centers) {
  BoxCenterMap map;
  map.members.resize(entities.size());
  for (std::size_t k = 0; k < entities.size(); ++k) {
    if (!entities[k].box.valid()) throw ArgumentError("filter_centers: entity " + std::to_string(k) + " has an empty box");
    for (std::size_t j = 0; j < centers.size(); ++j)
      if (entities[k].box.contains(centers[j])) map.members[k].push_back(static_cast<int>(j));
  }
  return map;
}

/// Importance of each member centre within one entity. Weights sum to one.
/// If every member sits on the box centre the split is uniform.
inline std::vector<double> entity_weights(const Box& box, const std::vector<int>& members,
                                          const std::vector<Point2>& centers,
                                          WeightVariant variant = WeightVariant::distance) {
  if (members.empty()) throw ArgumentError("entity_weights: entity has no member centres");
  const Point2 c = box.center();
  std::vector<double> w(members.size());
  double total = 0;
  for (std::size_t r = 0; r < members.size(); ++r) {
    const double d = distance(centers[static_cast<std::size_t>(members[r])], c);
    w[r] = variant == WeightVariant::distance ? d : 1.0 / (1.0 + d);
    total += w[r];
  }
  if (total < 1e-9) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(members.size()));
    return w;
  }
  for (double& v : w) v /= total;
  return w;
}

inline EntityWeights all_entity_weights(const std::vector<Box>& boxes, const BoxCenterMap& map,
                                        const std::vector<Point2>& centers, WeightVariant variant) {
  EntityWeights out(map.members.size());
  for (std::size_t k = 0; k < map.members.size(); ++k)
    if (!map.members[k].empty()) out[k] = entity_weights(boxes[k], map.members[k], centers, variant);
  return out;
}

/// 1 + sum of member distances to the box centre, in the selected units.
inline double aggregation_denominator(const Box& box, const std::vector<int>& members,
                                      const std::vector<Point2>& centers, DistanceMode mode) {
  const Point2 c = box.center();
  const double unit = mode == DistanceMode::normalized ? box.half_diagonal() : 1.0;
  double sum = 0;
  for (int j : members) sum += distance(centers[static_cast<std::size_t>(j)], c) / unit;
  return 1.0 + sum;
}

/// raw_k = (g_k + sum_j w(j,k) F^SC_j) / (1 + sum_j d(T_j, b_k)), before H^a.
template <typename Scalar>
Tensor2<Scalar> aggregation_input(const EntityBox<Scalar>& entity, const std::vector<int>& members,
                                  const std::vector<double>& weights, const std::vector<Point2>& centers,
                                  const Tensor2<Scalar>& superpixels, DistanceMode mode) {
  if (entity.g.rows() != 1 || entity.g.cols() != superpixels.cols())
    throw DimensionError("aggregate_entity: reference feature must be 1x" + std::to_string(superpixels.cols()));
  if (weights.size() != members.size()) throw DimensionError("aggregate_entity: weights do not match members");
  Tensor2<Scalar> raw = entity.g;
  for (std::size_t r = 0; r < members.size(); ++r)
    raw += static_cast<Scalar>(weights[r]) * superpixels.row(members[r]);
  raw /= static_cast<Scalar>(aggregation_denominator(entity.box, members, centers, mode));
  return raw;
}

/// Entity aggregate F^a_k = H^a(raw_k).
template <typename Scalar>
Tensor2<Scalar> aggregate_entity(const EntityBox<Scalar>& entity, const std::vector<int>& members,
                                 const std::vector<double>& weights, const std::vector<Point2>& centers,
                                 const Tensor2<Scalar>& superpixels, const Mlp<Scalar>& h_a,
                                 DistanceMode mode = DistanceMode::raw) {
  return mlp_forward(aggregation_input(entity, members, weights, centers, superpixels, mode), h_a);
}

/// F^IN_j = F^SC_j + sum over entities containing j of w(j,k) F^a_k.
template <typename Scalar>
Tensor2<Scalar> update_superpixels(const Tensor2<Scalar>& superpixels, const Tensor2<Scalar>& aggregates,
                                   const BoxCenterMap& map, const EntityWeights& weights) {
  if (aggregates.rows() != static_cast<Eigen::Index>(map.members.size()) ||
      (aggregates.rows() > 0 && aggregates.cols() != superpixels.cols()))
    throw DimensionError("update_superpixels: aggregates do not match entities");
  Tensor2<Scalar> out = superpixels;
  for (std::size_t k = 0; k < map.members.size(); ++k)
    for (std::size_t r = 0; r < map.members[k].size(); ++r)
      out.row(map.members[k][r]) += static_cast<Scalar>(weights[k][r]) * aggregates.row(static_cast<Eigen::Index>(k));
  return out;
}

}  // namespace sil
