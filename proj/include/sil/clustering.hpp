#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "sil/mlp.hpp"
#include "sil/tensor.hpp"

namespace sil {

/// 2-D position in pixel units; (0,0) is the top-left image corner.
struct Point2 {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// H x W x D feature map seen as M = H*W points. Point i sits at the centre of
/// pixel (i mod W, i div W).
template <typename Scalar>
struct FeatureGrid {
  int height = 0;
  int width = 0;
  int depth = 0;
  Tensor2<Scalar> features;  // M x D, row-major over (y, x)

  FeatureGrid() = default;
  FeatureGrid(int h, int w, int d) : height(h), width(w), depth(d), features(Tensor2<Scalar>::Zero(Eigen::Index(h) * w, d)) {
    if (h <= 0 || w <= 0 || d <= 0) throw ArgumentError("FeatureGrid: dimensions must be positive");
  }
  FeatureGrid(int h, int w, Tensor2<Scalar> f) : height(h), width(w), depth(static_cast<int>(f.cols())), features(std::move(f)) {
    if (h <= 0 || w <= 0 || depth <= 0) throw ArgumentError("FeatureGrid: dimensions must be positive");
    if (features.rows() != Eigen::Index(h) * w)
      throw DimensionError("FeatureGrid: " + std::to_string(features.rows()) + " rows for a " +
                           std::to_string(h) + "x" + std::to_string(w) + " grid");
  }

  Eigen::Index points() const { return Eigen::Index(height) * width; }

  Point2 coord(Eigen::Index i) const {
    return {static_cast<double>(i % width) + 0.5, static_cast<double>(i / width) + 0.5};
  }
};

/// Clustering centres: coordinates plus the feature rows they accumulate.
template <typename Scalar>
struct CenterSet {
  std::vector<Point2> coords;
  Tensor2<Scalar> init_features;     // C x D, KNN averages
  Tensor2<Scalar> updated_features;  // C x D, after pooling and H'

  Eigen::Index count() const { return static_cast<Eigen::Index>(coords.size()); }
};

/// Point-to-centre labels.
struct ClusterAssignment {
  std::vector<int> labels;
};

/// c_x * c_y centres spread evenly over the image, enumerated row-major.
inline std::vector<Point2> propose_centers(int height, int width, int c_y, int c_x) {
  if (height <= 0 || width <= 0) throw ArgumentError("propose_centers: empty grid");
  if (c_x < 1 || c_y < 1) throw ArgumentError("propose_centers: need at least one centre per axis");
  if (c_x > width || c_y > height)
    throw ArgumentError("propose_centers: " + std::to_string(c_x) + "x" + std::to_string(c_y) +
                        " centres do not fit a " + std::to_string(width) + "x" +
                        std::to_string(height) + " grid");
  std::vector<Point2> out;
  out.reserve(static_cast<std::size_t>(c_x) * c_y);
  for (int v = 0; v < c_y; ++v)
    for (int u = 0; u < c_x; ++u)
      out.push_back({(u + 0.5) * width / c_x, (v + 0.5) * height / c_y});
  return out;
}

/// Default neighbourhood size: one cell's worth of points per centre.
inline int default_knn(Eigen::Index points, Eigen::Index centers) {
  return static_cast<int>(std::max<Eigen::Index>(1, points / std::max<Eigen::Index>(1, centers)));
}

/// Indices of the n_k points nearest to each centre, nearest first. Equal
/// distances resolve to the lower point index.
template <typename Scalar>
std::vector<std::vector<int>> nearest_points(const FeatureGrid<Scalar>& grid,
                                             const std::vector<Point2>& centers, int n_k) {
  const Eigen::Index m = grid.points();
  if (n_k < 1 || n_k > m)
    throw ArgumentError("nearest_points: n_k=" + std::to_string(n_k) + " outside [1, " +
                        std::to_string(m) + "]");
  std::vector<std::vector<int>> out(centers.size());
  std::vector<std::pair<double, int>> d(static_cast<std::size_t>(m));
  for (std::size_t j = 0; j < centers.size(); ++j) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const Point2 q = grid.coord(i);
      const double dx = q.x - centers[j].x;
      const double dy = q.y - centers[j].y;
      d[static_cast<std::size_t>(i)] = {dx * dx + dy * dy, static_cast<int>(i)};
    }
    std::partial_sort(d.begin(), d.begin() + n_k, d.end());
    out[j].reserve(static_cast<std::size_t>(n_k));
    for (int r = 0; r < n_k; ++r) out[j].push_back(d[static_cast<std::size_t>(r)].second);
  }
  return out;
}

/// Row means per group, summed in ascending index order so that equal groups
/// give bitwise-equal rows.
template <typename Scalar>
Tensor2<Scalar> mean_of_rows(const Tensor2<Scalar>& f, const std::vector<std::vector<int>>& groups) {
  Tensor2<Scalar> out = Tensor2<Scalar>::Zero(static_cast<Eigen::Index>(groups.size()), f.cols());
  std::vector<int> order;
  for (std::size_t j = 0; j < groups.size(); ++j) {
    order = groups[j];
    std::sort(order.begin(), order.end());
    for (int i : order) out.row(static_cast<Eigen::Index>(j)) += f.row(i);
    out.row(static_cast<Eigen::Index>(j)) /= static_cast<Scalar>(groups[j].size());
  }
  return out;
}

/// Centre features as the mean of each centre's n_k spatially nearest points.
template <typename Scalar>
Tensor2<Scalar> init_center_features(const FeatureGrid<Scalar>& grid, const std::vector<Point2>& centers,
                                     int n_k, std::vector<std::vector<int>>* knn_out = nullptr) {
  auto knn = nearest_points(grid, centers, n_k);
  Tensor2<Scalar> fc = mean_of_rows(grid.features, knn);
  if (knn_out) *knn_out = std::move(knn);
  return fc;
}

/// Each point goes to the centre of highest cosine similarity; the lowest
/// centre index wins ties.
template <typename Scalar>
ClusterAssignment assign_points(const FeatureGrid<Scalar>& grid, const Tensor2<Scalar>& center_features) {
  if (center_features.rows() < 1) throw ArgumentError("assign_points: no centres");
  const Tensor2<Scalar> sim = cosine_sim(grid.features, center_features);
  ClusterAssignment a;
  a.labels.resize(static_cast<std::size_t>(grid.points()));
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    int best = 0;
    for (Eigen::Index j = 1; j < sim.cols(); ++j)
      if (sim(i, j) > sim(i, best)) best = static_cast<int>(j);
    a.labels[static_cast<std::size_t>(i)] = best;
  }
  return a;
}

/// Gap between the winning similarity and the best competing one, per point.
/// +inf when there is a single centre.
template <typename Scalar>
std::vector<double> assignment_margins(const FeatureGrid<Scalar>& grid, const Tensor2<Scalar>& center_features,
                                       const ClusterAssignment& assign) {
  const Tensor2<Scalar> sim = cosine_sim(grid.features, center_features);
  std::vector<double> out(static_cast<std::size_t>(sim.rows()), std::numeric_limits<double>::infinity());
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    const int l = assign.labels[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < sim.cols(); ++j)
      if (j != l)
        out[static_cast<std::size_t>(i)] =
            std::min(out[static_cast<std::size_t>(i)], double(sim(i, l)) - double(sim(i, j)));
  }
  return out;
}

/// s+(i) = clamp(sim(F_i, F^c_label(i)), 0, 1). This is the aggregation and
/// dispatch weight; the argmax itself always uses raw similarity.
template <typename Scalar>
std::vector<Scalar> clamped_similarity(const FeatureGrid<Scalar>& grid, const Tensor2<Scalar>& center_features,
                                       const ClusterAssignment& assign) {
  if (assign.labels.size() != static_cast<std::size_t>(grid.points()))
    throw DimensionError("clamped_similarity: assignment does not match grid");
  const auto point_norm = row_norms(grid.features);
  const auto center_norm = row_norms(center_features);
  std::vector<Scalar> s(assign.labels.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int j = assign.labels[i];
    if (j < 0 || j >= center_features.rows()) throw DimensionError("clamped_similarity: label out of range");
    const Scalar ni = point_norm[i], nj = center_norm[static_cast<std::size_t>(j)];
    if (ni < Scalar(kZeroNorm) || nj < Scalar(kZeroNorm)) {
      s[i] = 0;
      continue;
    }
    Scalar dot = 0;
    for (Eigen::Index k = 0; k < center_features.cols(); ++k)
      dot += grid.features(static_cast<Eigen::Index>(i), k) * center_features(j, k);
    s[i] = std::clamp(dot / (ni * nj), Scalar(0), Scalar(1));
  }
  return s;
}

/// Similarity-weighted cluster average seeded with the centre feature:
///   pooled_j = (F^c_j + sum_{label=j} s+_i F_i) / (1 + sum_{label=j} s+_i).
/// The denominators are written to `denominators` when given; each is >= 1.
template <typename Scalar>
Tensor2<Scalar> pool_clusters(const FeatureGrid<Scalar>& grid, const Tensor2<Scalar>& center_features,
                              const ClusterAssignment& assign, const std::vector<Scalar>& weight,
                              std::vector<Scalar>* denominators = nullptr) {
  Tensor2<Scalar> num = center_features;
  std::vector<Scalar> den(static_cast<std::size_t>(center_features.rows()), Scalar(1));
  for (std::size_t i = 0; i < assign.labels.size(); ++i) {
    const int j = assign.labels[i];
    num.row(j) += weight[i] * grid.features.row(static_cast<Eigen::Index>(i));
    den[static_cast<std::size_t>(j)] += weight[i];
  }
  for (Eigen::Index j = 0; j < num.rows(); ++j) num.row(j) /= den[static_cast<std::size_t>(j)];
  if (denominators) *denominators = std::move(den);
  return num;
}

/// Updated superpixel features F^SC = H'(pooled).
template <typename Scalar>
Tensor2<Scalar> update_centers(const FeatureGrid<Scalar>& grid, const CenterSet<Scalar>& centers,
                               const ClusterAssignment& assign, const Mlp<Scalar>& h_prime) {
  const auto s = clamped_similarity(grid, centers.init_features, assign);
  return mlp_forward(pool_clusters(grid, centers.init_features, assign, s), h_prime);
}

/// Points per cluster.
inline std::vector<int> cluster_sizes(const ClusterAssignment& assign, Eigen::Index centers) {
  std::vector<int> sizes(static_cast<std::size_t>(centers), 0);
  for (int l : assign.labels) ++sizes[static_cast<std::size_t>(l)];
  return sizes;
}

}  // namespace sil
