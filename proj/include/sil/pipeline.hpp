#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "sil/clustering.hpp"
#include "sil/encoder.hpp"
#include "sil/interaction.hpp"
#include "sil/mlp.hpp"

namespace sil {

/// Hyperparameters of one SIL block.
struct StageConfig {
  int centers_x = 7;
  int centers_y = 7;
  int knn = 0;        // 0: max(1, M / C)
  int layers = 2;     // encoder depth L
  int heads = 0;      // 0: max(1, D / head_dim)
  int head_dim = 32;  // D'
  double dropout = 0.1;
  int mlp_hidden = 1024;
  double dispatch_init_scale = 1.0;  // scales the initial H'' output layer

  int centers() const { return centers_x * centers_y; }
  int resolved_heads(int depth) const { return heads > 0 ? heads : std::max(1, depth / head_dim); }
};

struct SilConfig {
  std::vector<StageConfig> stages{StageConfig{}};
  DistanceMode distance_mode = DistanceMode::raw;
  WeightVariant weight_variant = WeightVariant::distance;
  bool cross_entity = true;  // false skips the encoder entirely
  int embed_dim = 0;         // when > 0, the input depth must equal it

  /// One block, 7x7 centres, 2 encoder layers, 32-wide heads, dropout 0.1,
  /// 256-wide features and 1024-wide MLP hidden layers.
  static SilConfig reference_defaults() {
    SilConfig c;
    c.embed_dim = 256;
    return c;
  }

  void validate(int depth) const {
    if (stages.empty()) throw ArgumentError("config: at least one stage is required");
    if (embed_dim > 0 && depth != embed_dim)
      throw ArgumentError("config: grid depth " + std::to_string(depth) + " does not match embed_dim " +
                          std::to_string(embed_dim));
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto& st = stages[s];
      const std::string at = "config: stage " + std::to_string(s) + ": ";
      if (st.centers_x < 1 || st.centers_y < 1) throw ArgumentError(at + "centre counts must be >= 1");
      if (st.knn < 0) throw ArgumentError(at + "knn must be >= 0");
      if (st.layers < 0) throw ArgumentError(at + "layers must be >= 0");
      if (st.heads < 0 || st.head_dim < 1) throw ArgumentError(at + "heads must be >= 0 and head_dim >= 1");
      if (st.dropout < 0 || st.dropout >= 1) throw ArgumentError(at + "dropout must lie in [0, 1)");
      if (st.mlp_hidden < 1) throw ArgumentError(at + "mlp_hidden must be >= 1");
    }
  }
};

/// Learnable weights of one block.
template <typename Scalar>
struct StageParams {
  Mlp<Scalar> h_prime;  // centre update
  Mlp<Scalar> h_a;      // entity aggregate
  Mlp<Scalar> h_dd;     // dispatch
  std::vector<AttentionLayerParams<Scalar>> encoder;

  template <typename Visitor>
  void visit(const std::string& prefix, Visitor&& v) {
    auto mlp = [&](const std::string& name, Mlp<Scalar>& m) {
      for (std::size_t l = 0; l < m.layers.size(); ++l) {
        v(prefix + name + "." + std::to_string(l) + ".weight", m.layers[l].weight);
        v(prefix + name + "." + std::to_string(l) + ".bias", m.layers[l].bias);
      }
    };
    mlp("h_prime", h_prime);
    mlp("h_a", h_a);
    mlp("h_dd", h_dd);
    for (std::size_t l = 0; l < encoder.size(); ++l) encoder[l].visit(prefix + "encoder." + std::to_string(l) + ".", v);
  }
};

template <typename Scalar>
struct SilParams {
  std::vector<StageParams<Scalar>> stages;

  template <typename Visitor>
  void visit(Visitor&& v) {
    for (std::size_t s = 0; s < stages.size(); ++s) stages[s].visit("stage" + std::to_string(s) + ".", v);
  }
  template <typename Visitor>
  void visit(Visitor&& v) const {
    const_cast<SilParams*>(this)->visit([&](const std::string& name, Tensor2<Scalar>& t) {
      v(name, static_cast<const Tensor2<Scalar>&>(t));
    });
  }

  std::size_t size() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor2<Scalar>& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  /// Seeded initialisation for a grid of the given depth.
  static SilParams init(const SilConfig& config, int depth, Rng& rng) {
    config.validate(depth);
    SilParams p;
    const Eigen::Index d = depth;
    for (const auto& st : config.stages) {
      StageParams<Scalar> sp;
      const Eigen::Index hidden = st.mlp_hidden;
      sp.h_prime = Mlp<Scalar>::random({d, hidden, d}, rng);
      sp.h_a = Mlp<Scalar>::random({d, hidden, d}, rng);
      sp.h_dd = Mlp<Scalar>::random({d, hidden, d}, rng, st.dispatch_init_scale);
      for (int l = 0; l < st.layers; ++l)
        sp.encoder.push_back(AttentionLayerParams<Scalar>::random(d, st.resolved_heads(depth), st.head_dim, st.dropout, rng));
      p.stages.push_back(std::move(sp));
    }
    return p;
  }

  /// Zero tensors of identical shapes; the gradient accumulator.
  static SilParams zeros_like(const SilParams& like) {
    SilParams p = like;
    p.visit([](const std::string&, Tensor2<Scalar>& t) { t.setZero(); });
    return p;
  }
};

/// Gradients share the parameter layout.
template <typename Scalar>
using SilGradients = SilParams<Scalar>;

template <typename Scalar>
Eigen::VectorXd flatten(const SilParams<Scalar>& p) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(p.size()));
  Eigen::Index at = 0;
  p.visit([&](const std::string&, const Tensor2<Scalar>& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) out[at++] = static_cast<double>(t.data()[i]);
  });
  return out;
}

template <typename Scalar>
void unflatten(SilParams<Scalar>& p, const Eigen::VectorXd& v) {
  if (static_cast<std::size_t>(v.size()) != p.size()) throw DimensionError("unflatten: size mismatch");
  Eigen::Index at = 0;
  p.visit([&](const std::string&, Tensor2<Scalar>& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(v[at++]);
  });
}

/// Everything one block computed. Discrete structures are always kept (they
/// are the block's diagnostics); layer caches only when requested.
template <typename Scalar>
struct BlockTrace {
  FeatureGrid<Scalar> input;
  FeatureGrid<Scalar> output;
  CenterSet<Scalar> centers;
  std::vector<std::vector<int>> knn;
  ClusterAssignment assign;
  std::vector<Scalar> similarity;  // clamped, per point
  std::vector<Scalar> pool_denominator;
  BoxCenterMap map;
  EntityWeights weights;
  std::vector<double> aggregate_denominator;
  Tensor2<Scalar> aggregates;  // F^a, N x D
  Tensor2<Scalar> interacted;  // F^IN
  Tensor2<Scalar> cross;       // F^CR
  Tensor2<Scalar> dispatched;  // H''(F^CR)
  DropoutMasks<Scalar> masks;

  bool cached = false;
  MlpCache<Scalar> h_prime_cache, h_a_cache, h_dd_cache;
  EncoderCache<Scalar> encoder_cache;
};

template <typename Scalar>
struct NetworkTrace {
  std::vector<BlockTrace<Scalar>> stages;
  const FeatureGrid<Scalar>& output() const { return stages.back().output; }
};

/// F^SIL_i = F_i + weight_i * dispatched_{label_i}.
template <typename Scalar>
Tensor2<Scalar> dispatch_rows(const FeatureGrid<Scalar>& grid, const Tensor2<Scalar>& dispatched,
                              const ClusterAssignment& assign, const std::vector<Scalar>& weight) {
  Tensor2<Scalar> out = grid.features;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const std::size_t u = static_cast<std::size_t>(i);
    out.row(i) += weight[u] * dispatched.row(assign.labels[u]);
  }
  return out;
}

/// Writes the superpixel features back to their points:
/// F^SIL_i = F_i + s+(F_i, F^c_j) H''(F^CR_j), j = label_i, with similarity
/// measured against the pre-update centre features.
template <typename Scalar>
FeatureGrid<Scalar> dispatch(const FeatureGrid<Scalar>& grid, const Tensor2<Scalar>& init_features,
                             const Tensor2<Scalar>& cross, const ClusterAssignment& assign, const Mlp<Scalar>& h_dd) {
  if (cross.rows() != init_features.rows()) throw DimensionError("dispatch: F^CR and F^c row counts differ");
  const auto s = clamped_similarity(grid, init_features, assign);
  return FeatureGrid<Scalar>(grid.height, grid.width, dispatch_rows(grid, mlp_forward(cross, h_dd), assign, s));
}

/// One SIL block: cluster, intra-entity interaction, cross-entity attention,
/// dispatch. When `frozen` is given, its centres, neighbour sets, labels,
/// similarity weights and dropout masks are reused instead of recomputed, which
/// makes the output a smooth function of the parameters.
template <typename Scalar>
BlockTrace<Scalar> sil_block(const FeatureGrid<Scalar>& grid, const std::vector<EntityBox<Scalar>>& entities,
                             const StageConfig& stage, const SilConfig& config, const StageParams<Scalar>& params,
                             bool training, Rng* rng, bool keep_cache = false,
                             const BlockTrace<Scalar>* frozen = nullptr) {
  BlockTrace<Scalar> t;
  t.input = grid;
  t.cached = keep_cache;
  const Eigen::Index dim = grid.depth;
  for (std::size_t k = 0; k < entities.size(); ++k)
    if (entities[k].g.rows() != 1 || entities[k].g.cols() != dim)
      throw DimensionError("sil_block: entity " + std::to_string(k) + " reference feature must be 1x" +
                           std::to_string(dim));

  // superpixel clustering
  if (frozen) {
    t.centers.coords = frozen->centers.coords;
    t.knn = frozen->knn;
  } else {
    t.centers.coords = propose_centers(grid.height, grid.width, stage.centers_y, stage.centers_x);
    const int n_k = stage.knn > 0 ? stage.knn : default_knn(grid.points(), t.centers.count());
    t.knn = nearest_points(grid, t.centers.coords, n_k);
  }
  t.centers.init_features = mean_of_rows(grid.features, t.knn);
  t.assign = frozen ? frozen->assign : assign_points(grid, t.centers.init_features);
  t.similarity = frozen ? frozen->similarity : clamped_similarity(grid, t.centers.init_features, t.assign);
  const Tensor2<Scalar> pooled = pool_clusters(grid, t.centers.init_features, t.assign, t.similarity, &t.pool_denominator);
  t.centers.updated_features = mlp_forward(pooled, params.h_prime, keep_cache ? &t.h_prime_cache : nullptr);

  // intra-entity interaction
  t.map = filter_centers(entities, t.centers.coords);
  std::vector<Box> boxes;
  for (const auto& e : entities) boxes.push_back(e.box);
  t.weights = all_entity_weights(boxes, t.map, t.centers.coords, config.weight_variant);
  const auto n = static_cast<Eigen::Index>(entities.size());
  t.aggregates = Tensor2<Scalar>::Zero(n, dim);
  if (n > 0) {
    Tensor2<Scalar> raw(n, dim);
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto u = static_cast<std::size_t>(k);
      raw.row(k) = aggregation_input(entities[u], t.map.members[u], t.weights[u], t.centers.coords,
                                     t.centers.updated_features, config.distance_mode);
      t.aggregate_denominator.push_back(
          aggregation_denominator(entities[u].box, t.map.members[u], t.centers.coords, config.distance_mode));
    }
    t.aggregates = mlp_forward(raw, params.h_a, keep_cache ? &t.h_a_cache : nullptr);
  }
  t.interacted = update_superpixels(t.centers.updated_features, t.aggregates, t.map, t.weights);

  // cross-entity interaction
  if (config.cross_entity) {
    t.cross = encoder_forward(t.interacted, params.encoder, training, rng, keep_cache ? &t.encoder_cache : nullptr,
                              &t.masks, frozen ? &frozen->masks : nullptr);
  } else {
    t.cross = t.interacted;
  }

  t.dispatched = mlp_forward(t.cross, params.h_dd, keep_cache ? &t.h_dd_cache : nullptr);
  t.output = FeatureGrid<Scalar>(grid.height, grid.width, dispatch_rows(grid, t.dispatched, t.assign, t.similarity));
  return t;
}

/// Sequential stack of blocks; each stage re-clusters the previous output.
template <typename Scalar>
NetworkTrace<Scalar> sil_network(const FeatureGrid<Scalar>& grid, const std::vector<EntityBox<Scalar>>& entities,
                                 const SilConfig& config, const SilParams<Scalar>& params, bool training, Rng* rng,
                                 bool keep_cache = false, const NetworkTrace<Scalar>* frozen = nullptr) {
  config.validate(grid.depth);
  if (params.stages.size() != config.stages.size())
    throw DimensionError("sil_network: " + std::to_string(params.stages.size()) + " parameter stages for " +
                         std::to_string(config.stages.size()) + " configured stages");
  if (frozen && frozen->stages.size() != config.stages.size())
    throw StateError("sil_network: frozen trace has the wrong number of stages");
  NetworkTrace<Scalar> net;
  const FeatureGrid<Scalar>* current = &grid;
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    net.stages.push_back(sil_block(*current, entities, config.stages[s], config, params.stages[s], training, rng,
                                   keep_cache, frozen ? &frozen->stages[s] : nullptr));
    current = &net.stages.back().output;
    if (!all_finite(current->features))
      throw NumericError("sil_network: stage " + std::to_string(s) + " produced a non-finite feature");
  }
  return net;
}

/// Points whose pixel centres lie in the half-open box. Falls back to the
/// single pixel nearest the box centre when none does.
template <typename Scalar>
std::vector<int> box_points(const FeatureGrid<Scalar>& grid, const Box& box) {
  if (!box.valid()) throw ArgumentError("box_pool: empty box");
  if (box.x2 <= 0 || box.y2 <= 0 || box.x1 >= grid.width || box.y1 >= grid.height)
    throw ArgumentError("box_pool: box lies entirely outside the grid");
  std::vector<int> pts;
  const int x_lo = std::max(0, static_cast<int>(std::floor(box.x1 - 0.5)));
  const int x_hi = std::min(grid.width - 1, static_cast<int>(std::ceil(box.x2)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(box.y1 - 0.5)));
  const int y_hi = std::min(grid.height - 1, static_cast<int>(std::ceil(box.y2)));
  for (int y = y_lo; y <= y_hi; ++y)
    for (int x = x_lo; x <= x_hi; ++x)
      if (box.contains({x + 0.5, y + 0.5})) pts.push_back(y * grid.width + x);
  if (pts.empty()) {
    const Point2 c = box.center();
    // nearest pixel centre per axis; halfway cases go to the lower index
    const int x = std::clamp(static_cast<int>(std::ceil(c.x - 1.0)), 0, grid.width - 1);
    const int y = std::clamp(static_cast<int>(std::ceil(c.y - 1.0)), 0, grid.height - 1);
    pts.push_back(y * grid.width + x);
  }
  return pts;
}

/// Mean feature row over the box.
template <typename Scalar>
Tensor2<Scalar> box_pool(const FeatureGrid<Scalar>& grid, const Box& box) {
  const auto pts = box_points(grid, box);
  Tensor2<Scalar> out = Tensor2<Scalar>::Zero(1, grid.depth);
  for (int i : pts) out += grid.features.row(i);
  out /= static_cast<Scalar>(pts.size());
  return out;
}

/// Backward of one block: accumulates into grads and returns dL/d(input).
/// Labels, neighbour sets, similarity weights and entity weights are constants.
template <typename Scalar>
Tensor2<Scalar> block_backward(const BlockTrace<Scalar>& t, const SilConfig& config, const StageParams<Scalar>& params,
                               const Tensor2<Scalar>& d_out, StageParams<Scalar>& grads) {
  if (!t.cached) throw StateError("backward: forward pass ran without state caching");
  const Eigen::Index m = t.input.points(), dim = t.input.depth, c = t.centers.count();
  if (d_out.rows() != m || d_out.cols() != dim) throw DimensionError("backward: upstream gradient must be " + shape_str(m, dim));

  Tensor2<Scalar> d_in = d_out;
  Tensor2<Scalar> d_dispatched = Tensor2<Scalar>::Zero(c, dim);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto u = static_cast<std::size_t>(i);
    d_dispatched.row(t.assign.labels[u]) += t.similarity[u] * d_out.row(i);
  }
  const Tensor2<Scalar> d_cross = mlp_backward(params.h_dd, t.h_dd_cache, d_dispatched, grads.h_dd);
  const Tensor2<Scalar> d_interacted =
      config.cross_entity ? encoder_backward(params.encoder, t.encoder_cache, d_cross, grads.encoder) : d_cross;

  Tensor2<Scalar> d_updated = d_interacted;
  const auto n = static_cast<Eigen::Index>(t.map.members.size());
  if (n > 0) {
    Tensor2<Scalar> d_agg = Tensor2<Scalar>::Zero(n, dim);
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto& mem = t.map.members[static_cast<std::size_t>(k)];
      for (std::size_t r = 0; r < mem.size(); ++r)
        d_agg.row(k) += static_cast<Scalar>(t.weights[static_cast<std::size_t>(k)][r]) * d_interacted.row(mem[r]);
    }
    const Tensor2<Scalar> d_raw = mlp_backward(params.h_a, t.h_a_cache, d_agg, grads.h_a);
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto u = static_cast<std::size_t>(k);
      const auto& mem = t.map.members[u];
      for (std::size_t r = 0; r < mem.size(); ++r)
        d_updated.row(mem[r]) += static_cast<Scalar>(t.weights[u][r] / t.aggregate_denominator[u]) * d_raw.row(k);
    }
  }

  const Tensor2<Scalar> d_pooled = mlp_backward(params.h_prime, t.h_prime_cache, d_updated, grads.h_prime);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto u = static_cast<std::size_t>(i);
    const int j = t.assign.labels[u];
    d_in.row(i) += (t.similarity[u] / t.pool_denominator[static_cast<std::size_t>(j)]) * d_pooled.row(j);
  }
  for (Eigen::Index j = 0; j < c; ++j) {
    const auto& nb = t.knn[static_cast<std::size_t>(j)];
    const Scalar share = Scalar(1) / (t.pool_denominator[static_cast<std::size_t>(j)] * static_cast<Scalar>(nb.size()));
    for (int i : nb) d_in.row(i) += share * d_pooled.row(j);
  }
  return d_in;
}

/// Gradients of a loss with respect to every parameter, given dL/dF^SIL and,
/// optionally, dL/df_k for features box-pooled from F^SIL. `d_input`
/// receives dL/dF for the network input when non-null.
template <typename Scalar>
SilGradients<Scalar> backward(const NetworkTrace<Scalar>& trace, const SilConfig& config, const SilParams<Scalar>& params,
                              const Tensor2<Scalar>& d_output, const std::vector<Box>& pooled_boxes = {},
                              const Tensor2<Scalar>& d_pooled = Tensor2<Scalar>(),
                              Tensor2<Scalar>* d_input = nullptr) {
  if (trace.stages.empty()) throw StateError("backward: empty trace");
  if (static_cast<Eigen::Index>(pooled_boxes.size()) != d_pooled.rows())
    throw DimensionError("backward: one pooled gradient row per box is required");
  const auto& out = trace.output();
  Tensor2<Scalar> g = d_output.size() == 0 ? Tensor2<Scalar>::Zero(out.points(), out.depth).eval() : d_output;
  for (std::size_t k = 0; k < pooled_boxes.size(); ++k) {
    const auto pts = box_points(out, pooled_boxes[k]);
    const Scalar share = Scalar(1) / static_cast<Scalar>(pts.size());
    for (int i : pts) g.row(i) += share * d_pooled.row(static_cast<Eigen::Index>(k));
  }
  SilGradients<Scalar> grads = SilParams<Scalar>::zeros_like(params);
  for (std::size_t s = trace.stages.size(); s-- > 0;)
    g = block_backward(trace.stages[s], config, params.stages[s], g, grads.stages[s]);
  if (d_input) *d_input = std::move(g);
  return grads;
}

}  // namespace sil
