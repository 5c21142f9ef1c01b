#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "sil/finite_diff.hpp"
#include "sil/pipeline.hpp"

namespace sil {

/// A seeded random SIL instance whose analytic gradient is compared against
/// central differences in 64-bit.
struct GradcheckSetup {
  int height = 6, width = 6, depth = 4;
  int centers_x = 2, centers_y = 2;
  int entities = 2;
  int layers = 1;
  int stages = 1;
  int mlp_hidden = 8;
  int heads = 2;
  bool training = false;  // dropout masks are recorded once and replayed
  double dropout = 0.1;
  DistanceMode distance_mode = DistanceMode::raw;
  WeightVariant weight_variant = WeightVariant::distance;
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double error_floor = 1e-3;  // below this magnitude the check is absolute
};

struct GradcheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t params = 0;
  std::size_t flipped_probes = 0;  // probes where unfrozen labels would change
  double min_margin = std::numeric_limits<double>::infinity();
};

struct GradcheckInstance {
  FeatureGrid<double> grid;
  std::vector<EntityBox<double>> entities;
  SilConfig config;
  SilParams<double> params;
  Tensor2d readout;  // R in the loss sum(R . F^SIL) + 0.5 sum_k |f_k|^2
};

inline GradcheckInstance make_gradcheck_instance(const GradcheckSetup& s) {
  if (s.height < 1 || s.width < 1 || s.depth < 1) throw ArgumentError("gradcheck: empty grid");
  if (s.entities < 0 || s.stages < 1 || s.layers < 0) throw ArgumentError("gradcheck: bad entity/stage/layer count");
  Rng rng(s.seed);
  GradcheckInstance inst;
  inst.grid = FeatureGrid<double>(s.height, s.width, rng.uniform_tensor<double>(Eigen::Index(s.height) * s.width, s.depth, -1, 1));
  for (int k = 0; k < s.entities; ++k) {
    EntityBox<double> e;
    const int w = rng.between(1, s.width), h = rng.between(1, s.height);
    const int x = rng.between(0, s.width - w), y = rng.between(0, s.height - h);
    e.box = {double(x), double(y), double(x + w), double(y + h)};
    e.g = box_pool(inst.grid, e.box);
    inst.entities.push_back(std::move(e));
  }
  StageConfig st;
  st.centers_x = s.centers_x;
  st.centers_y = s.centers_y;
  st.layers = s.layers;
  st.heads = s.heads;
  st.head_dim = std::max(1, s.depth / std::max(1, s.heads));
  st.dropout = s.training ? s.dropout : 0.0;
  st.mlp_hidden = s.mlp_hidden;
  inst.config.stages.assign(static_cast<std::size_t>(s.stages), st);
  inst.config.distance_mode = s.distance_mode;
  inst.config.weight_variant = s.weight_variant;
  inst.params = SilParams<double>::init(inst.config, s.depth, rng);
  // Nonzero biases and LN affine terms so that every parameter is exercised.
  inst.params.visit([&](const std::string& name, Tensor2d& t) {
    if (name.find("bias") != std::string::npos || name.find("gain") != std::string::npos)
      t += rng.uniform_tensor<double>(t.rows(), t.cols(), -0.2, 0.2);
  });
  inst.readout = rng.uniform_tensor<double>(inst.grid.points(), s.depth, -1, 1);
  return inst;
}

inline double gradcheck_loss(const GradcheckInstance& inst, const FeatureGrid<double>& out, Tensor2d* pooled = nullptr) {
  double loss = 0;
  for (Eigen::Index i = 0; i < out.features.size(); ++i) loss += inst.readout.data()[i] * out.features.data()[i];
  Tensor2d f(static_cast<Eigen::Index>(inst.entities.size()), out.depth);
  for (std::size_t k = 0; k < inst.entities.size(); ++k) {
    f.row(static_cast<Eigen::Index>(k)) = box_pool(out, inst.entities[k].box);
    for (Eigen::Index c = 0; c < out.depth; ++c) loss += 0.5 * f(Eigen::Index(k), c) * f(Eigen::Index(k), c);
  }
  if (pooled) *pooled = std::move(f);
  return loss;
}

inline GradcheckReport run_gradcheck(const GradcheckSetup& s) {
  GradcheckInstance inst = make_gradcheck_instance(s);
  Rng drop_rng(s.seed ^ 0x5eedULL);
  const auto ref = sil_network(inst.grid, inst.entities, inst.config, inst.params, s.training, &drop_rng, true);
  Tensor2d pooled;
  gradcheck_loss(inst, ref.output(), &pooled);
  std::vector<Box> boxes;
  for (const auto& e : inst.entities) boxes.push_back(e.box);
  const auto grads = backward(ref, inst.config, inst.params, inst.readout, boxes, pooled);

  GradcheckReport report;
  for (const auto& st : ref.stages)
    for (double m : assignment_margins(st.input, st.centers.init_features, st.assign))
      report.min_margin = std::min(report.min_margin, m);

  const Eigen::VectorXd p0 = flatten(inst.params);
  const Eigen::VectorXd analytic = flatten(grads);
  report.params = static_cast<std::size_t>(p0.size());

  SilParams<double> probe = inst.params;
  auto loss_at = [&](const Eigen::VectorXd& p) {
    unflatten(probe, p);
    const auto net = sil_network(inst.grid, inst.entities, inst.config, probe, s.training, nullptr, false, &ref);
    if (inst.config.stages.size() > 1 && !s.training) {
      const auto live = sil_network(inst.grid, inst.entities, inst.config, probe, false, nullptr);
      for (std::size_t st = 0; st < live.stages.size(); ++st)
        if (live.stages[st].assign.labels != ref.stages[st].assign.labels) {
          ++report.flipped_probes;
          break;
        }
    }
    return gradcheck_loss(inst, net.output());
  };
  const Eigen::VectorXd numeric = finite_diff_grad(loss_at, p0, s.eps);

  std::vector<std::string> names;
  inst.params.visit([&](const std::string& name, const Tensor2d& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) names.push_back(name);
  });
  for (Eigen::Index i = 0; i < p0.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i], s.error_floor);
    if (e > report.max_rel_error) {
      report.max_rel_error = e;
      report.worst_param = names[static_cast<std::size_t>(i)];
    }
  }
  return report;
}

}  // namespace sil
