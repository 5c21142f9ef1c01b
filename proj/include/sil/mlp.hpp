#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "sil/rng.hpp"
#include "sil/tensor.hpp"

namespace sil {

enum class Activation { relu, identity };

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw ArgumentError("unknown activation '" + std::string(name) + "'");
}

/// y = x * weight + bias, weight is in x out, bias is 1 x out.
template <typename Scalar>
struct DenseLayer {
  Tensor2<Scalar> weight;
  Tensor2<Scalar> bias;
};

/// Row-wise perceptron: affine -> activation for every hidden layer, plain
/// affine at the output.
template <typename Scalar>
struct Mlp {
  std::vector<DenseLayer<Scalar>> layers;
  Activation hidden = Activation::relu;

  Eigen::Index in_dim() const { return layers.empty() ? 0 : layers.front().weight.rows(); }
  Eigen::Index out_dim() const { return layers.empty() ? 0 : layers.back().weight.cols(); }

  static Mlp identity(Eigen::Index dim) {
    Mlp m;
    m.layers.push_back({Tensor2<Scalar>::Identity(dim, dim), Tensor2<Scalar>::Zero(1, dim)});
    return m;
  }

  /// Same shapes as `like`, every coefficient zero. Used as a gradient buffer.
  static Mlp zeros_like(const Mlp& like) {
    Mlp m;
    m.hidden = like.hidden;
    for (const auto& l : like.layers)
      m.layers.push_back({Tensor2<Scalar>::Zero(l.weight.rows(), l.weight.cols()),
                          Tensor2<Scalar>::Zero(1, l.bias.cols())});
    return m;
  }

  /// Xavier-uniform weights, zero biases. The output layer is multiplied by
  /// out_scale.
  static Mlp random(const std::vector<Eigen::Index>& dims, Rng& rng, double out_scale = 1.0) {
    if (dims.size() < 2) throw ArgumentError("Mlp::random: need at least input and output dims");
    Mlp m;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const double limit = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
      const double scale = (l + 2 == dims.size()) ? out_scale : 1.0;
      Tensor2<Scalar> w = rng.uniform_tensor<Scalar>(dims[l], dims[l + 1], -limit, limit);
      w *= static_cast<Scalar>(scale);
      m.layers.push_back({std::move(w), Tensor2<Scalar>::Zero(1, dims[l + 1])});
    }
    return m;
  }
};

/// Layer inputs and pre-activations recorded by mlp_forward.
template <typename Scalar>
struct MlpCache {
  std::vector<Tensor2<Scalar>> inputs;
  std::vector<Tensor2<Scalar>> pre;
};

template <typename Scalar>
Tensor2<Scalar> mlp_forward(const Tensor2<Scalar>& x, const Mlp<Scalar>& mlp,
                            MlpCache<Scalar>* cache = nullptr) {
  if (mlp.layers.empty()) throw ArgumentError("mlp_forward: no layers");
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Tensor2<Scalar> h = x;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& layer = mlp.layers[l];
    if (layer.bias.rows() != 1 || layer.bias.cols() != layer.weight.cols())
      throw DimensionError("mlp_forward: bias of layer " + std::to_string(l) + " is " +
                           shape_str(layer.bias.rows(), layer.bias.cols()));
    Tensor2<Scalar> z = matmul(h, layer.weight);
    for (Eigen::Index i = 0; i < z.rows(); ++i) z.row(i) += layer.bias;
    if (cache) {
      cache->inputs.push_back(h);
      cache->pre.push_back(z);
    }
    const bool last = l + 1 == mlp.layers.size();
    h = (!last && mlp.hidden == Activation::relu) ? relu(z) : std::move(z);
  }
  return h;
}

/// Accumulates parameter gradients into grads and returns dL/dx.
template <typename Scalar>
Tensor2<Scalar> mlp_backward(const Mlp<Scalar>& mlp, const MlpCache<Scalar>& cache,
                             const Tensor2<Scalar>& dy, Mlp<Scalar>& grads) {
  if (cache.inputs.size() != mlp.layers.size())
    throw StateError("mlp_backward: forward cache does not match the network");
  Tensor2<Scalar> g = dy;
  for (std::size_t l = mlp.layers.size(); l-- > 0;) {
    const bool last = l + 1 == mlp.layers.size();
    if (!last && mlp.hidden == Activation::relu) {
      const auto& z = cache.pre[l];
      for (Eigen::Index i = 0; i < g.size(); ++i)
        if (!(z.data()[i] > 0)) g.data()[i] = 0;
    }
    grads.layers[l].weight += matmul_tn(cache.inputs[l], g);
    for (Eigen::Index i = 0; i < g.rows(); ++i) grads.layers[l].bias += g.row(i);
    g = matmul_nt(g, mlp.layers[l].weight);
  }
  return g;
}

}  // namespace sil
