#pragma once

#include <cmath>
#include <vector>

#include "sil/rng.hpp"
#include "sil/tensor.hpp"

namespace sil {

inline constexpr double kLayerNormEps = 1e-5;

/// One post-norm transformer encoder layer over superpixel rows:
///   Y1 = LN1(X + drop(concat_h(softmax(Q_h K_hᵀ / sqrt(D')) V_h) W^O))
///   Y2 = LN2(Y1 + drop(relu(Y1 W1 + b1) W2 + b2))
/// There is no positional encoding, so the layer is permutation-equivariant.
template <typename Scalar>
struct AttentionLayerParams {
  std::vector<Tensor2<Scalar>> w_q, w_k, w_v;  // per head, D x D'
  Tensor2<Scalar> w_o;                         // h*D' x D
  Tensor2<Scalar> ff1_w, ff1_b;                // D x 4D, 1 x 4D
  Tensor2<Scalar> ff2_w, ff2_b;                // 4D x D, 1 x D
  Tensor2<Scalar> ln1_gain, ln1_bias;
  Tensor2<Scalar> ln2_gain, ln2_bias;
  double dropout = 0.1;

  int heads() const { return static_cast<int>(w_q.size()); }
  Eigen::Index head_dim() const { return w_q.empty() ? 0 : w_q.front().cols(); }
  Eigen::Index model_dim() const { return w_o.cols(); }

  static AttentionLayerParams random(Eigen::Index dim, int heads, Eigen::Index head_dim, double dropout, Rng& rng) {
    if (heads < 1 || head_dim < 1) throw ArgumentError("AttentionLayerParams: heads and head_dim must be >= 1");
    if (dropout < 0 || dropout >= 1) throw ArgumentError("AttentionLayerParams: dropout must lie in [0, 1)");
    AttentionLayerParams p;
    p.dropout = dropout;
    const double lim_qkv = std::sqrt(6.0 / double(dim + head_dim));
    for (int h = 0; h < heads; ++h) {
      p.w_q.push_back(rng.uniform_tensor<Scalar>(dim, head_dim, -lim_qkv, lim_qkv));
      p.w_k.push_back(rng.uniform_tensor<Scalar>(dim, head_dim, -lim_qkv, lim_qkv));
      p.w_v.push_back(rng.uniform_tensor<Scalar>(dim, head_dim, -lim_qkv, lim_qkv));
    }
    const double lim_o = std::sqrt(6.0 / double(heads * head_dim + dim));
    p.w_o = rng.uniform_tensor<Scalar>(heads * head_dim, dim, -lim_o, lim_o);
    const double lim_ff = std::sqrt(6.0 / double(5 * dim));
    p.ff1_w = rng.uniform_tensor<Scalar>(dim, 4 * dim, -lim_ff, lim_ff);
    p.ff1_b = Tensor2<Scalar>::Zero(1, 4 * dim);
    p.ff2_w = rng.uniform_tensor<Scalar>(4 * dim, dim, -lim_ff, lim_ff);
    p.ff2_b = Tensor2<Scalar>::Zero(1, dim);
    p.ln1_gain = Tensor2<Scalar>::Ones(1, dim);
    p.ln1_bias = Tensor2<Scalar>::Zero(1, dim);
    p.ln2_gain = Tensor2<Scalar>::Ones(1, dim);
    p.ln2_bias = Tensor2<Scalar>::Zero(1, dim);
    return p;
  }

  static AttentionLayerParams zeros_like(const AttentionLayerParams& like) {
    AttentionLayerParams p;
    p.dropout = like.dropout;
    auto z = [](const Tensor2<Scalar>& t) { return Tensor2<Scalar>::Zero(t.rows(), t.cols()).eval(); };
    for (int h = 0; h < like.heads(); ++h) {
      p.w_q.push_back(z(like.w_q[h]));
      p.w_k.push_back(z(like.w_k[h]));
      p.w_v.push_back(z(like.w_v[h]));
    }
    p.w_o = z(like.w_o);
    p.ff1_w = z(like.ff1_w);
    p.ff1_b = z(like.ff1_b);
    p.ff2_w = z(like.ff2_w);
    p.ff2_b = z(like.ff2_b);
    p.ln1_gain = z(like.ln1_gain);
    p.ln1_bias = z(like.ln1_bias);
    p.ln2_gain = z(like.ln2_gain);
    p.ln2_bias = z(like.ln2_bias);
    return p;
  }

  template <typename Visitor>
  void visit(const std::string& prefix, Visitor&& v) {
    for (int h = 0; h < heads(); ++h) {
      const std::string hp = prefix + "head" + std::to_string(h) + ".";
      v(hp + "w_q", w_q[h]);
      v(hp + "w_k", w_k[h]);
      v(hp + "w_v", w_v[h]);
    }
    v(prefix + "w_o", w_o);
    v(prefix + "ff1.weight", ff1_w);
    v(prefix + "ff1.bias", ff1_b);
    v(prefix + "ff2.weight", ff2_w);
    v(prefix + "ff2.bias", ff2_b);
    v(prefix + "ln1.gain", ln1_gain);
    v(prefix + "ln1.bias", ln1_bias);
    v(prefix + "ln2.gain", ln2_gain);
    v(prefix + "ln2.bias", ln2_bias);
  }
};

template <typename Scalar>
struct EncoderLayerCache {
  Tensor2<Scalar> input;
  std::vector<Tensor2<Scalar>> q, k, v, attn;  // attn rows are softmax outputs
  Tensor2<Scalar> concat;
  Tensor2<Scalar> attn_mask;  // empty when no dropout was applied
  LayerNormCache<Scalar> ln1;
  Tensor2<Scalar> y1;
  Tensor2<Scalar> ff_pre;     // before relu
  Tensor2<Scalar> ff_hidden;  // after relu
  Tensor2<Scalar> ff_mask;
  LayerNormCache<Scalar> ln2;
};

template <typename Scalar>
struct EncoderCache {
  std::vector<EncoderLayerCache<Scalar>> layers;
};

/// Dropout masks (already scaled by 1/(1-p)) recorded during a training pass,
/// two per layer: attention output, then feed-forward output.
template <typename Scalar>
struct DropoutMasks {
  std::vector<Tensor2<Scalar>> masks;
};

namespace detail {

template <typename Scalar>
void check_layer(const AttentionLayerParams<Scalar>& p, Eigen::Index dim) {
  if (p.heads() < 1) throw DimensionError("encoder: layer has no heads");
  const Eigen::Index dh = p.head_dim();
  for (int h = 0; h < p.heads(); ++h)
    if (p.w_q[h].rows() != dim || p.w_k[h].rows() != dim || p.w_v[h].rows() != dim || p.w_q[h].cols() != dh ||
        p.w_k[h].cols() != dh || p.w_v[h].cols() != dh)
      throw DimensionError("encoder: head " + std::to_string(h) + " projections must be " + shape_str(dim, dh));
  if (p.w_o.rows() != p.heads() * dh || p.w_o.cols() != dim)
    throw DimensionError("encoder: W^O must be " + shape_str(p.heads() * dh, dim));
  if (p.ff1_w.rows() != dim || p.ff2_w.cols() != dim || p.ff1_w.cols() != p.ff2_w.rows())
    throw DimensionError("encoder: feed-forward weights do not chain for width " + std::to_string(dim));
}

template <typename Scalar>
Tensor2<Scalar> draw_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Tensor2<Scalar> m(rows, cols);
  const Scalar keep = static_cast<Scalar>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? Scalar(0) : keep;
  return m;
}

template <typename Scalar>
void add_bias(Tensor2<Scalar>& a, const Tensor2<Scalar>& b) {
  for (Eigen::Index i = 0; i < a.rows(); ++i) a.row(i) += b;
}

}  // namespace detail

/// Runs the encoder stack. With training=false no dropout is applied and the
/// output is a pure function of the inputs. In training mode masks are drawn
/// from rng layer by layer (attention mask, then feed-forward mask, each
/// row-major), unless `replay` supplies previously recorded masks.
template <typename Scalar>
Tensor2<Scalar> encoder_forward(const Tensor2<Scalar>& x, const std::vector<AttentionLayerParams<Scalar>>& layers,
                                bool training, Rng* rng, EncoderCache<Scalar>* cache = nullptr,
                                DropoutMasks<Scalar>* record = nullptr, const DropoutMasks<Scalar>* replay = nullptr) {
  if (cache) cache->layers.clear();
  Tensor2<Scalar> h = x;
  std::size_t mask_index = 0;
  const Scalar eps = static_cast<Scalar>(kLayerNormEps);
  for (const auto& p : layers) {
    detail::check_layer(p, h.cols());
    EncoderLayerCache<Scalar> c;
    c.input = h;
    const Eigen::Index rows = h.rows(), dh = p.head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    c.concat.resize(rows, p.heads() * dh);
    for (int hd = 0; hd < p.heads(); ++hd) {
      Tensor2<Scalar> q = matmul(h, p.w_q[hd]);
      Tensor2<Scalar> k = matmul(h, p.w_k[hd]);
      Tensor2<Scalar> v = matmul(h, p.w_v[hd]);
      Tensor2<Scalar> scores = matmul_nt(q, k) * scale;
      Tensor2<Scalar> a = row_softmax(scores);
      c.concat.middleCols(hd * dh, dh) = matmul(a, v);
      c.q.push_back(std::move(q));
      c.k.push_back(std::move(k));
      c.v.push_back(std::move(v));
      c.attn.push_back(std::move(a));
    }
    Tensor2<Scalar> att = matmul(c.concat, p.w_o);

    auto maybe_drop = [&](Tensor2<Scalar>& t, Tensor2<Scalar>& mask_slot) {
      if (!training || p.dropout <= 0) return;
      if (replay) {
        if (mask_index >= replay->masks.size()) throw StateError("encoder: dropout replay ran out of masks");
        mask_slot = replay->masks[mask_index];
      } else {
        if (!rng) throw ArgumentError("encoder: training mode needs an Rng");
        mask_slot = detail::draw_mask<Scalar>(t.rows(), t.cols(), p.dropout, *rng);
      }
      ++mask_index;
      if (record) record->masks.push_back(mask_slot);
      t = t.cwiseProduct(mask_slot);
    };

    maybe_drop(att, c.attn_mask);
    c.y1 = layer_norm<Scalar>(h + att, p.ln1_gain, p.ln1_bias, eps, &c.ln1);
    c.ff_pre = matmul(c.y1, p.ff1_w);
    detail::add_bias(c.ff_pre, p.ff1_b);
    c.ff_hidden = relu(c.ff_pre);
    Tensor2<Scalar> ff = matmul(c.ff_hidden, p.ff2_w);
    detail::add_bias(ff, p.ff2_b);
    maybe_drop(ff, c.ff_mask);
    h = layer_norm<Scalar>(c.y1 + ff, p.ln2_gain, p.ln2_bias, eps, &c.ln2);
    if (cache) cache->layers.push_back(std::move(c));
  }
  return h;
}

/// Accumulates gradients for every layer into grads; returns dL/dx.
template <typename Scalar>
Tensor2<Scalar> encoder_backward(const std::vector<AttentionLayerParams<Scalar>>& layers,
                                 const EncoderCache<Scalar>& cache, const Tensor2<Scalar>& dy,
                                 std::vector<AttentionLayerParams<Scalar>>& grads) {
  if (cache.layers.size() != layers.size()) throw StateError("encoder_backward: cache does not match the stack");
  Tensor2<Scalar> g = dy;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& p = layers[l];
    const auto& c = cache.layers[l];
    auto& gp = grads[l];
    const Eigen::Index dh = p.head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

    // second sub-layer
    Tensor2<Scalar> d_sum2 = layer_norm_backward(c.ln2, p.ln2_gain, g, gp.ln2_gain, gp.ln2_bias);
    Tensor2<Scalar> d_ff = d_sum2;
    if (c.ff_mask.size() > 0) d_ff = d_ff.cwiseProduct(c.ff_mask);
    gp.ff2_w += matmul_tn(c.ff_hidden, d_ff);
    for (Eigen::Index i = 0; i < d_ff.rows(); ++i) gp.ff2_b += d_ff.row(i);
    Tensor2<Scalar> d_hidden = matmul_nt(d_ff, p.ff2_w);
    for (Eigen::Index i = 0; i < d_hidden.size(); ++i)
      if (!(c.ff_pre.data()[i] > 0)) d_hidden.data()[i] = 0;
    gp.ff1_w += matmul_tn(c.y1, d_hidden);
    for (Eigen::Index i = 0; i < d_hidden.rows(); ++i) gp.ff1_b += d_hidden.row(i);
    Tensor2<Scalar> d_y1 = d_sum2 + matmul_nt(d_hidden, p.ff1_w);

    // first sub-layer
    Tensor2<Scalar> d_sum1 = layer_norm_backward(c.ln1, p.ln1_gain, d_y1, gp.ln1_gain, gp.ln1_bias);
    Tensor2<Scalar> d_att = d_sum1;
    if (c.attn_mask.size() > 0) d_att = d_att.cwiseProduct(c.attn_mask);
    gp.w_o += matmul_tn(c.concat, d_att);
    Tensor2<Scalar> d_concat = matmul_nt(d_att, p.w_o);
    Tensor2<Scalar> dx = d_sum1;
    for (int hd = 0; hd < p.heads(); ++hd) {
      const Tensor2<Scalar> d_head = d_concat.middleCols(hd * dh, dh);
      Tensor2<Scalar> d_a = matmul_nt(d_head, c.v[hd]);
      Tensor2<Scalar> d_v = matmul_tn(c.attn[hd], d_head);
      Tensor2<Scalar> d_scores = row_softmax_backward(c.attn[hd], d_a) * scale;
      Tensor2<Scalar> d_q = matmul(d_scores, c.k[hd]);
      Tensor2<Scalar> d_k = matmul_tn(d_scores, c.q[hd]);
      gp.w_q[hd] += matmul_tn(c.input, d_q);
      gp.w_k[hd] += matmul_tn(c.input, d_k);
      gp.w_v[hd] += matmul_tn(c.input, d_v);
      dx += matmul_nt(d_q, p.w_q[hd]);
      dx += matmul_nt(d_k, p.w_k[hd]);
      dx += matmul_nt(d_v, p.w_v[hd]);
    }
    g = std::move(dx);
  }
  return g;
}

}  // namespace sil
