#pragma once

// Straight-line 64-bit reference implementations. They share no arithmetic
// with the library: plain nested vectors, textbook loops, full sorts.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "sil/pipeline.hpp"

namespace oracle {

using Row = std::vector<double>;
using Mat = std::vector<Row>;

template <typename S>
Mat to_mat(const sil::Tensor2<S>& t) {
  Mat m(static_cast<std::size_t>(t.rows()), Row(static_cast<std::size_t>(t.cols())));
  for (Eigen::Index i = 0; i < t.rows(); ++i)
    for (Eigen::Index j = 0; j < t.cols(); ++j) m[i][j] = static_cast<double>(t(i, j));
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Mat c(n, Row(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t r = 0; r < k; ++r) c[i][j] += a[i][r] * b[r][j];
  return c;
}

inline Mat transpose(const Mat& a) {
  if (a.empty()) return {};
  Mat t(a[0].size(), Row(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline double dot(const Row& a, const Row& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cosine(const Row& a, const Row& b) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return dot(a, b) / (na * nb);
}

inline Row softmax(const Row& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  Row e(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] - mx);
  for (double& v : e) v /= s;
  return e;
}

inline Row layer_norm(const Row& x, const Row& gain, const Row& bias, double eps) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Row y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain[i] * (x[i] - mean) / std::sqrt(var + eps) + bias[i];
  return y;
}

template <typename S>
Mat mlp(const Mat& x, const sil::Mlp<S>& net) {
  Mat h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const Mat w = to_mat(net.layers[l].weight);
    const Row b = to_mat(net.layers[l].bias)[0];
    Mat z(h.size(), Row(b.size()));
    for (std::size_t i = 0; i < h.size(); ++i)
      for (std::size_t o = 0; o < b.size(); ++o) {
        double s = b[o];
        for (std::size_t r = 0; r < h[i].size(); ++r) s += h[i][r] * w[r][o];
        const bool hidden = l + 1 < net.layers.size();
        z[i][o] = (hidden && net.hidden == sil::Activation::relu) ? std::max(0.0, s) : s;
      }
    h = std::move(z);
  }
  return h;
}

struct Pt {
  double x, y;
};

inline std::vector<Pt> centers(int h, int w, int cy, int cx) {
  std::vector<Pt> out;
  for (int v = 0; v < cy; ++v)
    for (int u = 0; u < cx; ++u) out.push_back({(u + 0.5) * w / cx, (v + 0.5) * h / cy});
  return out;
}

inline Pt pixel(int i, int w) { return {i % w + 0.5, i / w + 0.5}; }

/// Full sort of every point by (squared distance, index).
inline std::vector<int> knn(int h, int w, Pt c, int n_k) {
  std::vector<std::pair<double, int>> all;
  for (int i = 0; i < h * w; ++i) {
    const Pt p = pixel(i, w);
    all.push_back({(p.x - c.x) * (p.x - c.x) + (p.y - c.y) * (p.y - c.y), i});
  }
  std::sort(all.begin(), all.end());
  std::vector<int> out;
  for (int r = 0; r < n_k; ++r) out.push_back(all[static_cast<std::size_t>(r)].second);
  return out;
}

/// Mean over a set of rows, summed in index order.
inline Row mean_rows(const Mat& f, std::vector<int> idx) {
  std::sort(idx.begin(), idx.end());
  Row m(f[0].size(), 0.0);
  for (int i : idx)
    for (std::size_t c = 0; c < m.size(); ++c) m[c] += f[i][c];
  for (double& v : m) v /= static_cast<double>(idx.size());
  return m;
}

/// Brute-force argmax over every (point, centre) pair; lowest index on ties.
inline std::vector<int> assign(const Mat& f, const Mat& fc) {
  std::vector<int> labels(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    int best = 0;
    double best_sim = cosine(f[i], fc[0]);
    for (std::size_t j = 1; j < fc.size(); ++j) {
      const double s = cosine(f[i], fc[j]);
      if (s > best_sim) {
        best_sim = s;
        best = static_cast<int>(j);
      }
    }
    labels[i] = best;
  }
  return labels;
}

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

/// Similarity-weighted pooling seeded with the centre row, before H'.
inline Mat pooled(const Mat& f, const Mat& fc, const std::vector<int>& labels) {
  Mat out(fc.size());
  for (std::size_t j = 0; j < fc.size(); ++j) {
    Row num = fc[j];
    double den = 1.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (labels[i] != static_cast<int>(j)) continue;
      const double s = clamp01(cosine(f[i], fc[j]));
      for (std::size_t c = 0; c < num.size(); ++c) num[c] += s * f[i][c];
      den += s;
    }
    for (double& v : num) v /= den;
    out[j] = num;
  }
  return out;
}

struct BoxD {
  double x1, y1, x2, y2;
};

inline bool inside(const BoxD& b, Pt p) { return b.x1 <= p.x && p.x < b.x2 && b.y1 <= p.y && p.y < b.y2; }

inline std::vector<int> members(const BoxD& b, const std::vector<Pt>& cs) {
  std::vector<int> out;
  for (std::size_t j = 0; j < cs.size(); ++j)
    if (inside(b, cs[j])) out.push_back(static_cast<int>(j));
  return out;
}

inline double dist_to_center(const BoxD& b, Pt p) {
  const double cx = (b.x1 + b.x2) / 2, cy = (b.y1 + b.y2) / 2;
  return std::sqrt((p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy));
}

inline Row weights(const BoxD& b, const std::vector<int>& mem, const std::vector<Pt>& cs, bool inverse) {
  Row w;
  double total = 0;
  for (int j : mem) {
    const double d = dist_to_center(b, cs[j]);
    w.push_back(inverse ? 1.0 / (1.0 + d) : d);
    total += w.back();
  }
  if (total < 1e-9) return Row(mem.size(), 1.0 / static_cast<double>(mem.size()));
  for (double& v : w) v /= total;
  return w;
}

/// (g + sum w F^SC) / (1 + sum d), before H^a.
inline Row aggregate_raw(const BoxD& b, const Row& g, const std::vector<int>& mem, const Row& w,
                         const std::vector<Pt>& cs, const Mat& fsc, bool normalized) {
  Row num = g;
  double den = 1.0;
  const double half_diag = std::sqrt((b.x2 - b.x1) * (b.x2 - b.x1) + (b.y2 - b.y1) * (b.y2 - b.y1)) / 2;
  for (std::size_t r = 0; r < mem.size(); ++r) {
    for (std::size_t c = 0; c < num.size(); ++c) num[c] += w[r] * fsc[mem[r]][c];
    den += dist_to_center(b, cs[mem[r]]) / (normalized ? half_diag : 1.0);
  }
  for (double& v : num) v /= den;
  return num;
}

/// F^IN by an explicit loop over every (centre, entity) pair.
inline Mat update_superpixels(const Mat& fsc, const Mat& fa, const std::vector<std::vector<int>>& mem,
                              const std::vector<Row>& w) {
  Mat out = fsc;
  for (std::size_t j = 0; j < fsc.size(); ++j)
    for (std::size_t k = 0; k < mem.size(); ++k)
      for (std::size_t r = 0; r < mem[k].size(); ++r)
        if (mem[k][r] == static_cast<int>(j))
          for (std::size_t c = 0; c < out[j].size(); ++c) out[j][c] += w[k][r] * fa[k][c];
  return out;
}

template <typename S>
Mat encoder_layer(const Mat& x, const sil::AttentionLayerParams<S>& p) {
  const std::size_t n = x.size(), d = x[0].size();
  const int heads = p.heads();
  const std::size_t dh = static_cast<std::size_t>(p.head_dim());
  Mat concat(n, Row(heads * dh, 0.0));
  for (int h = 0; h < heads; ++h) {
    const Mat q = matmul(x, to_mat(p.w_q[h])), k = matmul(x, to_mat(p.w_k[h])), v = matmul(x, to_mat(p.w_v[h]));
    for (std::size_t i = 0; i < n; ++i) {
      Row scores(n);
      for (std::size_t j = 0; j < n; ++j) scores[j] = dot(q[i], k[j]) / std::sqrt(static_cast<double>(dh));
      const Row a = softmax(scores);
      for (std::size_t c = 0; c < dh; ++c) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += a[j] * v[j][c];
        concat[i][h * dh + c] = s;
      }
    }
  }
  const Mat att = matmul(concat, to_mat(p.w_o));
  const Row g1 = to_mat(p.ln1_gain)[0], b1 = to_mat(p.ln1_bias)[0];
  const Row g2 = to_mat(p.ln2_gain)[0], b2 = to_mat(p.ln2_bias)[0];
  const Mat w1 = to_mat(p.ff1_w), w2 = to_mat(p.ff2_w);
  const Row c1 = to_mat(p.ff1_b)[0], c2 = to_mat(p.ff2_b)[0];
  Mat out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Row r(d);
    for (std::size_t c = 0; c < d; ++c) r[c] = x[i][c] + att[i][c];
    const Row y1 = layer_norm(r, g1, b1, 1e-5);
    Row hidden(c1.size());
    for (std::size_t o = 0; o < c1.size(); ++o) {
      double s = c1[o];
      for (std::size_t c = 0; c < d; ++c) s += y1[c] * w1[c][o];
      hidden[o] = std::max(0.0, s);
    }
    Row r2(d);
    for (std::size_t c = 0; c < d; ++c) {
      double s = c2[c];
      for (std::size_t o = 0; o < hidden.size(); ++o) s += hidden[o] * w2[o][c];
      r2[c] = y1[c] + s;
    }
    out[i] = layer_norm(r2, g2, b2, 1e-5);
  }
  return out;
}

/// F_i + clamp(sim(F_i, F^c_j)) * dispatched_j, j = label_i.
inline Mat dispatch(const Mat& f, const Mat& fc, const std::vector<int>& labels, const Mat& dispatched) {
  Mat out = f;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const int j = labels[i];
    const double s = clamp01(cosine(f[i], fc[j]));
    for (std::size_t c = 0; c < out[i].size(); ++c) out[i][c] += s * dispatched[j][c];
  }
  return out;
}

/// One full inference-mode block, start to finish.
template <typename S>
Mat sil_block(const sil::FeatureGrid<S>& grid, const std::vector<sil::EntityBox<S>>& entities,
              const sil::StageConfig& st, const sil::SilConfig& cfg, const sil::StageParams<S>& p) {
  const int h = grid.height, w = grid.width;
  const Mat f = to_mat(grid.features);
  const auto cs = centers(h, w, st.centers_y, st.centers_x);
  const int c = static_cast<int>(cs.size());
  const int n_k = st.knn > 0 ? st.knn : std::max(1, (h * w) / c);
  Mat fc;
  for (const Pt& t : cs) fc.push_back(mean_rows(f, knn(h, w, t, n_k)));
  const auto labels = assign(f, fc);
  const Mat fsc = mlp(pooled(f, fc, labels), p.h_prime);

  std::vector<std::vector<int>> mem;
  std::vector<Row> wts;
  Mat raw;
  for (const auto& e : entities) {
    const BoxD b{e.box.x1, e.box.y1, e.box.x2, e.box.y2};
    mem.push_back(members(b, cs));
    wts.push_back(mem.back().empty() ? Row{} : weights(b, mem.back(), cs, cfg.weight_variant == sil::WeightVariant::inverse));
    raw.push_back(aggregate_raw(b, to_mat(e.g)[0], mem.back(), wts.back(), cs, fsc,
                                cfg.distance_mode == sil::DistanceMode::normalized));
  }
  const Mat fa = raw.empty() ? Mat{} : mlp(raw, p.h_a);
  Mat x = update_superpixels(fsc, fa, mem, wts);
  if (cfg.cross_entity)
    for (const auto& layer : p.encoder) x = encoder_layer(x, layer);
  return dispatch(f, fc, labels, mlp(x, p.h_dd));
}

/// Mean over pixel centres inside the half-open box, else the pixel nearest
/// the box centre.
template <typename S>
Row box_pool(const sil::FeatureGrid<S>& grid, const BoxD& b) {
  const Mat f = to_mat(grid.features);
  std::vector<int> in;
  for (int i = 0; i < grid.height * grid.width; ++i)
    if (inside(b, pixel(i, grid.width))) in.push_back(i);
  if (in.empty()) {
    double best = 1e300;
    int arg = 0;
    for (int i = 0; i < grid.height * grid.width; ++i) {
      const double d = dist_to_center(b, pixel(i, grid.width));
      if (d < best) {
        best = d;
        arg = i;
      }
    }
    in.push_back(arg);
  }
  return mean_rows(f, in);
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::fabs(a[i][j] - b[i][j]));
  return m;
}

/// max |a - b| / max |b|.
inline double rel_diff(const Mat& a, const Mat& b) {
  double scale = 0;
  for (const auto& r : b)
    for (double v : r) scale = std::max(scale, std::fabs(v));
  return max_abs_diff(a, b) / std::max(scale, 1e-300);
}

}  // namespace oracle
