#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "sil/error.hpp"

namespace sil {

/// Dense row-major matrix. All feature tables (points, centers, entities) are
/// stored one item per row.
template <typename Scalar>
using Tensor2 = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Tensor2f = Tensor2<float>;
using Tensor2d = Tensor2<double>;

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

/// Worker count for row-parallel kernels: SIL_THREADS if set to a positive
/// integer, otherwise the hardware concurrency. Read once per process.
inline unsigned thread_budget() {
  static const unsigned budget = [] {
    if (const char* env = std::getenv("SIL_THREADS")) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
  }();
  return budget;
}

/// Runs body(r) for r in [0, rows). Rows are split into contiguous chunks, so
/// per-row results never depend on the schedule.
template <typename Body>
void parallel_rows(Eigen::Index rows, std::size_t work_per_row, Body&& body) {
  constexpr std::size_t kMinParallelWork = 1u << 16;
  const unsigned budget = thread_budget();
  const std::size_t total = static_cast<std::size_t>(rows) * work_per_row;
  if (budget <= 1 || rows < 2 || total < kMinParallelWork) {
    for (Eigen::Index r = 0; r < rows; ++r) body(r);
    return;
  }
  const auto workers = static_cast<Eigen::Index>(std::min<std::size_t>(budget, rows));
  const Eigen::Index chunk = (rows + workers - 1) / workers;
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  pool.reserve(workers);
  for (Eigen::Index w = 0; w < workers; ++w) {
    const Eigen::Index lo = w * chunk;
    const Eigen::Index hi = std::min(rows, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body, &err = errors[static_cast<std::size_t>(w)]] {
      try {
        for (Eigen::Index r = lo; r < hi; ++r) body(r);
      } catch (...) {
        err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename Scalar>
bool all_finite(const Tensor2<Scalar>& a) {
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (!std::isfinite(a.data()[i])) return false;
  return true;
}

/// a * b. Each output element accumulates over the inner index in ascending
/// order.
template <typename Scalar>
Tensor2<Scalar> matmul(const Tensor2<Scalar>& a, const Tensor2<Scalar>& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()));
  Tensor2<Scalar> out = Tensor2<Scalar>::Zero(a.rows(), b.cols());
  const Eigen::Index inner = a.cols();
  const Eigen::Index n = b.cols();
  parallel_rows(a.rows(), static_cast<std::size_t>(inner * n), [&](Eigen::Index i) {
    Scalar* o = out.data() + i * n;
    for (Eigen::Index k = 0; k < inner; ++k) {
      const Scalar aik = a(i, k);
      const Scalar* brow = b.data() + k * n;
      for (Eigen::Index j = 0; j < n; ++j) o[j] += aik * brow[j];
    }
  });
  return out;
}

/// aᵀ * b, same ordering contract as matmul.
template <typename Scalar>
Tensor2<Scalar> matmul_tn(const Tensor2<Scalar>& a, const Tensor2<Scalar>& b) {
  if (a.rows() != b.rows())
    throw DimensionError("matmul_tn: " + shape_str(a.rows(), a.cols()) + "^T * " +
                         shape_str(b.rows(), b.cols()));
  Tensor2<Scalar> out = Tensor2<Scalar>::Zero(a.cols(), b.cols());
  for (Eigen::Index k = 0; k < a.rows(); ++k)
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
      const Scalar aki = a(k, i);
      for (Eigen::Index j = 0; j < b.cols(); ++j) out(i, j) += aki * b(k, j);
    }
  return out;
}

/// a * bᵀ, same ordering contract as matmul.
template <typename Scalar>
Tensor2<Scalar> matmul_nt(const Tensor2<Scalar>& a, const Tensor2<Scalar>& b) {
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()) + "^T");
  Tensor2<Scalar> out(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      Scalar acc = 0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(j, k);
      out(i, j) = acc;
    }
  return out;
}

/// Row-wise softmax with max subtraction.
template <typename Scalar>
Tensor2<Scalar> row_softmax(const Tensor2<Scalar>& a) {
  Tensor2<Scalar> out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (a.cols() == 0) continue;
    Scalar mx = a(i, 0);
    for (Eigen::Index j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
    Scalar sum = 0;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out(i, j) = std::exp(a(i, j) - mx);
      sum += out(i, j);
    }
    for (Eigen::Index j = 0; j < a.cols(); ++j) out(i, j) /= sum;
  }
  return out;
}

/// Backward of row_softmax given its output y and upstream gradient dy.
template <typename Scalar>
Tensor2<Scalar> row_softmax_backward(const Tensor2<Scalar>& y, const Tensor2<Scalar>& dy) {
  Tensor2<Scalar> dx(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    Scalar dot = 0;
    for (Eigen::Index j = 0; j < y.cols(); ++j) dot += y(i, j) * dy(i, j);
    for (Eigen::Index j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (dy(i, j) - dot);
  }
  return dx;
}

template <typename Scalar>
std::vector<Scalar> row_norms(const Tensor2<Scalar>& a) {
  std::vector<Scalar> n(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    Scalar acc = 0;
    for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * a(i, k);
    n[static_cast<std::size_t>(i)] = std::sqrt(acc);
  }
  return n;
}

inline constexpr double kZeroNorm = 1e-12;

/// Pairwise cosine similarity between the rows of a and b. Any pair involving
/// a row with norm below 1e-12 scores 0.
template <typename Scalar>
Tensor2<Scalar> cosine_sim(const Tensor2<Scalar>& a, const Tensor2<Scalar>& b) {
  if (a.cols() != b.cols())
    throw DimensionError("cosine_sim: " + shape_str(a.rows(), a.cols()) + " vs " +
                         shape_str(b.rows(), b.cols()));
  const auto na = row_norms(a);
  const auto nb = row_norms(b);
  Tensor2<Scalar> out(a.rows(), b.rows());
  parallel_rows(a.rows(), static_cast<std::size_t>(b.rows() * a.cols()), [&](Eigen::Index i) {
    const Scalar ni = na[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      const Scalar nj = nb[static_cast<std::size_t>(j)];
      if (ni < Scalar(kZeroNorm) || nj < Scalar(kZeroNorm)) {
        out(i, j) = 0;
        continue;
      }
      Scalar dot = 0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) dot += a(i, k) * b(j, k);
      out(i, j) = dot / (ni * nj);
    }
  });
  return out;
}

/// Standardized rows and reciprocal deviations, kept for the backward pass.
template <typename Scalar>
struct LayerNormCache {
  Tensor2<Scalar> normalized;
  std::vector<Scalar> inv_std;
};

template <typename Scalar>
Tensor2<Scalar> layer_norm(const Tensor2<Scalar>& a, const Tensor2<Scalar>& gain,
                           const Tensor2<Scalar>& bias, Scalar eps,
                           LayerNormCache<Scalar>* cache = nullptr) {
  if (gain.rows() != 1 || bias.rows() != 1 || gain.cols() != a.cols() || bias.cols() != a.cols())
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(a.cols()));
  if (!(eps > 0)) throw ArgumentError("layer_norm: eps must be positive");
  const Eigen::Index d = a.cols();
  Tensor2<Scalar> xhat(a.rows(), d);
  std::vector<Scalar> inv_std(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    Scalar mean = 0;
    for (Eigen::Index k = 0; k < d; ++k) mean += a(i, k);
    mean /= Scalar(d);
    Scalar var = 0;
    for (Eigen::Index k = 0; k < d; ++k) var += (a(i, k) - mean) * (a(i, k) - mean);
    var /= Scalar(d);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (Eigen::Index k = 0; k < d; ++k) xhat(i, k) = (a(i, k) - mean) * is;
  }
  Tensor2<Scalar> out(a.rows(), d);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index k = 0; k < d; ++k) out(i, k) = xhat(i, k) * gain(0, k) + bias(0, k);
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

/// Returns dL/da and accumulates dL/dgain, dL/dbias.
template <typename Scalar>
Tensor2<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& cache, const Tensor2<Scalar>& gain,
                                    const Tensor2<Scalar>& dy, Tensor2<Scalar>& dgain,
                                    Tensor2<Scalar>& dbias) {
  const Tensor2<Scalar>& xhat = cache.normalized;
  const Eigen::Index d = xhat.cols();
  Tensor2<Scalar> dx(xhat.rows(), d);
  for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
    Scalar sum_g = 0, sum_gx = 0;
    for (Eigen::Index k = 0; k < d; ++k) {
      const Scalar g = dy(i, k) * gain(0, k);
      sum_g += g;
      sum_gx += g * xhat(i, k);
      dgain(0, k) += dy(i, k) * xhat(i, k);
      dbias(0, k) += dy(i, k);
    }
    const Scalar is = cache.inv_std[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < d; ++k) {
      const Scalar g = dy(i, k) * gain(0, k);
      dx(i, k) = is * (g - sum_g / Scalar(d) - xhat(i, k) * sum_gx / Scalar(d));
    }
  }
  return dx;
}

template <typename Scalar>
Tensor2<Scalar> relu(const Tensor2<Scalar>& a) {
  return a.cwiseMax(Scalar(0));
}

/// Casts every coefficient, e.g. for running a float model in 64-bit.
template <typename To, typename From>
Tensor2<To> cast(const Tensor2<From>& a) {
  return a.template cast<To>();
}

}  // namespace sil
