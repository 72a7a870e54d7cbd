//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "moldiff/errors.hpp"
#include "moldiff/rng.hpp"

namespace moldiff {

class NotScalarError : public std::invalid_argument {
 public:
  NotScalarError() : std::invalid_argument("backward requires a scalar loss tensor") {}
};

// ---------------------------------------------------------------------
// Dense row-major 64-bit tensor. Gradient storage exists exactly when
// requires_grad is set.
// ---------------------------------------------------------------------

struct Tensor {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<int> s, bool rg) : shape(std::move(s)), requires_grad(rg) {
    value.assign(numel(), 0.0);
    if (requires_grad) grad.assign(numel(), 0.0);
  }

  size_t numel() const {
    size_t n = 1;
    for (int d : shape) {
      if (d < 1) throw std::invalid_argument("Tensor: non-positive dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  int rows() const { return shape.at(0); }
  int cols() const { return shape.at(1); }
  bool is_scalar() const { return value.size() == 1; }

  double& at(int i) { return value[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return value[static_cast<size_t>(i) * cols() + j]; }
  double at(int i) const { return value[static_cast<size_t>(i)]; }
  double at(int i, int j) const { return value[static_cast<size_t>(i) * cols() + j]; }

  void zero_grad() {
    if (requires_grad) grad.assign(value.size(), 0.0);
  }

  void fill_normal(Prng& rng, double stddev) {
    for (double& x : value) x = rng.normal() * stddev;
  }
};

namespace tensor_detail {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<Mat>;
using CMap = Eigen::Map<const Mat>;

inline CMap cmap(const Tensor& t) { return CMap(t.value.data(), t.rows(), t.cols()); }
inline Map vmap(Tensor& t) { return Map(t.value.data(), t.rows(), t.cols()); }
inline Map gmap(Tensor& t) { return Map(t.grad.data(), t.rows(), t.cols()); }
inline CMap cgmap(const Tensor& t) { return CMap(t.grad.data(), t.rows(), t.cols()); }

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeMismatchError(what);
}

// Eigen evaluates sufficiently small products coefficient-wise and
// picks SIMD/FMA lanes from the runtime pointer alignment, so the same
// operand values can round differently from one call to the next.
// Products up to this volume run as fixed-order scalar loops instead,
// keeping forwards and adjoints bitwise reproducible; anything larger
// takes Eigen's blocked kernel, which packs operands into aligned
// scratch and rounds independently of buffer placement.
constexpr long long kScalarProductVolume = 4096;

inline bool small_product(int n, int k, int p) {
  return static_cast<long long>(n) * k * p <= kScalarProductVolume;
}

// c(n×p) = a(n×k)·b(k×p); accumulates into c when acc is set.
inline void product_ab(const double* a, const double* b, double* c, int n, int k, int p,
                       bool acc) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += a[static_cast<size_t>(i) * k + t] * b[static_cast<size_t>(t) * p + j];
      double& dst = c[static_cast<size_t>(i) * p + j];
      dst = acc ? dst + s : s;
    }
  }
}

// c(n×m) = a(n×k)·b(m×k)ᵀ; accumulates into c when acc is set.
inline void product_abt(const double* a, const double* b, double* c, int n, int k, int m,
                        bool acc) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += a[static_cast<size_t>(i) * k + t] * b[static_cast<size_t>(j) * k + t];
      double& dst = c[static_cast<size_t>(i) * m + j];
      dst = acc ? dst + s : s;
    }
  }
}

// c(k×p) = a(n×k)ᵀ·g(n×p); accumulates into c when acc is set.
inline void product_atb(const double* a, const double* g, double* c, int n, int k, int p,
                        bool acc) {
  for (int t = 0; t < k; ++t) {
    for (int j = 0; j < p; ++j) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += a[static_cast<size_t>(i) * k + t] * g[static_cast<size_t>(i) * p + j];
      double& dst = c[static_cast<size_t>(t) * p + j];
      dst = acc ? dst + s : s;
    }
  }
}

}  // namespace tensor_detail

// ---------------------------------------------------------------------
// Tape: owns intermediate tensors and the reverse-order adjoint
// closures. Parameters live outside the tape and merely accumulate
// gradients, so one tape per forward pass composes with gradient
// accumulation across passes. With recording off the ops only compute
// values (inference mode).
// ---------------------------------------------------------------------

class Tape {
 public:
  bool recording = true;

  Tensor* tensor(std::vector<int> shape) {
    nodes_.push_back(std::make_unique<Tensor>(std::move(shape), false));
    return nodes_.back().get();
  }

  void clear() {
    nodes_.clear();
    backops_.clear();
  }

  size_t num_ops() const { return backops_.size(); }

  void backward(Tensor* loss) {
    if (!loss->is_scalar()) throw NotScalarError();
    if (!loss->requires_grad) {
      throw std::logic_error("backward: loss is not connected to any gradient");
    }
    loss->grad[0] = 1.0;
    for (auto it = backops_.rbegin(); it != backops_.rend(); ++it) (*it)();
    backops_.clear();
  }

  // --- elementwise ----------------------------------------------------

  Tensor* add(Tensor* a, Tensor* b) {
    tensor_detail::require(a->shape == b->shape, "add operands differ");
    Tensor* out = alloc_like(a->shape, {a, b});
    for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] + b->value[i];
    record([=] {
      if (a->requires_grad) {
        for (size_t i = 0; i < out->value.size(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        for (size_t i = 0; i < out->value.size(); ++i) b->grad[i] += out->grad[i];
      }
    }, out);
    return out;
  }

  // Adds a length-d bias row to every row of an n×d matrix.
  Tensor* add_row_broadcast(Tensor* mat, Tensor* row) {
    tensor_detail::require(mat->shape.size() == 2 && row->shape.size() == 1 &&
                               mat->cols() == row->shape[0],
                           "bias row width must equal matrix width");
    Tensor* out = alloc_like(mat->shape, {mat, row});
    const int n = mat->rows(), d = mat->cols();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) out->at(i, j) = mat->at(i, j) + row->at(j);
    }
    record([=] {
      if (mat->requires_grad) {
        for (size_t i = 0; i < out->value.size(); ++i) mat->grad[i] += out->grad[i];
      }
      if (row->requires_grad) {
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < d; ++j) row->grad[static_cast<size_t>(j)] += out->grad[static_cast<size_t>(i) * d + j];
        }
      }
    }, out);
    return out;
  }

  Tensor* scale(Tensor* a, double c) {
    Tensor* out = alloc_like(a->shape, {a});
    for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] * c;
    record([=] {
      if (a->requires_grad) {
        for (size_t i = 0; i < out->value.size(); ++i) a->grad[i] += c * out->grad[i];
      }
    }, out);
    return out;
  }

  // Elementwise product with a constant mask; no gradient flows into the
  // mask values.
  Tensor* mul_mask(Tensor* a, std::shared_ptr<const std::vector<double>> mask) {
    tensor_detail::require(a->value.size() == mask->size(), "mask size differs");
    Tensor* out = alloc_like(a->shape, {a});
    for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] * (*mask)[i];
    record([=] {
      if (a->requires_grad) {
        for (size_t i = 0; i < out->value.size(); ++i) a->grad[i] += (*mask)[i] * out->grad[i];
      }
    }, out);
    return out;
  }

  // --- linear algebra ---------------------------------------------------

  Tensor* matmul(Tensor* a, Tensor* b) {
    tensor_detail::require(a->shape.size() == 2 && b->shape.size() == 2 && a->cols() == b->rows(),
                           "matmul inner dimensions differ");
    const int n = a->rows(), k = a->cols(), p = b->cols();
    const bool small = tensor_detail::small_product(n, k, p);
    Tensor* out = alloc_like({n, p}, {a, b});
    if (small) {
      tensor_detail::product_ab(a->value.data(), b->value.data(), out->value.data(), n, k, p,
                                false);
    } else {
      tensor_detail::vmap(*out).noalias() = tensor_detail::cmap(*a) * tensor_detail::cmap(*b);
    }
    record([=] {
      if (a->requires_grad) {
        if (small) {
          tensor_detail::product_abt(out->grad.data(), b->value.data(), a->grad.data(), n, p, k,
                                     true);
        } else {
          tensor_detail::gmap(*a).noalias() +=
              tensor_detail::cgmap(*out) * tensor_detail::cmap(*b).transpose();
        }
      }
      if (b->requires_grad) {
        if (small) {
          tensor_detail::product_atb(a->value.data(), out->grad.data(), b->grad.data(), n, k, p,
                                     true);
        } else {
          tensor_detail::gmap(*b).noalias() +=
              tensor_detail::cmap(*a).transpose() * tensor_detail::cgmap(*out);
        }
      }
    }, out);
    return out;
  }

  // a (n×k) times b (m×k) transposed → n×m. Saves materializing K^T for
  // attention scores.
  Tensor* matmul_nt(Tensor* a, Tensor* b) {
    tensor_detail::require(a->shape.size() == 2 && b->shape.size() == 2 && a->cols() == b->cols(),
                           "matmul_nt requires equal column counts");
    const int n = a->rows(), k = a->cols(), m = b->rows();
    const bool small = tensor_detail::small_product(n, k, m);
    Tensor* out = alloc_like({n, m}, {a, b});
    if (small) {
      tensor_detail::product_abt(a->value.data(), b->value.data(), out->value.data(), n, k, m,
                                 false);
    } else {
      tensor_detail::vmap(*out).noalias() =
          tensor_detail::cmap(*a) * tensor_detail::cmap(*b).transpose();
    }
    record([=] {
      if (a->requires_grad) {
        if (small) {
          tensor_detail::product_ab(out->grad.data(), b->value.data(), a->grad.data(), n, m, k,
                                    true);
        } else {
          tensor_detail::gmap(*a).noalias() +=
              tensor_detail::cgmap(*out) * tensor_detail::cmap(*b);
        }
      }
      if (b->requires_grad) {
        if (small) {
          tensor_detail::product_atb(out->grad.data(), a->value.data(), b->grad.data(), n, m, k,
                                     true);
        } else {
          tensor_detail::gmap(*b).noalias() +=
              tensor_detail::cgmap(*out).transpose() * tensor_detail::cmap(*a);
        }
      }
    }, out);
    return out;
  }

  Tensor* slice_cols(Tensor* a, int begin, int end) {
    tensor_detail::require(a->shape.size() == 2 && 0 <= begin && begin < end && end <= a->cols(),
                           "slice_cols range invalid");
    const int n = a->rows(), w = end - begin, d = a->cols();
    Tensor* out = alloc_like({n, w}, {a});
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < w; ++j) out->at(i, j) = a->at(i, begin + j);
    }
    record([=] {
      if (a->requires_grad) {
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < w; ++j) {
            a->grad[static_cast<size_t>(i) * d + begin + j] += out->grad[static_cast<size_t>(i) * w + j];
          }
        }
      }
    }, out);
    return out;
  }

  Tensor* concat_cols(const std::vector<Tensor*>& parts) {
    tensor_detail::require(!parts.empty(), "concat_cols of nothing");
    const int n = parts[0]->rows();
    int total = 0;
    for (Tensor* p : parts) {
      tensor_detail::require(p->shape.size() == 2 && p->rows() == n, "concat_cols row mismatch");
      total += p->cols();
    }
    Tensor* out = alloc_like({n, total}, parts);
    int off = 0;
    for (Tensor* p : parts) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < p->cols(); ++j) out->at(i, off + j) = p->at(i, j);
      }
      off += p->cols();
    }
    std::vector<Tensor*> saved = parts;
    record([=] {
      int o = 0;
      for (Tensor* p : saved) {
        if (p->requires_grad) {
          for (int i = 0; i < n; ++i) {
            for (int j = 0; j < p->cols(); ++j) {
              p->grad[static_cast<size_t>(i) * p->cols() + j] +=
                  out->grad[static_cast<size_t>(i) * total + o + j];
            }
          }
        }
        o += p->cols();
      }
    }, out);
    return out;
  }

  // Reorders rows: out.row(i) = a.row((*perm)[i]). perm must be a
  // bijection on row indices.
  Tensor* permute_rows(Tensor* a, std::shared_ptr<const std::vector<int>> perm) {
    tensor_detail::require(a->shape.size() == 2 && perm->size() == static_cast<size_t>(a->rows()),
                           "permute_rows needs one source index per row");
    const int n = a->rows(), d = a->cols();
    std::vector<char> seen(static_cast<size_t>(n), 0);
    for (int s : *perm) {
      if (s < 0 || s >= n || seen[static_cast<size_t>(s)]) {
        throw std::invalid_argument("permute_rows: indices are not a permutation");
      }
      seen[static_cast<size_t>(s)] = 1;
    }
    Tensor* out = alloc_like(a->shape, {a});
    for (int i = 0; i < n; ++i) {
      const int s = (*perm)[static_cast<size_t>(i)];
      for (int j = 0; j < d; ++j) out->at(i, j) = a->at(s, j);
    }
    record([=] {
      if (a->requires_grad) {
        for (int i = 0; i < n; ++i) {
          const int s = (*perm)[static_cast<size_t>(i)];
          for (int j = 0; j < d; ++j) {
            a->grad[static_cast<size_t>(s) * d + j] += out->grad[static_cast<size_t>(i) * d + j];
          }
        }
      }
    }, out);
    return out;
  }

  // --- lookups ------------------------------------------------------------

  Tensor* embedding_lookup(Tensor* table, const std::vector<int>& ids) {
    tensor_detail::require(table->shape.size() == 2, "embedding table must be 2-D");
    const int V = table->rows(), d = table->cols();
    for (int id : ids) {
      if (id < 0 || id >= V) {
        throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                                " outside table of " + std::to_string(V));
      }
    }
    Tensor* out = alloc_like({static_cast<int>(ids.size()), d}, {table});
    for (size_t i = 0; i < ids.size(); ++i) {
      for (int j = 0; j < d; ++j) out->at(static_cast<int>(i), j) = table->at(ids[i], j);
    }
    std::vector<int> saved = ids;
    record([=] {
      if (table->requires_grad) {
        for (size_t i = 0; i < saved.size(); ++i) {
          for (int j = 0; j < d; ++j) {
            table->grad[static_cast<size_t>(saved[i]) * d + j] += out->grad[i * d + j];
          }
        }
      }
    }, out);
    return out;
  }

  // Per-head additive attention seed from the edge-category table
  // (num_cats×H). cats is a row-major P×P category map with -1 where no
  // category applies; those entries stay 0.
  Tensor* edge_bias_init(Tensor* table, std::shared_ptr<const std::vector<int>> cats, int P,
                         int head) {
    tensor_detail::require(table->shape.size() == 2, "edge-category table must be 2-D");
    tensor_detail::require(static_cast<size_t>(P) * P == cats->size(), "category map not P×P");
    const int H = table->cols();
    tensor_detail::require(0 <= head && head < H, "head index outside table");
    Tensor* out = alloc_like({P, P}, {table});
    for (size_t i = 0; i < cats->size(); ++i) {
      int c = (*cats)[i];
      if (c >= 0) {
        if (c >= table->rows()) throw std::out_of_range("edge_bias_init: category outside table");
        out->value[i] = table->value[static_cast<size_t>(c) * H + head];
      }
    }
    record([=] {
      if (table->requires_grad) {
        for (size_t i = 0; i < cats->size(); ++i) {
          int c = (*cats)[i];
          if (c >= 0) table->grad[static_cast<size_t>(c) * H + head] += out->grad[i];
        }
      }
    }, out);
    return out;
  }

  // Stacks, per requested (i,j) pair, the scalar heads[h](i,j) into a
  // row; output is n_pairs×H.
  Tensor* gather_pair_entries(const std::vector<Tensor*>& heads,
                              std::shared_ptr<const std::vector<std::pair<int, int>>> pairs) {
    tensor_detail::require(!heads.empty(), "gather_pair_entries with no heads");
    const int P = heads[0]->rows();
    for (Tensor* h : heads) {
      tensor_detail::require(h->rows() == P && h->cols() == P, "head matrices differ in shape");
    }
    const int H = static_cast<int>(heads.size());
    const int n = static_cast<int>(pairs->size());
    tensor_detail::require(n > 0, "no pairs requested");
    Tensor* out = alloc_like({n, H}, heads);
    for (int r = 0; r < n; ++r) {
      auto [i, j] = (*pairs)[static_cast<size_t>(r)];
      if (i < 0 || i >= P || j < 0 || j >= P) throw std::out_of_range("gather_pair_entries");
      for (int h = 0; h < H; ++h) out->at(r, h) = heads[static_cast<size_t>(h)]->at(i, j);
    }
    std::vector<Tensor*> saved = heads;
    record([=] {
      for (int r = 0; r < n; ++r) {
        auto [i, j] = (*pairs)[static_cast<size_t>(r)];
        for (int h = 0; h < H; ++h) {
          Tensor* hm = saved[static_cast<size_t>(h)];
          if (hm->requires_grad) {
            hm->grad[static_cast<size_t>(i) * P + j] += out->grad[static_cast<size_t>(r) * H + h];
          }
        }
      }
    }, out);
    return out;
  }

  // --- nonlinearities --------------------------------------------------------

  Tensor* softmax_rows(Tensor* a) {
    tensor_detail::require(a->shape.size() == 2, "softmax_rows needs a matrix");
    const int n = a->rows(), d = a->cols();
    Tensor* out = alloc_like(a->shape, {a});
    for (int i = 0; i < n; ++i) {
      double mx = a->at(i, 0);
      for (int j = 1; j < d; ++j) mx = std::max(mx, a->at(i, j));
      double sum = 0.0;
      for (int j = 0; j < d; ++j) {
        double e = std::exp(a->at(i, j) - mx);
        out->at(i, j) = e;
        sum += e;
      }
      for (int j = 0; j < d; ++j) out->at(i, j) /= sum;
    }
    record([=] {
      if (a->requires_grad) {
        for (int i = 0; i < n; ++i) {
          double dot = 0.0;
          for (int j = 0; j < d; ++j) {
            dot += out->grad[static_cast<size_t>(i) * d + j] * out->value[static_cast<size_t>(i) * d + j];
          }
          for (int j = 0; j < d; ++j) {
            size_t k = static_cast<size_t>(i) * d + j;
            a->grad[k] += out->value[k] * (out->grad[k] - dot);
          }
        }
      }
    }, out);
    return out;
  }

  Tensor* layer_norm(Tensor* a, Tensor* gain, Tensor* bias, double eps = 1e-5) {
    tensor_detail::require(a->shape.size() == 2 && gain->shape.size() == 1 &&
                               bias->shape.size() == 1 && gain->shape[0] == a->cols() &&
                               bias->shape[0] == a->cols(),
                           "layer_norm gain/bias must match row width");
    const int n = a->rows(), d = a->cols();
    Tensor* out = alloc_like(a->shape, {a, gain, bias});
    // Saved normalized rows and inverse sigmas for the adjoint.
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * d);
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      double mean = 0.0;
      for (int j = 0; j < d; ++j) mean += a->at(i, j);
      mean /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) {
        double c = a->at(i, j) - mean;
        var += c * c;
      }
      var /= d;
      double is = 1.0 / std::sqrt(var + eps);
      (*inv_sigma)[static_cast<size_t>(i)] = is;
      for (int j = 0; j < d; ++j) {
        double xh = (a->at(i, j) - mean) * is;
        (*xhat)[static_cast<size_t>(i) * d + j] = xh;
        out->at(i, j) = xh * gain->at(j) + bias->at(j);
      }
    }
    record([=] {
      for (int i = 0; i < n; ++i) {
        const size_t row = static_cast<size_t>(i) * d;
        if (gain->requires_grad || bias->requires_grad) {
          for (int j = 0; j < d; ++j) {
            double g = out->grad[row + j];
            if (gain->requires_grad) gain->grad[static_cast<size_t>(j)] += g * (*xhat)[row + j];
            if (bias->requires_grad) bias->grad[static_cast<size_t>(j)] += g;
          }
        }
        if (a->requires_grad) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int j = 0; j < d; ++j) {
            double dxh = out->grad[row + j] * gain->at(j);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * (*xhat)[row + j];
          }
          mean_dxhat /= d;
          mean_dxhat_xhat /= d;
          double is = (*inv_sigma)[static_cast<size_t>(i)];
          for (int j = 0; j < d; ++j) {
            double dxh = out->grad[row + j] * gain->at(j);
            a->grad[row + j] += is * (dxh - mean_dxhat - (*xhat)[row + j] * mean_dxhat_xhat);
          }
        }
      }
    }, out);
    return out;
  }

  Tensor* gelu(Tensor* a) {
    constexpr double inv_sqrt_2 = 0.70710678118654752440;
    Tensor* out = alloc_like(a->shape, {a});
    for (size_t i = 0; i < out->value.size(); ++i) {
      double x = a->value[i];
      out->value[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt_2));
    }
    record([=] {
      if (a->requires_grad) {
        constexpr double inv_sqrt_2pi = 0.3989422804014326779;
        for (size_t i = 0; i < out->value.size(); ++i) {
          double x = a->value[i];
          double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt_2));
          double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
          a->grad[i] += (cdf + x * pdf) * out->grad[i];
        }
      }
    }, out);
    return out;
  }

  // Scalar sum of all entries.
  Tensor* sum(Tensor* a) {
    Tensor* out = alloc_like({1}, {a});
    double s = 0.0;
    for (double x : a->value) s += x;
    out->value[0] = s;
    record([=] {
      if (a->requires_grad) {
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[0];
      }
    }, out);
    return out;
  }

  // --- losses -----------------------------------------------------------------

  // Weighted sum of per-row cross-entropies: Σ_i w_i · (−log softmax(row_i)[t_i]).
  // Rows with weight 0 contribute nothing, gradient included.
  Tensor* cross_entropy_rows(Tensor* logits, const std::vector<int>& targets,
                             const std::vector<double>& weights) {
    tensor_detail::require(logits->shape.size() == 2 &&
                               targets.size() == static_cast<size_t>(logits->rows()) &&
                               weights.size() == targets.size(),
                           "cross_entropy_rows: one target and weight per row");
    const int n = logits->rows(), d = logits->cols();
    for (int t : targets) {
      if (t < 0 || t >= d) throw std::out_of_range("cross_entropy_rows: target outside vocab");
    }
    Tensor* out = alloc_like({1}, {logits});
    // Save softmax rows for the adjoint.
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * d);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double mx = logits->at(i, 0);
      for (int j = 1; j < d; ++j) mx = std::max(mx, logits->at(i, j));
      double sum = 0.0;
      for (int j = 0; j < d; ++j) {
        double e = std::exp(logits->at(i, j) - mx);
        (*probs)[static_cast<size_t>(i) * d + j] = e;
        sum += e;
      }
      double log_sum = std::log(sum);
      for (int j = 0; j < d; ++j) (*probs)[static_cast<size_t>(i) * d + j] /= sum;
      if (weights[static_cast<size_t>(i)] != 0.0) {
        double log_p = logits->at(i, targets[static_cast<size_t>(i)]) - mx - log_sum;
        total -= weights[static_cast<size_t>(i)] * log_p;
      }
    }
    out->value[0] = total;
    std::vector<int> saved_t = targets;
    std::vector<double> saved_w = weights;
    record([=] {
      if (logits->requires_grad) {
        double g = out->grad[0];
        for (int i = 0; i < n; ++i) {
          double w = saved_w[static_cast<size_t>(i)];
          if (w == 0.0) continue;
          for (int j = 0; j < d; ++j) {
            size_t k = static_cast<size_t>(i) * d + j;
            double onehot = j == saved_t[static_cast<size_t>(i)] ? 1.0 : 0.0;
            logits->grad[k] += g * w * ((*probs)[k] - onehot);
          }
        }
      }
    }, out);
    return out;
  }

  Tensor* cross_entropy(Tensor* logits_row, int target) {
    tensor_detail::require(logits_row->shape.size() == 1, "cross_entropy takes a logit vector");
    Tensor* as_mat = reshape_view(logits_row, {1, logits_row->shape[0]});
    return cross_entropy_rows(as_mat, {target}, {1.0});
  }

 private:
  // Copy-reshape with pass-through gradient; internal helper.
  Tensor* reshape_view(Tensor* a, std::vector<int> shape) {
    Tensor* out = alloc_like(std::move(shape), {a});
    tensor_detail::require(out->value.size() == a->value.size(), "reshape changes element count");
    out->value = a->value;
    record([=] {
      if (a->requires_grad) {
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
      }
    }, out);
    return out;
  }

  Tensor* alloc_like(std::vector<int> shape, const std::vector<Tensor*>& inputs) {
    Tensor* out = tensor(std::move(shape));
    if (recording) {
      for (const Tensor* in : inputs) {
        if (in->requires_grad) {
          out->requires_grad = true;
          out->grad.assign(out->value.size(), 0.0);
          break;
        }
      }
    }
    return out;
  }

  template <typename F>
  void record(F&& f, Tensor* out) {
    if (recording && out->requires_grad) backops_.emplace_back(std::forward<F>(f));
  }

  std::vector<std::unique_ptr<Tensor>> nodes_;
  std::vector<std::function<void()>> backops_;
};

// ---------------------------------------------------------------------
// Decoupled-weight-decay adaptive-moment optimizer. Scalar loops in a
// fixed order: the update is bitwise deterministic for a given trace.
// ---------------------------------------------------------------------

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  int64_t step = 0;
  std::vector<std::vector<double>> m;  // first moments, one slot per parameter tensor
  std::vector<std::vector<double>> v;  // second moments

  void init(const std::vector<Tensor*>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const Tensor* p : params) {
      m.emplace_back(p->value.size(), 0.0);
      v.emplace_back(p->value.size(), 0.0);
    }
  }
};

inline void adamw_step(const std::vector<Tensor*>& params, AdamWState& state,
                       const AdamWConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeMismatchError("optimizer state does not cover the parameter list");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p];
    if (!t.requires_grad) throw std::logic_error("adamw_step: parameter without gradient");
    if (state.m[p].size() != t.value.size()) {
      throw ShapeMismatchError("optimizer slot does not match parameter size");
    }
    for (size_t i = 0; i < t.value.size(); ++i) {
      double g = t.grad[i];
      state.m[p][i] = cfg.beta1 * state.m[p][i] + (1.0 - cfg.beta1) * g;
      state.v[p][i] = cfg.beta2 * state.v[p][i] + (1.0 - cfg.beta2) * g * g;
      double mhat = state.m[p][i] / bc1;
      double vhat = state.v[p][i] / bc2;
      t.value[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * t.value[i]);
    }
  }
}

}  // namespace moldiff
