// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#include "mixcal/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>
#include <fmt/format.h>

#include "mixcal/errors.hpp"

namespace mixcal::ad {

namespace {

using detail::Node;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMatrix>;
using CMap = Eigen::Map<const RowMatrix>;

bool wants_grad(const Node& n, std::size_t parent) {
  return n.parents[parent]->requires_grad;
}

std::vector<double>& pgrad(Node& n, std::size_t parent) {
  return n.parents[parent]->grad_buffer();
}

const std::vector<double>& pvalue(const Node& n, std::size_t parent) {
  return n.parents[parent]->value;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()),
                                     shape_str(b.shape())));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.dim() != 2) {
    throw DimensionError(fmt::format("{}: expected a matrix, got {}", op, shape_str(a.shape())));
  }
}

void require_finite(const Tensor& a, const char* op) {
  for (double x : a.data()) {
    if (!std::isfinite(x)) throw NumericError(fmt::format("{}: non-finite input", op));
  }
}

// Row-wise max-subtracted log-sum-exp.
double log_sum_exp(const double* row, std::size_t n) {
  double mx = *std::max_element(row, row + n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
  return mx + std::log(s);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError(fmt::format("matmul: inner dimensions differ, {} · {}",
                                     shape_str(a.shape()), shape_str(b.shape())));
  }
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& G = self.grad;
    const auto& A = pvalue(self, 0);
    const auto& B = pvalue(self, 1);
    if (wants_grad(self, 0)) {
      auto& dA = pgrad(self, 0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          dA[i * k + p] += s;
        }
    }
    if (wants_grad(self, 1)) {
      auto& dB = pgrad(self, 1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
        }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_matrix(w, "linear");
  const std::size_t in = w.shape()[1], out_dim = w.shape()[0];
  if (x.cols() != in) {
    throw DimensionError(fmt::format("linear: input {} does not match weight {}",
                                     shape_str(x.shape()), shape_str(w.shape())));
  }
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto ni = static_cast<Eigen::Index>(in), no = static_cast<Eigen::Index>(out_dim);
  std::vector<double> out(static_cast<std::size_t>(n) * out_dim);
  CMap X(x.data().data(), n, ni), W(w.data().data(), no, ni);
  Map(out.data(), n, no).noalias() = X * W.transpose();
  Shape shape = x.shape();
  shape.back() = out_dim;
  return Tensor::make_result(std::move(shape), std::move(out), {x, w}, [n, ni, no](Node& self) {
    CMap G(self.grad.data(), n, no);
    if (wants_grad(self, 0)) {
      Map(pgrad(self, 0).data(), n, ni).noalias() += G * CMap(pvalue(self, 1).data(), no, ni);
    }
    if (wants_grad(self, 1)) {
      Map(pgrad(self, 1).data(), no, ni).noalias() += G.transpose() * CMap(pvalue(self, 0).data(), n, ni);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(self, p)) continue;
      auto& d = pgrad(self, p);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) {
      auto& d = pgrad(self, 0);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& d = pgrad(self, 1);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& A = pvalue(self, 0);
    const auto& B = pvalue(self, 1);
    if (wants_grad(self, 0)) {
      auto& d = pgrad(self, 0);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * B[i];
    }
    if (wants_grad(self, 1)) {
      auto& d = pgrad(self, 1);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * A[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.at(i);
  return Tensor::make_result(a.shape(), std::move(out), {a}, [c](Node& self) {
    auto& d = pgrad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += c * self.grad[i];
  });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * a.at(i);
  return Tensor::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    const auto& A = pvalue(self, 0);
    auto& d = pgrad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += 2.0 * A[i] * self.grad[i];
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.at(i);
    out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  return Tensor::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    const auto& A = pvalue(self, 0);
    auto& d = pgrad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x = A[i];
      const double t = std::tanh(kC * (x + kA * x * x * x));
      const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
      d[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t m = x.cols();
  if (b.numel() != m) {
    throw DimensionError(fmt::format("add_bias: bias {} does not match rows of {}",
                                     shape_str(b.shape()), shape_str(x.shape())));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.at(i % m);
  return Tensor::make_result(x.shape(), std::move(out), {x, b}, [m](Node& self) {
    if (wants_grad(self, 0)) {
      auto& d = pgrad(self, 0);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& d = pgrad(self, 1);
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i % m] += self.grad[i];
    }
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& g) {
  const std::size_t n = x.rows(), m = x.cols();
  if (g.numel() != n) {
    throw DimensionError(fmt::format("scale_rows: {} row factors for {}",
                                     g.numel(), shape_str(x.shape())));
  }
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = x.at(r * m + c) * g.at(r);
  return Tensor::make_result(x.shape(), std::move(out), {x, g}, [n, m](Node& self) {
    const auto& X = pvalue(self, 0);
    const auto& Gs = pvalue(self, 1);
    if (wants_grad(self, 0)) {
      auto& d = pgrad(self, 0);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) d[r * m + c] += self.grad[r * m + c] * Gs[r];
    }
    if (wants_grad(self, 1)) {
      auto& d = pgrad(self, 1);
      for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < m; ++c) s += self.grad[r * m + c] * X[r * m + c];
        d[r] += s;
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  const double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return Tensor::make_result({1}, {s}, {a}, [](Node& self) {
    auto& d = pgrad(self, 0);
    for (auto& x : d) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_rows(const Tensor& a) {
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r] += a.at(r * m + c);
  return Tensor::make_result({n}, std::move(out), {a}, [m](Node& self) {
    auto& d = pgrad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i / m];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError(fmt::format("reshape: {} to {}", shape_str(a.shape()),
                                     shape_str(shape)));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& d = pgrad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
  });
}

Tensor select(const Tensor& a, std::size_t index) {
  if (index >= a.numel()) {
    throw IndexError(fmt::format("select: index {} out of range for {}", index,
                                 shape_str(a.shape())));
  }
  return Tensor::make_result({1}, {a.at(index)}, {a}, [index](Node& self) {
    pgrad(self, 0)[index] += self.grad[0];
  });
}

Tensor softmax(const Tensor& v) {
  require_finite(v, "softmax");
  const std::size_t n = v.rows(), m = v.cols();
  std::vector<double> out(v.numel());
  const auto V = v.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = &V[r * m];
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += (out[r * m + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] /= s;
  }
  return Tensor::make_result(v.shape(), out, {v}, [n, m, y = out](Node& self) {
    auto& d = pgrad(self, 0);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < m; ++c) dot += self.grad[r * m + c] * y[r * m + c];
      for (std::size_t c = 0; c < m; ++c)
        d[r * m + c] += y[r * m + c] * (self.grad[r * m + c] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& v) {
  require_finite(v, "log_softmax");
  const std::size_t n = v.rows(), m = v.cols();
  std::vector<double> out(v.numel());
  const auto V = v.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double lse = log_sum_exp(&V[r * m], m);
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = V[r * m + c] - lse;
  }
  return Tensor::make_result(v.shape(), out, {v}, [n, m, y = out](Node& self) {
    auto& d = pgrad(self, 0);
    for (std::size_t r = 0; r < n; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < m; ++c) gs += self.grad[r * m + c];
      for (std::size_t c = 0; c < m; ++c)
        d[r * m + c] += self.grad[r * m + c] - std::exp(y[r * m + c]) * gs;
    }
  });
}

Tensor layer_norm(const Tensor& v, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = v.rows(), m = v.cols();
  if (m < 2) throw DimensionError("layer_norm: row width must be at least 2");
  if (gain.numel() != m || bias.numel() != m) {
    throw DimensionError(fmt::format("layer_norm: gain {} / bias {} for rows of width {}",
                                     shape_str(gain.shape()), shape_str(bias.shape()), m));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  require_finite(v, "layer_norm");
  std::vector<double> xhat(v.numel()), rstd(n), out(v.numel());
  const auto V = v.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = &V[r * m];
    double mu = 0.0;
    for (std::size_t c = 0; c < m; ++c) mu += row[c];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t c = 0; c < m; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(m);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < m; ++c) {
      xhat[r * m + c] = (row[c] - mu) * rstd[r];
      out[r * m + c] = xhat[r * m + c] * gain.at(c) + bias.at(c);
    }
  }
  return Tensor::make_result(
      v.shape(), std::move(out), {v, gain, bias},
      [n, m, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        const auto& G = self.grad;
        const auto& gainv = pvalue(self, 1);
        if (wants_grad(self, 1)) {
          auto& d = pgrad(self, 1);
          for (std::size_t i = 0; i < G.size(); ++i) d[i % m] += G[i] * xhat[i];
        }
        if (wants_grad(self, 2)) {
          auto& d = pgrad(self, 2);
          for (std::size_t i = 0; i < G.size(); ++i) d[i % m] += G[i];
        }
        if (wants_grad(self, 0)) {
          auto& d = pgrad(self, 0);
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
              const double gh = G[r * m + c] * gainv[c];
              mean_g += gh;
              mean_gx += gh * xhat[r * m + c];
            }
            mean_g *= inv_m;
            mean_gx *= inv_m;
            for (std::size_t c = 0; c < m; ++c) {
              const double gh = G[r * m + c] * gainv[c];
              d[r * m + c] += rstd[r] * (gh - mean_g - xhat[r * m + c] * mean_gx);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t one[] = {label};
  if (logits.rows() != 1) {
    throw DimensionError(fmt::format("cross_entropy: expected one logit vector, got {}",
                                     shape_str(logits.shape())));
  }
  return cross_entropy_rows(logits, one);
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t n = logits.rows(), m = logits.cols();
  if (labels.size() != n) {
    throw DimensionError(fmt::format("cross_entropy: {} labels for {} rows", labels.size(), n));
  }
  for (auto y : labels) {
    if (y >= m) throw IndexError(fmt::format("cross_entropy: label {} out of range [0, {})", y, m));
  }
  require_finite(logits, "cross_entropy");
  std::vector<double> probs(logits.numel());
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  double total = 0.0;
  const auto L = logits.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double lse = log_sum_exp(&L[r * m], m);
    total += lse - L[r * m + ys[r]];
    for (std::size_t c = 0; c < m; ++c) probs[r * m + c] = std::exp(L[r * m + c] - lse);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return Tensor::make_result({1}, {total * inv_n}, {logits},
                             [n, m, inv_n, probs = std::move(probs), ys = std::move(ys)](Node& self) {
    auto& d = pgrad(self, 0);
    const double g = self.grad[0] * inv_n;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c)
        d[r * m + c] += g * (probs[r * m + c] - (c == ys[r] ? 1.0 : 0.0));
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t n = x.rows(), m = x.cols();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * m);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw IndexError(fmt::format("gather_rows: row {} of {}", idx[i], n));
    std::copy_n(&x.data()[idx[i] * m], m, &out[i * m]);
  }
  const std::size_t count = idx.size();
  return Tensor::make_result({count, m}, std::move(out), {x},
                             [m, idx = std::move(idx)](Node& self) {
    auto& d = pgrad(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < m; ++c) d[idx[i] * m + c] += self.grad[i * m + c];
  });
}

Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t n_rows) {
  const std::size_t m = x.cols();
  if (index.size() != x.rows()) {
    throw DimensionError(fmt::format("scatter_rows: {} indices for {} rows", index.size(),
                                     x.rows()));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(n_rows * m, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n_rows) throw IndexError(fmt::format("scatter_rows: row {} of {}", idx[i], n_rows));
    for (std::size_t c = 0; c < m; ++c) out[idx[i] * m + c] += x.at(i * m + c);
  }
  return Tensor::make_result({n_rows, m}, std::move(out), {x},
                             [m, idx = std::move(idx)](Node& self) {
    auto& d = pgrad(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < m; ++c) d[i * m + c] += self.grad[idx[i] * m + c];
  });
}

Tensor gather_elements(const Tensor& x, std::span<const std::size_t> rows,
                       std::span<const std::size_t> cols) {
  if (rows.size() != cols.size() || rows.empty()) {
    throw DimensionError(fmt::format("gather_elements: {} rows vs {} cols", rows.size(),
                                     cols.size()));
  }
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n || cols[i] >= m) {
      throw IndexError(fmt::format("gather_elements: ({}, {}) outside {}", rows[i], cols[i],
                                   shape_str(x.shape())));
    }
    flat[i] = rows[i] * m + cols[i];
    out[i] = x.at(flat[i]);
  }
  const std::size_t count = flat.size();
  return Tensor::make_result({count}, std::move(out), {x},
                             [flat = std::move(flat)](Node& self) {
    auto& d = pgrad(self, 0);
    for (std::size_t i = 0; i < flat.size(); ++i) d[flat[i]] += self.grad[i];
  });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const std::size_t> segment_lengths, double scale_factor) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t n = q.rows(), m = q.cols();
  std::vector<std::size_t> segs(segment_lengths.begin(), segment_lengths.end());
  if (std::accumulate(segs.begin(), segs.end(), std::size_t{0}) != n) {
    throw DimensionError(fmt::format("causal_attention: segments do not cover {} rows", n));
  }
  // probs[offset(t) + j] for row t, key j <= t within its segment.
  std::vector<double> probs;
  std::vector<double> out(n * m, 0.0);
  const auto Q = q.data(), K = k.data(), V = v.data();
  std::size_t start = 0;
  for (auto len : segs) {
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t row = start + t;
      const std::size_t base = probs.size();
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= t; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < m; ++c) s += Q[row * m + c] * K[(start + j) * m + c];
        s *= scale_factor;
        probs.push_back(s);
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= t; ++j) z += (probs[base + j] = std::exp(probs[base + j] - mx));
      for (std::size_t j = 0; j <= t; ++j) {
        probs[base + j] /= z;
        for (std::size_t c = 0; c < m; ++c) out[row * m + c] += probs[base + j] * V[(start + j) * m + c];
      }
    }
    start += len;
  }
  return Tensor::make_result(
      q.shape(), std::move(out), {q, k, v},
      [m, scale_factor, segs = std::move(segs), probs = std::move(probs)](Node& self) {
        const auto& G = self.grad;
        const auto& Q = pvalue(self, 0);
        const auto& K = pvalue(self, 1);
        const auto& V = pvalue(self, 2);
        const bool gq = wants_grad(self, 0), gk = wants_grad(self, 1), gv = wants_grad(self, 2);
        std::vector<double>* dQ = gq ? &pgrad(self, 0) : nullptr;
        std::vector<double>* dK = gk ? &pgrad(self, 1) : nullptr;
        std::vector<double>* dV = gv ? &pgrad(self, 2) : nullptr;
        std::vector<double> dscore;
        std::size_t start = 0, off = 0;
        for (auto len : segs) {
          for (std::size_t t = 0; t < len; ++t) {
            const std::size_t row = start + t;
            const double* p = &probs[off];
            dscore.assign(t + 1, 0.0);
            double pdp = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
              double dp = 0.0;
              for (std::size_t c = 0; c < m; ++c) dp += G[row * m + c] * V[(start + j) * m + c];
              dscore[j] = dp;
              pdp += p[j] * dp;
              if (dV)
                for (std::size_t c = 0; c < m; ++c) (*dV)[(start + j) * m + c] += p[j] * G[row * m + c];
            }
            for (std::size_t j = 0; j <= t; ++j) {
              const double ds = p[j] * (dscore[j] - pdp) * scale_factor;
              if (ds == 0.0) continue;
              for (std::size_t c = 0; c < m; ++c) {
                if (dQ) (*dQ)[row * m + c] += ds * K[(start + j) * m + c];
                if (dK) (*dK)[(start + j) * m + c] += ds * Q[row * m + c];
              }
            }
            off += t + 1;
          }
          start += len;
        }
      });
}

Tensor segment_mean(const Tensor& x, std::span<const std::size_t> segment_lengths) {
  std::vector<std::size_t> segs(segment_lengths.begin(), segment_lengths.end());
  if (std::accumulate(segs.begin(), segs.end(), std::size_t{0}) != x.numel()) {
    throw DimensionError(fmt::format("segment_mean: segments do not cover {} entries", x.numel()));
  }
  std::vector<double> out(segs.size(), 0.0);
  std::size_t start = 0;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    if (segs[s] == 0) throw DimensionError("segment_mean: empty segment");
    for (std::size_t i = 0; i < segs[s]; ++i) out[s] += x.at(start + i);
    out[s] /= static_cast<double>(segs[s]);
    start += segs[s];
  }
  const std::size_t count = segs.size();
  return Tensor::make_result({count}, std::move(out), {x},
                             [segs = std::move(segs)](Node& self) {
    auto& d = pgrad(self, 0);
    std::size_t start = 0;
    for (std::size_t s = 0; s < segs.size(); ++s) {
      const double g = self.grad[s] / static_cast<double>(segs[s]);
      for (std::size_t i = 0; i < segs[s]; ++i) d[start + i] += g;
      start += segs[s];
    }
  });
}

std::vector<std::size_t> topk_rows(const Tensor& x, std::size_t k) {
  const std::size_t n = x.rows(), m = x.cols();
  if (k == 0 || k > m) throw ContractError(fmt::format("topk_rows: k={} for rows of {}", k, m));
  std::vector<std::size_t> out(n * k);
  std::vector<std::size_t> order(m);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = &x.data()[r * m];
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [row](std::size_t a, std::size_t b) {
                        return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    std::copy_n(order.begin(), k, &out[r * k]);
  }
  return out;
}

std::vector<std::size_t> argmax_rows(const Tensor& x) { return topk_rows(x, 1); }

}  // namespace mixcal::ad
