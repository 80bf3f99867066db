#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "qid/numerics/tensor.hpp"

namespace qid {

namespace detail {

template <std::floating_point S>
void require_matrix(const Tensor<S>& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

template <std::floating_point S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
template <std::floating_point S>
void gemm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    const S* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S{0}) continue;
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <std::floating_point S>
void gemm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <std::floating_point S>
void gemm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S{0}) continue;
      S* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <std::floating_point S>
S gelu_value(S x) {
  constexpr S kC = static_cast<S>(0.7978845608028654);  // sqrt(2 / pi)
  constexpr S kA = static_cast<S>(0.044715);
  return S{0.5} * x * (S{1} + std::tanh(kC * (x + kA * x * x * x)));
}

template <std::floating_point S>
S gelu_derivative(S x) {
  constexpr S kC = static_cast<S>(0.7978845608028654);
  constexpr S kA = static_cast<S>(0.044715);
  const S t = std::tanh(kC * (x + kA * x * x * x));
  return S{0.5} * (S{1} + t) + S{0.5} * x * (S{1} - t * t) * kC * (S{1} + S{3} * kA * x * x);
}

}  // namespace detail

/// a[m x k] * b[k x n].
template <std::floating_point S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<S> out(m * n, S{0});
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  FlopCounter::add(2 * m * k * n);
  return detail::make_result<S>("matmul", Shape{m, n}, std::move(out), {a.node(), b.node()},
                                [m, k, n](detail::Node<S>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) {
                                    pa.ensure_grad();
                                    detail::gemm_nt(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
                                  }
                                  if (pb.requires_grad) {
                                    pb.ensure_grad();
                                    detail::gemm_tn(pa.value.data(), self.grad.data(), pb.grad.data(), m, k, n);
                                  }
                                });
}

/// a[m x k] * b[n x k]^T, used for attention logits.
template <std::floating_point S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  std::vector<S> out(m * n, S{0});
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  FlopCounter::add(2 * m * k * n);
  return detail::make_result<S>("matmul_nt", Shape{m, n}, std::move(out), {a.node(), b.node()},
                                [m, k, n](detail::Node<S>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) {
                                    pa.ensure_grad();
                                    detail::gemm_nn(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
                                  }
                                  if (pb.requires_grad) {
                                    pb.ensure_grad();
                                    detail::gemm_tn(self.grad.data(), pa.value.data(), pb.grad.data(), m, n, k);
                                  }
                                });
}

template <std::floating_point S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  FlopCounter::add(out.size());
  return detail::make_result<S>("add", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node<S>& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      parent->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) parent->grad[i] += self.grad[i];
    }
  });
}

/// x[r x c] + bias broadcast over rows; bias has c elements.
template <std::floating_point S>
Tensor<S> add_rowwise(const Tensor<S>& x, const Tensor<S>& bias) {
  detail::require_matrix(x, "add_rowwise");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (bias.numel() != c) {
    throw DimensionError("add_rowwise: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  std::vector<S> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + bias[j];
  FlopCounter::add(r * c);
  return detail::make_result<S>("add_rowwise", x.shape(), std::move(out), {x.node(), bias.node()},
                                [r, c](detail::Node<S>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (px.requires_grad) {
                                    px.ensure_grad();
                                    for (std::size_t i = 0; i < r * c; ++i) px.grad[i] += self.grad[i];
                                  }
                                  if (pb.requires_grad) {
                                    pb.ensure_grad();
                                    for (std::size_t i = 0; i < r; ++i)
                                      for (std::size_t j = 0; j < c; ++j) pb.grad[j] += self.grad[i * c + j];
                                  }
                                });
}

template <std::floating_point S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  FlopCounter::add(out.size());
  return detail::make_result<S>("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <std::floating_point S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  FlopCounter::add(out.size());
  return detail::make_result<S>("scale", x.shape(), std::move(out), {x.node()}, [factor](detail::Node<S>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * factor;
  });
}

/// Elementwise log(x + eps).
template <std::floating_point S>
Tensor<S> log_eps(const Tensor<S>& x, S eps) {
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (x[i] + eps <= S{0}) throw NumericalError("log_eps: non-positive argument");
    out[i] = std::log(x[i] + eps);
  }
  FlopCounter::add(2 * out.size());
  return detail::make_result<S>("log_eps", x.shape(), std::move(out), {x.node()}, [eps](detail::Node<S>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] / (px.value[i] + eps);
  });
}

/// Sum of all elements, shape [1].
template <std::floating_point S>
Tensor<S> sum(const Tensor<S>& x) {
  S total{0};
  for (S v : x.data()) total += v;
  FlopCounter::add(x.numel());
  return detail::make_result<S>("sum", Shape{1}, std::vector<S>{total}, {x.node()}, [](detail::Node<S>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (auto& g : px.grad) g += self.grad[0];
  });
}

/// x / sum(x). Caller guarantees a positive total.
template <std::floating_point S>
Tensor<S> normalize_sum(const Tensor<S>& x) {
  S total{0};
  for (S v : x.data()) total += v;
  if (!(total > S{0})) throw NumericalError("normalize_sum: total mass is not positive");
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / total;
  FlopCounter::add(2 * x.numel());
  return detail::make_result<S>("normalize_sum", x.shape(), std::move(out), {x.node()},
                                [total](detail::Node<S>& self) {
                                  auto& px = *self.parents[0];
                                  px.ensure_grad();
                                  S dot{0};
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) dot += self.grad[i] * self.value[i];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    px.grad[i] += (self.grad[i] - dot) / total;
                                });
}

/// Column means over rows: x[r x c] -> [1 x c].
template <std::floating_point S>
Tensor<S> mean_rows(const Tensor<S>& x) {
  detail::require_matrix(x, "mean_rows");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<S> out(c, S{0});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[i * c + j];
  const S inv = S{1} / static_cast<S>(r);
  for (auto& v : out) v *= inv;
  FlopCounter::add(r * c + c);
  return detail::make_result<S>("mean_rows", Shape{1, c}, std::move(out), {x.node()},
                                [r, c, inv](detail::Node<S>& self) {
                                  auto& px = *self.parents[0];
                                  px.ensure_grad();
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j) px.grad[i * c + j] += self.grad[j] * inv;
                                });
}

/// Row-wise softmax with max subtraction.
template <std::floating_point S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  for (S v : x.data()) {
    if (!std::isfinite(v)) throw NumericalError("softmax_rows: non-finite input");
  }
  std::vector<S> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const S* row = x.data().data() + i * c;
    S* dst = out.data() + i * c;
    const S peak = *std::max_element(row, row + c);
    S total{0};
    for (std::size_t j = 0; j < c; ++j) {
      dst[j] = std::exp(row[j] - peak);
      total += dst[j];
    }
    for (std::size_t j = 0; j < c; ++j) dst[j] /= total;
  }
  FlopCounter::add(4 * r * c);
  return detail::make_result<S>("softmax_rows", x.shape(), std::move(out), {x.node()},
                                [r, c](detail::Node<S>& self) {
                                  auto& px = *self.parents[0];
                                  px.ensure_grad();
                                  for (std::size_t i = 0; i < r; ++i) {
                                    const S* y = self.value.data() + i * c;
                                    const S* dy = self.grad.data() + i * c;
                                    S dot{0};
                                    for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
                                    for (std::size_t j = 0; j < c; ++j) px.grad[i * c + j] += y[j] * (dy[j] - dot);
                                  }
                                });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row normalization to zero mean and unit (population) variance, then
/// gain * xhat + shift.
template <std::floating_point S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& shift) {
  detail::require_matrix(x, "layernorm");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (c < 2) throw DimensionError("layernorm: needs at least 2 columns, got " + shape_string(x.shape()));
  if (gain.numel() != c || shift.numel() != c) {
    throw DimensionError("layernorm: affine parameters do not match " + shape_string(x.shape()));
  }
  std::vector<S> out(r * c);
  auto xhat = std::make_shared<std::vector<S>>(r * c);
  auto inv_std = std::make_shared<std::vector<S>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const S* row = x.data().data() + i * c;
    S mean{0};
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<S>(c);
    S var{0};
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<S>(c);
    const S istd = S{1} / std::sqrt(var + static_cast<S>(kLayerNormEps));
    (*inv_std)[i] = istd;
    for (std::size_t j = 0; j < c; ++j) {
      const S h = (row[j] - mean) * istd;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = gain[j] * h + shift[j];
    }
  }
  FlopCounter::add(8 * r * c);
  return detail::make_result<S>(
      "layernorm", x.shape(), std::move(out), {x.node(), gain.node(), shift.node()},
      [r, c, xhat, inv_std](detail::Node<S>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) {
          pg.ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) pg.grad[j] += self.grad[i * c + j] * (*xhat)[i * c + j];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) pb.grad[j] += self.grad[i * c + j];
        }
        if (px.requires_grad) {
          px.ensure_grad();
          const S inv_c = S{1} / static_cast<S>(c);
          for (std::size_t i = 0; i < r; ++i) {
            S sum_d{0}, sum_dh{0};
            for (std::size_t j = 0; j < c; ++j) {
              const S d = self.grad[i * c + j] * pg.value[j];
              sum_d += d;
              sum_dh += d * (*xhat)[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const S d = self.grad[i * c + j] * pg.value[j];
              px.grad[i * c + j] += (*inv_std)[i] * (d - inv_c * sum_d - (*xhat)[i * c + j] * inv_c * sum_dh);
            }
          }
        }
      });
}

/// tanh-approximation GELU.
template <std::floating_point S>
Tensor<S> gelu(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::gelu_value(x[i]);
  FlopCounter::add(10 * out.size());
  return detail::make_result<S>("gelu", x.shape(), std::move(out), {x.node()}, [](detail::Node<S>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * detail::gelu_derivative(px.value[i]);
  });
}

/// Rows [begin, begin + count) of x.
template <std::floating_point S>
Tensor<S> slice_rows(const Tensor<S>& x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (count == 0 || begin + count > r) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_string(x.shape()));
  }
  std::vector<S> out(x.data().begin() + begin * c, x.data().begin() + (begin + count) * c);
  return detail::make_result<S>("slice_rows", Shape{count, c}, std::move(out), {x.node()},
                                [begin, c](detail::Node<S>& self) {
                                  auto& px = *self.parents[0];
                                  px.ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[begin * c + i] += self.grad[i];
                                });
}

/// Columns [begin, begin + count) of x.
template <std::floating_point S>
Tensor<S> slice_cols(const Tensor<S>& x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (count == 0 || begin + count > c) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_string(x.shape()));
  }
  std::vector<S> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * c + begin + j];
  return detail::make_result<S>("slice_cols", Shape{r, count}, std::move(out), {x.node()},
                                [r, c, begin, count](detail::Node<S>& self) {
                                  auto& px = *self.parents[0];
                                  px.ensure_grad();
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < count; ++j)
                                      px.grad[i * c + begin + j] += self.grad[i * count + j];
                                });
}

/// Stacks a on top of b; both must have the same column count.
template <std::floating_point S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  const std::size_t c = a.shape()[1];
  if (b.shape()[1] != c) {
    throw DimensionError("concat_rows: column mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t ra = a.shape()[0], rb = b.shape()[0];
  std::vector<S> out;
  out.reserve((ra + rb) * c);
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return detail::make_result<S>("concat_rows", Shape{ra + rb, c}, std::move(out), {a.node(), b.node()},
                                [ra, c](detail::Node<S>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) {
                                    pa.ensure_grad();
                                    for (std::size_t i = 0; i < ra * c; ++i) pa.grad[i] += self.grad[i];
                                  }
                                  if (pb.requires_grad) {
                                    pb.ensure_grad();
                                    for (std::size_t i = 0; i < pb.grad.size(); ++i) pb.grad[i] += self.grad[ra * c + i];
                                  }
                                });
}

/// Places matrices with equal row counts side by side.
template <std::floating_point S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  std::vector<std::shared_ptr<detail::Node<S>>> parents;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.shape()[0] != r) throw DimensionError("concat_cols: row mismatch at " + shape_string(p.shape()));
    offsets.push_back(total);
    total += p.shape()[1];
    parents.push_back(p.node());
  }
  std::vector<S> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].shape()[1];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offsets[k] + j] = parts[k][i * w + j];
  }
  return detail::make_result<S>("concat_cols", Shape{r, total}, std::move(out), std::move(parents),
                                [r, total, offsets](detail::Node<S>& self) {
                                  for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                    auto& p = *self.parents[k];
                                    if (!p.requires_grad) continue;
                                    p.ensure_grad();
                                    const std::size_t w = p.shape[1];
                                    for (std::size_t i = 0; i < r; ++i)
                                      for (std::size_t j = 0; j < w; ++j)
                                        p.grad[i * w + j] += self.grad[i * total + offsets[k] + j];
                                  }
                                });
}

/// Same values under a new shape with equal element count.
template <std::floating_point S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " cannot become " + shape_string(shape));
  }
  std::vector<S> out(x.data().begin(), x.data().end());
  return detail::make_result<S>("reshape", std::move(shape), std::move(out), {x.node()}, [](detail::Node<S>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
  });
}

/// -log softmax(logits)[label]; logits hold K values in any rank-1 or 1 x K
/// layout.
template <std::floating_point S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::size_t label) {
  const std::size_t k = logits.numel();
  if (logits.rows() != 1) throw DimensionError("cross_entropy: expected one row of logits, got " + shape_string(logits.shape()));
  if (label >= k) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
  }
  const auto values = logits.data();
  const S peak = *std::max_element(values.begin(), values.end());
  S total{0};
  for (S v : values) total += std::exp(v - peak);
  const S log_z = peak + std::log(total);
  FlopCounter::add(3 * k);
  return detail::make_result<S>("cross_entropy", Shape{1}, std::vector<S>{log_z - values[label]}, {logits.node()},
                                [label, log_z](detail::Node<S>& self) {
                                  auto& px = *self.parents[0];
                                  px.ensure_grad();
                                  for (std::size_t j = 0; j < px.value.size(); ++j) {
                                    const S p = std::exp(px.value[j] - log_z);
                                    px.grad[j] += self.grad[0] * (p - (j == label ? S{1} : S{0}));
                                  }
                                });
}

}  // namespace qid
