#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "kinaema/nn/tensor.hpp"

namespace kinaema::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<Mat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const Mat<S>>;
template <class S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <class S>
using ConstArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

namespace detail {

// Leading dims collapse to rows; the last dim is the feature axis.
template <class S>
inline int lead_rows(const Tensor<S>& t) {
  return static_cast<int>(t.numel() / t.cols());
}

template <class S>
inline ConstMatMap<S> cmap(const Node<S>& n, int r, int c) {
  return ConstMatMap<S>(n.value.data(), r, c);
}

template <class S>
inline MatMap<S> gmap(Node<S>& n, int r, int c) {
  n.ensure_grad();
  return MatMap<S>(n.grad.data(), r, c);
}

template <class S, class V>
Tensor<S> make_op_vec(std::vector<int> shape, std::vector<S> value, const V& parents,
                      std::function<void(Node<S>&)> backprop_fn) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs && NoGradGuard::enabled()) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backprop = std::move(backprop_fn);
  }
  return Tensor<S>(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: a[..xk] * b[kxn] -> [..xn]
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (b.shape().size() != 2)
    throw ShapeError("matmul rhs must be 2-D, got " + shape_str(b.shape()));
  const int k = a.cols();
  if (k != b.dim(0))
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int m = detail::lead_rows(a);
  const int n = b.dim(1);

  std::vector<S> out(static_cast<size_t>(m) * n);
  {
    ConstMatMap<S> A(a.values().data(), m, k);
    ConstMatMap<S> B(b.values().data(), k, n);
    MatMap<S> C(out.data(), m, n);
    C.noalias() = A * B;
  }
  std::vector<int> out_shape = a.shape();
  out_shape.back() = n;
  return make_op<S>(std::move(out_shape), std::move(out), {a, b}, [m, k, n](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMatMap<S> G(self.grad.data(), m, n);
    if (pa.requires_grad) {
      auto A = detail::gmap(pa, m, k);
      A.noalias() += G * detail::cmap(pb, k, n).transpose();
    }
    if (pb.requires_grad) {
      auto B = detail::gmap(pb, k, n);
      B.noalias() += detail::cmap(pa, m, k).transpose() * G;
    }
  });
}

// ---------------------------------------------------------------------------
// affine: a[..xk] * w[kxn] + b[n] in one node
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> affine(const Tensor<S>& a, const Tensor<S>& w, const Tensor<S>& b) {
  if (w.shape().size() != 2)
    throw ShapeError("affine weight must be 2-D, got " + shape_str(w.shape()));
  const int k = a.cols();
  if (k != w.dim(0))
    throw ShapeError("affine inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(w.shape()));
  const int m = detail::lead_rows(a);
  const int n = w.dim(1);
  if (b.numel() != n) throw ShapeError("affine bias width mismatch");

  std::vector<S> out(static_cast<size_t>(m) * n);
  {
    ConstMatMap<S> A(a.values().data(), m, k);
    ConstMatMap<S> W(w.values().data(), k, n);
    MatMap<S> C(out.data(), m, n);
    C.noalias() = A * W;
    C.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.values().data(), n);
  }
  std::vector<int> out_shape = a.shape();
  out_shape.back() = n;
  return make_op<S>(std::move(out_shape), std::move(out), {a, w, b}, [m, k, n](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    ConstMatMap<S> G(self.grad.data(), m, n);
    if (pa.requires_grad) {
      auto A = detail::gmap(pa, m, k);
      A.noalias() += G * detail::cmap(pw, k, n).transpose();
    }
    if (pw.requires_grad) {
      auto W = detail::gmap(pw, k, n);
      W.noalias() += detail::cmap(pa, m, k).transpose() * G;
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(pb.grad.data(), n) += G.colwise().sum();
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------
template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  std::vector<S> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  return make_op<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& self) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "sub");
  std::vector<S> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  return make_op<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  std::vector<S> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  return make_op<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, double s) {
  std::vector<S> out(a.values());
  S f = static_cast<S>(s);
  for (auto& v : out) v *= f;
  return make_op<S>(a.shape(), std::move(out), {a}, [f](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * f;
  });
}

// a[RxC] + bias[C], broadcast over rows
template <class S>
Tensor<S> add_rowwise(const Tensor<S>& a, const Tensor<S>& bias) {
  const int c = a.cols();
  const int r = detail::lead_rows(a);
  if (bias.numel() != c)
    throw ShapeError("add_rowwise bias " + shape_str(bias.shape()) + " vs cols " +
                     std::to_string(c));
  std::vector<S> out(a.values());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] += bias.values()[j];
  return make_op<S>(a.shape(), std::move(out), {a, bias}, [r, c](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) pb.grad[j] += self.grad[static_cast<size_t>(i) * c + j];
    }
  });
}

// a[RxC] scaled per-row by w[R]
template <class S>
Tensor<S> mul_rowwise(const Tensor<S>& a, const Tensor<S>& w) {
  const int c = a.cols();
  const int r = detail::lead_rows(a);
  if (w.numel() != r)
    throw ShapeError("mul_rowwise weight " + shape_str(w.shape()) + " vs rows " +
                     std::to_string(r));
  std::vector<S> out(a.values());
  for (int i = 0; i < r; ++i) {
    S f = w.values()[i];
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] *= f;
  }
  return make_op<S>(a.shape(), std::move(out), {a, w}, [r, c](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pw = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int i = 0; i < r; ++i) {
        S f = pw.value[i];
        for (int j = 0; j < c; ++j) {
          size_t idx = static_cast<size_t>(i) * c + j;
          pa.grad[idx] += self.grad[idx] * f;
        }
      }
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      for (int i = 0; i < r; ++i) {
        S acc = S(0);
        for (int j = 0; j < c; ++j) {
          size_t idx = static_cast<size_t>(i) * c + j;
          acc += self.grad[idx] * pa.value[idx];
        }
        pw.grad[i] += acc;
      }
    }
  });
}

// a[RxC] scaled per-column by w[C]
template <class S>
Tensor<S> mul_colwise(const Tensor<S>& a, const Tensor<S>& w) {
  const int c = a.cols();
  const int r = detail::lead_rows(a);
  if (w.numel() != c)
    throw ShapeError("mul_colwise weight " + shape_str(w.shape()) + " vs cols " +
                     std::to_string(c));
  std::vector<S> out(a.values());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] *= w.values()[j];
  return make_op<S>(a.shape(), std::move(out), {a, w}, [r, c](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pw = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          size_t idx = static_cast<size_t>(i) * c + j;
          pa.grad[idx] += self.grad[idx] * pw.value[j];
        }
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          size_t idx = static_cast<size_t>(i) * c + j;
          pw.grad[j] += self.grad[idx] * pa.value[idx];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// activations (vectorized through Eigen packet math)
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  const auto n = static_cast<Eigen::Index>(a.values().size());
  std::vector<S> out(a.values().size());
  ArrMap<S>(out.data(), n) = S(1) / (S(1) + (-ConstArrMap<S>(a.values().data(), n)).exp());
  return make_op<S>(a.shape(), std::move(out), {a}, [n](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    ConstArrMap<S> y(self.value.data(), n), g(self.grad.data(), n);
    ArrMap<S>(p.grad.data(), n) += g * y * (S(1) - y);
  });
}

template <class S>
Tensor<S> tanh_act(const Tensor<S>& a) {
  const auto n = static_cast<Eigen::Index>(a.values().size());
  std::vector<S> out(a.values().size());
  ArrMap<S>(out.data(), n) = ConstArrMap<S>(a.values().data(), n).tanh();
  return make_op<S>(a.shape(), std::move(out), {a}, [n](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    ConstArrMap<S> y(self.value.data(), n), g(self.grad.data(), n);
    ArrMap<S>(p.grad.data(), n) += g * (S(1) - y * y);
  });
}

// tanh-approximation GELU; the derivative differentiates the approximation
// itself, so gradient checks are exact. The tanh values are kept for backward.
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S k = static_cast<S>(0.044715);
  const auto n = static_cast<Eigen::Index>(a.values().size());
  std::vector<S> out(a.values().size());
  std::vector<S> t(a.values().size());
  {
    ConstArrMap<S> x(a.values().data(), n);
    ArrMap<S> tm(t.data(), n);
    tm = (c * (x + k * x.cube())).tanh();
    ArrMap<S>(out.data(), n) = S(0.5) * x * (S(1) + tm);
  }
  return make_op<S>(a.shape(), std::move(out), {a}, [c, k, n, t = std::move(t)](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    ConstArrMap<S> x(p.value.data(), n), g(self.grad.data(), n), tm(t.data(), n);
    ArrMap<S>(p.grad.data(), n) +=
        g * (S(0.5) * (S(1) + tm) +
             S(0.5) * x * (S(1) - tm.square()) * c * (S(1) + S(3) * k * x.square()));
  });
}

template <class S>
Tensor<S> abs_val(const Tensor<S>& a) {
  std::vector<S> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a.values()[i]);
  return make_op<S>(a.shape(), std::move(out), {a}, [](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      S x = p.value[i];
      S sgn = x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
      p.grad[i] += self.grad[i] * sgn;
    }
  });
}

template <class S>
Tensor<S> square(const Tensor<S>& a) {
  std::vector<S> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * a.values()[i];
  return make_op<S>(a.shape(), std::move(out), {a}, [](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * S(2) * p.value[i];
  });
}

// ---------------------------------------------------------------------------
// softmax over the last axis
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  const int c = a.cols();
  const int r = detail::lead_rows(a);
  std::vector<S> out(a.values().size());
  for (int i = 0; i < r; ++i) {
    const S* x = a.values().data() + static_cast<size_t>(i) * c;
    S* y = out.data() + static_cast<size_t>(i) * c;
    S mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    S sum = S(0);
    for (int j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (int j = 0; j < c; ++j) y[j] /= sum;
  }
  return make_op<S>(a.shape(), std::move(out), {a}, [r, c](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < r; ++i) {
      const S* y = self.value.data() + static_cast<size_t>(i) * c;
      const S* g = self.grad.data() + static_cast<size_t>(i) * c;
      S* d = p.grad.data() + static_cast<size_t>(i) * c;
      S dot = S(0);
      for (int j = 0; j < c; ++j) dot += g[j] * y[j];
      for (int j = 0; j < c; ++j) d[j] += y[j] * (g[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// layer norm over the last axis with affine parameters
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> layer_norm(const Tensor<S>& a, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
  const int c = a.cols();
  const int r = detail::lead_rows(a);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("layer_norm affine params must have length " + std::to_string(c));
  std::vector<S> out(a.values().size());
  std::vector<S> xhat(a.values().size());
  std::vector<S> inv_std(static_cast<size_t>(r));
  const S e = static_cast<S>(eps);
  for (int i = 0; i < r; ++i) {
    const S* x = a.values().data() + static_cast<size_t>(i) * c;
    S mean = S(0);
    for (int j = 0; j < c; ++j) mean += x[j];
    mean /= static_cast<S>(c);
    S var = S(0);
    for (int j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<S>(c);
    S is = S(1) / std::sqrt(var + e);
    inv_std[i] = is;
    for (int j = 0; j < c; ++j) {
      size_t idx = static_cast<size_t>(i) * c + j;
      xhat[idx] = (x[j] - mean) * is;
      out[idx] = gamma.values()[j] * xhat[idx] + beta.values()[j];
    }
  }
  return make_op<S>(
      a.shape(), std::move(out), {a, gamma, beta},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& self) {
        auto& pa = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (pa.requires_grad) pa.ensure_grad();
        for (int i = 0; i < r; ++i) {
          const S* g = self.grad.data() + static_cast<size_t>(i) * c;
          const S* xh = xhat.data() + static_cast<size_t>(i) * c;
          if (pg.requires_grad || pb.requires_grad) {
            for (int j = 0; j < c; ++j) {
              if (pg.requires_grad) pg.grad[j] += g[j] * xh[j];
              if (pb.requires_grad) pb.grad[j] += g[j];
            }
          }
          if (pa.requires_grad) {
            S sum_dxh = S(0), sum_dxh_xh = S(0);
            for (int j = 0; j < c; ++j) {
              S dxh = g[j] * pg.value[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xh[j];
            }
            S* d = pa.grad.data() + static_cast<size_t>(i) * c;
            S scale_row = inv_std[i] / static_cast<S>(c);
            for (int j = 0; j < c; ++j) {
              S dxh = g[j] * pg.value[j];
              d[j] += scale_row * (static_cast<S>(c) * dxh - sum_dxh - xh[j] * sum_dxh_xh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int> new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  std::vector<S> out(a.values());
  return make_op<S>(std::move(new_shape), std::move(out), {a}, [](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols on empty list");
  const int r = detail::lead_rows(parts[0]);
  int total_c = 0;
  for (const auto& p : parts) {
    if (detail::lead_rows(p) != r)
      throw ShapeError("concat_cols row mismatch: " + shape_str(p.shape()));
    total_c += p.cols();
  }
  std::vector<S> out(static_cast<size_t>(r) * total_c);
  std::vector<int> widths;
  int off = 0;
  for (const auto& p : parts) {
    const int c = p.cols();
    widths.push_back(c);
    for (int i = 0; i < r; ++i)
      std::copy_n(p.values().data() + static_cast<size_t>(i) * c, c,
                  out.data() + static_cast<size_t>(i) * total_c + off);
    off += c;
  }
  return detail::make_op_vec<S>(
      {r, total_c}, std::move(out), parts,
      std::function<void(Node<S>&)>([r, total_c, widths](Node<S>& self) {
        int offset = 0;
        for (size_t pi = 0; pi < self.parents.size(); ++pi) {
          auto& p = *self.parents[pi];
          const int c = widths[pi];
          if (p.requires_grad) {
            p.ensure_grad();
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < c; ++j)
                p.grad[static_cast<size_t>(i) * c + j] +=
                    self.grad[static_cast<size_t>(i) * total_c + offset + j];
          }
          offset += c;
        }
      }));
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int start, int len) {
  const int c = a.cols();
  const int r = detail::lead_rows(a);
  if (start < 0 || len <= 0 || start + len > c)
    throw ShapeError("slice_cols out of range for " + shape_str(a.shape()));
  std::vector<S> out(static_cast<size_t>(r) * len);
  for (int i = 0; i < r; ++i)
    std::copy_n(a.values().data() + static_cast<size_t>(i) * c + start, len,
                out.data() + static_cast<size_t>(i) * len);
  return make_op<S>({r, len}, std::move(out), {a}, [r, c, start, len](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < len; ++j)
        p.grad[static_cast<size_t>(i) * c + start + j] +=
            self.grad[static_cast<size_t>(i) * len + j];
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  S acc = S(0);
  for (S v : a.values()) acc += v;
  return make_op<S>({1, 1}, {acc}, {a}, [](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    S g = self.grad[0];
    for (auto& d : p.grad) d += g;
  });
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  S acc = S(0);
  for (S v : a.values()) acc += v;
  S inv = S(1) / static_cast<S>(a.numel());
  return make_op<S>({1, 1}, {acc * inv}, {a}, [inv](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    S g = self.grad[0] * inv;
    for (auto& d : p.grad) d += g;
  });
}

// ---------------------------------------------------------------------------
// row-layout ops used for batching groups of tokens
// ---------------------------------------------------------------------------

// a[Bxd] -> [B*n x d], row b repeated n consecutive times
template <class S>
Tensor<S> repeat_interleave_rows(const Tensor<S>& a, int n) {
  const int d = a.cols();
  const int b = detail::lead_rows(a);
  std::vector<S> out(static_cast<size_t>(b) * n * d);
  for (int i = 0; i < b; ++i)
    for (int rep = 0; rep < n; ++rep)
      std::copy_n(a.values().data() + static_cast<size_t>(i) * d, d,
                  out.data() + (static_cast<size_t>(i) * n + rep) * d);
  return make_op<S>({b * n, d}, std::move(out), {a}, [b, n, d](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < b; ++i)
      for (int rep = 0; rep < n; ++rep)
        for (int j = 0; j < d; ++j)
          p.grad[static_cast<size_t>(i) * d + j] +=
              self.grad[(static_cast<size_t>(i) * n + rep) * d + j];
  });
}

// a[Nxd] -> [B*N x d], whole matrix tiled B times
template <class S>
Tensor<S> tile_rows(const Tensor<S>& a, int b) {
  const int d = a.cols();
  const int n = detail::lead_rows(a);
  std::vector<S> out(static_cast<size_t>(b) * n * d);
  for (int rep = 0; rep < b; ++rep)
    std::copy_n(a.values().data(), static_cast<size_t>(n) * d,
                out.data() + static_cast<size_t>(rep) * n * d);
  return make_op<S>({b * n, d}, std::move(out), {a}, [b, n, d](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int rep = 0; rep < b; ++rep)
      for (size_t i = 0; i < static_cast<size_t>(n) * d; ++i)
        p.grad[i] += self.grad[static_cast<size_t>(rep) * n * d + i];
  });
}

// a[B*L x d] grouped by L rows -> [B*reps*L x d], each group repeated
template <class S>
Tensor<S> repeat_groups(const Tensor<S>& a, int group_rows, int reps) {
  const int d = a.cols();
  const int total = detail::lead_rows(a);
  if (total % group_rows != 0)
    throw ShapeError("repeat_groups: rows not divisible by group size");
  const int groups = total / group_rows;
  const size_t block = static_cast<size_t>(group_rows) * d;
  std::vector<S> out(static_cast<size_t>(groups) * reps * block);
  for (int g = 0; g < groups; ++g)
    for (int rep = 0; rep < reps; ++rep)
      std::copy_n(a.values().data() + static_cast<size_t>(g) * block, block,
                  out.data() + (static_cast<size_t>(g) * reps + rep) * block);
  return make_op<S>({groups * reps * group_rows, d}, std::move(out), {a},
                    [groups, reps, block](Node<S>& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (int g = 0; g < groups; ++g)
                        for (int rep = 0; rep < reps; ++rep)
                          for (size_t i = 0; i < block; ++i)
                            p.grad[static_cast<size_t>(g) * block + i] +=
                                self.grad[(static_cast<size_t>(g) * reps + rep) * block + i];
                    });
}

// k tensors of [Bxd] -> [B*k x d]; group b holds row b of each input in order.
// The same tensor may appear multiple times (used for left-padding).
template <class S>
Tensor<S> stack_rows_grouped(const std::vector<Tensor<S>>& items, int batch) {
  if (items.empty()) throw ShapeError("stack_rows_grouped on empty list");
  const int d = items[0].cols();
  const int k = static_cast<int>(items.size());
  for (const auto& t : items)
    if (detail::lead_rows(t) != batch || t.cols() != d)
      throw ShapeError("stack_rows_grouped: inconsistent item shape " + shape_str(t.shape()));
  std::vector<S> out(static_cast<size_t>(batch) * k * d);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < k; ++i)
      std::copy_n(items[i].values().data() + static_cast<size_t>(b) * d, d,
                  out.data() + (static_cast<size_t>(b) * k + i) * d);
  return detail::make_op_vec<S>(
      {batch * k, d}, std::move(out), items,
      std::function<void(Node<S>&)>([batch, k, d](Node<S>& self) {
        for (int i = 0; i < k; ++i) {
          auto& p = *self.parents[i];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          for (int b = 0; b < batch; ++b)
            for (int j = 0; j < d; ++j)
              p.grad[static_cast<size_t>(b) * d + j] +=
                  self.grad[(static_cast<size_t>(b) * k + i) * d + j];
        }
      }));
}

// a[G*L x d] -> [G x d], picking row `idx` of each group
template <class S>
Tensor<S> take_group_row(const Tensor<S>& a, int group_rows, int idx) {
  const int d = a.cols();
  const int total = detail::lead_rows(a);
  if (total % group_rows != 0 || idx < 0 || idx >= group_rows)
    throw ShapeError("take_group_row: bad group layout");
  const int groups = total / group_rows;
  std::vector<S> out(static_cast<size_t>(groups) * d);
  for (int g = 0; g < groups; ++g)
    std::copy_n(a.values().data() + (static_cast<size_t>(g) * group_rows + idx) * d, d,
                out.data() + static_cast<size_t>(g) * d);
  return make_op<S>({groups, d}, std::move(out), {a}, [groups, group_rows, idx, d](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int g = 0; g < groups; ++g)
      for (int j = 0; j < d; ++j)
        p.grad[(static_cast<size_t>(g) * group_rows + idx) * d + j] +=
            self.grad[static_cast<size_t>(g) * d + j];
  });
}

// a[G*L x d] -> [G*(L+1) x d], appending `row` (a [1xd] tensor) to each group
template <class S>
Tensor<S> append_group_row(const Tensor<S>& a, int group_rows, const Tensor<S>& row) {
  const int d = a.cols();
  if (row.numel() != d) throw ShapeError("append_group_row: row width mismatch");
  const int total = detail::lead_rows(a);
  if (total % group_rows != 0) throw ShapeError("append_group_row: bad group layout");
  const int groups = total / group_rows;
  const int lout = group_rows + 1;
  std::vector<S> out(static_cast<size_t>(groups) * lout * d);
  for (int g = 0; g < groups; ++g) {
    std::copy_n(a.values().data() + static_cast<size_t>(g) * group_rows * d,
                static_cast<size_t>(group_rows) * d,
                out.data() + static_cast<size_t>(g) * lout * d);
    std::copy_n(row.values().data(), d,
                out.data() + (static_cast<size_t>(g) * lout + group_rows) * d);
  }
  return make_op<S>({groups * lout, d}, std::move(out), {a, row},
                    [groups, group_rows, lout, d](Node<S>& self) {
                      auto& pa = *self.parents[0];
                      auto& pr = *self.parents[1];
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        for (int g = 0; g < groups; ++g)
                          for (size_t i = 0; i < static_cast<size_t>(group_rows) * d; ++i)
                            pa.grad[static_cast<size_t>(g) * group_rows * d + i] +=
                                self.grad[static_cast<size_t>(g) * lout * d + i];
                      }
                      if (pr.requires_grad) {
                        pr.ensure_grad();
                        for (int g = 0; g < groups; ++g)
                          for (int j = 0; j < d; ++j)
                            pr.grad[j] +=
                                self.grad[(static_cast<size_t>(g) * lout + group_rows) * d + j];
                      }
                    });
}

// ---------------------------------------------------------------------------
// fused multi-head scaled dot-product attention over row groups
// ---------------------------------------------------------------------------
// q: [G*Lq x d], k,v: [G*Lk x d]. Attention runs independently per group; the
// head outputs are concatenated (projections live in the calling module).
template <class S>
struct AttentionCapture {
  int groups = 0, heads = 0, lq = 0, lk = 0;
  std::vector<S> probs;  // [G][H][Lq][Lk]
};

template <class S>
Tensor<S> scaled_dot_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                               int heads, int groups, AttentionCapture<S>* capture = nullptr) {
  const int d = q.cols();
  if (d % heads != 0)
    throw ConfigError("attention dim " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(heads));
  if (k.cols() != d || v.cols() != d)
    throw ShapeError("attention q/k/v width mismatch: " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  const int qr = detail::lead_rows(q);
  const int kr = detail::lead_rows(k);
  if (qr % groups != 0 || kr % groups != 0)
    throw ShapeError("attention rows not divisible by group count");
  if (detail::lead_rows(v) != kr) throw ShapeError("attention k/v row mismatch");
  const int lq = qr / groups;
  const int lk = kr / groups;
  const int dh = d / heads;
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<S> out(static_cast<size_t>(qr) * d);
  std::vector<S> probs(static_cast<size_t>(groups) * heads * lq * lk);

  ConstMatMap<S> Q(q.values().data(), qr, d);
  ConstMatMap<S> K(k.values().data(), kr, d);
  ConstMatMap<S> V(v.values().data(), kr, d);
  MatMap<S> O(out.data(), qr, d);

  Mat<S> scores(lq, lk);
  for (int g = 0; g < groups; ++g) {
    for (int h = 0; h < heads; ++h) {
      auto Qh = Q.block(g * lq, h * dh, lq, dh);
      auto Kh = K.block(g * lk, h * dh, lk, dh);
      auto Vh = V.block(g * lk, h * dh, lk, dh);
      scores.noalias() = Qh * Kh.transpose() * inv_sqrt;
      MatMap<S> P(probs.data() + (static_cast<size_t>(g) * heads + h) * lq * lk, lq, lk);
      for (int i = 0; i < lq; ++i) {
        S mx = scores.row(i).maxCoeff();
        S sum = S(0);
        for (int j = 0; j < lk; ++j) {
          P(i, j) = std::exp(scores(i, j) - mx);
          sum += P(i, j);
        }
        P.row(i) /= sum;
      }
      O.block(g * lq, h * dh, lq, dh).noalias() = P * Vh;
    }
  }
  if (capture) {
    capture->groups = groups;
    capture->heads = heads;
    capture->lq = lq;
    capture->lk = lk;
    capture->probs = probs;
  }

  return make_op<S>(
      {qr, d}, std::move(out), {q, k, v},
      [groups, heads, lq, lk, dh, d, inv_sqrt, probs = std::move(probs)](Node<S>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        const int qr = groups * lq;
        const int kr = groups * lk;
        ConstMatMap<S> G(self.grad.data(), qr, d);
        ConstMatMap<S> Q(pq.value.data(), qr, d);
        ConstMatMap<S> K(pk.value.data(), kr, d);
        ConstMatMap<S> V(pv.value.data(), kr, d);
        if (pq.requires_grad) pq.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        if (pv.requires_grad) pv.ensure_grad();
        Mat<S> dP(lq, lk), dS(lq, lk);
        for (int g = 0; g < groups; ++g) {
          for (int h = 0; h < heads; ++h) {
            ConstMatMap<S> P(probs.data() + (static_cast<size_t>(g) * heads + h) * lq * lk, lq,
                             lk);
            auto Gh = G.block(g * lq, h * dh, lq, dh);
            auto Qh = Q.block(g * lq, h * dh, lq, dh);
            auto Kh = K.block(g * lk, h * dh, lk, dh);
            auto Vh = V.block(g * lk, h * dh, lk, dh);
            if (pv.requires_grad) {
              MatMap<S> dV(pv.grad.data(), kr, d);
              dV.block(g * lk, h * dh, lk, dh).noalias() += P.transpose() * Gh;
            }
            if (pq.requires_grad || pk.requires_grad) {
              dP.noalias() = Gh * Vh.transpose();
              for (int i = 0; i < lq; ++i) {
                S dot = S(0);
                for (int j = 0; j < lk; ++j) dot += dP(i, j) * P(i, j);
                for (int j = 0; j < lk; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * inv_sqrt;
              }
              if (pq.requires_grad) {
                MatMap<S> dQ(pq.grad.data(), qr, d);
                dQ.block(g * lq, h * dh, lq, dh).noalias() += dS * Kh;
              }
              if (pk.requires_grad) {
                MatMap<S> dK(pk.grad.data(), kr, d);
                dK.block(g * lk, h * dh, lk, dh).noalias() += dS.transpose() * Qh;
              }
            }
          }
        }
      });
}

}  // namespace kinaema::nn
