#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "kinaema/nn/ops.hpp"
#include "kinaema/nn/tensor.hpp"

namespace kinaema::nn {

// Linear layer, weights initialized uniform(+-1/sqrt(fan_in)), bias zero.
template <class S>
struct Linear {
  Tensor<S> w, b;
  bool has_bias = true;

  Linear() = default;
  Linear(ParamSet<S>& params, const std::string& prefix, int in, int out, RngStream& rng,
         bool bias = true)
      : has_bias(bias) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w = params.add(prefix + ".w", Tensor<S>::uniform({in, out}, rng, -bound, bound));
    if (bias) b = params.add(prefix + ".b", Tensor<S>::zeros({out}));
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    Tensor<S> y = matmul(x, w);
    return has_bias ? add_rowwise(y, b) : y;
  }

  int in_dim() const { return w.dim(0); }
  int out_dim() const { return w.dim(1); }
};

template <class S>
struct LayerNorm {
  Tensor<S> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamSet<S>& params, const std::string& prefix, int dim) {
    gamma = params.add(prefix + ".gamma", Tensor<S>::full({dim}, S(1)));
    beta = params.add(prefix + ".beta", Tensor<S>::zeros({dim}));
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gamma, beta); }
};

// Two-layer MLP with GELU, hidden = dim * factor by default.
template <class S>
struct Mlp {
  Linear<S> fc1, fc2;

  Mlp() = default;
  Mlp(ParamSet<S>& params, const std::string& prefix, int in, int hidden, int out,
      RngStream& rng)
      : fc1(params, prefix + ".fc1", in, hidden, rng),
        fc2(params, prefix + ".fc2", hidden, out, rng) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return fc2(gelu(fc1(x))); }
};

// Multi-head attention with q/k/v/out projections. Keys and values may come
// from a source of different width (kv_dim); the internal width is `dim`.
template <class S>
struct MultiheadAttention {
  Linear<S> wq, wk, wv, wo;
  int heads = 1;

  MultiheadAttention() = default;
  MultiheadAttention(ParamSet<S>& params, const std::string& prefix, int dim, int n_heads,
                     RngStream& rng, int kv_dim = -1)
      : heads(n_heads) {
    if (kv_dim < 0) kv_dim = dim;
    if (dim % n_heads != 0)
      throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(n_heads));
    wq = Linear<S>(params, prefix + ".wq", dim, dim, rng);
    wk = Linear<S>(params, prefix + ".wk", kv_dim, dim, rng);
    wv = Linear<S>(params, prefix + ".wv", kv_dim, dim, rng);
    wo = Linear<S>(params, prefix + ".wo", dim, dim, rng);
  }

  Tensor<S> operator()(const Tensor<S>& q_in, const Tensor<S>& kv_in, int groups,
                       AttentionCapture<S>* capture = nullptr) const {
    Tensor<S> ctx =
        scaled_dot_attention(wq(q_in), wk(kv_in), wv(kv_in), heads, groups, capture);
    return wo(ctx);
  }
};

// Pre-norm residual transformer block: x += attn(ln(x)); x += mlp(ln(x)).
template <class S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  MultiheadAttention<S> attn;
  Mlp<S> mlp;

  TransformerBlock() = default;
  TransformerBlock(ParamSet<S>& params, const std::string& prefix, int dim, int n_heads,
                   int mlp_factor, RngStream& rng)
      : ln1(params, prefix + ".ln1", dim),
        ln2(params, prefix + ".ln2", dim),
        attn(params, prefix + ".attn", dim, n_heads, rng),
        mlp(params, prefix + ".mlp", dim, dim * mlp_factor, dim, rng) {}

  Tensor<S> operator()(const Tensor<S>& x, int groups) const {
    Tensor<S> h = ln1(x);
    Tensor<S> y = add(x, attn(h, h, groups));
    return add(y, mlp(ln2(y)));
  }
};

// Gated recurrent cell. Sign convention: h' = (1-z) (.) h + z (.) cand, so a
// zero update gate keeps the state unchanged.
template <class S>
struct GruCell {
  Linear<S> xz, hz, xr, hr, xc, hc;

  GruCell() = default;
  GruCell(ParamSet<S>& params, const std::string& prefix, int input, int hidden,
          RngStream& rng)
      : xz(params, prefix + ".xz", input, hidden, rng),
        hz(params, prefix + ".hz", hidden, hidden, rng, /*bias=*/false),
        xr(params, prefix + ".xr", input, hidden, rng),
        hr(params, prefix + ".hr", hidden, hidden, rng, /*bias=*/false),
        xc(params, prefix + ".xc", input, hidden, rng),
        hc(params, prefix + ".hc", hidden, hidden, rng, /*bias=*/false) {}

  Tensor<S> operator()(const Tensor<S>& h, const Tensor<S>& x) const {
    Tensor<S> z = sigmoid(add(xz(x), hz(h)));
    Tensor<S> r = sigmoid(add(xr(x), hr(h)));
    Tensor<S> cand = tanh_act(add(xc(x), hc(mul(r, h))));
    Tensor<S> keep = mul(sub(Tensor<S>::full(z.shape(), S(1)), z), h);
    return add(keep, mul(z, cand));
  }
};

}  // namespace kinaema::nn
