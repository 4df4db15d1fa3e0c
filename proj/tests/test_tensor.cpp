#include <cmath>
#include <vector>

#include "doctest.h"
#include "kinaema/nn/grad_check.hpp"
#include "kinaema/nn/modules.hpp"
#include "kinaema/nn/ops.hpp"
#include "kinaema/nn/tensor.hpp"

using namespace kinaema;
using nn::Tensor;

namespace {

template <class S>
Tensor<S> t2(std::vector<S> data, int r, int c, bool grad = false) {
  return Tensor<S>::from(std::move(data), {r, c}, grad);
}

}  // namespace

TEST_CASE("matmul identity and hand-computed cases") {
  auto eye = t2<float>({1, 0, 0, 1}, 2, 2);
  auto m = t2<float>({3, 4, 5, 6}, 2, 2);
  auto out = nn::matmul(eye, m);
  CHECK(out.values() == std::vector<float>{3, 4, 5, 6});

  auto a = t2<float>({1, 2}, 1, 2);
  auto b = t2<float>({3, 4}, 2, 1);
  CHECK(nn::matmul(a, b).item() == doctest::Approx(11.0f));
}

TEST_CASE("matmul shape error names both shapes") {
  auto a = t2<float>(std::vector<float>(6, 1.f), 2, 3);
  auto b = t2<float>(std::vector<float>(8, 1.f), 4, 2);
  try {
    nn::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum equals ones * b^T, and matches finite differences") {
  RngStream rng(7);
  auto a = Tensor<double>::uniform({4, 5}, rng, -1, 1, /*requires_grad=*/true);
  auto b = Tensor<double>::uniform({5, 3}, rng, -1, 1);

  auto loss = nn::sum_all(nn::matmul(a, b));
  nn::backward(loss);

  // analytic oracle: d sum(AB) / dA = ones(4x3) * B^T
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) {
      double expect = 0;
      for (int k = 0; k < 3; ++k) expect += b.values()[j * 3 + k];
      CHECK(a.grad()[i * 5 + j] == doctest::Approx(expect).epsilon(1e-10));
    }

  // finite-difference oracle, step 1e-5, float64
  nn::ParamSet<double> ps;
  ps.add("a", a);
  auto report = nn::grad_check<double>([&] { return nn::sum_all(nn::matmul(a, b)); }, ps, 1e-5);
  CHECK(report.worst < 1e-8);
}

TEST_CASE("attention with a single key returns projected v regardless of q") {
  RngStream rng(3);
  nn::ParamSet<float> ps;
  nn::MultiheadAttention<float> attn(ps, "attn", 8, 2, rng);

  auto kv = Tensor<float>::uniform({1, 8}, rng, -1, 1);
  auto q1 = Tensor<float>::uniform({3, 8}, rng, -1, 1);
  auto q2 = Tensor<float>::uniform({3, 8}, rng, -1, 1);

  auto o1 = attn(q1, kv, 1);
  auto o2 = attn(q2, kv, 1);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 8; ++j) {
      CHECK(o1.values()[i * 8 + j] == doctest::Approx(o2.values()[i * 8 + j]).epsilon(1e-6));
      // every output row equals the (projected) single value row
      CHECK(o1.values()[i * 8 + j] == doctest::Approx(o1.values()[j]).epsilon(1e-6));
    }
}

TEST_CASE("attention is invariant under joint permutation of keys and values") {
  RngStream rng(11);
  nn::ParamSet<float> ps;
  nn::MultiheadAttention<float> attn(ps, "attn", 16, 4, rng);
  auto q = Tensor<float>::uniform({5, 16}, rng, -1, 1);
  auto kv = Tensor<float>::uniform({6, 16}, rng, -1, 1);

  std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  std::vector<float> kvp(6 * 16);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 16; ++j) kvp[i * 16 + j] = kv.values()[perm[i] * 16 + j];

  auto o1 = attn(q, kv, 1);
  auto o2 = attn(q, t2<float>(std::move(kvp), 6, 16), 1);
  for (size_t i = 0; i < o1.values().size(); ++i)
    CHECK(o1.values()[i] == doctest::Approx(o2.values()[i]).epsilon(1e-5));
}

TEST_CASE("attention 2x2 single head matches hand-unrolled softmax closed form") {
  // brute-force evaluation of softmax(q k^T / sqrt(d)) v with d = 2
  std::vector<double> qd = {0.3, -0.7, 1.1, 0.4};
  std::vector<double> kd = {0.9, 0.2, -0.5, 0.6};
  std::vector<double> vd = {1.0, 2.0, -3.0, 0.5};
  auto q = t2<double>(std::vector<double>(qd.begin(), qd.end()), 2, 2);
  auto k = t2<double>(std::vector<double>(kd.begin(), kd.end()), 2, 2);
  auto v = t2<double>(std::vector<double>(vd.begin(), vd.end()), 2, 2);

  auto out = nn::scaled_dot_attention(q, k, v, 1, 1);

  double inv = 1.0 / std::sqrt(2.0);
  for (int i = 0; i < 2; ++i) {
    double s0 = (qd[i * 2] * kd[0] + qd[i * 2 + 1] * kd[1]) * inv;
    double s1 = (qd[i * 2] * kd[2] + qd[i * 2 + 1] * kd[3]) * inv;
    double m = std::max(s0, s1);
    double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    for (int j = 0; j < 2; ++j) {
      double expect = p0 * vd[j] + p1 * vd[2 + j];
      CHECK(out.values()[i * 2 + j] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention rejects dim not divisible by heads") {
  RngStream rng(1);
  nn::ParamSet<float> ps;
  CHECK_THROWS_AS(nn::MultiheadAttention<float>(ps, "a", 10, 3, rng), ConfigError);
}

TEST_CASE("gru cell gating identities") {
  RngStream rng(5);
  nn::ParamSet<float> ps;
  nn::GruCell<float> cell(ps, "gru", 3, 4, rng);
  auto h = Tensor<float>::uniform({2, 4}, rng, -0.8, 0.8);
  auto x = Tensor<float>::uniform({2, 3}, rng, -0.8, 0.8);

  SUBCASE("update gate forced to 0 keeps state exactly") {
    for (auto& v : ps.find("gru.xz.b")->values()) v = -40.0f;
    auto out = cell(h, x);
    CHECK(out.values() == h.values());
  }

  SUBCASE("update and reset gates forced to 1 give tanh of candidate pre-activation") {
    for (auto& v : ps.find("gru.xz.b")->values()) v = 40.0f;
    for (auto& v : ps.find("gru.xr.b")->values()) v = 40.0f;
    auto out = cell(h, x);
    auto pre = nn::add(cell.xc(x), cell.hc(h));
    for (size_t i = 0; i < out.values().size(); ++i)
      CHECK(out.values()[i] == std::tanh(pre.values()[i]));
  }
}

TEST_CASE("gru cell gradients match central differences") {
  RngStream rng(13);
  nn::ParamSet<double> ps;
  nn::GruCell<double> cell(ps, "gru", 3, 3, rng);
  auto h = Tensor<double>::uniform({2, 3}, rng, -0.5, 0.5);
  auto x = Tensor<double>::uniform({2, 3}, rng, -0.5, 0.5);

  auto report = nn::grad_check<double>([&] { return nn::sum_all(cell(h, x)); }, ps, 1e-5);
  CHECK(report.worst < 1e-4);
}

TEST_CASE("reshape preserves element count and round-trips") {
  auto big = Tensor<float>::uniform({20, 3072}, *(new RngStream(2)), -1, 1);
  auto r = nn::reshape(big, {160, 384});
  CHECK(r.shape() == std::vector<int>{160, 384});
  CHECK_THROWS_AS(nn::reshape(big, {100, 384}), ShapeError);

  auto back = nn::reshape(r, {20, 3072});
  CHECK(back.values() == big.values());
}

TEST_CASE("layer norm rows have mean 0 and variance 1 before affine") {
  RngStream rng(17);
  nn::ParamSet<float> ps;
  nn::LayerNorm<float> ln(ps, "ln", 12);
  auto x = Tensor<float>::uniform({6, 12}, rng, -3, 5);
  auto y = ln(x);
  for (int i = 0; i < 6; ++i) {
    double mean = 0, var = 0;
    for (int j = 0; j < 12; ++j) mean += y.values()[i * 12 + j];
    mean /= 12;
    for (int j = 0; j < 12; ++j) {
      double d = y.values()[i * 12 + j] - mean;
      var += d * d;
    }
    var /= 12;
    CHECK(mean == doctest::Approx(0.0).epsilon(0).scale(1).epsilon(1e-5));
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("self attention block gradients match central differences") {
  RngStream rng(23);
  nn::ParamSet<double> ps;
  nn::TransformerBlock<double> block(ps, "blk", 8, 2, 4, rng);
  auto x = Tensor<double>::uniform({3, 8}, rng, -0.5, 0.5);
  auto report =
      nn::grad_check<double>([&] { return nn::sum_all(block(x, 1)); }, ps, 1e-5);
  CHECK(report.worst < 1e-4);
}

TEST_CASE("grad check on a pure linear layer is exact up to rounding") {
  RngStream rng(29);
  nn::ParamSet<double> ps;
  nn::Linear<double> lin(ps, "lin", 6, 4, rng);
  auto x = Tensor<double>::uniform({3, 6}, rng, -1, 1);
  auto report = nn::grad_check<double>([&] { return nn::sum_all(lin(x)); }, ps, 1e-5);
  CHECK(report.worst < 1e-8);
}

TEST_CASE("grad check over remaining primitive ops") {
  RngStream rng(31);
  nn::ParamSet<double> ps;
  auto a = ps.add("a", Tensor<double>::uniform({4, 6}, rng, -0.9, 0.9));
  auto b = ps.add("b", Tensor<double>::uniform({4, 6}, rng, -0.9, 0.9));
  auto w_row = ps.add("w_row", Tensor<double>::uniform({4}, rng, 0.1, 1.0));
  auto w_col = ps.add("w_col", Tensor<double>::uniform({6}, rng, 0.1, 1.0));
  auto row1 = ps.add("row1", Tensor<double>::uniform({1, 8}, rng, -0.9, 0.9));

  auto fn = [&] {
    auto s = nn::mul(nn::sigmoid(a), nn::tanh_act(b));
    s = nn::add(s, nn::gelu(nn::sub(a, b)));
    s = nn::mul_rowwise(s, w_row);
    s = nn::mul_colwise(s, w_col);
    s = nn::concat_cols<double>({s, nn::softmax_rows(a)});
    s = nn::slice_cols(s, 2, 8);
    s = nn::append_group_row(s, 2, row1);
    s = nn::take_group_row(s, 3, 2);
    s = nn::repeat_interleave_rows(s, 2);
    s = nn::repeat_groups(s, 2, 2);
    s = nn::abs_val(s);
    auto st = nn::stack_rows_grouped<double>({s, s}, 8);
    return nn::mean_all(nn::square(nn::tile_rows(st, 2)));
  };
  auto report = nn::grad_check<double>(fn, ps, 1e-5);
  CHECK(report.worst < 1e-4);
}

TEST_CASE("fused attention gradients match central differences") {
  RngStream rng(37);
  nn::ParamSet<double> ps;
  auto q = ps.add("q", Tensor<double>::uniform({6, 8}, rng, -1, 1));
  auto k = ps.add("k", Tensor<double>::uniform({4, 8}, rng, -1, 1));
  auto v = ps.add("v", Tensor<double>::uniform({4, 8}, rng, -1, 1));
  auto fn = [&] {
    return nn::sum_all(nn::square(nn::scaled_dot_attention(q, k, v, 2, 2)));
  };
  auto report = nn::grad_check<double>(fn, ps, 1e-5);
  CHECK(report.worst < 1e-4);
}

TEST_CASE("grad_check reports non-finite outputs naming the parameter") {
  nn::ParamSet<double> ps;
  auto p = ps.add("boom", Tensor<double>::from({1e308}, {1, 1}));
  auto fn = [&] { return nn::mul(p, p); };
  CHECK_THROWS_AS(nn::grad_check<double>(fn, ps, 1e-5), NumericError);
}
