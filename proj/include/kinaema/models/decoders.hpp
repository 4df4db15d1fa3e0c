#pragma once

#include <string>
#include <vector>

#include "kinaema/models/spec.hpp"
#include "kinaema/nn/modules.hpp"

namespace kinaema::models {

// Replaces masked token rows with a learned mask token. row_mask has one entry
// per token row (Q*Lq), nonzero meaning masked.
template <class S>
nn::Tensor<S> apply_token_mask(const nn::Tensor<S>& tokens, const nn::Tensor<S>& mask_token,
                               const std::vector<uint8_t>& row_mask) {
  const int rows = static_cast<int>(tokens.numel() / tokens.cols());
  if (static_cast<int>(row_mask.size()) != rows)
    throw ShapeError("token mask length mismatch");
  std::vector<S> keep(row_mask.size()), drop(row_mask.size());
  for (size_t i = 0; i < row_mask.size(); ++i) {
    drop[i] = row_mask[i] ? S(1) : S(0);
    keep[i] = row_mask[i] ? S(0) : S(1);
  }
  nn::Tensor<S> keep_w = nn::Tensor<S>::from(std::move(keep), {rows});
  nn::Tensor<S> drop_w = nn::Tensor<S>::from(std::move(drop), {rows});
  nn::Tensor<S> filler = nn::tile_rows(mask_token, rows);
  return nn::add(nn::mul_rowwise(tokens, keep_w), nn::mul_rowwise(filler, drop_w));
}

// Splits a query retina into Lq contiguous chunks, projects each to E' with a
// shared linear map and adds a learned per-chunk position embedding.
template <class S>
class QueryEncoder {
 public:
  QueryEncoder() = default;
  QueryEncoder(const ModelSpec& spec, nn::ParamSet<S>& params, RngStream& rng)
      : chunks_(spec.query_chunks), chunk_dim_(spec.chunk_dim()), e_read_(spec.e_read) {
    proj_ = nn::Linear<S>(params, "qenc.proj", chunk_dim_, e_read_, rng);
    pos_ = params.add("qenc.pos", nn::Tensor<S>::normal({chunks_, e_read_}, rng, 0.02));
  }

  // retinas [Q x R] -> tokens [Q*Lq x E']
  nn::Tensor<S> operator()(const nn::Tensor<S>& retinas) const {
    const int q = static_cast<int>(retinas.numel() / retinas.cols());
    nn::Tensor<S> chunks = nn::reshape(retinas, {q * chunks_, chunk_dim_});
    return nn::add(proj_(chunks), nn::tile_rows(pos_, q));
  }

  // Same, but masked chunk rows carry the mask token instead of their content.
  // Position embeddings are kept so the decoder knows which chunk to rebuild.
  nn::Tensor<S> encode_masked(const nn::Tensor<S>& retinas, const nn::Tensor<S>& mask_token,
                              const std::vector<uint8_t>& row_mask) const {
    const int q = static_cast<int>(retinas.numel() / retinas.cols());
    nn::Tensor<S> chunks = nn::reshape(retinas, {q * chunks_, chunk_dim_});
    nn::Tensor<S> content = apply_token_mask(proj_(chunks), mask_token, row_mask);
    return nn::add(content, nn::tile_rows(pos_, q));
  }

  int chunks() const { return chunks_; }
  int chunk_dim() const { return chunk_dim_; }

 private:
  int chunks_ = 0, chunk_dim_ = 0, e_read_ = 0;
  nn::Linear<S> proj_;
  nn::Tensor<S> pos_;
};

// Relative-pose decoder: cross-attention from query tokens into the read-out
// tokens (no residual, so nothing leaks past the memory), CLS appended, a
// stack of self-attention blocks, pose regressed from CLS.
template <class S>
class RpeDecoderPlain {
 public:
  RpeDecoderPlain() = default;
  RpeDecoderPlain(const ModelSpec& spec, nn::ParamSet<S>& params, const std::string& prefix,
                  RngStream& rng, int out_dim, bool with_cls = true)
      : lq_(spec.query_chunks), with_cls_(with_cls) {
    const int d = spec.e_read;
    const int heads = ModelSpec::effective_heads(spec.dec_heads, d);
    ln_q_ = nn::LayerNorm<S>(params, prefix + ".ca.ln_q", d);
    ln_kv_ = nn::LayerNorm<S>(params, prefix + ".ca.ln_kv", spec.read_dim());
    ca_ = nn::MultiheadAttention<S>(params, prefix + ".ca.attn", d, heads, rng,
                                    spec.read_dim());
    if (with_cls)
      cls_ = params.add(prefix + ".cls", nn::Tensor<S>::normal({1, d}, rng, 0.02));
    for (int i = 0; i < spec.dec_sa_blocks; ++i)
      blocks_.emplace_back(params, prefix + ".sa." + std::to_string(i), d, heads,
                           spec.dec_mlp_factor, rng);
    ln_out_ = nn::LayerNorm<S>(params, prefix + ".ln_out", d);
    if (with_cls) {
      head_ = nn::Mlp<S>(params, prefix + ".head", d, 2 * d, out_dim, rng);
    } else {
      out_proj_ = nn::Linear<S>(params, prefix + ".out", d, out_dim, rng);
    }
  }

  // y [B*tokens x kv_dim] (repeated per query), qtokens [Q*Lq x E']
  nn::Tensor<S> operator()(const nn::Tensor<S>& y_per_query, const nn::Tensor<S>& qtokens,
                           int queries, nn::AttentionCapture<S>* capture = nullptr) const {
    nn::Tensor<S> t = ca_(ln_q_(qtokens), ln_kv_(y_per_query), queries, capture);
    int rows = lq_;
    if (with_cls_) {
      t = nn::append_group_row(t, lq_, cls_);
      rows = lq_ + 1;
    }
    for (const auto& block : blocks_) t = block(t, queries);
    if (with_cls_) {
      nn::Tensor<S> cls_out = nn::take_group_row(t, rows, lq_);
      return head_(ln_out_(cls_out));
    }
    return out_proj_(ln_out_(t));  // per-token output (masked-modeling head)
  }

 private:
  int lq_ = 0;
  bool with_cls_ = true;
  nn::LayerNorm<S> ln_q_, ln_kv_, ln_out_;
  nn::MultiheadAttention<S> ca_;
  nn::Tensor<S> cls_;
  std::vector<nn::TransformerBlock<S>> blocks_;
  nn::Mlp<S> head_;
  nn::Linear<S> out_proj_;
};

// Baseline decoder: CLS attached to the query tokens up front, then chains of
// CA-MLP-SA-MLP. Only the first chain's cross-attention skips the residual.
template <class S>
class RpeDecoderChained {
 public:
  RpeDecoderChained() = default;
  RpeDecoderChained(const ModelSpec& spec, nn::ParamSet<S>& params, const std::string& prefix,
                    RngStream& rng, int out_dim, bool with_cls = true)
      : lq_(spec.query_chunks), with_cls_(with_cls) {
    const int d = spec.e_read;
    const int heads = ModelSpec::effective_heads(spec.dec_heads, d);
    if (with_cls)
      cls_ = params.add(prefix + ".cls", nn::Tensor<S>::normal({1, d}, rng, 0.02));
    for (int i = 0; i < spec.dec_chains; ++i) {
      std::string p = prefix + ".chain" + std::to_string(i);
      chains_.push_back(Chain{
          nn::LayerNorm<S>(params, p + ".ca.ln_q", d),
          nn::LayerNorm<S>(params, p + ".ca.ln_kv", spec.read_dim()),
          nn::MultiheadAttention<S>(params, p + ".ca.attn", d, heads, rng, spec.read_dim()),
          nn::LayerNorm<S>(params, p + ".mlp1.ln", d),
          nn::Mlp<S>(params, p + ".mlp1.mlp", d, d * spec.dec_chain_mlp_factor, d, rng),
          nn::LayerNorm<S>(params, p + ".sa.ln", d),
          nn::MultiheadAttention<S>(params, p + ".sa.attn", d, heads, rng),
          nn::LayerNorm<S>(params, p + ".mlp2.ln", d),
          nn::Mlp<S>(params, p + ".mlp2.mlp", d, d * spec.dec_chain_mlp_factor, d, rng)});
    }
    ln_out_ = nn::LayerNorm<S>(params, prefix + ".ln_out", d);
    if (with_cls) {
      head_ = nn::Mlp<S>(params, prefix + ".head", d, 2 * d, out_dim, rng);
    } else {
      out_proj_ = nn::Linear<S>(params, prefix + ".out", d, out_dim, rng);
    }
  }

  nn::Tensor<S> operator()(const nn::Tensor<S>& y_per_query, const nn::Tensor<S>& qtokens,
                           int queries, nn::AttentionCapture<S>* capture = nullptr) const {
    nn::Tensor<S> t = qtokens;
    int rows = lq_;
    if (with_cls_) {
      t = nn::append_group_row(t, lq_, cls_);
      rows = lq_ + 1;
    }
    for (size_t i = 0; i < chains_.size(); ++i) {
      const Chain& c = chains_[i];
      nn::Tensor<S> ca_out = c.ca(c.ca_ln_q(t), c.ca_ln_kv(y_per_query), queries,
                                  i == 0 ? capture : nullptr);
      t = i == 0 ? ca_out : nn::add(t, ca_out);
      t = nn::add(t, c.mlp1(c.mlp1_ln(t)));
      nn::Tensor<S> sa_in = c.sa_ln(t);
      t = nn::add(t, c.sa(sa_in, sa_in, queries));
      t = nn::add(t, c.mlp2(c.mlp2_ln(t)));
    }
    if (with_cls_) {
      nn::Tensor<S> cls_out = nn::take_group_row(t, rows, lq_);
      return head_(ln_out_(cls_out));
    }
    return out_proj_(ln_out_(t));
  }

 private:
  struct Chain {
    nn::LayerNorm<S> ca_ln_q, ca_ln_kv;
    nn::MultiheadAttention<S> ca;
    nn::LayerNorm<S> mlp1_ln;
    nn::Mlp<S> mlp1;
    nn::LayerNorm<S> sa_ln;
    nn::MultiheadAttention<S> sa;
    nn::LayerNorm<S> mlp2_ln;
    nn::Mlp<S> mlp2;
  };
  int lq_ = 0;
  bool with_cls_ = true;
  nn::Tensor<S> cls_;
  std::vector<Chain> chains_;
  nn::LayerNorm<S> ln_out_;
  nn::Mlp<S> head_;
  nn::Linear<S> out_proj_;
};

// L1 on (distance, bearing cos/sin) plus L1 on rotation (cos/sin), mean over
// queries. pred and target are [Q x 5].
template <class S>
nn::Tensor<S> loss_rpe(const nn::Tensor<S>& pred, const nn::Tensor<S>& target) {
  if (pred.shape() != target.shape())
    throw InputError("loss_rpe: prediction/target shape mismatch " + nn::shape_str(pred.shape()) +
                     " vs " + nn::shape_str(target.shape()));
  if (pred.numel() == 0) throw InputError("loss_rpe: empty batch");
  const int q = static_cast<int>(pred.numel() / pred.cols());
  return nn::scale(nn::sum_all(nn::abs_val(nn::sub(pred, target))), 1.0 / q);
}

// MSE over masked chunk entries only. row_mask marks masked token rows.
template <class S>
nn::Tensor<S> loss_mim(const nn::Tensor<S>& recon, const nn::Tensor<S>& target,
                       const std::vector<uint8_t>& row_mask) {
  if (recon.shape() != target.shape())
    throw InputError("loss_mim: shape mismatch " + nn::shape_str(recon.shape()) + " vs " +
                     nn::shape_str(target.shape()));
  const int rows = static_cast<int>(recon.numel() / recon.cols());
  if (static_cast<int>(row_mask.size()) != rows) throw InputError("loss_mim: mask length");
  int64_t masked_rows = 0;
  std::vector<S> w(row_mask.size());
  for (size_t i = 0; i < row_mask.size(); ++i) {
    w[i] = row_mask[i] ? S(1) : S(0);
    masked_rows += row_mask[i] ? 1 : 0;
  }
  if (masked_rows == 0) throw InputError("loss_mim: empty mask");
  nn::Tensor<S> weights = nn::Tensor<S>::from(std::move(w), {rows});
  nn::Tensor<S> sq = nn::square(nn::sub(recon, target));
  double count = static_cast<double>(masked_rows) * recon.cols();
  return nn::scale(nn::sum_all(nn::mul_rowwise(sq, weights)), 1.0 / count);
}

}  // namespace kinaema::models
