#pragma once

#include <memory>

#include "kinaema/models/decoders.hpp"
#include "kinaema/models/memory.hpp"
#include "kinaema/models/spec.hpp"

namespace kinaema::models {

// Everything needed to run one model family end to end: input encoders, the
// recurrent memory core, and the pose / masked-modeling decoder pair.
template <class S>
class SequenceModel {
 public:
  explicit SequenceModel(const ModelSpec& spec) : spec_(spec) {
    spec_.validate();
    RngStream rng = RngStream::split(spec.seed, "model-init");
    enc_vis_ = nn::Mlp<S>(params_, "encoder.vis", spec.retina_dim, spec.d_vis, spec.d_vis, rng);
    enc_odo_ = nn::Linear<S>(params_, "encoder.odo", ModelSpec::odo_input_dim,
                             ModelSpec::d_odo, rng);
    core_ = make_memory_core<S>(spec_, params_, rng);
    qenc_ = QueryEncoder<S>(spec_, params_, rng);
    mask_token_ = params_.add("mim.mask_token",
                              nn::Tensor<S>::normal({1, spec.e_read}, rng, 0.02));
    if (spec_.decoder == DecoderVariant::plain) {
      rpe_plain_ = std::make_unique<RpeDecoderPlain<S>>(spec_, params_, "rpe_dec", rng, 5);
      mim_plain_ = std::make_unique<RpeDecoderPlain<S>>(spec_, params_, "mim_dec", rng,
                                                        spec_.chunk_dim(), /*with_cls=*/false);
    } else {
      rpe_chained_ =
          std::make_unique<RpeDecoderChained<S>>(spec_, params_, "rpe_dec", rng, 5);
      mim_chained_ = std::make_unique<RpeDecoderChained<S>>(
          spec_, params_, "mim_dec", rng, spec_.chunk_dim(), /*with_cls=*/false);
    }
  }

  const ModelSpec& spec() const { return spec_; }
  nn::ParamSet<S>& params() { return params_; }
  const nn::ParamSet<S>& params() const { return params_; }
  const MemoryCore<S>& core() const { return *core_; }

  nn::Tensor<S> encode_obs(const nn::Tensor<S>& retina) const { return enc_vis_(retina); }
  nn::Tensor<S> encode_odo(const nn::Tensor<S>& odometry) const { return enc_odo_(odometry); }

  MemoryState<S> init_state(int batch) const { return core_->init(batch); }

  // retina [B x R], odometry [B x 4]
  MemoryState<S> update(const MemoryState<S>& m, const nn::Tensor<S>& retina,
                        const nn::Tensor<S>& odometry) const {
    return core_->update(m, encode_obs(retina), encode_odo(odometry));
  }

  nn::Tensor<S> read(const MemoryState<S>& m) const { return core_->read(m); }

  // y [B*tokens x kv], query retinas [Q x R] with Q = B * queries_per_sample.
  // Returns [Q x 5]: distance, bearing cos/sin, rotation cos/sin.
  nn::Tensor<S> decode_rpe(const nn::Tensor<S>& y, const nn::Tensor<S>& query_retinas,
                           int queries_per_sample,
                           nn::AttentionCapture<S>* capture = nullptr) const {
    nn::Tensor<S> y_rep = per_query(y, queries_per_sample);
    nn::Tensor<S> qtokens = qenc_(query_retinas);
    const int q = query_count(query_retinas);
    if (rpe_plain_) return (*rpe_plain_)(y_rep, qtokens, q, capture);
    return (*rpe_chained_)(y_rep, qtokens, q, capture);
  }

  // Reconstruction of masked retina chunks; row_mask has one entry per query
  // chunk row (Q*Lq). Returns [Q*Lq x chunk].
  nn::Tensor<S> decode_mim(const nn::Tensor<S>& y, const nn::Tensor<S>& query_retinas,
                           const std::vector<uint8_t>& row_mask,
                           int queries_per_sample) const {
    bool any = false;
    for (uint8_t m : row_mask) any = any || m;
    if (!any) throw InputError("decode_mim: at least one chunk must be masked");
    nn::Tensor<S> y_rep = per_query(y, queries_per_sample);
    nn::Tensor<S> masked = qenc_.encode_masked(query_retinas, mask_token_, row_mask);
    const int q = query_count(query_retinas);
    if (mim_plain_) return (*mim_plain_)(y_rep, masked, q);
    return (*mim_chained_)(y_rep, masked, q);
  }

  // Ground-truth chunk values for the masked-modeling loss, [Q*Lq x chunk].
  nn::Tensor<S> mim_targets(const nn::Tensor<S>& query_retinas) const {
    const int q = query_count(query_retinas);
    return nn::reshape(query_retinas.detach(),
                       {q * spec_.query_chunks, spec_.chunk_dim()});
  }

  int query_chunks() const { return spec_.query_chunks; }

 private:
  int query_count(const nn::Tensor<S>& query_retinas) const {
    return static_cast<int>(query_retinas.numel() / spec_.retina_dim);
  }

  nn::Tensor<S> per_query(const nn::Tensor<S>& y, int queries_per_sample) const {
    return nn::repeat_groups(y, spec_.read_tokens(), queries_per_sample);
  }

  ModelSpec spec_;
  nn::ParamSet<S> params_;
  nn::Mlp<S> enc_vis_;
  nn::Linear<S> enc_odo_;
  std::unique_ptr<MemoryCore<S>> core_;
  QueryEncoder<S> qenc_;
  nn::Tensor<S> mask_token_;
  std::unique_ptr<RpeDecoderPlain<S>> rpe_plain_, mim_plain_;
  std::unique_ptr<RpeDecoderChained<S>> rpe_chained_, mim_chained_;
};

}  // namespace kinaema::models
