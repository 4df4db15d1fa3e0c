#pragma once

#include <memory>
#include <string>
#include <vector>

#include "kinaema/models/spec.hpp"
#include "kinaema/nn/modules.hpp"

namespace kinaema::models {

template <class S>
struct MemoryState {
  std::vector<nn::Tensor<S>> slots;  // family-specific layout
  int step_count = 0;
  int batch = 0;

  // Cut the gradient history (truncated backprop through time).
  MemoryState detached() const {
    MemoryState out;
    out.step_count = step_count;
    out.batch = batch;
    out.slots.reserve(slots.size());
    for (const auto& s : slots) out.slots.push_back(s.detach());
    return out;
  }
};

// Recurrent state holder: init -> update per step -> read into decoder tokens.
// Inputs to update are the encoded observation xv [B x d_vis] and encoded
// odometry xo [B x 64].
template <class S>
class MemoryCore {
 public:
  virtual ~MemoryCore() = default;
  virtual MemoryState<S> init(int batch) const = 0;
  virtual MemoryState<S> update(const MemoryState<S>& m, const nn::Tensor<S>& xv,
                                const nn::Tensor<S>& xo) const = 0;
  virtual nn::Tensor<S> read(const MemoryState<S>& m) const = 0;  // [B*tokens x dim]
  virtual size_t state_bytes() const = 0;  // per sample
};

// Distributed memory of N embeddings updated jointly: per-embedding linear
// correction from the observation, self-attention across embeddings, then a
// weight-shared gated update against the previous state.
template <class S>
class KinaemaCore : public MemoryCore<S> {
 public:
  KinaemaCore(const ModelSpec& spec, nn::ParamSet<S>& params, RngStream& rng) : spec_(spec) {
    pos_embed_ = params.add("kinaema.pos_embed.e",
                            nn::Tensor<S>::normal({spec.n_mem, spec.e_mem}, rng, 0.02));
    if (spec.learned_m0)
      m0_ = params.add("kinaema.state.m0",
                       nn::Tensor<S>::normal({spec.n_mem, spec.e_mem}, rng, 0.02));
    correction_ = nn::Linear<S>(params, "kinaema.update.corr",
                                spec.e_mem + spec.d_vis + ModelSpec::d_odo, spec.e_mem, rng);
    int heads = ModelSpec::effective_heads(spec.tf_heads, spec.e_mem);
    for (int i = 0; i < spec.tf_layers; ++i)
      tf_.emplace_back(params, "kinaema.update.tf." + std::to_string(i), spec.e_mem, heads,
                       spec.tf_mlp_factor, rng);
    for (int i = 0; i < spec.gating_layers; ++i)
      gating_.emplace_back(params, "kinaema.gating." + std::to_string(i), spec.e_mem,
                           spec.e_mem, rng);
  }

  MemoryState<S> init(int batch) const override {
    MemoryState<S> m;
    m.batch = batch;
    if (spec_.learned_m0)
      m.slots = {nn::tile_rows(m0_, batch)};
    else
      m.slots = {nn::Tensor<S>::zeros({batch * spec_.n_mem, spec_.e_mem})};
    return m;
  }

  MemoryState<S> update(const MemoryState<S>& m, const nn::Tensor<S>& xv,
                        const nn::Tensor<S>& xo) const override {
    const int b = m.batch;
    const nn::Tensor<S>& prev = m.slots[0];
    nn::Tensor<S> with_pos = nn::add(prev, nn::tile_rows(pos_embed_, b));
    nn::Tensor<S> corrected = correction_(nn::concat_cols<S>(
        {with_pos, nn::repeat_interleave_rows(xv, spec_.n_mem),
         nn::repeat_interleave_rows(xo, spec_.n_mem)}));

    nn::Tensor<S> candidate = corrected;
    if (!spec_.ablate_transformer)
      for (const auto& block : tf_) candidate = block(candidate, b);

    nn::Tensor<S> next = candidate;
    if (!spec_.ablate_gating) {
      next = prev;
      for (const auto& cell : gating_) next = cell(next, candidate);
    }

    MemoryState<S> out;
    out.batch = b;
    out.step_count = m.step_count + 1;
    out.slots = {next};
    return out;
  }

  nn::Tensor<S> read(const MemoryState<S>& m) const override {
    return nn::reshape(m.slots[0], {m.batch * spec_.n_read, spec_.e_read});
  }

  size_t state_bytes() const override {
    return static_cast<size_t>(spec_.n_mem) * spec_.e_mem * sizeof(S);
  }

 private:
  ModelSpec spec_;
  nn::Tensor<S> pos_embed_, m0_;
  nn::Linear<S> correction_;
  std::vector<nn::TransformerBlock<S>> tf_;
  std::vector<nn::GruCell<S>> gating_;
};

// Stacked gated-recurrent baseline; the memory vector is the concatenation of
// all layer states. Read-out applies N' independent MLPs to it.
template <class S>
class GruCore : public MemoryCore<S> {
 public:
  GruCore(const ModelSpec& spec, nn::ParamSet<S>& params, RngStream& rng) : spec_(spec) {
    int in = spec.d_vis + ModelSpec::d_odo;
    for (int i = 0; i < spec.gru_layers; ++i) {
      cells_.emplace_back(params, "gru.layer" + std::to_string(i), in, spec.gru_hidden, rng);
      in = spec.gru_hidden;
    }
    for (int j = 0; j < spec.n_read; ++j)
      read_mlps_.emplace_back(params, "gru.read." + std::to_string(j),
                              spec.gru_layers * spec.gru_hidden, spec.gru_read_hidden,
                              spec.e_read, rng);
  }

  MemoryState<S> init(int batch) const override {
    MemoryState<S> m;
    m.batch = batch;
    for (int i = 0; i < spec_.gru_layers; ++i)
      m.slots.push_back(nn::Tensor<S>::zeros({batch, spec_.gru_hidden}));
    return m;
  }

  MemoryState<S> update(const MemoryState<S>& m, const nn::Tensor<S>& xv,
                        const nn::Tensor<S>& xo) const override {
    MemoryState<S> out;
    out.batch = m.batch;
    out.step_count = m.step_count + 1;
    nn::Tensor<S> x = nn::concat_cols<S>({xv, xo});
    for (size_t i = 0; i < cells_.size(); ++i) {
      nn::Tensor<S> h = cells_[i](m.slots[i], x);
      out.slots.push_back(h);
      x = h;
    }
    return out;
  }

  nn::Tensor<S> read(const MemoryState<S>& m) const override {
    nn::Tensor<S> state = nn::concat_cols<S>(m.slots);
    std::vector<nn::Tensor<S>> tokens;
    tokens.reserve(read_mlps_.size());
    for (const auto& mlp : read_mlps_) tokens.push_back(mlp(state));
    return nn::stack_rows_grouped(tokens, m.batch);
  }

  size_t state_bytes() const override {
    return static_cast<size_t>(spec_.gru_layers) * spec_.gru_hidden * sizeof(S);
  }

 private:
  ModelSpec spec_;
  std::vector<nn::GruCell<S>> cells_;
  std::vector<nn::Mlp<S>> read_mlps_;
};

// Exponential moving average with a trainable per-element decay vector,
// parameterized pre-sigmoid so it stays in (0,1). Read-out is a reshape.
template <class S>
class EmaCore : public MemoryCore<S> {
 public:
  EmaCore(const ModelSpec& spec, nn::ParamSet<S>& params, RngStream& rng) : spec_(spec) {
    // sigmoid(2.1972...) = 0.9, the strongest constant-lambda baseline
    lambda_raw_ = params.add(
        "ema.lambda_raw", nn::Tensor<S>::full({spec.ema_size}, static_cast<S>(2.1972245773)));
    input_proj_ =
        nn::Linear<S>(params, "ema.input_proj", spec.d_vis + ModelSpec::d_odo, spec.ema_size,
                      rng);
  }

  MemoryState<S> init(int batch) const override {
    MemoryState<S> m;
    m.batch = batch;
    m.slots = {nn::Tensor<S>::zeros({batch, spec_.ema_size})};
    return m;
  }

  MemoryState<S> update(const MemoryState<S>& m, const nn::Tensor<S>& xv,
                        const nn::Tensor<S>& xo) const override {
    nn::Tensor<S> lam = nn::sigmoid(lambda_raw_);
    nn::Tensor<S> decayed = nn::mul_colwise(m.slots[0], lam);
    nn::Tensor<S> injected = input_proj_(nn::concat_cols<S>({xv, xo}));
    MemoryState<S> out;
    out.batch = m.batch;
    out.step_count = m.step_count + 1;
    out.slots = {nn::add(decayed, injected)};
    return out;
  }

  nn::Tensor<S> read(const MemoryState<S>& m) const override {
    return nn::reshape(m.slots[0], {m.batch * spec_.n_read, spec_.e_read});
  }

  size_t state_bytes() const override {
    return static_cast<size_t>(spec_.ema_size) * sizeof(S);
  }

  const nn::Tensor<S>& lambda_raw() const { return lambda_raw_; }
  const nn::Linear<S>& input_proj() const { return input_proj_; }

 private:
  ModelSpec spec_;
  nn::Tensor<S> lambda_raw_;
  nn::Linear<S> input_proj_;
};

// Non-recurrent baseline: a ring buffer of the last T_trunc encoded
// observations, forwarded to the decoder as-is. Short histories left-pad by
// repeating the first item.
template <class S>
class TruncHistCore : public MemoryCore<S> {
 public:
  TruncHistCore(const ModelSpec& spec, nn::ParamSet<S>&, RngStream&) : spec_(spec) {}

  MemoryState<S> init(int batch) const override {
    MemoryState<S> m;
    m.batch = batch;
    return m;
  }

  MemoryState<S> update(const MemoryState<S>& m, const nn::Tensor<S>& xv,
                        const nn::Tensor<S>& xo) const override {
    MemoryState<S> out = m;
    out.step_count = m.step_count + 1;
    out.slots.push_back(nn::concat_cols<S>({xv, xo}));
    if (static_cast<int>(out.slots.size()) > spec_.t_trunc)
      out.slots.erase(out.slots.begin());
    return out;
  }

  nn::Tensor<S> read(const MemoryState<S>& m) const override {
    if (m.slots.empty()) throw InputError("trunc_hist read before any update");
    std::vector<nn::Tensor<S>> items;
    items.reserve(static_cast<size_t>(spec_.t_trunc));
    for (int i = static_cast<int>(m.slots.size()); i < spec_.t_trunc; ++i)
      items.push_back(m.slots.front());
    for (const auto& s : m.slots) items.push_back(s);
    return nn::stack_rows_grouped(items, m.batch);
  }

  size_t state_bytes() const override {
    return static_cast<size_t>(spec_.t_trunc) * (spec_.d_vis + ModelSpec::d_odo) * sizeof(S);
  }

 private:
  ModelSpec spec_;
};

template <class S>
std::unique_ptr<MemoryCore<S>> make_memory_core(const ModelSpec& spec, nn::ParamSet<S>& params,
                                                RngStream& rng) {
  switch (spec.family) {
    case Family::kinaema: return std::make_unique<KinaemaCore<S>>(spec, params, rng);
    case Family::gru: return std::make_unique<GruCore<S>>(spec, params, rng);
    case Family::ema: return std::make_unique<EmaCore<S>>(spec, params, rng);
    case Family::trunc_hist: return std::make_unique<TruncHistCore<S>>(spec, params, rng);
  }
  throw ConfigError("unknown family");
}

}  // namespace kinaema::models
