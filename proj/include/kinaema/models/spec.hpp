#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "kinaema/util/errors.hpp"

namespace kinaema::models {

enum class Family { kinaema, gru, ema, trunc_hist };

Family family_from_name(const std::string& name);
std::string family_name(Family f);

enum class DecoderVariant { plain, chained };

// Full architecture configuration. Desk-scale defaults train in reasonable
// time on CPU; paper_shape() selects the published memory geometry for
// shape-only tests.
struct ModelSpec {
  Family family = Family::kinaema;

  // memory geometry
  int n_mem = 8;     // N memory embeddings
  int e_mem = 64;    // of dimension E
  int n_read = 32;   // read out into N' tokens
  int e_read = 16;   // of dimension E'

  // encoders
  int retina_dim = 128;  // from the dataset config
  int d_vis = 64;
  static constexpr int d_odo = 64;
  static constexpr int odo_input_dim = 4;

  // update transformer + gating (kinaema)
  int tf_layers = 2;
  int tf_heads = 4;
  int tf_mlp_factor = 4;
  int gating_layers = 2;
  bool learned_m0 = true;
  bool ablate_transformer = false;
  bool ablate_gating = false;

  // gru family
  int gru_layers = 2;
  int gru_hidden = 256;
  int gru_read_hidden = 64;

  // ema family
  int ema_size = 512;

  // truncated history family
  int t_trunc = 4;

  // decoders
  DecoderVariant decoder = DecoderVariant::plain;
  int query_chunks = 8;
  int dec_sa_blocks = 4;
  int dec_chains = 3;
  int dec_heads = 4;
  int dec_mlp_factor = 4;        // plain decoder SA blocks
  int dec_chain_mlp_factor = 2;  // chained decoder MLP blocks

  uint64_t seed = 0;

  static ModelSpec desk_default(Family f, int retina_dim);
  static ModelSpec paper_shape();

  int chunk_dim() const { return retina_dim / query_chunks; }
  int read_tokens() const;
  int read_dim() const;  // width of read-out tokens (decoder kv input)
  int memory_floats() const;

  // Head count is capped so attention head dimension stays >= 16.
  static int effective_heads(int requested, int dim);

  void validate() const;

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

}  // namespace kinaema::models
