#include "kinaema/models/spec.hpp"

namespace kinaema::models {

Family family_from_name(const std::string& name) {
  if (name == "kinaema") return Family::kinaema;
  if (name == "gru") return Family::gru;
  if (name == "ema") return Family::ema;
  if (name == "trunc" || name == "trunc_hist") return Family::trunc_hist;
  throw ConfigError("unknown model family: " + name);
}

std::string family_name(Family f) {
  switch (f) {
    case Family::kinaema: return "kinaema";
    case Family::gru: return "gru";
    case Family::ema: return "ema";
    case Family::trunc_hist: return "trunc_hist";
  }
  return "?";
}

ModelSpec ModelSpec::desk_default(Family f, int retina_dim) {
  ModelSpec s;
  s.family = f;
  s.retina_dim = retina_dim;
  s.decoder = f == Family::kinaema ? DecoderVariant::plain : DecoderVariant::chained;
  return s;
}

ModelSpec ModelSpec::paper_shape() {
  ModelSpec s;
  s.family = Family::kinaema;
  s.n_mem = 20;
  s.e_mem = 3072;
  s.n_read = 160;
  s.e_read = 384;
  s.tf_layers = 3;
  s.tf_heads = 24;
  s.gating_layers = 3;
  return s;
}

int ModelSpec::effective_heads(int requested, int dim) {
  int h = std::max(1, std::min(requested, dim / 16));
  while (h > 1 && dim % h != 0) --h;
  return h;
}

int ModelSpec::read_tokens() const {
  return family == Family::trunc_hist ? t_trunc : n_read;
}

int ModelSpec::read_dim() const {
  return family == Family::trunc_hist ? d_vis + d_odo : e_read;
}

int ModelSpec::memory_floats() const {
  switch (family) {
    case Family::kinaema: return n_mem * e_mem;
    case Family::gru: return gru_layers * gru_hidden;
    case Family::ema: return ema_size;
    case Family::trunc_hist: return t_trunc * (d_vis + d_odo);
  }
  return 0;
}

void ModelSpec::validate() const {
  if (family == Family::kinaema && n_mem * e_mem != n_read * e_read)
    throw ConfigError("kinaema read-out is a reshape: N*E (" + std::to_string(n_mem * e_mem) +
                      ") must equal N'*E' (" + std::to_string(n_read * e_read) + ")");
  if (family == Family::ema && ema_size != n_read * e_read)
    throw ConfigError("ema read-out is a reshape: memory size " + std::to_string(ema_size) +
                      " must equal N'*E' (" + std::to_string(n_read * e_read) + ")");
  if (retina_dim % query_chunks != 0)
    throw ConfigError("retina dim " + std::to_string(retina_dim) +
                      " not divisible into " + std::to_string(query_chunks) + " query chunks");
  if (family == Family::trunc_hist && t_trunc < 1)
    throw ConfigError("t_trunc must be >= 1");
}

nlohmann::json ModelSpec::to_json() const {
  return nlohmann::json{
      {"family", family_name(family)},
      {"n_mem", n_mem},
      {"e_mem", e_mem},
      {"n_read", n_read},
      {"e_read", e_read},
      {"retina_dim", retina_dim},
      {"d_vis", d_vis},
      {"tf_layers", tf_layers},
      {"tf_heads", tf_heads},
      {"tf_mlp_factor", tf_mlp_factor},
      {"gating_layers", gating_layers},
      {"learned_m0", learned_m0},
      {"ablate_transformer", ablate_transformer},
      {"ablate_gating", ablate_gating},
      {"gru_layers", gru_layers},
      {"gru_hidden", gru_hidden},
      {"gru_read_hidden", gru_read_hidden},
      {"ema_size", ema_size},
      {"t_trunc", t_trunc},
      {"decoder", decoder == DecoderVariant::plain ? "plain" : "chained"},
      {"query_chunks", query_chunks},
      {"dec_sa_blocks", dec_sa_blocks},
      {"dec_chains", dec_chains},
      {"dec_heads", dec_heads},
      {"dec_mlp_factor", dec_mlp_factor},
      {"dec_chain_mlp_factor", dec_chain_mlp_factor},
      {"seed", seed}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.family = family_from_name(j.at("family").get<std::string>());
  s.n_mem = j.at("n_mem").get<int>();
  s.e_mem = j.at("e_mem").get<int>();
  s.n_read = j.at("n_read").get<int>();
  s.e_read = j.at("e_read").get<int>();
  s.retina_dim = j.at("retina_dim").get<int>();
  s.d_vis = j.at("d_vis").get<int>();
  s.tf_layers = j.at("tf_layers").get<int>();
  s.tf_heads = j.at("tf_heads").get<int>();
  s.tf_mlp_factor = j.at("tf_mlp_factor").get<int>();
  s.gating_layers = j.at("gating_layers").get<int>();
  s.learned_m0 = j.at("learned_m0").get<bool>();
  s.ablate_transformer = j.at("ablate_transformer").get<bool>();
  s.ablate_gating = j.at("ablate_gating").get<bool>();
  s.gru_layers = j.at("gru_layers").get<int>();
  s.gru_hidden = j.at("gru_hidden").get<int>();
  s.gru_read_hidden = j.at("gru_read_hidden").get<int>();
  s.ema_size = j.at("ema_size").get<int>();
  s.t_trunc = j.at("t_trunc").get<int>();
  s.decoder = j.at("decoder").get<std::string>() == "plain" ? DecoderVariant::plain
                                                            : DecoderVariant::chained;
  s.query_chunks = j.at("query_chunks").get<int>();
  s.dec_sa_blocks = j.at("dec_sa_blocks").get<int>();
  s.dec_chains = j.at("dec_chains").get<int>();
  s.dec_heads = j.at("dec_heads").get<int>();
  s.dec_mlp_factor = j.at("dec_mlp_factor").get<int>();
  s.dec_chain_mlp_factor = j.at("dec_chain_mlp_factor").get<int>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

}  // namespace kinaema::models
