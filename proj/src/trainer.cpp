#include "kinaema/train/trainer.hpp"

#include <cmath>
#include <fstream>

#include "kinaema/models/checkpoint.hpp"

namespace kinaema::train {

using models::Checkpoint;
using models::ModelSpec;
using models::NamedArray;
using models::SequenceModel;
using nlohmann::json;
using nn::Tensor;

void TrainConfig::validate() const {
  if (t_min > t_max) throw ConfigError("t_min must be <= t_max");
  if (t_min < 1) throw ConfigError("t_min must be >= 1");
  if (warmup_fraction <= 0 || warmup_fraction >= 1)
    throw ConfigError("warmup_fraction must lie in (0, 1)");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (mim_mask_ratio <= 0 || mim_mask_ratio > 1)
    throw ConfigError("mim_mask_ratio must lie in (0, 1]");
}

json TrainConfig::to_json() const {
  return json{{"batch_size", batch_size},
              {"total_steps", total_steps},
              {"t_min", t_min},
              {"t_max", t_max},
              {"lr_max_base", lr_max_base},
              {"min_lr", min_lr},
              {"warmup_fraction", warmup_fraction},
              {"weight_decay", weight_decay},
              {"beta1", beta1},
              {"beta2", beta2},
              {"grad_clip", grad_clip},
              {"mim_mask_ratio", mim_mask_ratio},
              {"bptt_window", bptt_window},
              {"seed", seed},
              {"val_every", val_every},
              {"val_episodes", val_episodes},
              {"log_every", log_every},
              {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.t_min = j.value("t_min", c.t_min);
  c.t_max = j.value("t_max", c.t_max);
  c.lr_max_base = j.value("lr_max_base", c.lr_max_base);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.mim_mask_ratio = j.value("mim_mask_ratio", c.mim_mask_ratio);
  c.bptt_window = j.value("bptt_window", c.bptt_window);
  c.seed = j.value("seed", c.seed);
  c.val_every = j.value("val_every", c.val_every);
  c.val_episodes = j.value("val_episodes", c.val_episodes);
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  return c;
}

double lr_at(const TrainConfig& cfg, int64_t step) {
  const int64_t warmup = static_cast<int64_t>(std::llround(cfg.total_steps * cfg.warmup_fraction));
  const double lr_max = cfg.lr_max();
  if (warmup > 0 && step < warmup) return lr_max * static_cast<double>(step) / warmup;
  const int64_t last = cfg.total_steps - 1;
  if (last <= warmup) return lr_max;
  double progress = static_cast<double>(step - warmup) / static_cast<double>(last - warmup);
  progress = std::min(std::max(progress, 0.0), 1.0);
  return cfg.min_lr + 0.5 * (lr_max - cfg.min_lr) * (1.0 + std::cos(world::kPi * progress));
}

void AdamW::init(const nn::ParamSet<float>& params) {
  t_ = 0;
  m_.clear();
  v_.clear();
  for (const auto& e : params.entries()) {
    m_.emplace_back(e.tensor.numel(), 0.0f);
    v_.emplace_back(e.tensor.numel(), 0.0f);
  }
}

double AdamW::step(nn::ParamSet<float>& params, double lr, double weight_decay, double beta1,
                   double beta2, double grad_clip) {
  double norm2 = 0;
  for (const auto& e : params.entries())
    for (float g : e.tensor.node()->grad) norm2 += static_cast<double>(g) * g;
  double norm = std::sqrt(norm2);
  double clip_scale = (grad_clip > 0 && norm > grad_clip) ? grad_clip / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (size_t pi = 0; pi < params.entries().size(); ++pi) {
    auto& tensor = params.entries()[pi].tensor;
    auto& values = tensor.values();
    const auto& grad = tensor.node()->grad;
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (size_t i = 0; i < values.size(); ++i) {
      double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]) * clip_scale;
      double mi = beta1 * m[i] + (1.0 - beta1) * g;
      double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
      double p = static_cast<double>(values[i]);
      p -= lr * weight_decay * p;  // decoupled decay
      p -= lr * update;
      values[i] = static_cast<float>(p);
    }
  }
  return norm;
}

std::vector<NamedArray> AdamW::state_arrays(const nn::ParamSet<float>& params) const {
  std::vector<NamedArray> out;
  for (size_t pi = 0; pi < params.entries().size(); ++pi) {
    const auto& e = params.entries()[pi];
    out.push_back({"opt.m." + e.name, e.tensor.shape(), m_[pi]});
    out.push_back({"opt.v." + e.name, e.tensor.shape(), v_[pi]});
  }
  return out;
}

void AdamW::restore(const std::vector<NamedArray>& arrays, const nn::ParamSet<float>& params,
                    int64_t t) {
  init(params);
  t_ = t;
  for (size_t pi = 0; pi < params.entries().size(); ++pi) {
    const std::string& name = params.entries()[pi].name;
    for (const auto& a : arrays) {
      if (a.name == "opt.m." + name) m_[pi] = a.data;
      if (a.name == "opt.v." + name) v_[pi] = a.data;
    }
  }
}

Batch sample_batch(const world::Dataset& ds, const TrainConfig& cfg, RngStream& rng) {
  if (ds.episodes.empty()) throw InputError("sample_batch: empty dataset");
  for (const auto& ep : ds.episodes)
    if (ep.length() < cfg.t_max)
      throw InputError("sample_batch: dataset episode shorter than t_max=" +
                       std::to_string(cfg.t_max));

  Batch batch;
  batch.batch = cfg.batch_size;
  batch.t = rng.uniform_int(cfg.t_min, cfg.t_max);
  batch.retina_dim = ds.world.retina_dim();
  const int b = batch.batch, t = batch.t, rdim = batch.retina_dim;

  batch.step_retinas.assign(static_cast<size_t>(t),
                            std::vector<float>(static_cast<size_t>(b) * rdim));
  batch.step_odometry.assign(static_cast<size_t>(t),
                             std::vector<float>(static_cast<size_t>(b) * 4));
  batch.query_retinas.reserve(static_cast<size_t>(b) * 2 * t * rdim);
  batch.query_targets.reserve(static_cast<size_t>(b) * 2 * t * 5);

  for (int i = 0; i < b; ++i) {
    int ep_idx = rng.uniform_int(0, static_cast<int>(ds.episodes.size()) - 1);
    const auto& ep = ds.episodes[static_cast<size_t>(ep_idx)];
    int start = rng.uniform_int(0, ep.length() - t);
    for (int s = 0; s < t; ++s) {
      const auto& obs = ep.observations[static_cast<size_t>(start + s)];
      std::copy(obs.retina.begin(), obs.retina.end(),
                batch.step_retinas[static_cast<size_t>(s)].begin() + static_cast<size_t>(i) * rdim);
      float* odo = batch.step_odometry[static_cast<size_t>(s)].data() + static_cast<size_t>(i) * 4;
      if (s == 0) {
        // the slice starts a fresh memory: no prior motion
        odo[0] = 0;
        odo[1] = 0;
        odo[2] = 1;
        odo[3] = 0;
      } else {
        for (int j = 0; j < 4; ++j) odo[j] = static_cast<float>(obs.odometry[static_cast<size_t>(j)]);
      }
    }
    models::QuerySet qs = models::make_training_queries(ep, start, t);
    batch.query_retinas.insert(batch.query_retinas.end(), qs.retinas.begin(), qs.retinas.end());
    batch.query_targets.insert(batch.query_targets.end(), qs.targets.begin(), qs.targets.end());
  }
  return batch;
}

StepStats train_step(SequenceModel<float>& model, const Batch& batch, AdamW& opt,
                     const TrainConfig& cfg, int64_t step_index, RngStream& mask_rng) {
  const int b = batch.batch, t = batch.t, rdim = batch.retina_dim;
  const int qps = 2 * t;

  auto state = model.init_state(b);
  for (int s = 0; s < t; ++s) {
    if (cfg.bptt_window > 0 && (t - s) == cfg.bptt_window) state = state.detached();
    state = model.update(state, Tensor<float>::from(batch.step_retinas[static_cast<size_t>(s)], {b, rdim}),
                         Tensor<float>::from(batch.step_odometry[static_cast<size_t>(s)], {b, 4}));
  }
  auto y = model.read(state);

  auto queries = Tensor<float>::from(batch.query_retinas, {b * qps, rdim});
  auto targets = Tensor<float>::from(batch.query_targets, {b * qps, 5});
  auto preds = model.decode_rpe(y, queries, qps);
  auto l_rpe = models::loss_rpe(preds, targets);

  const int chunk_rows = b * qps * model.query_chunks();
  std::vector<uint8_t> mask(static_cast<size_t>(chunk_rows));
  bool any = false;
  do {
    for (auto& v : mask) {
      v = mask_rng.uniform() < cfg.mim_mask_ratio ? 1 : 0;
      any = any || v;
    }
  } while (!any);
  auto recon = model.decode_mim(y, queries, mask, qps);
  auto l_mim = models::loss_mim(recon, model.mim_targets(queries), mask);

  auto loss = nn::add(l_rpe, l_mim);
  StepStats stats;
  stats.loss_rpe = l_rpe.item();
  stats.loss_mim = l_mim.item();
  stats.lr = lr_at(cfg, step_index);
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    double pnorm2 = 0;
    for (const auto& e : model.params().entries())
      for (float v : e.tensor.values()) pnorm2 += static_cast<double>(v) * v;
    throw NumericError("non-finite loss at step " + std::to_string(step_index) +
                       " (rpe=" + std::to_string(stats.loss_rpe) +
                       ", mim=" + std::to_string(stats.loss_mim) +
                       ", param_norm=" + std::to_string(std::sqrt(pnorm2)) + ")");
  }

  model.params().zero_grad();
  nn::backward(loss);
  stats.grad_norm = opt.step(model.params(), stats.lr, cfg.weight_decay, cfg.beta1, cfg.beta2,
                             cfg.grad_clip);
  return stats;
}

namespace {

json rng_to_json(const RngStream& rng) {
  json arr = json::array();
  for (uint64_t v : rng.serialize()) arr.push_back(v);
  return arr;
}

void rng_from_json(const json& j, RngStream& rng) {
  std::array<uint64_t, 4> st{};
  for (size_t i = 0; i < 4; ++i) st[i] = j.at(i).get<uint64_t>();
  rng.restore(st);
}

}  // namespace

TrainResult run_training(const ModelSpec& spec, const world::Dataset& train_ds, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const ValidationFn& validate,
                  std::ostream* progress, int64_t stop_after) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create training output directory " + out_dir.string());

  SequenceModel<float> model(spec);
  AdamW opt;
  opt.init(model.params());
  RngStream batch_rng = RngStream::split(cfg.seed, "train-batch");
  RngStream mask_rng = RngStream::split(cfg.seed, "train-mask");

  TrainResult result;
  result.last_checkpoint = out_dir / "checkpoint_last";
  result.best_checkpoint = out_dir / "checkpoint_best";
  int64_t start_step = 0;
  double best_val = -1;

  const auto last_dir = out_dir / "checkpoint_last";
  bool resumed = false;
  if (std::filesystem::exists(last_dir / "checkpoint.json")) {
    Checkpoint ckpt = models::load_checkpoint(last_dir);
    models::load_into_params(ckpt.arrays, model.params());
    opt.restore(ckpt.arrays, model.params(), ckpt.extra.at("optimizer").at("t").get<int64_t>());
    rng_from_json(ckpt.extra.at("rng").at("batch"), batch_rng);
    rng_from_json(ckpt.extra.at("rng").at("mask"), mask_rng);
    start_step = ckpt.step;
    best_val = ckpt.extra.value("best_val", -1.0);
    resumed = true;
  }

  auto save = [&](const std::filesystem::path& dir, int64_t step) {
    Checkpoint ckpt;
    ckpt.spec = spec;
    ckpt.step = step;
    ckpt.arrays = models::arrays_from_params(model.params());
    auto opt_arrays = opt.state_arrays(model.params());
    ckpt.arrays.insert(ckpt.arrays.end(), opt_arrays.begin(), opt_arrays.end());
    ckpt.extra = json{{"optimizer", {{"type", "adamw"}, {"t", opt.t()}}},
                      {"rng", {{"batch", rng_to_json(batch_rng)}, {"mask", rng_to_json(mask_rng)}}},
                      {"best_val", best_val},
                      {"train_config", cfg.to_json()}};
    models::save_checkpoint(dir, ckpt);
  };

  std::ofstream log(out_dir / "train_log.jsonl",
                    resumed ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open training log");

  const int64_t end_step =
      stop_after > 0 ? std::min<int64_t>(cfg.total_steps, start_step + stop_after)
                     : cfg.total_steps;
  for (int64_t step = start_step; step < end_step; ++step) {
    Batch batch = sample_batch(train_ds, cfg, batch_rng);
    StepStats stats = train_step(model, batch, opt, cfg, step, mask_rng);
    const int64_t done = step + 1;

    bool log_this = done % cfg.log_every == 0 || done == cfg.total_steps;
    json rec;
    if (log_this)
      rec = json{{"step", done},
                 {"lr", stats.lr},
                 {"loss_rpe", stats.loss_rpe},
                 {"loss_mim", stats.loss_mim},
                 {"grad_norm", stats.grad_norm},
                 {"t", batch.t}};

    if (validate && (done % cfg.val_every == 0 || done == cfg.total_steps)) {
      double val = validate(model);
      if (!log_this) {
        rec = json{{"step", done}, {"lr", stats.lr}, {"loss_rpe", stats.loss_rpe},
                   {"loss_mim", stats.loss_mim}};
        log_this = true;
      }
      rec["val_acc_2m_90deg"] = val;
      if (val > best_val) {
        best_val = val;
        save(out_dir / "checkpoint_best", done);
      }
    }
    if (log_this) log << rec.dump() << "\n" << std::flush;
    if (progress && done % cfg.log_every == 0)
      (*progress) << "step " << done << "/" << cfg.total_steps << " rpe=" << stats.loss_rpe
                  << " mim=" << stats.loss_mim << "\n" << std::flush;

    if (done % cfg.checkpoint_every == 0 || done == end_step)
      save(out_dir / "checkpoint_last", done);
  }

  if (!std::filesystem::exists(out_dir / "checkpoint_last" / "checkpoint.json"))
    save(out_dir / "checkpoint_last", end_step);
  result.steps_done = end_step - start_step;
  result.best_val = best_val;
  return result;
}

}  // namespace kinaema::train
