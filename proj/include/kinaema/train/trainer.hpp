#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kinaema/models/checkpoint.hpp"
#include "kinaema/models/queries.hpp"
#include "kinaema/models/sequence_model.hpp"
#include "kinaema/world/dataset.hpp"

namespace kinaema::train {

struct TrainConfig {
  int batch_size = 32;
  int64_t total_steps = 50000;
  int t_min = 20;
  int t_max = 40;
  double lr_max_base = 1.5e-4;  // scaled by batch_size / 256
  double min_lr = 1e-8;
  double warmup_fraction = 0.2;
  double weight_decay = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double grad_clip = 1.0;
  double mim_mask_ratio = 0.5;
  int bptt_window = 0;  // 0 = backprop through the full slice
  uint64_t seed = 0;
  int64_t val_every = 1000;
  int val_episodes = 64;
  int64_t log_every = 50;
  int64_t checkpoint_every = 1000;

  double lr_max() const { return lr_max_base * batch_size / 256.0; }
  void validate() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Linear warmup over the first warmup_fraction of steps, then cosine down to
// min_lr at the final step.
double lr_at(const TrainConfig& cfg, int64_t step);

// AdamW with decoupled weight decay and global-norm gradient clipping.
class AdamW {
 public:
  void init(const nn::ParamSet<float>& params);
  // Returns the pre-clip global gradient norm.
  double step(nn::ParamSet<float>& params, double lr, double weight_decay, double beta1,
              double beta2, double grad_clip);

  int64_t t() const { return t_; }
  std::vector<models::NamedArray> state_arrays(const nn::ParamSet<float>& params) const;
  void restore(const std::vector<models::NamedArray>& arrays,
               const nn::ParamSet<float>& params, int64_t t);

 private:
  int64_t t_ = 0;
  double eps_ = 1e-8;
  std::vector<std::vector<float>> m_, v_;
};

// One training batch: a slice of episodes plus the 2T queries per sample.
struct Batch {
  int batch = 0;
  int t = 0;
  int retina_dim = 0;
  std::vector<std::vector<float>> step_retinas;  // t entries of [B x R]
  std::vector<std::vector<float>> step_odometry;  // t entries of [B x 4]
  std::vector<float> query_retinas;  // [B*2t x R], sample-major
  std::vector<float> query_targets;  // [B*2t x 5]
};

Batch sample_batch(const world::Dataset& ds, const TrainConfig& cfg, RngStream& rng);

struct StepStats {
  double lr = 0;
  double loss_rpe = 0;
  double loss_mim = 0;
  double grad_norm = 0;
};

StepStats train_step(models::SequenceModel<float>& model, const Batch& batch, AdamW& opt,
                     const TrainConfig& cfg, int64_t step_index, RngStream& mask_rng);

struct TrainResult {
  int64_t steps_done = 0;
  double best_val = -1;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

using ValidationFn = std::function<double(const models::SequenceModel<float>&)>;

// Full training loop with JSON-lines logging, periodic validation/selection
// and checkpointing. Resumes bit-identically from out_dir/checkpoint_last if
// present (parameters, optimizer moments and rng streams are all restored).
// stop_after > 0 limits how many steps this invocation runs; a later call
// picks up from the checkpoint.
TrainResult run_training(const models::ModelSpec& spec, const world::Dataset& train_ds,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const ValidationFn& validate = nullptr, std::ostream* progress = nullptr,
                  int64_t stop_after = -1);

}  // namespace kinaema::train
