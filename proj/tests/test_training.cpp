#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "kinaema/eval/evaluator.hpp"
#include "kinaema/train/trainer.hpp"

using namespace kinaema;
using namespace kinaema::train;
using models::Family;
using models::ModelSpec;
using models::SequenceModel;
using nn::Tensor;

namespace {

world::Dataset small_dataset(int episodes = 24, int length = 44, uint64_t seed = 3) {
  world::WorldConfig wcfg;
  world::DatasetGenConfig gen;
  gen.episodes = episodes;
  gen.length = length;
  gen.seed = seed;
  gen.profile = world::Profile::train;
  return world::generate_dataset(gen, wcfg);
}

ModelSpec small_model(Family f = Family::kinaema) {
  ModelSpec s = ModelSpec::desk_default(f, 128);
  s.n_mem = 4;
  s.e_mem = 32;
  s.n_read = 8;
  s.e_read = 16;
  s.tf_layers = 1;
  s.gating_layers = 1;
  s.dec_sa_blocks = 2;
  s.dec_chains = 2;
  s.seed = 1;
  return s;
}

TrainConfig small_config() {
  TrainConfig c;
  c.batch_size = 4;
  c.total_steps = 8;
  c.t_min = 6;
  c.t_max = 10;
  c.val_every = 1000;
  c.log_every = 1;
  c.checkpoint_every = 4;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c;
  c.t_min = 50;
  c.t_max = 40;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.warmup_fraction = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("learning-rate schedule endpoints") {
  TrainConfig c;
  c.total_steps = 1000;
  c.warmup_fraction = 0.2;
  CHECK(lr_at(c, 0) == 0.0);
  CHECK(lr_at(c, 200) == doctest::Approx(c.lr_max()).epsilon(1e-12));
  CHECK(lr_at(c, 999) == doctest::Approx(c.min_lr).epsilon(1e-9));
  CHECK(lr_at(c, 600) < c.lr_max());
  CHECK(lr_at(c, 600) > c.min_lr);
}

TEST_CASE("sample_batch: degenerate range, uniformity, determinism") {
  world::Dataset ds = small_dataset(8, 44);

  TrainConfig c;
  c.batch_size = 2;
  c.t_min = 10;
  c.t_max = 10;
  RngStream rng(5);
  for (int i = 0; i < 5; ++i) CHECK(sample_batch(ds, c, rng).t == 10);

  // chi-square uniformity of T over [20, 40]: 21 bins, df=20, p>0.01
  c.t_min = 20;
  c.t_max = 40;
  c.batch_size = 1;
  RngStream rng2(7);
  std::vector<int> counts(21, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[static_cast<size_t>(sample_batch(ds, c, rng2).t - 20)];
  double expected = double(draws) / 21.0;
  double chi2 = 0;
  for (int k : counts) chi2 += (k - expected) * (k - expected) / expected;
  CHECK(chi2 < 37.57);  // critical value, chi2_{0.99, 20}

  // fixed seed gives identical batches
  RngStream ra(9), rb(9);
  Batch a = sample_batch(ds, c, ra), b = sample_batch(ds, c, rb);
  CHECK(a.t == b.t);
  CHECK(a.query_targets == b.query_targets);
  CHECK(a.step_retinas == b.step_retinas);

  // slices start fresh: first odometry is the zero motion
  CHECK(a.step_odometry[0][0] == 0.0f);
  CHECK(a.step_odometry[0][2] == 1.0f);

  // dataset too short is rejected
  c.t_max = 100;
  RngStream rc(1);
  CHECK_THROWS_AS(sample_batch(ds, c, rc), InputError);
}

TEST_CASE("adamw: decoupled weight decay, clipping, zero-lr step") {
  nn::ParamSet<float> ps;
  RngStream rng(3);
  auto p = ps.add("p", Tensor<float>::uniform({2, 3}, rng, -1, 1));
  AdamW opt;
  opt.init(ps);

  SUBCASE("zero gradients shrink parameters by exactly lr*wd") {
    std::vector<float> before = p.values();
    p.grad_mut();  // allocate zero grads
    opt.step(ps, 0.1, 0.05, 0.9, 0.99, 1.0);
    for (size_t i = 0; i < before.size(); ++i) {
      double expect = double(before[i]) - 0.1 * 0.05 * double(before[i]);
      CHECK(p.values()[i] == static_cast<float>(expect));
    }
  }

  SUBCASE("zero learning rate leaves parameters bit-identical") {
    std::vector<float> before = p.values();
    auto& g = p.grad_mut();
    for (auto& v : g) v = 0.3f;
    opt.step(ps, 0.0, 0.05, 0.9, 0.99, 1.0);
    CHECK(p.values() == before);
  }

  SUBCASE("clipping at norm 10 equals pre-scaled gradients at norm 1") {
    // grads of norm 10 with clip 1  ==  grads scaled to norm 1 with no clip
    nn::ParamSet<float> ps2;
    auto q = ps2.add("q", Tensor<float>::from(p.values(), p.shape()));
    AdamW opt2;
    opt2.init(ps2);

    auto& g1 = p.grad_mut();
    std::fill(g1.begin(), g1.end(), 10.0f / std::sqrt(6.0f));  // norm 10
    double norm = opt.step(ps, 0.01, 0.0, 0.9, 0.99, 1.0);
    CHECK(norm == doctest::Approx(10.0).epsilon(1e-5));

    auto& g2 = q.grad_mut();
    std::fill(g2.begin(), g2.end(), 1.0f / std::sqrt(6.0f));  // norm 1
    opt2.step(ps2, 0.01, 0.0, 0.9, 0.99, 0.0);

    for (size_t i = 0; i < p.values().size(); ++i)
      CHECK(p.values()[i] == doctest::Approx(q.values()[i]).epsilon(1e-6));
  }
}

TEST_CASE("adamw converges on a quadratic toy problem") {
  // minimize (p - c)^2; closed-form optimum is c
  const float c_target = 0.73f;
  nn::ParamSet<float> ps;
  auto p = ps.add("p", Tensor<float>::from({-1.5f}, {1, 1}));
  AdamW opt;
  opt.init(ps);
  for (int i = 0; i < 500; ++i) {
    auto diff = nn::sub(p, Tensor<float>::full({1, 1}, c_target));
    auto loss = nn::sum_all(nn::square(diff));
    ps.zero_grad();
    nn::backward(loss);
    opt.step(ps, 0.05, 0.0, 0.9, 0.99, 0.0);
  }
  CHECK(std::abs(p.values()[0] - c_target) < 1e-4);
}

TEST_CASE("train runs, logs, and is deterministic across runs") {
  world::Dataset ds = small_dataset(8, 12);
  ModelSpec spec = small_model();
  TrainConfig cfg = small_config();

  auto dir1 = std::filesystem::temp_directory_path() / "kinaema_train_a";
  auto dir2 = std::filesystem::temp_directory_path() / "kinaema_train_b";
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);

  auto r1 = run_training(spec, ds, cfg, dir1);
  auto r2 = run_training(spec, ds, cfg, dir2);
  CHECK(r1.steps_done == 8);
  CHECK(r2.steps_done == 8);

  std::ifstream f1(dir1 / "train_log.jsonl"), f2(dir2 / "train_log.jsonl");
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(!s1.empty());
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("resume from checkpoint reproduces the uninterrupted run bit-identically") {
  world::Dataset ds = small_dataset(8, 12);
  ModelSpec spec = small_model(Family::gru);
  spec.gru_layers = 1;
  spec.gru_hidden = 32;
  spec.n_read = 8;
  spec.e_read = 16;
  spec.gru_read_hidden = 16;
  TrainConfig cfg = small_config();
  cfg.checkpoint_every = 2;

  auto full_dir = std::filesystem::temp_directory_path() / "kinaema_resume_full";
  auto part_dir = std::filesystem::temp_directory_path() / "kinaema_resume_part";
  std::filesystem::remove_all(full_dir);
  std::filesystem::remove_all(part_dir);

  run_training(spec, ds, cfg, full_dir);
  run_training(spec, ds, cfg, part_dir, nullptr, nullptr, /*stop_after=*/4);
  run_training(spec, ds, cfg, part_dir);  // resume 4 -> 8

  auto a = models::load_checkpoint(full_dir / "checkpoint_last");
  auto b = models::load_checkpoint(part_dir / "checkpoint_last");
  REQUIRE(a.step == 8);
  REQUIRE(b.step == 8);
  REQUIRE(a.arrays.size() == b.arrays.size());
  for (size_t i = 0; i < a.arrays.size(); ++i) {
    CHECK(a.arrays[i].name == b.arrays[i].name);
    CHECK(a.arrays[i].data == b.arrays[i].data);
  }
  std::filesystem::remove_all(full_dir);
  std::filesystem::remove_all(part_dir);
}

TEST_CASE("short training run decreases the pose loss on a tiny world") {
  world::WorldConfig wcfg;
  wcfg.arena_w = 6;
  wcfg.arena_h = 6;
  world::DatasetGenConfig gen;
  gen.episodes = 32;
  gen.length = 16;
  gen.seed = 21;
  gen.profile = world::Profile::train;
  world::Dataset ds = world::generate_dataset(gen, wcfg);

  ModelSpec spec = small_model();
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.total_steps = 120;
  cfg.t_min = 8;
  cfg.t_max = 12;
  cfg.warmup_fraction = 0.1;
  cfg.lr_max_base = 2e-3;  // short-horizon smoke, not the paper schedule
  cfg.log_every = 1;
  cfg.checkpoint_every = 1000;
  cfg.seed = 4;

  auto dir = std::filesystem::temp_directory_path() / "kinaema_train_smoke";
  std::filesystem::remove_all(dir);
  run_training(spec, ds, cfg, dir);

  std::ifstream log(dir / "train_log.jsonl");
  std::string line;
  std::vector<double> losses;
  while (std::getline(log, line))
    losses.push_back(nlohmann::json::parse(line).at("loss_rpe").get<double>());
  REQUIRE(losses.size() == 120);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) head += losses[static_cast<size_t>(i)];
  for (int i = 100; i < 120; ++i) tail += losses[static_cast<size_t>(i)];
  CHECK(tail < head);
  std::filesystem::remove_all(dir);
}

TEST_CASE("m0 and positional embeddings move during training") {
  world::Dataset ds = small_dataset(8, 12);
  ModelSpec spec = small_model();
  TrainConfig cfg = small_config();
  cfg.total_steps = 2;

  SequenceModel<float> model(spec);
  std::vector<float> m0_before = model.params().find("kinaema.state.m0")->values();

  AdamW opt;
  opt.init(model.params());
  RngStream brng = RngStream::split(cfg.seed, "train-batch");
  RngStream mrng = RngStream::split(cfg.seed, "train-mask");
  Batch batch = sample_batch(ds, cfg, brng);
  train_step(model, batch, opt, cfg, cfg.total_steps / 2, mrng);

  double delta = 0, e_grad = 0;
  const auto& m0_after = model.params().find("kinaema.state.m0")->values();
  for (size_t i = 0; i < m0_before.size(); ++i)
    delta += std::abs(double(m0_after[i]) - double(m0_before[i]));
  for (float g : model.params().find("kinaema.pos_embed.e")->grad()) e_grad += std::abs(g);
  CHECK(delta > 0);
  CHECK(e_grad > 0);
}
