#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "kinaema/world/dataset.hpp"
#include "kinaema/world/world.hpp"

using namespace kinaema;
using namespace kinaema::world;

namespace {

WorldConfig default_world() { return WorldConfig{}; }

bool poses_equal(const Pose& a, const Pose& b, double tol = 0.0) {
  return std::abs(a.x - b.x) <= tol && std::abs(a.y - b.y) <= tol &&
         std::abs(a.heading - b.heading) <= tol;
}

}  // namespace

TEST_CASE("make_scene is deterministic and respects invariants") {
  WorldConfig cfg = default_world();
  Scene a = make_scene(0, cfg);
  Scene b = make_scene(0, cfg);
  REQUIRE(a.landmarks.size() == 32);
  for (size_t i = 0; i < a.landmarks.size(); ++i) {
    CHECK(a.landmarks[i].x == b.landmarks[i].x);
    CHECK(a.landmarks[i].y == b.landmarks[i].y);
    CHECK(a.landmarks[i].feature == b.landmarks[i].feature);
    // inside arena
    CHECK(std::abs(a.landmarks[i].x) <= cfg.arena_w / 2);
    CHECK(std::abs(a.landmarks[i].y) <= cfg.arena_h / 2);
    // unit norm features
    double n2 = 0;
    for (float f : a.landmarks[i].feature) n2 += static_cast<double>(f) * f;
    CHECK(n2 == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("make_scene rejects an unlearnable empty world") {
  WorldConfig cfg = default_world();
  cfg.landmark_count = 0;
  CHECK_THROWS_AS(make_scene(1, cfg), ConfigError);
}

TEST_CASE("single-landmark scene renders scaled copies of its feature") {
  WorldConfig cfg = default_world();
  cfg.landmark_count = 1;
  Scene scene = make_scene(42, cfg);
  const auto& lm = scene.landmarks[0];
  Pose pose{lm.x - 1.0, lm.y, 0.0};  // landmark 1m ahead
  auto retina = render(scene, pose, cfg);
  int nonzero_bins = 0;
  for (int b = 0; b < cfg.retina_bins; ++b) {
    double mag2 = 0;
    for (int f = 0; f < cfg.feature_dim; ++f) {
      double v = retina[static_cast<size_t>(b) * cfg.feature_dim + f];
      mag2 += v * v;
    }
    if (mag2 == 0) continue;
    ++nonzero_bins;
    // scaled copy: direction matches the unit feature
    double scale_val = std::sqrt(mag2);
    for (int f = 0; f < cfg.feature_dim; ++f)
      CHECK(retina[static_cast<size_t>(b) * cfg.feature_dim + f] ==
            doctest::Approx(lm.feature[static_cast<size_t>(f)] * scale_val).epsilon(1e-5));
  }
  CHECK(nonzero_bins == 1);
}

TEST_CASE("rotating by one bin width shifts a landmark's contribution by one bin") {
  WorldConfig cfg = default_world();
  cfg.landmark_count = 1;
  Scene scene = make_scene(7, cfg);
  auto& lm = scene.landmarks[0];
  lm.x = 2.0;
  lm.y = 0.0;
  double bin_width = cfg.fov_deg * kPi / 180.0 / cfg.retina_bins;
  // aim so the landmark sits in the middle of a bin
  Pose pose{0, 0, bin_width / 2};
  auto r0 = render(scene, pose, cfg);
  Pose rotated{0, 0, pose.heading + bin_width};
  auto r1 = render(scene, rotated, cfg);

  auto hot_bin = [&](const std::vector<float>& r) {
    for (int b = 0; b < cfg.retina_bins; ++b)
      for (int f = 0; f < cfg.feature_dim; ++f)
        if (r[static_cast<size_t>(b) * cfg.feature_dim + f] != 0) return b;
    return -1;
  };
  int b0 = hot_bin(r0), b1 = hot_bin(r1);
  REQUIRE(b0 >= 0);
  CHECK(b1 == b0 - 1);
}

TEST_CASE("landmark behind the agent contributes zero") {
  WorldConfig cfg = default_world();
  cfg.landmark_count = 1;
  Scene scene = make_scene(7, cfg);
  scene.landmarks[0].x = -2.0;
  scene.landmarks[0].y = 0.0;
  Pose pose{0, 0, 0};  // looking +x, landmark at -x
  auto retina = render(scene, pose, cfg);
  for (float v : retina) CHECK(v == 0.0f);
}

TEST_CASE("render is additive over landmarks") {
  WorldConfig cfg = default_world();
  cfg.landmark_count = 2;
  Scene two = make_scene(3, cfg);
  Scene one_a = two, one_b = two;
  one_a.landmarks = {two.landmarks[0]};
  one_b.landmarks = {two.landmarks[1]};
  Pose pose{0, 0, 0.5};
  auto r2 = render(two, pose, cfg);
  auto ra = render(one_a, pose, cfg);
  auto rb = render(one_b, pose, cfg);
  for (size_t i = 0; i < r2.size(); ++i)
    CHECK(r2[i] == doctest::Approx(ra[i] + rb[i]).epsilon(1e-6));
}

TEST_CASE("render rejects poses outside the arena") {
  WorldConfig cfg = default_world();
  Scene scene = make_scene(1, cfg);
  CHECK_THROWS_AS(render(scene, Pose{cfg.arena_w, 0, 0}, cfg), InputError);
}

TEST_CASE("step: forward, inverse turns, full rotation") {
  WorldConfig cfg = default_world();
  auto eval_prof = ActionProfile::eval();

  Pose p0{0, 0, 0};
  Pose fwd = step(p0, Action::forward, eval_prof, cfg);
  CHECK(fwd.x == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(fwd.y == doctest::Approx(0.0));
  CHECK(fwd.heading == 0.0);

  Pose p{1, 2, 0.7};
  Pose lr = step(step(p, Action::turn_left, eval_prof, cfg), Action::turn_right, eval_prof, cfg);
  CHECK(lr.heading == doctest::Approx(p.heading).epsilon(1e-15));

  Pose spin = p;
  for (int i = 0; i < 36; ++i) spin = step(spin, Action::turn_left, eval_prof, cfg);
  CHECK(std::abs(wrap_angle(spin.heading - p.heading)) < 1e-9);
}

TEST_CASE("relpose axis-aligned and rotated-frame cases") {
  RelPose r = relpose(Pose{0, 0, 0}, Pose{2, 0, 0});
  CHECK(r.distance == doctest::Approx(2.0));
  CHECK(r.bearing == doctest::Approx(0.0));
  CHECK(r.rot_cos == doctest::Approx(1.0));
  CHECK(r.rot_sin == doctest::Approx(0.0));

  RelPose r2 = relpose(Pose{0, 0, kPi / 2}, Pose{0, 3, kPi / 2});
  CHECK(r2.distance == doctest::Approx(3.0));
  CHECK(r2.bearing == doctest::Approx(0.0));
  CHECK(r2.rot_cos == doctest::Approx(1.0));
  CHECK(r2.rot_sin == doctest::Approx(0.0).scale(1));
}

TEST_CASE("relpose is consistent under frame swap (SE(2) composition oracle)") {
  RngStream rng(99);
  for (int i = 0; i < 50; ++i) {
    Pose a{rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-kPi, kPi)};
    Pose g{rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-kPi, kPi)};
    RelPose fwd = relpose(a, g);
    RelPose back = relpose(g, a);
    CHECK(fwd.distance == doctest::Approx(back.distance).epsilon(1e-12));
    // walking the forward relpose from a lands on g (composition oracle)
    double wx = a.x + fwd.distance * std::cos(a.heading + fwd.bearing);
    double wy = a.y + fwd.distance * std::sin(a.heading + fwd.bearing);
    CHECK(wx == doctest::Approx(g.x).epsilon(1e-9));
    CHECK(wy == doctest::Approx(g.y).epsilon(1e-9));
    // rotations invert under swap
    double rot_f = std::atan2(fwd.rot_sin, fwd.rot_cos);
    double rot_b = std::atan2(back.rot_sin, back.rot_cos);
    CHECK(std::abs(wrap_angle(rot_f + rot_b)) < 1e-9);
    // unit-norm rotation encoding
    CHECK(fwd.rot_cos * fwd.rot_cos + fwd.rot_sin * fwd.rot_sin ==
          doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("episode odometry recomposes the recorded poses") {
  WorldConfig cfg = default_world();
  Scene scene = make_scene(5, cfg);
  for (Profile profile : {Profile::eval, Profile::train}) {
    EpisodeRecord ep = generate_episode(scene, 17, 50, profile, cfg);
    REQUIRE(ep.poses.size() == 51);
    REQUIRE(ep.observations.size() == 50);
    CHECK(ep.observations[0].odometry == std::array<double, 4>{0, 0, 1, 0});

    Pose acc = ep.poses[0];
    for (int t = 0; t < 50; ++t) {
      const auto& o = ep.observations[static_cast<size_t>(t)].odometry;
      acc = se2_compose(acc, {o[0], o[1], std::atan2(o[3], o[2])});
      const Pose& want = ep.poses[static_cast<size_t>(t) + 1];
      CHECK(std::abs(acc.x - want.x) < 1e-6);
      CHECK(std::abs(acc.y - want.y) < 1e-6);
      CHECK(std::abs(wrap_angle(acc.heading - want.heading)) < 1e-6);
    }
  }
}

TEST_CASE("episodes are deterministic in (seed, config)") {
  WorldConfig cfg = default_world();
  Scene scene = make_scene(5, cfg);
  EpisodeRecord a = generate_episode(scene, 3, 30, Profile::train, cfg);
  EpisodeRecord b = generate_episode(scene, 3, 30, Profile::train, cfg);
  REQUIRE(a.poses.size() == b.poses.size());
  for (size_t i = 0; i < a.poses.size(); ++i) CHECK(poses_equal(a.poses[i], b.poses[i]));
  for (size_t i = 0; i < a.observations.size(); ++i) {
    CHECK(a.observations[i].retina == b.observations[i].retina);
    CHECK(a.observations[i].odometry == b.observations[i].odometry);
  }
}

TEST_CASE("alternative poses stay within the perturbation bounds") {
  WorldConfig cfg = default_world();
  Scene scene = make_scene(23, cfg);
  EpisodeRecord ep = generate_episode(scene, 11, 40, Profile::eval, cfg);
  for (int t = 0; t < 40; ++t) {
    const Pose& base = ep.poses[static_cast<size_t>(t) + 1];
    const Pose& alt = ep.alt_poses[static_cast<size_t>(t)];
    CHECK(std::abs(alt.x - base.x) <= 0.5 + 1e-9);
    CHECK(std::abs(alt.y - base.y) <= 0.5 + 1e-9);
    CHECK(std::abs(wrap_angle(alt.heading - base.heading)) <= 50.0 * kPi / 180.0 + 1e-9);
  }
}

TEST_CASE("greedy pursuit never increases the distance to the goal on forward steps") {
  // reconstruct pursuit behaviour through the public pieces: forward steps in
  // an episode must shrink the distance to wherever the agent is heading;
  // verified indirectly via consecutive positions projected on heading
  WorldConfig cfg = default_world();
  Scene scene = make_scene(2, cfg);
  EpisodeRecord ep = generate_episode(scene, 31, 60, Profile::eval, cfg);
  // on eval profile every hop is one action; forward steps are those where
  // position changed; heading change means a turn
  for (size_t t = 1; t + 1 < ep.poses.size(); ++t) {
    const Pose& a = ep.poses[t];
    const Pose& b = ep.poses[t + 1];
    if (a.x != b.x || a.y != b.y) {
      double moved = std::hypot(b.x - a.x, b.y - a.y);
      CHECK(moved <= ActionProfile::eval().forward_m + 1e-9);
      CHECK(a.heading == b.heading);
    }
  }
}

TEST_CASE("disjoint landmark neighborhoods produce retinas with no shared contributors") {
  WorldConfig cfg = default_world();
  cfg.arena_w = 30;
  cfg.arena_h = 6;
  cfg.landmark_count = 16;
  Scene scene = make_scene(77, cfg);
  Pose left{-14, 0, 0};
  Pose right{14, 0, kPi};
  // contributing sets: landmarks within max_range of each pose
  std::set<int> cl, cr;
  for (int i = 0; i < cfg.landmark_count; ++i) {
    const auto& lm = scene.landmarks[static_cast<size_t>(i)];
    if (std::hypot(lm.x - left.x, lm.y - left.y) <= cfg.max_range) cl.insert(i);
    if (std::hypot(lm.x - right.x, lm.y - right.y) <= cfg.max_range) cr.insert(i);
  }
  for (int i : cl) CHECK(cr.count(i) == 0);
}

TEST_CASE("train and eval action profiles are deliberately incompatible") {
  // 25cm is not an integer multiple of 10cm; no train-profile forward chain
  // reaches an eval-profile forward displacement exactly
  double eval_step = ActionProfile::eval().forward_m;
  double train_step = ActionProfile::train().forward_m;
  bool exact = false;
  for (int k = 1; k < 100; ++k)
    if (std::abs(k * train_step - eval_step) < 1e-12) exact = true;
  CHECK(!exact);
}

TEST_CASE("dataset round-trip is bit exact") {
  WorldConfig cfg = default_world();
  DatasetGenConfig gen;
  gen.episodes = 10;
  gen.length = 20;
  gen.seed = 99;
  gen.profile = Profile::train;
  Dataset ds = generate_dataset(gen, cfg);

  auto dir = std::filesystem::temp_directory_path() / "kinaema_ds_test";
  std::filesystem::remove_all(dir);
  write_dataset(ds, dir);
  Dataset back = read_dataset(dir);

  REQUIRE(back.episodes.size() == 10);
  // write again: byte-identical files
  auto dir2 = std::filesystem::temp_directory_path() / "kinaema_ds_test2";
  std::filesystem::remove_all(dir2);
  write_dataset(back, dir2);
  for (const char* name : {"episodes.bin", "manifest.json"}) {
    std::ifstream f1(dir / name, std::ios::binary), f2(dir2 / name, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
  }
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("corrupting a payload byte is reported as a checksum error naming the episode") {
  WorldConfig cfg = default_world();
  DatasetGenConfig gen;
  gen.episodes = 3;
  gen.length = 8;
  gen.seed = 5;
  Dataset ds = generate_dataset(gen, cfg);
  auto dir = std::filesystem::temp_directory_path() / "kinaema_ds_corrupt";
  std::filesystem::remove_all(dir);
  write_dataset(ds, dir);

  {
    std::fstream f(dir / "episodes.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    char c;
    f.seekg(100);
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x5a);
    f.seekp(100);
    f.write(&c, 1);
  }
  try {
    read_dataset(dir);
    FAIL("expected checksum failure");
  } catch (const IoError& e) {
    std::string msg = e.what();
    CHECK(msg.find("checksum") != std::string::npos);
    CHECK(msg.find("episode 0") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("version mismatch and truncation give distinct load errors") {
  WorldConfig cfg = default_world();
  DatasetGenConfig gen;
  gen.episodes = 2;
  gen.length = 5;
  Dataset ds = generate_dataset(gen, cfg);
  auto dir = std::filesystem::temp_directory_path() / "kinaema_ds_vt";
  std::filesystem::remove_all(dir);
  write_dataset(ds, dir);

  SUBCASE("version") {
    std::ifstream in(dir / "manifest.json");
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    auto pos = s.find("\"format_version\": 1");
    REQUIRE(pos != std::string::npos);
    s.replace(pos, 19, "\"format_version\": 9");
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << s;
    out.close();
    try {
      read_dataset(dir);
      FAIL("expected version error");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("format_version") != std::string::npos);
    }
  }
  SUBCASE("truncation") {
    std::filesystem::resize_file(dir / "episodes.bin", 64);
    try {
      read_dataset(dir);
      FAIL("expected truncation error");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("an empty record list is a valid zero-episode file") {
  Dataset ds;
  ds.world = default_world();
  auto dir = std::filesystem::temp_directory_path() / "kinaema_ds_empty";
  std::filesystem::remove_all(dir);
  write_dataset(ds, dir);
  Dataset back = read_dataset(dir);
  CHECK(back.episodes.empty());
  std::filesystem::remove_all(dir);
}
