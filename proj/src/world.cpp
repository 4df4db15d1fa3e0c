#include "kinaema/world/world.hpp"

#include <algorithm>
#include <cmath>

namespace kinaema::world {

double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a > kPi) a -= 2.0 * kPi;
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

Se2Delta se2_delta(const Pose& from, const Pose& to) {
  double dx = to.x - from.x, dy = to.y - from.y;
  double c = std::cos(from.heading), s = std::sin(from.heading);
  return {c * dx + s * dy, -s * dx + c * dy, wrap_angle(to.heading - from.heading)};
}

Pose se2_compose(const Pose& base, const Se2Delta& d) {
  double c = std::cos(base.heading), s = std::sin(base.heading);
  return {base.x + c * d.dx_ego - s * d.dy_ego, base.y + s * d.dx_ego + c * d.dy_ego,
          wrap_angle(base.heading + d.dtheta)};
}

RelPose relpose(const Pose& agent, const Pose& goal) {
  double dx = goal.x - agent.x, dy = goal.y - agent.y;
  RelPose r;
  r.distance = std::hypot(dx, dy);
  r.bearing = r.distance > 0 ? wrap_angle(std::atan2(dy, dx) - agent.heading) : 0.0;
  double rot = wrap_angle(goal.heading - agent.heading);
  r.rot_cos = std::cos(rot);
  r.rot_sin = std::sin(rot);
  return r;
}

std::array<double, 4> odometry_vector(const Pose& from, const Pose& to) {
  Se2Delta d = se2_delta(from, to);
  return {d.dx_ego, d.dy_ego, std::cos(d.dtheta), std::sin(d.dtheta)};
}

Profile profile_from_name(const std::string& name) {
  if (name == "train") return Profile::train;
  if (name == "eval") return Profile::eval;
  throw InputError("unknown profile: " + name + " (expected train|eval)");
}

std::string profile_name(Profile p) { return p == Profile::train ? "train" : "eval"; }

Scene make_scene(uint64_t seed, const WorldConfig& config) {
  if (config.landmark_count <= 0)
    throw ConfigError("scene needs at least one landmark, got " +
                      std::to_string(config.landmark_count));
  RngStream rng = RngStream::split(seed, "scene");
  Scene scene;
  scene.id = "scene-" + std::to_string(seed);
  scene.seed = seed;
  scene.arena_w = config.arena_w;
  scene.arena_h = config.arena_h;
  scene.landmarks.resize(static_cast<size_t>(config.landmark_count));
  for (auto& lm : scene.landmarks) {
    lm.x = rng.uniform(-config.arena_w / 2, config.arena_w / 2);
    lm.y = rng.uniform(-config.arena_h / 2, config.arena_h / 2);
    lm.feature.resize(static_cast<size_t>(config.feature_dim));
    double norm2 = 0;
    for (auto& f : lm.feature) {
      f = static_cast<float>(rng.normal());
      norm2 += static_cast<double>(f) * f;
    }
    double inv = 1.0 / std::sqrt(std::max(norm2, 1e-30));
    for (auto& f : lm.feature) f = static_cast<float>(f * inv);
  }
  return scene;
}

namespace {

bool inside_arena(const Pose& p, const WorldConfig& c) {
  return std::abs(p.x) <= c.arena_w / 2 + 1e-9 && std::abs(p.y) <= c.arena_h / 2 + 1e-9;
}

double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

}  // namespace

std::vector<float> render(const Scene& scene, const Pose& pose, const WorldConfig& config,
                          double fov_deg_override) {
  if (!inside_arena(pose, config))
    throw InputError("render: pose outside arena");
  const int bins = config.retina_bins;
  const int fdim = config.feature_dim;
  const double fov = (fov_deg_override > 0 ? fov_deg_override : config.fov_deg) * kPi / 180.0;
  std::vector<float> retina(static_cast<size_t>(bins) * fdim, 0.0f);
  for (const auto& lm : scene.landmarks) {
    double dx = lm.x - pose.x, dy = lm.y - pose.y;
    double dist = std::hypot(dx, dy);
    if (dist > config.max_range) continue;
    double alpha = dist > 0 ? wrap_angle(std::atan2(dy, dx) - pose.heading) : 0.0;
    if (alpha < -fov / 2 || alpha >= fov / 2) continue;
    int bin = static_cast<int>(std::floor((alpha + fov / 2) / fov * bins));
    bin = std::clamp(bin, 0, bins - 1);
    float w = static_cast<float>(1.0 / (1.0 + dist));
    for (int f = 0; f < fdim; ++f)
      retina[static_cast<size_t>(bin) * fdim + f] += lm.feature[static_cast<size_t>(f)] * w;
  }
  return retina;
}

Pose step(const Pose& pose, Action action, const ActionProfile& profile,
          const WorldConfig& config) {
  switch (action) {
    case Action::forward: {
      Pose out = pose;
      out.x = clampd(pose.x + profile.forward_m * std::cos(pose.heading), -config.arena_w / 2,
                     config.arena_w / 2);
      out.y = clampd(pose.y + profile.forward_m * std::sin(pose.heading), -config.arena_h / 2,
                     config.arena_h / 2);
      return out;
    }
    case Action::turn_left:
      return {pose.x, pose.y, wrap_angle(pose.heading + profile.turn_rad)};
    case Action::turn_right:
      return {pose.x, pose.y, wrap_angle(pose.heading - profile.turn_rad)};
  }
  throw InputError("unknown action");
}

namespace {

// Greedy goal pursuit: turn toward the goal when misaligned beyond half the
// turn increment, otherwise move forward. Arrival when within one forward
// step, which keeps the distance non-increasing on every forward move.
struct Pursuit {
  Pose goal;
  bool has_goal = false;

  void maybe_resample(const Pose& agent, RngStream& rng, const WorldConfig& cfg,
                      const ActionProfile& prof) {
    while (!has_goal || std::hypot(goal.x - agent.x, goal.y - agent.y) <= prof.forward_m) {
      goal.x = rng.uniform(-cfg.arena_w / 2, cfg.arena_w / 2);
      goal.y = rng.uniform(-cfg.arena_h / 2, cfg.arena_h / 2);
      goal.heading = 0;
      has_goal = true;
    }
  }

  Action next_action(const Pose& agent, const ActionProfile& prof) const {
    double beta = wrap_angle(std::atan2(goal.y - agent.y, goal.x - agent.x) - agent.heading);
    if (std::abs(beta) > prof.turn_rad / 2)
      return beta > 0 ? Action::turn_left : Action::turn_right;
    return Action::forward;
  }
};

}  // namespace

EpisodeRecord generate_episode(const Scene& scene, uint64_t seed, int length, Profile profile,
                               const WorldConfig& config) {
  if (length < 1) throw InputError("episode length must be >= 1");
  const ActionProfile prof = ActionProfile::of(profile);
  RngStream rng = RngStream::split(seed, "episode");

  Pose agent;
  agent.x = rng.uniform(-config.arena_w / 2, config.arena_w / 2);
  agent.y = rng.uniform(-config.arena_h / 2, config.arena_h / 2);
  agent.heading = rng.uniform(-kPi, kPi);

  Pursuit pursuit;
  EpisodeRecord ep;
  ep.scene_id = scene.id;
  ep.poses.reserve(static_cast<size_t>(length) + 1);
  ep.poses.push_back(agent);

  RngStream noise_rng = RngStream::split(seed, "obs-noise");
  auto observe = [&](const Pose& at, const Pose& prev) {
    Observation obs;
    obs.retina = render(scene, at, config);
    obs.odometry = odometry_vector(prev, at);
    if (config.obs_noise > 0) {
      for (auto& v : obs.retina) v += static_cast<float>(noise_rng.normal() * config.obs_noise);
      for (auto& v : obs.odometry) v += noise_rng.normal() * config.obs_noise;
    }
    return obs;
  };

  // First recorded step is the start pose itself: zero odometry by construction.
  ep.poses.push_back(agent);
  ep.observations.push_back(observe(agent, agent));

  for (int t = 1; t < length; ++t) {
    int hop = profile == Profile::train ? rng.uniform_int(1, 8) : 1;
    Pose prev = agent;
    for (int i = 0; i < hop; ++i) {
      pursuit.maybe_resample(agent, rng, config, prof);
      agent = step(agent, pursuit.next_action(agent, prof), prof, config);
    }
    ep.poses.push_back(agent);
    ep.observations.push_back(observe(agent, prev));
  }

  // Alternative views: same spot, disturbed pose (and optionally fov).
  RngStream alt_rng = RngStream::split(seed, "alt");
  const double max_shift = 0.5;
  const double max_pan = 50.0 * kPi / 180.0;
  for (int t = 0; t < length; ++t) {
    const Pose& base = ep.poses[static_cast<size_t>(t) + 1];
    Pose alt;
    alt.x = clampd(base.x + alt_rng.uniform(-max_shift, max_shift), -config.arena_w / 2,
                   config.arena_w / 2);
    alt.y = clampd(base.y + alt_rng.uniform(-max_shift, max_shift), -config.arena_h / 2,
                   config.arena_h / 2);
    alt.heading = wrap_angle(base.heading + alt_rng.uniform(-max_pan, max_pan));
    double fov = config.fov_jitter ? alt_rng.uniform(60.0, 120.0) : -1.0;
    ep.alt_poses.push_back(alt);
    ep.alt_retinas.push_back(render(scene, alt, config, fov));
  }
  return ep;
}

}  // namespace kinaema::world
