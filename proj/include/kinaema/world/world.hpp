#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kinaema/util/errors.hpp"
#include "kinaema/util/rng.hpp"

namespace kinaema::world {

inline constexpr double kPi = 3.14159265358979323846;

// Normalize an angle into (-pi, pi].
double wrap_angle(double a);

struct Pose {
  double x = 0, y = 0, heading = 0;
};

// Relative pose of a goal w.r.t. an agent: distance, bearing (angle from the
// agent heading toward the goal position) and goal heading as (cos, sin).
struct RelPose {
  double distance = 0;
  double bearing = 0;
  double rot_cos = 1;
  double rot_sin = 0;
};

struct Se2Delta {
  double dx_ego = 0, dy_ego = 0, dtheta = 0;
};

Se2Delta se2_delta(const Pose& from, const Pose& to);
Pose se2_compose(const Pose& base, const Se2Delta& d);
RelPose relpose(const Pose& agent, const Pose& goal);

enum class Action { forward = 0, turn_left = 1, turn_right = 2 };

enum class Profile { train, eval };

// Two deliberately incompatible action spaces: a 25cm test step cannot be
// composed from 10cm training steps.
struct ActionProfile {
  double forward_m = 0.25;
  double turn_rad = 10.0 * kPi / 180.0;
  static ActionProfile train() { return {0.10, 5.0 * kPi / 180.0}; }
  static ActionProfile eval() { return {0.25, 10.0 * kPi / 180.0}; }
  static ActionProfile of(Profile p) { return p == Profile::train ? train() : eval(); }
};

Profile profile_from_name(const std::string& name);
std::string profile_name(Profile p);

struct WorldConfig {
  double arena_w = 10.0;  // arena spans [-w/2, w/2] x [-h/2, h/2]
  double arena_h = 10.0;
  int landmark_count = 32;
  int feature_dim = 8;
  int retina_bins = 16;
  double fov_deg = 90.0;
  double max_range = 5.0;
  double obs_noise = 0.0;
  bool fov_jitter = false;
  int retina_dim() const { return retina_bins * feature_dim; }
};

struct Landmark {
  double x = 0, y = 0;
  std::vector<float> feature;  // unit norm
};

struct Scene {
  std::string id;
  uint64_t seed = 0;
  double arena_w = 0, arena_h = 0;
  std::vector<Landmark> landmarks;
};

// One recorded trajectory. poses[0] is the start; observation k was taken at
// poses[k+1]; odometry[k] is the ego-frame delta poses[k] -> poses[k+1]. The
// first recorded step is the start pose itself, so odometry[0] is always the
// zero motion (0, 0, 1, 0).
struct Observation {
  std::vector<float> retina;
  std::array<double, 4> odometry{0, 0, 1, 0};
};

struct EpisodeRecord {
  std::string scene_id;
  std::vector<Pose> poses;               // length T+1
  std::vector<Observation> observations;  // length T
  std::vector<Pose> alt_poses;           // length T, perturbations of poses[k+1]
  std::vector<std::vector<float>> alt_retinas;  // length T
  int length() const { return static_cast<int>(observations.size()); }
};

Scene make_scene(uint64_t seed, const WorldConfig& config);

// Sum of landmark features binned over the field of view, weighted 1/(1+d).
std::vector<float> render(const Scene& scene, const Pose& pose, const WorldConfig& config,
                          double fov_deg_override = -1.0);

Pose step(const Pose& pose, Action action, const ActionProfile& profile,
          const WorldConfig& config);

EpisodeRecord generate_episode(const Scene& scene, uint64_t seed, int length, Profile profile,
                               const WorldConfig& config);

std::array<double, 4> odometry_vector(const Pose& from, const Pose& to);

}  // namespace kinaema::world
