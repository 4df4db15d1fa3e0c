#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "kinaema/world/world.hpp"

namespace kinaema::models {

// Supervision order: distance, bearing cos/sin, rotation cos/sin.
inline std::array<float, 5> relpose_to_target(const world::RelPose& r) {
  return {static_cast<float>(r.distance), static_cast<float>(std::cos(r.bearing)),
          static_cast<float>(std::sin(r.bearing)), static_cast<float>(r.rot_cos),
          static_cast<float>(r.rot_sin)};
}

// 2T queries against the memory at the slice end: the T observed retinas plus
// the T alternative views, each with its analytic relative-pose target.
struct QuerySet {
  int count = 0;
  int retina_dim = 0;
  std::vector<float> retinas;   // [count x retina_dim]
  std::vector<float> targets;   // [count x 5]
  std::vector<uint8_t> is_alt;  // [count]
};

inline QuerySet make_training_queries(const world::EpisodeRecord& ep, int start, int t) {
  if (t < 1 || start < 0 || start + t > ep.length())
    throw InputError("query slice [" + std::to_string(start) + ", " +
                     std::to_string(start + t) + ") out of episode of length " +
                     std::to_string(ep.length()));
  const world::Pose& anchor = ep.poses[static_cast<size_t>(start + t)];
  QuerySet qs;
  qs.count = 2 * t;
  qs.retina_dim = static_cast<int>(ep.observations[0].retina.size());
  qs.retinas.reserve(static_cast<size_t>(qs.count) * qs.retina_dim);
  qs.targets.reserve(static_cast<size_t>(qs.count) * 5);
  auto push = [&](const std::vector<float>& retina, const world::Pose& pose, bool alt) {
    qs.retinas.insert(qs.retinas.end(), retina.begin(), retina.end());
    auto tg = relpose_to_target(world::relpose(anchor, pose));
    qs.targets.insert(qs.targets.end(), tg.begin(), tg.end());
    qs.is_alt.push_back(alt ? 1 : 0);
  };
  for (int k = 0; k < t; ++k)
    push(ep.observations[static_cast<size_t>(start + k)].retina,
         ep.poses[static_cast<size_t>(start + k) + 1], false);
  for (int k = 0; k < t; ++k)
    push(ep.alt_retinas[static_cast<size_t>(start + k)],
         ep.alt_poses[static_cast<size_t>(start + k)], true);
  return qs;
}

inline QuerySet make_training_queries(const world::EpisodeRecord& ep, int t) {
  return make_training_queries(ep, 0, t);
}

}  // namespace kinaema::models
