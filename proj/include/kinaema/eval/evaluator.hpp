#pragma once

#include <map>
#include <vector>

#include "json.hpp"
#include "kinaema/models/sequence_model.hpp"
#include "kinaema/world/dataset.hpp"

namespace kinaema::eval {

// Threshold accuracies over Mem-RPE queries: translation error is the 2-D
// positional error of the goal reconstructed in the agent frame from the
// predicted distance and normalized bearing; rotation error is the absolute
// angle between normalized predicted and true relative rotation.
struct AccuracyBucket {
  int64_t count = 0;
  int64_t hits_1m_10 = 0;
  int64_t hits_1m_90 = 0;
  int64_t hits_2m_90 = 0;
  double acc_1m_10() const { return count ? double(hits_1m_10) / count : 0.0; }
  double acc_1m_90() const { return count ? double(hits_1m_90) / count : 0.0; }
  double acc_2m_90() const { return count ? double(hits_2m_90) / count : 0.0; }
};

struct AccuracyReport {
  AccuracyBucket overall;
  std::map<int, AccuracyBucket> per_length;
  AccuracyBucket observed;     // queries that were actually seen
  AccuracyBucket alternative;  // perturbed-view queries
  double floor_acc_2m_90 = 0;  // constant-prediction baseline
  bool below_chance = false;   // model under the floor at (2m, 90 deg)
  nlohmann::json to_json() const;
};

// Rolls memory over the first T steps of each episode for every requested
// length, decodes the 2T queries, and counts threshold hits.
// max_episodes < 0 evaluates the whole dataset.
AccuracyReport eval_rpe(const models::SequenceModel<float>& model, const world::Dataset& ds,
                        const std::vector<int>& lengths, int max_episodes = -1,
                        int batch_size = 16);

// Success rate and success-weighted-by-path-length over episode outcomes.
struct NavEpisode {
  bool success = false;
  double path_len = 0;
  double shortest_len = 0;
};
struct NavMetrics {
  double sr = 0;
  double spl = 0;
};
NavMetrics nav_metrics(const std::vector<NavEpisode>& episodes);

}  // namespace kinaema::eval
