#include "kinaema/eval/evaluator.hpp"

#include <cmath>

#include "kinaema/models/queries.hpp"

namespace kinaema::eval {

using models::QuerySet;
using models::SequenceModel;
using nn::Tensor;
using world::kPi;

namespace {

constexpr double kRot10 = 10.0 * kPi / 180.0;
constexpr double kRot90 = 90.0 * kPi / 180.0;

struct QueryErrors {
  double terr = 0, rerr = 0;
};

QueryErrors query_errors(const float* pred, const float* target) {
  double d_hat = pred[0];
  double bearing_hat = std::atan2(pred[2], pred[1]);
  double d_true = target[0];
  double bearing_true = std::atan2(target[2], target[1]);
  double px = d_hat * std::cos(bearing_hat), py = d_hat * std::sin(bearing_hat);
  double tx = d_true * std::cos(bearing_true), ty = d_true * std::sin(bearing_true);
  QueryErrors e;
  e.terr = std::hypot(px - tx, py - ty);
  double rot_hat = std::atan2(pred[4], pred[3]);
  double rot_true = std::atan2(target[4], target[3]);
  e.rerr = std::abs(world::wrap_angle(rot_hat - rot_true));
  return e;
}

void tally(AccuracyBucket& b, const QueryErrors& e) {
  ++b.count;
  if (e.terr < 1.0 && e.rerr < kRot10) ++b.hits_1m_10;
  if (e.terr < 1.0 && e.rerr < kRot90) ++b.hits_1m_90;
  if (e.terr < 2.0 && e.rerr < kRot90) ++b.hits_2m_90;
}

}  // namespace

nlohmann::json AccuracyReport::to_json() const {
  auto bucket = [](const AccuracyBucket& b) {
    return nlohmann::json{{"count", b.count},
                          {"acc_1m_10deg", b.acc_1m_10()},
                          {"acc_1m_90deg", b.acc_1m_90()},
                          {"acc_2m_90deg", b.acc_2m_90()}};
  };
  nlohmann::json per_len = nlohmann::json::object();
  for (const auto& [len, b] : per_length) per_len[std::to_string(len)] = bucket(b);
  return nlohmann::json{{"overall", bucket(overall)},
                        {"per_length", per_len},
                        {"observed", bucket(observed)},
                        {"alternative", bucket(alternative)},
                        {"floor_acc_2m_90deg", floor_acc_2m_90},
                        {"below_chance_equivalent", below_chance}};
}

AccuracyReport eval_rpe(const SequenceModel<float>& model, const world::Dataset& ds,
                        const std::vector<int>& lengths, int max_episodes, int batch_size) {
  nn::NoGradGuard no_grad;
  AccuracyReport report;
  const int rdim = ds.world.retina_dim();

  // constant-prediction floor: dataset-mean relpose (circular means for the
  // angles), counted over the same query population
  double sum_d = 0, sum_bc = 0, sum_bs = 0, sum_rc = 0, sum_rs = 0;
  std::vector<std::array<float, 5>> all_targets;

  int episodes = static_cast<int>(ds.episodes.size());
  if (max_episodes >= 0) episodes = std::min(episodes, max_episodes);

  for (int length : lengths) {
    AccuracyBucket& len_bucket = report.per_length[length];
    for (int e0 = 0; e0 < episodes; e0 += batch_size) {
      const int b = std::min(batch_size, episodes - e0);
      const int t = length;
      std::vector<QuerySet> queries;
      queries.reserve(static_cast<size_t>(b));
      for (int i = 0; i < b; ++i) {
        const auto& ep = ds.episodes[static_cast<size_t>(e0 + i)];
        if (ep.length() < t)
          throw InputError("episode " + std::to_string(e0 + i) + " shorter than eval length " +
                           std::to_string(t));
        queries.push_back(models::make_training_queries(ep, 0, t));
      }

      auto state = model.init_state(b);
      std::vector<float> step_retina(static_cast<size_t>(b) * rdim);
      std::vector<float> step_odo(static_cast<size_t>(b) * 4);
      for (int s = 0; s < t; ++s) {
        for (int i = 0; i < b; ++i) {
          const auto& obs = ds.episodes[static_cast<size_t>(e0 + i)].observations[static_cast<size_t>(s)];
          std::copy(obs.retina.begin(), obs.retina.end(),
                    step_retina.begin() + static_cast<size_t>(i) * rdim);
          for (int j = 0; j < 4; ++j)
            step_odo[static_cast<size_t>(i) * 4 + j] = static_cast<float>(obs.odometry[static_cast<size_t>(j)]);
        }
        // a fresh memory has no motion history; step 0 repeats the invariant
        state = model.update(state,
                             Tensor<float>::from(step_retina, {b, rdim}),
                             Tensor<float>::from(step_odo, {b, 4}));
      }

      const int qps = 2 * t;
      std::vector<float> qretinas;
      qretinas.reserve(static_cast<size_t>(b) * qps * rdim);
      for (const auto& qs : queries)
        qretinas.insert(qretinas.end(), qs.retinas.begin(), qs.retinas.end());
      auto preds = model.decode_rpe(model.read(state),
                                    Tensor<float>::from(std::move(qretinas), {b * qps, rdim}),
                                    qps);

      for (int i = 0; i < b; ++i) {
        const QuerySet& qs = queries[static_cast<size_t>(i)];
        for (int q = 0; q < qps; ++q) {
          const float* pred = preds.values().data() + (static_cast<size_t>(i) * qps + q) * 5;
          const float* target = qs.targets.data() + static_cast<size_t>(q) * 5;
          QueryErrors err = query_errors(pred, target);
          tally(report.overall, err);
          tally(len_bucket, err);
          tally(qs.is_alt[static_cast<size_t>(q)] ? report.alternative : report.observed, err);

          sum_d += target[0];
          sum_bc += target[1];
          sum_bs += target[2];
          sum_rc += target[3];
          sum_rs += target[4];
          all_targets.push_back({target[0], target[1], target[2], target[3], target[4]});
        }
      }
    }
  }

  if (!all_targets.empty()) {
    const double n = static_cast<double>(all_targets.size());
    double mean_bearing = std::atan2(sum_bs / n, sum_bc / n);
    double mean_rot = std::atan2(sum_rs / n, sum_rc / n);
    float mean_pred[5] = {static_cast<float>(sum_d / n), static_cast<float>(std::cos(mean_bearing)),
                          static_cast<float>(std::sin(mean_bearing)),
                          static_cast<float>(std::cos(mean_rot)),
                          static_cast<float>(std::sin(mean_rot))};
    int64_t floor_hits = 0;
    for (const auto& tgt : all_targets) {
      QueryErrors e = query_errors(mean_pred, tgt.data());
      if (e.terr < 2.0 && e.rerr < kRot90) ++floor_hits;
    }
    report.floor_acc_2m_90 = double(floor_hits) / n;
    report.below_chance = report.overall.acc_2m_90() < report.floor_acc_2m_90;
  }
  return report;
}

NavMetrics nav_metrics(const std::vector<NavEpisode>& episodes) {
  if (episodes.empty()) throw InputError("nav_metrics: no episodes");
  NavMetrics m;
  for (const auto& e : episodes) {
    if (e.path_len <= 0 || e.shortest_len <= 0)
      throw InputError("nav_metrics: path lengths must be positive");
    if (e.success) {
      m.sr += 1.0;
      m.spl += e.shortest_len / std::max(e.path_len, e.shortest_len);
    }
  }
  m.sr /= static_cast<double>(episodes.size());
  m.spl /= static_cast<double>(episodes.size());
  return m;
}

}  // namespace kinaema::eval
