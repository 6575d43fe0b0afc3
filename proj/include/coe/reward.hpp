#pragma once

#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "coe/event_model.hpp"
#include "coe/similarity.hpp"
#include "coe/symbolic_world.hpp"

namespace coe {

struct RewardWeights {
  double lambda = 0.5;
  int target_length = 3;
  /// Length-term bias; unset means 1 - target_length, which caps r_e at 1.
  std::optional<double> bias;
  double alpha = 0.6;
  double beta = 0.2;
  double delta = 1e-6;
  bool clamp_re = false;
  /// Open-set accuracy threshold on oracle cosine.
  double tau = 0.9;
  /// When false the similarity term is dropped from the total (r_s is still
  /// measured and reported).
  bool use_similarity = true;

  void validate() const;
  double b() const { return bias.value_or(1.0 - target_length); }
  double similarity_weight() const { return 1.0 - alpha - beta; }
};

nlohmann::json to_json(const RewardWeights& w);
/// Missing keys keep their defaults.
RewardWeights reward_weights_from_json(const nlohmann::json& j, RewardWeights base = {});

/// r_e = lambda * I + (1 - lambda) * (L - |len - L| + b).
double coe_reward(const ParsedCompletion& parsed, const RewardWeights& w);
double coe_reward(int indicator, int length, const RewardWeights& w);

/// MCQ: 1 when the answer equals the correct label. Open-set: 1 when the
/// answer's text embedding has cosine >= tau with the true future event.
double accuracy_reward(const ParsedCompletion& parsed, const GroundTruthTimeline& truth, const Task& task,
                       const SimilarityModel& model, double tau = 0.9);

/// alpha * r_a + beta * r_e + (1 - alpha - beta) * r_s.
double total_reward(double r_a, double r_e, double r_s, const RewardWeights& w);

/// (r - mean) / (population std + delta). Throws kGroupTooSmall for G < 2.
std::vector<double> group_advantages(std::span<const double> rewards, double delta = 1e-6);

struct RewardBreakdown {
  double r_a = 0.0;
  double r_e = 0.0;
  double r_s = 0.0;
  double total = 0.0;
  std::vector<double> per_event;
};

nlohmann::json to_json(const RewardBreakdown& r);

RewardBreakdown score_completion(const ParsedCompletion& parsed, const Sample& sample, const SimilarityModel& model,
                                 const RewardWeights& w, SimilarityMode mode = SimilarityMode::kVideoLevel);

}  // namespace coe
