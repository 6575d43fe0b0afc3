#include "coe/reward.hpp"

#include <algorithm>
#include <cmath>

#include "coe/error.hpp"

namespace coe {

void RewardWeights::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kConfigError, "reward weights: " + m); };
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must be in [0,1]");
  if (target_length < 1) fail("target_length must be >= 1");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) fail("alpha and beta must be >= 0");
  if (alpha + beta > 1.0 + 1e-12) fail("alpha + beta must be <= 1");
  if (!(delta > 0.0)) fail("delta must be > 0");
  if (bias && !std::isfinite(*bias)) fail("bias must be finite");
  if (!(tau >= -1.0 && tau <= 1.0)) fail("tau must be in [-1,1]");
}

nlohmann::json to_json(const RewardWeights& w) {
  nlohmann::json j = {{"lambda", w.lambda},  {"target_length", w.target_length},
                      {"alpha", w.alpha},    {"beta", w.beta},
                      {"delta", w.delta},    {"clamp_re", w.clamp_re},
                      {"tau", w.tau},        {"use_similarity", w.use_similarity}};
  j["bias"] = w.bias ? nlohmann::json(*w.bias) : nlohmann::json(nullptr);
  return j;
}

RewardWeights reward_weights_from_json(const nlohmann::json& j, RewardWeights w) {
  if (!j.is_object()) throw Error(ErrorKind::kConfigError, "reward weights must be a JSON object");
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  take("lambda", w.lambda);
  take("target_length", w.target_length);
  take("alpha", w.alpha);
  take("beta", w.beta);
  take("delta", w.delta);
  take("clamp_re", w.clamp_re);
  take("tau", w.tau);
  take("use_similarity", w.use_similarity);
  if (j.contains("bias")) {
    if (j.at("bias").is_null()) {
      w.bias.reset();
    } else {
      w.bias = j.at("bias").get<double>();
    }
  }
  w.validate();
  return w;
}

double coe_reward(int indicator, int length, const RewardWeights& w) {
  const double L = w.target_length;
  const double r = w.lambda * indicator + (1.0 - w.lambda) * (L - std::abs(length - L) + w.b());
  return w.clamp_re ? std::clamp(r, 0.0, 1.0) : r;
}

double coe_reward(const ParsedCompletion& parsed, const RewardWeights& w) {
  return coe_reward(tag_validity_indicator(parsed), static_cast<int>(chain_length(parsed)), w);
}

double accuracy_reward(const ParsedCompletion& parsed, const GroundTruthTimeline& truth, const Task& task,
                       const SimilarityModel& model, double tau) {
  if (!parsed.answer) return 0.0;
  const std::string answer = normalize_whitespace(*parsed.answer);
  if (task.mode == TaskMode::kMcq) return answer == task.correct_label ? 1.0 : 0.0;
  const double c = cosine(model.embed_text(answer), model.embed_text(truth.future_event.description));
  return c >= tau ? 1.0 : 0.0;
}

double total_reward(double r_a, double r_e, double r_s, const RewardWeights& w) {
  return w.alpha * r_a + w.beta * r_e + (1.0 - w.alpha - w.beta) * r_s;
}

std::vector<double> group_advantages(std::span<const double> rewards, double delta) {
  if (rewards.size() < 2) throw Error(ErrorKind::kGroupTooSmall, "group of " + std::to_string(rewards.size()));
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / n) + delta;
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back((r - mean) / denom);
  return out;
}

nlohmann::json to_json(const RewardBreakdown& r) {
  return {{"r_a", r.r_a}, {"r_e", r.r_e}, {"r_s", r.r_s}, {"total", r.total}, {"s", r.per_event}};
}

RewardBreakdown score_completion(const ParsedCompletion& parsed, const Sample& sample, const SimilarityModel& model,
                                 const RewardWeights& w, SimilarityMode mode) {
  RewardBreakdown r;
  r.r_a = accuracy_reward(parsed, sample.truth, sample.task, model, w.tau);
  r.r_e = coe_reward(parsed, w);
  auto sim = similarity_reward(parsed.chain, sample.task.video, model, mode);
  r.r_s = sim.r_s;
  r.per_event = std::move(sim.per_event);
  r.total = total_reward(r.r_a, r.r_e, w.use_similarity ? r.r_s : 0.0, w);
  return r;
}

}  // namespace coe
