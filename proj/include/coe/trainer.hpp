#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "coe/policy.hpp"
#include "coe/reward.hpp"
#include "coe/symbolic_world.hpp"
#include "coe/vocabulary.hpp"

namespace coe {

enum class RatioMode { kToken, kSequence };

const char* to_string(RatioMode mode);
RatioMode ratio_mode_from_string(const std::string& s);

struct ModelShape {
  int d_model = 64;
  int heads = 4;
  int layers = 2;
  int ffn_mult = 4;
  double init_scale = 1.0;
};

struct TrainConfig {
  WorldConfig world = reference_world();
  ModelShape model;
  RewardWeights rewards;
  SimilarityMode similarity = SimilarityMode::kVideoLevel;

  // GRPO
  int group_size = 4;
  double clip_epsilon = 0.2;
  double kl_coeff = 0.04;
  double learning_rate = 0.5;
  int steps = 150;
  int tasks_per_step = 8;
  double temperature = 1.0;
  RatioMode ratio_mode = RatioMode::kToken;
  int max_new_tokens = 48;

  // SFT
  int sft_epochs = 2;
  int sft_examples = 3200;
  int sft_batch = 16;
  double sft_learning_rate = 6e-3;
  double sft_label_weight = 8.0;  // loss multiplier on option-label target tokens

  int train_tasks = 2000;
  int checkpoint_every = 50;
  int threads = 0;  // 0 = hardware concurrency
  std::uint64_t seed = 17;
  std::string run_dir;

  void validate() const;
  PolicyConfig policy_config() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep the values of `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Prompt tokens for a task: fixed-length, left-padded.
std::vector<int> prompt_tokens(const Task& task, const Vocabulary& vocab, const WorldConfig& world);

struct SFTExample {
  std::vector<int> prompt;
  std::vector<int> target;
  std::vector<int> label_positions;  // option-label tokens in `target`
};

/// Ground-truth teacher trace: restates each observed event as
/// `Time:a-b,Des:D` (no event tags), then `next` + the successor's symbols
/// (+ the matching option's label for MCQ), then the answer. Deterministic
/// in (samples, count, seed).
struct SFTDataset {
  std::vector<SFTExample> examples;
  int dropped = 0;  // examples that would overflow the context
};
SFTDataset build_sft_dataset(std::span<const Sample> samples, int count, const Vocabulary& vocab,
                             const WorldConfig& world, const PolicyConfig& policy, std::uint64_t seed);

std::vector<int> sft_target_tokens(const Sample& sample, const Vocabulary& vocab);

/// Mean over examples of per-token target cross-entropy, plus its gradient.
/// Option-label tokens count `label_weight` times.
double sft_loss_and_gradient(const PolicyParams& params, std::span<const SFTExample> batch, GradientBuffer* grad,
                             int pad_token = 0, double label_weight = 1.0);

/// Adam state for the supervised phase.
struct AdamState {
  GradientBuffer m, v;
  int t = 0;
};
AdamState make_adam(const PolicyConfig& c);

/// One optimizer step. With `adam` null, plain gradient descent.
double sft_step(PolicyParams& params, std::span<const SFTExample> batch, double lr, AdamState* adam = nullptr,
                int pad_token = 0, double label_weight = 1.0);

struct RolloutGroup {
  std::vector<int> prompt;
  std::vector<std::vector<int>> completions;
  std::vector<RewardBreakdown> rewards;
  std::vector<double> advantages;
  std::vector<std::vector<double>> old_logps;  // captured at sampling time
};

/// Per-completion and overall value of the clipped objective given the
/// current and old per-token log-probabilities and per-completion KLs.
struct SurrogateValue {
  double objective = 0.0;
  double surrogate = 0.0;  // group mean of the clipped term
  double kl = 0.0;         // group mean of per-completion KL
  int clipped_tokens = 0;
  int total_tokens = 0;
};

/// min(r A, clip(r, 1-eps, 1+eps) A).
double clipped_term(double ratio, double advantage, double epsilon);
/// d/d(ratio) of clipped_term: A where the unclipped branch is active, else 0.
double clipped_term_grad(double ratio, double advantage, double epsilon);

SurrogateValue surrogate_objective(std::span<const std::vector<double>> new_logps,
                                   std::span<const std::vector<double>> old_logps, std::span<const double> advantages,
                                   std::span<const double> kls, double epsilon, double kl_coeff,
                                   RatioMode mode = RatioMode::kToken);

/// Objective for one group under `params`, with gradient accumulated into
/// `grad` (ascent direction) when non-null.
SurrogateValue group_objective(const PolicyParams& params, const PolicyParams& ref, const RolloutGroup& group,
                               double epsilon, double kl_coeff, RatioMode mode, GradientBuffer* grad, int pad_token = 0);

struct TrainingCurvePoint {
  int step = 0;
  double r_a = 0.0, r_e = 0.0, r_s = 0.0, total = 0.0, kl = 0.0, objective = 0.0, ms = 0.0;
};

/// Shared read-only state for GRPO steps.
struct GrpoContext {
  const TrainConfig* config = nullptr;
  const Vocabulary* vocab = nullptr;
  const SimilarityModel* similarity = nullptr;
  std::span<const Sample> tasks;
  std::uint64_t ref_checksum = 0;
};

/// Samples groups for `batch` tasks, scores them, and applies one gradient
/// ascent step. Params are untouched if any error is thrown.
TrainingCurvePoint grpo_step(PolicyParams& params, const PolicyParams& ref, std::span<const Sample> batch,
                             const GrpoContext& ctx, int step);

/// Runs SFT then GRPO inside `config.run_dir`; resumes from the latest
/// checkpoint when `resume` is set. Returns the final parameters.
struct TrainResult {
  PolicyParams params;
  PolicyParams reference;
  std::vector<TrainingCurvePoint> curve;
  std::vector<double> sft_losses;  // mean loss per epoch
};
using ProgressFn = std::function<void(const std::string&)>;
TrainResult train(const TrainConfig& config, std::span<const Sample> dataset, bool resume = false,
                  const ProgressFn& progress = {});

/// Training split used by `train`: generated from the world config.
std::vector<Sample> training_tasks(const TrainConfig& config);

void write_curves_csv(const std::string& path, std::span<const TrainingCurvePoint> curve);
std::vector<TrainingCurvePoint> read_curves_csv(const std::string& path);

}  // namespace coe
