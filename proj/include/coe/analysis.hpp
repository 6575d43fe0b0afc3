#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "coe/policy.hpp"
#include "coe/reward.hpp"
#include "coe/trainer.hpp"

namespace coe {

// ---- evaluation -----------------------------------------------------------

struct EvalOptions {
  int max_new_tokens = 48;
  int threads = 0;
  /// When greedy decoding yields no usable option label, score the label
  /// tokens after a forced `<answer>` and take the argmax.
  bool forced_answer_fallback = true;
};

struct EvalRecord {
  int task_id = 0;
  std::string completion;
  bool tag_valid = false;
  int chain_length = 0;
  std::string answer;  // empty when absent
  bool forced = false;
  bool correct = false;
  RewardBreakdown reward;
  nlohmann::json diagnostics;
};

nlohmann::json to_json(const EvalRecord& r);

struct EvalSummary {
  int tasks = 0;
  double accuracy = 0.0;
  double tag_valid_rate = 0.0;
  double mean_chain_length = 0.0;
  double mean_r_a = 0.0, mean_r_e = 0.0, mean_r_s = 0.0, mean_total = 0.0;
  int forced_answers = 0;
};

nlohmann::json to_json(const EvalSummary& s);

/// Greedy-decodes every task and scores it.
std::vector<EvalRecord> evaluate_policy(const PolicyParams& params, std::span<const Sample> samples,
                                        const WorldConfig& world, const RewardWeights& weights,
                                        SimilarityMode mode = SimilarityMode::kVideoLevel, const EvalOptions& opt = {});
EvalSummary summarize(std::span<const EvalRecord> records);

/// Held-out tasks drawn from a stream disjoint from the training split.
std::vector<Sample> held_out_tasks(const WorldConfig& world, std::uint64_t seed, int count);

// ---- attention ------------------------------------------------------------

struct AttentionComparison {
  std::vector<double> base, candidate;
  double wr = 0.0;  // fraction of samples with candidate > base
  double ir = 0.0;  // mean(candidate - base), percentage points
};

/// Throws kLengthMismatch on unequal or empty inputs.
AttentionComparison attention_wr_ir(std::span<const double> base, std::span<const double> candidate);

/// "WR 0.93 / IR +15.11%".
std::string format_wr_ir(const AttentionComparison& c);

/// Visual-attention mass of option-token queries, one value per MCQ sample.
std::vector<double> visual_attention_masses(const PolicyParams& params, std::span<const Sample> samples,
                                            const WorldConfig& world, int threads = 0);

// ---- judge ----------------------------------------------------------------

enum class JudgeReason { kBetterAnswer, kBetterGrounding, kTieBreak };
const char* to_string(JudgeReason r);

struct JudgeVerdict {
  int task_id = 0;
  std::vector<std::string> candidate_ids;
  std::string winner;
  int winner_index = 0;
  JudgeReason reason = JudgeReason::kTieBreak;
  std::vector<double> answer_scores;
  std::vector<double> grounding_scores;
  std::vector<int> ranking;  // best first; ranking[0] == winner_index
};

nlohmann::json to_json(const JudgeVerdict& v);

/// Rule-based judge: lexicographic (open-set answer score, grounding score),
/// remaining ties to the lowest index. Throws kFewerThanTwoCandidates.
JudgeVerdict judge_compare(const Sample& sample, std::span<const ParsedCompletion> candidates,
                           std::span<const std::string> candidate_ids, const SimilarityModel& model, double tau = 0.9,
                           SimilarityMode mode = SimilarityMode::kVideoLevel);

/// wins / total per candidate id. Throws kEmptyVerdicts.
std::map<std::string, double> win_rate(std::span<const JudgeVerdict> verdicts, std::span<const std::string> candidate_ids);

// ---- ablation -------------------------------------------------------------

enum class AblationAxis { kGroupSize, kEventLength, kSimilarityMode, kNoRs };
const char* to_string(AblationAxis a);
AblationAxis ablation_axis_from_string(const std::string& s);

/// Applies one axis value to a config; throws kConfigError on bad values.
TrainConfig apply_axis(const TrainConfig& base, AblationAxis axis, const std::string& value);

struct AblationRow {
  std::string value;
  double final_r_a = 0.0;  // mean over the last min(10, steps) GRPO steps
  double final_r_s = 0.0;
  double mcq_accuracy = 0.0;
  double tag_valid_rate = 0.0;
  double mean_chain_length = 0.0;
  double seconds = 0.0;
};

struct AblationTable {
  AblationAxis axis = AblationAxis::kNoRs;
  std::vector<AblationRow> rows;
};

std::string to_csv(const AblationTable& t);
std::string to_text(const AblationTable& t);
AblationTable ablation_table_from_csv(const std::string& csv);

/// One seeded train + held-out eval per value, each in `out_dir/<axis>=<value>`.
/// SFT is run once in `out_dir/sft` and shared, since no axis affects it.
AblationTable run_ablation(AblationAxis axis, std::span<const std::string> values, const TrainConfig& base,
                           const std::string& out_dir, int eval_tasks, const ProgressFn& progress = {});

}  // namespace coe
