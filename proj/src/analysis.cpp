#include "coe/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "coe/error.hpp"
#include "coe/parallel.hpp"
#include "coe/rng.hpp"

namespace coe {

namespace fs = std::filesystem;

nlohmann::json to_json(const EvalRecord& r) {
  return {{"task_id", r.task_id},
          {"completion", r.completion},
          {"tag_valid", r.tag_valid},
          {"chain_length", r.chain_length},
          {"answer", r.answer},
          {"forced", r.forced},
          {"correct", r.correct},
          {"reward", to_json(r.reward)},
          {"diagnostics", r.diagnostics}};
}

nlohmann::json to_json(const EvalSummary& s) {
  return {{"tasks", s.tasks},
          {"accuracy", s.accuracy},
          {"tag_valid_rate", s.tag_valid_rate},
          {"mean_chain_length", s.mean_chain_length},
          {"mean_r_a", s.mean_r_a},
          {"mean_r_e", s.mean_r_e},
          {"mean_r_s", s.mean_r_s},
          {"mean_total", s.mean_total},
          {"forced_answers", s.forced_answers}};
}

namespace {

bool is_option_label(const Task& task, const std::string& a) {
  return std::any_of(task.options.begin(), task.options.end(), [&](const Option& o) { return o.label == a; });
}

/// Argmax over the task's option labels right after a forced `<answer>`.
std::string forced_label(const PolicyParams& params, const Vocabulary& vocab, const Task& task,
                         const std::vector<int>& prompt, const std::vector<int>& completion) {
  std::vector<int> seq = prompt;
  const int room = params.config.context - static_cast<int>(prompt.size()) - 1;
  for (int i = 0; i < static_cast<int>(completion.size()) && i < room; ++i) {
    if (completion[static_cast<std::size_t>(i)] == vocab.answer_open) break;
    seq.push_back(completion[static_cast<std::size_t>(i)]);
  }
  seq.push_back(vocab.answer_open);
  const auto fc = forward(params, seq, vocab.pad);
  const Eigen::RowVectorXd z = fc.logits.row(fc.logits.rows() - 1);
  std::string best;
  double best_z = -std::numeric_limits<double>::infinity();
  for (const auto& o : task.options) {
    const double v = z(vocab.id(o.label));
    if (v > best_z) {
      best_z = v;
      best = o.label;
    }
  }
  return best;
}

}  // namespace

std::vector<EvalRecord> evaluate_policy(const PolicyParams& params, std::span<const Sample> samples,
                                        const WorldConfig& world, const RewardWeights& weights, SimilarityMode mode,
                                        const EvalOptions& opt) {
  const Vocabulary vocab(world);
  const SymbolOracle oracle(world);
  if (params.config.vocab != vocab.size()) throw Error(ErrorKind::kConfigError, "checkpoint vocabulary does not match world");
  std::vector<EvalRecord> out(samples.size());
  parallel_for(static_cast<int>(samples.size()), resolve_threads(opt.threads), [&](int i) {
    const Sample& s = samples[static_cast<std::size_t>(i)];
    const auto prompt = prompt_tokens(s.task, vocab, world);
    SampleOptions so;
    so.temperature = 0.0;
    so.max_new = std::min(opt.max_new_tokens, params.config.context - static_cast<int>(prompt.size()));
    so.stop_token = vocab.answer_close;
    so.pad_token = vocab.pad;
    if (so.max_new < 1) throw Error(ErrorKind::kContextOverflow, "prompt leaves no room for a completion");
    const auto completion = sample_completion(params, prompt, so, 0);
    EvalRecord& r = out[static_cast<std::size_t>(i)];
    r.task_id = s.task.id;
    r.completion = vocab.detokenize(completion);
    const auto parsed = parse_completion(r.completion);
    r.tag_valid = parsed.tag_valid;
    r.chain_length = static_cast<int>(parsed.chain.size());
    r.diagnostics = diagnostics_to_json(parsed.diagnostics);
    r.reward = score_completion(parsed, s, oracle, weights, mode);
    r.answer = parsed.answer ? normalize_whitespace(*parsed.answer) : "";
    if (s.task.mode == TaskMode::kMcq) {
      if (!is_option_label(s.task, r.answer) && opt.forced_answer_fallback) {
        r.answer = forced_label(params, vocab, s.task, prompt, completion);
        r.forced = true;
      }
      r.correct = r.answer == s.task.correct_label;
    } else {
      r.correct = r.reward.r_a == 1.0;
    }
  });
  return out;
}

EvalSummary summarize(std::span<const EvalRecord> records) {
  EvalSummary s;
  s.tasks = static_cast<int>(records.size());
  if (records.empty()) return s;
  for (const auto& r : records) {
    s.accuracy += r.correct;
    s.tag_valid_rate += r.tag_valid;
    s.mean_chain_length += r.chain_length;
    s.mean_r_a += r.reward.r_a;
    s.mean_r_e += r.reward.r_e;
    s.mean_r_s += r.reward.r_s;
    s.mean_total += r.reward.total;
    s.forced_answers += r.forced;
  }
  const double n = static_cast<double>(records.size());
  s.accuracy /= n;
  s.tag_valid_rate /= n;
  s.mean_chain_length /= n;
  s.mean_r_a /= n;
  s.mean_r_e /= n;
  s.mean_r_s /= n;
  s.mean_total /= n;
  return s;
}

std::vector<Sample> held_out_tasks(const WorldConfig& world, std::uint64_t seed, int count) {
  auto w = world;
  w.seed = derive_seed(seed, 0x40edULL);
  return generate_dataset(w, count);
}

AttentionComparison attention_wr_ir(std::span<const double> base, std::span<const double> candidate) {
  if (base.size() != candidate.size() || base.empty()) {
    throw Error(ErrorKind::kLengthMismatch, "attention lists must be non-empty and index-aligned");
  }
  AttentionComparison c;
  c.base.assign(base.begin(), base.end());
  c.candidate.assign(candidate.begin(), candidate.end());
  double wins = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    wins += candidate[i] > base[i] ? 1.0 : 0.0;
    diff += candidate[i] - base[i];
  }
  const double n = static_cast<double>(base.size());
  c.wr = wins / n;
  c.ir = 100.0 * diff / n;
  return c;
}

std::string format_wr_ir(const AttentionComparison& c) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << "WR " << c.wr << " / IR " << (c.ir >= 0 ? "+" : "") << c.ir << "%";
  return out.str();
}

std::vector<double> visual_attention_masses(const PolicyParams& params, std::span<const Sample> samples,
                                            const WorldConfig& world, int threads) {
  const Vocabulary vocab(world);
  std::vector<double> out(samples.size());
  parallel_for(static_cast<int>(samples.size()), resolve_threads(threads), [&](int i) {
    const auto layout = render_prompt(samples[static_cast<std::size_t>(i)].task, vocab, world.max_prompt_tokens());
    out[static_cast<std::size_t>(i)] = attention_profile(params, layout, vocab.pad).visual;
  });
  return out;
}

const char* to_string(JudgeReason r) {
  switch (r) {
    case JudgeReason::kBetterAnswer: return "better-answer";
    case JudgeReason::kBetterGrounding: return "better-grounding";
    case JudgeReason::kTieBreak: return "tie-break";
  }
  return "unknown";
}

nlohmann::json to_json(const JudgeVerdict& v) {
  return {{"task_id", v.task_id},
          {"candidates", v.candidate_ids},
          {"winner", v.winner},
          {"reason", to_string(v.reason)},
          {"answer_scores", v.answer_scores},
          {"grounding_scores", v.grounding_scores},
          {"ranking", v.ranking}};
}

JudgeVerdict judge_compare(const Sample& sample, std::span<const ParsedCompletion> candidates,
                           std::span<const std::string> candidate_ids, const SimilarityModel& model, double tau,
                           SimilarityMode mode) {
  if (candidates.size() < 2) {
    throw Error(ErrorKind::kFewerThanTwoCandidates, "judge needs at least two candidates, got " + std::to_string(candidates.size()));
  }
  if (candidate_ids.size() != candidates.size()) throw Error(ErrorKind::kLengthMismatch, "one id per candidate required");
  const Task open = sample.task.mode == TaskMode::kOpenSet ? sample.task : as_open_set(sample.task);
  JudgeVerdict v;
  v.task_id = sample.task.id;
  v.candidate_ids.assign(candidate_ids.begin(), candidate_ids.end());
  for (const auto& c : candidates) {
    v.answer_scores.push_back(accuracy_reward(c, sample.truth, open, model, tau));
    v.grounding_scores.push_back(c.chain.empty() ? 0.0 : similarity_reward(c.chain, sample.task.video, model, mode).r_s);
  }
  auto key = [&](std::size_t i) { return std::pair(v.answer_scores[i], v.grounding_scores[i]); };
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (key(i) > key(best)) best = i;
  }
  std::size_t runner = best == 0 ? 1 : 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (i != best && key(i) > key(runner)) runner = i;
  }
  v.ranking.resize(candidates.size());
  std::iota(v.ranking.begin(), v.ranking.end(), 0);
  std::stable_sort(v.ranking.begin(), v.ranking.end(), [&](int a, int b) { return key(a) > key(b); });
  v.winner_index = static_cast<int>(best);
  v.winner = v.candidate_ids[best];
  if (v.answer_scores[best] > v.answer_scores[runner]) {
    v.reason = JudgeReason::kBetterAnswer;
  } else if (v.grounding_scores[best] > v.grounding_scores[runner]) {
    v.reason = JudgeReason::kBetterGrounding;
  } else {
    v.reason = JudgeReason::kTieBreak;
  }
  return v;
}

std::map<std::string, double> win_rate(std::span<const JudgeVerdict> verdicts, std::span<const std::string> candidate_ids) {
  if (verdicts.empty()) throw Error(ErrorKind::kEmptyVerdicts, "no verdicts to aggregate");
  std::map<std::string, double> rates;
  for (const auto& id : candidate_ids) rates[id] = 0.0;
  for (const auto& v : verdicts) {
    const auto it = rates.find(v.winner);
    if (it == rates.end()) throw Error(ErrorKind::kInvariantViolation, "verdict winner '" + v.winner + "' is not a candidate");
    it->second += 1.0;
  }
  for (auto& [id, r] : rates) r /= static_cast<double>(verdicts.size());
  return rates;
}

const char* to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kGroupSize: return "group-size";
    case AblationAxis::kEventLength: return "event-length";
    case AblationAxis::kSimilarityMode: return "similarity-mode";
    case AblationAxis::kNoRs: return "no-rs";
  }
  return "unknown";
}

AblationAxis ablation_axis_from_string(const std::string& s) {
  for (auto a : {AblationAxis::kGroupSize, AblationAxis::kEventLength, AblationAxis::kSimilarityMode, AblationAxis::kNoRs}) {
    if (s == to_string(a)) return a;
  }
  throw Error(ErrorKind::kConfigError, "unknown ablation axis '" + s + "'");
}

TrainConfig apply_axis(const TrainConfig& base, AblationAxis axis, const std::string& value) {
  TrainConfig c = base;
  auto as_int = [&] {
    try {
      std::size_t used = 0;
      const int v = std::stoi(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw Error(ErrorKind::kConfigError, std::string(to_string(axis)) + ": expected an integer, got '" + value + "'");
    }
  };
  switch (axis) {
    case AblationAxis::kGroupSize: c.group_size = as_int(); break;
    case AblationAxis::kEventLength:
      c.rewards.target_length = as_int();
      c.rewards.bias.reset();
      break;
    case AblationAxis::kSimilarityMode: c.similarity = similarity_mode_from_string(value); break;
    case AblationAxis::kNoRs:
      // the value is the state of the similarity term
      if (value == "on" || value == "with") {
        c.rewards.use_similarity = true;
      } else if (value == "off" || value == "without") {
        c.rewards.use_similarity = false;
      } else {
        throw Error(ErrorKind::kConfigError, "no-rs: expected on|off, got '" + value + "'");
      }
      break;
  }
  c.validate();
  return c;
}

namespace {

constexpr const char* kAblationHeader = "value,final_r_a,final_r_s,mcq_accuracy,tag_valid_rate,mean_chain_length,seconds";

std::vector<std::string> ablation_cells(const AblationRow& r) {
  auto f = [](double v) {
    std::ostringstream o;
    o << std::setprecision(6) << v;
    return o.str();
  };
  return {r.value, f(r.final_r_a), f(r.final_r_s), f(r.mcq_accuracy), f(r.tag_valid_rate), f(r.mean_chain_length), f(r.seconds)};
}

}  // namespace

std::string to_csv(const AblationTable& t) {
  std::ostringstream out;
  out << kAblationHeader << '\n';
  for (const auto& r : t.rows) {
    const auto cells = ablation_cells(r);
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  }
  return out.str();
}

std::string to_text(const AblationTable& t) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header;
  std::istringstream hs(kAblationHeader);
  for (std::string h; std::getline(hs, h, ',');) header.push_back(h);
  header[0] = to_string(t.axis);
  rows.push_back(header);
  for (const auto& r : t.rows) rows.push_back(ablation_cells(r));
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out << (i ? "  " : "") << std::setw(static_cast<int>(width[i])) << (i ? std::right : std::left) << row[i];
    }
    out << '\n';
  }
  return out.str();
}

AblationTable ablation_table_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  if (line != kAblationHeader) throw Error(ErrorKind::kIoError, "unexpected ablation CSV header");
  AblationTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (cells.size() != 7 || std::any_of(cells.begin(), cells.end(), [](const std::string& c) { return c.empty(); })) {
      throw Error(ErrorKind::kIoError, "ablation CSV row has empty or missing cells: " + line);
    }
    AblationRow r;
    r.value = cells[0];
    r.final_r_a = std::stod(cells[1]);
    r.final_r_s = std::stod(cells[2]);
    r.mcq_accuracy = std::stod(cells[3]);
    r.tag_valid_rate = std::stod(cells[4]);
    r.mean_chain_length = std::stod(cells[5]);
    r.seconds = std::stod(cells[6]);
    t.rows.push_back(r);
  }
  return t;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIoError, "cannot write " + path.string());
  out << text;
}

}  // namespace

AblationTable run_ablation(AblationAxis axis, std::span<const std::string> values, const TrainConfig& base,
                           const std::string& out_dir, int eval_tasks, const ProgressFn& progress) {
  if (values.empty()) throw Error(ErrorKind::kConfigError, "ablation needs at least one value");
  auto say = [&](const std::string& m) {
    if (progress) progress(m);
  };
  const fs::path root(out_dir);
  fs::create_directories(root);

  // validate every cell before spending time on training
  std::vector<TrainConfig> cells;
  for (const auto& v : values) cells.push_back(apply_axis(base, axis, v));

  const auto dataset = training_tasks(base);
  TrainConfig sft = base;
  sft.steps = 0;
  sft.run_dir = (root / "sft").string();
  say("ablation: shared SFT in " + sft.run_dir);
  // a finished SFT from an earlier ablation with the same base is reused
  bool reused = false;
  if (fs::exists(root / "sft" / "checkpoints" / "manifest.json")) {
    try {
      train(sft, dataset, true, progress);
      reused = true;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kConfigError) throw;
      fs::remove_all(root / "sft");
    }
  }
  if (!reused) train(sft, dataset, false, progress);

  AblationTable table;
  table.axis = axis;
  for (std::size_t k = 0; k < values.size(); ++k) {
    TrainConfig cfg = cells[k];
    const fs::path dir = root / (std::string(to_string(axis)) + "=" + values[k]);
    cfg.run_dir = dir.string();
    fs::remove_all(dir);
    fs::create_directories(dir / "checkpoints");
    for (const char* f : {"init.bin", "step_0.bin", "manifest.json"}) {
      fs::copy_file(root / "sft" / "checkpoints" / f, dir / "checkpoints" / f);
    }
    write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
    write_curves_csv((dir / "curves.csv").string(), {});
    say("ablation cell " + values[k]);
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res;
    try {
      res = train(cfg, dataset, true, progress);
    } catch (const Error& e) {
      throw Error(e.kind(), "ablation cell " + std::string(to_string(axis)) + "=" + values[k] + ": " + e.what());
    }
    AblationRow row;
    row.value = values[k];
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto held = held_out_tasks(cfg.world, cfg.seed, eval_tasks);
    EvalOptions eo;
    eo.max_new_tokens = cfg.max_new_tokens;
    eo.threads = cfg.threads;
    const auto summary = summarize(evaluate_policy(res.params, held, cfg.world, cfg.rewards, cfg.similarity, eo));
    row.mcq_accuracy = summary.accuracy;
    row.tag_valid_rate = summary.tag_valid_rate;
    row.mean_chain_length = summary.mean_chain_length;
    const std::size_t window = std::min<std::size_t>(10, res.curve.size());
    if (window == 0) {
      row.final_r_a = summary.mean_r_a;
      row.final_r_s = summary.mean_r_s;
    } else {
      for (std::size_t i = res.curve.size() - window; i < res.curve.size(); ++i) {
        row.final_r_a += res.curve[i].r_a / static_cast<double>(window);
        row.final_r_s += res.curve[i].r_s / static_cast<double>(window);
      }
    }
    table.rows.push_back(row);
  }
  const std::string stem = std::string("ablation_") + to_string(axis);
  write_text(root / (stem + ".csv"), to_csv(table));
  write_text(root / (stem + ".txt"), to_text(table));
  return table;
}

}  // namespace coe
