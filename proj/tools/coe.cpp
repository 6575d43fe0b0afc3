#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "coe/analysis.hpp"
#include "coe/error.hpp"
#include "coe/event_model.hpp"
#include "coe/similarity.hpp"
#include "coe/symbolic_world.hpp"
#include "coe/trainer.hpp"

#ifndef COE_VERSION
#define COE_VERSION "dev"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace coe;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kMetricsVersion = 1;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_json(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIoError, "cannot open " + tmp.string());
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::kIoError, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Byte offset -> "line L, column C" for parse errors.
std::string position_of(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

// Rejects keys the config schema does not know, so typos fail loudly.
void check_keys(const json& j, const json& known, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) {
      if (where == "rewards" && k == "bias") continue;  // optional, absent from defaults
      throw Error(ErrorKind::kConfigError, "unknown key '" + (where.empty() ? k : where + "." + k) + "'");
    }
    if (v.is_object() && known.at(k).is_object()) check_keys(v, known.at(k), where.empty() ? k : where + "." + k);
  }
}

TrainConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfigError, "cannot read config " + path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kConfigError, path + ": " + position_of(text, e.byte) + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::kConfigError, path + ": top level must be an object");
  try {
    check_keys(j, to_json(TrainConfig{}), "");
    return train_config_from_json(j);
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfigError, path + ": " + e.what());
  }
}

// Flags that mirror config fields one-for-one; unset flags leave the config alone.
struct Overrides {
  std::optional<std::uint64_t> seed, world_seed;
  std::optional<int> threads, steps, group_size, tasks_per_step, max_new_tokens, sft_epochs, sft_examples, sft_batch,
      train_tasks, checkpoint_every, d_model, heads, layers, event_length;
  std::optional<double> clip_epsilon, kl_coeff, learning_rate, temperature, sft_learning_rate, sft_label_weight, lambda,
      alpha, beta, tau, noise_rate;
  std::optional<std::string> ratio_mode, similarity;
  bool no_rs = false;

  void add_to(CLI::App* app) {
    app->add_option("--seed", seed, "Run seed");
    app->add_option("--world-seed", world_seed, "World generator seed");
    app->add_option("--threads", threads, "Worker threads (0 = all cores)");
    app->add_option("--steps", steps, "GRPO steps");
    app->add_option("--group-size", group_size, "Completions per prompt (G)");
    app->add_option("--tasks-per-step", tasks_per_step, "Prompts per GRPO step");
    app->add_option("--max-new-tokens", max_new_tokens, "Decode budget");
    app->add_option("--clip-epsilon", clip_epsilon, "PPO clip range");
    app->add_option("--kl-coeff", kl_coeff, "KL penalty weight");
    app->add_option("--lr", learning_rate, "GRPO learning rate");
    app->add_option("--temperature", temperature, "Rollout sampling temperature");
    app->add_option("--ratio-mode", ratio_mode, "token | sequence");
    app->add_option("--sft-epochs", sft_epochs, "SFT epochs");
    app->add_option("--sft-examples", sft_examples, "SFT examples");
    app->add_option("--sft-batch", sft_batch, "SFT batch size");
    app->add_option("--sft-lr", sft_learning_rate, "SFT learning rate");
    app->add_option("--sft-label-weight", sft_label_weight, "SFT loss weight on option labels");
    app->add_option("--train-tasks", train_tasks, "Training split size");
    app->add_option("--checkpoint-every", checkpoint_every, "Checkpoint interval (steps)");
    app->add_option("--d-model", d_model, "Model width");
    app->add_option("--heads", heads, "Attention heads");
    app->add_option("--layers", layers, "Transformer layers");
    app->add_option("--lambda", lambda, "Tag-validity weight inside r_e");
    app->add_option("--event-length", event_length, "Target chain length L");
    app->add_option("--alpha", alpha, "Accuracy reward weight");
    app->add_option("--beta", beta, "Event reward weight");
    app->add_option("--tau", tau, "Open-set accuracy threshold");
    app->add_option("--similarity", similarity, "video | frame");
    app->add_option("--noise-rate", noise_rate, "World frame noise rate");
    app->add_flag("--no-rs", no_rs, "Drop r_s from the total reward");
  }

  void apply(TrainConfig& c) const {
    auto set = [](const auto& opt, auto& field) {
      if (opt) field = *opt;
    };
    set(seed, c.seed);
    set(world_seed, c.world.seed);
    set(threads, c.threads);
    set(steps, c.steps);
    set(group_size, c.group_size);
    set(tasks_per_step, c.tasks_per_step);
    set(max_new_tokens, c.max_new_tokens);
    set(clip_epsilon, c.clip_epsilon);
    set(kl_coeff, c.kl_coeff);
    set(learning_rate, c.learning_rate);
    set(temperature, c.temperature);
    set(sft_epochs, c.sft_epochs);
    set(sft_examples, c.sft_examples);
    set(sft_batch, c.sft_batch);
    set(sft_learning_rate, c.sft_learning_rate);
    set(sft_label_weight, c.sft_label_weight);
    set(train_tasks, c.train_tasks);
    set(checkpoint_every, c.checkpoint_every);
    set(d_model, c.model.d_model);
    set(heads, c.model.heads);
    set(layers, c.model.layers);
    set(lambda, c.rewards.lambda);
    set(event_length, c.rewards.target_length);
    set(alpha, c.rewards.alpha);
    set(beta, c.rewards.beta);
    set(tau, c.rewards.tau);
    set(noise_rate, c.world.noise_rate);
    if (no_rs) c.rewards.use_similarity = false;
    try {
      if (ratio_mode) c.ratio_mode = ratio_mode_from_string(*ratio_mode);
      if (similarity) c.similarity = similarity_mode_from_string(*similarity);
      c.world.validate();
      c.validate();
    } catch (const Error& e) {
      throw Error(ErrorKind::kConfigError, e.what());
    }
  }
};

fs::path output_root() {
  const char* env = std::getenv("COE_RUN_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_run_dir(const std::string& flag, const std::string& command) {
  const fs::path p = flag.empty() ? fs::path(command) : fs::path(flag);
  return p.is_absolute() ? p : output_root() / p;
}

// Written with "finished": null before any work; a run without an end
// timestamp never completed.
class RunManifest {
 public:
  RunManifest(fs::path dir, const std::string& command, std::vector<std::string> argv, json config,
              std::uint64_t seed)
      : path_(dir / "run_manifest.json") {
    fs::create_directories(dir);
    j_ = {{"schema", "coe.run_manifest"},
          {"version", 1},
          {"command", command},
          {"argv", std::move(argv)},
          {"config", std::move(config)},
          {"seed", seed},
          {"code_version", COE_VERSION},
          {"started", utc_now()},
          {"finished", nullptr},
          {"status", "running"},
          {"outputs", json::array()}};
    write_json(path_, j_);
  }

  void add_output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
  void set(const std::string& key, json value) { j_[key] = std::move(value); }

  void finish() {
    j_["finished"] = utc_now();
    j_["status"] = "complete";
    write_json(path_, j_);
  }

  void fail(const std::string& message) {
    j_["status"] = "failed";
    j_["error"] = message;
    write_json(path_, j_);
  }

 private:
  fs::path path_;
  json j_;
};

std::vector<Sample> load_or_generate(const std::string& dataset, const TrainConfig& config, int count,
                                     WorldConfig& world) {
  if (!dataset.empty()) {
    auto ds = read_dataset_jsonl(dataset);
    world = ds.world;
    if (count > 0 && static_cast<int>(ds.samples.size()) > count) ds.samples.resize(static_cast<std::size_t>(count));
    return std::move(ds.samples);
  }
  world = config.world;
  return held_out_tasks(world, config.seed, count);
}

void check_policy_fits(const PolicyParams& p, const WorldConfig& world, const std::string& path) {
  const Vocabulary vocab(world);
  if (p.config.vocab != vocab.size()) {
    throw Error(ErrorKind::kConfigError, path + ": checkpoint vocabulary " + std::to_string(p.config.vocab) +
                                             " does not match the world's " + std::to_string(vocab.size()));
  }
}

struct Common {
  std::string config_path;
  std::string run_dir;
  Overrides overrides;

  TrainConfig config() const {
    auto c = load_config(config_path);
    overrides.apply(c);
    return c;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON config (fields as in config.json of a run)");
  app->add_option("--run-dir", c.run_dir, "Output directory; relative paths land under $COE_RUN_DIR (default ./runs)");
  c.overrides.add_to(app);
}

int cmd_world_gen(const Common& common, const std::string& out_name, int count, const std::vector<std::string>& argv) {
  const auto config = common.config();
  if (count < 0) throw Error(ErrorKind::kConfigError, "--count must be >= 0");
  const auto dir = resolve_run_dir(common.run_dir, "world-gen");
  RunManifest manifest(dir, "world-gen", argv, to_json(config), config.world.seed);
  const auto samples = generate_dataset(config.world, count);
  const auto out = dir / out_name;
  write_dataset_jsonl(out.string(), config.world, samples);
  manifest.add_output(out);
  manifest.finish();
  std::cout << "wrote " << samples.size() << " samples to " << out.string() << '\n';
  return 0;
}

int cmd_train(const Common& common, bool resume, const std::vector<std::string>& argv) {
  auto config = common.config();
  const auto dir = resolve_run_dir(common.run_dir, "train");
  config.run_dir = dir.string();
  RunManifest manifest(dir, "train", argv, to_json(config), config.seed);
  const auto tasks = training_tasks(config);
  const auto result = train(config, tasks, resume, [](const std::string& line) { std::cout << line << '\n' << std::flush; });
  for (const char* f : {"config.json", "curves.csv", "checkpoints/manifest.json"}) manifest.add_output(dir / f);
  manifest.set("final_step", result.curve.empty() ? 0 : result.curve.back().step);
  manifest.finish();
  return 0;
}

json metrics_header(const std::string& mode) {
  return {{"schema", "coe.metrics"}, {"version", kMetricsVersion}, {"mode", mode}};
}

int cmd_eval(const Common& common, const std::string& mode, const std::vector<std::string>& checkpoints,
             std::vector<std::string> ids, const std::string& dataset, int count, bool fallback,
             const std::vector<std::string>& argv) {
  const auto config = common.config();
  if (mode != "mcq" && mode != "judge") throw Error(ErrorKind::kConfigError, "--mode must be mcq or judge");
  if (checkpoints.empty()) throw Error(ErrorKind::kConfigError, "at least one --checkpoint is required");
  if (mode == "judge" && checkpoints.size() < 2) {
    throw Error(ErrorKind::kFewerThanTwoCandidates, "judge mode needs at least two --checkpoint candidates");
  }
  if (!ids.empty() && ids.size() != checkpoints.size()) throw Error(ErrorKind::kConfigError, "one --id per --checkpoint");
  if (ids.empty()) {
    for (std::size_t i = 0; i < checkpoints.size(); ++i) ids.push_back(checkpoints.size() == 1 ? "policy" : "c" + std::to_string(i));
  }
  const auto dir = resolve_run_dir(common.run_dir, "eval");
  RunManifest manifest(dir, "eval", argv, to_json(config), config.seed);
  WorldConfig world;
  const auto samples = load_or_generate(dataset, config, count, world);
  EvalOptions opt;
  opt.max_new_tokens = config.max_new_tokens;
  opt.threads = config.threads;
  opt.forced_answer_fallback = fallback;

  std::vector<std::vector<EvalRecord>> runs;
  for (const auto& path : checkpoints) {
    const auto params = load_checkpoint(path);
    check_policy_fits(params, world, path);
    runs.push_back(evaluate_policy(params, samples, world, config.rewards, config.similarity, opt));
  }

  json metrics = metrics_header(mode);
  metrics["dataset"] = dataset.empty() ? json("held-out") : json(dataset);
  metrics["tasks"] = samples.size();
  if (mode == "mcq") {
    metrics["checkpoint"] = checkpoints[0];
    metrics["summary"] = to_json(summarize(runs[0]));
    const auto records = dir / "records.jsonl";
    std::ofstream out(records, std::ios::trunc);
    for (const auto& r : runs[0]) out << to_json(r).dump() << '\n';
    if (!out) throw Error(ErrorKind::kIoError, "write failed for " + records.string());
    manifest.add_output(records);
  } else {
    const SymbolOracle oracle(world);
    std::vector<JudgeVerdict> verdicts;
    for (std::size_t t = 0; t < samples.size(); ++t) {
      std::vector<ParsedCompletion> cands;
      for (const auto& run : runs) cands.push_back(parse_completion(run[t].completion));
      verdicts.push_back(judge_compare(samples[t], cands, ids, oracle, config.rewards.tau, config.similarity));
    }
    const auto path = dir / "verdicts.jsonl";
    std::ofstream out(path, std::ios::trunc);
    for (const auto& v : verdicts) out << to_json(v).dump() << '\n';
    if (!out) throw Error(ErrorKind::kIoError, "write failed for " + path.string());
    manifest.add_output(path);
    json cand = json::array();
    for (std::size_t i = 0; i < ids.size(); ++i) cand.push_back({{"id", ids[i]}, {"checkpoint", checkpoints[i]}});
    metrics["candidates"] = cand;
    metrics["win_rate"] = win_rate(verdicts, ids);
  }
  const auto mpath = dir / "metrics.json";
  write_json(mpath, metrics);
  manifest.add_output(mpath);
  manifest.finish();
  std::cout << metrics.dump(2) << '\n';
  return 0;
}

int cmd_attention(const Common& common, const std::string& base_path, const std::string& cand_path,
                  const std::string& dataset, int count, const std::vector<std::string>& argv) {
  const auto config = common.config();
  const auto dir = resolve_run_dir(common.run_dir, "attention");
  RunManifest manifest(dir, "attention", argv, to_json(config), config.seed);
  WorldConfig world;
  std::vector<Sample> samples;
  for (auto& s : load_or_generate(dataset, config, count, world)) {
    if (s.task.mode == TaskMode::kMcq) samples.push_back(std::move(s));
  }
  const auto base = load_checkpoint(base_path);
  const auto cand = load_checkpoint(cand_path);
  check_policy_fits(base, world, base_path);
  check_policy_fits(cand, world, cand_path);
  const auto b = visual_attention_masses(base, samples, world, config.threads);
  const auto c = visual_attention_masses(cand, samples, world, config.threads);
  const auto cmp = attention_wr_ir(b, c);
  json per = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    per.push_back({{"task_id", samples[i].task.id}, {"base", b[i]}, {"candidate", c[i]}});
  }
  json report = metrics_header("attention");
  report.update({{"base", base_path},
                 {"candidate", cand_path},
                 {"samples", samples.size()},
                 {"wr", cmp.wr},
                 {"ir", cmp.ir},
                 {"summary", format_wr_ir(cmp)},
                 {"per_sample", per}});
  const auto path = dir / "attention.json";
  write_json(path, report);
  manifest.add_output(path);
  manifest.finish();
  std::cout << format_wr_ir(cmp) << '\n';
  return 0;
}

int cmd_ablate(const Common& common, const std::string& axis_name, const std::vector<std::string>& values,
               int eval_tasks, const std::vector<std::string>& argv) {
  const auto config = common.config();
  AblationAxis axis;
  try {
    axis = ablation_axis_from_string(axis_name);
    for (const auto& v : values) (void)apply_axis(config, axis, v);
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfigError, e.what());
  }
  const auto dir = resolve_run_dir(common.run_dir, "ablate");
  RunManifest manifest(dir, "ablate", argv, to_json(config), config.seed);
  const auto table = run_ablation(axis, values, config, dir.string(), eval_tasks,
                                  [](const std::string& line) { std::cout << line << '\n' << std::flush; });
  const auto csv = dir / "ablation.csv";
  const auto txt = dir / "ablation.txt";
  std::ofstream(csv, std::ios::trunc) << to_csv(table);
  std::ofstream(txt, std::ios::trunc) << to_text(table);
  manifest.add_output(csv);
  manifest.add_output(txt);
  manifest.finish();
  std::cout << to_text(table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chain-of-Events training and analysis on a symbolic video world"};
  app.require_subcommand(1);
  app.set_version_flag("--version", COE_VERSION);
  const std::vector<std::string> args(argv, argv + argc);

  Common common;
  std::string out_name = "dataset.jsonl";
  int count = 1000;
  auto* world_gen = app.add_subcommand("world-gen", "Generate a dataset JSONL");
  add_common(world_gen, common);
  world_gen->add_option("--out", out_name, "File name inside the run directory");
  world_gen->add_option("--count", count, "Number of samples");

  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "SFT then GRPO into a run directory");
  add_common(train_cmd, common);
  train_cmd->add_flag("--resume", resume, "Continue from the latest checkpoint");

  std::string mode = "mcq", dataset;
  std::vector<std::string> checkpoints, ids;
  int eval_count = 200;
  bool no_fallback = false;
  auto* eval_cmd = app.add_subcommand("eval", "Score checkpoints on a dataset");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--mode", mode, "mcq | judge")->check(CLI::IsMember({"mcq", "judge"}));
  eval_cmd->add_option("--checkpoint", checkpoints, "Checkpoint file (repeat for judge mode)")->required();
  eval_cmd->add_option("--id", ids, "Candidate name per checkpoint");
  eval_cmd->add_option("--dataset", dataset, "Dataset JSONL (default: held-out tasks from the config world)");
  eval_cmd->add_option("--count", eval_count, "Task count (held-out size, or dataset prefix)");
  eval_cmd->add_flag("--no-forced-answer", no_fallback, "Disable the forced-answer fallback");

  std::string base_ckpt, cand_ckpt;
  auto* attn_cmd = app.add_subcommand("attention", "Visual-attention WR/IR of a candidate against a base");
  add_common(attn_cmd, common);
  attn_cmd->add_option("--base", base_ckpt, "Base checkpoint")->required();
  attn_cmd->add_option("--candidate", cand_ckpt, "Candidate checkpoint")->required();
  attn_cmd->add_option("--dataset", dataset, "Dataset JSONL (default: held-out tasks)");
  attn_cmd->add_option("--count", eval_count, "Task count");

  std::string axis;
  std::vector<std::string> values;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate one run per axis value");
  add_common(ablate_cmd, common);
  ablate_cmd->add_option("--axis", axis, "group-size | event-length | similarity | no-rs")->required();
  ablate_cmd->add_option("--values", values, "Axis values")->required()->delimiter(',');
  ablate_cmd->add_option("--eval-tasks", eval_count, "Held-out tasks per value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*world_gen) return cmd_world_gen(common, out_name, count, args);
    if (*train_cmd) return cmd_train(common, resume, args);
    if (*eval_cmd) return cmd_eval(common, mode, checkpoints, ids, dataset, eval_count, !no_fallback, args);
    if (*attn_cmd) return cmd_attention(common, base_ckpt, cand_ckpt, dataset, eval_count, args);
    if (*ablate_cmd) return cmd_ablate(common, axis, values, eval_count, args);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::kConfigError ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
