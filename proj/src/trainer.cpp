#include "coe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "coe/error.hpp"
#include "coe/parallel.hpp"
#include "coe/rng.hpp"

namespace coe {

namespace fs = std::filesystem;

const char* to_string(RatioMode mode) { return mode == RatioMode::kToken ? "token" : "sequence"; }

RatioMode ratio_mode_from_string(const std::string& s) {
  if (s == "token") return RatioMode::kToken;
  if (s == "sequence") return RatioMode::kSequence;
  throw Error(ErrorKind::kConfigError, "ratio_mode must be 'token' or 'sequence', got '" + s + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kConfigError, "train config: " + m); };
  world.validate();
  rewards.validate();
  if (group_size < 2) fail("group_size must be >= 2");
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) fail("clip_epsilon must be in (0,1)");
  if (!(kl_coeff >= 0.0)) fail("kl_coeff must be >= 0");
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (steps < 0) fail("steps must be >= 0");
  if (tasks_per_step < 1) fail("tasks_per_step must be >= 1");
  if (!(temperature > 0.0)) fail("temperature must be > 0");
  if (max_new_tokens < 1) fail("max_new_tokens must be >= 1");
  if (sft_epochs < 0 || sft_examples < 0 || sft_batch < 1) fail("bad SFT sizes");
  if (!(sft_learning_rate >= 0.0)) fail("sft_learning_rate must be >= 0");
  if (!(sft_label_weight >= 1.0)) fail("sft_label_weight must be >= 1");
  if (train_tasks < 1) fail("train_tasks must be >= 1");
  if (checkpoint_every < 1) fail("checkpoint_every must be >= 1");
  if (threads < 0) fail("threads must be >= 0");
  policy_config().validate();
}

PolicyConfig TrainConfig::policy_config() const {
  const Vocabulary vocab(world);
  PolicyConfig c;
  c.vocab = vocab.size();
  c.d_model = model.d_model;
  c.heads = model.heads;
  c.layers = model.layers;
  c.ffn_mult = model.ffn_mult;
  c.init_scale = model.init_scale;
  c.context = world.max_prompt_tokens() + max_new_tokens;
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"world", to_json(c.world)},
      {"model",
       {{"d_model", c.model.d_model},
        {"heads", c.model.heads},
        {"layers", c.model.layers},
        {"ffn_mult", c.model.ffn_mult},
        {"init_scale", c.model.init_scale}}},
      {"rewards", to_json(c.rewards)},
      {"similarity", to_string(c.similarity)},
      {"group_size", c.group_size},
      {"clip_epsilon", c.clip_epsilon},
      {"kl_coeff", c.kl_coeff},
      {"learning_rate", c.learning_rate},
      {"steps", c.steps},
      {"tasks_per_step", c.tasks_per_step},
      {"temperature", c.temperature},
      {"ratio_mode", to_string(c.ratio_mode)},
      {"max_new_tokens", c.max_new_tokens},
      {"sft_epochs", c.sft_epochs},
      {"sft_examples", c.sft_examples},
      {"sft_batch", c.sft_batch},
      {"sft_learning_rate", c.sft_learning_rate},
      {"sft_label_weight", c.sft_label_weight},
      {"train_tasks", c.train_tasks},
      {"checkpoint_every", c.checkpoint_every},
      {"threads", c.threads},
      {"seed", c.seed},
      {"run_dir", c.run_dir},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw Error(ErrorKind::kConfigError, "train config must be a JSON object");
  try {
    auto take = [&](const nlohmann::json& obj, const char* key, auto& field) {
      if (obj.contains(key)) field = obj.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("world")) c.world = world_config_from_json(j.at("world"));
    if (j.contains("model")) {
      const auto& m = j.at("model");
      take(m, "d_model", c.model.d_model);
      take(m, "heads", c.model.heads);
      take(m, "layers", c.model.layers);
      take(m, "ffn_mult", c.model.ffn_mult);
      take(m, "init_scale", c.model.init_scale);
    }
    if (j.contains("rewards")) c.rewards = reward_weights_from_json(j.at("rewards"), c.rewards);
    if (j.contains("similarity")) c.similarity = similarity_mode_from_string(j.at("similarity").get<std::string>());
    if (j.contains("ratio_mode")) c.ratio_mode = ratio_mode_from_string(j.at("ratio_mode").get<std::string>());
    take(j, "group_size", c.group_size);
    take(j, "clip_epsilon", c.clip_epsilon);
    take(j, "kl_coeff", c.kl_coeff);
    take(j, "learning_rate", c.learning_rate);
    take(j, "steps", c.steps);
    take(j, "tasks_per_step", c.tasks_per_step);
    take(j, "temperature", c.temperature);
    take(j, "max_new_tokens", c.max_new_tokens);
    take(j, "sft_epochs", c.sft_epochs);
    take(j, "sft_examples", c.sft_examples);
    take(j, "sft_batch", c.sft_batch);
    take(j, "sft_learning_rate", c.sft_learning_rate);
    take(j, "sft_label_weight", c.sft_label_weight);
    take(j, "train_tasks", c.train_tasks);
    take(j, "checkpoint_every", c.checkpoint_every);
    take(j, "threads", c.threads);
    take(j, "seed", c.seed);
    take(j, "run_dir", c.run_dir);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfigError, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<int> prompt_tokens(const Task& task, const Vocabulary& vocab, const WorldConfig& world) {
  return render_prompt(task, vocab, world.max_prompt_tokens()).tokens;
}

namespace {

void push_symbols(std::vector<int>& out, const std::string& description, const Vocabulary& vocab) {
  std::istringstream in(description);
  std::string w;
  while (in >> w) out.push_back(vocab.id(w));
}

}  // namespace

std::vector<int> sft_target_tokens(const Sample& sample, const Vocabulary& vocab) {
  std::vector<int> out = {vocab.think_open};
  for (const auto& e : sample.truth.events) {
    out.push_back(vocab.time_prefix);
    out.push_back(vocab.time(e.t_start));
    out.push_back(vocab.dash);
    out.push_back(vocab.time(e.t_end));
    out.push_back(vocab.des_prefix);
    push_symbols(out, e.description, vocab);
  }
  out.push_back(vocab.next_word);
  push_symbols(out, sample.truth.future_event.description, vocab);
  // naming the matching option right after the derived event keeps the
  // option lookup a single attention hop
  if (sample.task.mode == TaskMode::kMcq) out.push_back(vocab.id(sample.task.correct_label));
  out.push_back(vocab.think_close);
  out.push_back(vocab.answer_open);
  if (sample.task.mode == TaskMode::kMcq) {
    out.push_back(vocab.id(sample.task.correct_label));
  } else {
    push_symbols(out, sample.truth.future_event.description, vocab);
  }
  out.push_back(vocab.answer_close);
  return out;
}

SFTDataset build_sft_dataset(std::span<const Sample> samples, int count, const Vocabulary& vocab,
                             const WorldConfig& world, const PolicyConfig& policy, std::uint64_t seed) {
  if (samples.empty()) throw Error(ErrorKind::kInvariantViolation, "SFT needs a non-empty dataset");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5f7ULL));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  SFTDataset out;
  for (int i = 0; i < count; ++i) {
    const Sample& s = samples[order[static_cast<std::size_t>(i) % order.size()]];
    SFTExample ex{prompt_tokens(s.task, vocab, world), sft_target_tokens(s, vocab), {}};
    for (std::size_t t = 0; t < ex.target.size(); ++t) {
      if (vocab.kind(ex.target[t]) == TokenKind::kLabel) ex.label_positions.push_back(static_cast<int>(t));
    }
    if (static_cast<int>(ex.prompt.size() + ex.target.size()) > policy.context) {
      ++out.dropped;
      continue;
    }
    out.examples.push_back(std::move(ex));
  }
  return out;
}

double sft_loss_and_gradient(const PolicyParams& params, std::span<const SFTExample> batch, GradientBuffer* grad,
                             int pad_token, double label_weight) {
  if (batch.empty()) throw Error(ErrorKind::kInvariantViolation, "empty SFT batch");
  double loss = 0.0;
  for (const auto& ex : batch) {
    if (ex.target.empty()) continue;
    const auto seq = concat_tokens<double>(ex.prompt, ex.target);
    const auto fc = forward(params, seq, pad_token);
    std::vector<int> rows(ex.target.size());
    std::iota(rows.begin(), rows.end(), static_cast<int>(ex.prompt.size()) - 1);
    std::vector<int> label_rows;
    if (label_weight != 1.0) {
      for (int t : ex.label_positions) label_rows.push_back(rows.at(static_cast<std::size_t>(t)));
    }
    const double extra_w = label_weight - 1.0;
    const double n = static_cast<double>(rows.size()) + extra_w * static_cast<double>(label_rows.size());
    const double w = 1.0 / (n * static_cast<double>(batch.size()));
    auto ce = cross_entropy(fc, rows, w);
    if (!label_rows.empty()) {
      const auto extra = cross_entropy(fc, label_rows, w * extra_w);
      ce.loss += extra.loss;
      ce.dlogits += extra.dlogits;
    }
    loss += ce.loss;
    if (grad) backward(params, fc, ce.dlogits, *grad);
  }
  if (!std::isfinite(loss)) throw Error(ErrorKind::kNonFiniteLoss, "SFT loss is not finite");
  return loss;
}

AdamState make_adam(const PolicyConfig& c) { return {GradientBuffer::zeros(c), GradientBuffer::zeros(c), 0}; }

double sft_step(PolicyParams& params, std::span<const SFTExample> batch, double lr, AdamState* adam, int pad_token,
                double label_weight) {
  auto grad = GradientBuffer::zeros(params.config);
  const double loss = sft_loss_and_gradient(params, batch, &grad, pad_token, label_weight);
  if (!grad.all_finite()) throw Error(ErrorKind::kNonFiniteLoss, "SFT gradient is not finite");
  if (lr == 0.0) return loss;
  if (!adam) {
    params.add_scaled(grad, -lr);
    return loss;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++adam->t;
  const double c1 = 1.0 - std::pow(b1, adam->t), c2 = 1.0 - std::pow(b2, adam->t);
  std::vector<Eigen::MatrixXd*> g, m, v;
  grad.for_each_tensor([&](const std::string&, Eigen::MatrixXd& x) { g.push_back(&x); });
  adam->m.for_each_tensor([&](const std::string&, Eigen::MatrixXd& x) { m.push_back(&x); });
  adam->v.for_each_tensor([&](const std::string&, Eigen::MatrixXd& x) { v.push_back(&x); });
  std::size_t i = 0;
  params.for_each_tensor([&](const std::string&, Eigen::MatrixXd& p) {
    *m[i] = b1 * *m[i] + (1 - b1) * *g[i];
    *v[i] = b2 * *v[i] + (1 - b2) * g[i]->cwiseAbs2();
    p.array() -= lr * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + eps);
    ++i;
  });
  return loss;
}

double clipped_term(double ratio, double advantage, double epsilon) {
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

double clipped_term_grad(double ratio, double advantage, double epsilon) {
  if (ratio >= 1.0 - epsilon && ratio <= 1.0 + epsilon) return advantage;
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return ratio * advantage < clipped * advantage ? advantage : 0.0;
}

SurrogateValue surrogate_objective(std::span<const std::vector<double>> new_logps,
                                   std::span<const std::vector<double>> old_logps, std::span<const double> advantages,
                                   std::span<const double> kls, double epsilon, double kl_coeff, RatioMode mode) {
  const std::size_t G = new_logps.size();
  if (G == 0 || old_logps.size() != G || advantages.size() != G || kls.size() != G) {
    throw Error(ErrorKind::kLengthMismatch, "surrogate inputs must all have the group size");
  }
  SurrogateValue out;
  for (std::size_t i = 0; i < G; ++i) {
    const auto& nl = new_logps[i];
    const auto& ol = old_logps[i];
    if (nl.size() != ol.size()) throw Error(ErrorKind::kLengthMismatch, "log-prob lengths differ");
    double s = 0.0;
    if (mode == RatioMode::kToken) {
      for (std::size_t t = 0; t < nl.size(); ++t) {
        const double r = std::exp(nl[t] - ol[t]);
        if (!std::isfinite(r)) throw Error(ErrorKind::kNonFiniteLoss, "non-finite importance ratio");
        s += clipped_term(r, advantages[i], epsilon);
        out.clipped_tokens += (r < 1.0 - epsilon || r > 1.0 + epsilon) ? 1 : 0;
      }
      if (!nl.empty()) s /= static_cast<double>(nl.size());
    } else {
      double d = 0.0;
      for (std::size_t t = 0; t < nl.size(); ++t) d += nl[t] - ol[t];
      const double r = std::exp(d);
      if (!std::isfinite(r)) throw Error(ErrorKind::kNonFiniteLoss, "non-finite importance ratio");
      s = clipped_term(r, advantages[i], epsilon);
      out.clipped_tokens += (r < 1.0 - epsilon || r > 1.0 + epsilon) ? static_cast<int>(nl.size()) : 0;
    }
    out.total_tokens += static_cast<int>(nl.size());
    out.surrogate += s;
    out.kl += kls[i];
  }
  out.surrogate /= static_cast<double>(G);
  out.kl /= static_cast<double>(G);
  out.objective = out.surrogate - kl_coeff * out.kl;
  return out;
}

SurrogateValue group_objective(const PolicyParams& params, const PolicyParams& ref, const RolloutGroup& group,
                               double epsilon, double kl_coeff, RatioMode mode, GradientBuffer* grad, int pad_token) {
  const std::size_t G = group.completions.size();
  if (group.old_logps.size() != G || group.advantages.size() != G) {
    throw Error(ErrorKind::kLengthMismatch, "rollout group fields must have the group size");
  }
  const int P = static_cast<int>(group.prompt.size());
  std::vector<std::vector<double>> new_logps(G);
  std::vector<double> kls(G, 0.0);
  for (std::size_t i = 0; i < G; ++i) {
    const auto& comp = group.completions[i];
    if (comp.empty()) continue;
    const auto seq = concat_tokens<double>(group.prompt, comp);
    const auto fc = forward(params, seq, pad_token);
    const auto fr = forward(ref, seq, pad_token);
    const int T = static_cast<int>(comp.size());
    std::vector<Eigen::RowVectorXd> lp(static_cast<std::size_t>(T)), lq(static_cast<std::size_t>(T));
    std::vector<double> kl_t(static_cast<std::size_t>(T));
    double kl = 0.0;
    for (int t = 0; t < T; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      lp[ti] = log_softmax<double>(fc.logits.row(P - 1 + t));
      lq[ti] = log_softmax<double>(fr.logits.row(P - 1 + t));
      new_logps[i].push_back(lp[ti](comp[ti]));
      kl_t[ti] = (lp[ti].array().exp() * (lp[ti] - lq[ti]).array()).sum();
      kl += kl_t[ti];
    }
    kls[i] = kl / T;
    if (!grad) continue;

    Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(fc.logits.rows(), fc.logits.cols());
    const double inv_g = 1.0 / static_cast<double>(G);
    const double A = group.advantages[i];
    const auto& old = group.old_logps[i];
    if (old.size() != comp.size()) throw Error(ErrorKind::kLengthMismatch, "old log-prob length");
    double seq_coeff = 0.0;
    if (mode == RatioMode::kSequence) {
      double d = 0.0;
      for (int t = 0; t < T; ++t) d += new_logps[i][static_cast<std::size_t>(t)] - old[static_cast<std::size_t>(t)];
      const double r = std::exp(d);
      seq_coeff = clipped_term_grad(r, A, epsilon) * r * inv_g;
    }
    for (int t = 0; t < T; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      const Eigen::RowVectorXd p = lp[ti].array().exp().matrix();
      double coeff = seq_coeff;
      if (mode == RatioMode::kToken) {
        const double r = std::exp(new_logps[i][ti] - old[ti]);
        coeff = clipped_term_grad(r, A, epsilon) * r * inv_g / T;
      }
      // d log p(tok) / dz = onehot - p
      Eigen::RowVectorXd row = -coeff * p;
      row(comp[ti]) += coeff;
      // d KL_t / dz = p * (log p - log q - KL_t)
      row.array() -= (kl_coeff * inv_g / T) * p.array() * ((lp[ti] - lq[ti]).array() - kl_t[ti]);
      dlogits.row(P - 1 + t) = row;
    }
    backward(params, fc, dlogits, *grad);
  }
  return surrogate_objective(new_logps, group.old_logps, group.advantages, kls, epsilon, kl_coeff, mode);
}


TrainingCurvePoint grpo_step(PolicyParams& params, const PolicyParams& ref, std::span<const Sample> batch,
                             const GrpoContext& ctx, int step) {
  const auto start = std::chrono::steady_clock::now();
  const TrainConfig& cfg = *ctx.config;
  const Vocabulary& vocab = *ctx.vocab;
  if (ref.checksum() != ctx.ref_checksum) throw Error(ErrorKind::kInvariantViolation, "reference policy changed");
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw Error(ErrorKind::kInvariantViolation, "empty GRPO batch");

  SampleOptions opt;
  opt.temperature = cfg.temperature;
  opt.max_new = cfg.max_new_tokens;
  opt.stop_token = vocab.answer_close;
  opt.pad_token = vocab.pad;

  std::vector<RolloutGroup> groups(static_cast<std::size_t>(B));
  std::vector<GradientBuffer> grads(static_cast<std::size_t>(B));
  std::vector<SurrogateValue> values(static_cast<std::size_t>(B));
  parallel_for(B, resolve_threads(cfg.threads), [&](int b) {
    const auto bi = static_cast<std::size_t>(b);
    const Sample& s = batch[bi];
    RolloutGroup& g = groups[bi];
    g.prompt = prompt_tokens(s.task, vocab, cfg.world);
    std::vector<std::uint64_t> seeds;
    for (int k = 0; k < cfg.group_size; ++k) seeds.push_back(derive_seed(cfg.seed, 0x6770ULL, step, b, k));
    g.completions = sample_group(params, g.prompt, opt, seeds, &g.old_logps);
    std::vector<double> totals;
    for (const auto& c : g.completions) {
      const auto parsed = parse_completion(vocab.detokenize(c));
      g.rewards.push_back(score_completion(parsed, s, *ctx.similarity, cfg.rewards, cfg.similarity));
      totals.push_back(g.rewards.back().total);
    }
    g.advantages = group_advantages(totals, cfg.rewards.delta);
    grads[bi] = GradientBuffer::zeros(params.config);
    values[bi] = group_objective(params, ref, g, cfg.clip_epsilon, cfg.kl_coeff, cfg.ratio_mode, &grads[bi], vocab.pad);
  });

  // fixed-order reduction keeps the update independent of thread count
  auto update = GradientBuffer::zeros(params.config);
  TrainingCurvePoint pt;
  pt.step = step;
  double n = 0.0;
  for (int b = 0; b < B; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    update.add_scaled(grads[bi], 1.0 / B);
    pt.objective += values[bi].objective / B;
    pt.kl += values[bi].kl / B;
    for (const auto& r : groups[bi].rewards) {
      pt.r_a += r.r_a;
      pt.r_e += r.r_e;
      pt.r_s += r.r_s;
      pt.total += r.total;
      n += 1.0;
    }
  }
  pt.r_a /= n;
  pt.r_e /= n;
  pt.r_s /= n;
  pt.total /= n;
  if (!update.all_finite() || !std::isfinite(pt.objective)) {
    throw Error(ErrorKind::kNonFiniteLoss, "non-finite GRPO update at step " + std::to_string(step));
  }
  params.add_scaled(update, cfg.learning_rate);
  pt.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return pt;
}

std::vector<Sample> training_tasks(const TrainConfig& config) {
  auto w = config.world;
  w.seed = derive_seed(config.seed, 0x7a1ULL);
  // keep the task semantics (successor table) fixed; only the sampling stream changes
  return generate_dataset(w, config.train_tasks);
}

void write_curves_csv(const std::string& path, std::span<const TrainingCurvePoint> curve) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorKind::kIoError, "cannot write " + tmp);
    out << "step,r_a,r_e,r_s,total,kl,objective,ms\n";
    out.precision(17);
    for (const auto& p : curve) {
      out << p.step << ',' << p.r_a << ',' << p.r_e << ',' << p.r_s << ',' << p.total << ',' << p.kl << ','
          << p.objective << ',' << p.ms << '\n';
    }
  }
  fs::rename(tmp, path);
}

std::vector<TrainingCurvePoint> read_curves_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIoError, "cannot read " + path);
  std::string line;
  std::getline(in, line);
  if (line != "step,r_a,r_e,r_s,total,kl,objective,ms") throw Error(ErrorKind::kIoError, "bad curves header in " + path);
  std::vector<TrainingCurvePoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    TrainingCurvePoint p;
    if (!(ss >> p.step >> p.r_a >> p.r_e >> p.r_s >> p.total >> p.kl >> p.objective >> p.ms)) {
      throw Error(ErrorKind::kIoError, "bad curves row in " + path);
    }
    out.push_back(p);
  }
  return out;
}

namespace {

void append_curve_row(const std::string& path, const TrainingCurvePoint& p) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorKind::kIoError, "cannot append to " + path);
  out.precision(17);
  out << p.step << ',' << p.r_a << ',' << p.r_e << ',' << p.r_s << ',' << p.total << ',' << p.kl << ','
      << p.objective << ',' << p.ms << '\n';
}

void write_json_atomic(const fs::path& path, const nlohmann::json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorKind::kIoError, "cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIoError, "cannot read " + path.string());
  return nlohmann::json::parse(in);
}

/// Config fields that may differ between an interrupted run and its resume.
nlohmann::json resume_identity(const TrainConfig& c) {
  auto j = to_json(c);
  j.erase("steps");
  j.erase("threads");
  j.erase("run_dir");
  return j;
}

}  // namespace

TrainResult train(const TrainConfig& config, std::span<const Sample> dataset, bool resume, const ProgressFn& progress) {
  config.validate();
  if (config.run_dir.empty()) throw Error(ErrorKind::kConfigError, "run_dir is required");
  if (dataset.empty()) throw Error(ErrorKind::kInvariantViolation, "training dataset is empty");
  auto say = [&](const std::string& m) {
    if (progress) progress(m);
  };

  const fs::path root(config.run_dir);
  const fs::path ckdir = root / "checkpoints";
  fs::create_directories(ckdir);
  const fs::path curves_path = root / "curves.csv";
  const fs::path manifest_path = ckdir / "manifest.json";
  const fs::path config_path = root / "config.json";

  const Vocabulary vocab(config.world);
  const PolicyConfig pc = config.policy_config();
  const SymbolOracle oracle(config.world);

  nlohmann::json manifest = {{"format", "coe.checkpoints"}, {"version", 1}, {"checkpoints", nlohmann::json::array()}};
  int start_step = 0;
  bool have_ref = false;
  TrainResult result;

  if (resume && fs::exists(manifest_path)) {
    if (!fs::exists(config_path)) throw Error(ErrorKind::kIoError, "resume: missing config.json");
    if (resume_identity(train_config_from_json(read_json(config_path))) != resume_identity(config)) {
      throw Error(ErrorKind::kConfigError, "resume: config differs from the interrupted run");
    }
    manifest = read_json(manifest_path);
    for (const auto& c : manifest.at("checkpoints")) {
      if (c.at("step").get<int>() == 0) have_ref = true;
      start_step = std::max(start_step, c.at("step").get<int>());
    }
    start_step = std::min(start_step, config.steps);
  }
  write_json_atomic(config_path, to_json(config));

  auto record_checkpoint = [&](const PolicyParams& p, int step) {
    const std::string file = "step_" + std::to_string(step) + ".bin";
    save_checkpoint(p, (ckdir / file).string());
    auto& list = manifest["checkpoints"];
    for (auto it = list.begin(); it != list.end(); ++it) {
      if (it->at("step").get<int>() == step) {
        list.erase(it);
        break;
      }
    }
    list.push_back({{"step", step}, {"file", file}, {"checksum", p.checksum()}});
    manifest["latest"] = step;
    manifest["shapes"] = nlohmann::json::parse(shape_manifest_json(p));
    write_json_atomic(manifest_path, manifest);
  };

  if (have_ref) {
    result.reference = load_checkpoint((ckdir / "step_0.bin").string());
    say("resume: loaded post-SFT reference");
  } else {
    start_step = 0;
    auto params = init_params<double>(pc, derive_seed(config.seed, 0x1417ULL));
    save_checkpoint(params, (ckdir / "init.bin").string());
    const auto sft = build_sft_dataset(dataset, config.sft_examples, vocab, config.world, pc, config.seed);
    if (sft.dropped > 0) say("sft: dropped " + std::to_string(sft.dropped) + " over-long examples");
    AdamState adam = make_adam(pc);
    std::vector<std::size_t> order(sft.examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<SFTExample> batch;
    for (int epoch = 0; epoch < config.sft_epochs && !sft.examples.empty(); ++epoch) {
      Rng rng(derive_seed(config.seed, 0xe90cULL, epoch));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      double sum = 0.0;
      int batches = 0;
      for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.sft_batch)) {
        batch.clear();
        for (std::size_t k = b; k < std::min(order.size(), b + static_cast<std::size_t>(config.sft_batch)); ++k) {
          batch.push_back(sft.examples[order[k]]);
        }
        sum += sft_step(params, batch, config.sft_learning_rate, &adam, vocab.pad, config.sft_label_weight);
        ++batches;
      }
      result.sft_losses.push_back(sum / std::max(1, batches));
      say("sft epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(result.sft_losses.back()));
    }
    result.reference = params;
    record_checkpoint(params, 0);
    write_curves_csv(curves_path.string(), {});
  }

  PolicyParams params = start_step > 0 ? load_checkpoint((ckdir / ("step_" + std::to_string(start_step) + ".bin")).string())
                                       : result.reference;
  if (start_step > 0) {
    auto rows = read_curves_csv(curves_path.string());
    std::erase_if(rows, [&](const TrainingCurvePoint& p) { return p.step > start_step; });
    write_curves_csv(curves_path.string(), rows);
    result.curve = rows;
    say("resume: continuing after step " + std::to_string(start_step));
  }

  GrpoContext ctx;
  ctx.config = &config;
  ctx.vocab = &vocab;
  ctx.similarity = &oracle;
  ctx.tasks = dataset;
  ctx.ref_checksum = result.reference.checksum();

  std::vector<Sample> batch;
  for (int step = start_step + 1; step <= config.steps; ++step) {
    Rng pick(derive_seed(config.seed, 0xba7cULL, step));
    batch.clear();
    for (int b = 0; b < config.tasks_per_step; ++b) batch.push_back(dataset[pick.below(dataset.size())]);
    const auto pt = grpo_step(params, result.reference, batch, ctx, step);
    append_curve_row(curves_path.string(), pt);
    result.curve.push_back(pt);
    if (step % config.checkpoint_every == 0 || step == config.steps) record_checkpoint(params, step);
    if (step % 10 == 0 || step == config.steps) {
      std::ostringstream m;
      m.precision(3);
      m << "step " << step << " r_a " << pt.r_a << " r_e " << pt.r_e << " r_s " << pt.r_s << " kl " << pt.kl << " ("
        << static_cast<int>(pt.ms) << " ms)";
      say(m.str());
    }
  }
  if (config.steps == 0 && !fs::exists(ckdir / "step_0.bin")) record_checkpoint(params, 0);
  result.params = std::move(params);
  return result;
}

}  // namespace coe
