#include "coe/symbolic_world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "coe/error.hpp"
#include "coe/rng.hpp"
#include "coe/vocabulary.hpp"

namespace coe {
namespace {

constexpr double kTimeEps = 1e-9;

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorKind::kConfigError, msg); }

std::vector<std::string> mcq_question() { return {"what", "happens", "next", "?"}; }
std::vector<std::string> open_question() { return {"predict", "what", "happens", "next", "?"}; }

int sample_categorical(const std::vector<double>& probs, Rng& rng) {
  double u = rng.uniform();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    u -= probs[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  // rounding slack: last type with non-zero mass
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return static_cast<int>(i);
  }
  return 0;
}

// Event types reachable from a successor row.
std::vector<int> support(const std::vector<double>& row) {
  std::vector<int> out;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (row[i] > 0.0) out.push_back(static_cast<int>(i));
  }
  return out;
}

Sample generate_one(const WorldConfig& c, int index) {
  Rng rng(derive_seed(c.seed, 0x5a5aULL, static_cast<std::uint64_t>(index)));
  Sample s;
  auto& truth = s.truth;

  const long long k_min = static_cast<long long>(std::ceil(c.min_event_duration / c.time_grid - 1e-9));
  const long long k_max = static_cast<long long>(std::floor(c.max_event_duration / c.time_grid + 1e-9));

  int type = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.event_vocab_size)));
  long long t_ticks = 0;
  for (int e = 0; e <= c.observed_events; ++e) {
    const long long dur = k_min + static_cast<long long>(rng.below(static_cast<std::uint64_t>(k_max - k_min + 1)));
    Event ev{static_cast<double>(t_ticks) * c.time_grid, static_cast<double>(t_ticks + dur) * c.time_grid,
             event_description(c, type)};
    if (e < c.observed_events) {
      truth.events.push_back(ev);
      truth.event_types.push_back(type);
      type = sample_categorical(c.successor_table[static_cast<std::size_t>(type)], rng);
    } else {
      truth.future_event = ev;
      truth.future_type = type;
    }
    t_ticks += dur;
  }

  // Render frames of the observed prefix.
  auto& video = s.task.video;
  video.duration = truth.future_event.t_start;
  const long long n_frames = std::llround(video.duration * c.frame_rate);
  std::size_t ev = 0;
  for (long long f = 0; f < n_frames; ++f) {
    const double t = static_cast<double>(f) / c.frame_rate;
    while (ev + 1 < truth.events.size() && t >= truth.events[ev].t_end - kTimeEps) ++ev;
    std::vector<int> syms = event_symbols(c, truth.event_types[ev]);
    for (int& sym : syms) {
      if (c.noise_rate > 0.0 && rng.bernoulli(c.noise_rate)) {
        sym = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.lexicon_size())));
      }
    }
    std::sort(syms.begin(), syms.end());
    syms.erase(std::unique(syms.begin(), syms.end()), syms.end());
    video.frames.push_back({t, std::move(syms)});
  }

  auto& task = s.task;
  task.id = index;
  task.mode = rng.uniform() < c.open_set_fraction ? TaskMode::kOpenSet : TaskMode::kMcq;
  if (task.mode == TaskMode::kOpenSet) {
    task.question = open_question();
    return s;
  }
  task.question = mcq_question();

  // Distractors: types outside the successor support of the last observed event.
  const auto succ = support(c.successor_table[static_cast<std::size_t>(truth.event_types.back())]);
  std::vector<int> pool;
  for (int k = 0; k < c.event_vocab_size; ++k) {
    if (k != truth.future_type && std::find(succ.begin(), succ.end(), k) == succ.end()) pool.push_back(k);
  }
  if (static_cast<int>(pool.size()) < c.option_count - 1) {
    config_error("option_count exceeds available non-successor event types");
  }
  for (std::size_t i = 0; i + 1 < static_cast<std::size_t>(c.option_count); ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  const int correct_slot = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.option_count)));
  std::size_t next_distractor = 0;
  for (int slot = 0; slot < c.option_count; ++slot) {
    const int t = slot == correct_slot ? truth.future_type : pool[next_distractor++];
    task.options.push_back({option_label(slot), event_description(c, t)});
  }
  task.correct_label = option_label(correct_slot);
  return s;
}

}  // namespace

void WorldConfig::validate() const {
  if (event_vocab_size < 2) config_error("event_vocab_size must be >= 2");
  if (symbols_per_event < 1) config_error("symbols_per_event must be >= 1");
  if (static_cast<int>(successor_table.size()) != event_vocab_size) {
    config_error("successor_table must have event_vocab_size rows");
  }
  for (std::size_t k = 0; k < successor_table.size(); ++k) {
    const auto& row = successor_table[k];
    if (static_cast<int>(row.size()) != event_vocab_size) config_error("successor_table row " + std::to_string(k) + " has wrong length");
    double sum = 0.0;
    for (double p : row) {
      if (!(p >= 0.0)) config_error("successor_table row " + std::to_string(k) + " has a negative entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) config_error("successor_table row " + std::to_string(k) + " does not sum to 1");
  }
  if (!(frame_rate > 0.0)) config_error("frame_rate must be > 0");
  if (!(time_grid > 0.0)) config_error("time_grid must be > 0");
  const double per_grid = time_grid * frame_rate;
  if (std::abs(per_grid - std::round(per_grid)) > 1e-9) config_error("time_grid * frame_rate must be an integer");
  if (!(min_event_duration > 0.0) || min_event_duration > max_event_duration) {
    config_error("need 0 < min_event_duration <= max_event_duration");
  }
  if (std::floor(max_event_duration / time_grid + 1e-9) < std::ceil(min_event_duration / time_grid - 1e-9)) {
    config_error("no grid-aligned duration within [min_event_duration, max_event_duration]");
  }
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) config_error("noise_rate must be in [0,1]");
  if (observed_events < 1) config_error("observed_events must be >= 1");
  if (option_count < 2 || option_count > 26) config_error("option_count must be in [2, 26]");
  if (option_count > event_vocab_size) config_error("option_count exceeds event_vocab_size");
  if (!(open_set_fraction >= 0.0 && open_set_fraction <= 1.0)) config_error("open_set_fraction must be in [0,1]");
}

int WorldConfig::max_frames() const {
  return static_cast<int>(std::llround(observed_events * std::floor(max_event_duration / time_grid + 1e-9) * time_grid *
                                       frame_rate));
}

int WorldConfig::max_prompt_tokens() const {
  return max_frames() * (1 + symbols_per_event) + static_cast<int>(open_question().size()) +
         option_count * (1 + symbols_per_event);
}

std::vector<std::vector<double>> cycle_successor_table(int vocab, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(vocab));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0xc7c1eULL));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<double>> table(order.size(), std::vector<double>(order.size(), 0.0));
  for (std::size_t i = 0; i < order.size(); ++i) {
    table[static_cast<std::size_t>(order[i])][static_cast<std::size_t>(order[(i + 1) % order.size()])] = 1.0;
  }
  return table;
}

std::vector<std::vector<double>> random_successor_table(int vocab, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xd1ULL));
  std::vector<std::vector<double>> table(static_cast<std::size_t>(vocab), std::vector<double>(static_cast<std::size_t>(vocab)));
  for (auto& row : table) {
    double sum = 0.0;
    for (double& p : row) {
      double u = rng.uniform();
      while (u <= 0.0) u = rng.uniform();
      p = -std::log(u);  // Exp(1) -> flat Dirichlet after normalization
      sum += p;
    }
    for (double& p : row) p /= sum;
  }
  return table;
}

WorldConfig reference_world(std::uint64_t seed) {
  WorldConfig c;
  c.seed = seed;
  c.successor_table = cycle_successor_table(c.event_vocab_size, seed);
  return c;
}

nlohmann::json to_json(const WorldConfig& c) {
  return {{"event_vocab_size", c.event_vocab_size},
          {"symbols_per_event", c.symbols_per_event},
          {"successor_table", c.successor_table},
          {"min_event_duration", c.min_event_duration},
          {"max_event_duration", c.max_event_duration},
          {"time_grid", c.time_grid},
          {"frame_rate", c.frame_rate},
          {"noise_rate", c.noise_rate},
          {"observed_events", c.observed_events},
          {"option_count", c.option_count},
          {"open_set_fraction", c.open_set_fraction},
          {"seed", c.seed}};
}

WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  try {
    c.event_vocab_size = j.value("event_vocab_size", c.event_vocab_size);
    c.symbols_per_event = j.value("symbols_per_event", c.symbols_per_event);
    c.min_event_duration = j.value("min_event_duration", c.min_event_duration);
    c.max_event_duration = j.value("max_event_duration", c.max_event_duration);
    c.time_grid = j.value("time_grid", c.time_grid);
    c.frame_rate = j.value("frame_rate", c.frame_rate);
    c.noise_rate = j.value("noise_rate", c.noise_rate);
    c.observed_events = j.value("observed_events", c.observed_events);
    c.option_count = j.value("option_count", c.option_count);
    c.open_set_fraction = j.value("open_set_fraction", c.open_set_fraction);
    c.seed = j.value("seed", c.seed);
    if (j.contains("successor_table")) {
      c.successor_table = j.at("successor_table").get<std::vector<std::vector<double>>>();
    } else {
      const std::string kind = j.value("successor_kind", std::string("cycle"));
      const std::uint64_t s = j.value("successor_seed", c.seed);
      if (kind == "cycle") {
        c.successor_table = cycle_successor_table(c.event_vocab_size, s);
      } else if (kind == "random") {
        c.successor_table = random_successor_table(c.event_vocab_size, s);
      } else {
        config_error("successor_kind must be 'cycle' or 'random'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    config_error(std::string("world config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<int> event_symbols(const WorldConfig& c, int event_type) {
  std::vector<int> out(static_cast<std::size_t>(c.symbols_per_event));
  std::iota(out.begin(), out.end(), event_type * c.symbols_per_event);
  return out;
}

std::string event_description(const WorldConfig& c, int event_type) {
  std::string out;
  for (int s : event_symbols(c, event_type)) {
    if (!out.empty()) out.push_back(' ');
    out += symbol_word(s);
  }
  return out;
}

std::vector<Sample> generate_dataset(const WorldConfig& config, int count) {
  config.validate();
  if (count < 0) config_error("count must be >= 0");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_one(config, i));
  return out;
}

SymbolicClip crop(const SymbolicVideo& video, double t_start, double t_end) {
  if (!(t_start >= 0.0) || !(t_start <= t_end)) {
    throw Error(ErrorKind::kInvalidRange, "crop needs 0 <= t_start <= t_end");
  }
  SymbolicClip clip;
  for (const auto& f : video.frames) {
    if (f.t >= t_start - kTimeEps && f.t <= t_end + kTimeEps) clip.frames.push_back(f);
  }
  return clip;
}

PromptLayout render_prompt(const Task& task, const Vocabulary& vocab, int pad_to) {
  std::vector<int> body;
  for (const auto& f : task.video.frames) {
    // grid-aligned frames carry their timestamp as the separator
    body.push_back(vocab.try_time(f.t).value_or(vocab.frame_sep));
    for (int s : f.symbols) body.push_back(vocab.symbol(s));
  }
  const int visual_len = static_cast<int>(body.size());
  for (const auto& w : task.question) body.push_back(vocab.id(w));
  const int question_len = static_cast<int>(body.size()) - visual_len;
  // description first: the label token can then see what it labels
  for (const auto& o : task.options) {
    const auto ids = vocab.encode(o.description);
    if (!ids) throw Error(ErrorKind::kInvariantViolation, "option description is not tokenizable");
    body.insert(body.end(), ids->begin(), ids->end());
    body.push_back(vocab.id(o.label));
  }

  const int n = static_cast<int>(body.size());
  const int pad = std::max(0, pad_to - n);
  PromptLayout layout;
  layout.tokens.assign(static_cast<std::size_t>(pad), vocab.pad);
  layout.tokens.insert(layout.tokens.end(), body.begin(), body.end());
  layout.padding = {0, pad};
  layout.visual = {pad, pad + visual_len};
  layout.question = {layout.visual.end, layout.visual.end + question_len};
  layout.option = {layout.question.end, pad + n};
  return layout;
}

Task as_open_set(const Task& task) {
  Task out = task;
  out.mode = TaskMode::kOpenSet;
  out.options.clear();
  out.correct_label.clear();
  out.question = open_question();
  return out;
}

EventChain change_point_segmentation(const SymbolicVideo& video) {
  EventChain out;
  for (std::size_t i = 0; i < video.frames.size(); ++i) {
    const auto& f = video.frames[i];
    if (i == 0 || f.symbols != video.frames[i - 1].symbols) {
      if (!out.empty()) out.back().t_end = f.t;
      std::string desc;
      for (int s : f.symbols) {
        if (!desc.empty()) desc.push_back(' ');
        desc += symbol_word(s);
      }
      out.push_back({f.t, f.t, desc});
    }
  }
  if (!out.empty()) out.back().t_end = video.duration;
  return out;
}

nlohmann::json to_json(const Sample& s) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : s.task.video.frames) frames.push_back({{"t", f.t}, {"symbols", f.symbols}});
  nlohmann::json options = nlohmann::json::array();
  for (const auto& o : s.task.options) options.push_back({{"label", o.label}, {"description", o.description}});
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : s.truth.events) events.push_back(to_json(e));
  return {{"id", s.task.id},
          {"mode", s.task.mode == TaskMode::kMcq ? "mcq" : "open"},
          {"question", s.task.question},
          {"video", {{"duration", s.task.video.duration}, {"frames", frames}}},
          {"options", options},
          {"correct_label", s.task.correct_label},
          {"truth",
           {{"events", events},
            {"event_types", s.truth.event_types},
            {"future_event", to_json(s.truth.future_event)},
            {"future_type", s.truth.future_type}}}};
}

Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.task.id = j.at("id").get<int>();
  s.task.mode = j.at("mode").get<std::string>() == "mcq" ? TaskMode::kMcq : TaskMode::kOpenSet;
  s.task.question = j.at("question").get<std::vector<std::string>>();
  s.task.video.duration = j.at("video").at("duration").get<double>();
  for (const auto& f : j.at("video").at("frames")) {
    s.task.video.frames.push_back({f.at("t").get<double>(), f.at("symbols").get<std::vector<int>>()});
  }
  for (const auto& o : j.at("options")) {
    s.task.options.push_back({o.at("label").get<std::string>(), o.at("description").get<std::string>()});
  }
  s.task.correct_label = j.at("correct_label").get<std::string>();
  const auto& t = j.at("truth");
  for (const auto& e : t.at("events")) s.truth.events.push_back(event_from_json(e));
  s.truth.event_types = t.at("event_types").get<std::vector<int>>();
  s.truth.future_event = event_from_json(t.at("future_event"));
  s.truth.future_type = t.at("future_type").get<int>();
  return s;
}

void write_dataset_jsonl(const std::string& path, const WorldConfig& world, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIoError, "cannot open " + path);
  const nlohmann::json header = {
      {"schema", "coe.dataset"}, {"version", 1}, {"world", to_json(world)}, {"count", samples.size()}};
  out << header.dump() << '\n';
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
  if (!out) throw Error(ErrorKind::kIoError, "write failed for " + path);
}

Dataset read_dataset_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::kIoError, path + ": missing header line");
  Dataset ds;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.value("schema", "") != "coe.dataset" || header.value("version", 0) != 1) {
      throw Error(ErrorKind::kIoError, path + ": unsupported dataset schema");
    }
    ds.world = world_config_from_json(header.at("world"));
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      ds.samples.push_back(sample_from_json(nlohmann::json::parse(line)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kIoError, path + ": " + e.what());
  }
  return ds;
}

}  // namespace coe
