#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "coe/event_model.hpp"

namespace coe {

class Vocabulary;

/// Parameters of the synthetic event world.
struct WorldConfig {
  int event_vocab_size = 32;
  int symbols_per_event = 3;
  /// Row k: distribution over the event type that follows type k.
  std::vector<std::vector<double>> successor_table;
  double min_event_duration = 0.5;
  double max_event_duration = 1.5;
  /// Event boundaries are quantized to this grid (seconds).
  double time_grid = 0.5;
  double frame_rate = 8.0;
  double noise_rate = 0.05;
  int observed_events = 3;
  int option_count = 4;
  double open_set_fraction = 0.0;
  std::uint64_t seed = 17;

  /// Throws kConfigError with a field-level message.
  void validate() const;

  int lexicon_size() const { return event_vocab_size * symbols_per_event; }
  /// Upper bound on any timestamp the world can produce.
  double max_time() const { return (observed_events + 1) * max_event_duration; }
  int max_frames() const;
  /// Longest possible rendered prompt (before padding).
  int max_prompt_tokens() const;
};

/// Single-cycle permutation successor table (no self-loops).
std::vector<std::vector<double>> cycle_successor_table(int vocab, std::uint64_t seed);
/// Dense random rows drawn from a flat Dirichlet.
std::vector<std::vector<double>> random_successor_table(int vocab, std::uint64_t seed);

/// The reference "easy world": 32 event types, deterministic successors,
/// 5% symbol noise, 4 options.
WorldConfig reference_world(std::uint64_t seed = 17);

nlohmann::json to_json(const WorldConfig& c);
/// Accepts either an explicit "successor_table" or "successor_kind" of
/// "cycle" | "random" (seeded by "successor_seed", default = seed).
WorldConfig world_config_from_json(const nlohmann::json& j);

struct Frame {
  double t = 0.0;
  std::vector<int> symbols;  // sorted, unique

  bool operator==(const Frame&) const = default;
};

struct SymbolicVideo {
  std::vector<Frame> frames;
  double duration = 0.0;

  bool operator==(const SymbolicVideo&) const = default;
};

struct SymbolicClip {
  std::vector<Frame> frames;
};

struct GroundTruthTimeline {
  EventChain events;
  Event future_event;
  std::vector<int> event_types;
  int future_type = 0;
};

enum class TaskMode { kMcq, kOpenSet };

struct Option {
  std::string label;
  std::string description;
};

struct Task {
  int id = 0;
  SymbolicVideo video;
  std::vector<std::string> question;
  TaskMode mode = TaskMode::kMcq;
  std::vector<Option> options;
  std::string correct_label;
};

struct Sample {
  Task task;
  GroundTruthTimeline truth;
};

/// "s{k*spe} s{k*spe+1} ..." for event type k.
std::string event_description(const WorldConfig& c, int event_type);
std::vector<int> event_symbols(const WorldConfig& c, int event_type);

/// Deterministic in (config, count); sample i depends only on (seed, i).
std::vector<Sample> generate_dataset(const WorldConfig& config, int count);

/// Frames with timestamp in [t_start, t_end]; throws kInvalidRange if
/// t_start > t_end or t_start < 0.
SymbolicClip crop(const SymbolicVideo& video, double t_start, double t_end);

struct Segment {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool empty() const { return begin == end; }
  bool contains(int i) const { return i >= begin && i < end; }
};

struct PromptLayout {
  std::vector<int> tokens;
  Segment padding, visual, question, option;
};

/// [left padding][frames][question][options]. Each frame is a separator
/// (the time token on grid-aligned frames, '|' otherwise) followed by its
/// symbols. `pad_to` = 0 disables padding.
PromptLayout render_prompt(const Task& task, const Vocabulary& vocab, int pad_to = 0);

/// Open-set copy of an MCQ task: options removed, question reworded.
Task as_open_set(const Task& task);

/// Recovers the segmentation of a noiseless video by symbol-set change points.
EventChain change_point_segmentation(const SymbolicVideo& video);

nlohmann::json to_json(const Sample& s);
Sample sample_from_json(const nlohmann::json& j);

/// Header line {"schema":"coe.dataset","version":1,"world":...,"count":n},
/// then one sample per line.
void write_dataset_jsonl(const std::string& path, const WorldConfig& world, const std::vector<Sample>& samples);
struct Dataset {
  WorldConfig world;
  std::vector<Sample> samples;
};
Dataset read_dataset_jsonl(const std::string& path);

}  // namespace coe
