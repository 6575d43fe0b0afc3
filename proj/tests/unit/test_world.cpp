#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "coe/error.hpp"
#include "coe/symbolic_world.hpp"
#include "coe/vocabulary.hpp"

using namespace coe;

namespace {

WorldConfig noiseless(std::uint64_t seed = 3) {
  auto c = reference_world(seed);
  c.noise_rate = 0.0;
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config validation") {
  auto c = reference_world();
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.option_count = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.frame_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.successor_table[3][0] += 0.01;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("generation is deterministic in (config, seed)") {
  const auto c = reference_world(17);
  const auto a = generate_dataset(c, 50);
  const auto b = generate_dataset(c, 50);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(to_json(a[i]).dump() == to_json(b[i]).dump());
  const auto other = generate_dataset(reference_world(18), 5);
  CHECK(to_json(other[0]).dump() != to_json(a[0]).dump());
}

TEST_CASE("noiseless frames carry exactly their event's symbols") {
  const auto c = noiseless();
  for (const auto& s : generate_dataset(c, 40)) {
    for (const auto& f : s.task.video.frames) {
      const auto it = std::find_if(s.truth.events.begin(), s.truth.events.end(),
                                   [&](const Event& e) { return f.t >= e.t_start - 1e-9 && f.t < e.t_end - 1e-9; });
      REQUIRE(it != s.truth.events.end());
      const auto k = static_cast<std::size_t>(it - s.truth.events.begin());
      CHECK(f.symbols.size() == 3);
      CHECK(f.symbols == event_symbols(c, s.truth.event_types[k]));
    }
  }
}

TEST_CASE("frames are uniformly spaced and strictly increasing") {
  for (const auto& s : generate_dataset(reference_world(), 20)) {
    const auto& fr = s.task.video.frames;
    for (std::size_t i = 1; i < fr.size(); ++i) CHECK(std::abs(fr[i].t - fr[i - 1].t - 0.125) < 1e-9);
    CHECK(s.truth.future_event.t_start >= s.truth.events.back().t_end);
  }
}

TEST_CASE("deterministic successors: correct option is the unique successor") {
  auto c = noiseless();
  c.option_count = 4;
  // exhaustive over the successor table: for every type, exactly one type has mass
  for (int k = 0; k < c.event_vocab_size; ++k) {
    int nonzero = 0;
    for (double p : c.successor_table[static_cast<std::size_t>(k)]) nonzero += p > 0.0;
    CHECK(nonzero == 1);
  }
  for (const auto& s : generate_dataset(c, 200)) {
    const auto& row = c.successor_table[static_cast<std::size_t>(s.truth.event_types.back())];
    int matching = 0;
    for (const auto& o : s.task.options) {
      for (int k = 0; k < c.event_vocab_size; ++k) {
        if (row[static_cast<std::size_t>(k)] > 0.0 && o.description == event_description(c, k)) {
          ++matching;
          CHECK(o.label == s.task.correct_label);
        }
      }
    }
    CHECK(matching == 1);
    std::set<std::string> labels;
    for (const auto& o : s.task.options) labels.insert(o.label);
    CHECK(labels.size() == s.task.options.size());
  }
}

TEST_CASE("too many options for the available distractors is rejected") {
  auto c = reference_world();
  c.event_vocab_size = 4;
  c.successor_table = cycle_successor_table(4, 1);
  c.option_count = 4;  // three non-successor types remain for three distractors
  CHECK_NOTHROW(generate_dataset(c, 3));
  c.successor_table = random_successor_table(4, 1);  // every type is a possible successor
  CHECK_THROWS_AS(generate_dataset(c, 3), Error);
}

TEST_CASE("crop") {
  const auto s = generate_dataset(noiseless(), 1)[0];
  const auto& v = s.task.video;
  CHECK(crop(v, 0.0, v.duration).frames.size() == v.frames.size());
  const auto point = crop(v, v.frames[3].t, v.frames[3].t);
  REQUIRE(point.frames.size() == 1);
  CHECK(point.frames[0] == v.frames[3]);
  CHECK_THROWS_AS(crop(v, 2.0, 1.0), Error);
  CHECK(crop(v, v.duration + 5, v.duration + 6).frames.empty());
}

TEST_CASE("crop over 2-second windows matches a direct filter") {
  SymbolicVideo v;
  for (int k = 0; k < 80; ++k) v.frames.push_back({k / 8.0, {k % 5}});
  v.duration = 10.0;
  for (double start : {0.0, 0.05, 0.125, 1.0, 3.3, 5.5}) {
    const auto clip = crop(v, start, start + 2.0);
    std::size_t direct = 0;
    for (const auto& f : v.frames) direct += (f.t >= start && f.t <= start + 2.0) ? 1 : 0;
    CHECK(clip.frames.size() == direct);
    CHECK((direct == 16 || direct == 17));
  }
}

TEST_CASE("render_prompt segments partition the prompt") {
  const auto c = reference_world();
  const Vocabulary vocab(c);
  for (const auto& s : generate_dataset(c, 30)) {
    const auto layout = render_prompt(s.task, vocab, c.max_prompt_tokens());
    CHECK(static_cast<int>(layout.tokens.size()) == c.max_prompt_tokens());
    CHECK(layout.padding.begin == 0);
    CHECK(layout.padding.end == layout.visual.begin);
    CHECK(layout.visual.end == layout.question.begin);
    CHECK(layout.question.end == layout.option.begin);
    CHECK(layout.option.end == static_cast<int>(layout.tokens.size()));
    CHECK(layout.option.size() == 4 * 4);
  }
}

TEST_CASE("render_prompt token counts") {
  auto c = noiseless();
  const Vocabulary vocab(c);
  Task t;
  t.mode = TaskMode::kMcq;
  for (int k = 0; k < 10; ++k) t.video.frames.push_back({k / 8.0, {0, 1, 2}});
  t.video.duration = 10 / 8.0;
  t.question = {"what", "happens", "next", "?"};
  t.options = {{"A", "s3 s4 s5"}, {"B", "s6 s7 s8"}, {"C", "s0 s1 s2"}, {"D", "s9 s10 s11"}};
  const auto layout = render_prompt(t, vocab);
  CHECK(layout.visual.size() == 30 + 10);  // symbols plus one separator per frame
  CHECK(layout.tokens[0] == vocab.time(0.0));
  CHECK(layout.tokens[4] == vocab.frame_sep);
  CHECK(layout.tokens[16] == vocab.time(0.5));
  const auto open = render_prompt(as_open_set(t), vocab);
  CHECK(open.option.empty());
}

TEST_CASE("noiseless segmentation is recoverable by change points") {
  const auto c = noiseless(9);
  for (const auto& s : generate_dataset(c, 50)) {
    const auto seg = change_point_segmentation(s.task.video);
    CHECK(seg == s.truth.events);
  }
}

TEST_CASE("distractors never equal the true successor") {
  auto c = reference_world(4);
  c.successor_table = random_successor_table(c.event_vocab_size, 4);
  // dense rows leave no distractor pool; use a sparse two-successor table
  for (int k = 0; k < c.event_vocab_size; ++k) {
    auto& row = c.successor_table[static_cast<std::size_t>(k)];
    std::fill(row.begin(), row.end(), 0.0);
    row[static_cast<std::size_t>((k + 1) % c.event_vocab_size)] = 0.5;
    row[static_cast<std::size_t>((k + 5) % c.event_vocab_size)] = 0.5;
  }
  for (const auto& s : generate_dataset(c, 100)) {
    const std::string truth = event_description(c, s.truth.future_type);
    int hits = 0;
    for (const auto& o : s.task.options) hits += o.description == truth;
    CHECK(hits == 1);
  }
}

TEST_CASE("vocabulary encode/detokenize") {
  const Vocabulary vocab(reference_world());
  const std::string text = "<think>Time:0.0-1.5,Des:s4 s5 s6</think><answer>B</answer>";
  const auto ids = vocab.encode(text);
  REQUIRE(ids.has_value());
  CHECK(vocab.detokenize(*ids) == text);
  CHECK(vocab.encode("s12")->size() == 1);
  CHECK_FALSE(vocab.encode("zebra").has_value());
  CHECK(parse_symbol_word("s12") == std::optional<int>(12));
  CHECK_FALSE(parse_symbol_word("s").has_value());
  CHECK_FALSE(parse_symbol_word("x1").has_value());
}

TEST_CASE("dataset JSONL round trip and count 0") {
  const auto c = reference_world();
  const auto dir = std::filesystem::temp_directory_path();
  const auto p1 = (dir / "coe_ds_a.jsonl").string();
  const auto p2 = (dir / "coe_ds_b.jsonl").string();
  const auto data = generate_dataset(c, 10);
  write_dataset_jsonl(p1, c, data);
  const auto back = read_dataset_jsonl(p1);
  REQUIRE(back.samples.size() == 10);
  write_dataset_jsonl(p2, back.world, back.samples);
  CHECK(slurp(p1) == slurp(p2));
  write_dataset_jsonl(p1, c, {});
  CHECK(read_dataset_jsonl(p1).samples.empty());
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}
