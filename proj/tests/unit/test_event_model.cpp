#include <doctest.h>

#include "coe/error.hpp"
#include "coe/event_model.hpp"
#include "coe/rng.hpp"

using namespace coe;

namespace {

Event random_event(Rng& rng, double min_start) {
  const int a = static_cast<int>(std::round(min_start * 10.0)) + static_cast<int>(rng.below(30));
  const int b = a + static_cast<int>(rng.below(40));
  std::string desc;
  const int words = 1 + static_cast<int>(rng.below(5));
  for (int w = 0; w < words; ++w) {
    if (w) desc += ' ';
    desc += "w" + std::to_string(rng.below(1000));
  }
  return Event{a / 10.0, b / 10.0, desc};
}

}  // namespace

TEST_CASE("parse: canonical single-event completion") {
  const auto p = parse_completion(
      "<think><event>Time:2.0-4.5,Des:chef chops onions</event>reasoning about it</think><answer>B</answer>");
  REQUIRE(p.chain.size() == 1);
  CHECK(p.chain[0] == Event{2.0, 4.5, "chef chops onions"});
  CHECK(p.tag_valid);
  CHECK(tag_validity_indicator(p) == 1);
  CHECK(p.answer == std::optional<std::string>("B"));
  CHECK(p.reasoning_text == "reasoning about it");
  CHECK(p.diagnostics.empty());
}

TEST_CASE("parse: empty input") {
  const auto p = parse_completion("");
  CHECK(p.chain.empty());
  CHECK_FALSE(p.tag_valid);
  CHECK_FALSE(p.answer.has_value());
  CHECK(chain_length(p) == 0);
}

TEST_CASE("parse: each validity rule has a minimal counterexample") {
  SUBCASE("(a) unclosed event") {
    const auto p = parse_completion("<think><event>Time:1.0-2.0,Des:x</think><answer>A</answer>");
    CHECK_FALSE(p.tag_valid);
    CHECK(p.has_diagnostic(DiagnosticKind::kUnclosedTag));
    CHECK(tag_validity_indicator(p) == 0);
  }
  SUBCASE("(a) stray close") {
    const auto p = parse_completion("<think><event>Time:1.0-2.0,Des:x</event></event></think><answer>A</answer>");
    CHECK_FALSE(p.tag_valid);
    CHECK(p.has_diagnostic(DiagnosticKind::kUnclosedTag));
    CHECK(p.chain.size() == 1);
  }
  SUBCASE("(b) bad timestamp") {
    const auto p = parse_completion("<think><event>Time:x-2.0,Des:x</event></think><answer>A</answer>");
    CHECK(p.has_diagnostic(DiagnosticKind::kBadTimestamp));
    CHECK_FALSE(p.tag_valid);
  }
  SUBCASE("(b) negative timestamp") {
    const auto p = parse_completion("<think><event>Time:-1.0-2.0,Des:x</event></think><answer>A</answer>");
    CHECK(p.has_diagnostic(DiagnosticKind::kBadTimestamp));
  }
  SUBCASE("(b) inverted interval") {
    const auto p = parse_completion("<think><event>Time:3.0-2.0,Des:x</event></think><answer>A</answer>");
    CHECK(p.has_diagnostic(DiagnosticKind::kBadTimestamp));
  }
  SUBCASE("(b) missing Des") {
    const auto p = parse_completion("<think><event>Time:1.0-2.0 x</event></think><answer>A</answer>");
    CHECK(p.has_diagnostic(DiagnosticKind::kMalformedEvent));
  }
  SUBCASE("(b) empty description") {
    const auto p = parse_completion("<think><event>Time:1.0-2.0,Des:  </event></think><answer>A</answer>");
    CHECK(p.has_diagnostic(DiagnosticKind::kEmptyDescription));
  }
  SUBCASE("(c) no events") {
    const auto p = parse_completion("<think>just thinking</think><answer>A</answer>");
    CHECK(p.has_diagnostic(DiagnosticKind::kNoEvents));
    CHECK_FALSE(p.tag_valid);
  }
  SUBCASE("(d) out of order") {
    const auto p = parse_completion(
        "<think><event>Time:5.0-6.0,Des:a</event><event>Time:1.0-2.0,Des:b</event></think><answer>A</answer>");
    CHECK(p.chain.size() == 2);
    CHECK(p.has_diagnostic(DiagnosticKind::kOutOfOrder));
    CHECK_FALSE(p.tag_valid);
  }
  SUBCASE("(e) no answer block") {
    const auto p = parse_completion("<think><event>Time:1.0-2.0,Des:x</event></think>");
    CHECK(p.has_diagnostic(DiagnosticKind::kMissingAnswer));
    CHECK(tag_validity_indicator(p) == 0);
  }
  SUBCASE("(e) two answer blocks") {
    const auto p = parse_completion("<think><event>Time:1.0-2.0,Des:x</event></think><answer>A</answer><answer>B</answer>");
    CHECK(p.has_diagnostic(DiagnosticKind::kMultipleAnswers));
    CHECK(p.answer == std::optional<std::string>("A"));
  }
  SUBCASE("(e) unclosed answer") {
    const auto p = parse_completion("<think><event>Time:1.0-2.0,Des:x</event></think><answer>A");
    CHECK(p.has_diagnostic(DiagnosticKind::kUnclosedAnswer));
    CHECK_FALSE(p.answer.has_value());
  }
}

TEST_CASE("chain_length counts surviving events") {
  const std::string good = "<event>Time:1.0-2.0,Des:x</event>";
  CHECK(chain_length(parse_completion("<think>" + good + good + good + "</think><answer>A</answer>")) == 3);
  // five events, the third malformed and dropped
  const auto p = parse_completion("<think>" + good + good + "<event>Time:1.0 2.0,Des:x</event>" + good + good +
                                  "</think><answer>A</answer>");
  CHECK(chain_length(p) == 4);
  CHECK_FALSE(p.tag_valid);
}

TEST_CASE("serialize_event") {
  CHECK(serialize_event({0.0, 3.5, "a man opens the door"}) == "<event>Time:0.0-3.5,Des:a man opens the door</event>");
  CHECK(serialize_event({1.0, 1.0, "x"}) == "<event>Time:1.0-1.0,Des:x</event>");
  CHECK_THROWS_AS(serialize_event({2.0, 1.0, "x"}), Error);
  CHECK_THROWS_AS(serialize_event({0.0, 1.0, "   "}), Error);
  CHECK_THROWS_AS(serialize_event({-1.0, 1.0, "x"}), Error);
}

TEST_CASE("round-trip on fuzzed valid events and completions") {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const Event e = random_event(rng, 0.0);
    const auto p = parse_completion("<think>" + serialize_event(e) + "</think><answer>A</answer>");
    REQUIRE(p.chain.size() == 1);
    CHECK(p.chain[0] == e);
  }
  for (int i = 0; i < 200; ++i) {
    EventChain chain;
    double t = 0.0;
    const int n = 1 + static_cast<int>(rng.below(6));
    for (int k = 0; k < n; ++k) {
      chain.push_back(random_event(rng, t));
      t = chain.back().t_start;
    }
    const std::string text = serialize_completion(chain, "because w1 then w2", std::string("C"));
    const auto p = parse_completion(text);
    CHECK(p.tag_valid);
    CHECK(p.chain == chain);
    CHECK(serialize_completion(p.chain, p.reasoning_text, p.answer) == text);
  }
}

TEST_CASE("text outside tag regions does not change the parsed chain") {
  const std::string base = "<think><event>Time:1.0-2.0,Des:a b</event><event>Time:2.0-3.0,Des:c</event>ok</think><answer>A</answer>";
  const auto ref = parse_completion(base);
  const std::vector<std::string> junk = {"hello", "Time:9.9-1.0,Des:zzz", "12.5 - 3", "&&&", "Des:"};
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    std::string s = base;
    // insert before <think>, between events, or after </answer>
    const std::vector<std::size_t> spots = {0, base.find("<event>Time:2.0"), base.size()};
    const auto pos = spots[rng.below(spots.size())];
    s.insert(pos, junk[rng.below(junk.size())]);
    CHECK(parse_completion(s).chain == ref.chain);
  }
}

TEST_CASE("parser is total on arbitrary byte strings") {
  Rng rng(5);
  const std::string alphabet = "<>/eventanswrhikTimDs:,-.0123456789 ";
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    const auto len = rng.below(120);
    for (std::uint64_t k = 0; k < len; ++k) s.push_back(alphabet[rng.below(alphabet.size())]);
    const auto p = parse_completion(s);
    if (p.tag_valid) {
      CHECK(p.chain.size() >= 1);
      CHECK(p.answer.has_value());
    }
  }
}

TEST_CASE("diagnostics serialize to a JSON array") {
  const auto p = parse_completion("<event>Time:5.0-6.0,Des:a</event><event>Time:1.0-2.0,Des:b</event>");
  const auto j = diagnostics_to_json(p.diagnostics);
  REQUIRE(j.is_array());
  REQUIRE(j.size() >= 2);
  for (const auto& d : j) {
    CHECK(d.contains("rule"));
    CHECK(d.contains("position"));
    CHECK(d.contains("message"));
  }
}
