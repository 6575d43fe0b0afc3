#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace coe {

/// A timestamped event. `description` is an opaque whitespace-normalized
/// token string.
struct Event {
  double t_start = 0.0;
  double t_end = 0.0;
  std::string description;

  bool operator==(const Event&) const = default;
};

/// Throws ErrorKind::kInvariantViolation if `e` is not a valid event.
void validate_event(const Event& e);

/// Temporally ordered event list (non-decreasing start times).
using EventChain = std::vector<Event>;

bool is_chronological(const EventChain& chain);

/// Which completion-validity rule a diagnostic belongs to.
enum class DiagnosticKind {
  kUnclosedTag,       // (a) <event> without </event>, or a stray </event>
  kBadTimestamp,      // (b) unparsable / negative / inverted time range
  kMalformedEvent,    // (b) body does not match Time:..,Des:..
  kEmptyDescription,  // (b)
  kNoEvents,          // (c)
  kOutOfOrder,        // (d)
  kMissingAnswer,     // (e)
  kMultipleAnswers,   // (e)
  kUnclosedAnswer,    // (e)
  kEmptyAnswer,       // (e)
};

const char* to_string(DiagnosticKind kind);

/// Rule letter a..e the diagnostic falls under.
char rule_of(DiagnosticKind kind);

struct Diagnostic {
  DiagnosticKind kind;
  std::size_t position;  // byte offset into the raw text
  std::string message;

  bool operator==(const Diagnostic&) const = default;
};

struct ParsedCompletion {
  EventChain chain;
  std::string reasoning_text;
  std::optional<std::string> answer;
  bool tag_valid = false;
  std::string raw_text;
  std::vector<Diagnostic> diagnostics;

  bool has_diagnostic(DiagnosticKind kind) const;
};

/// Total parser for the completion grammar
///   <think> {<event>Time:a-b,Des:D</event>}* reasoning </think> <answer>X</answer>
/// Never throws; malformed input yields tag_valid == false plus diagnostics.
ParsedCompletion parse_completion(std::string_view text);

/// `<event>Time:{a}-{b},Des:{D}</event>` with one-decimal timestamps.
std::string serialize_event(const Event& e);

/// Canonical completion: think envelope holding the events followed by the
/// reasoning, then the answer block (omitted when `answer` is empty).
std::string serialize_completion(const EventChain& chain, std::string_view reasoning,
                                 const std::optional<std::string>& answer);

inline int tag_validity_indicator(const ParsedCompletion& parsed) { return parsed.tag_valid ? 1 : 0; }

inline std::size_t chain_length(const ParsedCompletion& parsed) { return parsed.chain.size(); }

/// [{rule, position, message}, ...]
nlohmann::json diagnostics_to_json(const std::vector<Diagnostic>& diagnostics);

/// Collapses whitespace runs to single spaces and trims both ends.
std::string normalize_whitespace(std::string_view s);

/// One decimal place, e.g. 3.5 -> "3.5".
std::string format_time(double t);

// json helpers shared by the dataset and eval writers
nlohmann::json to_json(const Event& e);
Event event_from_json(const nlohmann::json& j);

}  // namespace coe
