#include "coe/event_model.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "coe/error.hpp"

namespace coe {
namespace {

constexpr std::string_view kThinkOpen = "<think>";
constexpr std::string_view kThinkClose = "</think>";
constexpr std::string_view kEventOpen = "<event>";
constexpr std::string_view kEventClose = "</event>";
constexpr std::string_view kAnswerOpen = "<answer>";
constexpr std::string_view kAnswerClose = "</answer>";

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

void skip_spaces(std::string_view s, std::size_t& i) {
  while (i < s.size() && is_space(s[i])) ++i;
}

bool consume(std::string_view s, std::size_t& i, std::string_view lit) {
  if (s.substr(i, lit.size()) == lit) {
    i += lit.size();
    return true;
  }
  return false;
}

// Non-negative decimal: digits [. digits] or . digits
std::optional<double> parse_decimal(std::string_view s, std::size_t& i) {
  const std::size_t begin = i;
  std::size_t int_digits = 0;
  while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
    ++i;
    ++int_digits;
  }
  std::size_t frac_digits = 0;
  if (i < s.size() && s[i] == '.') {
    ++i;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
      ++i;
      ++frac_digits;
    }
  }
  if (int_digits + frac_digits == 0) {
    i = begin;
    return std::nullopt;
  }
  const std::string buf(s.substr(begin, i - begin));
  const double v = std::strtod(buf.c_str(), nullptr);
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

struct BodyResult {
  std::optional<Event> event;
  std::optional<Diagnostic> error;
};

BodyResult parse_event_body(std::string_view body, std::size_t offset) {
  auto fail = [&](DiagnosticKind kind, std::string msg) {
    return BodyResult{std::nullopt, Diagnostic{kind, offset, std::move(msg)}};
  };
  std::size_t i = 0;
  skip_spaces(body, i);
  if (!consume(body, i, "Time:")) return fail(DiagnosticKind::kMalformedEvent, "expected 'Time:'");
  skip_spaces(body, i);
  const auto t0 = parse_decimal(body, i);
  if (!t0) return fail(DiagnosticKind::kBadTimestamp, "unparsable start timestamp");
  skip_spaces(body, i);
  if (!consume(body, i, "-")) return fail(DiagnosticKind::kBadTimestamp, "expected '-' between timestamps");
  skip_spaces(body, i);
  const auto t1 = parse_decimal(body, i);
  if (!t1) return fail(DiagnosticKind::kBadTimestamp, "unparsable end timestamp");
  skip_spaces(body, i);
  if (!consume(body, i, ",")) return fail(DiagnosticKind::kMalformedEvent, "expected ',Des:'");
  skip_spaces(body, i);
  if (!consume(body, i, "Des:")) return fail(DiagnosticKind::kMalformedEvent, "expected ',Des:'");
  const std::string_view rest = body.substr(i);
  if (rest.find_first_of("<>") != std::string_view::npos) {
    return fail(DiagnosticKind::kMalformedEvent, "tag characters inside description");
  }
  if (*t0 > *t1) return fail(DiagnosticKind::kBadTimestamp, "start after end");
  std::string desc = normalize_whitespace(rest);
  if (desc.empty()) return fail(DiagnosticKind::kEmptyDescription, "empty description");
  return BodyResult{Event{*t0, *t1, std::move(desc)}, std::nullopt};
}

struct Span {
  std::size_t begin;
  std::size_t end;  // one past the closing tag
};

}  // namespace

const char* to_string(DiagnosticKind kind) {
  switch (kind) {
    case DiagnosticKind::kUnclosedTag: return "unclosed-tag";
    case DiagnosticKind::kBadTimestamp: return "bad-timestamp";
    case DiagnosticKind::kMalformedEvent: return "malformed-event";
    case DiagnosticKind::kEmptyDescription: return "empty-description";
    case DiagnosticKind::kNoEvents: return "no-events";
    case DiagnosticKind::kOutOfOrder: return "out-of-order";
    case DiagnosticKind::kMissingAnswer: return "missing-answer";
    case DiagnosticKind::kMultipleAnswers: return "multiple-answers";
    case DiagnosticKind::kUnclosedAnswer: return "unclosed-answer";
    case DiagnosticKind::kEmptyAnswer: return "empty-answer";
  }
  return "unknown";
}

char rule_of(DiagnosticKind kind) {
  switch (kind) {
    case DiagnosticKind::kUnclosedTag: return 'a';
    case DiagnosticKind::kBadTimestamp:
    case DiagnosticKind::kMalformedEvent:
    case DiagnosticKind::kEmptyDescription: return 'b';
    case DiagnosticKind::kNoEvents: return 'c';
    case DiagnosticKind::kOutOfOrder: return 'd';
    case DiagnosticKind::kMissingAnswer:
    case DiagnosticKind::kMultipleAnswers:
    case DiagnosticKind::kUnclosedAnswer:
    case DiagnosticKind::kEmptyAnswer: return 'e';
  }
  return '?';
}

void validate_event(const Event& e) {
  if (!std::isfinite(e.t_start) || !std::isfinite(e.t_end) || e.t_start < 0.0) {
    throw Error(ErrorKind::kInvariantViolation, "event timestamps must be finite and non-negative");
  }
  if (e.t_start > e.t_end) throw Error(ErrorKind::kInvariantViolation, "event t_start > t_end");
  if (trim(e.description).empty()) throw Error(ErrorKind::kInvariantViolation, "empty event description");
  if (e.description.find_first_of("<>") != std::string::npos) {
    throw Error(ErrorKind::kInvariantViolation, "event description contains tag characters");
  }
}

bool is_chronological(const EventChain& chain) {
  for (std::size_t i = 1; i < chain.size(); ++i) {
    if (chain[i - 1].t_start > chain[i].t_start) return false;
  }
  return true;
}

bool ParsedCompletion::has_diagnostic(DiagnosticKind kind) const {
  for (const auto& d : diagnostics) {
    if (d.kind == kind) return true;
  }
  return false;
}

std::string normalize_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char c : s) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::string format_time(double t) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f", t);
  return buf;
}

std::string serialize_event(const Event& e) {
  validate_event(e);
  std::string out(kEventOpen);
  out += "Time:";
  out += format_time(e.t_start);
  out += '-';
  out += format_time(e.t_end);
  out += ",Des:";
  out += normalize_whitespace(e.description);
  out += kEventClose;
  return out;
}

std::string serialize_completion(const EventChain& chain, std::string_view reasoning,
                                 const std::optional<std::string>& answer) {
  std::string out(kThinkOpen);
  for (const auto& e : chain) out += serialize_event(e);
  out += normalize_whitespace(reasoning);
  out += kThinkClose;
  if (answer) {
    out += kAnswerOpen;
    out += normalize_whitespace(*answer);
    out += kAnswerClose;
  }
  return out;
}

ParsedCompletion parse_completion(std::string_view text) {
  ParsedCompletion out;
  out.raw_text = std::string(text);
  auto& diags = out.diagnostics;

  // Answer blocks: rule (e) wants exactly one closed, non-empty block.
  std::vector<Span> answer_spans;
  std::size_t well_formed = 0;
  for (std::size_t pos = text.find(kAnswerOpen); pos != std::string_view::npos;) {
    const std::size_t body = pos + kAnswerOpen.size();
    const std::size_t close = text.find(kAnswerClose, body);
    const std::size_t next_open = text.find(kAnswerOpen, body);
    if (close == std::string_view::npos || (next_open != std::string_view::npos && next_open < close)) {
      diags.push_back({DiagnosticKind::kUnclosedAnswer, pos, "<answer> without </answer>"});
      pos = next_open;
      continue;
    }
    answer_spans.push_back({pos, close + kAnswerClose.size()});
    std::string content = normalize_whitespace(text.substr(body, close - body));
    if (content.empty()) {
      diags.push_back({DiagnosticKind::kEmptyAnswer, pos, "empty answer block"});
    } else {
      ++well_formed;
      if (!out.answer) out.answer = std::move(content);
    }
    pos = text.find(kAnswerOpen, close + kAnswerClose.size());
  }
  if (answer_spans.size() > 1) {
    diags.push_back({DiagnosticKind::kMultipleAnswers, answer_spans[1].begin, "more than one <answer> block"});
  } else if (well_formed == 0 && diags.empty()) {
    diags.push_back({DiagnosticKind::kMissingAnswer, text.size(), "no <answer> block"});
  }

  // Events.
  std::vector<Span> event_spans;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t open = text.find(kEventOpen, pos);
    const std::size_t stray_close = text.find(kEventClose, pos);
    if (stray_close != std::string_view::npos && (open == std::string_view::npos || stray_close < open)) {
      diags.push_back({DiagnosticKind::kUnclosedTag, stray_close, "</event> without matching <event>"});
      pos = stray_close + kEventClose.size();
      continue;
    }
    if (open == std::string_view::npos) break;
    const std::size_t body = open + kEventOpen.size();
    const std::size_t close = text.find(kEventClose, body);
    const std::size_t next_open = text.find(kEventOpen, body);
    if (close == std::string_view::npos || (next_open != std::string_view::npos && next_open < close)) {
      diags.push_back({DiagnosticKind::kUnclosedTag, open, "<event> without matching </event>"});
      pos = body;
      continue;
    }
    const Span span{open, close + kEventClose.size()};
    event_spans.push_back(span);
    auto parsed = parse_event_body(text.substr(body, close - body), open);
    if (parsed.event) {
      out.chain.push_back(std::move(*parsed.event));
    } else {
      diags.push_back(std::move(*parsed.error));
    }
    pos = span.end;
  }

  if (out.chain.empty()) diags.push_back({DiagnosticKind::kNoEvents, 0, "no well-formed events"});
  for (std::size_t i = 1; i < out.chain.size(); ++i) {
    if (out.chain[i - 1].t_start > out.chain[i].t_start) {
      diags.push_back({DiagnosticKind::kOutOfOrder, 0,
                       "event " + std::to_string(i) + " starts before event " + std::to_string(i - 1)});
      break;
    }
  }

  // Reasoning: the think envelope (or the pre-answer text) with events cut out.
  std::size_t r_begin = 0;
  std::size_t r_end = answer_spans.empty() ? text.size() : answer_spans.front().begin;
  if (const auto t = text.find(kThinkOpen); t != std::string_view::npos && t < r_end) {
    r_begin = t + kThinkOpen.size();
    if (const auto c = text.find(kThinkClose, r_begin); c != std::string_view::npos && c <= r_end) r_end = c;
  }
  std::string reasoning;
  std::size_t cursor = r_begin;
  for (const auto& s : event_spans) {
    if (s.end <= cursor || s.begin >= r_end) continue;
    if (s.begin > cursor) {
      reasoning += text.substr(cursor, s.begin - cursor);
      reasoning += ' ';
    }
    cursor = s.end;
  }
  if (cursor < r_end) reasoning += text.substr(cursor, r_end - cursor);
  out.reasoning_text = normalize_whitespace(reasoning);

  out.tag_valid = diags.empty() && !out.chain.empty() && out.answer.has_value();
  return out;
}

nlohmann::json diagnostics_to_json(const std::vector<Diagnostic>& diagnostics) {
  auto arr = nlohmann::json::array();
  for (const auto& d : diagnostics) {
    arr.push_back({{"rule", std::string(1, rule_of(d.kind)) + ":" + to_string(d.kind)},
                   {"position", d.position},
                   {"message", d.message}});
  }
  return arr;
}

nlohmann::json to_json(const Event& e) {
  return {{"t_start", e.t_start}, {"t_end", e.t_end}, {"description", e.description}};
}

Event event_from_json(const nlohmann::json& j) {
  return Event{j.at("t_start").get<double>(), j.at("t_end").get<double>(), j.at("description").get<std::string>()};
}

}  // namespace coe
