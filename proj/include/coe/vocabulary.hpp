#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace coe {

struct WorldConfig;

enum class TokenKind { kPad, kTag, kGlue, kTime, kSymbol, kLabel, kWord };

/// Token inventory shared by the world renderer and the policy. Built from a
/// world config so symbol, label and time-grid tokens match the world.
class Vocabulary {
 public:
  explicit Vocabulary(const WorldConfig& world);

  int size() const { return static_cast<int>(text_.size()); }
  const std::string& text(int id) const { return text_.at(static_cast<std::size_t>(id)); }
  TokenKind kind(int id) const { return kind_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find(std::string_view token) const;
  /// Throws kInvariantViolation for unknown tokens.
  int id(std::string_view token) const;

  int symbol(int s) const;
  int label(int index) const;
  /// Token for a grid-aligned time; throws if `t` is off-grid or out of range.
  int time(double t) const;
  std::optional<int> try_time(double t) const;
  std::optional<int> symbol_of(int id) const;

  /// Concatenation with a single space between adjacent word-like tokens.
  std::string detokenize(std::span<const int> ids) const;
  /// Greedy longest-match tokenization; whitespace separates tokens.
  std::optional<std::vector<int>> encode(std::string_view text) const;

  int pad = 0;
  int think_open = 0, think_close = 0;
  int event_open = 0, event_close = 0;
  int answer_open = 0, answer_close = 0;
  int time_prefix = 0, dash = 0, des_prefix = 0, frame_sep = 0;
  int next_word = 0;

 private:
  int add(std::string text, TokenKind kind);

  std::vector<std::string> text_;
  std::vector<TokenKind> kind_;
  std::unordered_map<std::string, int> index_;
  int first_symbol_ = 0, symbol_count_ = 0;
  int first_label_ = 0, label_count_ = 0;
  int first_time_ = 0, time_count_ = 0;
  double time_grid_ = 0.5;
  std::size_t longest_ = 0;
};

/// "s12" -> 12; anything else -> nullopt.
std::optional<int> parse_symbol_word(std::string_view word);
std::string symbol_word(int s);
std::string option_label(int index);

}  // namespace coe
