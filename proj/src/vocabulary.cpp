#include "coe/vocabulary.hpp"

#include <cctype>
#include <cmath>
#include <string>

#include "coe/error.hpp"
#include "coe/event_model.hpp"
#include "coe/symbolic_world.hpp"

namespace coe {

std::optional<int> parse_symbol_word(std::string_view word) {
  if (word.size() < 2 || word[0] != 's') return std::nullopt;
  int v = 0;
  for (std::size_t i = 1; i < word.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(word[i]))) return std::nullopt;
    if (v > 100'000'000) return std::nullopt;
    v = v * 10 + (word[i] - '0');
  }
  if (word.size() > 2 && word[1] == '0') return std::nullopt;
  return v;
}

std::string symbol_word(int s) { return "s" + std::to_string(s); }

std::string option_label(int index) {
  if (index < 0 || index >= 26) throw Error(ErrorKind::kInvariantViolation, "option index out of range");
  return std::string(1, static_cast<char>('A' + index));
}

int Vocabulary::add(std::string text, TokenKind kind) {
  const int id = size();
  if (!index_.emplace(text, id).second) throw Error(ErrorKind::kInvariantViolation, "duplicate token " + text);
  longest_ = std::max(longest_, text.size());
  text_.push_back(std::move(text));
  kind_.push_back(kind);
  return id;
}

Vocabulary::Vocabulary(const WorldConfig& world) : time_grid_(world.time_grid) {
  pad = add("<pad>", TokenKind::kPad);
  think_open = add("<think>", TokenKind::kTag);
  think_close = add("</think>", TokenKind::kTag);
  event_open = add("<event>", TokenKind::kTag);
  event_close = add("</event>", TokenKind::kTag);
  answer_open = add("<answer>", TokenKind::kTag);
  answer_close = add("</answer>", TokenKind::kTag);
  time_prefix = add("Time:", TokenKind::kGlue);
  dash = add("-", TokenKind::kGlue);
  des_prefix = add(",Des:", TokenKind::kGlue);
  frame_sep = add("|", TokenKind::kGlue);
  for (const char* w : {"what", "happens", "next", "?", "predict"}) add(w, TokenKind::kWord);
  next_word = id("next");

  first_label_ = size();
  label_count_ = world.option_count;
  for (int i = 0; i < label_count_; ++i) add(option_label(i), TokenKind::kLabel);

  first_time_ = size();
  time_count_ = static_cast<int>(std::llround(world.max_time() / world.time_grid)) + 1;
  for (int i = 0; i < time_count_; ++i) add(format_time(i * world.time_grid), TokenKind::kTime);

  first_symbol_ = size();
  symbol_count_ = world.lexicon_size();
  for (int s = 0; s < symbol_count_; ++s) add(symbol_word(s), TokenKind::kSymbol);
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(std::string_view token) const {
  if (auto v = find(token)) return *v;
  throw Error(ErrorKind::kInvariantViolation, "unknown token '" + std::string(token) + "'");
}

int Vocabulary::symbol(int s) const {
  if (s < 0 || s >= symbol_count_) throw Error(ErrorKind::kInvariantViolation, "symbol out of range");
  return first_symbol_ + s;
}

int Vocabulary::label(int index) const {
  if (index < 0 || index >= label_count_) throw Error(ErrorKind::kInvariantViolation, "label out of range");
  return first_label_ + index;
}

std::optional<int> Vocabulary::try_time(double t) const {
  const double k = t / time_grid_;
  const long long r = std::llround(k);
  if (std::abs(k - static_cast<double>(r)) > 1e-6 || r < 0 || r >= time_count_) return std::nullopt;
  return first_time_ + static_cast<int>(r);
}

int Vocabulary::time(double t) const {
  if (auto id = try_time(t)) return *id;
  throw Error(ErrorKind::kInvariantViolation, "time " + format_time(t) + " not on the token grid");
}

std::optional<int> Vocabulary::symbol_of(int id) const {
  if (id >= first_symbol_ && id < first_symbol_ + symbol_count_) return id - first_symbol_;
  return std::nullopt;
}

namespace {
bool word_like(TokenKind k) { return k == TokenKind::kSymbol || k == TokenKind::kLabel || k == TokenKind::kWord; }
}  // namespace

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  bool prev_word = false;
  for (int id : ids) {
    const TokenKind k = kind(id);
    if (prev_word && word_like(k)) out.push_back(' ');
    out += text(id);
    prev_word = word_like(k);
  }
  return out;
}

std::optional<std::vector<int>> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    std::optional<int> best;
    std::size_t best_len = 0;
    for (std::size_t len = std::min(longest_, text.size() - i); len > 0; --len) {
      if (auto v = find(text.substr(i, len))) {
        // word-like tokens must end at a word boundary ("s1" is not a prefix match of "s12")
        const char next = i + len < text.size() ? text[i + len] : ' ';
        const TokenKind k = kind(*v);
        const bool boundary = k == TokenKind::kSymbol ? !std::isdigit(static_cast<unsigned char>(next))
                              : word_like(k)          ? !std::isalnum(static_cast<unsigned char>(next))
                                                      : true;
        if (!boundary) continue;
        best = v;
        best_len = len;
        break;
      }
    }
    if (!best) return std::nullopt;
    out.push_back(*best);
    i += best_len;
  }
  return out;
}

}  // namespace coe
