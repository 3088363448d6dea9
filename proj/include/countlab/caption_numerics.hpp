#pragma once

// Spelled-number parsing, counting-candidacy, counterfactual and
// evaluation-variant captions.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "countlab/errors.hpp"
#include "countlab/rng.hpp"

namespace countlab {

/// The nine spelled counts. The enumerator value is the numeric meaning.
enum class NumberWord : int {
  two = 2,
  three = 3,
  four = 4,
  five = 5,
  six = 6,
  seven = 7,
  eight = 8,
  nine = 9,
  ten = 10,
};

inline constexpr int kMinNumber = 2;
inline constexpr int kMaxNumber = 10;
inline constexpr std::size_t kNumberCount = 9;

inline constexpr std::array<std::string_view, kNumberCount> kNumberSpellings = {
    "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"};

constexpr int value_of(NumberWord n) { return static_cast<int>(n); }

/// Index in [0, 9): value - 2.
constexpr std::size_t slot_of(NumberWord n) { return static_cast<std::size_t>(value_of(n) - kMinNumber); }

constexpr std::string_view spelling_of(NumberWord n) { return kNumberSpellings[slot_of(n)]; }

inline NumberWord number_from_value(int value) {
  if (value < kMinNumber || value > kMaxNumber) {
    throw UsageError("number value out of range [2,10]: " + std::to_string(value));
  }
  return static_cast<NumberWord>(value);
}

constexpr NumberWord number_from_slot(std::size_t slot) {
  return static_cast<NumberWord>(static_cast<int>(slot) + kMinNumber);
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// Exact, case-sensitive lookup on an already lower-cased token.
inline std::optional<NumberWord> parse_number_word(std::string_view lower_token) {
  for (std::size_t i = 0; i < kNumberCount; ++i) {
    if (kNumberSpellings[i] == lower_token) return number_from_slot(i);
  }
  return std::nullopt;
}

/// A whitespace-delimited token with leading/trailing ASCII punctuation
/// stripped. `begin`/`end` locate the stripped text inside the source string.
struct Token {
  std::string text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Splits on whitespace and strips punctuation from both ends of each piece.
/// Pieces that are pure punctuation produce no token.
inline std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t i = 0;
  const std::size_t n = text.size();
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  auto is_punct = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
  while (i < n) {
    while (i < n && is_space(text[i])) ++i;
    std::size_t start = i;
    while (i < n && !is_space(text[i])) ++i;
    std::size_t stop = i;
    while (start < stop && is_punct(text[start])) ++start;
    while (stop > start && is_punct(text[stop - 1])) --stop;
    if (stop > start) {
      tokens.push_back(Token{std::string(text.substr(start, stop - start)), start, stop});
    }
  }
  return tokens;
}

struct NumberOccurrence {
  NumberWord number;
  std::size_t token_index;

  bool operator==(const NumberOccurrence&) const = default;
};

/// Every case-insensitive whole-token match of the nine number words, in order.
inline std::vector<NumberOccurrence> extract_spelled_numbers(std::string_view text) {
  std::vector<NumberOccurrence> found;
  const auto tokens = tokenize(text);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (auto n = parse_number_word(to_lower(tokens[i].text))) found.push_back({*n, i});
  }
  return found;
}

struct CaptionRecord {
  std::string id;
  std::string text;
  std::vector<NumberOccurrence> occurrences;

  static CaptionRecord make(std::string id, std::string text) {
    CaptionRecord r{std::move(id), std::move(text), {}};
    r.occurrences = extract_spelled_numbers(r.text);
    return r;
  }
};

/// Stoplist of quantity words that disqualify a number within `window`
/// tokens on either side ("a couple of two birds").
struct AmountModifierRule {
  std::vector<std::string> words = {"couple", "couples", "pair", "pairs", "dozen", "dozens", "few"};
  std::size_t window = 2;
};

enum class Candidacy {
  candidate,
  no_spelled_number,
  multiple_numbers,
  amount_modifier,
};

/// Candidacy with the first failing check, in the order listed by `Candidacy`.
inline Candidacy classify_candidacy(const CaptionRecord& record, const AmountModifierRule& rule = {}) {
  if (record.occurrences.empty()) return Candidacy::no_spelled_number;
  if (record.occurrences.size() > 1) return Candidacy::multiple_numbers;
  const auto tokens = tokenize(record.text);
  const std::size_t at = record.occurrences.front().token_index;
  const std::size_t lo = at >= rule.window ? at - rule.window : 0;
  const std::size_t hi = std::min(tokens.size(), at + rule.window + 1);
  for (std::size_t i = lo; i < hi; ++i) {
    if (i == at) continue;
    const std::string lower = to_lower(tokens[i].text);
    if (std::find(rule.words.begin(), rule.words.end(), lower) != rule.words.end()) {
      return Candidacy::amount_modifier;
    }
  }
  return Candidacy::candidate;
}

inline bool is_counting_candidate(const CaptionRecord& record, const AmountModifierRule& rule = {}) {
  return classify_candidacy(record, rule) == Candidacy::candidate;
}

namespace detail {

enum class CasePattern { lower, capitalized, upper };

inline CasePattern case_pattern(std::string_view token) {
  bool all_upper = true;
  bool any_alpha = false;
  for (char c : token) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      any_alpha = true;
      if (!std::isupper(static_cast<unsigned char>(c))) all_upper = false;
    }
  }
  if (any_alpha && all_upper && token.size() > 1) return CasePattern::upper;
  if (!token.empty() && std::isupper(static_cast<unsigned char>(token.front()))) return CasePattern::capitalized;
  return CasePattern::lower;
}

inline std::string apply_case(std::string_view lower_word, CasePattern pattern) {
  std::string out(lower_word);
  if (pattern == CasePattern::upper) {
    for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  } else if (pattern == CasePattern::capitalized && !out.empty()) {
    out.front() = static_cast<char>(std::toupper(static_cast<unsigned char>(out.front())));
  }
  return out;
}

/// Replaces the single number token of a candidate with `replacement`,
/// keeping every other byte of the caption.
inline std::string swap_number(const CaptionRecord& record, NumberWord replacement) {
  const auto tokens = tokenize(record.text);
  const Token& tok = tokens.at(record.occurrences.front().token_index);
  std::string out = record.text.substr(0, tok.begin);
  out += apply_case(spelling_of(replacement), case_pattern(tok.text));
  out += record.text.substr(tok.end);
  return out;
}

inline void require_candidate(const CaptionRecord& record, const AmountModifierRule& rule, const char* op) {
  if (!is_counting_candidate(record, rule)) {
    throw UsageError(std::string(op) + ": caption is not a counting candidate: \"" + record.text + "\"");
  }
}

}  // namespace detail

struct CounterfactualCaption {
  std::string text;
  NumberWord original_number;
  NumberWord swapped_number;
};

/// Swaps the caption's number for one drawn uniformly from the other eight.
inline CounterfactualCaption make_counterfactual(const CaptionRecord& record, Rng& rng,
                                                 const AmountModifierRule& rule = {}) {
  detail::require_candidate(record, rule, "make_counterfactual");
  const NumberWord original = record.occurrences.front().number;
  std::size_t pick = static_cast<std::size_t>(rng.below(kNumberCount - 1));
  if (pick >= slot_of(original)) ++pick;
  const NumberWord swapped = number_from_slot(pick);
  return {detail::swap_number(record, swapped), original, swapped};
}

/// The nine captions obtained by substituting each number word, ascending by
/// value; element (value - 2) is the original text.
inline std::array<std::string, kNumberCount> enumerate_caption_variants(const CaptionRecord& record,
                                                                       const AmountModifierRule& rule = {}) {
  detail::require_candidate(record, rule, "enumerate_caption_variants");
  std::array<std::string, kNumberCount> out;
  for (std::size_t s = 0; s < kNumberCount; ++s) out[s] = detail::swap_number(record, number_from_slot(s));
  return out;
}

}  // namespace countlab
