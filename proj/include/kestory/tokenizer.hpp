#pragma once

// Byte-level byte-pair-encoding tokenizer.
//
// Id layout: 0..255 are the raw byte values, then the special tokens in
// registration order, then one id per learned merge. Ordinary token strings use
// the usual printable byte-to-codepoint mapping so the JSON form is valid UTF-8.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kestory/error.hpp"
#include "kestory/rng.hpp"

namespace kestory {

using TokenId = std::int32_t;

inline constexpr std::string_view kEndOfText = "<|endoftext|>";
inline constexpr std::string_view kPadding = "<|pad|>";
inline constexpr std::string_view kMale = "[MALE]";
inline constexpr std::string_view kFemale = "[FEMALE]";
inline constexpr std::string_view kNeutral = "[NEUTRAL]";

inline std::vector<std::string> default_special_tokens() {
  return {std::string(kEndOfText), std::string(kPadding), std::string(kMale), std::string(kFemale),
          std::string(kNeutral)};
}

namespace detail {

// Byte -> code point table; printable Latin-1 bytes map to themselves, the rest
// are shifted above 255.
inline const std::array<char32_t, 256>& byte_to_codepoint() {
  static const std::array<char32_t, 256> table = [] {
    std::array<char32_t, 256> t{};
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) t[b] = direct[b] ? static_cast<char32_t>(b) : next++;
    return t;
  }();
  return table;
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string byte_symbol(unsigned char b) {
  std::string s;
  append_utf8(s, byte_to_codepoint()[b]);
  return s;
}

// Inverse of the byte mapping applied to a whole token string. Returns nullopt
// for strings that are not a concatenation of byte symbols.
inline std::optional<std::string> symbols_to_bytes(std::string_view s) {
  static const std::unordered_map<char32_t, unsigned char> inverse = [] {
    std::unordered_map<char32_t, unsigned char> m;
    for (int b = 0; b < 256; ++b) m.emplace(byte_to_codepoint()[b], static_cast<unsigned char>(b));
    return m;
  }();
  std::string out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c0 = static_cast<unsigned char>(s[i]);
    char32_t cp;
    std::size_t len;
    if (c0 < 0x80) {
      cp = c0;
      len = 1;
    } else if ((c0 & 0xE0) == 0xC0) {
      len = 2;
      cp = c0 & 0x1F;
    } else if ((c0 & 0xF0) == 0xE0) {
      len = 3;
      cp = c0 & 0x0F;
    } else {
      return std::nullopt;
    }
    if (i + len > s.size()) return std::nullopt;
    for (std::size_t k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    auto it = inverse.find(cp);
    if (it == inverse.end()) return std::nullopt;
    out.push_back(static_cast<char>(it->second));
    i += len;
  }
  return out;
}

enum class CharClass { Space, Letter, Digit, Other };

inline CharClass classify(unsigned char c) {
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return CharClass::Space;
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80) return CharClass::Letter;
  if (c >= '0' && c <= '9') return CharClass::Digit;
  return CharClass::Other;
}

// Whitespace-aware pre-split: a chunk is an optional single leading space plus
// a maximal run of one character class, or a whitespace run that leaves its
// final space to the following word.
inline std::vector<std::string_view> pre_split(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const std::size_t start = i;
    auto cls = classify(static_cast<unsigned char>(text[i]));
    if (cls == CharClass::Space) {
      if (text[i] == ' ' && i + 1 < n && classify(static_cast<unsigned char>(text[i + 1])) != CharClass::Space) {
        ++i;
        cls = classify(static_cast<unsigned char>(text[i]));
      } else {
        std::size_t j = i;
        while (j < n && classify(static_cast<unsigned char>(text[j])) == CharClass::Space) ++j;
        if (j < n && j - i > 1 && text[j - 1] == ' ') --j;
        chunks.push_back(text.substr(start, j - start));
        i = j;
        continue;
      }
    }
    while (i < n && classify(static_cast<unsigned char>(text[i])) == cls) ++i;
    chunks.push_back(text.substr(start, i - start));
  }
  return chunks;
}

}  // namespace detail

class TokenizerModel {
 public:
  TokenizerModel() : TokenizerModel(default_special_tokens(), {}) {}

  // Builds a model from special tokens and an ordered merge list; merges refer
  // to token strings already present when they are applied.
  TokenizerModel(std::vector<std::string> specials, const std::vector<std::pair<std::string, std::string>>& merges)
      : specials_(std::move(specials)) {
    for (int b = 0; b < 256; ++b) add_token(detail::byte_symbol(static_cast<unsigned char>(b)));
    for (const auto& s : specials_) {
      if (s.empty()) throw ConfigError("special token must be non-empty");
      if (vocab_.count(s)) throw ConfigError("special token collides with a byte symbol: " + s);
      special_ids_.emplace(s, static_cast<TokenId>(tokens_.size()));
      add_token(s);
    }
    for (const auto& [a, b] : merges) {
      auto ia = vocab_.find(a);
      auto ib = vocab_.find(b);
      if (ia == vocab_.end() || ib == vocab_.end()) throw ConfigError("merge refers to unknown token: " + a + " " + b);
      if (is_special(ia->second) || is_special(ib->second)) throw ConfigError("merge uses a special token");
      const std::string merged = a + b;
      // Two different pairs may spell the same string; they share one id.
      auto existing = vocab_.find(merged);
      if (existing != vocab_.end() && is_special(existing->second)) throw ConfigError("merge produces a special token");
      const TokenId result = existing != vocab_.end() ? existing->second : static_cast<TokenId>(tokens_.size());
      if (!merge_rank_.emplace(pair_key(ia->second, ib->second),
                               MergeEntry{static_cast<std::uint32_t>(merges_.size()), result})
               .second) {
        throw ConfigError("duplicate merge: " + a + " " + b);
      }
      merges_.emplace_back(a, b);
      if (existing == vocab_.end()) add_token(merged);
    }
  }

  std::size_t vocab_size() const noexcept { return tokens_.size(); }
  const std::vector<std::pair<std::string, std::string>>& merges() const noexcept { return merges_; }
  const std::vector<std::string>& specials() const noexcept { return specials_; }
  const std::string& token_string(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::optional<TokenId> token_id(std::string_view token) const {
    auto it = vocab_.find(std::string(token));
    if (it == vocab_.end()) return std::nullopt;
    return it->second;
  }

  bool is_special(TokenId id) const {
    return id >= 256 && static_cast<std::size_t>(id) < 256 + specials_.size();
  }

  TokenId special_id(std::string_view name) const {
    auto it = special_ids_.find(std::string(name));
    if (it == special_ids_.end()) throw ConfigError("tokenizer has no special token " + std::string(name));
    return it->second;
  }

  TokenId eot_id() const { return special_id(kEndOfText); }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t i = 0;
    std::size_t plain_start = 0;
    while (i < text.size()) {
      if (auto sp = match_special(text, i)) {
        encode_plain(text.substr(plain_start, i - plain_start), out);
        out.push_back(sp->first);
        i += sp->second;
        plain_start = i;
      } else {
        ++i;
      }
    }
    encode_plain(text.substr(plain_start), out);
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (std::size_t pos = 0; pos < ids.size(); ++pos) {
      const TokenId id = ids[pos];
      if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw DecodeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(tokens_.size()),
                          pos);
      }
      out += bytes_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["vocab"] = tokens_;
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) merges.push_back({a, b});
    j["merges"] = std::move(merges);
    j["specials"] = specials_;
    return j;
  }

  static TokenizerModel from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("merges") || !j.contains("specials") || !j.contains("vocab")) {
      throw ParseError("tokenizer JSON needs vocab, merges and specials");
    }
    std::vector<std::pair<std::string, std::string>> merges;
    for (const auto& m : j.at("merges")) {
      if (!m.is_array() || m.size() != 2) throw ParseError("merge entries must be two-element arrays");
      merges.emplace_back(m[0].get<std::string>(), m[1].get<std::string>());
    }
    TokenizerModel model(j.at("specials").get<std::vector<std::string>>(), merges);
    if (j.at("vocab").get<std::vector<std::string>>() != model.tokens_) {
      throw ParseError("tokenizer vocab does not match its merges and specials");
    }
    return model;
  }

  // Stable content hash of the canonical JSON form.
  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + path);
    f << to_json().dump(1) << '\n';
  }

  static TokenizerModel load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": " + e.what());
    }
    return from_json(j);
  }

  friend bool operator==(const TokenizerModel& a, const TokenizerModel& b) {
    return a.specials_ == b.specials_ && a.merges_ == b.merges_;
  }

 private:
  struct MergeEntry {
    std::uint32_t rank;
    TokenId result;
  };

  static std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

  void add_token(const std::string& s) {
    vocab_.emplace(s, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(s);
    if (special_ids_.count(s)) {
      bytes_.push_back(s);
    } else {
      auto raw = detail::symbols_to_bytes(s);
      if (!raw) throw ConfigError("token is not made of byte symbols: " + s);
      bytes_.push_back(std::move(*raw));
    }
  }

  // Longest special token starting at `pos`, as (id, length).
  std::optional<std::pair<TokenId, std::size_t>> match_special(std::string_view text, std::size_t pos) const {
    std::optional<std::pair<TokenId, std::size_t>> best;
    for (const auto& [s, id] : special_ids_) {
      if (text.compare(pos, s.size(), s) == 0 && (!best || s.size() > best->second)) best = {id, s.size()};
    }
    return best;
  }

  void encode_plain(std::string_view text, std::vector<TokenId>& out) const {
    for (auto chunk : detail::pre_split(text)) {
      std::vector<TokenId> word;
      word.reserve(chunk.size());
      for (unsigned char c : chunk) word.push_back(static_cast<TokenId>(c));
      // Repeatedly merge the lowest-ranked adjacent pair.
      while (word.size() > 1) {
        std::uint32_t best_rank = UINT32_MAX;
        std::size_t best_pos = 0;
        TokenId best_result = 0;
        for (std::size_t k = 0; k + 1 < word.size(); ++k) {
          auto it = merge_rank_.find(pair_key(word[k], word[k + 1]));
          if (it != merge_rank_.end() && it->second.rank < best_rank) {
            best_rank = it->second.rank;
            best_pos = k;
            best_result = it->second.result;
          }
        }
        if (best_rank == UINT32_MAX) break;
        const TokenId a = word[best_pos];
        const TokenId b = word[best_pos + 1];
        std::vector<TokenId> next;
        next.reserve(word.size());
        for (std::size_t k = 0; k < word.size(); ++k) {
          if (k + 1 < word.size() && word[k] == a && word[k + 1] == b) {
            next.push_back(best_result);
            ++k;
          } else {
            next.push_back(word[k]);
          }
        }
        word = std::move(next);
      }
      out.insert(out.end(), word.begin(), word.end());
    }
  }

  std::vector<std::string> specials_;
  std::vector<std::string> tokens_;
  std::vector<std::string> bytes_;
  std::unordered_map<std::string, TokenId> vocab_;
  std::map<std::string, TokenId> special_ids_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::uint64_t, MergeEntry> merge_rank_;
};

// Learns merges until the vocabulary reaches `target_vocab_size` or no
// adjacent pair is left in the corpus. Ties between equally frequent pairs go to
// the lexicographically smallest (left, right) token-string pair.
inline TokenizerModel train_bpe(const std::vector<std::string>& corpus, std::size_t target_vocab_size,
                                std::vector<std::string> specials = default_special_tokens()) {
  if (corpus.empty()) throw ConfigError("train_bpe: corpus is empty");
  const std::size_t base = 256 + specials.size();
  if (target_vocab_size <= base) {
    throw ConfigError("train_bpe: target vocabulary size " + std::to_string(target_vocab_size) +
                      " must exceed the base alphabet plus specials (" + std::to_string(base) + ")");
  }

  // Word frequencies over pre-split chunks, with special tokens cut out so they
  // never participate in a merge.
  std::map<std::string, std::size_t> word_counts;
  for (const auto& doc : corpus) {
    std::string_view text(doc);
    std::size_t plain_start = 0;
    std::size_t i = 0;
    auto flush = [&](std::size_t end) {
      for (auto chunk : detail::pre_split(text.substr(plain_start, end - plain_start))) ++word_counts[std::string(chunk)];
    };
    while (i < text.size()) {
      std::size_t matched = 0;
      for (const auto& s : specials) {
        if (text.compare(i, s.size(), s) == 0) matched = std::max(matched, s.size());
      }
      if (matched) {
        flush(i);
        i += matched;
        plain_start = i;
      } else {
        ++i;
      }
    }
    flush(text.size());
  }

  std::vector<std::string> symbols;  // token string per id, for tie-breaking
  for (int b = 0; b < 256; ++b) symbols.push_back(detail::byte_symbol(static_cast<unsigned char>(b)));
  for (const auto& s : specials) symbols.push_back(s);

  struct Word {
    std::vector<TokenId> ids;
    std::size_t count;
  };
  std::vector<Word> words;
  for (const auto& [w, c] : word_counts) {
    Word word{{}, c};
    for (unsigned char ch : w) word.ids.push_back(static_cast<TokenId>(ch));
    words.push_back(std::move(word));
  }

  std::vector<std::pair<std::string, std::string>> merges;
  while (symbols.size() < target_vocab_size) {
    std::map<std::pair<TokenId, TokenId>, std::size_t> pair_counts;
    for (const auto& w : words) {
      for (std::size_t k = 0; k + 1 < w.ids.size(); ++k) pair_counts[{w.ids[k], w.ids[k + 1]}] += w.count;
    }
    const std::pair<TokenId, TokenId>* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [p, c] : pair_counts) {
      const std::string merged = symbols[p.first] + symbols[p.second];
      if (std::find(specials.begin(), specials.end(), merged) != specials.end()) continue;
      if (c > best_count ||
          (c == best_count && best &&
           std::tie(symbols[p.first], symbols[p.second]) < std::tie(symbols[best->first], symbols[best->second]))) {
        best = &p;
        best_count = c;
      }
    }
    if (!best) break;
    const auto [a, b] = *best;
    const std::string merged = symbols[a] + symbols[b];
    auto existing = std::find(symbols.begin(), symbols.end(), merged);
    const auto merged_id = static_cast<TokenId>(existing - symbols.begin());
    merges.emplace_back(symbols[a], symbols[b]);
    if (existing == symbols.end()) symbols.push_back(merged);
    for (auto& w : words) {
      std::vector<TokenId> next;
      next.reserve(w.ids.size());
      for (std::size_t k = 0; k < w.ids.size(); ++k) {
        if (k + 1 < w.ids.size() && w.ids[k] == a && w.ids[k + 1] == b) {
          next.push_back(merged_id);
          ++k;
        } else {
          next.push_back(w.ids[k]);
        }
      }
      w.ids = std::move(next);
    }
  }
  return TokenizerModel(std::move(specials), merges);
}

}  // namespace kestory
