#pragma once

// Story corpus: segmentation, name delexicalization, and the fake-story
// constructors for the multi-task classification data.

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kestory/error.hpp"
#include "kestory/knowledge.hpp"
#include "kestory/rng.hpp"
#include "kestory/tokenizer.hpp"

namespace kestory {

inline constexpr std::size_t kDefaultContinuation = 4;

struct Story {
  std::string id;
  std::vector<std::string> sentences;

  const std::string& context() const { return sentences.at(0); }
  std::string text() const {
    std::string s;
    for (const auto& x : sentences) {
      if (!s.empty()) s += ' ';
      s += x;
    }
    return s;
  }
  friend bool operator==(const Story&, const Story&) = default;
};

struct StoryExample {
  std::string context;
  std::vector<std::string> continuation;
};

inline StoryExample split_example(const Story& s) {
  if (s.sentences.empty()) throw ConfigError("story " + s.id + " has no sentences");
  return {s.sentences.front(), {s.sentences.begin() + 1, s.sentences.end()}};
}

enum class StoryLabel { D1 = 0, D2 = 1, D3 = 2, D4 = 3 };
inline constexpr std::size_t kNumStoryLabels = 4;

inline std::string to_string(StoryLabel l) {
  static const std::array<const char*, 4> names{"D1", "D2", "D3", "D4"};
  return names[static_cast<std::size_t>(l)];
}

inline StoryLabel parse_story_label(std::string_view s) {
  for (std::size_t i = 0; i < kNumStoryLabels; ++i) {
    if (to_string(static_cast<StoryLabel>(i)) == s) return static_cast<StoryLabel>(i);
  }
  throw ParseError("unknown story label '" + std::string(s) + "'");
}

struct LabeledStory {
  std::string origin_id;
  StoryLabel label = StoryLabel::D1;
  std::vector<std::string> sentences;
  std::vector<TokenId> tokens;  // empty until tokenized

  std::string text() const { return Story{origin_id, sentences}.text(); }
};

inline bool is_terminal(char c) { return c == '.' || c == '!' || c == '?'; }

// Splits on '.', '!' or '?' followed by whitespace or end of text. Terminal
// punctuation stays with its sentence; a trailing fragment without terminal
// punctuation becomes the last sentence.
inline std::vector<std::string> segment_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  const auto push = [&](std::size_t end) {
    auto s = detail::trim(text.substr(start, end - start));
    if (!s.empty()) out.push_back(std::move(s));
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!is_terminal(text[i])) continue;
    std::size_t j = i;
    while (j + 1 < text.size() && is_terminal(text[j + 1])) ++j;
    if (j + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[j + 1]))) {
      push(j + 1);
      start = j + 1;
    }
    i = j;
  }
  push(text.size());
  return out;
}

inline void validate_story(const Story& s, std::size_t continuation_len = kDefaultContinuation) {
  if (s.sentences.size() != continuation_len + 1) {
    throw ParseError("story " + s.id + " has " + std::to_string(s.sentences.size()) + " sentences, expected " +
                     std::to_string(continuation_len + 1));
  }
  for (const auto& x : s.sentences) {
    if (x.empty() || !is_terminal(x.back())) {
      throw ParseError("story " + s.id + ": sentence does not end with terminal punctuation: '" + x + "'");
    }
  }
}

// Reads `id<TAB>sent1<TAB>...<TAB>sentK+1` lines.
inline std::vector<Story> load_stories(const std::string& path, std::size_t continuation_len = kDefaultContinuation) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  std::vector<Story> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    Story s;
    std::size_t start = 0;
    std::vector<std::string> fields;
    for (std::size_t pos; (pos = line.find('\t', start)) != std::string::npos; start = pos + 1) {
      fields.push_back(line.substr(start, pos - start));
    }
    fields.push_back(line.substr(start));
    s.id = fields.front();
    for (std::size_t i = 1; i < fields.size(); ++i) s.sentences.push_back(detail::trim(fields[i]));
    try {
      validate_story(s, continuation_len);
    } catch (const ParseError& e) {
      throw ParseError(path + ": " + e.what(), lineno);
    }
    if (!ids.insert(s.id).second) throw ParseError(path + ": duplicate story id " + s.id, lineno);
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_stories(const std::string& path, const std::vector<Story>& stories) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  for (const auto& s : stories) {
    f << s.id;
    for (const auto& x : s.sentences) f << '\t' << x;
    f << '\n';
  }
}

// ---------------------------------------------------------------------------
// Delexicalization

struct NameLexicon {
  std::set<std::string> male;
  std::set<std::string> female;

  // Two-column TSV: `name<TAB>male|female`.
  static NameLexicon load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read " + path);
    NameLexicon lex;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw ParseError(path + ": expected name<TAB>gender", lineno);
      const std::string name = line.substr(0, tab);
      const std::string gender = line.substr(tab + 1);
      if (gender == "male") {
        lex.male.insert(name);
      } else if (gender == "female") {
        lex.female.insert(name);
      } else {
        throw ParseError(path + ": gender must be male or female", lineno);
      }
    }
    for (const auto& n : lex.male) {
      if (lex.female.count(n)) throw ParseError(path + ": name listed as both male and female: " + n);
    }
    return lex;
  }
};

namespace detail {

inline bool is_stopword(std::string_view w) {
  static const std::set<std::string, std::less<>> words{"I",  "I'm", "I've", "I'll", "I'd", "Mr",  "Mrs",
                                                        "Ms", "Dr",  "OK",   "TV",   "A",   "The", "An"};
  return words.count(w) != 0;
}

// Replaces the name at the core of one whitespace token, keeping surrounding
// punctuation and a possessive "'s".
inline std::string delex_token(const std::string& token, bool sentence_initial, const NameLexicon& lex) {
  std::size_t b = 0;
  while (b < token.size() && !std::isalnum(static_cast<unsigned char>(token[b])) && token[b] != '[') ++b;
  std::size_t e = token.size();
  while (e > b && !std::isalnum(static_cast<unsigned char>(token[e - 1]))) --e;
  std::string core = token.substr(b, e - b);
  std::string suffix = token.substr(e);
  if (core.size() > 2 && core.compare(core.size() - 2, 2, "'s") == 0) {
    suffix = core.substr(core.size() - 2) + suffix;
    core.resize(core.size() - 2);
  }
  if (core.empty() || !std::isupper(static_cast<unsigned char>(core[0]))) return token;
  std::string_view replacement;
  if (lex.male.count(core)) {
    replacement = kMale;
  } else if (lex.female.count(core)) {
    replacement = kFemale;
  } else if (!sentence_initial && !is_stopword(core)) {
    replacement = kNeutral;
  } else {
    return token;
  }
  return token.substr(0, b) + std::string(replacement) + suffix;
}

}  // namespace detail

inline std::string delexicalize_sentence(const std::string& sentence, const NameLexicon& lex) {
  std::string out;
  std::size_t i = 0;
  bool first = true;
  while (i < sentence.size()) {
    if (std::isspace(static_cast<unsigned char>(sentence[i]))) {
      out.push_back(sentence[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < sentence.size() && !std::isspace(static_cast<unsigned char>(sentence[j]))) ++j;
    out += detail::delex_token(sentence.substr(i, j - i), first, lex);
    first = false;
    i = j;
  }
  return out;
}

// Lexicon names are replaced wherever they occur; other capitalized words are
// treated as unknown names only when they are not sentence-initial.
inline Story delexicalize(const Story& story, const NameLexicon& lex) {
  Story out{story.id, {}};
  for (const auto& s : story.sentences) out.sentences.push_back(delexicalize_sentence(s, lex));
  return out;
}

// ---------------------------------------------------------------------------
// Fake stories

namespace detail {

inline void require_continuation(const Story& s, std::size_t min_len, const char* what) {
  if (s.sentences.size() < min_len + 1) {
    throw ConstructionError(std::string(what) + ": story " + s.id + " needs at least " + std::to_string(min_len) +
                            " continuation sentences");
  }
}

}  // namespace detail

// D2: continuation permuted by a uniformly sampled permutation whose result
// differs from the original; identity draws are rejected and redrawn.
inline LabeledStory make_shuffled(const Story& story, Rng& rng) {
  detail::require_continuation(story, 2, "make_shuffled");
  std::vector<std::string> cont(story.sentences.begin() + 1, story.sentences.end());
  if (std::all_of(cont.begin(), cont.end(), [&](const auto& x) { return x == cont.front(); })) {
    throw ConstructionError("make_shuffled: story " + story.id + " has identical continuation sentences");
  }
  std::vector<std::string> shuffled;
  do {
    shuffled = cont;
    rng.shuffle(shuffled);
  } while (shuffled == cont);
  LabeledStory out{story.id, StoryLabel::D2, {story.sentences.front()}, {}};
  out.sentences.insert(out.sentences.end(), shuffled.begin(), shuffled.end());
  return out;
}

// D3: one uniformly chosen continuation position takes a continuation sentence
// of a uniformly chosen donor story with a different id.
inline LabeledStory make_replaced(const Story& story, const std::vector<Story>& donor_pool, Rng& rng) {
  detail::require_continuation(story, 1, "make_replaced");
  std::vector<const Story*> donors;
  for (const auto& d : donor_pool) {
    if (d.id != story.id && d.sentences.size() > 1) donors.push_back(&d);
  }
  if (donors.empty()) throw ConstructionError("make_replaced: no donor story for " + story.id);
  const std::size_t k = story.sentences.size() - 1;
  // Donor sentences identical to the one being replaced would leave the story
  // unchanged; redraw, with a bound for degenerate pools.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const std::size_t pos = 1 + rng.uniform_index(k);
    const Story& donor = *donors[rng.uniform_index(donors.size())];
    const std::string& sentence = donor.sentences[1 + rng.uniform_index(donor.sentences.size() - 1)];
    if (sentence == story.sentences[pos]) continue;
    LabeledStory out{story.id, StoryLabel::D3, story.sentences, {}};
    out.sentences[pos] = sentence;
    return out;
  }
  throw ConstructionError("make_replaced: donors only offer sentences already in story " + story.id);
}

// D4: one continuation position is overwritten by a copy of another
// continuation sentence of the same story; length is unchanged.
inline LabeledStory make_repeated(const Story& story, Rng& rng) {
  detail::require_continuation(story, 2, "make_repeated");
  const std::size_t k = story.sentences.size() - 1;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const std::size_t target = 1 + rng.uniform_index(k);
    std::size_t source = 1 + rng.uniform_index(k - 1);
    if (source >= target) ++source;
    if (story.sentences[source] == story.sentences[target]) continue;
    LabeledStory out{story.id, StoryLabel::D4, story.sentences, {}};
    out.sentences[target] = story.sentences[source];
    return out;
  }
  throw ConstructionError("make_repeated: story " + story.id + " has identical continuation sentences");
}

// Appends end-of-text; the model input is prefixed with end-of-text separately.
inline std::vector<TokenId> encode_story(const TokenizerModel& tok, const std::string& text) {
  auto ids = tok.encode(text);
  ids.push_back(tok.eot_id());
  return ids;
}

// Four records per story (D1..D4 in that order), each story using its own
// stream seeded from (seed, story id) so the output does not depend on order.
// D3 donors come from `stories` itself.
inline std::vector<LabeledStory> build_multitask_dataset(const std::vector<Story>& stories, std::uint64_t seed,
                                                         const TokenizerModel* tokenizer) {
  std::vector<LabeledStory> out;
  out.reserve(stories.size() * kNumStoryLabels);
  for (const auto& s : stories) {
    Rng rng(derive_seed(seed, s.id));
    out.push_back({s.id, StoryLabel::D1, s.sentences, {}});
    out.push_back(make_shuffled(s, rng));
    out.push_back(make_replaced(s, stories, rng));
    out.push_back(make_repeated(s, rng));
  }
  if (tokenizer) {
    for (auto& r : out) r.tokens = encode_story(*tokenizer, r.text());
  }
  return out;
}

inline void save_labeled(const std::string& path, const std::vector<LabeledStory>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  for (const auto& r : records) {
    nlohmann::json j{{"origin_id", r.origin_id}, {"label", to_string(r.label)}, {"text", r.text()}};
    f << j.dump() << '\n';
  }
}

// Reads the JSON-lines form written by save_labeled. Sentences are recovered
// with segment_sentences.
inline std::vector<LabeledStory> load_labeled(const std::string& path, const TokenizerModel* tokenizer) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  std::vector<LabeledStory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      LabeledStory r;
      r.origin_id = j.at("origin_id").get<std::string>();
      r.label = parse_story_label(j.at("label").get<std::string>());
      r.sentences = segment_sentences(j.at("text").get<std::string>());
      if (tokenizer) r.tokens = encode_story(*tokenizer, r.text());
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": not a labeled-story JSON line (" + std::string(e.what()) + ")", lineno);
    }
  }
  return out;
}

}  // namespace kestory
