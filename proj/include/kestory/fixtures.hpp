#pragma once

// Seeded synthetic data for desk-scale runs: a small-grammar text corpus, a
// category-consistent knowledge base, and five-sentence stories.

#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kestory/corpus.hpp"
#include "kestory/knowledge.hpp"
#include "kestory/rng.hpp"

namespace kestory::fixtures {

namespace lex {

inline const std::vector<std::string> objects{"cup",    "book",   "chair",  "lamp",   "knife",  "spoon",  "hammer",
                                              "pencil", "blanket", "bottle", "basket", "candle", "mirror", "rope",
                                              "bucket", "ladder", "pillow", "brush",  "kettle", "jacket", "shovel",
                                              "plate",  "clock",  "radio",  "towel",  "broom",  "wagon",  "drum",
                                              "glove",  "map",    "fan",    "box",    "bench",  "scarf",  "needle",
                                              "camera", "helmet", "violin", "tent",   "whistle"};
inline const std::vector<std::string> places{"kitchen", "garage", "office", "park",   "school", "library",
                                             "garden",  "bedroom", "beach", "market", "church", "barn"};
inline const std::vector<std::string> activities{"cooking",  "writing",  "reading", "cleaning", "drinking",
                                                 "sleeping", "painting", "cutting", "digging",  "climbing",
                                                 "sewing",   "singing"};
inline const std::vector<std::string> materials{"wood",  "glass", "metal", "paper",  "plastic", "cotton",
                                                "stone", "clay",  "wool",  "rubber", "leather", "silver"};
inline const std::vector<std::string> abilities{"break", "bend", "float", "burn",  "roll",  "melt",
                                                "shine", "ring", "fold",  "crack", "swing", "spin"};
inline const std::vector<std::string> adjectives{"red",   "heavy", "soft",  "bright", "cold", "small",
                                                 "round", "sharp", "smooth", "old",   "loud", "clean"};

}  // namespace lex

namespace detail {

inline const std::string& pick(const std::vector<std::string>& v, Rng& rng) { return v[rng.uniform_index(v.size())]; }

}  // namespace detail

// Sentences from a small grammar over the fixture lexicon. Half of them use
// the relation phrasings of the knowledge templates and their synonyms, but
// with tails from the pooled tail classes: the corpus teaches the phrasings
// without the relation-to-class associations the knowledge base supplies.
inline std::vector<std::string> grammar_corpus(std::size_t n, std::uint64_t seed) {
  using detail::pick;
  Rng rng(derive_seed(seed, "grammar"));
  const std::vector<std::string> people{"[MALE]", "[FEMALE]", "my friend", "the teacher", "our neighbor"};
  const std::vector<std::string> phrasings{"is at",       "is located in", "is used for", "is useful for", "is made of",
                                           "is composed of", "can",        "is able to",  "is",            "seems"};
  std::vector<std::string> tails;
  for (const auto* v : {&lex::places, &lex::activities, &lex::materials, &lex::abilities, &lex::adjectives}) {
    tails.insert(tails.end(), v->begin(), v->end());
  }
  std::vector<std::string> out;
  out.reserve(n);
  while (out.size() < n) {
    const auto& o = pick(lex::objects, rng);
    const auto& who = pick(people, rng);
    std::string s;
    switch (rng.uniform_index(10)) {
      case 0: s = who + " put the " + o + " in the " + pick(lex::places, rng) + "."; break;
      case 1: s = who + " went to the " + pick(lex::places, rng) + " after " + pick(lex::activities, rng) + "."; break;
      case 2: s = who + " likes " + pick(lex::activities, rng) + " in the " + pick(lex::places, rng) + "."; break;
      case 3: s = who + " bought a " + pick(lex::adjectives, rng) + " " + o + "."; break;
      case 4: s = "the " + o + " is in the " + pick(lex::places, rng) + "."; break;
      default: s = o + " " + pick(phrasings, rng) + " " + pick(tails, rng) + "."; break;
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct FixtureKb {
  std::vector<KnowledgeTriple> train;
  std::vector<KnowledgeTriple> held_out;
};

inline const std::vector<std::string>& fixture_relations() {
  static const std::vector<std::string> r{"AtLocation", "UsedFor", "MadeOf", "CapableOf", "HasProperty"};
  return r;
}

// Distinct (head, relation, tail) triples whose tails come from the word class
// tied to the relation. Held-out triples never appear in the training part.
inline FixtureKb fixture_kb(std::size_t n_train, std::size_t n_held_out, std::uint64_t seed) {
  const std::vector<const std::vector<std::string>*> tails{&lex::places, &lex::activities, &lex::materials,
                                                           &lex::abilities, &lex::adjectives};
  const auto& rels = fixture_relations();
  std::size_t capacity = 0;
  for (auto* t : tails) capacity += lex::objects.size() * t->size();
  if (n_train + n_held_out > capacity) throw ConfigError("fixture_kb: too many triples requested");
  Rng rng(derive_seed(seed, "kb"));
  std::set<std::string> seen;
  FixtureKb kb;
  while (kb.train.size() + kb.held_out.size() < n_train + n_held_out) {
    const std::size_t r = rng.uniform_index(rels.size());
    const auto& h = detail::pick(lex::objects, rng);
    const auto& t = detail::pick(*tails[r], rng);
    if (!seen.insert(h + "\t" + rels[r] + "\t" + t).second) continue;
    auto& dst = kb.train.size() < n_train ? kb.train : kb.held_out;
    dst.push_back({h, rels[r], t, TripleSource::ConceptNetLike});
  }
  return kb;
}

inline std::string triples_tsv(const std::vector<KnowledgeTriple>& triples) {
  std::string s;
  for (const auto& t : triples) s += t.head + "\t" + t.relation + "\t" + t.tail + "\n";
  return s;
}

namespace detail {

inline bool has_repeated_bigram(const std::vector<std::string>& sentences) {
  std::vector<std::string> words;
  for (const auto& s : sentences) {
    std::size_t i = 0;
    while (i < s.size()) {
      const auto j = std::min(s.find(' ', i), s.size());
      if (j > i) words.push_back(s.substr(i, j - i));
      i = j + 1;
    }
  }
  std::set<std::pair<std::string, std::string>> seen;
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (!seen.emplace(words[i], words[i + 1]).second) return true;
  }
  return false;
}

}  // namespace detail

// Five-sentence stories with a fixed discourse shape: goal, trip, discovery,
// effort, outcome. Every story is distinct and repeats no word bigram.
inline std::vector<Story> synthetic_stories(std::size_t n, std::uint64_t seed) {
  using detail::pick;
  const std::vector<std::string> goals{"bake a cake",      "learn to swim",     "plant a garden",   "fix an old bike",
                                       "paint the fence",  "write a song",      "buy a new coat",   "catch a big fish",
                                       "build a bird house", "visit the museum", "clean the attic",  "win the race",
                                       "sew a quilt",      "climb the hill",    "read a long novel", "cook dinner"};
  const std::vector<std::string> openers{"{P} wanted to {G}.", "{P} decided to {G}.", "one day {P} hoped to {G}.",
                                         "{P} really needed to {G}."};
  const std::vector<std::string> trips{"{P} went to the {L} early.", "{P} walked to the {L} that morning.",
                                       "{P} drove to the {L} after lunch.", "{P} rode to the {L} before noon."};
  const std::vector<std::string> finds{"there {P} found a {A} {O}.", "nearby {P} saw a {A} {O}.",
                                       "soon {P} noticed a {A} {O}.", "inside {P} spotted a {A} {O}."};
  const std::vector<std::string> efforts{"{P} worked hard with {F}.", "{P} practiced for hours with {F}.",
                                         "{P} tried again with help from {F}.", "{P} kept going beside {F}."};
  const std::vector<std::string> outcomes{"in the end {P} felt {E}.", "finally {P} was {E}.",
                                          "at last {P} became {E}.", "afterwards {P} seemed {E}."};
  const std::vector<std::string> friends{"a neighbor", "[NEUTRAL]", "an old friend", "the coach", "a cousin"};
  const std::vector<std::string> emotions{"happy", "proud", "tired", "relieved", "grateful", "excited", "calm"};
  auto fill = [](std::string s, const std::map<std::string, std::string>& slots) {
    for (const auto& [k, v] : slots) kestory::detail::replace_all(s, k, v);
    return s;
  };

  Rng rng(derive_seed(seed, "stories"));
  std::set<std::string> seen;
  std::vector<Story> out;
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 100 * n + 1000) throw ConfigError("synthetic_stories: cannot produce enough distinct stories");
    const std::string p = rng.uniform_index(2) ? "[MALE]" : "[FEMALE]";
    const std::map<std::string, std::string> slots{{"{P}", p},
                                                   {"{G}", pick(goals, rng)},
                                                   {"{L}", pick(lex::places, rng)},
                                                   {"{A}", pick(lex::adjectives, rng)},
                                                   {"{O}", pick(lex::objects, rng)},
                                                   {"{F}", pick(friends, rng)},
                                                   {"{E}", pick(emotions, rng)}};
    std::vector<std::string> sents{fill(pick(openers, rng), slots), fill(pick(trips, rng), slots),
                                   fill(pick(finds, rng), slots), fill(pick(efforts, rng), slots),
                                   fill(pick(outcomes, rng), slots)};
    if (detail::has_repeated_bigram(sents)) continue;
    Story s{"", sents};
    if (!seen.insert(s.text()).second) continue;
    char id[16];
    std::snprintf(id, sizeof id, "s%05zu", out.size());
    s.id = id;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace kestory::fixtures
