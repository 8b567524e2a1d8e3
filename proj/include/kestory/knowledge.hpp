#pragma once

// Commonsense triples and their template verbalization.

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kestory/error.hpp"
#include "kestory/rng.hpp"
#include "kestory/tokenizer.hpp"

namespace kestory {

enum class TripleSource { ConceptNetLike, AtomicLike };

inline std::string to_string(TripleSource s) { return s == TripleSource::AtomicLike ? "atomic" : "conceptnet"; }

inline TripleSource parse_triple_source(std::string_view s) {
  if (s == "conceptnet") return TripleSource::ConceptNetLike;
  if (s == "atomic") return TripleSource::AtomicLike;
  throw ConfigError("unknown triple source '" + std::string(s) + "' (expected conceptnet or atomic)");
}

struct KnowledgeTriple {
  std::string head;
  std::string relation;
  std::string tail;
  TripleSource source = TripleSource::ConceptNetLike;

  friend bool operator==(const KnowledgeTriple&, const KnowledgeTriple&) = default;
};

inline constexpr std::string_view kHeadSlot = "{head}";
inline constexpr std::string_view kTailSlot = "{tail}";

struct RelationTemplate {
  std::string relation;
  std::string training;
  std::string synonymous;
  TripleSource source = TripleSource::ConceptNetLike;
};

namespace detail {

inline std::size_t count_occurrences(std::string_view s, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string_view::npos; pos = s.find(needle, pos + needle.size())) ++n;
  return n;
}

inline void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

// Fills the slots of `pattern` with head and tail.
inline std::string instantiate(std::string_view pattern, std::string_view head, std::string_view tail) {
  std::string out;
  std::size_t i = 0;
  while (i < pattern.size()) {
    if (pattern.compare(i, kHeadSlot.size(), kHeadSlot) == 0) {
      out += head;
      i += kHeadSlot.size();
    } else if (pattern.compare(i, kTailSlot.size(), kTailSlot) == 0) {
      out += tail;
      i += kTailSlot.size();
    } else {
      out.push_back(pattern[i++]);
    }
  }
  return out;
}

// Recovers (head, tail) from a sentence produced by `pattern`; nullopt when the
// sentence does not fit the pattern.
inline std::optional<std::pair<std::string, std::string>> extract_slots(std::string_view sentence,
                                                                        std::string_view pattern) {
  const auto hp = pattern.find(kHeadSlot);
  const auto tp = pattern.find(kTailSlot);
  if (hp == std::string_view::npos || tp == std::string_view::npos) return std::nullopt;
  const bool head_first = hp < tp;
  const auto first = std::min(hp, tp);
  const auto second = std::max(hp, tp);
  const auto first_len = head_first ? kHeadSlot.size() : kTailSlot.size();
  const auto second_len = head_first ? kTailSlot.size() : kHeadSlot.size();
  const std::string_view prefix = pattern.substr(0, first);
  const std::string_view middle = pattern.substr(first + first_len, second - first - first_len);
  const std::string_view suffix = pattern.substr(second + second_len);
  if (sentence.size() < prefix.size() + middle.size() + suffix.size()) return std::nullopt;
  if (sentence.substr(0, prefix.size()) != prefix) return std::nullopt;
  if (sentence.substr(sentence.size() - suffix.size()) != suffix) return std::nullopt;
  const std::string_view body = sentence.substr(prefix.size(), sentence.size() - prefix.size() - suffix.size());
  const auto mid = body.find(middle);
  if (mid == std::string_view::npos || mid == 0 || mid + middle.size() == body.size()) return std::nullopt;
  std::string a(body.substr(0, mid));
  std::string b(body.substr(mid + middle.size()));
  if (!head_first) std::swap(a, b);
  return std::make_pair(std::move(a), std::move(b));
}

class TemplateTable {
 public:
  TemplateTable() = default;

  void add(RelationTemplate t) {
    for (const auto* p : {&t.training, &t.synonymous}) {
      if (detail::count_occurrences(*p, kHeadSlot) != 1 || detail::count_occurrences(*p, kTailSlot) != 1) {
        throw ConfigError("template for " + t.relation + " needs exactly one {head} and one {tail}: " + *p);
      }
    }
    if (t.training == t.synonymous) throw ConfigError("synonymous template for " + t.relation + " equals training");
    entries_[t.relation] = std::move(t);
  }

  bool contains(std::string_view relation) const { return entries_.count(std::string(relation)) != 0; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::map<std::string, RelationTemplate>& entries() const noexcept { return entries_; }

  const RelationTemplate& at(std::string_view relation) const {
    auto it = entries_.find(std::string(relation));
    if (it == entries_.end()) throw ConfigError("relation '" + std::string(relation) + "' has no template; known: " + known());
    return it->second;
  }

  std::string known() const {
    std::string s;
    for (const auto& [name, _] : entries_) {
      if (!s.empty()) s += ", ";
      s += name;
    }
    return s;
  }

  // Sub-table holding only the given relations.
  TemplateTable restricted_to(const std::set<std::string>& relations) const {
    TemplateTable t;
    for (const auto& r : relations) t.add(at(r));
    return t;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, t] : entries_) {
      j[name] = {{"training", t.training}, {"synonymous", t.synonymous}, {"source", to_string(t.source)}};
    }
    return j;
  }

  static TemplateTable from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("template table must be a JSON object");
    TemplateTable table;
    for (const auto& [name, v] : j.items()) {
      if (!v.is_object() || !v.contains("training") || !v.contains("synonymous")) {
        throw ParseError("template entry " + name + " needs training and synonymous");
      }
      RelationTemplate t{name, v.at("training").get<std::string>(), v.at("synonymous").get<std::string>(),
                         v.contains("source") ? parse_triple_source(v.at("source").get<std::string>())
                                              : TripleSource::ConceptNetLike};
      table.add(std::move(t));
    }
    return table;
  }

  static TemplateTable load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read " + path);
    try {
      return from_json(nlohmann::json::parse(f));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": " + e.what());
    }
  }

 private:
  std::map<std::string, RelationTemplate> entries_;
};

// Built-in table: the 34 ConceptNet relations and the 9 ATOMIC relation types.
// AtLocation, UsedFor, oEffect and xIntent use the well-known published
// phrasings; the others are our own.
inline const TemplateTable& default_template_table() {
  static const TemplateTable table = [] {
    struct Row {
      const char* rel;
      const char* training;
      const char* synonymous;
      TripleSource src;
    };
    constexpr auto C = TripleSource::ConceptNetLike;
    constexpr auto A = TripleSource::AtomicLike;
    const Row rows[] = {
        {"AtLocation", "{head} is at {tail}.", "{head} is located in {tail}.", C},
        {"CapableOf", "{head} can {tail}.", "{head} is able to {tail}.", C},
        {"Causes", "{head} causes {tail}.", "{head} leads to {tail}.", C},
        {"CausesDesire", "{head} makes you want to {tail}.", "{head} makes you wish to {tail}.", C},
        {"CreatedBy", "{head} is created by {tail}.", "{head} is made by {tail}.", C},
        {"DefinedAs", "{head} is defined as {tail}.", "{head} is described as {tail}.", C},
        {"DesireOf", "{head} is desired by {tail}.", "{head} is wanted by {tail}.", C},
        {"Desires", "{head} desires {tail}.", "{head} wants {tail}.", C},
        {"HasA", "{head} has {tail}.", "{head} owns {tail}.", C},
        {"HasFirstSubevent", "{head} starts with {tail}.", "{head} begins with {tail}.", C},
        {"HasLastSubevent", "{head} ends with {tail}.", "{head} finishes with {tail}.", C},
        {"HasPainCharacter", "{head} causes the pain of {tail}.", "{head} brings the pain of {tail}.", C},
        {"HasPainIntensity", "{head} hurts with {tail}.", "{head} aches with {tail}.", C},
        {"HasPrerequisite", "{head} requires {tail}.", "{head} needs {tail}.", C},
        {"HasProperty", "{head} is {tail}.", "{head} seems {tail}.", C},
        {"HasSubevent", "{head} includes {tail}.", "{head} involves {tail}.", C},
        {"InheritsFrom", "{head} inherits from {tail}.", "{head} descends from {tail}.", C},
        {"InstanceOf", "{head} is an instance of {tail}.", "{head} is an example of {tail}.", C},
        {"IsA", "{head} is a kind of {tail}.", "{head} is a type of {tail}.", C},
        {"LocatedNear", "{head} is near {tail}.", "{head} is close to {tail}.", C},
        {"LocationOfAction", "{head} is where you {tail}.", "{head} is the place to {tail}.", C},
        {"MadeOf", "{head} is made of {tail}.", "{head} is composed of {tail}.", C},
        {"MotivatedByGoal", "{head} because you want {tail}.", "{head} because you wish for {tail}.", C},
        {"NotCapableOf", "{head} cannot {tail}.", "{head} is unable to {tail}.", C},
        {"NotDesires", "{head} does not desire {tail}.", "{head} does not want {tail}.", C},
        {"NotHasA", "{head} does not have {tail}.", "{head} does not own {tail}.", C},
        {"NotHasProperty", "{head} is not {tail}.", "{head} does not seem {tail}.", C},
        {"NotIsA", "{head} is not a kind of {tail}.", "{head} is not a type of {tail}.", C},
        {"NotMadeOf", "{head} is not made of {tail}.", "{head} is not composed of {tail}.", C},
        {"PartOf", "{head} is part of {tail}.", "{head} is a piece of {tail}.", C},
        {"ReceivesAction", "{head} can be {tail}.", "{head} is able to be {tail}.", C},
        {"RelatedTo", "{head} is related to {tail}.", "{head} is connected to {tail}.", C},
        {"SymbolOf", "{head} is a symbol of {tail}.", "{head} represents {tail}.", C},
        {"UsedFor", "{head} is used for {tail}.", "{head} is useful for {tail}.", C},
        {"oEffect", "{head}. [FEMALE] will {tail}.", "{head}. [FEMALE] is going to {tail}.", A},
        {"oReact", "{head}. [FEMALE] feels {tail}.", "{head}. [FEMALE] becomes {tail}.", A},
        {"oWant", "{head}. [FEMALE] would like {tail}.", "{head}. [FEMALE] wishes {tail}.", A},
        {"xAttr", "{head}. [MALE] is seen as {tail}.", "{head}. [MALE] is regarded as {tail}.", A},
        {"xEffect", "{head}. as a result, [MALE] will {tail}.", "{head}. as a result, [MALE] is going to {tail}.", A},
        {"xIntent", "{head}. [MALE] wants {tail}.", "{head}. [MALE] intends {tail}.", A},
        {"xNeed", "{head}. before that, [MALE] needs {tail}.", "{head}. before that, [MALE] requires {tail}.", A},
        {"xReact", "{head}. [MALE] feels {tail}.", "{head}. [MALE] becomes {tail}.", A},
        {"xWant", "{head}. after that, [MALE] wants {tail}.", "{head}. after that, [MALE] wishes {tail}.", A},
    };
    TemplateTable t;
    for (const auto& r : rows) t.add({r.rel, r.training, r.synonymous, r.src});
    return t;
  }();
  return table;
}

// Rewrites ATOMIC person variables into the story placeholders.
inline std::string rewrite_persons(std::string text) {
  detail::replace_all(text, "PersonX", kMale);
  detail::replace_all(text, "PersonY", kFemale);
  detail::replace_all(text, "PersonZ", kNeutral);
  return text;
}

// Reads `head<TAB>relation<TAB>tail` lines. Blank lines and lines starting with
// '#' are skipped. Duplicates are dropped, first occurrence wins.
inline std::vector<KnowledgeTriple> parse_triples(std::istream& in, TripleSource source, const TemplateTable& table) {
  std::vector<KnowledgeTriple> out;
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find('\t', start)) != std::string::npos; start = pos + 1) {
      fields.push_back(line.substr(start, pos - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() != 3) {
      throw ParseError("expected 3 tab-separated fields (head, relation, tail), got " + std::to_string(fields.size()),
                       lineno);
    }
    KnowledgeTriple t{detail::trim(fields[0]), detail::trim(fields[1]), detail::trim(fields[2]), source};
    if (t.head.empty() || t.tail.empty()) throw ParseError("empty head or tail", lineno);
    if (!table.contains(t.relation)) {
      throw ParseError("unknown relation '" + t.relation + "'; known relations: " + table.known(), lineno);
    }
    if (source == TripleSource::AtomicLike) {
      t.head = rewrite_persons(std::move(t.head));
      t.tail = rewrite_persons(std::move(t.tail));
    }
    if (seen.emplace(t.head, t.relation, t.tail).second) out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<KnowledgeTriple> parse_triples(const std::string& path, TripleSource source,
                                                  const TemplateTable& table = default_template_table()) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  try {
    return parse_triples(f, source, table);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

enum class TemplateKind { Training, Synonymous, Wrong };

struct TemplateVariant {
  TemplateKind kind = TemplateKind::Training;
  std::string wrong_relation;  // set for Wrong once resolved

  static TemplateVariant training() { return {TemplateKind::Training, {}}; }
  static TemplateVariant synonymous() { return {TemplateKind::Synonymous, {}}; }
  static TemplateVariant wrong() { return {TemplateKind::Wrong, {}}; }
  friend bool operator==(const TemplateVariant&, const TemplateVariant&) = default;
};

struct KnowledgeSentence {
  std::string text;
  KnowledgeTriple triple;
  TemplateVariant variant;
};

// Verbalizes a triple. For the Wrong variant, the training template of a
// uniformly chosen other relation of the same source family is used; relations
// whose template would reproduce the training sentence are excluded.
inline KnowledgeSentence verbalize(const KnowledgeTriple& triple, const TemplateTable& table, TemplateVariant variant,
                                   Rng& rng) {
  const auto& own = table.at(triple.relation);
  switch (variant.kind) {
    case TemplateKind::Training:
      return {instantiate(own.training, triple.head, triple.tail), triple, TemplateVariant::training()};
    case TemplateKind::Synonymous:
      return {instantiate(own.synonymous, triple.head, triple.tail), triple, TemplateVariant::synonymous()};
    case TemplateKind::Wrong:
      break;
  }
  const std::string correct = instantiate(own.training, triple.head, triple.tail);
  std::vector<const RelationTemplate*> candidates;
  for (const auto& [name, t] : table.entries()) {
    if (name == triple.relation || t.source != own.source) continue;
    if (instantiate(t.training, triple.head, triple.tail) == correct) continue;
    candidates.push_back(&t);
  }
  if (candidates.empty()) {
    throw ConfigError("no other relation available to build a wrong template for " + triple.relation);
  }
  const auto* pick = candidates[rng.uniform_index(candidates.size())];
  return {instantiate(pick->training, triple.head, triple.tail), triple, {TemplateKind::Wrong, pick->relation}};
}

struct RelationEvalItem {
  KnowledgeSentence training;
  KnowledgeSentence correct;
  KnowledgeSentence wrong;
};

inline std::vector<RelationEvalItem> build_relation_eval_set(const std::vector<KnowledgeTriple>& triples,
                                                             const TemplateTable& table, Rng& rng) {
  std::vector<RelationEvalItem> items;
  items.reserve(triples.size());
  for (const auto& t : triples) {
    items.push_back({verbalize(t, table, TemplateVariant::training(), rng),
                     verbalize(t, table, TemplateVariant::synonymous(), rng),
                     verbalize(t, table, TemplateVariant::wrong(), rng)});
  }
  return items;
}

inline nlohmann::json to_json(const RelationEvalItem& item) {
  return {{"head", item.training.triple.head},
          {"relation", item.training.triple.relation},
          {"tail", item.training.triple.tail},
          {"wrong_relation", item.wrong.variant.wrong_relation},
          {"training", item.training.text},
          {"correct", item.correct.text},
          {"wrong", item.wrong.text}};
}

// Relation-eval files store one JSON object per line; only the three sentences
// are needed for scoring.
struct RelationEvalSentences {
  std::string training;
  std::string correct;
  std::string wrong;
};

inline std::vector<RelationEvalSentences> load_relation_eval(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  std::vector<RelationEvalSentences> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("training").get<std::string>(), j.at("correct").get<std::string>(),
                     j.at("wrong").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": " + e.what(), lineno);
    }
  }
  return out;
}

}  // namespace kestory
