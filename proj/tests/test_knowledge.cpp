#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "kestory/knowledge.hpp"

using namespace kestory;

namespace {

std::vector<KnowledgeTriple> parse(const std::string& text, TripleSource src = TripleSource::ConceptNetLike) {
  std::istringstream in(text);
  return parse_triples(in, src, default_template_table());
}

}  // namespace

TEST(ParseTriples, ReadsTsvLine) {
  const auto t = parse("eiffel tower\tAtLocation\tparis\n");
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0], (KnowledgeTriple{"eiffel tower", "AtLocation", "paris", TripleSource::ConceptNetLike}));
}

TEST(ParseTriples, DeduplicatesKeepingFirst) {
  const auto t = parse("a\tUsedFor\tb\nc\tAtLocation\td\na\tUsedFor\tb\n");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].head, "a");
  EXPECT_EQ(t[1].head, "c");
}

TEST(ParseTriples, SkipsCommentsAndBlankLines) {
  EXPECT_EQ(parse("# header\n\na\tUsedFor\tb\n").size(), 1u);
}

TEST(ParseTriples, WrongFieldCountReportsLine) {
  try {
    parse("a\tUsedFor\tb\nbroken\tUsedFor\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(ParseTriples, UnknownRelationListsKnown) {
  try {
    parse("a\tFlies\tb\n");
    FAIL();
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("Flies"), std::string::npos);
    EXPECT_NE(msg.find("AtLocation"), std::string::npos);
    EXPECT_NE(msg.find("UsedFor"), std::string::npos);
  }
}

TEST(ParseTriples, EmptyHeadIsError) { EXPECT_THROW(parse("\tUsedFor\tb\n"), ParseError); }

TEST(ParseTriples, AtomicPersonsRewritten) {
  const auto t = parse("PersonX pays PersonY a compliment\txIntent\tto be nice\n", TripleSource::AtomicLike);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].head, "[MALE] pays [FEMALE] a compliment");
  EXPECT_EQ(t[0].source, TripleSource::AtomicLike);
}

TEST(ParseTriples, FromFile) {
  const auto path = std::filesystem::temp_directory_path() / "kestory_triples.tsv";
  std::ofstream(path) << "telephone\tUsedFor\tcommunication\n";
  const auto t = parse_triples(path.string(), TripleSource::ConceptNetLike);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].tail, "communication");
  std::filesystem::remove(path);
}

TEST(Verbalize, PublishedExamples) {
  Rng rng(1);
  const auto& table = default_template_table();
  EXPECT_EQ(verbalize({"eiffel tower", "AtLocation", "paris"}, table, TemplateVariant::training(), rng).text,
            "eiffel tower is at paris.");
  EXPECT_EQ(verbalize({"telephone", "UsedFor", "communication"}, table, TemplateVariant::training(), rng).text,
            "telephone is used for communication.");
  const auto atomic = parse("PersonX cooks spaghetti\txIntent\tto eat\n", TripleSource::AtomicLike);
  EXPECT_EQ(verbalize(atomic[0], table, TemplateVariant::training(), rng).text,
            "[MALE] cooks spaghetti. [MALE] wants to eat.");
  const auto effect = parse("PersonX dates for years\toEffect\tcontinue dating\n", TripleSource::AtomicLike);
  EXPECT_EQ(verbalize(effect[0], table, TemplateVariant::training(), rng).text,
            "[MALE] dates for years. [FEMALE] will continue dating.");
}

TEST(Verbalize, WrongIsForcedWithTwoRelations) {
  Rng rng(3);
  const auto table = default_template_table().restricted_to({"UsedFor", "AtLocation"});
  const auto s = verbalize({"telephone", "UsedFor", "communication"}, table, TemplateVariant::wrong(), rng);
  EXPECT_EQ(s.text, "telephone is at communication.");
  EXPECT_EQ(s.variant.kind, TemplateKind::Wrong);
  EXPECT_EQ(s.variant.wrong_relation, "AtLocation");
}

TEST(Verbalize, WrongNeedsAnotherRelation) {
  Rng rng(3);
  const auto table = default_template_table().restricted_to({"UsedFor"});
  EXPECT_THROW(verbalize({"a", "UsedFor", "b"}, table, TemplateVariant::wrong(), rng), ConfigError);
  EXPECT_THROW(verbalize({"a", "Flies", "b"}, table, TemplateVariant::training(), rng), ConfigError);
}

TEST(Verbalize, WrongStaysInSourceFamilyAndDiffersFromTraining) {
  Rng rng(11);
  const auto& table = default_template_table();
  for (int i = 0; i < 500; ++i) {
    const KnowledgeTriple t{"a cup", "UsedFor", "drinking"};
    const auto w = verbalize(t, table, TemplateVariant::wrong(), rng);
    EXPECT_NE(w.text, verbalize(t, table, TemplateVariant::training(), rng).text);
    EXPECT_EQ(table.at(w.variant.wrong_relation).source, TripleSource::ConceptNetLike);
  }
}

TEST(Verbalize, SlotsRecoverTriple) {
  Rng rng(5);
  const auto& table = default_template_table();
  for (const auto& [name, tmpl] : table.entries()) {
    const KnowledgeTriple t{"some head", name, "some tail", tmpl.source};
    for (auto v : {TemplateVariant::training(), TemplateVariant::synonymous()}) {
      const auto s = verbalize(t, table, v, rng);
      const auto& pattern = v.kind == TemplateKind::Training ? tmpl.training : tmpl.synonymous;
      const auto slots = extract_slots(s.text, pattern);
      ASSERT_TRUE(slots.has_value()) << name;
      EXPECT_EQ(slots->first, "some head");
      EXPECT_EQ(slots->second, "some tail");
      EXPECT_EQ(s.text.find(name), std::string::npos) << "raw relation name leaked: " << s.text;
    }
  }
}

TEST(TemplateTable, DefaultCoversBothFamilies) {
  const auto& table = default_template_table();
  std::size_t concept_net = 0, atomic = 0;
  for (const auto& [_, t] : table.entries()) (t.source == TripleSource::AtomicLike ? atomic : concept_net)++;
  EXPECT_EQ(concept_net, 34u);
  EXPECT_EQ(atomic, 9u);
  EXPECT_EQ(table.at("AtLocation").synonymous, "{head} is located in {tail}.");
  EXPECT_EQ(table.at("Causes").synonymous, "{head} leads to {tail}.");
}

TEST(TemplateTable, RejectsBadTemplates) {
  TemplateTable t;
  EXPECT_THROW(t.add({"R", "{head} is {tail} {tail}.", "{head} x {tail}.", TripleSource::ConceptNetLike}), ConfigError);
  EXPECT_THROW(t.add({"R", "{head} is.", "{head} x {tail}.", TripleSource::ConceptNetLike}), ConfigError);
  EXPECT_THROW(t.add({"R", "{head} is {tail}.", "{head} is {tail}.", TripleSource::ConceptNetLike}), ConfigError);
}

TEST(TemplateTable, JsonRoundtripAndBundledFile) {
  const auto& table = default_template_table();
  const auto back = TemplateTable::from_json(table.to_json());
  EXPECT_EQ(back.to_json(), table.to_json());
  const auto bundled = TemplateTable::load(std::string(KESTORY_DATA_DIR) + "/templates.json");
  EXPECT_EQ(bundled.to_json(), table.to_json());
}

TEST(RelationEval, ItemsShareTriple) {
  Rng rng(9);
  const auto table = default_template_table().restricted_to({"UsedFor", "AtLocation", "MadeOf"});
  const std::vector<KnowledgeTriple> triples{{"cup", "UsedFor", "drinking"}, {"cup", "AtLocation", "kitchen"},
                                             {"chair", "MadeOf", "wood"}};
  const auto items = build_relation_eval_set(triples, table, rng);
  ASSERT_EQ(items.size(), triples.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    EXPECT_EQ(items[i].training.triple, triples[i]);
    EXPECT_EQ(items[i].correct.triple, triples[i]);
    EXPECT_EQ(items[i].wrong.triple, triples[i]);
    EXPECT_NE(items[i].wrong.text, items[i].training.text);
    const auto j = to_json(items[i]);
    EXPECT_EQ(j["training"], items[i].training.text);
  }
  Rng again(9);
  const auto repeat = build_relation_eval_set(triples, table, again);
  for (std::size_t i = 0; i < items.size(); ++i) EXPECT_EQ(repeat[i].wrong.text, items[i].wrong.text);
}

TEST(RelationEval, LoadsJsonLines) {
  const auto path = std::filesystem::temp_directory_path() / "kestory_rel.jsonl";
  std::ofstream(path) << R"({"training":"a is at b.","correct":"a is located in b.","wrong":"a is used for b."})"
                      << "\n";
  const auto items = load_relation_eval(path.string());
  ASSERT_EQ(items.size(), 1u);
  EXPECT_EQ(items[0].wrong, "a is used for b.");
  std::ofstream(path) << "not json\n";
  EXPECT_THROW(load_relation_eval(path.string()), ParseError);
  std::filesystem::remove(path);
}
