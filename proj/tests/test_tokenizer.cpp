#include <gtest/gtest.h>

#include <filesystem>

#include "kestory/rng.hpp"
#include "kestory/tokenizer.hpp"

using namespace kestory;

namespace {

TokenizerModel small_model() {
  return train_bpe({"the cat sat on the mat.", "the dog sat on the log.", "[MALE] met [FEMALE] at the park."}, 300);
}

}  // namespace

TEST(TrainBpe, FirstMergeIsMostFrequentPair) {
  // Pair counts in "aaabdaaabac": aa=4, ab=2, ba=1, bd=1, da=1, ac=1.
  const auto tok = train_bpe({"aaabdaaabac"}, 256 + default_special_tokens().size() + 3);
  ASSERT_GE(tok.merges().size(), 1u);
  EXPECT_EQ(tok.merges()[0], (std::pair<std::string, std::string>{"a", "a"}));
  EXPECT_EQ(tok.merges().size(), 3u);
  EXPECT_EQ(tok.vocab_size(), 256 + default_special_tokens().size() + 3);
}

TEST(TrainBpe, NothingToMergeInSingleByteCorpus) {
  const auto tok = train_bpe({"x"}, 1000);
  EXPECT_TRUE(tok.merges().empty());
  EXPECT_EQ(tok.vocab_size(), 256 + default_special_tokens().size());
}

TEST(TrainBpe, Deterministic) {
  const auto a = small_model();
  const auto b = small_model();
  EXPECT_EQ(a.merges(), b.merges());
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
}

TEST(TrainBpe, TiesBrokenLexicographically) {
  // "ab" and "cd" occur equally often; ("a","b") sorts first.
  const auto tok = train_bpe({"cd ab"}, 256 + default_special_tokens().size() + 1);
  ASSERT_EQ(tok.merges().size(), 1u);
  EXPECT_EQ(tok.merges()[0], (std::pair<std::string, std::string>{"a", "b"}));
}

TEST(TrainBpe, RejectsBadConfiguration) {
  EXPECT_THROW(train_bpe({}, 400), ConfigError);
  EXPECT_THROW(train_bpe({"abc"}, 256), ConfigError);
  EXPECT_THROW(train_bpe({"abc"}, 256 + default_special_tokens().size()), ConfigError);
}

TEST(TrainBpe, SpecialsNeverInsideMerges) {
  const auto tok = train_bpe({"[MALE] [MALE] [MALE] said hi to [FEMALE].", "[NEUTRAL][NEUTRAL]"}, 320);
  for (const auto& [a, b] : tok.merges()) {
    for (const auto& s : tok.specials()) {
      EXPECT_NE(a, s);
      EXPECT_NE(b, s);
      EXPECT_NE(a + b, s);
    }
  }
}

TEST(Encode, EmptyAndSpecials) {
  const auto tok = small_model();
  EXPECT_TRUE(tok.encode("").empty());
  EXPECT_EQ(tok.decode({}), "");
  const auto ids = tok.encode("[MALE]");
  ASSERT_EQ(ids.size(), 1u);
  EXPECT_EQ(ids[0], tok.special_id(kMale));
  EXPECT_TRUE(tok.is_special(ids[0]));
  EXPECT_EQ(tok.encode(std::string(kEndOfText)), std::vector<TokenId>{tok.eot_id()});
  const auto mixed = tok.encode("hi [FEMALE]!");
  EXPECT_NE(std::find(mixed.begin(), mixed.end(), tok.special_id(kFemale)), mixed.end());
}

TEST(Encode, AppliesMerges) {
  const auto tok = small_model();
  const auto ids = tok.encode("the cat");
  EXPECT_LT(ids.size(), std::string("the cat").size());
}

TEST(Encode, RoundtripSentence) {
  const auto tok = small_model();
  const std::string s = "The first time I saw the results of an accident";
  EXPECT_EQ(tok.decode(tok.encode(s)), s);
}

TEST(Encode, RoundtripRandomBytes) {
  const auto tok = small_model();
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    std::string s(rng.uniform_index(40), '\0');
    for (auto& c : s) c = static_cast<char>(rng.uniform_index(256));
    ASSERT_EQ(tok.decode(tok.encode(s)), s);
  }
}

TEST(Decode, OutOfRangeNamesPosition) {
  const auto tok = small_model();
  const auto v = static_cast<TokenId>(tok.vocab_size());
  try {
    tok.decode({1, 2, v});
    FAIL() << "expected DecodeError";
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.position(), 2u);
    EXPECT_NE(std::string(e.what()).find("position 2"), std::string::npos);
  }
}

TEST(Vocab, DenseBijection) {
  const auto tok = small_model();
  for (std::size_t id = 0; id < tok.vocab_size(); ++id) {
    const auto back = tok.token_id(tok.token_string(static_cast<TokenId>(id)));
    ASSERT_TRUE(back.has_value());
    EXPECT_EQ(*back, static_cast<TokenId>(id));
  }
}

TEST(Persistence, JsonRoundtrip) {
  const auto tok = small_model();
  const auto path = std::filesystem::temp_directory_path() / "kestory_tok_test.json";
  tok.save(path.string());
  const auto back = TokenizerModel::load(path.string());
  EXPECT_TRUE(back == tok);
  EXPECT_EQ(back.hash(), tok.hash());
  EXPECT_EQ(back.encode("the cat sat"), tok.encode("the cat sat"));
  const auto j = tok.to_json();
  EXPECT_TRUE(j.contains("vocab"));
  EXPECT_TRUE(j.contains("merges"));
  EXPECT_TRUE(j.contains("specials"));
  std::filesystem::remove(path);
}

TEST(Persistence, RejectsInconsistentVocab) {
  auto j = small_model().to_json();
  j["vocab"][270] = "bogus";
  EXPECT_THROW(TokenizerModel::from_json(j), Error);
}
