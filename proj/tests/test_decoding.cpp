#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "kestory/decoding.hpp"
#include "kestory/fixtures.hpp"

using namespace kestory;

namespace {

const TokenizerModel& tokenizer() {
  static const TokenizerModel tok = [] {
    auto text = fixtures::grammar_corpus(100, 1);
    // Words the tests bias towards must be single tokens.
    for (int i = 0; i < 20; ++i) text.push_back("i saw the red cup.");
    return train_bpe(text, 300);
  }();
  return tok;
}

// A model whose next-token logits equal `bias` at every position.
ModelParams constant_model(const std::vector<std::pair<std::string, double>>& bias, std::size_t max_len = 64) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = tokenizer().vocab_size();
  c.max_seq_len = max_len;
  auto p = init_params(c, 1);
  for (auto& v : p.lm_head_w.mutable_data()) v = 0.0;
  for (auto& v : p.lm_head_b.mutable_data()) v = -50.0;
  for (const auto& [tok, logit] : bias) p.lm_head_b.mutable_data()[static_cast<std::size_t>(tokenizer().token_id(tok).value())] = logit;
  return p;
}

GenerationConfig gen(std::size_t k, double temperature, std::uint64_t seed = 1) {
  GenerationConfig g;
  g.k = k;
  g.temperature = temperature;
  g.seed = seed;
  return g;
}

}  // namespace

TEST(TopK, OrderAndTies) {
  const std::vector<double> l{0.5, 2.0, 2.0, -1.0, 1.0};
  EXPECT_EQ(top_k_indices(l, 3), (std::vector<std::size_t>{1, 2, 4}));
  EXPECT_EQ(top_k_indices(l, 10).size(), 5u);
}

TEST(Sampling, AlwaysWithinTopK) {
  Rng rng(3), draw(4);
  std::vector<double> logits(50);
  for (auto& x : logits) x = rng.normal();
  const auto top = top_k_indices(logits, 5);
  const std::set<std::size_t> allowed(top.begin(), top.end());
  for (int i = 0; i < 100000; ++i) {
    const auto t = static_cast<std::size_t>(sample_next(logits, gen(5, 1.3), draw));
    ASSERT_TRUE(allowed.count(t)) << t;
  }
}

TEST(Sampling, KOneIsGreedy) {
  Rng rng(5), draw(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(30);
    for (auto& x : logits) x = rng.normal();
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    EXPECT_EQ(sample_next(logits, gen(1, 0.7), draw), best);
  }
}

TEST(Sampling, FrequencyMatchesSoftmax) {
  const std::vector<double> logits{1.0, 0.0};
  Rng draw(7);
  int first = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) first += sample_next(logits, gen(2, 1.0), draw) == 0;
  EXPECT_NEAR(static_cast<double>(first) / n, std::exp(1.0) / (std::exp(1.0) + 1.0), 0.02);
  // Temperature sharpens: T=0.5 doubles the logit gap.
  first = 0;
  for (int i = 0; i < n; ++i) first += sample_next(logits, gen(2, 0.5), draw) == 0;
  EXPECT_NEAR(static_cast<double>(first) / n, std::exp(2.0) / (std::exp(2.0) + 1.0), 0.02);
}

TEST(Sampling, RejectsBadInput) {
  Rng draw(1);
  EXPECT_THROW(sample_next(std::vector<double>{}, gen(1, 1), draw), ConfigError);
  EXPECT_THROW(sample_next(std::vector<double>{1.0, NAN}, gen(1, 1), draw), NumericError);
  EXPECT_THROW(gen(0, 1).validate(), ConfigError);
  EXPECT_THROW(gen(1, 0).validate(), ConfigError);
}

TEST(Generate, StopsAtTargetSentenceCount) {
  const auto p = constant_model({{"Ġthe", 0.0}, {"Ġcup", 0.0}, {".", 0.5}}, 128);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto g = gen(3, 1.0, seed);
    g.target_sentences = 2;
    const auto story = generate_story(p, tokenizer(), "the cup is red.", g, rng);
    ASSERT_LE(story.sentences.size(), 2u);
    for (const auto& s : story.sentences) EXPECT_TRUE(is_terminal(s.back())) << s;
  }
}

TEST(Generate, EndOfTextStopsAndBudgetLimits) {
  Rng rng(1);
  const auto eot = constant_model({{std::string(kEndOfText), 10.0}});
  EXPECT_TRUE(generate_story(eot, tokenizer(), "the cup.", gen(1, 1.0), rng).sentences.empty());
  // Never emits punctuation: the token budget ends the story with no complete sentence.
  const auto words = constant_model({{"Ġcup", 10.0}}, 256);
  auto g = gen(1, 1.0);
  g.max_tokens = 20;
  EXPECT_TRUE(generate_story(words, tokenizer(), "the cup.", g, rng).sentences.empty());
}

TEST(Generate, DeterministicForSeed) {
  const auto p = constant_model({{"Ġthe", 0.0}, {"Ġcup", 0.3}, {".", 0.2}, {"Ġred", 0.1}}, 128);
  Rng a(9), b(9), c(10);
  const auto sa = generate_story(p, tokenizer(), "i saw the cup.", gen(4, 0.8), a);
  const auto sb = generate_story(p, tokenizer(), "i saw the cup.", gen(4, 0.8), b);
  const auto sc = generate_story(p, tokenizer(), "i saw the cup.", gen(4, 0.8), c);
  EXPECT_EQ(sa.text(), sb.text());
  EXPECT_NE(sa.text(), sc.text());
}

TEST(Generate, ZeroShotWithoutExamplesEqualsPlainGeneration) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = tokenizer().vocab_size();
  c.max_seq_len = 64;
  c.init_std = 0.3;
  const auto p = init_params(c, 2);
  Rng a(3), b(3);
  const auto plain = generate_story(p, tokenizer(), "the cup is red.", gen(5, 1.0), a);
  const auto zs = generate_zero_shot(p, tokenizer(), {}, "the cup is red.", gen(5, 1.0), b);
  EXPECT_EQ(plain.text(), zs.text());
  Rng d(3);
  const auto with_ex = generate_zero_shot(p, tokenizer(), {"a cup seems old."}, "the cup is red.", gen(5, 1.0), d);
  EXPECT_EQ(with_ex.context, "the cup is red.");
}

TEST(Generate, OverlongPromptRejected) {
  const auto p = constant_model({{".", 1.0}}, 16);
  Rng rng(1);
  std::string ctx;
  for (int i = 0; i < 20; ++i) ctx += "the cup ";
  try {
    generate_story(p, tokenizer(), ctx, gen(1, 1.0), rng);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos);
  }
}

TEST(CompleteSentences, DropsTrailingFragment) {
  EXPECT_EQ(complete_sentences("a b. c d! e"), (std::vector<std::string>{"a b.", "c d!"}));
  EXPECT_TRUE(complete_sentences("no end").empty());
}
