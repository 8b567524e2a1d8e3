#include <gtest/gtest.h>

#include <cmath>

#include "kestory/evaluation.hpp"
#include "kestory/fixtures.hpp"
#include "kestory/training.hpp"

using namespace kestory;

namespace {

using Words = std::vector<std::vector<std::string>>;

const TokenizerModel& tokenizer() {
  static const TokenizerModel tok = train_bpe(fixtures::grammar_corpus(100, 1), 300);
  return tok;
}

ModelConfig model_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = tokenizer().vocab_size();
  c.max_seq_len = 192;
  c.init_std = 0.3;
  return c;
}

ModelParams uniform_model() {
  auto p = init_params(model_config(), 1);
  for (auto& v : p.lm_head_w.mutable_data()) v = 0.0;
  for (auto& v : p.lm_head_b.mutable_data()) v = 0.0;
  return p;
}

Words words(const std::vector<std::string>& texts) {
  Words out;
  for (const auto& t : texts) out.push_back(word_tokens(t));
  return out;
}

}  // namespace

TEST(WordTokens, SplitsEdgePunctuation) {
  EXPECT_EQ(word_tokens("Hello, world!  \"Yes.\""),
            (std::vector<std::string>{"Hello", ",", "world", "!", "\"", "Yes", ".", "\""}));
  EXPECT_EQ(word_tokens("The Cup", true), (std::vector<std::string>{"the", "cup"}));
  EXPECT_TRUE(word_tokens("   ").empty());
}

TEST(Bleu, HandComputedExamples) {
  // Perfect unigram precision, hypothesis 2 words against 3: BP = exp(1 - 3/2).
  EXPECT_NEAR(bleu_n({"the cat"}, {"the cat sat"}, 1), std::exp(-0.5), 1e-12);
  EXPECT_NEAR(bleu_n({"the cat sat"}, {"the cat sat"}, 2), 1.0, 1e-12);
  // Clipping: "the the the" against "the cat": unigram 1/3; hypothesis longer so BP = 1.
  EXPECT_NEAR(bleu_n({"the the the"}, {"the cat"}, 1), 1.0 / 3.0, 1e-12);
  // Bigrams: hyp "a b c d" vs ref "a b x d": p1 = 3/4, p2 = 1/3.
  EXPECT_NEAR(bleu_n({"a b c d"}, {"a b x d"}, 2), std::sqrt(0.75 / 3.0), 1e-12);
  // Corpus level: counts pool before dividing.
  EXPECT_NEAR(bleu_n({"a b", "c d e f"}, {"a x", "c d e f"}, 1), 5.0 / 6.0, 1e-12);
  EXPECT_EQ(bleu_n({"a b"}, {"c d"}, 1), 0.0);
  EXPECT_EQ(bleu_n({""}, {"c d"}, 1), 0.0);
  EXPECT_THROW(bleu_n({"a"}, {}, 1), ConfigError);
}

TEST(Repetition, FourGramRepeatsWithinStory) {
  const auto s = words({"a b c d x a b c d", "a b c d e f g", "a b c"});
  EXPECT_NEAR(repetition_4(s), 100.0 / 3.0, 1e-12);
  EXPECT_EQ(repetition_4(Words{}), 0.0);
}

TEST(Distinct, PooledRatio) {
  EXPECT_NEAR(distinct_4(words({"a b a b a b a b a b"})), 100.0 * 2.0 / 7.0, 1e-12);
  EXPECT_NEAR(distinct_4(words({"a b c d", "a b c d e"})), 100.0 * 2.0 / 3.0, 1e-12);
  EXPECT_THROW(distinct_4(words({"a b"})), ConfigError);
}

TEST(Coverage, HeadAndTailAtTokenBoundaries) {
  const std::vector<KnowledgeTriple> kb{{"cup", "AtLocation", "kitchen"},
                                        {"cup", "MadeOf", "glass"},
                                        {"ice cream", "HasProperty", "cold"}};
  EXPECT_NEAR(coverage({"The Cup is in the kitchen.", "the cupboard is glass."}, kb), 0.5, 1e-12);
  EXPECT_NEAR(coverage({"the cup of glass sat in the kitchen", "ice cream is cold!"}, kb), 1.5, 1e-12);
  EXPECT_EQ(coverage({"ice and cream are cold."}, kb), 0.0);
}

TEST(Perplexity, UniformModelEqualsVocabularySize) {
  const auto p = uniform_model();
  EXPECT_NEAR(text_perplexity(p, tokenizer(), "the cup is red."), static_cast<double>(tokenizer().vocab_size()), 1e-9);
  EXPECT_NEAR(perplexity(p, tokenizer(), {"a b.", "the kitchen is big."}), static_cast<double>(tokenizer().vocab_size()),
              1e-9);
}

TEST(Perplexity, MatchesDirectSoftmaxOracle) {
  const auto p = init_params(model_config(), 2);
  const std::vector<std::string> texts{"the cup is red.", "[MALE] went to the park after reading."};
  double nll = 0;
  std::size_t n = 0;
  for (const auto& t : texts) {
    auto content = tokenizer().encode(t);
    content.push_back(tokenizer().eot_id());
    std::vector<TokenId> input{tokenizer().eot_id()};
    input.insert(input.end(), content.begin(), content.end() - 1);
    const auto out = forward_lm(p, input);
    const std::size_t V = out.logits.dim(1);
    for (std::size_t i = 0; i < content.size(); ++i) {
      double z = 0;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(out.logits[i * V + v]);
      nll -= out.logits[i * V + static_cast<std::size_t>(content[i])] - std::log(z);
    }
    n += content.size();
  }
  EXPECT_NEAR(perplexity(p, tokenizer(), texts), std::exp(nll / n), 1e-9);
  EXPECT_EQ(perplexity(p, tokenizer(), texts, 1), perplexity(p, tokenizer(), texts, 4));
  EXPECT_THROW(perplexity(p, tokenizer(), {}), ConfigError);
}

TEST(Ranking, TiesCountAsIncorrect) {
  // Identical candidate texts score identically, so the true story is never a strict minimum.
  const auto p = init_params(model_config(), 5);
  const Story same{"t", {"a cup.", "a cup.", "a cup.", "a cup.", "a cup."}};
  EXPECT_EQ(logic_ranking(p, tokenizer(), {same}).accuracy, 0.0);
  const std::vector<RelationEvalSentences> items{{"a cup is red.", "a cup is red.", "a cup is red."}};
  const auto r = relation_ranking(p, tokenizer(), items);
  EXPECT_EQ(r.accuracy, 0.0);
  EXPECT_EQ(r.c_vs_w + r.w_vs_c + r.t_vs_c + r.c_vs_t + r.t_vs_w + r.w_vs_t, 0.0);
  // Distinct texts: the wrong sentence must beat both others.
  const std::vector<RelationEvalSentences> two{{"a cup is red.", "a cup is red.", "zq zq zq zq."}};
  const auto r2 = relation_ranking(p, tokenizer(), two);
  const double t = text_perplexity(p, tokenizer(), "a cup is red.");
  const double w = text_perplexity(p, tokenizer(), "zq zq zq zq.");
  EXPECT_EQ(r2.accuracy, w > t ? 100.0 : 0.0);
  EXPECT_EQ(r2.c_vs_w, t < w ? 100.0 : 0.0);
}

TEST(Ranking, AdjacentSwapsAndValidation) {
  const std::vector<std::string> s{"1.", "2.", "3.", "4.", "5."};
  const auto v = adjacent_swaps(s);
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v[0], (std::vector<std::string>{"2.", "1.", "3.", "4.", "5."}));
  EXPECT_EQ(v[3], (std::vector<std::string>{"1.", "2.", "3.", "5.", "4."}));
  const auto p = uniform_model();
  EXPECT_THROW(logic_ranking(p, tokenizer(), {Story{"x", {"a.", "b."}}}), ConfigError);
  EXPECT_THROW(beginning_ranking(p, tokenizer(), fixtures::synthetic_stories(9, 1), 1), ConfigError);
}

TEST(Ranking, DeterministicAcrossThreadCounts) {
  const auto p = init_params(model_config(), 3);
  const auto stories = fixtures::synthetic_stories(15, 6);
  const auto a = beginning_ranking(p, tokenizer(), stories, 4, 1);
  const auto b = beginning_ranking(p, tokenizer(), stories, 4, 3);
  EXPECT_EQ(a.correct, b.correct);
  EXPECT_EQ(logic_ranking(p, tokenizer(), stories, 1).correct, logic_ranking(p, tokenizer(), stories, 2).correct);
}

TEST(Classifier, ConstantPredictorReport) {
  auto p = init_params(model_config(), 4);
  for (auto& v : p.cls_w.mutable_data()) v = 0.0;
  p.cls_b.mutable_data()[0] = 5.0;
  const auto data = build_multitask_dataset(fixtures::synthetic_stories(5, 2), 2, &tokenizer());
  const auto r = classifier_report(p, tokenizer(), data, {"the cup is red.", "a b."});
  EXPECT_NEAR(r.precision[0], 0.25, 1e-12);
  EXPECT_NEAR(r.recall[0], 1.0, 1e-12);
  EXPECT_NEAR(r.f1[0], 0.4, 1e-12);
  EXPECT_EQ(r.f1[1], 0.0);
  EXPECT_NEAR(r.accuracy, 0.25, 1e-12);
  EXPECT_EQ(r.confusion[3][0], 5u);
  EXPECT_EQ(r.predicted_distribution[0], 100.0);
  EXPECT_EQ(r.to_json()["f1"]["D1"].get<double>(), r.f1[0]);
}

TEST(Binomial, ExactTwoSided) {
  EXPECT_NEAR(binomial_two_sided_p(5, 10, 0.5), 1.0, 1e-12);
  EXPECT_NEAR(binomial_two_sided_p(0, 10, 0.5), 2.0 / 1024.0, 1e-12);
  // Brute force with an asymmetric null.
  const std::size_t n = 20;
  const double q = 0.1;
  for (std::size_t k : {0u, 2u, 5u, 9u}) {
    std::vector<double> pmf(n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
      double c = 1;
      for (std::size_t j = 0; j < i; ++j) c = c * static_cast<double>(n - j) / static_cast<double>(j + 1);
      pmf[i] = c * std::pow(q, i) * std::pow(1 - q, n - i);
    }
    double expect = 0;
    for (double x : pmf) expect += x <= pmf[k] * (1 + 1e-12) ? x : 0.0;
    EXPECT_NEAR(binomial_two_sided_p(k, n, q), std::min(1.0, expect), 1e-10) << k;
  }
}
