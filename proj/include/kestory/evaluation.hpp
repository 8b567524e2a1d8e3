#pragma once

// Automatic metrics: perplexity, corpus BLEU, knowledge coverage,
// repetition-4, distinct-4, perplexity-based ranking tests, and the story
// classifier report.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kestory/corpus.hpp"
#include "kestory/decoding.hpp"
#include "kestory/error.hpp"
#include "kestory/knowledge.hpp"
#include "kestory/rng.hpp"
#include "kestory/tokenizer.hpp"
#include "kestory/training.hpp"
#include "kestory/transformer.hpp"

namespace kestory {

// Whitespace split with leading/trailing sentence punctuation (.,!?;:") peeled
// off as separate tokens. Bracketed placeholders stay whole.
inline std::vector<std::string> word_tokens(std::string_view text, bool lowercase = false) {
  static constexpr std::string_view punct = ".,!?;:\"";
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::string_view w = text.substr(i, j - i);
    std::vector<std::string> trailing;
    while (!w.empty() && punct.find(w.front()) != std::string_view::npos) {
      out.emplace_back(1, w.front());
      w.remove_prefix(1);
    }
    while (!w.empty() && punct.find(w.back()) != std::string_view::npos) {
      trailing.emplace_back(1, w.back());
      w.remove_suffix(1);
    }
    if (!w.empty()) {
      std::string s(w);
      if (lowercase) {
        for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      }
      out.push_back(std::move(s));
    }
    out.insert(out.end(), trailing.rbegin(), trailing.rend());
    i = j;
  }
  return out;
}

// ---------------------------------------------------------------------------
// N-gram metrics (generic over the token type)

template <typename Tok>
std::map<std::vector<Tok>, std::size_t> ngram_counts(const std::vector<Tok>& seq, std::size_t n) {
  std::map<std::vector<Tok>, std::size_t> counts;
  if (n == 0 || seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[std::vector<Tok>(seq.begin() + i, seq.begin() + i + n)];
  return counts;
}

// Corpus-level BLEU with uniform weights over 1..n, clipped counts, no
// smoothing, and brevity penalty min(1, exp(1 - r/c)).
template <typename Tok>
double bleu_n(const std::vector<std::vector<Tok>>& hypotheses, const std::vector<std::vector<Tok>>& references,
              std::size_t n) {
  if (hypotheses.size() != references.size()) {
    throw ConfigError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses for " +
                      std::to_string(references.size()) + " references");
  }
  if (n == 0) throw ConfigError("bleu: n must be >= 1");
  std::vector<std::size_t> matched(n, 0), total(n, 0);
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    hyp_len += hypotheses[s].size();
    ref_len += references[s].size();
    for (std::size_t m = 1; m <= n; ++m) {
      const auto hc = ngram_counts(hypotheses[s], m);
      const auto rc = ngram_counts(references[s], m);
      for (const auto& [g, c] : hc) {
        total[m - 1] += c;
        auto it = rc.find(g);
        if (it != rc.end()) matched[m - 1] += std::min(c, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t m = 0; m < n; ++m) {
    if (matched[m] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[m]) / static_cast<double>(total[m]));
  }
  const double bp =
      hyp_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return bp * std::exp(log_sum / static_cast<double>(n));
}

inline double bleu_n(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                     std::size_t n) {
  std::vector<std::vector<std::string>> h, r;
  for (const auto& x : hypotheses) h.push_back(word_tokens(x));
  for (const auto& x : references) r.push_back(word_tokens(x));
  return bleu_n(h, r, n);
}

// Percentage of stories in which some 4-gram occurs at least twice.
template <typename Tok>
double repetition_4(const std::vector<std::vector<Tok>>& stories) {
  if (stories.empty()) return 0.0;
  std::size_t repetitive = 0;
  for (const auto& s : stories) {
    const auto counts = ngram_counts(s, 4);
    repetitive += std::any_of(counts.begin(), counts.end(), [](const auto& kv) { return kv.second >= 2; });
  }
  return 100.0 * static_cast<double>(repetitive) / static_cast<double>(stories.size());
}

// 100 * distinct 4-grams / all 4-grams, pooled over the corpus.
template <typename Tok>
double distinct_4(const std::vector<std::vector<Tok>>& stories) {
  std::set<std::vector<Tok>> unique;
  std::size_t total = 0;
  for (const auto& s : stories) {
    for (const auto& [g, c] : ngram_counts(s, 4)) {
      unique.insert(g);
      total += c;
    }
  }
  if (total == 0) throw ConfigError("distinct_4: corpus has no 4-grams");
  return 100.0 * static_cast<double>(unique.size()) / static_cast<double>(total);
}

namespace detail {

inline bool contains_phrase(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace detail

// Mean number of triples per story whose head and tail both occur as
// lowercase token-boundary phrases.
inline double coverage(const std::vector<std::string>& stories, const std::vector<KnowledgeTriple>& triples) {
  if (stories.empty() || triples.empty()) return 0.0;
  std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> phrases;
  for (const auto& t : triples) phrases.emplace_back(word_tokens(t.head, true), word_tokens(t.tail, true));
  std::size_t matches = 0;
  for (const auto& s : stories) {
    const auto words = word_tokens(s, true);
    for (const auto& [h, t] : phrases) matches += detail::contains_phrase(words, h) && detail::contains_phrase(words, t);
  }
  return static_cast<double>(matches) / static_cast<double>(stories.size());
}

// ---------------------------------------------------------------------------
// Model-based scoring

// Summed negative log-likelihood and token count of `text` + end-of-text,
// read after an end-of-text start marker.
inline std::pair<double, std::size_t> text_nll(const ModelParams& p, const TokenizerModel& tok, const std::string& text) {
  const auto ex = make_lm_example(encode_story(tok, text), tok.eot_id());
  NoGradGuard guard;
  const auto out = forward_lm(p, ex.input);
  const double mean = cross_entropy(out.logits, ex.targets).item();
  return {mean * static_cast<double>(ex.targets.size()), ex.targets.size()};
}

inline double text_perplexity(const ModelParams& p, const TokenizerModel& tok, const std::string& text) {
  const auto [nll, n] = text_nll(p, tok, text);
  return std::exp(nll / static_cast<double>(n));
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// exp of the mean per-token NLL over all texts.
inline double perplexity(const ModelParams& p, const TokenizerModel& tok, const std::vector<std::string>& texts,
                         std::size_t threads = 1) {
  if (texts.empty()) throw ConfigError("perplexity: no texts");
  std::vector<std::pair<double, std::size_t>> parts(texts.size());
  parallel_for(texts.size(), threads, [&](std::size_t i) { parts[i] = text_nll(p, tok, texts[i]); });
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& [a, b] : parts) {
    nll += a;
    n += b;
  }
  return std::exp(nll / static_cast<double>(n));
}

struct RankingResult {
  double accuracy = 0.0;
  std::size_t n_items = 0;
  std::vector<bool> correct;
};

namespace detail {

// Correct iff candidate 0 has strictly the lowest perplexity.
inline bool first_is_strict_min(const std::vector<double>& ppl) {
  for (std::size_t i = 1; i < ppl.size(); ++i) {
    if (!(ppl[0] < ppl[i])) return false;
  }
  return true;
}

inline RankingResult finish_ranking(std::vector<bool> correct) {
  RankingResult r;
  r.n_items = correct.size();
  r.accuracy = r.n_items ? static_cast<double>(std::count(correct.begin(), correct.end(), true)) /
                               static_cast<double>(r.n_items)
                         : 0.0;
  r.correct = std::move(correct);
  return r;
}

}  // namespace detail

// Each story against 9 variants whose beginning comes from other stories
// (distinct beginnings, sampled with a per-item stream from (seed, item)).
inline RankingResult beginning_ranking(const ModelParams& p, const TokenizerModel& tok, const std::vector<Story>& stories,
                                       std::uint64_t seed, std::size_t threads = 1, std::size_t negatives = 9) {
  std::set<std::string> beginnings;
  for (const auto& s : stories) beginnings.insert(s.context());
  if (stories.size() < negatives + 1 || beginnings.size() < negatives + 1) {
    throw ConfigError("beginning_ranking needs at least " + std::to_string(negatives + 1) +
                      " stories with distinct beginnings");
  }
  std::vector<char> correct(stories.size());
  parallel_for(stories.size(), threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, "br:" + std::to_string(i)));
    const auto& s = stories[i];
    const auto cont = split_example(s).continuation;
    std::string tail;
    for (const auto& c : cont) tail += " " + c;
    std::set<std::string> used{s.context()};
    std::vector<double> ppl{text_perplexity(p, tok, s.text())};
    while (ppl.size() < negatives + 1) {
      const auto& other = stories[rng.uniform_index(stories.size())];
      if (!used.insert(other.context()).second) continue;
      ppl.push_back(text_perplexity(p, tok, other.context() + tail));
    }
    correct[i] = detail::first_is_strict_min(ppl);
  });
  return detail::finish_ranking({correct.begin(), correct.end()});
}

// The four adjacent swaps (i, i+1) of a five-sentence story.
inline std::vector<std::vector<std::string>> adjacent_swaps(const std::vector<std::string>& sentences) {
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i + 1 < sentences.size(); ++i) {
    auto v = sentences;
    std::swap(v[i], v[i + 1]);
    out.push_back(std::move(v));
  }
  return out;
}

inline RankingResult logic_ranking(const ModelParams& p, const TokenizerModel& tok, const std::vector<Story>& stories,
                                   std::size_t threads = 1) {
  for (const auto& s : stories) {
    if (s.sentences.size() != 5) {
      throw ConfigError("logic_ranking: story " + s.id + " has " + std::to_string(s.sentences.size()) +
                        " sentences, expected 5");
    }
  }
  std::vector<char> correct(stories.size());
  parallel_for(stories.size(), threads, [&](std::size_t i) {
    const auto& s = stories[i];
    std::vector<double> ppl{text_perplexity(p, tok, s.text())};
    for (auto& v : adjacent_swaps(s.sentences)) ppl.push_back(text_perplexity(p, tok, Story{s.id, v}.text()));
    correct[i] = detail::first_is_strict_min(ppl);
  });
  return detail::finish_ranking({correct.begin(), correct.end()});
}

struct RelationRankingResult {
  double accuracy = 0.0;  // percent of items where the wrong sentence has the strictly highest perplexity
  std::size_t n_items = 0;
  // Win rates in percent; a win is strictly lower perplexity.
  double c_vs_w = 0.0, w_vs_c = 0.0;
  double t_vs_c = 0.0, c_vs_t = 0.0;
  double t_vs_w = 0.0, w_vs_t = 0.0;
  std::vector<bool> correct;

  nlohmann::json to_json() const {
    return {{"accuracy", accuracy}, {"n_items", n_items}, {"c_vs_w", c_vs_w}, {"w_vs_c", w_vs_c},
            {"t_vs_c", t_vs_c},     {"c_vs_t", c_vs_t},   {"t_vs_w", t_vs_w}, {"w_vs_t", w_vs_t}};
  }
};

inline RelationRankingResult relation_ranking(const ModelParams& p, const TokenizerModel& tok,
                                              const std::vector<RelationEvalSentences>& items, std::size_t threads = 1) {
  RelationRankingResult r;
  r.n_items = items.size();
  if (items.empty()) return r;
  std::vector<std::array<double, 3>> ppl(items.size());  // training, correct, wrong
  parallel_for(items.size(), threads, [&](std::size_t i) {
    ppl[i] = {text_perplexity(p, tok, items[i].training), text_perplexity(p, tok, items[i].correct),
              text_perplexity(p, tok, items[i].wrong)};
  });
  std::size_t acc = 0, cw = 0, wc = 0, tc = 0, ct = 0, tw = 0, wt = 0;
  for (const auto& [t, c, w] : ppl) {
    const bool ok = w > t && w > c;
    r.correct.push_back(ok);
    acc += ok;
    cw += c < w;
    wc += w < c;
    tc += t < c;
    ct += c < t;
    tw += t < w;
    wt += w < t;
  }
  const double n = static_cast<double>(items.size());
  r.accuracy = 100.0 * static_cast<double>(acc) / n;
  r.c_vs_w = 100.0 * static_cast<double>(cw) / n;
  r.w_vs_c = 100.0 * static_cast<double>(wc) / n;
  r.t_vs_c = 100.0 * static_cast<double>(tc) / n;
  r.c_vs_t = 100.0 * static_cast<double>(ct) / n;
  r.t_vs_w = 100.0 * static_cast<double>(tw) / n;
  r.w_vs_t = 100.0 * static_cast<double>(wt) / n;
  return r;
}

inline std::vector<RelationEvalSentences> to_sentences(const std::vector<RelationEvalItem>& items) {
  std::vector<RelationEvalSentences> out;
  for (const auto& it : items) out.push_back({it.training.text, it.correct.text, it.wrong.text});
  return out;
}

// ---------------------------------------------------------------------------
// Classifier report

struct ClassifierReport {
  std::array<double, kNumStoryLabels> precision{}, recall{}, f1{};
  double accuracy = 0.0;
  std::array<std::array<std::size_t, kNumStoryLabels>, kNumStoryLabels> confusion{};  // [gold][predicted]
  std::array<double, kNumStoryLabels> predicted_distribution{};  // percent of generated stories per class
  std::size_t n_labeled = 0;
  std::size_t n_generated = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (std::size_t c = 0; c < kNumStoryLabels; ++c) {
      const auto name = to_string(static_cast<StoryLabel>(c));
      j["f1"][name] = f1[c];
      j["precision"][name] = precision[c];
      j["recall"][name] = recall[c];
      j["predicted_distribution_pct"][name] = predicted_distribution[c];
    }
    j["accuracy"] = accuracy;
    j["confusion"] = confusion;
    j["n_labeled"] = n_labeled;
    j["n_generated"] = n_generated;
    return j;
  }
};

inline std::size_t predict_class(const ModelParams& p, std::span<const TokenId> story_tokens, TokenId eot) {
  const auto ex = make_lm_example(story_tokens, eot);
  const auto probs = classify_story(p, ex.input);
  return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

// Argmax predictions; per-class F1 on the labeled set and the predicted-type
// distribution of generated stories. Labeled records must be tokenized.
inline ClassifierReport classifier_report(const ModelParams& p, const TokenizerModel& tok,
                                          const std::vector<LabeledStory>& labeled,
                                          const std::vector<std::string>& generated, std::size_t threads = 1) {
  ClassifierReport r;
  r.n_labeled = labeled.size();
  r.n_generated = generated.size();
  std::vector<std::size_t> pred(labeled.size());
  parallel_for(labeled.size(), threads, [&](std::size_t i) {
    const auto tokens = labeled[i].tokens.empty() ? encode_story(tok, labeled[i].text()) : labeled[i].tokens;
    pred[i] = predict_class(p, tokens, tok.eot_id());
  });
  std::size_t right = 0;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const auto gold = static_cast<std::size_t>(labeled[i].label);
    ++r.confusion[gold][pred[i]];
    right += gold == pred[i];
  }
  r.accuracy = labeled.empty() ? 0.0 : static_cast<double>(right) / static_cast<double>(labeled.size());
  for (std::size_t c = 0; c < kNumStoryLabels; ++c) {
    std::size_t tp = r.confusion[c][c], pred_c = 0, gold_c = 0;
    for (std::size_t k = 0; k < kNumStoryLabels; ++k) {
      pred_c += r.confusion[k][c];
      gold_c += r.confusion[c][k];
    }
    r.precision[c] = pred_c ? static_cast<double>(tp) / static_cast<double>(pred_c) : 0.0;
    r.recall[c] = gold_c ? static_cast<double>(tp) / static_cast<double>(gold_c) : 0.0;
    const double s = r.precision[c] + r.recall[c];
    r.f1[c] = s > 0.0 ? 2.0 * r.precision[c] * r.recall[c] / s : 0.0;
  }
  std::vector<std::size_t> gen_pred(generated.size());
  parallel_for(generated.size(), threads,
               [&](std::size_t i) { gen_pred[i] = predict_class(p, encode_story(tok, generated[i]), tok.eot_id()); });
  std::array<std::size_t, kNumStoryLabels> counts{};
  for (auto c : gen_pred) ++counts[c];
  for (std::size_t c = 0; c < kNumStoryLabels; ++c) {
    r.predicted_distribution[c] =
        generated.empty() ? 0.0 : 100.0 * static_cast<double>(counts[c]) / static_cast<double>(generated.size());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  double ppl = 0.0;
  double bleu1 = 0.0;
  double bleu2 = 0.0;
  double coverage = 0.0;
  double repetition4_pct = 0.0;
  double distinct4_pct = 0.0;
  std::size_t n_stories = 0;
  std::optional<double> beginning_ranking_acc;
  std::optional<double> logic_ranking_acc;
  std::optional<RelationRankingResult> relation;
  std::optional<ClassifierReport> classifier;
  std::vector<GeneratedStory> generated;

  nlohmann::json to_json() const {
    nlohmann::json j{{"ppl", ppl},
                     {"bleu1", bleu1},
                     {"bleu2", bleu2},
                     {"coverage", coverage},
                     {"repetition4_pct", repetition4_pct},
                     {"distinct4_pct", distinct4_pct},
                     {"n_stories", n_stories}};
    if (beginning_ranking_acc) j["beginning_ranking_acc"] = *beginning_ranking_acc;
    if (logic_ranking_acc) j["logic_ranking_acc"] = *logic_ranking_acc;
    if (relation) j["relation_ranking"] = relation->to_json();
    if (classifier) j["classifier"] = classifier->to_json();
    return j;
  }
};

// Exact two-sided binomial test p-value (sum of outcomes no more likely than
// the observed one).
inline double binomial_two_sided_p(std::size_t k, std::size_t n, double p) {
  auto log_pmf = [&](std::size_t i) {
    return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(i) + 1.0) -
           std::lgamma(static_cast<double>(n - i) + 1.0) + static_cast<double>(i) * std::log(p) +
           static_cast<double>(n - i) * std::log1p(-p);
  };
  const double observed = log_pmf(k);
  double total = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double lp = log_pmf(i);
    if (lp <= observed + 1e-9) total += std::exp(lp);
  }
  return std::min(1.0, total);
}

}  // namespace kestory
