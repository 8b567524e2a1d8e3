#pragma once

// Top-k temperature sampling and story generation.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kestory/corpus.hpp"
#include "kestory/error.hpp"
#include "kestory/rng.hpp"
#include "kestory/tokenizer.hpp"
#include "kestory/transformer.hpp"

namespace kestory {

struct GenerationConfig {
  std::size_t k = 40;
  double temperature = 0.7;
  std::size_t target_sentences = 4;
  std::size_t max_tokens = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1) throw ConfigError("top-k must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (target_sentences < 1) throw ConfigError("sentence count must be >= 1");
    if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
  }
};

// Indices of the k largest logits, ordered by (value desc, id asc).
inline std::vector<std::size_t> top_k_indices(std::span<const double> logits, std::size_t k) {
  std::vector<std::size_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  });
  idx.resize(k);
  return idx;
}

// Divides by temperature, keeps the k largest, samples from their softmax.
inline TokenId sample_next(std::span<const double> logits, const GenerationConfig& config, Rng& rng) {
  if (logits.empty()) throw ConfigError("sample_next: empty logits");
  for (double x : logits) {
    if (!std::isfinite(x)) throw NumericError("sample_next: non-finite logit");
  }
  const auto top = top_k_indices(logits, config.k);
  std::vector<double> w(top.size());
  const double mx = logits[top.front()] / config.temperature;
  double z = 0.0;
  for (std::size_t i = 0; i < top.size(); ++i) z += (w[i] = std::exp(logits[top[i]] / config.temperature - mx));
  double u = rng.uniform01() * z;
  for (std::size_t i = 0; i < top.size(); ++i) {
    if (u < w[i]) return static_cast<TokenId>(top[i]);
    u -= w[i];
  }
  return static_cast<TokenId>(top.back());
}

// Leading sentences of `text` that end in terminal punctuation.
inline std::vector<std::string> complete_sentences(const std::string& text) {
  auto sents = segment_sentences(text);
  if (!sents.empty() && !is_terminal(sents.back().back())) sents.pop_back();
  return sents;
}

struct GeneratedStory {
  std::string context;
  std::vector<std::string> sentences;

  std::string text() const {
    std::string s;
    for (const auto& x : sentences) s += (s.empty() ? "" : " ") + x;
    return s;
  }
  nlohmann::json to_json() const { return {{"context", context}, {"sentences", sentences}}; }
};

namespace detail {

// Samples after `prompt` until enough complete sentences exist, end-of-text is
// drawn, or the token budget runs out. Returns the first `target_sentences`
// complete sentences of the continuation.
inline std::vector<std::string> continue_prompt(const ModelParams& p, const TokenizerModel& tok,
                                                std::vector<TokenId> prompt, const GenerationConfig& config,
                                                Rng& rng) {
  config.validate();
  std::vector<TokenId> generated;
  std::vector<std::string> sents;
  NoGradGuard guard;
  while (generated.size() < config.max_tokens && prompt.size() < p.config.max_seq_len) {
    const auto out = forward_lm(p, prompt);
    const auto v = out.logits.dim(1);
    const auto last = out.logits.data().subspan((prompt.size() - 1) * v, v);
    const TokenId next = sample_next(last, config, rng);
    if (next == tok.eot_id()) break;
    prompt.push_back(next);
    generated.push_back(next);
    if (!tok.is_special(next)) {
      sents = complete_sentences(tok.decode(generated));
      if (sents.size() >= config.target_sentences) break;
    }
  }
  sents = complete_sentences(tok.decode(generated));
  if (sents.size() > config.target_sentences) sents.resize(config.target_sentences);
  return sents;
}

inline void check_prompt(const std::vector<TokenId>& prompt, const ModelParams& p) {
  if (prompt.size() >= p.config.max_seq_len) {
    throw ConfigError("prompt of " + std::to_string(prompt.size()) + " tokens leaves no room in the token budget of " +
                      std::to_string(p.config.max_seq_len));
  }
}

}  // namespace detail

inline GeneratedStory generate_story(const ModelParams& p, const TokenizerModel& tok, const std::string& context,
                                     const GenerationConfig& config, Rng& rng) {
  std::vector<TokenId> prompt{tok.eot_id()};
  const auto ctx = tok.encode(context);
  prompt.insert(prompt.end(), ctx.begin(), ctx.end());
  detail::check_prompt(prompt, p);
  return {context, detail::continue_prompt(p, tok, std::move(prompt), config, rng)};
}

// Conditions on example stories separated by end-of-text, then the beginning.
inline GeneratedStory generate_zero_shot(const ModelParams& p, const TokenizerModel& tok,
                                         const std::vector<std::string>& example_stories, const std::string& beginning,
                                         const GenerationConfig& config, Rng& rng) {
  std::vector<TokenId> prompt{tok.eot_id()};
  for (const auto& ex : example_stories) {
    const auto ids = tok.encode(ex);
    prompt.insert(prompt.end(), ids.begin(), ids.end());
    prompt.push_back(tok.eot_id());
  }
  const auto ctx = tok.encode(beginning);
  prompt.insert(prompt.end(), ctx.begin(), ctx.end());
  detail::check_prompt(prompt, p);
  return {beginning, detail::continue_prompt(p, tok, std::move(prompt), config, rng)};
}

}  // namespace kestory
