#pragma once

// Decoder-only transformer language model with a mean-pooled story classifier.
//
// Block layout is pre-norm:
//   x = x + Attn(LN1(x));  x = x + MLP(LN2(x))
// and the final hidden state is LNf(x). Logits are hidden * W + b with an
// untied W unless `tie_weights` is set, in which case W = E^T.

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kestory/error.hpp"
#include "kestory/rng.hpp"
#include "kestory/tensor.hpp"
#include "kestory/tokenizer.hpp"

namespace kestory {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 512;
  std::size_t max_seq_len = 128;
  std::size_t n_classes = 4;
  bool tie_weights = false;
  double layer_norm_eps = 1e-5;
  double init_std = 0.02;
  double dropout = 0.0;

  void validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 || max_seq_len == 0 ||
        n_classes == 0) {
      throw ConfigError("model dimensions must all be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},       {"d_model", c.d_model},         {"n_heads", c.n_heads},
       {"d_ff", c.d_ff},               {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
       {"n_classes", c.n_classes},     {"tie_weights", c.tie_weights}, {"layer_norm_eps", c.layer_norm_eps},
       {"init_std", c.init_std},       {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("n_classes").get_to(c.n_classes);
  j.at("tie_weights").get_to(c.tie_weights);
  j.at("layer_norm_eps").get_to(c.layer_norm_eps);
  j.at("init_std").get_to(c.init_std);
  j.at("dropout").get_to(c.dropout);
}

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor attn_w, attn_b;  // [d, 3d] packed q|k|v
  Tensor proj_w, proj_b;  // [d, d]
  Tensor ln2_gain, ln2_bias;
  Tensor fc_w, fc_b;      // [d, d_ff]
  Tensor out_w, out_b;    // [d_ff, d]
};

struct ModelParams {
  ModelConfig config;
  Tensor token_embedding;       // [V, d]
  Tensor position_embedding;    // [max_seq_len, d]
  std::vector<BlockParams> blocks;
  Tensor lnf_gain, lnf_bias;
  Tensor lm_head_w, lm_head_b;  // [d, V], [V]; lm_head_w undefined when tied
  Tensor cls_w, cls_b;          // [d, n_classes], [n_classes]

  // Every parameter tensor in a fixed order, with stable names.
  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out{{"wte", token_embedding}, {"wpe", position_embedding}};
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto& b = blocks[l];
      const std::string p = "h." + std::to_string(l) + ".";
      out.insert(out.end(), {{p + "ln1.g", b.ln1_gain},
                             {p + "ln1.b", b.ln1_bias},
                             {p + "attn.w", b.attn_w},
                             {p + "attn.b", b.attn_b},
                             {p + "proj.w", b.proj_w},
                             {p + "proj.b", b.proj_b},
                             {p + "ln2.g", b.ln2_gain},
                             {p + "ln2.b", b.ln2_bias},
                             {p + "fc.w", b.fc_w},
                             {p + "fc.b", b.fc_b},
                             {p + "out.w", b.out_w},
                             {p + "out.b", b.out_b}});
    }
    out.insert(out.end(), {{"lnf.g", lnf_gain}, {"lnf.b", lnf_bias}});
    if (!config.tie_weights) out.emplace_back("lm_head.w", lm_head_w);
    out.insert(out.end(), {{"lm_head.b", lm_head_b}, {"cls.w", cls_w}, {"cls.b", cls_b}});
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& [_, t] : named()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += t.size();
    return n;
  }

  void zero_grad() const {
    for (auto t : tensors()) t.zero_grad();
  }

  // Deep copy: fresh leaves with the same values.
  ModelParams clone() const {
    ModelParams c = *this;
    auto copy = [](Tensor& t) {
      if (t.defined()) t = t.detach(t.requires_grad());
    };
    copy(c.token_embedding);
    copy(c.position_embedding);
    for (auto& b : c.blocks) {
      for (auto* t : {&b.ln1_gain, &b.ln1_bias, &b.attn_w, &b.attn_b, &b.proj_w, &b.proj_b, &b.ln2_gain, &b.ln2_bias,
                      &b.fc_w, &b.fc_b, &b.out_w, &b.out_b}) {
        copy(*t);
      }
    }
    for (auto* t : {&c.lnf_gain, &c.lnf_bias, &c.lm_head_w, &c.lm_head_b, &c.cls_w, &c.cls_b}) copy(*t);
    return c;
  }
};

// Normal(0, init_std) for embeddings and projection matrices, zeros for
// biases, ones for layer-norm gains.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "init"));
  const auto d = cfg.d_model;
  auto normal = [&](Shape s) {
    std::vector<double> v(shape_size(s));
    for (auto& x : v) x = rng.normal() * cfg.init_std;
    return Tensor::from(std::move(s), std::move(v), true);
  };
  auto zeros = [](Shape s) { return Tensor::zeros(std::move(s), true); };
  auto ones = [](Shape s) {
    const auto n = shape_size(s);
    return Tensor::from(std::move(s), std::vector<double>(n, 1.0), true);
  };
  ModelParams p;
  p.config = cfg;
  p.token_embedding = normal({cfg.vocab_size, d});
  p.position_embedding = normal({cfg.max_seq_len, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockParams b;
    b.ln1_gain = ones({d});
    b.ln1_bias = zeros({d});
    b.attn_w = normal({d, 3 * d});
    b.attn_b = zeros({3 * d});
    b.proj_w = normal({d, d});
    b.proj_b = zeros({d});
    b.ln2_gain = ones({d});
    b.ln2_bias = zeros({d});
    b.fc_w = normal({d, cfg.d_ff});
    b.fc_b = zeros({cfg.d_ff});
    b.out_w = normal({cfg.d_ff, d});
    b.out_b = zeros({d});
    p.blocks.push_back(std::move(b));
  }
  p.lnf_gain = ones({d});
  p.lnf_bias = zeros({d});
  if (!cfg.tie_weights) p.lm_head_w = normal({d, cfg.vocab_size});
  p.lm_head_b = zeros({cfg.vocab_size});
  p.cls_w = normal({d, cfg.n_classes});
  p.cls_b = zeros({cfg.n_classes});
  return p;
}

struct ForwardOutput {
  Tensor hidden;  // [T, d], final layer-normed states
  Tensor logits;  // [T, V]
};

namespace detail {

inline Tensor attention(const BlockParams& b, const Tensor& x, std::size_t n_heads) {
  const auto d = x.dim(1);
  const auto hd = d / n_heads;
  const Tensor qkv = add_bias(matmul(x, b.attn_w), b.attn_b);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Tensor q = slice_cols(qkv, h * hd, hd);
    const Tensor k = slice_cols(qkv, d + h * hd, hd);
    const Tensor v = slice_cols(qkv, 2 * d + h * hd, hd);
    const Tensor weights = causal_softmax(scale(matmul(q, transpose(k)), inv_sqrt));
    heads.push_back(matmul(weights, v));
  }
  return add_bias(matmul(concat_cols(heads), b.proj_w), b.proj_b);
}

}  // namespace detail

// Final hidden states H^L for a token sequence. `dropout_rng` is only used when
// the configured dropout rate is positive.
inline Tensor forward_hidden(const ModelParams& p, std::span<const TokenId> tokens, Rng* dropout_rng = nullptr) {
  const auto& cfg = p.config;
  if (tokens.empty()) throw ShapeError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw ShapeError("forward: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  std::vector<TokenId> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i);
  const double rate = dropout_rng ? cfg.dropout : 0.0;
  auto drop = [&](const Tensor& t) { return rate > 0.0 ? dropout(t, rate, *dropout_rng) : t; };

  Tensor x = drop(add(embedding(p.token_embedding, tokens), embedding(p.position_embedding, positions)));
  for (const auto& b : p.blocks) {
    x = add(x, drop(detail::attention(b, layer_norm(x, b.ln1_gain, b.ln1_bias, cfg.layer_norm_eps), cfg.n_heads)));
    const Tensor h = gelu(add_bias(matmul(layer_norm(x, b.ln2_gain, b.ln2_bias, cfg.layer_norm_eps), b.fc_w), b.fc_b));
    x = add(x, drop(add_bias(matmul(h, b.out_w), b.out_b)));
  }
  return layer_norm(x, p.lnf_gain, p.lnf_bias, cfg.layer_norm_eps);
}

inline Tensor lm_logits(const ModelParams& p, const Tensor& hidden) {
  const Tensor w = p.config.tie_weights ? transpose(p.token_embedding) : p.lm_head_w;
  return add_bias(matmul(hidden, w), p.lm_head_b);
}

inline ForwardOutput forward_lm(const ModelParams& p, std::span<const TokenId> tokens, Rng* dropout_rng = nullptr) {
  Tensor hidden = forward_hidden(p, tokens, dropout_rng);
  Tensor logits = lm_logits(p, hidden);
  return {std::move(hidden), std::move(logits)};
}

inline std::vector<double> next_token_distribution(const ForwardOutput& out, std::size_t position) {
  const auto t = out.logits.dim(0), v = out.logits.dim(1);
  if (position >= t) throw ShapeError("next_token_distribution: position " + std::to_string(position) + " >= " + std::to_string(t));
  NoGradGuard guard;
  const Tensor row = Tensor::from({v}, {out.logits.data().begin() + position * v, out.logits.data().begin() + (position + 1) * v});
  const Tensor probs = softmax(row, 0);
  return {probs.data().begin(), probs.data().end()};
}

// Classifier logits: mean of H^L over all positions, then W_L, b_L.
inline Tensor class_logits(const ModelParams& p, const Tensor& hidden) {
  return add_bias(matmul(mean_rows(hidden), p.cls_w), p.cls_b);
}

inline std::vector<double> classify_story(const ModelParams& p, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ShapeError("classify_story: empty story");
  NoGradGuard guard;
  const Tensor probs = softmax(class_logits(p, forward_hidden(p, tokens)), 1);
  return {probs.data().begin(), probs.data().end()};
}

}  // namespace kestory
