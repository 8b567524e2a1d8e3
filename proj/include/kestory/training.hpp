#pragma once

// Three-stage training: language-model pretraining on a generic corpus,
// post-training on verbalized knowledge, and multi-task fine-tuning on true and
// fake stories. Also Adam and the checkpoint container.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kestory/corpus.hpp"
#include "kestory/error.hpp"
#include "kestory/rng.hpp"
#include "kestory/tensor.hpp"
#include "kestory/tokenizer.hpp"
#include "kestory/transformer.hpp"

namespace kestory {

enum class Stage { Pretrain, KnowledgePostTrain, FineTuneMultiTask };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::Pretrain:
      return "pretrain";
    case Stage::KnowledgePostTrain:
      return "posttrain";
    case Stage::FineTuneMultiTask:
      return "finetune";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  if (s == "pretrain") return Stage::Pretrain;
  if (s == "posttrain") return Stage::KnowledgePostTrain;
  if (s == "finetune") return Stage::FineTuneMultiTask;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

struct TrainingConfig {
  Stage stage = Stage::Pretrain;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Sequences per step for the language-model stages; origin stories (four
  // records each) per step for fine-tuning.
  std::size_t batch_size = 10;
  std::size_t epochs = 10;
  double lambda = 0.05;
  std::uint64_t seed = 0;
  std::size_t patience = 3;
  bool linear_decay = false;
  // Fine-tuning only: false drops the classification term entirely (pure L_LM
  // on the true stories of each batch).
  bool classification = true;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("Adam betas must lie in [0, 1)");
  }

  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainingConfig& c) {
  j = {{"stage", to_string(c.stage)}, {"learning_rate", c.learning_rate}, {"beta1", c.beta1},
       {"beta2", c.beta2},           {"epsilon", c.epsilon},             {"batch_size", c.batch_size},
       {"epochs", c.epochs},         {"lambda", c.lambda},               {"seed", c.seed},
       {"patience", c.patience},     {"linear_decay", c.linear_decay},   {"classification", c.classification}};
}

inline void from_json(const nlohmann::json& j, TrainingConfig& c) {
  c.stage = parse_stage(j.at("stage").get<std::string>());
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("epsilon").get_to(c.epsilon);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("lambda").get_to(c.lambda);
  j.at("seed").get_to(c.seed);
  j.at("patience").get_to(c.patience);
  j.at("linear_decay").get_to(c.linear_decay);
  j.at("classification").get_to(c.classification);
}

// ---------------------------------------------------------------------------
// Adam

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static OptimizerState for_params(const ModelParams& p) {
    OptimizerState s;
    for (const auto& t : p.tensors()) {
      s.m.emplace_back(t.size(), 0.0);
      s.v.emplace_back(t.size(), 0.0);
    }
    return s;
  }
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// One Adam update with bias correction, reading each tensor's accumulated
// gradient. `learning_rate` overrides config.learning_rate when given.
inline void adam_step(std::vector<Tensor> params, OptimizerState& state, const TrainingConfig& config,
                      std::optional<double> learning_rate = std::nullopt,
                      const std::vector<std::string>* names = nullptr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state has " + std::to_string(state.m.size()) + " slots for " +
                     std::to_string(params.size()) + " tensors");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size()) throw ShapeError("adam_step: moment shape mismatch");
    for (double g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adam_step: non-finite gradient in " +
                           (names ? (*names)[i] : "parameter " + std::to_string(i)));
      }
    }
  }
  ++state.step;
  const double lr = learning_rate.value_or(config.learning_rate);
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      w[k] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Losses

// A training sequence: the model reads `input` and predicts `targets`
// position by position. Built from content tokens (ending in end-of-text) by
// prefixing end-of-text as the start marker.
struct LmExample {
  std::vector<TokenId> input;
  std::vector<TokenId> targets;
};

inline LmExample make_lm_example(std::span<const TokenId> content, TokenId eot) {
  if (content.empty()) throw ConfigError("empty training sequence");
  LmExample ex;
  ex.input.push_back(eot);
  ex.input.insert(ex.input.end(), content.begin(), content.end() - 1);
  ex.targets.assign(content.begin(), content.end());
  return ex;
}

// One document per line; each becomes encode(line) + end-of-text.
inline std::vector<LmExample> make_text_examples(const std::vector<std::string>& docs, const TokenizerModel& tok) {
  std::vector<LmExample> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(make_lm_example(encode_story(tok, d), tok.eot_id()));
  return out;
}

// Token-weighted mean next-token cross-entropy over a batch of sequences. The
// same function serves generic pretraining and knowledge post-training.
inline Tensor lm_stage_loss(const ModelParams& p, const std::vector<const LmExample*>& batch, Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw ConfigError("lm_stage_loss: empty batch");
  std::size_t total = 0;
  for (const auto* ex : batch) total += ex->targets.size();
  Tensor loss;
  for (const auto* ex : batch) {
    const auto out = forward_lm(p, ex->input, dropout_rng);
    const Tensor term = scale(cross_entropy(out.logits, ex->targets),
                              static_cast<double>(ex->targets.size()) / static_cast<double>(total));
    loss = loss.defined() ? add(loss, term) : term;
  }
  return loss;
}

inline Tensor lm_stage_loss(const ModelParams& p, const std::vector<LmExample>& batch) {
  std::vector<const LmExample*> ptrs;
  for (const auto& ex : batch) ptrs.push_back(&ex);
  return lm_stage_loss(p, ptrs);
}

struct MultitaskLoss {
  Tensor total;           // L_ST = L_LM + lambda * L_CLS
  Tensor lm;              // over D1 members
  Tensor cls;             // over all members; undefined when classification is off
};

inline MultitaskLoss multitask_loss(const ModelParams& p, const std::vector<const LabeledStory*>& batch, double lambda,
                                    TokenId eot, bool classification = true, Rng* dropout_rng = nullptr) {
  std::size_t lm_tokens = 0;
  std::size_t n_true = 0;
  for (const auto* s : batch) {
    if (s->tokens.empty()) throw ConfigError("multitask_loss: story " + s->origin_id + " is not tokenized");
    if (s->label == StoryLabel::D1) {
      lm_tokens += s->tokens.size();
      ++n_true;
    }
  }
  if (n_true == 0) throw ConfigError("multitask_loss: batch has no true (D1) story, the LM term is undefined");
  Tensor lm, cls;
  for (const auto* s : batch) {
    if (s->label != StoryLabel::D1 && !classification) continue;
    const LmExample ex = make_lm_example(s->tokens, eot);
    const Tensor hidden = forward_hidden(p, ex.input, dropout_rng);
    if (s->label == StoryLabel::D1) {
      const Tensor term = scale(cross_entropy(lm_logits(p, hidden), ex.targets),
                                static_cast<double>(ex.targets.size()) / static_cast<double>(lm_tokens));
      lm = lm.defined() ? add(lm, term) : term;
    }
    if (classification) {
      const TokenId label = static_cast<TokenId>(s->label);
      const Tensor term = scale(cross_entropy(class_logits(p, hidden), std::span<const TokenId>(&label, 1)),
                                1.0 / static_cast<double>(batch.size()));
      cls = cls.defined() ? add(cls, term) : term;
    }
  }
  MultitaskLoss out;
  out.lm = lm;
  out.cls = cls;
  out.total = classification ? add(lm, scale(cls, lambda)) : lm;
  return out;
}

inline MultitaskLoss multitask_loss(const ModelParams& p, const std::vector<LabeledStory>& batch, double lambda,
                                    TokenId eot, bool classification = true) {
  std::vector<const LabeledStory*> ptrs;
  for (const auto& s : batch) ptrs.push_back(&s);
  return multitask_loss(p, ptrs, lambda, eot, classification);
}

// ---------------------------------------------------------------------------
// Checkpoints

struct StageRecord {
  Stage stage = Stage::Pretrain;
  std::size_t epochs_completed = 0;
  std::optional<double> best_val;
  std::size_t best_epoch = 0;
  std::size_t bad_epochs = 0;
  bool finished = false;
  friend bool operator==(const StageRecord&, const StageRecord&) = default;
};

struct Checkpoint {
  ModelParams params;
  OptimizerState optimizer;
  TrainingConfig training;
  std::optional<TokenizerModel> tokenizer;
  std::vector<StageRecord> history;
};

inline Checkpoint new_checkpoint(const ModelConfig& cfg, std::uint64_t seed, std::optional<TokenizerModel> tok) {
  Checkpoint c;
  c.params = init_params(cfg, seed);
  c.optimizer = OptimizerState::for_params(c.params);
  c.tokenizer = std::move(tok);
  return c;
}

inline Checkpoint clone(const Checkpoint& c) {
  Checkpoint out = c;
  out.params = c.params.clone();
  return out;
}

inline constexpr char kCheckpointMagic[8] = {'K', 'S', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_u64(const std::string& in, std::size_t pos, int bytes = 8) {
  std::uint64_t x = 0;
  for (int i = 0; i < bytes; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return x;
}
inline void put_doubles(std::string& out, std::span<const double> v) {
  for (double d : v) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

inline std::string hex64(std::uint64_t x) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, x >>= 4) s[i] = digits[x & 0xF];
  return s;
}

}  // namespace detail

inline nlohmann::json to_json(const StageRecord& r) {
  nlohmann::json j{{"stage", to_string(r.stage)}, {"epochs_completed", r.epochs_completed},
                   {"best_epoch", r.best_epoch},  {"bad_epochs", r.bad_epochs},
                   {"finished", r.finished},      {"best_val", nullptr}};
  if (r.best_val) j["best_val"] = *r.best_val;
  return j;
}

inline StageRecord stage_record_from_json(const nlohmann::json& j) {
  StageRecord r;
  r.stage = parse_stage(j.at("stage").get<std::string>());
  j.at("epochs_completed").get_to(r.epochs_completed);
  j.at("best_epoch").get_to(r.best_epoch);
  j.at("bad_epochs").get_to(r.bad_epochs);
  j.at("finished").get_to(r.finished);
  if (!j.at("best_val").is_null()) r.best_val = j.at("best_val").get<double>();
  return r;
}

// Layout: 8-byte magic, u32 version, u64 header length, header JSON, then the
// tensors listed in the header as little-endian float64: parameters, then Adam
// first moments, then Adam second moments.
inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::json header;
  header["format"] = "kestory-checkpoint";
  header["model"] = c.params.config;
  header["training"] = c.training;
  header["optimizer_step"] = c.optimizer.step;
  header["tokenizer"] = c.tokenizer ? c.tokenizer->to_json() : nlohmann::json(nullptr);
  header["tokenizer_hash"] = c.tokenizer ? detail::hex64(c.tokenizer->hash()) : "";
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : c.history) hist.push_back(to_json(r));
  header["history"] = std::move(hist);
  nlohmann::json tensors = nlohmann::json::array();
  const auto named = c.params.named();
  for (const auto& [name, t] : named) tensors.push_back({{"name", name}, {"shape", t.shape()}});
  header["tensors"] = std::move(tensors);
  if (c.optimizer.m.size() != named.size()) throw CheckpointError("optimizer state does not match parameters");

  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, h.size());
  out += h;
  for (const auto& [_, t] : named) detail::put_doubles(out, t.data());
  for (const auto& m : c.optimizer.m) detail::put_doubles(out, m);
  for (const auto& v : c.optimizer.v) detail::put_doubles(out, v);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  constexpr std::size_t prefix = sizeof(kCheckpointMagic) + 4 + 8;
  if (bytes.size() < prefix || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic or truncated header)");
  }
  const auto version = static_cast<std::uint32_t>(detail::get_u64(bytes, 8, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t hlen = detail::get_u64(bytes, 12);
  if (hlen > bytes.size() - prefix) throw CheckpointError("checkpoint truncated inside header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(prefix, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  Checkpoint c;
  try {
    const auto cfg = header.at("model").get<ModelConfig>();
    c.params = init_params(cfg, 0);
    c.training = header.at("training").get<TrainingConfig>();
    c.optimizer.step = header.at("optimizer_step").get<std::uint64_t>();
    if (!header.at("tokenizer").is_null()) {
      c.tokenizer = TokenizerModel::from_json(header.at("tokenizer"));
      if (detail::hex64(c.tokenizer->hash()) != header.at("tokenizer_hash").get<std::string>()) {
        throw CheckpointError("tokenizer hash mismatch");
      }
    }
    for (const auto& r : header.at("history")) c.history.push_back(stage_record_from_json(r));
    auto named = c.params.named();
    const auto& listed = header.at("tensors");
    if (listed.size() != named.size()) throw CheckpointError("tensor list does not match the model configuration");
    std::size_t total = 0;
    for (std::size_t i = 0; i < named.size(); ++i) {
      if (listed[i].at("name").get<std::string>() != named[i].first ||
          listed[i].at("shape").get<Shape>() != named[i].second.shape()) {
        throw CheckpointError("tensor " + named[i].first + " does not match the header");
      }
      total += named[i].second.size();
    }
    const std::size_t expected = prefix + hlen + 3 * total * 8;
    if (bytes.size() != expected) {
      throw CheckpointError("checkpoint has " + std::to_string(bytes.size()) + " bytes, expected " + std::to_string(expected));
    }
    std::size_t pos = prefix + hlen;
    auto read = [&](std::span<double> dst) {
      for (auto& d : dst) {
        d = std::bit_cast<double>(detail::get_u64(bytes, pos));
        pos += 8;
      }
    };
    for (auto& [_, t] : named) read(t.mutable_data());
    c.optimizer.m.resize(named.size());
    c.optimizer.v.resize(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
      c.optimizer.m[i].resize(named[i].second.size());
      read(c.optimizer.m[i]);
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      c.optimizer.v[i].resize(named[i].second.size());
      read(c.optimizer.v[i]);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  } catch (const ParseError& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + path);
  const auto bytes = serialize_checkpoint(c);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Stage runner

struct Dataset {
  enum class Kind { Text, Labeled };
  Kind kind = Kind::Text;
  std::vector<LmExample> sequences;   // Text
  std::vector<LabeledStory> stories;  // Labeled, tokenized

  static Dataset text(std::vector<LmExample> seqs) { return {Kind::Text, std::move(seqs), {}}; }
  static Dataset labeled(std::vector<LabeledStory> s) { return {Kind::Labeled, {}, std::move(s)}; }
  bool empty() const { return kind == Kind::Text ? sequences.empty() : stories.empty(); }
};

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double lm = 0.0;
  double cls = 0.0;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

struct StageResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
  bool stopped_early = false;
};

namespace detail {

inline void check_stage_data(Stage stage, const Dataset& d, const char* which) {
  const bool want_labeled = stage == Stage::FineTuneMultiTask;
  if (want_labeled && d.kind != Dataset::Kind::Labeled) {
    throw ConfigError(std::string("stage finetune requires a labeled story dataset (build-fakes output) for ") + which +
                      ", got a text corpus meant for pretrain/posttrain");
  }
  if (!want_labeled && d.kind != Dataset::Kind::Text) {
    throw ConfigError("stage " + to_string(stage) + " requires a text corpus for " + which +
                      ", got a labeled story dataset meant for finetune");
  }
  if (d.empty()) throw ConfigError(std::string("empty ") + which + " dataset for stage " + to_string(stage));
}

// Batch units: sequence indices for text, origin-story groups for labeled data.
inline std::vector<std::vector<std::size_t>> batch_units(const Dataset& d) {
  std::vector<std::vector<std::size_t>> units;
  if (d.kind == Dataset::Kind::Text) {
    for (std::size_t i = 0; i < d.sequences.size(); ++i) units.push_back({i});
    return units;
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < d.stories.size(); ++i) {
    auto [it, fresh] = index.emplace(d.stories[i].origin_id, units.size());
    if (fresh) units.emplace_back();
    units[it->second].push_back(i);
  }
  return units;
}

}  // namespace detail

// Loss of the stage objective over a whole dataset, without recording a graph.
// Returns (total, lm, cls); lm/cls equal total for the text stages.
inline std::array<double, 3> evaluate_stage_loss(const ModelParams& p, const Dataset& d, const TrainingConfig& cfg,
                                                 TokenId eot) {
  NoGradGuard guard;
  if (d.kind == Dataset::Kind::Text) {
    double nll = 0.0;
    std::size_t n = 0;
    for (const auto& ex : d.sequences) {
      const auto out = forward_lm(p, ex.input);
      nll += cross_entropy(out.logits, ex.targets).item() * static_cast<double>(ex.targets.size());
      n += ex.targets.size();
    }
    const double l = nll / static_cast<double>(n);
    return {l, l, l};
  }
  std::vector<const LabeledStory*> all;
  for (const auto& s : d.stories) all.push_back(&s);
  const auto loss = multitask_loss(p, all, cfg.lambda, eot, cfg.classification);
  return {loss.total.item(), loss.lm.item(), loss.cls.defined() ? loss.cls.item() : 0.0};
}

using TrainingLogger = std::function<void(const std::string&)>;

// Runs (or resumes) one stage. Each epoch shuffles the batch units with a
// stream derived from (seed, stage, epoch), so an interrupted run resumed from
// its last checkpoint replays the same batches. `stop_after` ends this call
// after that many epochs in total without marking the stage finished.
inline StageResult run_stage(const TrainingConfig& config, Checkpoint start, const Dataset& train,
                             const Dataset* validation = nullptr, const TrainingLogger& log = {},
                             std::optional<std::size_t> stop_after = std::nullopt) {
  config.validate();
  detail::check_stage_data(config.stage, train, "training");
  if (validation) detail::check_stage_data(config.stage, *validation, "validation");
  const TokenId eot = start.tokenizer ? start.tokenizer->eot_id() : TokenId{256};

  Checkpoint state = std::move(start);
  const bool resuming = !state.history.empty() && state.history.back().stage == config.stage &&
                        !state.history.back().finished && state.training == config;
  if (!resuming) {
    state.optimizer = OptimizerState::for_params(state.params);
    StageRecord record;
    record.stage = config.stage;
    state.history.push_back(record);
  }
  state.training = config;

  StageResult result;
  result.best = clone(state);
  auto units = detail::batch_units(train);
  const std::size_t steps_per_epoch = (units.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  std::vector<std::string> names;
  for (const auto& [n, _] : state.params.named()) names.push_back(n);

  auto& rec = state.history.back();
  while (rec.epochs_completed < config.epochs && !rec.finished &&
         (!stop_after || rec.epochs_completed < *stop_after)) {
    const std::size_t epoch = rec.epochs_completed + 1;
    Rng shuffle_rng(derive_seed(config.seed, to_string(config.stage) + ":epoch:" + std::to_string(epoch)));
    std::vector<std::size_t> order(units.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      Rng dropout_rng(derive_seed(config.seed, "dropout:" + std::to_string(epoch) + ":" + std::to_string(b)));
      Rng* drng = state.params.config.dropout > 0.0 ? &dropout_rng : nullptr;
      state.params.zero_grad();
      StepLog sl{epoch, state.optimizer.step + 1};
      Tensor loss;
      const std::size_t end = std::min(order.size(), (b + 1) * config.batch_size);
      if (train.kind == Dataset::Kind::Text) {
        std::vector<const LmExample*> batch;
        for (std::size_t u = b * config.batch_size; u < end; ++u) batch.push_back(&train.sequences[units[order[u]][0]]);
        loss = lm_stage_loss(state.params, batch, drng);
        sl.lm = loss.item();
      } else {
        std::vector<const LabeledStory*> batch;
        for (std::size_t u = b * config.batch_size; u < end; ++u) {
          for (auto i : units[order[u]]) batch.push_back(&train.stories[i]);
        }
        auto mt = multitask_loss(state.params, batch, config.lambda, eot, config.classification, drng);
        loss = mt.total;
        sl.lm = mt.lm.item();
        sl.cls = mt.cls.defined() ? mt.cls.item() : 0.0;
      }
      sl.loss = loss.item();
      backward(loss);
      std::optional<double> lr;
      if (config.linear_decay) {
        lr = config.learning_rate *
             (1.0 - static_cast<double>(state.optimizer.step) / static_cast<double>(std::max<std::size_t>(total_steps, 1)));
      }
      adam_step(state.params.tensors(), state.optimizer, config, lr, &names);
      epoch_loss += sl.loss;
      result.steps.push_back(sl);
    }

    EpochLog el{epoch, epoch_loss / static_cast<double>(steps_per_epoch), std::nullopt};
    rec.epochs_completed = epoch;
    if (validation) {
      el.val_loss = evaluate_stage_loss(state.params, *validation, config, eot)[0];
      if (!rec.best_val || *el.val_loss < *rec.best_val) {
        rec.best_val = el.val_loss;
        rec.best_epoch = epoch;
        rec.bad_epochs = 0;
      } else if (++rec.bad_epochs >= config.patience) {
        rec.finished = true;
        result.stopped_early = true;
      }
    } else {
      rec.best_epoch = epoch;
    }
    if (rec.epochs_completed == config.epochs) rec.finished = true;
    if (rec.best_epoch == epoch) result.best = clone(state);
    result.epochs.push_back(el);
    if (log) {
      std::ostringstream msg;
      msg << to_string(config.stage) << " epoch " << epoch << " train " << el.train_loss;
      if (el.val_loss) msg << " val " << *el.val_loss;
      log(msg.str());
    }
  }
  // The best snapshot carries the final stage record so it reads as finished.
  result.best.history.back() = rec;
  result.last = std::move(state);
  return result;
}

inline std::string loss_curve_csv(const StageResult& r) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,val_loss\n";
  for (const auto& e : r.epochs) {
    out << e.epoch << ',' << e.train_loss << ',';
    if (e.val_loss) out << *e.val_loss;
    out << '\n';
  }
  return out.str();
}

}  // namespace kestory
