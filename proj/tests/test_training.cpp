#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "kestory/fixtures.hpp"
#include "kestory/training.hpp"

using namespace kestory;

namespace {

const TokenizerModel& tokenizer() {
  static const TokenizerModel tok = train_bpe(fixtures::grammar_corpus(200, 1), 320);
  return tok;
}

ModelConfig small_model() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = tokenizer().vocab_size();
  c.max_seq_len = 192;
  return c;
}

TrainingConfig text_config(Stage stage = Stage::Pretrain) {
  TrainingConfig t;
  t.stage = stage;
  t.learning_rate = 3e-3;
  t.batch_size = 4;
  t.epochs = 3;
  t.seed = 7;
  return t;
}

std::vector<LabeledStory> labeled(std::size_t n, std::uint64_t seed = 3) {
  return build_multitask_dataset(fixtures::synthetic_stories(n, seed), seed, &tokenizer());
}

std::vector<double> flat(const ModelParams& p) {
  std::vector<double> v;
  for (const auto& t : p.tensors()) v.insert(v.end(), t.data().begin(), t.data().end());
  return v;
}

}  // namespace

TEST(Adam, SingleStepMovesByLearningRate) {
  auto x = Tensor::from({2}, {1.0, -1.0}, true);
  x.mutable_grad()[0] = 2.0;
  x.mutable_grad()[1] = -5e-3;
  TrainingConfig cfg;
  cfg.learning_rate = 0.1;
  OptimizerState st;
  st.m = {std::vector<double>(2, 0.0)};
  st.v = {std::vector<double>(2, 0.0)};
  adam_step({x}, st, cfg);
  EXPECT_NEAR(x[0], 0.9, 1e-6);
  EXPECT_NEAR(x[1], -0.9, 1e-5);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto x = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
  TrainingConfig cfg;
  OptimizerState st;
  st.m = {std::vector<double>(3, 0.0)};
  st.v = {std::vector<double>(3, 0.0)};
  for (int i = 0; i < 5; ++i) adam_step({x}, st, cfg);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[2], 3.0);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  auto p = init_params(small_model(), 1);
  auto st = OptimizerState::for_params(p);
  p.zero_grad();
  p.blocks[0].fc_b.mutable_grad()[0] = std::nan("");
  std::vector<std::string> names;
  for (const auto& [n, _] : p.named()) names.push_back(n);
  try {
    adam_step(p.tensors(), st, TrainingConfig{}, std::nullopt, &names);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("h.0.fc.b"), std::string::npos) << e.what();
  }
}

TEST(LmExample, ShiftsByOne) {
  const std::vector<TokenId> content{5, 6, 7, 256};
  const auto ex = make_lm_example(content, 256);
  EXPECT_EQ(ex.input, (std::vector<TokenId>{256, 5, 6, 7}));
  EXPECT_EQ(ex.targets, content);
  EXPECT_THROW(make_lm_example(std::vector<TokenId>{}, 256), ConfigError);
}

TEST(MultitaskLoss, DecomposesExactly) {
  const auto p = init_params(small_model(), 2);
  const auto batch = labeled(3);
  const TokenId eot = tokenizer().eot_id();
  for (double lambda : {0.0, 0.05, 0.5, 2.0}) {
    const auto l = multitask_loss(p, batch, lambda, eot);
    EXPECT_NEAR(l.total.item(), l.lm.item() + lambda * l.cls.item(), 1e-12);
  }
  // The LM term covers only the true stories, token-weighted.
  std::vector<LmExample> trues;
  for (const auto& s : batch) {
    if (s.label == StoryLabel::D1) trues.push_back(make_lm_example(s.tokens, eot));
  }
  EXPECT_NEAR(multitask_loss(p, batch, 0.05, eot).lm.item(), lm_stage_loss(p, trues).item(), 1e-12);
  // The classification term is the mean cross-entropy of the pooled classifier.
  double cls = 0;
  for (const auto& s : batch) cls -= std::log(classify_story(p, make_lm_example(s.tokens, eot).input)[static_cast<std::size_t>(s.label)]);
  EXPECT_NEAR(multitask_loss(p, batch, 0.05, eot).cls.item(), cls / batch.size(), 1e-12);
}

TEST(MultitaskLoss, LambdaZeroEqualsLanguageModelLoss) {
  const auto p = init_params(small_model(), 3);
  const auto batch = labeled(2);
  const auto l = multitask_loss(p, batch, 0.0, tokenizer().eot_id());
  EXPECT_EQ(l.total.item(), l.lm.item());
  const auto off = multitask_loss(p, batch, 0.05, tokenizer().eot_id(), false);
  EXPECT_FALSE(off.cls.defined());
  EXPECT_EQ(off.total.item(), l.lm.item());
}

TEST(MultitaskLoss, ClassifierGradientScalesWithLambda) {
  const auto batch = labeled(2);
  std::vector<double> g1, g2;
  for (double lambda : {0.1, 0.3}) {
    auto p = init_params(small_model(), 4);
    p.zero_grad();
    backward(multitask_loss(p, batch, lambda, tokenizer().eot_id()).total);
    auto& g = lambda == 0.1 ? g1 : g2;
    g.assign(p.cls_w.grad().begin(), p.cls_w.grad().end());
  }
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g2[i], 3.0 * g1[i], 1e-12 + 1e-9 * std::abs(g1[i]));
}

TEST(MultitaskLoss, BatchWithoutTrueStoryRejected) {
  auto batch = labeled(2);
  std::erase_if(batch, [](const LabeledStory& s) { return s.label == StoryLabel::D1; });
  EXPECT_THROW(multitask_loss(init_params(small_model(), 5), batch, 0.05, tokenizer().eot_id()), ConfigError);
}

TEST(StageLoss, PretrainAndPosttrainShareTheObjective) {
  const auto p = init_params(small_model(), 6);
  const auto data = Dataset::text(make_text_examples(fixtures::grammar_corpus(10, 9), tokenizer()));
  const auto a = evaluate_stage_loss(p, data, text_config(Stage::Pretrain), tokenizer().eot_id());
  const auto b = evaluate_stage_loss(p, data, text_config(Stage::KnowledgePostTrain), tokenizer().eot_id());
  EXPECT_EQ(a, b);
  auto ck = new_checkpoint(small_model(), 6, tokenizer());
  auto cfg = text_config(Stage::Pretrain);
  cfg.epochs = 1;
  cfg.batch_size = 10;  // one full batch, so the stage-specific shuffle cannot matter
  const auto r1 = run_stage(cfg, clone(ck), data);
  cfg.stage = Stage::KnowledgePostTrain;
  const auto r2 = run_stage(cfg, clone(ck), data);
  EXPECT_NEAR(r1.epochs[0].train_loss, r2.epochs[0].train_loss, 1e-12);
  const auto pa = flat(r1.last.params), pb = flat(r2.last.params);
  for (std::size_t i = 0; i < pa.size(); ++i) ASSERT_NEAR(pa[i], pb[i], 1e-9);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  auto ck = new_checkpoint(small_model(), 8, tokenizer());
  const auto data = Dataset::text(make_text_examples(fixtures::grammar_corpus(8, 2), tokenizer()));
  auto cfg = text_config();
  cfg.epochs = 1;
  auto trained = run_stage(cfg, std::move(ck), data).last;
  const auto dir = std::filesystem::temp_directory_path() / "kestory_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto a = (dir / "a.bin").string(), b = (dir / "b.bin").string();
  save_checkpoint(a, trained);
  const auto loaded = load_checkpoint(a);
  save_checkpoint(b, loaded);
  EXPECT_EQ(serialize_checkpoint(trained), serialize_checkpoint(loaded));
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(loaded.optimizer, trained.optimizer);
  EXPECT_EQ(loaded.history, trained.history);
  EXPECT_EQ(loaded.tokenizer->hash(), tokenizer().hash());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, CorruptionDetected) {
  const auto bytes = serialize_checkpoint(new_checkpoint(small_model(), 9, tokenizer()));
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 10)), CheckpointError);
  auto wrong_version = bytes;
  wrong_version[8] = 9;
  try {
    deserialize_checkpoint(wrong_version);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos);
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.bin"), CheckpointError);
}

TEST(RunStage, ResumeMatchesUninterruptedRun) {
  const auto data = Dataset::labeled(labeled(6));
  auto cfg = TrainingConfig{};
  cfg.stage = Stage::FineTuneMultiTask;
  cfg.learning_rate = 2e-3;
  cfg.batch_size = 2;
  cfg.epochs = 3;
  cfg.seed = 11;
  const auto start = new_checkpoint(small_model(), 10, tokenizer());
  const auto full = run_stage(cfg, clone(start), data);
  const auto half = run_stage(cfg, clone(start), data, nullptr, {}, 1);
  EXPECT_FALSE(half.last.history.back().finished);
  const auto resumed_ck = deserialize_checkpoint(serialize_checkpoint(half.last));
  const auto rest = run_stage(cfg, resumed_ck, data);
  EXPECT_EQ(rest.epochs.size(), 2u);
  EXPECT_EQ(serialize_checkpoint(rest.last), serialize_checkpoint(full.last));
}

TEST(RunStage, StageDataMismatchRejected) {
  auto ck = new_checkpoint(small_model(), 12, tokenizer());
  auto cfg = text_config(Stage::FineTuneMultiTask);
  const auto text = Dataset::text(make_text_examples({"a b c."}, tokenizer()));
  try {
    run_stage(cfg, clone(ck), text);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("labeled"), std::string::npos);
  }
  EXPECT_THROW(run_stage(text_config(), clone(ck), Dataset::labeled(labeled(2))), ConfigError);
  EXPECT_THROW(run_stage(text_config(), clone(ck), Dataset::text({})), ConfigError);
}

TEST(RunStage, ValidationLossImprovesOnSmallCorpus) {
  const auto train = Dataset::text(make_text_examples(fixtures::grammar_corpus(50, 20), tokenizer()));
  const auto val = Dataset::text(make_text_examples(fixtures::grammar_corpus(20, 21), tokenizer()));
  auto ck = new_checkpoint(small_model(), 13, tokenizer());
  const double before = evaluate_stage_loss(ck.params, val, text_config(), tokenizer().eot_id())[0];
  const auto r = run_stage(text_config(), std::move(ck), train, &val);
  ASSERT_EQ(r.epochs.size(), 3u);
  EXPECT_LT(*r.epochs.back().val_loss, before);
  EXPECT_LT(*r.epochs[2].val_loss, *r.epochs[0].val_loss);
  EXPECT_EQ(r.best.history.back().best_epoch, 3u);
  const auto csv = loss_curve_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(RunStage, SingleExampleLossDecreases) {
  auto p = init_params(small_model(), 14);
  const auto ex = make_text_examples({"the cup is located in the kitchen."}, tokenizer());
  auto st = OptimizerState::for_params(p);
  TrainingConfig cfg;
  cfg.learning_rate = 1e-2;
  double prev = 1e300;
  for (int i = 0; i < 10; ++i) {
    p.zero_grad();
    auto loss = lm_stage_loss(p, ex);
    EXPECT_LT(loss.item(), prev);
    prev = loss.item();
    backward(loss);
    adam_step(p.tensors(), st, cfg);
  }
}

TEST(RunStage, DeterministicAndEarlyStopping) {
  const auto train = Dataset::text(make_text_examples(fixtures::grammar_corpus(12, 30), tokenizer()));
  auto cfg = text_config();
  const auto a = run_stage(cfg, new_checkpoint(small_model(), 15, tokenizer()), train);
  const auto b = run_stage(cfg, new_checkpoint(small_model(), 15, tokenizer()), train);
  EXPECT_EQ(flat(a.last.params), flat(b.last.params));
  // A validation set drawn from a different distribution with a high learning
  // rate stops before the epoch budget once patience runs out.
  cfg.learning_rate = 0.05;
  cfg.epochs = 30;
  cfg.patience = 1;
  const auto val = Dataset::text(make_text_examples({"zzz qqq xxx."}, tokenizer()));
  const auto c = run_stage(cfg, new_checkpoint(small_model(), 15, tokenizer()), train, &val);
  EXPECT_TRUE(c.stopped_early);
  EXPECT_LT(c.epochs.size(), 30u);
  EXPECT_EQ(c.best.history.back().best_epoch, c.epochs.size() - 1);
}

TEST(TrainingConfig, JsonRoundTripAndValidation) {
  auto c = text_config(Stage::KnowledgePostTrain);
  c.lambda = 0.25;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainingConfig>(), c);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_stage("warmup"), ConfigError);
}
