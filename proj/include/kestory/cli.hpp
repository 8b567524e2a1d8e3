#pragma once

// Command-line front door. Every subcommand writes `<out>.manifest.json` with
// its argv, resolved configuration and input hashes.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kestory/corpus.hpp"
#include "kestory/decoding.hpp"
#include "kestory/error.hpp"
#include "kestory/evaluation.hpp"
#include "kestory/knowledge.hpp"
#include "kestory/rng.hpp"
#include "kestory/tokenizer.hpp"
#include "kestory/training.hpp"
#include "kestory/transformer.hpp"

namespace kestory::cli {

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  f << data;
  if (!f) throw ConfigError("failed writing " + path);
}

inline std::string file_hash(const std::string& path) { return detail::hex64(fnv1a64(read_file(path))); }

// Non-empty lines of a text file.
inline std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!detail::trim(line).empty()) out.push_back(line);
  }
  return out;
}

class Manifest {
 public:
  Manifest(std::string command, int argc, const char* const* argv) : command_(std::move(command)) {
    for (int i = 1; i < argc; ++i) argv_.emplace_back(argv[i]);
  }
  void input(const std::string& path) { inputs_[path] = file_hash(path); }
  void set(const std::string& key, nlohmann::json value) { config_[key] = std::move(value); }
  void write(const std::string& out_path) const {
    nlohmann::json j{{"command", command_}, {"argv", argv_}, {"config", config_}, {"inputs", inputs_}};
    write_file(out_path + ".manifest.json", j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  nlohmann::json config_ = nlohmann::json::object();
  std::map<std::string, std::string> inputs_;
};

// Flat configuration document: model and training keys side by side.
struct RunConfig {
  ModelConfig model;
  TrainingConfig training;
};

inline RunConfig load_run_config(const std::string& path, Stage stage) {
  RunConfig rc;
  rc.training.stage = stage;
  if (path.empty()) return rc;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": configuration must be a flat JSON object");
  nlohmann::json model = rc.model, training = rc.training;
  for (const auto& [k, v] : j.items()) {
    if (model.contains(k)) {
      model[k] = v;
    } else if (training.contains(k) && k != "stage") {
      training[k] = v;
    } else {
      throw ConfigError(path + ": unknown configuration key '" + k + "'");
    }
  }
  try {
    model.get_to(rc.model);
    training.get_to(rc.training);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  rc.training.stage = stage;
  return rc;
}

// Text corpora are one document per line; labeled datasets are JSON lines with
// a "label" field.
inline bool looks_labeled(const std::string& path) {
  for (const auto& line : read_lines(path)) {
    if (line.front() != '{') return false;
    try {
      return nlohmann::json::parse(line).contains("label");
    } catch (const nlohmann::json::exception&) {
      return false;
    }
  }
  return false;
}

inline Dataset load_dataset(const std::vector<std::string>& paths, const TokenizerModel& tok) {
  if (paths.empty()) throw ConfigError("no data files given");
  const bool labeled = looks_labeled(paths.front());
  std::vector<std::string> docs;
  std::vector<LabeledStory> stories;
  for (const auto& p : paths) {
    if (looks_labeled(p) != labeled) throw ConfigError("data files mix text corpora and labeled datasets: " + p);
    if (labeled) {
      auto s = load_labeled(p, &tok);
      stories.insert(stories.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
    } else {
      auto d = read_lines(p);
      docs.insert(docs.end(), d.begin(), d.end());
    }
  }
  return labeled ? Dataset::labeled(std::move(stories)) : Dataset::text(make_text_examples(docs, tok));
}

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

// ---------------------------------------------------------------------------
// Subcommands

struct TrainBpeArgs {
  std::string corpus, out;
  std::size_t vocab_size = 512;
};

inline void run_train_bpe(const TrainBpeArgs& a, Manifest& m, Streams io) {
  m.input(a.corpus);
  m.set("vocab_size", a.vocab_size);
  const auto tok = train_bpe(read_lines(a.corpus), a.vocab_size);
  tok.save(a.out);
  io.err << "tokenizer: " << tok.vocab_size() << " entries, " << tok.merges().size() << " merges\n";
  m.write(a.out);
}

struct TransformKbArgs {
  std::vector<std::string> triples, sources, eval_triples;
  std::string templates, out, eval_set;
  std::uint64_t seed = 0;
};

inline std::vector<KnowledgeTriple> load_all_triples(const std::vector<std::string>& paths,
                                                     const std::vector<std::string>& sources,
                                                     const TemplateTable& table, Manifest& m) {
  if (!sources.empty() && sources.size() != 1 && sources.size() != paths.size()) {
    throw ConfigError("--source must be given once or once per --triples file");
  }
  std::vector<KnowledgeTriple> all;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const auto src = sources.empty() ? TripleSource::ConceptNetLike
                                     : parse_triple_source(sources.size() == 1 ? sources[0] : sources[i]);
    m.input(paths[i]);
    auto t = parse_triples(paths[i], src, table);
    all.insert(all.end(), t.begin(), t.end());
  }
  return all;
}

inline TemplateTable load_table(const std::string& path, Manifest& m) {
  if (path.empty()) return default_template_table();
  m.input(path);
  return TemplateTable::load(path);
}

inline void run_transform_kb(const TransformKbArgs& a, Manifest& m, Streams io) {
  const auto table = load_table(a.templates, m);
  m.set("sources", a.sources);
  m.set("seed", a.seed);
  const auto triples = load_all_triples(a.triples, a.sources, table, m);
  std::string text;
  Rng rng(derive_seed(a.seed, "transform-kb"));
  for (const auto& t : triples) text += verbalize(t, table, TemplateVariant::training(), rng).text + "\n";
  write_file(a.out, text);
  io.err << "transform-kb: " << triples.size() << " sentences\n";
  if (!a.eval_set.empty()) {
    const auto eval = a.eval_triples.empty() ? triples : load_all_triples(a.eval_triples, a.sources, table, m);
    // Wrong templates are drawn among the relations the knowledge base uses.
    std::set<std::string> used;
    for (const auto& t : triples) used.insert(t.relation);
    for (const auto& t : eval) used.insert(t.relation);
    const auto eval_table = used.size() >= 2 ? table.restricted_to(used) : table;
    Rng erng(derive_seed(a.seed, "relation-eval"));
    std::string lines;
    for (const auto& item : build_relation_eval_set(eval, eval_table, erng)) lines += to_json(item).dump() + "\n";
    write_file(a.eval_set, lines);
  }
  m.write(a.out);
}

struct BuildFakesArgs {
  std::string stories, out, names;
  std::uint64_t seed = 0;
};

inline void run_build_fakes(const BuildFakesArgs& a, Manifest& m, Streams io) {
  m.input(a.stories);
  m.set("seed", a.seed);
  auto stories = load_stories(a.stories);
  if (!a.names.empty()) {
    m.input(a.names);
    const auto lex = NameLexicon::load(a.names);
    for (auto& s : stories) s = delexicalize(s, lex);
  }
  const auto records = build_multitask_dataset(stories, a.seed, nullptr);
  save_labeled(a.out, records);
  io.err << "build-fakes: " << records.size() << " records from " << stories.size() << " stories\n";
  m.write(a.out);
}

struct TrainArgs {
  Stage stage = Stage::Pretrain;
  std::string config, tokenizer, init, out, loss_csv;
  std::vector<std::string> data, val;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr, lambda;
};

inline void run_train(const TrainArgs& a, Manifest& m, Streams io) {
  auto rc = load_run_config(a.config, a.stage);
  if (!a.config.empty()) m.input(a.config);
  if (a.seed) rc.training.seed = *a.seed;
  if (a.epochs) rc.training.epochs = *a.epochs;
  if (a.batch_size) rc.training.batch_size = *a.batch_size;
  if (a.lr) rc.training.learning_rate = *a.lr;
  if (a.lambda) rc.training.lambda = *a.lambda;

  Checkpoint start;
  if (!a.init.empty()) {
    m.input(a.init);
    start = load_checkpoint(a.init);
    if (!start.tokenizer) throw ConfigError(a.init + " has no embedded tokenizer");
    rc.model = start.params.config;
  } else {
    if (a.tokenizer.empty()) throw ConfigError("--tokenizer is required when no --init checkpoint is given");
    m.input(a.tokenizer);
    auto tok = TokenizerModel::load(a.tokenizer);
    rc.model.vocab_size = tok.vocab_size();
    rc.model.validate();
    start = new_checkpoint(rc.model, rc.training.seed, std::move(tok));
  }
  const auto& tok = *start.tokenizer;
  for (const auto& p : a.data) m.input(p);
  for (const auto& p : a.val) m.input(p);
  nlohmann::json resolved = rc.model;
  const nlohmann::json training = rc.training;
  for (const auto& [k, v] : training.items()) resolved[k] = v;
  m.set("run", resolved);

  const auto train = load_dataset(a.data, tok);
  std::optional<Dataset> val;
  if (!a.val.empty()) val = load_dataset(a.val, tok);
  auto result = run_stage(rc.training, std::move(start), train, val ? &*val : nullptr,
                          [&](const std::string& msg) { io.err << msg << "\n"; });
  save_checkpoint(a.out, val ? result.best : result.last);
  if (!a.loss_csv.empty()) write_file(a.loss_csv, loss_curve_csv(result));
  m.write(a.out);
}

struct GenerateArgs {
  std::string ckpt, context, examples, out;
  std::size_t k = 40, sentences = 4, max_tokens = 200;
  double temperature = 0.7;
  std::uint64_t seed = 0;
  bool json = false;
};

inline GenerationConfig generation_config(std::size_t k, double temperature, std::size_t sentences,
                                          std::size_t max_tokens, std::uint64_t seed) {
  GenerationConfig g;
  g.k = k;
  g.temperature = temperature;
  g.target_sentences = sentences;
  g.max_tokens = max_tokens;
  g.seed = seed;
  g.validate();
  return g;
}

inline nlohmann::json to_json(const GenerationConfig& g) {
  return {{"k", g.k}, {"temperature", g.temperature}, {"sentences", g.target_sentences},
          {"max_tokens", g.max_tokens}, {"seed", g.seed}};
}

inline void run_generate(const GenerateArgs& a, Manifest& m, Streams io) {
  const auto gc = generation_config(a.k, a.temperature, a.sentences, a.max_tokens, a.seed);
  m.input(a.ckpt);
  m.set("generation", to_json(gc));
  m.set("context", a.context);
  const auto ck = load_checkpoint(a.ckpt);
  if (!ck.tokenizer) throw ConfigError(a.ckpt + " has no embedded tokenizer");
  Rng rng(derive_seed(gc.seed, "generate"));
  GeneratedStory story;
  if (a.examples.empty()) {
    story = generate_story(ck.params, *ck.tokenizer, a.context, gc, rng);
  } else {
    m.input(a.examples);
    std::vector<std::string> ex;
    for (const auto& s : load_stories(a.examples)) ex.push_back(s.text());
    story = generate_zero_shot(ck.params, *ck.tokenizer, ex, a.context, gc, rng);
  }
  std::string text;
  if (a.json) {
    text = story.to_json().dump() + "\n";
  } else {
    text = a.context;
    for (const auto& s : story.sentences) text += " " + s;
    text += "\n";
  }
  if (a.out.empty()) {
    io.out << text;
  } else {
    write_file(a.out, text);
    m.write(a.out);
  }
}

struct EvaluateArgs {
  std::string ckpt, stories, labeled, relation_eval, report, stories_out, templates;
  std::vector<std::string> triples, sources;
  std::size_t k = 40, sentences = 4, max_tokens = 200, threads = 1;
  double temperature = 0.7;
  std::uint64_t seed = 0;
  bool word_ngrams = false;
};

inline EvalReport evaluate_all(const Checkpoint& ck, const std::vector<Story>& stories,
                               const std::vector<KnowledgeTriple>& triples, const std::vector<LabeledStory>* labeled,
                               const std::vector<RelationEvalSentences>* relation, const GenerationConfig& gc,
                               std::size_t threads, bool word_ngrams) {
  const auto& p = ck.params;
  const auto& tok = *ck.tokenizer;
  EvalReport r;
  r.n_stories = stories.size();
  r.generated.resize(stories.size());
  parallel_for(stories.size(), threads, [&](std::size_t i) {
    Rng rng(derive_seed(gc.seed, "eval:" + stories[i].id));
    r.generated[i] = generate_story(p, tok, stories[i].context(), gc, rng);
  });

  std::vector<std::string> texts, gen_text, ref_text;
  for (std::size_t i = 0; i < stories.size(); ++i) {
    texts.push_back(stories[i].text());
    gen_text.push_back(r.generated[i].text());
    const auto cont = split_example(stories[i]).continuation;
    std::string ref;
    for (const auto& c : cont) ref += (ref.empty() ? "" : " ") + c;
    ref_text.push_back(ref);
  }
  r.ppl = perplexity(p, tok, texts, threads);
  r.bleu1 = bleu_n(gen_text, ref_text, 1);
  r.bleu2 = bleu_n(gen_text, ref_text, 2);
  r.coverage = coverage(gen_text, triples);
  bool any_4gram = false;
  if (word_ngrams) {
    std::vector<std::vector<std::string>> seqs;
    for (const auto& g : gen_text) any_4gram |= (seqs.emplace_back(word_tokens(g)).size() >= 4);
    r.repetition4_pct = repetition_4(seqs);
    if (any_4gram) r.distinct4_pct = distinct_4(seqs);
  } else {
    std::vector<std::vector<TokenId>> seqs;
    for (const auto& g : gen_text) any_4gram |= (seqs.emplace_back(tok.encode(g)).size() >= 4);
    r.repetition4_pct = repetition_4(seqs);
    if (any_4gram) r.distinct4_pct = distinct_4(seqs);
  }

  std::set<std::string> beginnings;
  for (const auto& s : stories) beginnings.insert(s.context());
  if (beginnings.size() >= 10) r.beginning_ranking_acc = beginning_ranking(p, tok, stories, gc.seed, threads).accuracy;
  r.logic_ranking_acc = logic_ranking(p, tok, stories, threads).accuracy;
  if (relation) r.relation = relation_ranking(p, tok, *relation, threads);
  if (labeled) r.classifier = classifier_report(p, tok, *labeled, gen_text, threads);
  return r;
}

inline void run_evaluate(const EvaluateArgs& a, Manifest& m, Streams io) {
  const auto gc = generation_config(a.k, a.temperature, a.sentences, a.max_tokens, a.seed);
  m.input(a.ckpt);
  m.input(a.stories);
  m.set("generation", to_json(gc));
  m.set("word_ngrams", a.word_ngrams);
  const auto ck = load_checkpoint(a.ckpt);
  if (!ck.tokenizer) throw ConfigError(a.ckpt + " has no embedded tokenizer");
  const auto stories = load_stories(a.stories);
  std::vector<KnowledgeTriple> triples;
  if (!a.triples.empty()) triples = load_all_triples(a.triples, a.sources, load_table(a.templates, m), m);
  std::optional<std::vector<LabeledStory>> labeled;
  if (!a.labeled.empty()) {
    m.input(a.labeled);
    labeled = load_labeled(a.labeled, &*ck.tokenizer);
  }
  std::optional<std::vector<RelationEvalSentences>> relation;
  if (!a.relation_eval.empty()) {
    m.input(a.relation_eval);
    relation = load_relation_eval(a.relation_eval);
  }
  const auto r = evaluate_all(ck, stories, triples, labeled ? &*labeled : nullptr, relation ? &*relation : nullptr, gc,
                              a.threads, a.word_ngrams);
  write_file(a.report, r.to_json().dump(2) + "\n");
  if (!a.stories_out.empty()) {
    std::string lines;
    for (const auto& g : r.generated) lines += g.to_json().dump() + "\n";
    write_file(a.stories_out, lines);
  }
  io.err << "evaluate: " << r.n_stories << " stories, ppl " << r.ppl << "\n";
  m.write(a.report);
}

// ---------------------------------------------------------------------------

inline int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge-enhanced story generation pipeline", "kestory"};
  app.require_subcommand(1);

  TrainBpeArgs bpe;
  auto* c_bpe = app.add_subcommand("train-bpe", "Learn a byte-level BPE tokenizer");
  c_bpe->add_option("--corpus", bpe.corpus, "Text file, one document per line")->required();
  c_bpe->add_option("--vocab-size", bpe.vocab_size, "Target vocabulary size")->required();
  c_bpe->add_option("--out", bpe.out, "Tokenizer JSON")->required();

  TransformKbArgs kb;
  auto* c_kb = app.add_subcommand("transform-kb", "Verbalize knowledge triples into sentences");
  c_kb->add_option("--triples", kb.triples, "Triple TSV (repeatable)")->required();
  c_kb->add_option("--source", kb.sources, "conceptnet|atomic, once or per --triples file");
  c_kb->add_option("--templates", kb.templates, "Template table JSON (default: bundled table)");
  c_kb->add_option("--out", kb.out, "Sentence file")->required();
  c_kb->add_option("--eval-set", kb.eval_set, "Relation-ranking set (JSON lines)");
  c_kb->add_option("--eval-triples", kb.eval_triples, "Triples for the relation-ranking set (default: --triples)");
  c_kb->add_option("--seed", kb.seed);

  BuildFakesArgs fakes;
  auto* c_fakes = app.add_subcommand("build-fakes", "Build the four-class multi-task dataset");
  c_fakes->add_option("--stories", fakes.stories, "Story TSV")->required();
  c_fakes->add_option("--seed", fakes.seed)->required();
  c_fakes->add_option("--out", fakes.out, "Labeled JSON lines")->required();
  c_fakes->add_option("--names", fakes.names, "Name lexicon TSV; enables delexicalization");

  TrainArgs train;
  std::map<std::string, Stage> stage_of;
  auto add_train = [&](const char* name, Stage stage, const char* help) {
    auto* c = app.add_subcommand(name, help);
    stage_of[name] = stage;
    c->add_option("--config", train.config, "Flat JSON configuration");
    c->add_option("--data", train.data, "Training data (repeatable)")->required();
    c->add_option("--val", train.val, "Validation data (repeatable)");
    c->add_option("--out", train.out, "Output checkpoint")->required();
    c->add_option("--loss-csv", train.loss_csv, "Per-epoch loss curve");
    c->add_option("--seed", train.seed);
    c->add_option("--epochs", train.epochs);
    c->add_option("--batch-size", train.batch_size);
    c->add_option("--lr", train.lr);
    if (stage == Stage::Pretrain) {
      c->add_option("--tokenizer", train.tokenizer, "Tokenizer JSON (fresh model)");
      c->add_option("--init", train.init, "Start from a checkpoint");
    } else {
      c->add_option("--init", train.init, "Checkpoint from the previous stage")->required();
    }
    if (stage == Stage::FineTuneMultiTask) c->add_option("--lambda", train.lambda, "Classification weight");
    return c;
  };
  add_train("pretrain", Stage::Pretrain, "Language-model pretraining");
  add_train("posttrain", Stage::KnowledgePostTrain, "Post-train on knowledge sentences");
  add_train("finetune", Stage::FineTuneMultiTask, "Multi-task fine-tuning on labeled stories");

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "Continue a story beginning");
  c_gen->add_option("--ckpt", gen.ckpt)->required();
  c_gen->add_option("--context", gen.context, "First sentence")->required();
  c_gen->add_option("--k", gen.k);
  c_gen->add_option("--temperature", gen.temperature);
  c_gen->add_option("--sentences", gen.sentences);
  c_gen->add_option("--max-tokens", gen.max_tokens);
  c_gen->add_option("--seed", gen.seed);
  c_gen->add_option("--examples", gen.examples, "Story TSV used as zero-shot examples");
  c_gen->add_option("--out", gen.out, "Write here instead of stdout");
  c_gen->add_flag("--json", gen.json, "Emit {context, sentences}");

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Generate for each story beginning and report metrics");
  c_ev->add_option("--ckpt", ev.ckpt)->required();
  c_ev->add_option("--stories", ev.stories, "Story TSV")->required();
  c_ev->add_option("--triples", ev.triples, "Triple TSV for coverage (repeatable)");
  c_ev->add_option("--source", ev.sources);
  c_ev->add_option("--templates", ev.templates);
  c_ev->add_option("--labeled", ev.labeled, "Labeled JSON lines for the classifier report");
  c_ev->add_option("--relation-eval", ev.relation_eval, "Relation-ranking set");
  c_ev->add_option("--report", ev.report, "Report JSON")->required();
  c_ev->add_option("--stories-out", ev.stories_out, "Generated stories (JSON lines)");
  c_ev->add_option("--k", ev.k);
  c_ev->add_option("--temperature", ev.temperature);
  c_ev->add_option("--sentences", ev.sentences);
  c_ev->add_option("--max-tokens", ev.max_tokens);
  c_ev->add_option("--seed", ev.seed);
  c_ev->add_option("--threads", ev.threads);
  c_ev->add_flag("--word-ngrams", ev.word_ngrams, "Repetition/distinct over words instead of BPE tokens");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  Manifest manifest(name, argc, argv);
  Streams io{out, err};
  try {
    if (sub == c_bpe) {
      run_train_bpe(bpe, manifest, io);
    } else if (sub == c_kb) {
      run_transform_kb(kb, manifest, io);
    } else if (sub == c_fakes) {
      run_build_fakes(fakes, manifest, io);
    } else if (sub == c_gen) {
      run_generate(gen, manifest, io);
    } else if (sub == c_ev) {
      run_evaluate(ev, manifest, io);
    } else {
      train.stage = stage_of.at(name);
      run_train(train, manifest, io);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace kestory::cli
