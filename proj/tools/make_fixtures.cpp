// Writes the synthetic fixture files used by the end-to-end pipeline run.
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "kestory/cli.hpp"
#include "kestory/fixtures.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write synthetic fixture data", "make_fixtures"};
  std::string dir;
  std::uint64_t seed = 1;
  std::size_t n_stories = 256;
  app.add_option("--dir", dir, "Output directory")->required();
  app.add_option("--seed", seed);
  app.add_option("--stories", n_stories, "Number of training stories");
  CLI11_PARSE(app, argc, argv);

  namespace fx = kestory::fixtures;
  using kestory::cli::write_file;
  try {
    std::filesystem::create_directories(dir);
    std::string corpus;
    for (const auto& s : fx::grammar_corpus(500, seed)) corpus += s + "\n";
    write_file(dir + "/corpus.txt", corpus);
    std::string val;
    for (const auto& s : fx::grammar_corpus(100, seed + 1)) val += s + "\n";
    write_file(dir + "/corpus_val.txt", val);

    const auto kb = fx::fixture_kb(300, 100, seed);
    write_file(dir + "/kb.tsv", fx::triples_tsv(kb.train));
    write_file(dir + "/kb_heldout.tsv", fx::triples_tsv(kb.held_out));

    const auto stories = fx::synthetic_stories(n_stories + 64, seed);
    kestory::save_stories(dir + "/stories_train.tsv", {stories.begin(), stories.begin() + n_stories});
    kestory::save_stories(dir + "/stories_test.tsv", {stories.begin() + n_stories, stories.end()});
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
