#include <cmath>
#include <iostream>

#include "commands.hpp"
#include "layoutseq/coco.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/grammar.hpp"

namespace layoutseq::cli {

Command make_gen_data(CLI::App& root) {
  Command cmd;
  cmd.app = root.add_subcommand("gen-data", "Sample a layout corpus from a grammar file and cache its exact oracle");
  cmd.spec = std::make_unique<ArgSpec>(cmd.app);
  ArgSpec& a = *cmd.spec;
  a.option("--grammar", "grammar", std::string(), "Grammar rule file (JSON)");
  a.option("--count", "count", std::size_t{20000}, "Layouts to sample");
  a.option("--val-fraction", "val_fraction", 0.1, "Trailing share of samples written to val.jsonl");
  a.option("--seed", "seed", std::uint64_t{0}, "Sampling seed");
  a.option("--out", "out", std::string(), "Output directory");
  a.flag("--no-oracle", "no_oracle", "Skip the exact oracle (for grammars with very large support)");

  cmd.run = [](RunConfig& rc) {
    const Grammar grammar = read_grammar(rc.path("grammar"));
    const auto count = rc.get<std::size_t>("count");
    const auto val_fraction = rc.get<double>("val_fraction");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw UsageError("--val-fraction must lie in [0, 1)");
    const auto out = ensure_dir(rc.path("out"));

    Corpus all = sample_corpus(grammar, count, rc.get<std::uint64_t>("seed"));
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(count) * val_fraction));
    Corpus train_part, val_part;
    train_part.header = val_part.header = all.header;
    train_part.header.provenance_json = val_part.header.provenance_json = rc.to_json().dump();
    train_part.layouts.assign(all.layouts.begin(), all.layouts.end() - static_cast<std::ptrdiff_t>(n_val));
    val_part.layouts.assign(all.layouts.end() - static_cast<std::ptrdiff_t>(n_val), all.layouts.end());
    write_corpus(out / "train.jsonl", train_part);
    write_corpus(out / "val.jsonl", val_part);

    if (!rc.get<bool>("no_oracle")) {
      GrammarOracle oracle;
      try {
        oracle = enumerate_oracle(grammar);
      } catch (const DataError& e) {
        throw DataError(std::string(e.what()) + "; rerun with --no-oracle to skip the cache");
      }
      auto j = oracle_to_json(oracle);
      j["run_config"] = rc.to_json();
      write_json(out / "oracle.json", j);
      const OracleEntropy h = oracle_entropy(oracle);
      std::cout << "oracle: " << oracle.seqs.size() << " sequences, masked entropy " << h.masked_per_token
                << " nats/token, causal " << h.causal_per_token << "\n";
    }
    write_run_config(out, rc);
    std::cout << "wrote " << train_part.layouts.size() << " train and " << val_part.layouts.size()
              << " val layouts to " << out.string() << "\n";
  };
  return cmd;
}

Command make_ingest_coco(CLI::App& root) {
  Command cmd;
  cmd.app = root.add_subcommand("ingest-coco", "Convert COCO detection annotations to the layout JSONL format");
  cmd.spec = std::make_unique<ArgSpec>(cmd.app);
  ArgSpec& a = *cmd.spec;
  a.option("--annotations", "annotations", std::string(), "COCO annotation JSON");
  a.option("--max-elements", "max_elements", kDefaultMaxElements, "Drop images with more boxes than this");
  a.option("--out", "out", std::string(), "Output corpus (JSONL); the category map goes next to it");

  cmd.run = [](RunConfig& rc) {
    CocoIngest in = read_coco(rc.path("annotations"), rc.get<std::size_t>("max_elements"));
    const std::filesystem::path out = rc.path("out");
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    in.corpus.header.provenance_json = rc.to_json().dump();
    write_corpus(out, in.corpus);
    auto map = category_map_json(in);
    map["run_config"] = rc.to_json();
    write_json(out.string() + ".categories.json", map);
    std::cout << "wrote " << in.corpus.layouts.size() << " layouts; skipped " << in.skipped_images
              << " images and " << in.skipped_annotations << " annotations, dropped " << in.dropped_oversized
              << " oversized images\n";
  };
  return cmd;
}

}  // namespace layoutseq::cli
