#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "layoutseq/corpus.hpp"
#include "layoutseq/model.hpp"
#include "run_config.hpp"

namespace layoutseq::cli {

struct Command {
  CLI::App* app = nullptr;
  std::unique_ptr<ArgSpec> spec;
  std::function<void(RunConfig&)> run;
};

Command make_gen_data(CLI::App& root);
Command make_ingest_coco(CLI::App& root);
Command make_train(CLI::App& root);
Command make_eval(CLI::App& root);
Command make_recommend(CLI::App& root);
Command make_insert(CLI::App& root);
Command make_retrieve(CLI::App& root);
Command make_render(CLI::App& root);

// Shared plumbing.

/// A checkpoint file, or a training output directory (its best.ckpt).
Model load_checkpoint_arg(const std::string& path);
/// Class names from the corpus header, padded with "class<k>" up to `count`.
std::vector<std::string> class_names_for(const Corpus& corpus, int count);
/// The layout with `id`, or the first one when `id` is empty.
const Layout& pick_layout(const Corpus& corpus, const std::string& id, const std::string& source);
/// Class given by name or index.
int parse_class(const std::string& text, const std::vector<std::string>& names);

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);
void write_run_config(const std::filesystem::path& dir, const RunConfig& config);
std::filesystem::path ensure_dir(const std::string& path);

nlohmann::ordered_json layout_json(const Layout& layout);
Layout layout_from_json(const nlohmann::json& j);

}  // namespace layoutseq::cli
