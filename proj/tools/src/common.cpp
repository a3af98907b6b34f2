#include <algorithm>

#include "commands.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/io.hpp"

namespace layoutseq::cli {

using nlohmann::ordered_json;

Model load_checkpoint_arg(const std::string& path) {
  std::filesystem::path p = path;
  if (std::filesystem::is_directory(p)) p /= "best.ckpt";
  return load_model(p).model;
}

std::vector<std::string> class_names_for(const Corpus& corpus, int count) {
  std::vector<std::string> names = corpus.header.class_names;
  for (int c = static_cast<int>(names.size()); c < count; ++c) names.push_back("class" + std::to_string(c));
  return names;
}

const Layout& pick_layout(const Corpus& corpus, const std::string& id, const std::string& source) {
  if (corpus.layouts.empty()) throw DataError(source + ": no layouts");
  if (id.empty()) return corpus.layouts.front();
  const auto it = std::find_if(corpus.layouts.begin(), corpus.layouts.end(), [&](const Layout& l) { return l.id == id; });
  if (it == corpus.layouts.end()) throw DataError(source + ": no layout with id '" + id + "'");
  return *it;
}

int parse_class(const std::string& text, const std::vector<std::string>& names) {
  const auto it = std::find(names.begin(), names.end(), text);
  if (it != names.end()) return static_cast<int>(it - names.begin());
  try {
    std::size_t used = 0;
    const int c = std::stoi(text, &used);
    if (used == text.size() && c >= 0 && c < static_cast<int>(names.size())) return c;
  } catch (const std::exception&) {
  }
  throw UsageError("--class '" + text + "' is neither a class name nor an index below " + std::to_string(names.size()));
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

void write_run_config(const std::filesystem::path& dir, const RunConfig& config) {
  write_json(dir / "run_config.json", config.to_json());
}

std::filesystem::path ensure_dir(const std::string& path) {
  std::filesystem::create_directories(path);
  return path;
}

ordered_json layout_json(const Layout& layout) {
  ordered_json j;
  j["id"] = layout.id;
  if (layout.mode) j["mode"] = *layout.mode;
  ordered_json boxes = ordered_json::array();
  for (const BBox& b : layout.boxes) {
    boxes.push_back({{"class", b.class_id}, {"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}});
  }
  j["boxes"] = std::move(boxes);
  return j;
}

Layout layout_from_json(const nlohmann::json& j) {
  try {
    Layout l;
    l.id = j.value("id", std::string());
    if (j.contains("mode")) l.mode = j["mode"].get<int>();
    for (const auto& b : j.at("boxes")) {
      l.boxes.push_back(BBox{b.at("class").get<int>(), b.at("x").get<double>(), b.at("y").get<double>(),
                             b.at("w").get<double>(), b.at("h").get<double>()});
    }
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("layout object: ") + e.what());
  }
}

}  // namespace layoutseq::cli
