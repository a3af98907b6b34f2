#include "layoutseq/corpus.hpp"

#include <sstream>

#include <nlohmann/json.hpp>

#include "layoutseq/error.hpp"
#include "layoutseq/io.hpp"

namespace layoutseq {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

BBox read_box(const json& j, double width, double height, bool normalized) {
  BBox b;
  b.class_id = j.at("class").get<int>();
  b.x = j.at("x").get<double>();
  b.y = j.at("y").get<double>();
  b.w = j.at("w").get<double>();
  b.h = j.at("h").get<double>();
  if (!normalized) {
    b.x /= width;
    b.w /= width;
    b.y /= height;
    b.h /= height;
  }
  return clamp_box(b);
}

}  // namespace

Corpus parse_corpus_jsonl(const std::string& text) {
  Corpus corpus;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
    if (first && j.contains("header")) {
      first = false;
      const json& h = j["header"];
      corpus.header.normalized = h.value("normalized", false);
      if (h.contains("class_names")) corpus.header.class_names = h["class_names"].get<std::vector<std::string>>();
      if (h.contains("provenance")) corpus.header.provenance_json = h["provenance"].dump();
      continue;
    }
    first = false;
    try {
      Layout layout;
      layout.id = j.value("id", std::string{});
      if (j.contains("mode") && !j["mode"].is_null()) layout.mode = j["mode"].get<int>();
      const bool normalized = corpus.header.normalized;
      double width = 1, height = 1;
      if (!normalized) {
        if (!j.contains("width") || !j.contains("height") || j["width"].get<double>() <= 0 ||
            j["height"].get<double>() <= 0) {
          ++corpus.skipped;
          continue;
        }
        width = j["width"].get<double>();
        height = j["height"].get<double>();
      }
      for (const json& b : j.at("boxes")) layout.boxes.push_back(read_box(b, width, height, normalized));
      if (layout.boxes.empty()) {
        ++corpus.skipped;
        continue;
      }
      corpus.layouts.push_back(std::move(layout));
    } catch (const json::exception& e) {
      throw DataError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

Corpus read_corpus(const std::filesystem::path& path) { return parse_corpus_jsonl(read_file(path)); }

std::string format_corpus_jsonl(const Corpus& corpus) {
  std::string out;
  ordered_json header;
  header["normalized"] = true;
  header["class_names"] = corpus.header.class_names;
  if (!corpus.header.provenance_json.empty()) {
    header["provenance"] = ordered_json::parse(corpus.header.provenance_json);
  }
  out += ordered_json{{"header", header}}.dump();
  out += '\n';
  for (const Layout& layout : corpus.layouts) {
    ordered_json j;
    j["id"] = layout.id;
    j["width"] = 1;
    j["height"] = 1;
    if (layout.mode) j["mode"] = *layout.mode;
    j["boxes"] = ordered_json::array();
    for (const BBox& b : layout.boxes) {
      j["boxes"].push_back({{"class", b.class_id}, {"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}});
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  write_file_atomic(path, format_corpus_jsonl(corpus));
}

}  // namespace layoutseq
