#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "layoutseq/layout.hpp"

namespace layoutseq {

/// Optional first line of a corpus file: {"header": {...}}.
struct CorpusHeader {
  /// Boxes are already in [0, 1] coordinates; otherwise they are pixels and
  /// get divided by each record's width/height.
  bool normalized = false;
  std::vector<std::string> class_names;
  /// Extra JSON object text echoed into the header (run provenance).
  std::string provenance_json;
};

struct Corpus {
  CorpusHeader header;
  std::vector<Layout> layouts;
  std::size_t skipped = 0;
};

/// Parses the JSON Lines layout format:
///   {"id": str, "width": int, "height": int, "mode": int?,
///    "boxes": [{"class": int, "x": f, "y": f, "w": f, "h": f}, ...]}
/// Records with missing dimensions (in pixel mode) or no boxes are skipped
/// and counted. Boxes are clamped into the unit square after normalization.
Corpus parse_corpus_jsonl(const std::string& text);
Corpus read_corpus(const std::filesystem::path& path);

/// Serializes normalized layouts, header line first. Field order is fixed so
/// identical corpora produce identical bytes.
std::string format_corpus_jsonl(const Corpus& corpus);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);

}  // namespace layoutseq
