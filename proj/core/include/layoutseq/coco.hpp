#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "layoutseq/corpus.hpp"
#include "layoutseq/layout.hpp"

namespace layoutseq {

struct CocoIngest {
  Corpus corpus;
  /// COCO category id -> dense class id (ascending category id order).
  std::map<int, int> category_map;
  std::size_t skipped_annotations = 0;  // unknown image or category, empty box
  std::size_t skipped_images = 0;       // missing dimensions or no boxes
  std::size_t dropped_oversized = 0;    // more than max_elements boxes
};

/// Detection-style COCO annotations: {"images": [{"id", "width", "height"}],
/// "annotations": [{"image_id", "category_id", "bbox": [x, y, w, h]}],
/// "categories": [{"id", "name"}]}. Boxes are divided by the image size and
/// clamped into the unit square. Layout ids are the image ids. SchemaError
/// carries the JSON path of the first violation.
CocoIngest ingest_coco(const nlohmann::json& annotations, std::size_t max_elements = kDefaultMaxElements);
CocoIngest read_coco(const std::filesystem::path& path, std::size_t max_elements = kDefaultMaxElements);

/// {"categories": [{"coco_id", "class_id", "name"}, ...]}
nlohmann::ordered_json category_map_json(const CocoIngest& ingest);

}  // namespace layoutseq
