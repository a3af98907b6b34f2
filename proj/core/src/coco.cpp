#include "layoutseq/coco.hpp"

#include <algorithm>

#include "layoutseq/error.hpp"
#include "layoutseq/io.hpp"

namespace layoutseq {

using json = nlohmann::json;

namespace {

const json& require(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object()) throw SchemaError(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(path + "." + key, "missing");
  return *it;
}

const json& require_array(const json& obj, const char* key, const std::string& path) {
  const json& v = require(obj, key, path);
  if (!v.is_array()) throw SchemaError(path + "." + key, "expected an array");
  return v;
}

std::int64_t require_int(const json& obj, const char* key, const std::string& path) {
  const json& v = require(obj, key, path);
  if (!v.is_number_integer()) throw SchemaError(path + "." + key, "expected an integer");
  return v.get<std::int64_t>();
}

}  // namespace

CocoIngest ingest_coco(const json& j, std::size_t max_elements) {
  CocoIngest out;
  const json& cats = require_array(j, "categories", "$");
  std::vector<std::pair<int, std::string>> categories;
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::string path = "$.categories[" + std::to_string(i) + "]";
    const int id = static_cast<int>(require_int(cats[i], "id", path));
    const json& name = require(cats[i], "name", path);
    if (!name.is_string()) throw SchemaError(path + ".name", "expected a string");
    categories.emplace_back(id, name.get<std::string>());
  }
  std::sort(categories.begin(), categories.end());
  for (const auto& [id, name] : categories) {
    if (!out.category_map.emplace(id, static_cast<int>(out.category_map.size())).second) {
      throw SchemaError("$.categories", "duplicate category id " + std::to_string(id));
    }
    out.corpus.header.class_names.push_back(name);
  }

  struct Image {
    std::string id;
    double width = 0, height = 0;
    bool has_dims = false;
    Layout layout;
  };
  const json& images = require_array(j, "images", "$");
  std::vector<Image> imgs;
  std::map<std::int64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string path = "$.images[" + std::to_string(i) + "]";
    const std::int64_t id = require_int(images[i], "id", path);
    Image img;
    img.id = std::to_string(id);
    const auto w = images[i].find("width");
    const auto h = images[i].find("height");
    if (w != images[i].end() && h != images[i].end() && w->is_number() && h->is_number() && w->get<double>() > 0 &&
        h->get<double>() > 0) {
      img.width = w->get<double>();
      img.height = h->get<double>();
      img.has_dims = true;
    }
    img.layout.id = img.id;
    if (!by_id.emplace(id, imgs.size()).second) throw SchemaError(path + ".id", "duplicate image id");
    imgs.push_back(std::move(img));
  }

  const json& anns = require_array(j, "annotations", "$");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string path = "$.annotations[" + std::to_string(i) + "]";
    const std::int64_t image_id = require_int(anns[i], "image_id", path);
    const int category = static_cast<int>(require_int(anns[i], "category_id", path));
    const json& bbox = require_array(anns[i], "bbox", path);
    if (bbox.size() != 4 || !std::all_of(bbox.begin(), bbox.end(), [](const json& v) { return v.is_number(); })) {
      throw SchemaError(path + ".bbox", "expected [x, y, w, h] numbers");
    }
    auto img = by_id.find(image_id);
    auto cat = out.category_map.find(category);
    if (img == by_id.end() || cat == out.category_map.end()) {
      ++out.skipped_annotations;
      continue;
    }
    Image& im = imgs[img->second];
    if (!im.has_dims) continue;  // the image itself is counted below
    const double bw = bbox[2].get<double>();
    const double bh = bbox[3].get<double>();
    if (!(bw > 0 && bh > 0)) {
      ++out.skipped_annotations;
      continue;
    }
    im.layout.boxes.push_back(clamp_box(BBox{cat->second, bbox[0].get<double>() / im.width,
                                             bbox[1].get<double>() / im.height, bw / im.width, bh / im.height}));
  }

  out.corpus.header.normalized = true;
  for (Image& im : imgs) {
    if (!im.has_dims || im.layout.boxes.empty()) {
      ++out.skipped_images;
      continue;
    }
    if (im.layout.boxes.size() > max_elements) {
      ++out.dropped_oversized;
      continue;
    }
    out.corpus.layouts.push_back(std::move(im.layout));
  }
  out.corpus.skipped = out.skipped_images + out.dropped_oversized;
  return out;
}

CocoIngest read_coco(const std::filesystem::path& path, std::size_t max_elements) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string(), e.what());
  }
  return ingest_coco(j, max_elements);
}

nlohmann::ordered_json category_map_json(const CocoIngest& ingest) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& [coco_id, class_id] : ingest.category_map) {
    arr.push_back({{"coco_id", coco_id},
                   {"class_id", class_id},
                   {"name", ingest.corpus.header.class_names[static_cast<std::size_t>(class_id)]}});
  }
  nlohmann::ordered_json j;
  j["categories"] = std::move(arr);
  return j;
}

}  // namespace layoutseq
