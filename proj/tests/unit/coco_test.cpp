#include <filesystem>

#include <gtest/gtest.h>

#include "layoutseq/coco.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/io.hpp"

namespace layoutseq {
namespace {

using nlohmann::json;

json minimal() {
  return json::parse(R"({
    "images": [{"id": 7, "width": 200, "height": 100},
               {"id": 3, "width": 50, "height": 50},
               {"id": 9}],
    "categories": [{"id": 18, "name": "dog"}, {"id": 1, "name": "person"}],
    "annotations": [
      {"image_id": 7, "category_id": 1, "bbox": [20, 10, 100, 50]},
      {"image_id": 7, "category_id": 18, "bbox": [150, 50, 100, 80]},
      {"image_id": 42, "category_id": 1, "bbox": [0, 0, 5, 5]},
      {"image_id": 3, "category_id": 5, "bbox": [0, 0, 5, 5]},
      {"image_id": 3, "category_id": 1, "bbox": [0, 0, 0, 5]},
      {"image_id": 9, "category_id": 1, "bbox": [0, 0, 5, 5]}
    ]})");
}

std::string schema_path_of(const json& j) {
  try {
    ingest_coco(j);
  } catch (const SchemaError& e) {
    return e.path();
  }
  return "<no error>";
}

TEST(Coco, NormalizesAndClampsBoxes) {
  const CocoIngest in = ingest_coco(minimal());
  EXPECT_EQ(in.corpus.header.class_names, (std::vector<std::string>{"person", "dog"}));
  EXPECT_EQ(in.category_map.at(1), 0);
  EXPECT_EQ(in.category_map.at(18), 1);
  ASSERT_EQ(in.corpus.layouts.size(), 1u);
  const Layout& l = in.corpus.layouts[0];
  EXPECT_EQ(l.id, "7");
  ASSERT_EQ(l.boxes.size(), 2u);
  EXPECT_EQ(l.boxes[0], (BBox{0, 0.1, 0.1, 0.5, 0.5}));
  // Second box runs off the right and bottom edges.
  EXPECT_EQ(l.boxes[1].class_id, 1);
  EXPECT_DOUBLE_EQ(l.boxes[1].x, 0.75);
  EXPECT_DOUBLE_EQ(l.boxes[1].x + l.boxes[1].w, 1.0);
  EXPECT_DOUBLE_EQ(l.boxes[1].y + l.boxes[1].h, 1.0);
  for (const BBox& b : l.boxes) validate_box(b, 2);
}

TEST(Coco, CountsWhatItSkips) {
  const CocoIngest in = ingest_coco(minimal());
  // Unknown image, unknown category, zero width.
  EXPECT_EQ(in.skipped_annotations, 3u);
  // Image 3 ends up empty, image 9 has no dimensions.
  EXPECT_EQ(in.skipped_images, 2u);
  EXPECT_EQ(in.dropped_oversized, 0u);
  EXPECT_EQ(in.corpus.skipped, 2u);
}

TEST(Coco, DropsLayoutsOverTheElementCap) {
  json j = minimal();
  for (int i = 0; i < 129; ++i) {
    j["annotations"].push_back({{"image_id", 3}, {"category_id", 1}, {"bbox", {i % 40, 0, 1, 1}}});
  }
  const CocoIngest in = ingest_coco(j);
  EXPECT_EQ(in.dropped_oversized, 1u);
  ASSERT_EQ(in.corpus.layouts.size(), 1u);
  EXPECT_EQ(in.corpus.layouts[0].id, "7");

  const CocoIngest wide = ingest_coco(j, 129);
  EXPECT_EQ(wide.dropped_oversized, 0u);
  EXPECT_EQ(wide.corpus.layouts.size(), 2u);
}

TEST(Coco, SchemaErrorsNameThePath) {
  json j = minimal();
  j["annotations"][4]["bbox"] = {1, 2, 3};
  EXPECT_EQ(schema_path_of(j), "$.annotations[4].bbox");

  j = minimal();
  j["annotations"][1].erase("category_id");
  EXPECT_EQ(schema_path_of(j), "$.annotations[1].category_id");

  j = minimal();
  j["images"][2]["id"] = "nine";
  EXPECT_EQ(schema_path_of(j), "$.images[2].id");

  j = minimal();
  j["categories"][1]["name"] = 4;
  EXPECT_EQ(schema_path_of(j), "$.categories[1].name");

  j = minimal();
  j["images"][1]["id"] = 7;
  EXPECT_EQ(schema_path_of(j), "$.images[1].id");

  j = minimal();
  j.erase("images");
  EXPECT_EQ(schema_path_of(j), "$.images");

  EXPECT_EQ(schema_path_of(json::array()), "$");
}

TEST(Coco, OutputIsByteStable) {
  const std::string a = format_corpus_jsonl(ingest_coco(minimal()).corpus);
  const std::string b = format_corpus_jsonl(ingest_coco(minimal()).corpus);
  EXPECT_EQ(a, b);
  const Corpus back = parse_corpus_jsonl(a);
  EXPECT_EQ(format_corpus_jsonl(back), a);
  ASSERT_EQ(back.layouts.size(), 1u);
  EXPECT_EQ(back.layouts[0].boxes, ingest_coco(minimal()).corpus.layouts[0].boxes);
}

TEST(Coco, CategoryMapJson) {
  const auto j = category_map_json(ingest_coco(minimal()));
  ASSERT_EQ(j["categories"].size(), 2u);
  EXPECT_EQ(j["categories"][0]["coco_id"], 1);
  EXPECT_EQ(j["categories"][0]["class_id"], 0);
  EXPECT_EQ(j["categories"][1]["name"], "dog");
}

TEST(Coco, ReadRejectsMalformedFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "layoutseq_coco_test";
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "bad.json", "{\"images\": [");
  EXPECT_THROW(read_coco(dir / "bad.json"), SchemaError);
  write_file_atomic(dir / "ok.json", minimal().dump());
  EXPECT_EQ(read_coco(dir / "ok.json").corpus.layouts.size(), 1u);
  EXPECT_THROW(read_coco(dir / "missing.json"), DataError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace layoutseq
