#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "../support/fixtures.hpp"
#include "../support/oracles.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/retrieval.hpp"
#include "layoutseq/rng.hpp"

namespace layoutseq {
namespace {

std::vector<Real> unit_angle(double degrees) {
  const double r = degrees * std::acos(-1.0) / 180.0;
  return {static_cast<Real>(std::cos(r)), static_cast<Real>(std::sin(r))};
}

TEST(AveragePrecision, WorkedFixture) {
  const std::vector<std::string> ranking = {"r1", "n1", "r2", "n2", "n3"};
  EXPECT_NEAR(average_precision_at_k(ranking, {"r1", "r2"}, 5), 0.5 * (1.0 + 2.0 / 3.0), 1e-9);
  EXPECT_NEAR(average_precision_at_k(ranking, {"r1", "r2"}, 5), 0.8333333333, 1e-9);
}

TEST(AveragePrecision, EdgeCases) {
  const std::vector<std::string> ranking = {"a", "b", "c"};
  EXPECT_EQ(average_precision_at_k(ranking, {}, 5), 0.0);
  EXPECT_EQ(average_precision_at_k(ranking, {"z"}, 5), 0.0);
  EXPECT_EQ(average_precision_at_k(ranking, {"a", "b", "c"}, 5), 1.0);
  // More relevant items than k: normalizer is k.
  EXPECT_NEAR(average_precision_at_k(ranking, {"a", "x", "y", "z"}, 2), 0.5, 1e-15);
  // Relevant item beyond the cutoff does not count.
  EXPECT_EQ(average_precision_at_k(ranking, {"c"}, 2), 0.0);
  EXPECT_THROW(average_precision_at_k(ranking, {"a"}, 0), ParameterError);
}

TEST(AveragePrecision, MovingARelevantItemUpNeverHurts) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> ranking;
    std::set<std::string> relevant;
    const std::size_t n = 2 + rng.uniform_index(8);
    for (std::size_t i = 0; i < n; ++i) {
      ranking.push_back("i" + std::to_string(i));
      if (rng.bernoulli(0.4)) relevant.insert(ranking.back());
    }
    const std::size_t k = 1 + rng.uniform_index(6);
    for (std::size_t i = 1; i < n; ++i) {
      if (relevant.count(ranking[i]) && !relevant.count(ranking[i - 1])) {
        std::vector<std::string> better = ranking;
        std::swap(better[i], better[i - 1]);
        EXPECT_GE(average_precision_at_k(better, relevant, k) + 1e-15, average_precision_at_k(ranking, relevant, k));
      }
    }
  }
}

TEST(MapAtK, ThreeQueryFixture) {
  // a at 0 deg, b at 10, c at 100, d at 180. Rankings with self removed:
  // a: b c d (AP 1); b: a c d (AP 1/2); c has no relevant items (AP 0).
  const EmbeddingIndex index({"a", "b", "c", "d"},
                             {unit_angle(0), unit_angle(10), unit_angle(100), unit_angle(180)});
  const Relevance rel = {{"a", {"b"}}, {"b", {"c"}}, {"c", {}}};
  const std::vector<std::string> queries = {"a", "b", "c"};
  const MapResult r = map_at_k(index, queries, rel, 5);
  EXPECT_EQ(r.map, 0.5);
  EXPECT_EQ(r.queries, 3u);
  EXPECT_EQ(r.excluded, 0u);
}

TEST(MapAtK, CountsExcludedQueriesAndRejectsUnknownRelevantIds) {
  const EmbeddingIndex index({"a", "b"}, {unit_angle(0), unit_angle(10)});
  const std::vector<std::string> queries = {"a", "b", "zz"};
  const MapResult r = map_at_k(index, queries, Relevance{{"a", {"b"}}}, 5);
  EXPECT_EQ(r.queries, 1u);
  EXPECT_EQ(r.excluded, 2u);
  EXPECT_EQ(r.map, 1.0);
  const std::vector<std::string> qa = {"a"};
  EXPECT_THROW(map_at_k(index, qa, Relevance{{"a", {"ghost"}}}, 5), DataError);
}

TEST(MapAtK, QueryOrderDoesNotMatter) {
  Rng rng(4);
  std::vector<std::string> ids;
  std::vector<std::vector<Real>> rows;
  for (int i = 0; i < 30; ++i) {
    ids.push_back("x" + std::to_string(i));
    rows.push_back({static_cast<Real>(rng.normal()), static_cast<Real>(rng.normal()), static_cast<Real>(rng.normal())});
  }
  Relevance rel;
  for (int i = 0; i < 30; ++i) {
    for (int j = 0; j < 30; ++j) {
      if (i != j && i % 3 == j % 3) rel[ids[static_cast<std::size_t>(i)]].insert(ids[static_cast<std::size_t>(j)]);
    }
  }
  const EmbeddingIndex index(ids, rows);
  std::vector<std::string> shuffled = ids;
  std::reverse(shuffled.begin(), shuffled.end());
  EXPECT_DOUBLE_EQ(map_at_k(index, ids, rel).map, map_at_k(index, shuffled, rel).map);
}

TEST(Query, MatchesLinearScanOnRandomCorpora) {
  Rng rng(5);
  for (int corpus = 0; corpus < 200; ++corpus) {
    const auto c = testing::random_scan_case(rng);
    const EmbeddingIndex index(c.ids, c.rows);
    const auto got = query(index, c.query, c.k);
    const auto want = testing::linear_scan(c.ids, c.rows, c.query, c.k);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].id, want[i].id) << corpus << " rank " << i;
      EXPECT_NEAR(got[i].cosine, want[i].cosine, 1e-12);
    }
  }
}

TEST(Query, TiesBreakByIdAndExcludeDropsTheQuery) {
  const EmbeddingIndex index({"c", "a", "b"}, {{1, 0}, {2, 0}, {0, 1}});
  const std::vector<Real> q = {1, 0};
  const auto hits = query(index, q, 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].id, "a");
  EXPECT_EQ(hits[1].id, "c");
  EXPECT_EQ(hits[2].id, "b");
  const auto without = query(index, q, 3, std::string("a"));
  ASSERT_EQ(without.size(), 2u);
  EXPECT_EQ(without[0].id, "c");
}

TEST(Query, ResultDoesNotDependOnInsertionOrder) {
  const std::vector<std::string> ids = {"p", "q", "r", "s"};
  const std::vector<std::vector<Real>> rows = {{1, 2}, {3, -1}, {0.5, 0.5}, {-1, 1}};
  const EmbeddingIndex forward(ids, rows);
  const EmbeddingIndex backward({"s", "r", "q", "p"}, {rows[3], rows[2], rows[1], rows[0]});
  const std::vector<Real> q = {0.3, 0.7};
  const auto a = query(forward, q, 4);
  const auto b = query(backward, q, 4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a[i].id, b[i].id);
}

TEST(Index, RejectsBadInput) {
  EXPECT_THROW(EmbeddingIndex({"a", "a"}, {{1}, {1}}), DataError);
  EXPECT_THROW(EmbeddingIndex({"a", "b"}, {{1}, {1, 2}}), DataError);
  EXPECT_THROW(EmbeddingIndex({"a"}, {{0, 0}}), DataError);
  EXPECT_THROW(EmbeddingIndex({"a"}, {}), DataError);
  const EmbeddingIndex index({"a"}, {{1, 0}});
  const std::vector<Real> wrong = {1, 0, 0};
  EXPECT_THROW(query(index, wrong, 1), DimensionError);
  const std::vector<Real> q = {1, 0};
  EXPECT_THROW(query(EmbeddingIndex{}, q, 1), DataError);
}

TEST(Index, SaveLoadRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "layoutseq_retrieval_index.ckpt";
  const EmbeddingIndex index({"b", "a", "c"}, {{1, 2, 3}, {-1, 0, 1}, {0.5, 0.25, 0}});
  save_index(path, index);
  const EmbeddingIndex loaded = load_index(path);
  EXPECT_EQ(loaded.ids(), index.ids());
  ASSERT_EQ(loaded.dim(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(loaded.row(i)[d], index.row(i)[d], 1e-6);
  }
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".ids.json");
  EXPECT_THROW(load_index(path), DataError);
}

TEST(Relevance, FromModesAndJson) {
  std::vector<Layout> layouts(5);
  const int modes[] = {0, 1, 0, 0, 1};
  for (int i = 0; i < 5; ++i) {
    layouts[static_cast<std::size_t>(i)].id = "L" + std::to_string(i);
    layouts[static_cast<std::size_t>(i)].mode = modes[i];
  }
  layouts.push_back(Layout{{}, "nomode", std::nullopt});
  const Relevance rel = relevance_from_modes(layouts);
  EXPECT_EQ(rel.size(), 5u);
  EXPECT_EQ(rel.at("L0"), (std::set<std::string>{"L2", "L3"}));
  EXPECT_EQ(rel.at("L4"), (std::set<std::string>{"L1"}));
  EXPECT_EQ(relevance_from_json(nlohmann::json::parse(relevance_to_json(rel).dump())), rel);
  EXPECT_THROW(relevance_from_json(nlohmann::json::array()), DataError);
  EXPECT_THROW(relevance_from_json(nlohmann::json::parse(R"({"a": [1]})")), DataError);
}

TEST(RandomBaseline, ClosedFormSmallCases) {
  // One relevant among two candidates: AP = 1 or 1/2 equally likely.
  EXPECT_NEAR(random_ap_at_k(2, 1, 5), 0.75, 1e-15);
  EXPECT_NEAR(random_ap_at_k(4, 4, 5), 1.0, 1e-15);
  EXPECT_EQ(random_ap_at_k(4, 0, 5), 0.0);
  EXPECT_THROW(random_ap_at_k(2, 3, 5), ParameterError);
}

TEST(RandomBaseline, MatchesMonteCarlo) {
  const std::vector<std::size_t> sizes = {3, 5, 9, 1};
  std::vector<int> mode_of;
  for (std::size_t m = 0; m < sizes.size(); ++m) mode_of.insert(mode_of.end(), sizes[m], static_cast<int>(m));
  const std::size_t n = mode_of.size();
  Rng rng(6);
  const int trials = 4000;
  double sum = 0, sum_sq = 0;
  for (int t = 0; t < trials; ++t) {
    double map = 0;
    for (std::size_t q = 0; q < n; ++q) {
      std::vector<std::string> others;
      std::set<std::string> rel;
      for (std::size_t i = 0; i < n; ++i) {
        if (i == q) continue;
        others.push_back(std::to_string(i));
        if (mode_of[i] == mode_of[q]) rel.insert(others.back());
      }
      for (std::size_t i = others.size(); i > 1; --i) std::swap(others[i - 1], others[rng.uniform_index(i)]);
      map += average_precision_at_k(others, rel, 5);
    }
    map /= static_cast<double>(n);
    sum += map;
    sum_sq += map * map;
  }
  const double mean = sum / trials;
  const double se = std::sqrt((sum_sq / trials - mean * mean) / trials);
  EXPECT_NEAR(random_map_baseline(sizes, 5), mean, 4 * se + 1e-4);
}

}  // namespace
}  // namespace layoutseq
