#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "layoutseq/layout.hpp"
#include "layoutseq/model.hpp"

namespace layoutseq {

/// Unit-normalized layout embeddings, one row per id. Immutable after build,
/// so concurrent queries are safe.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  /// Normalizes every row. DataError on duplicate ids, a zero row or a
  /// ragged dimension.
  EmbeddingIndex(std::vector<std::string> ids, const std::vector<std::vector<Real>>& rows);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  bool empty() const { return ids_.empty(); }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const Real> row(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }
  std::optional<std::size_t> find(const std::string& id) const;

 private:
  std::vector<std::string> ids_;
  std::map<std::string, std::size_t> by_id_;
  std::size_t dim_ = 0;
  std::vector<Real> vectors_;
};

struct IndexBuild {
  EmbeddingIndex index;
  std::size_t skipped = 0;  // layouts that could not be tokenized
};

/// Mean-pooled final hidden states. Layouts without an id get "#<position>".
IndexBuild build_index(const Model& model, std::span<const Layout> layouts);

struct Hit {
  std::string id;
  double cosine = 0;
};

/// Exact top-k by inner product with the normalized query; ties by id.
/// `exclude` drops one id (the query itself) before ranking.
std::vector<Hit> query(const EmbeddingIndex& index, std::span<const Real> embedding, std::size_t k,
                       const std::optional<std::string>& exclude = std::nullopt);

/// Truncated AP: (1/min(k, |relevant|)) * sum of precision@i over relevant
/// hits in the first k ranks. 0 for an empty relevant set.
double average_precision_at_k(std::span<const std::string> ranking, const std::set<std::string>& relevant,
                              std::size_t k = 5);

using Relevance = std::map<std::string, std::set<std::string>>;

struct MapResult {
  double map = 0;
  std::size_t queries = 0;   // queries that contributed
  std::size_t excluded = 0;  // queries without a relevance entry
};

/// Mean AP@k over queries that are indexed ids; each query's own row is left
/// out of its ranking. Relevant ids missing from the index are a DataError.
MapResult map_at_k(const EmbeddingIndex& index, std::span<const std::string> queries,
                   const Relevance& relevance, std::size_t k = 5);

/// Layouts sharing a mode are mutually relevant (self excluded). Layouts
/// without a mode or id get no entry.
Relevance relevance_from_modes(std::span<const Layout> layouts);
nlohmann::ordered_json relevance_to_json(const Relevance& relevance);
Relevance relevance_from_json(const nlohmann::json& j);

/// Expected AP@k of a uniformly random ranking of `candidates` items of
/// which `relevant` are relevant.
double random_ap_at_k(std::size_t candidates, std::size_t relevant, std::size_t k = 5);
/// Expected mAP@k of random rankings when every item is queried against all
/// others and same-mode items are relevant; `mode_sizes` lists items per mode.
double random_map_baseline(const std::vector<std::size_t>& mode_sizes, std::size_t k = 5);

/// Checkpoint container holding "embeddings" [n, d] plus `path`.ids.json.
void save_index(const std::filesystem::path& path, const EmbeddingIndex& index);
EmbeddingIndex load_index(const std::filesystem::path& path);

}  // namespace layoutseq
