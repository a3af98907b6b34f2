#include "layoutseq/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "layoutseq/checkpoint.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/io.hpp"

namespace layoutseq {

EmbeddingIndex::EmbeddingIndex(std::vector<std::string> ids, const std::vector<std::vector<Real>>& rows)
    : ids_(std::move(ids)) {
  if (ids_.size() != rows.size()) throw DataError("index needs one id per embedding row");
  dim_ = rows.empty() ? 0 : rows.front().size();
  vectors_.reserve(ids_.size() * dim_);
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!by_id_.emplace(ids_[i], i).second) throw DataError("duplicate index id '" + ids_[i] + "'");
    if (rows[i].size() != dim_) throw DataError("embedding row " + ids_[i] + " has the wrong dimension");
    double norm = 0;
    for (Real v : rows[i]) norm += static_cast<double>(v) * static_cast<double>(v);
    norm = std::sqrt(norm);
    if (!(norm > 0) || !std::isfinite(norm)) throw DataError("embedding row " + ids_[i] + " cannot be normalized");
    for (Real v : rows[i]) vectors_.push_back(static_cast<Real>(static_cast<double>(v) / norm));
  }
}

std::optional<std::size_t> EmbeddingIndex::find(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

IndexBuild build_index(const Model& model, std::span<const Layout> layouts) {
  IndexBuild out;
  std::vector<std::string> ids;
  std::vector<TokenSeq> seqs;
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    const Layout& layout = layouts[i];
    if (layout.boxes.empty() || layout.boxes.size() > kDefaultMaxElements ||
        2 + 5 * layout.boxes.size() > static_cast<std::size_t>(model.config.max_seq_len)) {
      ++out.skipped;
      continue;
    }
    try {
      seqs.push_back(layout_to_seq(layout, model.vocab));
    } catch (const Error&) {
      ++out.skipped;
      continue;
    }
    ids.push_back(layout.id.empty() ? "#" + std::to_string(i) : layout.id);
  }
  out.index = EmbeddingIndex(std::move(ids), embed_sequences(model, seqs, Pooling::Mean));
  return out;
}

std::vector<Hit> query(const EmbeddingIndex& index, std::span<const Real> embedding, std::size_t k,
                       const std::optional<std::string>& exclude) {
  if (index.empty()) throw DataError("query on an empty index");
  if (embedding.size() != index.dim()) {
    throw DimensionError("query embedding has dimension " + std::to_string(embedding.size()) + ", index has " +
                         std::to_string(index.dim()));
  }
  double norm = 0;
  for (Real v : embedding) norm += static_cast<double>(v) * static_cast<double>(v);
  norm = std::sqrt(norm);
  if (!(norm > 0)) throw DataError("query embedding is zero");

  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (exclude && index.ids()[i] == *exclude) continue;
    const std::span<const Real> r = index.row(i);
    double dot = 0;
    for (std::size_t d = 0; d < r.size(); ++d) dot += static_cast<double>(r[d]) * static_cast<double>(embedding[d]);
    scored.emplace_back(std::clamp(dot / norm, -1.0, 1.0), i);
  }
  const std::size_t take = std::min(k, scored.size());
  auto better = [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return index.ids()[a.second] < index.ids()[b.second];
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), better);
  std::vector<Hit> hits;
  for (std::size_t i = 0; i < take; ++i) hits.push_back(Hit{index.ids()[scored[i].second], scored[i].first});
  return hits;
}

double average_precision_at_k(std::span<const std::string> ranking, const std::set<std::string>& relevant,
                              std::size_t k) {
  if (k == 0) throw ParameterError("AP@k needs k >= 1");
  if (relevant.empty()) return 0.0;
  double sum = 0;
  std::size_t found = 0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
    if (!relevant.count(ranking[i])) continue;
    ++found;
    sum += static_cast<double>(found) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(std::min(k, relevant.size()));
}

MapResult map_at_k(const EmbeddingIndex& index, std::span<const std::string> queries, const Relevance& relevance,
                   std::size_t k) {
  if (queries.empty()) throw ParameterError("mAP needs at least one query");
  MapResult out;
  double total = 0;
  for (const std::string& q : queries) {
    auto rel = relevance.find(q);
    const std::optional<std::size_t> row = index.find(q);
    if (rel == relevance.end() || !row) {
      ++out.excluded;
      continue;
    }
    for (const std::string& id : rel->second) {
      if (!index.find(id)) throw DataError("relevant id '" + id + "' for query '" + q + "' is not indexed");
    }
    std::vector<std::string> ranking;
    for (const Hit& h : query(index, index.row(*row), k, q)) ranking.push_back(h.id);
    total += average_precision_at_k(ranking, rel->second, k);
    ++out.queries;
  }
  out.map = out.queries ? total / static_cast<double>(out.queries) : 0.0;
  return out;
}

Relevance relevance_from_modes(std::span<const Layout> layouts) {
  std::map<int, std::set<std::string>> by_mode;
  for (const Layout& l : layouts) {
    if (l.mode && !l.id.empty()) by_mode[*l.mode].insert(l.id);
  }
  Relevance out;
  for (const Layout& l : layouts) {
    if (!l.mode || l.id.empty()) continue;
    std::set<std::string> rel = by_mode[*l.mode];
    rel.erase(l.id);
    out[l.id] = std::move(rel);
  }
  return out;
}

nlohmann::ordered_json relevance_to_json(const Relevance& relevance) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [q, ids] : relevance) j[q] = std::vector<std::string>(ids.begin(), ids.end());
  return j;
}

Relevance relevance_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("relevance must be a JSON object {query_id: [ids]}");
  Relevance out;
  for (const auto& [q, ids] : j.items()) {
    if (!ids.is_array()) throw DataError("relevance entry '" + q + "' is not an array");
    std::set<std::string> s;
    for (const auto& id : ids) {
      if (!id.is_string()) throw DataError("relevance entry '" + q + "' holds a non-string id");
      s.insert(id.get<std::string>());
    }
    out[q] = std::move(s);
  }
  return out;
}

double random_ap_at_k(std::size_t candidates, std::size_t relevant, std::size_t k) {
  if (k == 0) throw ParameterError("AP@k needs k >= 1");
  if (relevant == 0 || candidates == 0) return 0.0;
  if (relevant > candidates) throw ParameterError("more relevant items than candidates");
  const double m = static_cast<double>(candidates);
  const double r = static_cast<double>(relevant);
  // E[rel_i * hits_i / i] with hits_i hypergeometric over the first i ranks.
  const double p_one = r / m;
  const double p_pair = candidates > 1 ? r * (r - 1) / (m * (m - 1)) : 0.0;
  double sum = 0;
  for (std::size_t i = 1; i <= std::min(k, candidates); ++i) {
    sum += (p_one + static_cast<double>(i - 1) * p_pair) / static_cast<double>(i);
  }
  return sum / static_cast<double>(std::min(k, relevant));
}

double random_map_baseline(const std::vector<std::size_t>& mode_sizes, std::size_t k) {
  const std::size_t n = std::accumulate(mode_sizes.begin(), mode_sizes.end(), std::size_t{0});
  if (n < 2) return 0.0;
  double total = 0;
  for (std::size_t s : mode_sizes) {
    if (s == 0) continue;
    total += static_cast<double>(s) * random_ap_at_k(n - 1, s - 1, k);
  }
  return total / static_cast<double>(n);
}

namespace {

std::filesystem::path manifest_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".ids.json");
}

}  // namespace

void save_index(const std::filesystem::path& path, const EmbeddingIndex& index) {
  Checkpoint ckpt;
  NamedArray arr{"embeddings", {index.size(), index.dim()}, {}};
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto r = index.row(i);
    arr.values.insert(arr.values.end(), r.begin(), r.end());
  }
  ckpt.arrays.push_back(std::move(arr));
  nlohmann::ordered_json meta;
  meta["kind"] = "embedding-index";
  meta["count"] = index.size();
  meta["dim"] = index.dim();
  ckpt.meta_json = meta.dump();
  save_checkpoint(path, ckpt);
  nlohmann::ordered_json manifest;
  manifest["count"] = index.size();
  manifest["ids"] = index.ids();
  write_file_atomic(manifest_path(path), manifest.dump(2) + "\n");
}

EmbeddingIndex load_index(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const NamedArray* arr = ckpt.find("embeddings");
  if (!arr || arr->shape.size() != 2) throw DataError(path.string() + " holds no embedding matrix");
  std::vector<std::string> ids;
  try {
    ids = nlohmann::json::parse(read_file(manifest_path(path))).at("ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad id manifest for " + path.string() + ": " + e.what());
  }
  const std::size_t n = arr->shape[0];
  const std::size_t d = arr->shape[1];
  if (ids.size() != n) throw DataError("id manifest lists " + std::to_string(ids.size()) + " ids for " +
                                       std::to_string(n) + " rows");
  std::vector<std::vector<Real>> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i].assign(arr->values.begin() + static_cast<std::ptrdiff_t>(i * d),
                   arr->values.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  }
  return EmbeddingIndex(std::move(ids), rows);
}

}  // namespace layoutseq
