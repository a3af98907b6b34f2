#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "layoutseq/corpus.hpp"
#include "layoutseq/layout.hpp"
#include "layoutseq/model.hpp"

namespace layoutseq {

class Rng;

/// Integer expression over the anchor box: constant + sum coef * anchor.f,
/// with f one of x, y, w, h (grid cells).
struct CellExpr {
  int constant = 0;
  std::array<int, 4> coef{};

  bool uses_anchor() const { return coef != std::array<int, 4>{}; }
  int eval(const std::array<int, 4>& anchor) const;
};

/// Parses "3", "anchor.y-4", "anchor.w", "16-anchor.y" and similar sums.
CellExpr parse_cell_expr(const std::string& text);

struct GridChoice {
  std::array<CellExpr, 4> xywh;  // x, y in anchors; w, h in cells
  double p = 1;
};

struct GrammarRule {
  enum class Kind { Place, Attach };
  std::string name;
  int class_id = 0;
  Kind kind = Kind::Place;
  /// Attach only: the earlier rule whose boxes serve as anchors.
  std::string to;
  /// Number of boxes (Place) or boxes per anchor (Attach) -> probability.
  std::vector<std::pair<int, double>> count;
  std::vector<GridChoice> choices;
  /// Boxes from this rule may not overlap each other; blocked choices are
  /// dropped and the rest renormalized.
  bool no_overlap = true;
};

struct GrammarMode {
  std::string name;
  double p = 1;
  std::vector<GrammarRule> rules;
};

struct Grammar {
  std::string name;
  int grid_n = 16;
  std::vector<std::string> class_names;
  std::vector<GrammarMode> modes;

  Vocab vocab() const { return Vocab(static_cast<int>(class_names.size()), grid_n); }
};

/// JSON rule file:
///   {"name", "grid", "classes": [names],
///    "modes": [{"name", "p", "rules": [
///      {"name", "class", "type": "place" | "attach", "to"?,
///       "count": {"0": p, "1": p, ...}, "no_overlap"?: bool,
///       "choices": [{"x", "y", "w", "h", "p"?}, ...]}]}]}
/// A choice field is an integer, an expression string or a list of either;
/// lists expand to their product with the choice's p split evenly. Missing
/// choice p values share the remaining mass equally.
/// SchemaError names the offending JSON path.
Grammar parse_grammar(const nlohmann::json& j);
Grammar read_grammar(const std::filesystem::path& path);

/// Source of discrete decisions; weights are positive and need not sum to 1.
class Chooser {
 public:
  virtual ~Chooser() = default;
  virtual std::size_t pick(const std::vector<double>& weights) = 0;
};

struct GeneratedLayout {
  Layout layout;
  int mode = 0;
};

/// One draw from the grammar. Boxes come out in placement order.
/// GenerationError names the rule when a box cannot be placed.
GeneratedLayout generate_layout(const Grammar& grammar, Chooser& chooser);
GeneratedLayout sample_layout(const Grammar& grammar, Rng& rng);

/// Sample i uses Rng(seed).split(i); ids are "<prefix><i>" zero padded.
Corpus sample_corpus(const Grammar& grammar, std::size_t count, std::uint64_t seed,
                     const std::string& id_prefix = "g");

/// Exact support of a grammar: distinct token sequences with probabilities.
struct GrammarOracle {
  Vocab vocab{1, 1};
  std::vector<TokenSeq> seqs;
  std::vector<double> probs;

  double total() const;
};

inline constexpr std::size_t kMaxOracleSupport = 1'000'000;

/// Enumerates every decision path. DataError with the size reached when the
/// support exceeds `max_support`.
GrammarOracle enumerate_oracle(const Grammar& grammar, std::size_t max_support = kMaxOracleSupport);

struct OracleEntropy {
  double joint = 0;                // H of the sequence distribution, nats
  double causal_per_token = 0;     // H / E[len - 1]
  double masked_per_token = 0;     // five-step masked factorization, per box token
  double mean_causal_tokens = 0;   // E[len - 1]
  double mean_masked_tokens = 0;   // E[5 n]
};

OracleEntropy oracle_entropy(const GrammarOracle& oracle);

/// Distribution of the token at `position` given `context`. Bidirectional:
/// support sequences of the same length agreeing with every non-MASK token.
/// Causal: sequences agreeing on the prefix before `position`. DataError
/// when the context has probability zero.
std::map<TokenId, double> oracle_conditional(const GrammarOracle& oracle, const TokenSeq& context,
                                             std::size_t position, AttentionMode visibility);

/// Expected conditional entropies per class, averaged over occurrences.
struct ClassOracleStats {
  int class_id = 0;
  double occurrences = 0;          // expected boxes of this class per layout
  double bidir_class_entropy = 0;  // class token, whole span masked
  double causal_class_entropy = 0; // class token given the prefix
  double geometry_entropy = 0;     // x, y, w, h under the masked factorization

  bool class_deterministic_bidir() const { return bidir_class_entropy < 1e-9; }
  bool class_deterministic_causal() const { return causal_class_entropy < 1e-9; }
  bool geometry_deterministic() const { return geometry_entropy < 1e-9; }
};

std::vector<ClassOracleStats> oracle_class_stats(const GrammarOracle& oracle);

/// Cache format: {"grid", "classes", "entropy": {...}, "class_stats": [...],
/// "support": {"<space separated ids>": p, ...}}.
nlohmann::ordered_json oracle_to_json(const GrammarOracle& oracle);
GrammarOracle oracle_from_json(const nlohmann::json& j);

}  // namespace layoutseq
