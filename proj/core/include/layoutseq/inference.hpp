#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "layoutseq/layout.hpp"
#include "layoutseq/model.hpp"

namespace layoutseq {

class Rng;

enum class Strategy { Greedy, TopK, TopP, Beam };

const char* strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);

struct SamplerConfig {
  Strategy strategy = Strategy::TopK;
  /// Top-k cut (TopK, and TopP/Beam when positive).
  int k = 3;
  /// Nucleus mass for TopP (and Beam expansion when below 1).
  double p = 1.0;
  int beam_width = 4;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;

  static SamplerConfig greedy();
  /// top-k with k = 3.
  static SamplerConfig bert_default(std::uint64_t seed = 0);
  /// top-k 15 followed by top-p 0.9.
  static SamplerConfig gpt_default(std::uint64_t seed = 0);
};

nlohmann::ordered_json to_json(const SamplerConfig& config);

/// Softmax over the ids of `range` only (renormalized), at `temperature`.
std::vector<double> restricted_probs(std::span<const Real> logits_row, TokenRange range,
                                     double temperature = 1.0);

/// Indices (into `probs`) that survive the sampler's top-k / top-p filter,
/// ordered by probability descending then index ascending.
std::vector<std::size_t> filtered_candidates(const std::vector<double>& probs, const SamplerConfig& config);

/// Draws an index of `probs` under the sampler (greedy: argmax, lowest index
/// on ties; otherwise renormalized over the filtered candidates).
std::size_t sample_index(const std::vector<double>& probs, const SamplerConfig& config, Rng& rng);

struct ScoredBox {
  BBox bbox;
  double score = 0;
  std::size_t position = 0;  // box index of the insertion point
  BoxTokens tokens{};
};

nlohmann::ordered_json to_json(const ScoredBox& box);
nlohmann::ordered_json candidates_to_json(const std::vector<ScoredBox>& boxes);

struct ClassScore {
  int class_id = 0;
  double probability = 0;
  std::size_t position = 0;  // argmax insertion position
};

/// For each of the n+1 insertion positions, the class-token distribution of
/// a fully masked span (restricted to class tokens); per class the maximum
/// over positions. Causal models read the next-token distribution after the
/// prefix instead. Returns the top_m classes, best first.
std::vector<ClassScore> recommend_classes(const Model& model, const Layout& layout, std::size_t top_m);

/// Inserts (class, MASK x4) at `position` and decodes x, y, w, h in order,
/// each restricted to its token range. Score is p(c) p(x) p(y) p(w) p(h) with
/// p(c) read from the fully masked span. Greedy returns one candidate; Beam
/// returns up to min(n_candidates, beam_width).
std::vector<ScoredBox> generate_bbox(const Model& model, const Layout& layout, int class_id,
                                     std::size_t position, const SamplerConfig& sampler,
                                     std::size_t n_candidates, Rng& rng);

/// Teacher-forced product of the five masked-token probabilities.
double score_box(const Model& model, const Layout& layout, const BoxTokens& candidate, std::size_t position);

double iou(const BBox& a, const BBox& b);

/// Greedy suppression: keep the best remaining candidate (score, then lower
/// position, then token ids), drop every other with IoU above the threshold.
std::vector<ScoredBox> nms(std::vector<ScoredBox> candidates, double iou_threshold);

inline constexpr double kDefaultNmsIou = 0.5;
inline constexpr std::size_t kDefaultCandidatesPerPosition = 4;

struct InsertResult {
  int class_id = 0;
  std::vector<ClassScore> recommendations;  // empty when the class was given
  std::vector<ScoredBox> candidates;        // after NMS, best first
  Layout layout;                            // top candidate inserted, raster sorted
};

/// Generates candidates at every insertion position (bidirectional) or with
/// the causal baseline, applies NMS and inserts the best one.
InsertResult insert_object(const Model& model, const Layout& layout, std::optional<int> class_id,
                           const SamplerConfig& sampler, double nms_threshold = kDefaultNmsIou,
                           std::size_t candidates_per_position = kDefaultCandidatesPerPosition,
                           bool tta_flip = false);

/// Causal baseline: for every insertion position, decode after the prefix
/// and the class token; keep candidates that stay in raster order there.
/// With tta_flip, also decode on the mirrored layout and mirror candidates
/// back before pooling.
std::vector<ScoredBox> gpt_generate_bbox(const Model& model, const Layout& layout, int class_id,
                                         const SamplerConfig& sampler, bool tta_flip,
                                         std::size_t n_candidates, Rng& rng);

/// Raster-sorted layout with `box` added.
Layout with_box(const Layout& layout, const BBox& box, const Vocab& vocab);

}  // namespace layoutseq
