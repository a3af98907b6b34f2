#include "layoutseq/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "layoutseq/error.hpp"
#include "layoutseq/ops.hpp"
#include "layoutseq/rng.hpp"

namespace layoutseq {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Greedy: return "greedy";
    case Strategy::TopK: return "top_k";
    case Strategy::TopP: return "top_p";
    case Strategy::Beam: return "beam";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "greedy") return Strategy::Greedy;
  if (name == "top_k" || name == "top-k") return Strategy::TopK;
  if (name == "top_p" || name == "top-p") return Strategy::TopP;
  if (name == "beam") return Strategy::Beam;
  throw ParameterError("unknown sampling strategy '" + std::string(name) + "'");
}

void SamplerConfig::validate() const {
  if (strategy == Strategy::TopK && k < 1) throw ParameterError("top-k sampling needs k >= 1");
  if (!(p > 0 && p <= 1)) throw ParameterError("top-p mass must lie in (0, 1]");
  if (beam_width < 1) throw ParameterError("beam width must be at least 1");
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw ParameterError("temperature must be positive");
  }
}

SamplerConfig SamplerConfig::greedy() {
  SamplerConfig c;
  c.strategy = Strategy::Greedy;
  c.k = 1;
  return c;
}

SamplerConfig SamplerConfig::bert_default(std::uint64_t seed) {
  SamplerConfig c;
  c.strategy = Strategy::TopK;
  c.k = 3;
  c.seed = seed;
  return c;
}

SamplerConfig SamplerConfig::gpt_default(std::uint64_t seed) {
  SamplerConfig c;
  c.strategy = Strategy::TopP;
  c.k = 15;
  c.p = 0.9;
  c.seed = seed;
  return c;
}

nlohmann::ordered_json to_json(const SamplerConfig& c) {
  nlohmann::ordered_json j;
  j["strategy"] = strategy_name(c.strategy);
  j["k"] = c.k;
  j["p"] = c.p;
  j["beam_width"] = c.beam_width;
  j["temperature"] = c.temperature;
  j["seed"] = c.seed;
  return j;
}

std::vector<double> restricted_probs(std::span<const Real> row, TokenRange range, double temperature) {
  if (range.begin < 0 || static_cast<std::size_t>(range.end) > row.size() || range.size() <= 0) {
    throw RangeError("token range outside logits row");
  }
  std::vector<double> out(static_cast<std::size_t>(range.size()));
  double mx = -std::numeric_limits<double>::infinity();
  for (TokenId id = range.begin; id < range.end; ++id) mx = std::max(mx, static_cast<double>(row[id]) / temperature);
  double z = 0;
  for (TokenId id = range.begin; id < range.end; ++id) {
    const double e = std::exp(static_cast<double>(row[id]) / temperature - mx);
    out[static_cast<std::size_t>(id - range.begin)] = e;
    z += e;
  }
  for (double& v : out) v /= z;
  return out;
}

std::vector<std::size_t> filtered_candidates(const std::vector<double>& probs, const SamplerConfig& config) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  if (config.strategy == Strategy::Greedy) {
    idx.resize(1);
    return idx;
  }
  if (config.k > 0 && static_cast<std::size_t>(config.k) < idx.size()) idx.resize(static_cast<std::size_t>(config.k));
  if (config.strategy != Strategy::TopK && config.p < 1.0) {
    // Nucleus over the mass left after the top-k cut.
    double kept = 0;
    for (std::size_t i : idx) kept += probs[i];
    double mass = 0;
    std::size_t keep = 0;
    while (keep < idx.size()) {
      mass += probs[idx[keep++]];
      if (mass >= config.p * kept) break;
    }
    idx.resize(keep);
  }
  return idx;
}

std::size_t sample_index(const std::vector<double>& probs, const SamplerConfig& config, Rng& rng) {
  const std::vector<std::size_t> cand = filtered_candidates(probs, config);
  if (cand.size() == 1) return cand.front();
  double z = 0;
  for (std::size_t i : cand) z += probs[i];
  const double u = rng.uniform() * z;
  double acc = 0;
  for (std::size_t i : cand) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return cand.back();
}

nlohmann::ordered_json to_json(const ScoredBox& b) {
  nlohmann::ordered_json j;
  j["class"] = b.bbox.class_id;
  j["x"] = b.bbox.x;
  j["y"] = b.bbox.y;
  j["w"] = b.bbox.w;
  j["h"] = b.bbox.h;
  j["score"] = b.score;
  j["position"] = b.position;
  return j;
}

nlohmann::ordered_json candidates_to_json(const std::vector<ScoredBox>& boxes) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const ScoredBox& b : boxes) arr.push_back(to_json(b));
  return arr;
}

namespace {

bool is_causal(const Model& model) { return model.config.attention == AttentionMode::Causal; }

std::vector<BoxTokens> layout_boxes(const Layout& layout, const Vocab& vocab) {
  if (layout.boxes.empty()) return {};
  return raster_tokens(layout, vocab);
}

// BOS, boxes[0..position), span, boxes[position..), EOS.
std::vector<TokenId> with_span(const std::vector<BoxTokens>& boxes, std::size_t position,
                               const BoxTokens& span, const Vocab& vocab) {
  std::vector<TokenId> ids;
  ids.reserve(7 + 5 * boxes.size());
  ids.push_back(vocab.bos());
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    if (b == position) ids.insert(ids.end(), span.begin(), span.end());
    ids.insert(ids.end(), boxes[b].begin(), boxes[b].end());
  }
  if (position == boxes.size()) ids.insert(ids.end(), span.begin(), span.end());
  ids.push_back(vocab.eos());
  return ids;
}

// BOS, boxes[0..position).
std::vector<TokenId> prefix_ids(const std::vector<BoxTokens>& boxes, std::size_t position, const Vocab& vocab) {
  std::vector<TokenId> ids{vocab.bos()};
  for (std::size_t b = 0; b < position; ++b) ids.insert(ids.end(), boxes[b].begin(), boxes[b].end());
  return ids;
}

void check_length(const Model& model, std::size_t len) {
  if (len > static_cast<std::size_t>(model.config.max_seq_len)) {
    throw LengthError("sequence of " + std::to_string(len) + " tokens exceeds max_seq_len " +
                      std::to_string(model.config.max_seq_len));
  }
}

// Logit rows at read_pos[i] of seqs[i]; identical sequences run once.
std::vector<std::vector<Real>> logits_at(const Model& model, const std::vector<std::vector<TokenId>>& seqs,
                                         const std::vector<std::size_t>& read_pos) {
  std::map<std::vector<TokenId>, std::size_t> unique_index;
  std::vector<std::vector<TokenId>> unique;
  std::vector<std::size_t> which(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    check_length(model, seqs[i].size());
    auto [it, inserted] = unique_index.emplace(seqs[i], unique.size());
    if (inserted) unique.push_back(seqs[i]);
    which[i] = it->second;
  }
  NoGradGuard no_grad;
  const TokenBatch batch = TokenBatch::pack(unique, model.vocab.pad());
  const Tensor hidden = encode(model, batch, false, nullptr);
  std::vector<std::size_t> rows(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) rows[i] = batch.row(which[i], read_pos[i]);
  const Tensor logits = output_logits(model, gather_rows(hidden, rows));
  const std::size_t v = static_cast<std::size_t>(model.config.vocab_size);
  std::vector<std::vector<Real>> out(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    out[i].assign(logits.values().begin() + static_cast<std::ptrdiff_t>(i * v),
                  logits.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * v));
  }
  return out;
}

struct Hyp {
  std::vector<TokenId> ids;
  BoxTokens tokens{};
  double score = 1;
};

bool hyp_better(const Hyp& a, const Hyp& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

// Decodes x, y, w, h for a span whose class token sits at `start`. Masked
// models overwrite MASK slots in place; causal models append.
std::vector<Hyp> decode_span(const Model& model, Hyp base, std::size_t start, const SamplerConfig& sampler,
                             std::size_t n_candidates, Rng& rng) {
  const bool causal = is_causal(model);
  const Vocab& vocab = model.vocab;
  std::vector<Hyp> hyps;
  if (sampler.strategy == Strategy::Greedy || sampler.strategy == Strategy::Beam) {
    hyps.push_back(std::move(base));
  } else {
    hyps.assign(std::max<std::size_t>(n_candidates, 1), base);
  }
  for (std::size_t t = 1; t < 5; ++t) {
    const TokenRange range = vocab.range(kSpanKinds[t]);
    const std::size_t read = causal ? start + t - 1 : start + t;
    std::vector<std::vector<TokenId>> seqs;
    for (const Hyp& h : hyps) seqs.push_back(h.ids);
    const auto rows = logits_at(model, seqs, std::vector<std::size_t>(seqs.size(), read));

    auto place = [&](Hyp& h, std::size_t idx, double prob) {
      const TokenId tok = range.begin + static_cast<TokenId>(idx);
      if (causal) {
        h.ids.push_back(tok);
      } else {
        h.ids[start + t] = tok;
      }
      h.tokens[t] = tok;
      h.score *= prob;
    };

    if (sampler.strategy == Strategy::Beam) {
      std::vector<Hyp> next;
      for (std::size_t i = 0; i < hyps.size(); ++i) {
        const std::vector<double> probs = restricted_probs(rows[i], range);
        std::vector<double> shaped =
            sampler.temperature == 1.0 ? probs : restricted_probs(rows[i], range, sampler.temperature);
        for (std::size_t idx : filtered_candidates(shaped, sampler)) {
          Hyp h = hyps[i];
          place(h, idx, probs[idx]);
          next.push_back(std::move(h));
        }
      }
      std::stable_sort(next.begin(), next.end(), hyp_better);
      if (next.size() > static_cast<std::size_t>(sampler.beam_width)) next.resize(static_cast<std::size_t>(sampler.beam_width));
      hyps = std::move(next);
    } else {
      for (std::size_t i = 0; i < hyps.size(); ++i) {
        const std::vector<double> probs = restricted_probs(rows[i], range);
        const std::size_t idx =
            sampler.temperature == 1.0
                ? sample_index(probs, sampler, rng)
                : sample_index(restricted_probs(rows[i], range, sampler.temperature), sampler, rng);
        place(hyps[i], idx, probs[idx]);
      }
    }
  }
  if (sampler.strategy == Strategy::Beam && hyps.size() > n_candidates) hyps.resize(std::max<std::size_t>(n_candidates, 1));
  return hyps;
}

void check_class(const Vocab& vocab, int class_id) {
  if (class_id < 0 || class_id >= vocab.num_classes()) {
    throw RangeError("class " + std::to_string(class_id) + " outside [0, " +
                     std::to_string(vocab.num_classes()) + ")");
  }
}

ScoredBox to_scored(const Hyp& h, std::size_t position, const Vocab& vocab) {
  return ScoredBox{dequantize_box(h.tokens, vocab), h.score, position, h.tokens};
}

// Generation at one insertion point of an already tokenized layout.
std::vector<ScoredBox> generate_at(const Model& model, const std::vector<BoxTokens>& boxes, int class_id,
                                   std::size_t position, const SamplerConfig& sampler,
                                   std::size_t n_candidates, Rng& rng) {
  const Vocab& vocab = model.vocab;
  const TokenId c = vocab.encode(TokenKind::Class, class_id);
  const std::size_t start = TokenSeq::span_start(position);
  const TokenRange classes = vocab.range(TokenKind::Class);
  Hyp base;
  base.tokens[0] = c;
  if (is_causal(model)) {
    base.ids = prefix_ids(boxes, position, vocab);
    const auto row = logits_at(model, {base.ids}, {start - 1});
    base.score = restricted_probs(row.front(), classes)[static_cast<std::size_t>(class_id)];
    base.ids.push_back(c);
  } else {
    const TokenId m = vocab.mask();
    const auto all_masked = with_span(boxes, position, {m, m, m, m, m}, vocab);
    const auto row = logits_at(model, {all_masked}, {start});
    base.score = restricted_probs(row.front(), classes)[static_cast<std::size_t>(class_id)];
    base.ids = with_span(boxes, position, {c, m, m, m, m}, vocab);
  }
  std::vector<ScoredBox> out;
  for (const Hyp& h : decode_span(model, std::move(base), start, sampler, n_candidates, rng)) {
    out.push_back(to_scored(h, position, vocab));
  }
  return out;
}

bool raster_less(const BoxTokens& a, const BoxTokens& b) {
  if (a[2] != b[2]) return a[2] < b[2];
  if (a[1] != b[1]) return a[1] < b[1];
  return a[0] < b[0];
}

}  // namespace

std::vector<ClassScore> recommend_classes(const Model& model, const Layout& layout, std::size_t top_m) {
  const Vocab& vocab = model.vocab;
  const std::vector<BoxTokens> boxes = layout_boxes(layout, vocab);
  const std::size_t n = boxes.size();
  const TokenRange classes = vocab.range(TokenKind::Class);
  std::vector<std::vector<Real>> rows;
  if (is_causal(model)) {
    std::vector<TokenId> ids = prefix_ids(boxes, n, vocab);
    std::vector<std::vector<TokenId>> seqs;
    std::vector<std::size_t> reads;
    for (std::size_t p = 0; p <= n; ++p) {
      seqs.push_back(ids);
      reads.push_back(TokenSeq::span_start(p) - 1);
    }
    rows = logits_at(model, seqs, reads);
  } else {
    const TokenId m = vocab.mask();
    std::vector<std::vector<TokenId>> seqs;
    std::vector<std::size_t> reads;
    for (std::size_t p = 0; p <= n; ++p) {
      seqs.push_back(with_span(boxes, p, {m, m, m, m, m}, vocab));
      reads.push_back(TokenSeq::span_start(p));
    }
    rows = logits_at(model, seqs, reads);
  }
  std::vector<ClassScore> best(static_cast<std::size_t>(vocab.num_classes()));
  for (int c = 0; c < vocab.num_classes(); ++c) best[static_cast<std::size_t>(c)].class_id = c;
  for (std::size_t p = 0; p <= n; ++p) {
    const std::vector<double> probs = restricted_probs(rows[p], classes);
    for (std::size_t c = 0; c < probs.size(); ++c) {
      if (probs[c] > best[c].probability) best[c] = ClassScore{static_cast<int>(c), probs[c], p};
    }
  }
  std::stable_sort(best.begin(), best.end(),
                   [](const ClassScore& a, const ClassScore& b) { return a.probability > b.probability; });
  if (best.size() > top_m) best.resize(top_m);
  return best;
}

std::vector<ScoredBox> generate_bbox(const Model& model, const Layout& layout, int class_id,
                                     std::size_t position, const SamplerConfig& sampler,
                                     std::size_t n_candidates, Rng& rng) {
  sampler.validate();
  check_class(model.vocab, class_id);
  const std::vector<BoxTokens> boxes = layout_boxes(layout, model.vocab);
  if (position > boxes.size()) {
    throw RangeError("insertion position " + std::to_string(position) + " outside [0, " +
                     std::to_string(boxes.size()) + "]");
  }
  return generate_at(model, boxes, class_id, position, sampler, n_candidates, rng);
}

double score_box(const Model& model, const Layout& layout, const BoxTokens& candidate, std::size_t position) {
  const Vocab& vocab = model.vocab;
  for (std::size_t k = 0; k < 5; ++k) {
    if (vocab.kind(candidate[k]) != kSpanKinds[k]) throw VocabError("candidate token " + vocab.token_name(candidate[k]) + " is out of place");
  }
  const std::vector<BoxTokens> boxes = layout_boxes(layout, vocab);
  if (position > boxes.size()) throw RangeError("insertion position outside the layout");
  const std::size_t start = TokenSeq::span_start(position);
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::size_t> reads;
  if (is_causal(model)) {
    std::vector<TokenId> ids = prefix_ids(boxes, position, vocab);
    ids.insert(ids.end(), candidate.begin(), candidate.end());
    for (std::size_t k = 0; k < 5; ++k) {
      seqs.push_back(ids);
      reads.push_back(start + k - 1);
    }
  } else {
    for (std::size_t k = 0; k < 5; ++k) {
      BoxTokens span = candidate;
      for (std::size_t j = k; j < 5; ++j) span[j] = vocab.mask();
      seqs.push_back(with_span(boxes, position, span, vocab));
      reads.push_back(start + k);
    }
  }
  const auto rows = logits_at(model, seqs, reads);
  double score = 1;
  for (std::size_t k = 0; k < 5; ++k) {
    const TokenRange range = vocab.range(kSpanKinds[k]);
    score *= restricted_probs(rows[k], range)[static_cast<std::size_t>(candidate[k] - range.begin)];
  }
  return score;
}

double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  if (inter <= 0 || uni <= 0) return 0;
  return std::min(1.0, inter / uni);
}

std::vector<ScoredBox> nms(std::vector<ScoredBox> candidates, double iou_threshold) {
  if (!(iou_threshold >= 0 && iou_threshold <= 1)) throw ParameterError("NMS threshold must lie in [0, 1]");
  std::stable_sort(candidates.begin(), candidates.end(), [](const ScoredBox& a, const ScoredBox& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.position != b.position) return a.position < b.position;
    return a.tokens < b.tokens;
  });
  std::vector<ScoredBox> kept;
  std::vector<bool> dropped(candidates.size(), false);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (dropped[i]) continue;
    kept.push_back(candidates[i]);
    for (std::size_t j = i + 1; j < candidates.size(); ++j) {
      if (!dropped[j] && iou(candidates[i].bbox, candidates[j].bbox) > iou_threshold) dropped[j] = true;
    }
  }
  return kept;
}

Layout with_box(const Layout& layout, const BBox& box, const Vocab& vocab) {
  Layout out = layout;
  out.boxes.push_back(clamp_box(box));
  std::vector<BoxTokens> keys;
  for (const BBox& b : out.boxes) keys.push_back(quantize_box(b, vocab));
  std::vector<std::size_t> order(out.boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return raster_less(keys[a], keys[b]); });
  std::vector<BBox> sorted;
  for (std::size_t i : order) sorted.push_back(out.boxes[i]);
  out.boxes = std::move(sorted);
  return out;
}

std::vector<ScoredBox> gpt_generate_bbox(const Model& model, const Layout& layout, int class_id,
                                         const SamplerConfig& sampler, bool tta_flip,
                                         std::size_t n_candidates, Rng& rng) {
  if (!is_causal(model)) throw ParameterError("gpt_generate_bbox needs a causal model");
  sampler.validate();
  const Vocab& vocab = model.vocab;
  check_class(vocab, class_id);
  const std::vector<BoxTokens> boxes = layout_boxes(layout, vocab);

  // Candidates at insertion points that keep raster order in `view`.
  auto pass = [&](const std::vector<BoxTokens>& view, Rng& stream) {
    std::vector<ScoredBox> out;
    for (std::size_t p = 0; p <= view.size(); ++p) {
      Rng r = stream.split(static_cast<std::uint64_t>(p));
      for (ScoredBox& c : generate_at(model, view, class_id, p, sampler, n_candidates, r)) {
        const bool after_prev = p == 0 || !raster_less(c.tokens, view[p - 1]);
        const bool before_next = p == view.size() || !raster_less(view[p], c.tokens);
        if (after_prev && before_next) out.push_back(std::move(c));
      }
    }
    return out;
  };

  Rng direct = rng.split("direct");
  std::vector<ScoredBox> pool = pass(boxes, direct);
  if (tta_flip) {
    std::vector<BoxTokens> mirrored;
    for (const BoxTokens& b : boxes) mirrored.push_back(flip_box_tokens(b, vocab));
    std::stable_sort(mirrored.begin(), mirrored.end(), raster_less);
    Rng flipped = rng.split("flipped");
    for (ScoredBox& c : pass(mirrored, flipped)) {
      c.tokens = flip_box_tokens(c.tokens, vocab);
      c.bbox = dequantize_box(c.tokens, vocab);
      c.position = static_cast<std::size_t>(
          std::upper_bound(boxes.begin(), boxes.end(), c.tokens, raster_less) - boxes.begin());
      pool.push_back(std::move(c));
    }
  }
  return pool;
}

InsertResult insert_object(const Model& model, const Layout& layout, std::optional<int> class_id,
                           const SamplerConfig& sampler, double nms_threshold,
                           std::size_t candidates_per_position, bool tta_flip) {
  sampler.validate();
  const Vocab& vocab = model.vocab;
  InsertResult result;
  if (class_id) {
    check_class(vocab, *class_id);
    result.class_id = *class_id;
  } else {
    result.recommendations = recommend_classes(model, layout, static_cast<std::size_t>(vocab.num_classes()));
    result.class_id = result.recommendations.front().class_id;
  }
  Rng root = Rng(sampler.seed).split("insert");
  std::vector<ScoredBox> pool;
  if (is_causal(model)) {
    pool = gpt_generate_bbox(model, layout, result.class_id, sampler, tta_flip, candidates_per_position, root);
  } else {
    const std::vector<BoxTokens> boxes = layout_boxes(layout, vocab);
    for (std::size_t p = 0; p <= boxes.size(); ++p) {
      Rng r = root.split(static_cast<std::uint64_t>(p));
      for (ScoredBox& c : generate_at(model, boxes, result.class_id, p, sampler, candidates_per_position, r)) {
        pool.push_back(std::move(c));
      }
    }
  }
  result.candidates = nms(std::move(pool), nms_threshold);
  if (result.candidates.empty()) throw DataError("no raster-consistent candidate was generated");
  result.layout = with_box(layout, result.candidates.front().bbox, vocab);
  return result;
}

}  // namespace layoutseq
