#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance binary. Each one restates a rule the simple way, without the
// library's shortcuts.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "layoutseq/inference.hpp"
#include "layoutseq/ops.hpp"
#include "layoutseq/retrieval.hpp"
#include "layoutseq/training.hpp"

namespace layoutseq::testing {

/// Mask the whole span, then emit a sample for the left-most masked token
/// and unmask it, until none remain.
inline std::vector<MaskedSample> brute_force_masked(const TokenSeq& seq, std::size_t box, const Vocab& vocab) {
  std::vector<TokenId> ids = seq.ids;
  const std::size_t begin = 1 + 5 * box, end = begin + 5;
  for (std::size_t p = begin; p < end; ++p) ids[p] = vocab.mask();
  std::vector<MaskedSample> out;
  while (true) {
    std::size_t leftmost = end;
    for (std::size_t p = begin; p < end; ++p) {
      if (ids[p] == vocab.mask()) {
        leftmost = p;
        break;
      }
    }
    if (leftmost == end) break;
    out.push_back({ids, leftmost, seq.ids[leftmost]});
    ids[leftmost] = seq.ids[leftmost];
  }
  return out;
}

struct MaskingCheck {
  std::size_t checked = 0;
  std::size_t mismatches = 0;
};

/// expand_masked against the reference on `layouts` random grid layouts
/// with random vocabularies.
inline MaskingCheck check_masking(std::uint64_t seed, int layouts) {
  Rng rng(seed);
  MaskingCheck r;
  for (int i = 0; i < layouts; ++i) {
    const Vocab vocab(1 + static_cast<int>(rng.uniform_index(8)), 2 + static_cast<int>(rng.uniform_index(30)));
    const Layout layout = random_grid_layout(rng, vocab, 12);
    const TokenSeq seq = layout_to_seq(layout, vocab);
    for (std::size_t b = 0; b < seq.num_boxes(); ++b) {
      const auto got = expand_masked(seq, b, vocab);
      const auto want = brute_force_masked(seq, b, vocab);
      ++r.checked;
      bool same = got.size() == want.size();
      for (std::size_t k = 0; same && k < got.size(); ++k) {
        same = got[k].ids == want[k].ids && got[k].target_pos == want[k].target_pos &&
               got[k].target_id == want[k].target_id;
      }
      if (!same) ++r.mismatches;
    }
  }
  return r;
}

/// Repeatedly take the best remaining candidate and discard every remaining
/// one that overlaps it too much.
inline std::vector<ScoredBox> brute_force_nms(std::vector<ScoredBox> pool, double thr) {
  auto better = [](const ScoredBox& a, const ScoredBox& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.position != b.position) return a.position < b.position;
    return a.tokens < b.tokens;
  };
  std::vector<ScoredBox> kept;
  while (!pool.empty()) {
    const auto best_it = std::min_element(pool.begin(), pool.end(), better);
    const ScoredBox best = *best_it;
    kept.push_back(best);
    std::vector<ScoredBox> rest;
    for (auto it = pool.begin(); it != pool.end(); ++it) {
      if (it == best_it) continue;
      if (iou(best.bbox, it->bbox) <= thr) rest.push_back(*it);
    }
    pool = std::move(rest);
  }
  return kept;
}

/// Up to 30 grid candidates with coarse scores, so ties happen.
inline std::vector<ScoredBox> random_candidates(Rng& rng, const Vocab& vocab) {
  std::vector<ScoredBox> out;
  const std::size_t n = 1 + rng.uniform_index(30);
  for (std::size_t i = 0; i < n; ++i) {
    const Layout l = random_grid_layout(rng, vocab, 1);
    ScoredBox b;
    b.tokens = quantize_box(l.boxes[0], vocab);
    b.bbox = dequantize_box(b.tokens, vocab);
    b.score = static_cast<double>(rng.uniform_index(6)) / 5.0;
    b.position = rng.uniform_index(3);
    out.push_back(b);
  }
  return out;
}

inline bool same_survivors(const std::vector<ScoredBox>& a, const std::vector<ScoredBox>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].tokens != b[i].tokens || a[i].position != b[i].position || a[i].score != b[i].score) return false;
  }
  return true;
}

/// Score everything, sort the whole list.
inline std::vector<Hit> linear_scan(const std::vector<std::string>& ids, const std::vector<std::vector<Real>>& rows,
                                    const std::vector<Real>& q, std::size_t k) {
  auto norm = [](const std::vector<Real>& v) {
    double s = 0;
    for (Real x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
  };
  std::vector<Hit> all;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double dot = 0;
    for (std::size_t d = 0; d < q.size(); ++d) dot += static_cast<double>(rows[i][d]) * q[d];
    all.push_back({ids[i], dot / (norm(rows[i]) * norm(q))});
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    if (std::abs(a.cosine - b.cosine) > 1e-12) return a.cosine > b.cosine;
    return a.id < b.id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

/// Random embedding corpus with exact duplicate rows, plus a query and k.
struct ScanCase {
  std::vector<std::string> ids;
  std::vector<std::vector<Real>> rows;
  std::vector<Real> query;
  std::size_t k = 1;
};

inline ScanCase random_scan_case(Rng& rng) {
  ScanCase c;
  const std::size_t n = 1 + rng.uniform_index(60);
  const std::size_t dim = 1 + rng.uniform_index(8);
  for (std::size_t i = 0; i < n; ++i) {
    c.ids.push_back("id" + std::to_string(rng.next_u64() % 100000) + "_" + std::to_string(i));
    if (i > 0 && rng.bernoulli(0.2)) {
      c.rows.push_back(c.rows[rng.uniform_index(i)]);
    } else {
      std::vector<Real> r(dim);
      for (Real& x : r) x = static_cast<Real>(rng.normal());
      c.rows.push_back(r);
    }
  }
  c.query.resize(dim);
  for (Real& x : c.query) x = static_cast<Real>(rng.normal());
  c.k = 1 + rng.uniform_index(10);
  return c;
}

struct OpCase {
  std::string name;
  std::function<Tensor(const std::vector<Tensor>&)> f;
  std::vector<Tensor> inputs;
};

/// Every differentiable op on random shapes drawn from `seed`, each reduced
/// to a scalar with fixed random weights.
inline std::vector<OpCase> op_gradient_cases(int seed) {
  Rng rng(static_cast<std::uint64_t>(seed) * 7919 + 1);
  const std::size_t m = 1 + rng.uniform_index(4);
  const std::size_t k = 1 + rng.uniform_index(5);
  const std::size_t n = 2 + rng.uniform_index(5);
  const auto sd = static_cast<std::uint64_t>(seed);

  Tensor a = random_tensor({m, k}, rng);
  Tensor b = random_tensor({k, n}, rng);
  Tensor c = random_tensor({m, n}, rng);
  Tensor d = random_tensor({m, n}, rng);
  Tensor bias = random_tensor({n}, rng);
  Tensor gamma = random_tensor({n}, rng);
  Tensor beta = random_tensor({n}, rng);
  Tensor wide = random_tensor({m, n}, rng, 3.0);
  std::vector<std::int32_t> targets(m);
  for (auto& t : targets) t = static_cast<std::int32_t>(rng.uniform_index(n));
  targets[0] = -1;
  if (m > 1) targets[1] = static_cast<std::int32_t>(n - 1);
  const std::vector<std::int32_t> ids{static_cast<std::int32_t>(m - 1), 0, static_cast<std::int32_t>(m - 1)};
  const std::vector<std::size_t> rows{m - 1, 0, m - 1};

  std::vector<OpCase> cases = {
      {"matmul", [sd](const auto& in) { return weighted_sum(matmul(in[0], in[1]), sd); }, {a, b}},
      {"add", [sd](const auto& in) { return weighted_sum(add(in[0], in[1]), sd); }, {c, d}},
      {"sub", [sd](const auto& in) { return weighted_sum(sub(in[0], in[1]), sd); }, {c, d}},
      {"mul", [sd](const auto& in) { return weighted_sum(mul(in[0], in[1]), sd); }, {c, d}},
      {"scale", [sd](const auto& in) { return weighted_sum(scale(in[0], -1.7), sd); }, {c}},
      {"add_bias", [sd](const auto& in) { return weighted_sum(add_bias(in[0], in[1]), sd); }, {c, bias}},
      {"mean", [](const auto& in) { return mean(mul(in[0], in[0])); }, {c}},
      {"reshape", [sd, m, n](const auto& in) { return weighted_sum(reshape(in[0], {m * n}), sd); }, {c}},
      {"softmax0", [sd](const auto& in) { return weighted_sum(softmax(in[0], 0), sd); }, {wide}},
      {"softmax1", [sd](const auto& in) { return weighted_sum(softmax(in[0], 1), sd); }, {wide}},
      {"layer_norm",
       [sd](const auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2]), sd); },
       {wide, gamma, beta}},
      {"gelu", [sd](const auto& in) { return weighted_sum(gelu(in[0]), sd); }, {wide}},
      {"embedding", [ids, sd](const auto& in) { return weighted_sum(embedding(in[0], ids), sd); }, {c}},
      {"gather_rows", [rows, sd](const auto& in) { return weighted_sum(gather_rows(in[0], rows), sd); }, {c}},
  };
  // A single ignored row makes cross-entropy the zero function.
  if (m > 1) {
    cases.push_back({"cross_entropy", [targets](const auto& in) { return cross_entropy(in[0], targets); }, {wide}});
  }

  Rng arng(static_cast<std::uint64_t>(seed) + 500);
  const std::size_t batch = 1 + arng.uniform_index(2);
  const std::size_t seq = 2 + arng.uniform_index(3);
  const std::size_t heads = 1 + arng.uniform_index(2);
  const std::size_t dh = heads * (1 + arng.uniform_index(3));
  std::vector<std::uint8_t> valid(batch * seq, 1);
  valid[batch * seq - 1] = 0;  // last key of the last row is padding
  for (bool causal : {false, true}) {
    const AttentionDims dims{batch, seq, heads};
    cases.push_back({causal ? "attention_causal" : "attention",
                     [dims, valid, causal](const auto& in) {
                       return weighted_sum(attention(in[0], in[1], in[2], dims, valid, causal), 3);
                     },
                     {random_tensor({batch * seq, dh}, arng), random_tensor({batch * seq, dh}, arng),
                      random_tensor({batch * seq, dh}, arng)}});
  }
  return cases;
}

/// 1 layer, d 8, 2 heads: small enough for a full finite-difference sweep.
inline ModelConfig mini_config(int vocab_size, AttentionMode mode = AttentionMode::Bidirectional) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.max_seq_len = 24;
  c.attention = mode;
  c.vocab_size = vocab_size;
  return c;
}

/// Worst relative gradient error of the full miniature model's training loss
/// over every parameter, weights perturbed so every path carries signal.
inline GradCheckResult full_model_grad_check(AttentionMode mode) {
  const Vocab vocab(2, 4);
  Rng rng(11);
  Model m = make_model(mini_config(vocab.size(), mode), vocab, rng);
  Rng perturb(12);
  for (Tensor& t : m.params.tensors()) {
    for (Real& x : t.mutable_values()) x += static_cast<Real>(0.3 * (2 * perturb.uniform() - 1));
  }
  Rng data(13);
  const std::vector<Layout> layouts = {random_grid_layout(data, vocab, 3), random_grid_layout(data, vocab, 2)};
  std::function<Tensor(const std::vector<Tensor>&)> loss;
  Rng batch_rng(1);
  if (mode == AttentionMode::Causal) {
    const SequenceBatch batch = make_sequence_batch(layouts, vocab, batch_rng, 0.0);
    loss = [&m, batch](const std::vector<Tensor>&) { return gpt_loss(m, batch); };
  } else {
    const MaskedBatch batch = make_batch(layouts, vocab, batch_rng, 0.0);
    loss = [&m, batch](const std::vector<Tensor>&) { return bert_loss(m, batch); };
  }
  return grad_check(loss, m.params.tensors());
}

}  // namespace layoutseq::testing
