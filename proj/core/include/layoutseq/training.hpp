#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "layoutseq/layout.hpp"
#include "layoutseq/model.hpp"
#include "layoutseq/optim.hpp"

namespace layoutseq {

class Rng;

/// One masked-span training example: the box span holds its first k-1 tokens
/// and MASK from offset k-1 to the end of the span.
struct MaskedSample {
  std::vector<TokenId> ids;
  std::size_t target_pos = 0;
  TokenId target_id = 0;
};

/// Five samples for one box: sample k masks span tokens k..5 and targets
/// token k (class, x, y, w, h in turn).
std::vector<MaskedSample> expand_masked(const TokenSeq& seq, std::size_t box_index, const Vocab& vocab);

/// Padded masked samples plus their flattened target rows.
struct MaskedBatch {
  TokenBatch tokens;
  std::vector<std::size_t> target_rows;  // b * seq_len + target_pos
  std::vector<TokenId> targets;
  std::vector<std::string> layout_ids;  // source layout per group of five
  std::size_t skipped = 0;              // layouts over the element limit
};

MaskedBatch pack_masked(const std::vector<MaskedSample>& samples, const Vocab& vocab);

/// Per layout: flip with `flip_probability`, tokenize, pick one box uniformly,
/// expand to five samples. All five stay adjacent in the batch.
MaskedBatch make_batch(std::span<const Layout> layouts, const Vocab& vocab, Rng& rng,
                       double flip_probability, std::size_t max_elements = kDefaultMaxElements);

/// Cross-entropy at the target positions only, over the full vocabulary.
Tensor bert_loss(const Model& model, const MaskedBatch& batch, bool training = false, Rng* rng = nullptr);

/// Whole sequences for next-token training; next_targets[b*T + t] is the id
/// at t+1, or -1 where there is no next token.
struct SequenceBatch {
  TokenBatch tokens;
  std::vector<std::int32_t> next_targets;
  std::vector<std::string> layout_ids;
  std::size_t skipped = 0;
};

SequenceBatch pack_sequences(const std::vector<TokenSeq>& seqs, const Vocab& vocab);
SequenceBatch make_sequence_batch(std::span<const Layout> layouts, const Vocab& vocab, Rng& rng,
                                  double flip_probability,
                                  std::size_t max_elements = kDefaultMaxElements);

/// Mean next-token cross-entropy over non-pad transitions, EOS included.
Tensor gpt_loss(const Model& model, const SequenceBatch& batch, bool training = false, Rng* rng = nullptr);

struct MetricsRecord {
  std::int64_t step = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> val_nll;
};

struct TrainPlan {
  std::int64_t total_steps = 2000;
  std::size_t batch_size = 8;  // layouts per step
  double base_lr = 1e-3;
  double flip_probability = 0.5;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 200;
  /// Validation layouts used for periodic evaluation (0 = all).
  std::size_t eval_limit = 0;
  AdamWConfig adamw;
  /// Checkpoints and metrics go here; empty keeps everything in memory.
  std::filesystem::path out_dir;
  /// Called after every evaluation record; not part of the serialized plan.
  std::function<void(const MetricsRecord&)> on_record;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainPlan& plan);

std::string format_metrics_line(const MetricsRecord& record);

struct TrainResult {
  Model model;  // weights after the last step
  std::vector<MetricsRecord> metrics;
  std::optional<double> best_val_nll;
  std::int64_t best_step = -1;
  std::size_t skipped_layouts = 0;
};

/// AdamW with the cosine schedule over `plan.total_steps`. The objective
/// follows the model's attention mode: masked spans for bidirectional, next
/// token for causal. With an out_dir, writes metrics.jsonl (one line per
/// evaluation), last.ckpt and best.ckpt. A non-finite loss throws
/// TrainingError naming the step, learning rate and batch layout ids.
TrainResult train(const TrainPlan& plan, std::span<const Layout> train_set,
                  std::span<const Layout> val_set, Model model);

}  // namespace layoutseq
