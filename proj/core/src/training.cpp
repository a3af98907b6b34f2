#include "layoutseq/training.hpp"

#include <cmath>
#include <sstream>

#include "layoutseq/error.hpp"
#include "layoutseq/evaluation.hpp"
#include "layoutseq/io.hpp"
#include "layoutseq/ops.hpp"
#include "layoutseq/rng.hpp"

namespace layoutseq {

std::vector<MaskedSample> expand_masked(const TokenSeq& seq, std::size_t box_index, const Vocab& vocab) {
  if (box_index >= seq.num_boxes()) {
    throw RangeError("box index " + std::to_string(box_index) + " outside sequence with " +
                     std::to_string(seq.num_boxes()) + " boxes");
  }
  const std::size_t start = TokenSeq::span_start(box_index);
  std::vector<MaskedSample> out;
  out.reserve(5);
  for (std::size_t k = 0; k < 5; ++k) {
    MaskedSample s;
    s.ids = seq.ids;
    for (std::size_t j = k; j < 5; ++j) s.ids[start + j] = vocab.mask();
    s.target_pos = start + k;
    s.target_id = seq.ids[start + k];
    out.push_back(std::move(s));
  }
  return out;
}

MaskedBatch pack_masked(const std::vector<MaskedSample>& samples, const Vocab& vocab) {
  std::vector<std::vector<TokenId>> ids;
  ids.reserve(samples.size());
  for (const MaskedSample& s : samples) ids.push_back(s.ids);
  MaskedBatch batch;
  batch.tokens = TokenBatch::pack(ids, vocab.pad());
  for (std::size_t b = 0; b < samples.size(); ++b) {
    batch.target_rows.push_back(batch.tokens.row(b, samples[b].target_pos));
    batch.targets.push_back(samples[b].target_id);
  }
  return batch;
}

namespace {

// Tokenized (optionally flipped) layouts; over-long ones are counted instead.
std::vector<TokenSeq> tokenize_augmented(std::span<const Layout> layouts, const Vocab& vocab, Rng& rng,
                                         double flip_probability, std::size_t max_elements,
                                         std::vector<std::string>& ids, std::size_t& skipped) {
  std::vector<TokenSeq> seqs;
  for (const Layout& layout : layouts) {
    const bool flip = rng.bernoulli(flip_probability);
    if (layout.boxes.size() > max_elements || layout.boxes.empty()) {
      ++skipped;
      continue;
    }
    seqs.push_back(layout_to_seq(flip ? flip_lr(layout) : layout, vocab, max_elements));
    ids.push_back(layout.id);
  }
  return seqs;
}

}  // namespace

MaskedBatch make_batch(std::span<const Layout> layouts, const Vocab& vocab, Rng& rng,
                       double flip_probability, std::size_t max_elements) {
  if (layouts.empty()) throw DataError("make_batch needs at least one layout");
  std::vector<std::string> ids;
  std::size_t skipped = 0;
  std::vector<MaskedSample> samples;
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    std::vector<TokenSeq> one =
        tokenize_augmented(layouts.subspan(i, 1), vocab, rng, flip_probability, max_elements, ids, skipped);
    if (one.empty()) continue;
    const std::size_t box = rng.uniform_index(one.front().num_boxes());
    for (MaskedSample& s : expand_masked(one.front(), box, vocab)) samples.push_back(std::move(s));
  }
  if (samples.empty()) throw DataError("every layout in the batch exceeds the element limit");
  MaskedBatch batch = pack_masked(samples, vocab);
  batch.layout_ids = std::move(ids);
  batch.skipped = skipped;
  return batch;
}

Tensor bert_loss(const Model& model, const MaskedBatch& batch, bool training, Rng* rng) {
  Tensor hidden = encode(model, batch.tokens, training, rng);
  Tensor logits = output_logits(model, gather_rows(hidden, batch.target_rows));
  return cross_entropy(logits, batch.targets);
}

SequenceBatch pack_sequences(const std::vector<TokenSeq>& seqs, const Vocab& vocab) {
  std::vector<std::vector<TokenId>> ids;
  ids.reserve(seqs.size());
  for (const TokenSeq& s : seqs) ids.push_back(s.ids);
  SequenceBatch batch;
  batch.tokens = TokenBatch::pack(ids, vocab.pad());
  batch.next_targets.assign(batch.tokens.ids.size(), -1);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    for (std::size_t t = 0; t + 1 < seqs[b].ids.size(); ++t) {
      batch.next_targets[batch.tokens.row(b, t)] = seqs[b].ids[t + 1];
    }
  }
  return batch;
}

SequenceBatch make_sequence_batch(std::span<const Layout> layouts, const Vocab& vocab, Rng& rng,
                                  double flip_probability, std::size_t max_elements) {
  if (layouts.empty()) throw DataError("make_sequence_batch needs at least one layout");
  std::vector<std::string> ids;
  std::size_t skipped = 0;
  const std::vector<TokenSeq> seqs =
      tokenize_augmented(layouts, vocab, rng, flip_probability, max_elements, ids, skipped);
  if (seqs.empty()) throw DataError("every layout in the batch exceeds the element limit");
  SequenceBatch batch = pack_sequences(seqs, vocab);
  batch.layout_ids = std::move(ids);
  batch.skipped = skipped;
  return batch;
}

Tensor gpt_loss(const Model& model, const SequenceBatch& batch, bool training, Rng* rng) {
  if (model.config.attention != AttentionMode::Causal) {
    throw ParameterError("gpt_loss needs a causal model");
  }
  Tensor hidden = encode(model, batch.tokens, training, rng);
  std::vector<std::size_t> rows;
  std::vector<std::int32_t> targets;
  for (std::size_t r = 0; r < batch.next_targets.size(); ++r) {
    if (batch.next_targets[r] < 0) continue;
    rows.push_back(r);
    targets.push_back(batch.next_targets[r]);
  }
  Tensor logits = output_logits(model, gather_rows(hidden, rows));
  return cross_entropy(logits, targets);
}

void TrainPlan::validate() const {
  if (total_steps <= 0) throw ParameterError("total_steps must be positive");
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  if (!(base_lr > 0)) throw ParameterError("base_lr must be positive");
  if (!(flip_probability >= 0 && flip_probability <= 1)) {
    throw ParameterError("flip_probability must lie in [0, 1]");
  }
  if (eval_every <= 0) throw ParameterError("eval_every must be positive");
}

nlohmann::ordered_json to_json(const TrainPlan& p) {
  nlohmann::ordered_json j;
  j["total_steps"] = p.total_steps;
  j["batch_size"] = p.batch_size;
  j["base_lr"] = p.base_lr;
  j["flip_probability"] = p.flip_probability;
  j["seed"] = p.seed;
  j["eval_every"] = p.eval_every;
  j["eval_limit"] = p.eval_limit;
  j["adamw"] = {{"beta1", p.adamw.beta1},
                {"beta2", p.adamw.beta2},
                {"eps", p.adamw.eps},
                {"weight_decay", p.adamw.weight_decay}};
  return j;
}

std::string format_metrics_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss;
  j["val_nll"] = r.val_nll ? nlohmann::ordered_json(*r.val_nll) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (const std::string& id : ids) {
    if (!out.empty()) out += ",";
    out += id.empty() ? "<unnamed>" : id;
  }
  return out;
}

}  // namespace

TrainResult train(const TrainPlan& plan, std::span<const Layout> train_set,
                  std::span<const Layout> val_set, Model model) {
  plan.validate();
  if (train_set.empty()) throw DataError("training corpus is empty");
  const bool causal = model.config.attention == AttentionMode::Causal;
  model.params = model.params.clone();  // tensor copies share storage with the caller

  Rng root(plan.seed);
  Rng data_rng = root.split("data.order");
  Rng augment_rng = root.split("data.augment");
  Rng dropout_rng = root.split("dropout");

  std::vector<Tensor> params = model.params.tensors();
  TrainingState state;
  state.optimizer = AdamWState::zeros_like(params);

  std::span<const Layout> val = val_set;
  if (plan.eval_limit > 0 && val.size() > plan.eval_limit) val = val.first(plan.eval_limit);

  // Rewritten whole after every evaluation; the file is tiny.
  std::string metrics_text;
  if (!plan.out_dir.empty()) {
    std::filesystem::create_directories(plan.out_dir);
    write_file_atomic(plan.out_dir / "metrics.jsonl", metrics_text);
  }

  TrainResult result{model, {}, std::nullopt, -1, 0};
  std::vector<std::size_t> order(train_set.size());
  std::size_t cursor = order.size();
  double loss_sum = 0;
  std::size_t loss_count = 0;
  std::vector<Layout> picked;
  picked.reserve(plan.batch_size);

  const std::int64_t last_step = plan.total_steps - 1;
  for (std::int64_t step = 0; step < plan.total_steps; ++step) {
    picked.clear();
    while (picked.size() < plan.batch_size) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[data_rng.uniform_index(i)]);
        cursor = 0;
      }
      picked.push_back(train_set[order[cursor++]]);
    }

    const double lr = cosine_lr(step, std::max<std::int64_t>(last_step, 1), plan.base_lr);
    for (Tensor& p : params) p.zero_grad();
    Tensor loss;
    std::vector<std::string> batch_ids;
    if (causal) {
      SequenceBatch batch = make_sequence_batch(picked, model.vocab, augment_rng, plan.flip_probability);
      result.skipped_layouts += batch.skipped;
      batch_ids = batch.layout_ids;
      loss = gpt_loss(model, batch, true, &dropout_rng);
    } else {
      MaskedBatch batch = make_batch(picked, model.vocab, augment_rng, plan.flip_probability);
      result.skipped_layouts += batch.skipped;
      batch_ids = batch.layout_ids;
      loss = bert_loss(model, batch, true, &dropout_rng);
    }
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      std::ostringstream msg;
      msg << "non-finite loss " << loss_value << " at step " << step << " (lr " << lr
          << "), batch layouts: " << join_ids(batch_ids);
      throw TrainingError(msg.str());
    }
    loss.backward();
    adamw_step(params, state.optimizer, plan.adamw, lr);
    state.step = step + 1;
    loss_sum += loss_value;
    ++loss_count;

    const bool eval_now = (step + 1) % plan.eval_every == 0 || step == last_step;
    if (!eval_now) continue;
    MetricsRecord rec{step + 1, lr, loss_sum / static_cast<double>(loss_count), std::nullopt};
    loss_sum = 0;
    loss_count = 0;
    if (!val.empty()) {
      rec.val_nll = eval_nll(model, val).nll;
      if (!result.best_val_nll || *rec.val_nll < *result.best_val_nll) {
        result.best_val_nll = rec.val_nll;
        result.best_step = rec.step;
        if (!plan.out_dir.empty()) save_model(plan.out_dir / "best.ckpt", model, &state);
      }
    } else if (!plan.out_dir.empty()) {
      save_model(plan.out_dir / "best.ckpt", model, &state);  // no validation: best is latest
    }
    result.metrics.push_back(rec);
    if (plan.on_record) plan.on_record(rec);
    if (!plan.out_dir.empty()) {
      metrics_text += format_metrics_line(rec) + "\n";
      write_file_atomic(plan.out_dir / "metrics.jsonl", metrics_text);
      save_model(plan.out_dir / "last.ckpt", model, &state);
    }
  }
  result.model = model;
  return result;
}

}  // namespace layoutseq
