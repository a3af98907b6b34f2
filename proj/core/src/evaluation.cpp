#include "layoutseq/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "layoutseq/error.hpp"
#include "layoutseq/inference.hpp"
#include "layoutseq/ops.hpp"
#include "layoutseq/rng.hpp"
#include "layoutseq/training.hpp"

namespace layoutseq {

namespace {

// A sequence and the positions whose output rows are wanted.
struct Job {
  std::vector<TokenId> ids;
  std::vector<std::size_t> reads;
};

using RowFn = std::function<void(std::size_t job, std::size_t read, std::span<const Real> row)>;

constexpr std::size_t kChunkTokens = 4096;

// Runs jobs in length-sorted chunks and hands every requested logit row to fn.
void for_each_row(const Model& model, const std::vector<Job>& jobs, const RowFn& fn) {
  std::vector<std::size_t> order(jobs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return jobs[a].ids.size() < jobs[b].ids.size(); });
  NoGradGuard no_grad;
  const std::size_t v = static_cast<std::size_t>(model.config.vocab_size);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::vector<std::vector<TokenId>> seqs;
    while (j < order.size()) {
      const std::size_t len = jobs[order[j]].ids.size();
      if (!seqs.empty() && (seqs.size() + 1) * len > kChunkTokens) break;
      seqs.push_back(jobs[order[j]].ids);
      ++j;
    }
    const TokenBatch batch = TokenBatch::pack(seqs, model.vocab.pad());
    const Tensor hidden = encode(model, batch, false, nullptr);
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      for (std::size_t r : jobs[order[i + b]].reads) rows.push_back(batch.row(b, r));
    }
    const Tensor logits = output_logits(model, gather_rows(hidden, rows));
    const std::span<const Real> all = logits.values();
    std::size_t k = 0;
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      const Job& job = jobs[order[i + b]];
      for (std::size_t r = 0; r < job.reads.size(); ++r, ++k) fn(order[i + b], r, all.subspan(k * v, v));
    }
    i = j;
  }
}

double full_vocab_nll(std::span<const Real> row, TokenId target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Real x : row) mx = std::max(mx, static_cast<double>(x));
  double z = 0;
  for (Real x : row) z += std::exp(static_cast<double>(x) - mx);
  return mx + std::log(z) - static_cast<double>(row[static_cast<std::size_t>(target)]);
}

bool is_causal(const Model& model) { return model.config.attention == AttentionMode::Causal; }

// Masked jobs for one sequence: five per box, reading the target position.
void add_masked_jobs(const TokenSeq& seq, const Vocab& vocab, std::vector<Job>& jobs,
                     std::vector<TokenId>& targets) {
  for (std::size_t b = 0; b < seq.num_boxes(); ++b) {
    for (MaskedSample& s : expand_masked(seq, b, vocab)) {
      jobs.push_back(Job{std::move(s.ids), {s.target_pos}});
      targets.push_back(s.target_id);
    }
  }
}

// Deduplicated tokenization: unique sequences with multiplicities.
struct UniqueSeqs {
  std::vector<TokenSeq> seqs;
  std::vector<std::size_t> counts;
  std::size_t layouts = 0;
  std::size_t skipped = 0;
};

UniqueSeqs unique_sequences(std::span<const Layout> corpus, const Vocab& vocab, std::size_t max_tokens) {
  UniqueSeqs out;
  std::map<std::vector<TokenId>, std::size_t> index;
  for (const Layout& layout : corpus) {
    if (layout.boxes.empty() || layout.boxes.size() > kDefaultMaxElements ||
        2 + 5 * layout.boxes.size() > max_tokens) {
      ++out.skipped;
      continue;
    }
    TokenSeq seq = layout_to_seq(layout, vocab);
    auto [it, inserted] = index.emplace(seq.ids, out.seqs.size());
    if (inserted) {
      out.seqs.push_back(std::move(seq));
      out.counts.push_back(0);
    }
    ++out.counts[it->second];
    ++out.layouts;
  }
  return out;
}

void require_corpus(std::span<const Layout> corpus) {
  if (corpus.empty()) throw DataError("evaluation corpus is empty");
}

std::size_t max_tokens(const Model& model) { return static_cast<std::size_t>(model.config.max_seq_len); }

}  // namespace

std::vector<double> masked_token_nll(const Model& model, const TokenSeq& seq) {
  std::vector<Job> jobs;
  std::vector<TokenId> targets;
  add_masked_jobs(seq, model.vocab, jobs, targets);
  std::vector<double> out(jobs.size());
  for_each_row(model, jobs, [&](std::size_t j, std::size_t, std::span<const Real> row) {
    out[j] = full_vocab_nll(row, targets[j]);
  });
  return out;
}

std::vector<double> next_token_nll(const Model& model, const TokenSeq& seq) {
  if (seq.ids.size() < 2) return {};
  Job job{seq.ids, {}};
  for (std::size_t t = 0; t + 1 < seq.ids.size(); ++t) job.reads.push_back(t);
  std::vector<double> out(job.reads.size());
  for_each_row(model, {job}, [&](std::size_t, std::size_t r, std::span<const Real> row) {
    out[r] = full_vocab_nll(row, seq.ids[r + 1]);
  });
  return out;
}

NllResult eval_nll(const Model& model, std::span<const Layout> corpus) {
  require_corpus(corpus);
  const UniqueSeqs u = unique_sequences(corpus, model.vocab, max_tokens(model));
  NllResult result;
  result.layouts = u.layouts;
  result.skipped = u.skipped;
  std::vector<Job> jobs;
  std::vector<TokenId> targets;
  std::vector<std::size_t> owner;  // unique sequence per job
  for (std::size_t s = 0; s < u.seqs.size(); ++s) {
    if (is_causal(model)) {
      Job job{u.seqs[s].ids, {}};
      for (std::size_t t = 0; t + 1 < job.ids.size(); ++t) job.reads.push_back(t);
      jobs.push_back(std::move(job));
      targets.push_back(0);
      owner.push_back(s);
      result.tokens += (u.seqs[s].ids.size() - 1) * u.counts[s];
    } else {
      const std::size_t before = jobs.size();
      add_masked_jobs(u.seqs[s], model.vocab, jobs, targets);
      owner.resize(jobs.size(), s);
      result.tokens += (jobs.size() - before) * u.counts[s];
    }
  }
  double total = 0;
  for_each_row(model, jobs, [&](std::size_t j, std::size_t r, std::span<const Real> row) {
    const TokenId target = is_causal(model) ? jobs[j].ids[r + 1] : targets[j];
    total += full_vocab_nll(row, target) * static_cast<double>(u.counts[owner[j]]);
  });
  result.total_nll = total;
  result.nll = result.tokens ? total / static_cast<double>(result.tokens) : 0.0;
  return result;
}

std::vector<ClassNll> eval_per_class_nll(const Model& model, std::span<const Layout> corpus) {
  require_corpus(corpus);
  const Vocab& vocab = model.vocab;
  const UniqueSeqs u = unique_sequences(corpus, vocab, max_tokens(model));
  std::vector<ClassNll> rows(static_cast<std::size_t>(vocab.num_classes()));
  for (std::size_t c = 0; c < rows.size(); ++c) rows[c].class_id = static_cast<int>(c);
  std::vector<double> sums(rows.size(), 0.0);

  std::vector<Job> jobs;
  std::vector<std::size_t> owner;
  for (std::size_t s = 0; s < u.seqs.size(); ++s) {
    const TokenSeq& seq = u.seqs[s];
    if (is_causal(model)) {
      Job job{seq.ids, {}};
      for (std::size_t b = 0; b < seq.num_boxes(); ++b) job.reads.push_back(TokenSeq::span_start(b) - 1);
      jobs.push_back(std::move(job));
      owner.push_back(s);
    } else {
      for (std::size_t b = 0; b < seq.num_boxes(); ++b) {
        Job job{seq.ids, {TokenSeq::span_start(b)}};
        for (std::size_t k = 0; k < 5; ++k) job.ids[TokenSeq::span_start(b) + k] = vocab.mask();
        jobs.push_back(std::move(job));
        owner.push_back(s);
      }
    }
  }
  for_each_row(model, jobs, [&](std::size_t j, std::size_t r, std::span<const Real> row) {
    const TokenSeq& seq = u.seqs[owner[j]];
    const std::size_t pos = jobs[j].reads[r];
    const TokenId target = is_causal(model) ? seq.ids[pos + 1] : seq.ids[pos];
    const std::size_t c = static_cast<std::size_t>(vocab.value(target));
    const std::size_t n = u.counts[owner[j]];
    sums[c] += full_vocab_nll(row, target) * static_cast<double>(n);
    rows[c].count += n;
  });
  for (std::size_t c = 0; c < rows.size(); ++c) {
    if (rows[c].count) rows[c].nll = sums[c] / static_cast<double>(rows[c].count);
  }
  return rows;
}

std::string per_class_csv(const std::vector<ClassNll>& rows, const std::vector<std::string>& names) {
  std::ostringstream out;
  out << "class_id,class_name,count,nll\n";
  out << std::setprecision(10);
  for (const ClassNll& r : rows) {
    const std::string name =
        static_cast<std::size_t>(r.class_id) < names.size() ? names[static_cast<std::size_t>(r.class_id)] : "";
    out << r.class_id << ',' << name << ',' << r.count << ',' << r.nll << '\n';
  }
  return out.str();
}

namespace {

std::uint64_t held_out_hash(const Layout& layout, const TokenSeq& seq, std::uint64_t seed) {
  std::uint64_t key;
  if (!layout.id.empty()) {
    key = fnv1a64(layout.id);
  } else {
    key = fnv1a64(std::string_view(reinterpret_cast<const char*>(seq.ids.data()), seq.ids.size() * sizeof(TokenId)));
  }
  return mix64(key ^ mix64(seed));
}

}  // namespace

std::size_t held_out_index(const Layout& layout, const TokenSeq& seq, std::uint64_t seed) {
  const std::size_t n = seq.num_boxes();
  if (n == 0) throw DataError("cannot hold out a box from an empty layout");
  return static_cast<std::size_t>(held_out_hash(layout, seq, seed) % n);
}

namespace {

// Held-out box among those whose class passes the filter; nullopt if none.
std::optional<std::size_t> pick_held_out(const Layout& layout, const TokenSeq& seq, std::uint64_t seed,
                                         const std::optional<std::set<int>>& classes, const Vocab& vocab) {
  if (!classes) return held_out_index(layout, seq, seed);
  std::vector<std::size_t> eligible;
  for (std::size_t b = 0; b < seq.num_boxes(); ++b) {
    if (classes->count(vocab.value(seq.box(b)[0]))) eligible.push_back(b);
  }
  if (eligible.empty()) return std::nullopt;
  return eligible[held_out_hash(layout, seq, seed) % eligible.size()];
}

bool usable(const Model& model, const Layout& layout) {
  return !layout.boxes.empty() && layout.boxes.size() <= kDefaultMaxElements &&
         2 + 5 * layout.boxes.size() <= max_tokens(model);
}

}  // namespace

AccuracyResult eval_top1_class(const Model& model, std::span<const Layout> corpus, std::uint64_t seed,
                               const std::optional<std::set<int>>& classes) {
  require_corpus(corpus);
  const Vocab& vocab = model.vocab;
  const TokenRange class_ids = vocab.range(TokenKind::Class);
  std::vector<Job> jobs;
  std::vector<TokenId> truth;
  for (const Layout& layout : corpus) {
    if (!usable(model, layout)) continue;
    const TokenSeq seq = layout_to_seq(layout, vocab);
    const std::optional<std::size_t> held = pick_held_out(layout, seq, seed, classes, vocab);
    if (!held) continue;
    const std::size_t j = *held;
    const std::size_t start = TokenSeq::span_start(j);
    truth.push_back(seq.ids[start]);
    if (is_causal(model)) {
      jobs.push_back(Job{std::vector<TokenId>(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(start)),
                         {start - 1}});
    } else {
      Job job{seq.ids, {start}};
      for (std::size_t k = 0; k < 5; ++k) job.ids[start + k] = vocab.mask();
      jobs.push_back(std::move(job));
    }
  }
  std::size_t hits = 0;
  for_each_row(model, jobs, [&](std::size_t j, std::size_t, std::span<const Real> row) {
    const auto first = row.begin() + class_ids.begin;
    const auto best = std::max_element(first, row.begin() + class_ids.end);
    if (class_ids.begin + static_cast<TokenId>(best - first) == truth[j]) ++hits;
  });
  AccuracyResult r;
  r.count = jobs.size();
  r.value = r.count ? static_cast<double>(hits) / static_cast<double>(r.count) : 0.0;
  return r;
}

AccuracyResult eval_cond_miou(const Model& model, std::span<const Layout> corpus, std::uint64_t seed,
                              const std::optional<std::set<int>>& classes) {
  require_corpus(corpus);
  const Vocab& vocab = model.vocab;
  const SamplerConfig greedy = SamplerConfig::greedy();
  Rng unused(seed);
  double total = 0;
  std::size_t count = 0;
  for (const Layout& layout : corpus) {
    if (!usable(model, layout)) continue;
    const TokenSeq seq = layout_to_seq(layout, vocab);
    const std::optional<std::size_t> held = pick_held_out(layout, seq, seed, classes, vocab);
    if (!held) continue;
    std::vector<BoxTokens> rest;
    for (std::size_t b = 0; b < seq.num_boxes(); ++b) {
      if (b != *held) rest.push_back(seq.box(b));
    }
    Layout context;
    if (!rest.empty()) context = seq_to_layout(tokens_to_seq(rest, vocab), vocab);
    const BoxTokens truth = seq.box(*held);
    const std::vector<ScoredBox> out =
        generate_bbox(model, context, vocab.value(truth[0]), *held, greedy, 1, unused);
    total += iou(out.front().bbox, dequantize_box(truth, vocab));
    ++count;
  }
  AccuracyResult r;
  r.count = count;
  r.value = count ? total / static_cast<double>(count) : 0.0;
  return r;
}

EvalReport evaluate(const Model& model, std::span<const Layout> corpus, std::uint64_t seed) {
  EvalReport report;
  report.nll = eval_nll(model, corpus);
  report.per_class = eval_per_class_nll(model, corpus);
  report.top1_class = eval_top1_class(model, corpus, seed);
  report.cond_miou = eval_cond_miou(model, corpus, seed);
  report.seed = seed;
  return report;
}

namespace {

constexpr const char* kHoldOutProtocol =
    "one held-out box per layout (hash of layout id and seed); top-1 masks its span in place, "
    "mIoU greedy-decodes it at its raster position given its class";

}  // namespace

nlohmann::ordered_json to_json(const EvalReport& r, const std::vector<std::string>& names) {
  nlohmann::ordered_json j;
  j["nll"] = r.nll.nll;
  j["total_nll"] = r.nll.total_nll;
  j["tokens"] = r.nll.tokens;
  j["layouts"] = r.nll.layouts;
  j["skipped"] = r.nll.skipped;
  j["top1_class_acc"] = r.top1_class.value;
  j["top1_count"] = r.top1_class.count;
  j["cond_miou"] = r.cond_miou.value;
  j["cond_miou_count"] = r.cond_miou.count;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const ClassNll& c : r.per_class) {
    nlohmann::ordered_json row;
    row["class_id"] = c.class_id;
    if (static_cast<std::size_t>(c.class_id) < names.size()) row["class_name"] = names[static_cast<std::size_t>(c.class_id)];
    row["count"] = c.count;
    row["nll"] = c.nll;
    per.push_back(std::move(row));
  }
  j["per_class"] = std::move(per);
  j["seed"] = r.seed;
  j["protocol"] = kHoldOutProtocol;
  j["config"] = r.config;
  return j;
}

std::string format_report_table(const EvalReport& r, const std::vector<std::string>& names) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "protocol     " << kHoldOutProtocol << "\n";
  out << "layouts      " << r.nll.layouts << " (skipped " << r.nll.skipped << ")\n";
  out << "nll          " << r.nll.nll << " nats/token over " << r.nll.tokens << " tokens\n";
  out << "top1 class   " << r.top1_class.value << " (" << r.top1_class.count << ")\n";
  out << "cond mIoU    " << r.cond_miou.value << " (" << r.cond_miou.count << ")\n";
  out << "per-class class-token nll\n";
  for (const ClassNll& c : r.per_class) {
    const std::string name =
        static_cast<std::size_t>(c.class_id) < names.size() ? names[static_cast<std::size_t>(c.class_id)]
                                                              : std::to_string(c.class_id);
    out << "  " << std::left << std::setw(12) << name << std::right << std::setw(8) << c.count << "  "
        << c.nll << '\n';
  }
  return out.str();
}

}  // namespace layoutseq
