#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "../support/fixtures.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/evaluation.hpp"
#include "layoutseq/rng.hpp"
#include "layoutseq/training.hpp"

namespace layoutseq {
namespace {

ModelConfig mini(const Vocab& vocab, AttentionMode mode = AttentionMode::Bidirectional) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.dropout = 0.0;
  c.max_seq_len = 64;
  c.attention = mode;
  c.vocab_size = vocab.size();
  return c;
}

Model random_model(const Vocab& vocab, AttentionMode mode, std::uint64_t seed = 1) {
  Rng rng(seed);
  Model m = make_model(mini(vocab, mode), vocab, rng);
  Rng spread(seed + 7);
  for (Real& x : m.params.w_out.mutable_values()) x = static_cast<Real>(2 * spread.uniform() - 1);
  return m;
}

std::vector<Layout> fuzz_corpus(Rng& rng, const Vocab& vocab, std::size_t n, std::size_t max_boxes) {
  std::vector<Layout> out;
  for (std::size_t i = 0; i < n; ++i) {
    Layout l = testing::random_grid_layout(rng, vocab, max_boxes);
    l.id = "f" + std::to_string(i);
    out.push_back(l);
  }
  return out;
}

class BothModes : public ::testing::TestWithParam<AttentionMode> {};

TEST_P(BothModes, PerClassCountsSumToTheBoxCount) {
  const Vocab vocab(4, 8);
  Rng rng(1);
  const auto corpus = fuzz_corpus(rng, vocab, 30, 5);
  const Model m = random_model(vocab, GetParam());
  std::size_t boxes = 0;
  for (const Layout& l : corpus) boxes += l.boxes.size();
  std::size_t counted = 0;
  for (const ClassNll& c : eval_per_class_nll(m, corpus)) counted += c.count;
  EXPECT_EQ(counted, boxes);
}

TEST_P(BothModes, PerClassIsAPartitionOfTheClassPositionNll) {
  const Vocab vocab(4, 8);
  Rng rng(2);
  const auto corpus = fuzz_corpus(rng, vocab, 25, 4);
  const Model m = random_model(vocab, GetParam());
  double direct = 0;
  std::size_t n = 0;
  for (const Layout& l : corpus) {
    const TokenSeq seq = layout_to_seq(l, vocab);
    if (GetParam() == AttentionMode::Causal) {
      const auto nll = next_token_nll(m, seq);
      for (std::size_t b = 0; b < seq.num_boxes(); ++b) direct += nll[TokenSeq::span_start(b) - 1];
    } else {
      const auto nll = masked_token_nll(m, seq);
      for (std::size_t b = 0; b < seq.num_boxes(); ++b) direct += nll[5 * b];
    }
    n += seq.num_boxes();
  }
  double weighted = 0;
  std::size_t total = 0;
  for (const ClassNll& c : eval_per_class_nll(m, corpus)) {
    weighted += c.nll * static_cast<double>(c.count);
    total += c.count;
  }
  EXPECT_EQ(total, n);
  EXPECT_NEAR(weighted / static_cast<double>(total), direct / static_cast<double>(n), 1e-9);
}

TEST_P(BothModes, CorpusNllIsTheMeanOfPerTokenNll) {
  const Vocab vocab(3, 8);
  Rng rng(3);
  auto corpus = fuzz_corpus(rng, vocab, 10, 3);
  corpus.push_back(corpus[2]);  // duplicates are weighted, not dropped
  const Model m = random_model(vocab, GetParam());
  double sum = 0;
  std::size_t tokens = 0;
  for (const Layout& l : corpus) {
    const TokenSeq seq = layout_to_seq(l, vocab);
    const auto nll = GetParam() == AttentionMode::Causal ? next_token_nll(m, seq) : masked_token_nll(m, seq);
    for (double x : nll) sum += x;
    tokens += nll.size();
  }
  const NllResult r = eval_nll(m, corpus);
  EXPECT_EQ(r.tokens, tokens);
  EXPECT_EQ(r.layouts, corpus.size());
  EXPECT_NEAR(r.nll, sum / static_cast<double>(tokens), 1e-9);
}

TEST_P(BothModes, MetricsStayInTheUnitIntervalOnFuzzedCorpora) {
  const Vocab vocab(5, 8);
  Rng rng(4);
  const Model m = random_model(vocab, GetParam());
  for (int trial = 0; trial < 5; ++trial) {
    const auto corpus = fuzz_corpus(rng, vocab, 20, 6);
    const AccuracyResult acc = eval_top1_class(m, corpus, static_cast<std::uint64_t>(trial));
    const AccuracyResult miou = eval_cond_miou(m, corpus, static_cast<std::uint64_t>(trial));
    EXPECT_GE(acc.value, 0.0);
    EXPECT_LE(acc.value, 1.0);
    EXPECT_GE(miou.value, 0.0);
    EXPECT_LE(miou.value, 1.0);
    EXPECT_EQ(acc.count, corpus.size());
    EXPECT_EQ(miou.count, corpus.size());
  }
}

TEST_P(BothModes, ShufflingTheCorpusChangesNothing) {
  const Vocab vocab(4, 8);
  Rng rng(5);
  auto corpus = fuzz_corpus(rng, vocab, 30, 5);
  const Model m = random_model(vocab, GetParam());
  const EvalReport a = evaluate(m, corpus, 9);
  std::reverse(corpus.begin(), corpus.end());
  std::swap(corpus[3], corpus[17]);
  const EvalReport b = evaluate(m, corpus, 9);
  EXPECT_NEAR(a.nll.nll, b.nll.nll, 1e-12);
  EXPECT_EQ(a.top1_class.value, b.top1_class.value);
  EXPECT_NEAR(a.cond_miou.value, b.cond_miou.value, 1e-12);
  for (std::size_t c = 0; c < a.per_class.size(); ++c) {
    EXPECT_EQ(a.per_class[c].count, b.per_class[c].count);
    EXPECT_NEAR(a.per_class[c].nll, b.per_class[c].nll, 1e-12);
  }
}

TEST_P(BothModes, RepeatedEvaluationIsByteIdentical) {
  const Vocab vocab(4, 8);
  Rng rng(6);
  const auto corpus = fuzz_corpus(rng, vocab, 20, 5);
  const Model m = random_model(vocab, GetParam());
  const std::vector<std::string> names = {"a", "b", "c", "d"};
  EXPECT_EQ(to_json(evaluate(m, corpus, 3), names).dump(), to_json(evaluate(m, corpus, 3), names).dump());
}

TEST_P(BothModes, EmptyCorpusIsRejected) {
  const Vocab vocab(2, 4);
  const Model m = random_model(vocab, GetParam());
  const std::vector<Layout> none;
  EXPECT_THROW(eval_nll(m, none), DataError);
  EXPECT_THROW(eval_per_class_nll(m, none), DataError);
  EXPECT_THROW(eval_top1_class(m, none, 0), DataError);
  EXPECT_THROW(eval_cond_miou(m, none, 0), DataError);
}

INSTANTIATE_TEST_SUITE_P(Modes, BothModes,
                         ::testing::Values(AttentionMode::Bidirectional, AttentionMode::Causal),
                         [](const auto& info) { return std::string(attention_mode_name(info.param)); });

TEST(EvalNll, UntrainedModelIsNearUniform) {
  const Vocab vocab(6, 16);
  Rng rng(7);
  const Model m = make_model(ModelConfig::preset("small", vocab.size()), vocab, rng);
  const auto corpus = fuzz_corpus(rng, vocab, 6, 4);
  EXPECT_NEAR(eval_nll(m, corpus).nll, std::log(static_cast<double>(vocab.size())), 0.2);
}

TEST(HeldOut, KeyedByIdNotPosition) {
  const Vocab vocab(3, 8);
  Rng rng(8);
  Layout l = testing::random_grid_layout(rng, vocab, 6);
  l.boxes.resize(std::max<std::size_t>(l.boxes.size(), 1));
  l.id = "stable";
  const TokenSeq seq = layout_to_seq(l, vocab);
  const std::size_t a = held_out_index(l, seq, 5);
  EXPECT_EQ(a, held_out_index(l, seq, 5));
  EXPECT_LT(a, seq.num_boxes());
  // Spread over positions across ids.
  Layout five;
  for (int i = 0; i < 5; ++i) five.boxes.push_back({0, 0.125 * i, 0, 0.125, 0.125});
  const TokenSeq s5 = layout_to_seq(five, vocab);
  std::vector<int> hits(5, 0);
  for (int i = 0; i < 500; ++i) {
    five.id = "id" + std::to_string(i);
    hits[held_out_index(five, s5, 1)]++;
  }
  for (int h : hits) EXPECT_GT(h, 60);
}

TEST(Top1, UniformLogitsGiveChanceAccuracy) {
  const Vocab vocab(4, 8);
  Rng rng(9);
  Model m = random_model(vocab, AttentionMode::Bidirectional);
  for (Real& x : m.params.w_out.mutable_values()) x = 0;
  for (Real& x : m.params.b_out.mutable_values()) x = 0;
  const auto corpus = fuzz_corpus(rng, vocab, 2000, 3);
  const AccuracyResult r = eval_top1_class(m, corpus, 1);
  // Ties resolve to class 0, which holds a quarter of the boxes.
  EXPECT_NEAR(r.value, 0.25, 4 * std::sqrt(0.25 * 0.75 / 2000));
}

TEST(Top1, ClassFilterRestrictsTheHeldOutBox) {
  const Vocab vocab(3, 8);
  const Model m = random_model(vocab, AttentionMode::Bidirectional);
  std::vector<Layout> corpus(2);
  corpus[0].id = "a";
  corpus[0].boxes = {{0, 0, 0, 0.25, 0.25}, {1, 0.5, 0.5, 0.25, 0.25}};
  corpus[1].id = "b";
  corpus[1].boxes = {{0, 0, 0, 0.25, 0.25}};
  const AccuracyResult r = eval_top1_class(m, corpus, 0, std::set<int>{1});
  EXPECT_EQ(r.count, 1u);
  EXPECT_EQ(eval_cond_miou(m, corpus, 0, std::set<int>{2}).count, 0u);
}

TEST(Memorization, SingleLayoutCorpusIsLearnedExactly) {
  const Vocab vocab(3, 8);
  Layout l;
  l.id = "only";
  l.boxes = {{0, 0, 0, 1, 0.25}, {1, 0.25, 0.5, 0.5, 0.25}, {2, 0.5, 0.75, 0.25, 0.125}};
  const std::vector<Layout> corpus = {l};
  ModelConfig cfg = mini(vocab);
  cfg.d_model = 32;
  cfg.d_ff = 64;
  cfg.n_layers = 2;
  Rng rng(10);
  TrainPlan plan;
  plan.total_steps = 300;
  plan.batch_size = 4;
  plan.base_lr = 3e-3;
  plan.flip_probability = 0;
  plan.eval_every = 300;
  plan.adamw.weight_decay = 0;
  const TrainResult r = train(plan, corpus, corpus, make_model(cfg, vocab, rng));
  EXPECT_LT(eval_nll(r.model, corpus).nll, 0.05);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    EXPECT_EQ(eval_top1_class(r.model, corpus, seed).value, 1.0);
    EXPECT_EQ(eval_cond_miou(r.model, corpus, seed).value, 1.0);
  }
}

TEST(Report, JsonCsvAndTable) {
  const Vocab vocab(2, 4);
  Rng rng(11);
  const auto corpus = fuzz_corpus(rng, vocab, 5, 2);
  const Model m = random_model(vocab, AttentionMode::Bidirectional);
  EvalReport report = evaluate(m, corpus, 4);
  report.config = {{"checkpoint", "x.ckpt"}};
  const auto j = to_json(report, {"left", "right"});
  EXPECT_EQ(j["config"]["checkpoint"], "x.ckpt");
  EXPECT_EQ(j["seed"], 4);
  EXPECT_TRUE(j.contains("protocol"));
  EXPECT_EQ(j["per_class"][1]["class_name"], "right");
  const std::string csv = per_class_csv(report.per_class, {"left", "right"});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "class_id,class_name,count,nll");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(format_report_table(report, {"left", "right"}).find("cond mIoU"), std::string::npos);
}

}  // namespace
}  // namespace layoutseq
