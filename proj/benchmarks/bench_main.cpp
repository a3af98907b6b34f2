#include <benchmark/benchmark.h>

#include <filesystem>

#include "layoutseq/grammar.hpp"
#include "layoutseq/inference.hpp"
#include "layoutseq/model.hpp"
#include "layoutseq/ops.hpp"
#include "layoutseq/optim.hpp"
#include "layoutseq/retrieval.hpp"
#include "layoutseq/rng.hpp"
#include "layoutseq/training.hpp"

namespace {

using namespace layoutseq;

std::vector<Real> normals(std::size_t n, Rng& rng) {
  std::vector<Real> v(n);
  for (Real& x : v) x = static_cast<Real>(rng.normal());
  return v;
}

Tensor random(Shape shape, Rng& rng, bool grad = false) {
  auto v = normals(shape_numel(shape), rng);
  return Tensor(std::move(shape), std::move(v), grad);
}

struct Fixture {
  Grammar grammar;
  std::vector<Layout> layouts;  // about ten boxes each
  Model model;                  // untrained tiny preset; speed only
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    out.grammar = read_grammar(std::filesystem::path(LAYOUTSEQ_DATA_DIR) / "benchmark_grammar.json");
    out.layouts = sample_corpus(out.grammar, 2000, 1).layouts;
    const Vocab vocab = out.grammar.vocab();
    Rng rng(3);
    out.model = make_model(ModelConfig::preset("tiny", vocab.size()), vocab, rng);
    return out;
  }();
  return f;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random({n, n}, rng), b = random({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Arg(512);

// Forward and backward of one attention op: batch 8, 52 tokens, d 64, 2 heads.
void BM_Attention(benchmark::State& state) {
  const bool causal = state.range(0) != 0;
  const AttentionDims dims{8, 52, 2};
  Rng rng(2);
  const std::size_t rows = dims.batch * dims.seq_len;
  Tensor q = random({rows, 64}, rng, true), k = random({rows, 64}, rng, true), v = random({rows, 64}, rng, true);
  const std::vector<std::uint8_t> valid(rows, 1);
  for (auto _ : state) {
    Tensor out = sum(attention(q, k, v, dims, valid, causal));
    out.backward();
    benchmark::DoNotOptimize(out.item());
  }
}
BENCHMARK(BM_Attention)->Arg(0)->Arg(1)->ArgNames({"causal"});

void BM_Forward(benchmark::State& state) {
  const Fixture& f = fixture();
  std::vector<std::vector<TokenId>> seqs;
  for (std::size_t i = 0; i < 8; ++i) seqs.push_back(layout_to_seq(f.layouts[i], f.model.vocab).ids);
  const TokenBatch batch = TokenBatch::pack(seqs, f.model.vocab.pad());
  for (auto _ : state) benchmark::DoNotOptimize(forward(f.model, batch, false, nullptr));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.batch * batch.seq_len));
}
BENCHMARK(BM_Forward);

// One optimizer step on eight layouts: batch build, masked loss, backward, AdamW.
void BM_TrainStep(benchmark::State& state) {
  const Fixture& f = fixture();
  Model model = f.model;
  model.params = f.model.params.clone();
  std::vector<Tensor> params = model.params.tensors();
  AdamWState opt = AdamWState::zeros_like(params);
  Rng rng(4);
  std::size_t at = 0;
  for (auto _ : state) {
    const std::span<const Layout> slice(f.layouts.data() + at, 8);
    at = (at + 8) % (f.layouts.size() - 8);
    const MaskedBatch batch = make_batch(slice, model.vocab, rng, 0.5);
    for (Tensor& p : params) p.zero_grad();
    Tensor loss = bert_loss(model, batch, true, &rng);
    loss.backward();
    adamw_step(params, opt, AdamWConfig{}, 1e-3);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_InsertGreedy(benchmark::State& state) {
  const Fixture& f = fixture();
  for (auto _ : state) {
    benchmark::DoNotOptimize(insert_object(f.model, f.layouts[0], std::nullopt, SamplerConfig::greedy()));
  }
}
BENCHMARK(BM_InsertGreedy)->Unit(benchmark::kMillisecond);

void BM_Query(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  std::vector<std::string> ids;
  std::vector<std::vector<Real>> rows;
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back("r" + std::to_string(i));
    rows.push_back(normals(64, rng));
  }
  const EmbeddingIndex index(ids, rows);
  const std::vector<Real> q = normals(64, rng);
  for (auto _ : state) benchmark::DoNotOptimize(query(index, q, 5));
}
BENCHMARK(BM_Query)->Arg(1000)->Arg(20000);

}  // namespace

BENCHMARK_MAIN();
