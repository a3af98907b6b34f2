#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "layoutseq/layout.hpp"
#include "layoutseq/optim.hpp"
#include "layoutseq/tensor.hpp"

namespace layoutseq {

class Rng;

enum class AttentionMode { Bidirectional, Causal };

const char* attention_mode_name(AttentionMode mode);
AttentionMode parse_attention_mode(std::string_view name);

/// max_seq_len default: BOS + EOS + 5 tokens for each of 128 elements.
inline constexpr int kDefaultMaxSeqLen = 2 + 5 * 128;

struct ModelConfig {
  int d_model = 256;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 1024;
  double dropout = 0.1;
  int max_seq_len = kDefaultMaxSeqLen;
  AttentionMode attention = AttentionMode::Bidirectional;
  int vocab_size = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  /// "tiny" (64, 2, 2, 256), "small" (256, 4, 4, 1024), "medium" (512, 6, 8,
  /// 2048), "large" (768, 12, 12, 3072); all with dropout 0.1.
  static ModelConfig preset(std::string_view name, int vocab_size,
                            AttentionMode attention = AttentionMode::Bidirectional);
};

nlohmann::ordered_json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const Vocab& vocab);
Vocab vocab_from_json(const nlohmann::json& j);

struct LayerParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

/// Pre-norm encoder weights. Linear maps are stored [in, out] (y = x W + b).
struct ModelParams {
  Tensor token_embedding;     // [vocab, d]
  Tensor position_embedding;  // [max_seq_len, d]
  std::vector<LayerParams> layers;
  Tensor final_gamma, final_beta;
  Tensor w_out, b_out;  // [d, vocab], [vocab]

  /// Stable (name, tensor) listing; tensors share storage with the params.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> tensors() const;
  std::size_t parameter_count() const;
  /// Independent copy of every weight.
  ModelParams clone() const;
};

struct Model {
  ModelConfig config;
  Vocab vocab{1, 1};
  ModelParams params;
};

/// Truncated normal (sigma 0.02, cut at 2 sigma) for weights and embeddings,
/// zero biases, unit layer-norm gains.
ModelParams init_params(const ModelConfig& config, Rng& rng);
Model make_model(const ModelConfig& config, const Vocab& vocab, Rng& rng);

/// Right-padded token ids plus a per-position validity mask.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> valid;

  static TokenBatch pack(const std::vector<std::vector<TokenId>>& sequences, TokenId pad);
  std::size_t row(std::size_t b, std::size_t t) const { return b * seq_len + t; }
};

/// Final hidden states [batch*seq_len, d] (after the last layer norm).
Tensor encode(const Model& model, const TokenBatch& batch, bool training, Rng* rng);
/// Vocabulary logits for hidden rows [rows, d] -> [rows, vocab].
Tensor output_logits(const Model& model, const Tensor& hidden);
/// Unnormalized logits [batch, seq_len, vocab].
Tensor forward(const Model& model, const TokenBatch& batch, bool training, Rng* rng);

enum class Pooling { Mean, Last };

/// Pooled final hidden state of one sequence, dropout off.
std::vector<Real> embed_layout(const Model& model, const TokenSeq& seq,
                               Pooling pooling = Pooling::Mean);
/// Batched embed_layout over many sequences.
std::vector<std::vector<Real>> embed_sequences(const Model& model,
                                               const std::vector<TokenSeq>& seqs,
                                               Pooling pooling = Pooling::Mean);

struct TrainingState {
  AdamWState optimizer;
  std::int64_t step = 0;
};

/// Weights (and optionally optimizer state) go to `path` in the checkpoint
/// container; config and vocab go both into its header and into the JSON
/// sidecar `path` + ".json".
void save_model(const std::filesystem::path& path, const Model& model,
                const TrainingState* state = nullptr);

struct LoadedModel {
  Model model;
  TrainingState state;
  bool has_optimizer_state = false;
};

/// Loads and cross-checks sidecar against the checkpoint header. When
/// `expected_vocab` is given, a different vocabulary is a ParameterError.
LoadedModel load_model(const std::filesystem::path& path, const Vocab* expected_vocab = nullptr);

}  // namespace layoutseq
