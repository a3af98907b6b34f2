#include "layoutseq/model.hpp"

#include <algorithm>
#include <cmath>

#include "layoutseq/checkpoint.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/io.hpp"
#include "layoutseq/ops.hpp"
#include "layoutseq/rng.hpp"

namespace layoutseq {

const char* attention_mode_name(AttentionMode mode) {
  return mode == AttentionMode::Causal ? "causal" : "bidirectional";
}

AttentionMode parse_attention_mode(std::string_view name) {
  if (name == "bidirectional") return AttentionMode::Bidirectional;
  if (name == "causal") return AttentionMode::Causal;
  throw ParameterError("unknown attention mode '" + std::string(name) +
                       "' (expected bidirectional or causal)");
}

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0 ||
      vocab_size <= 0) {
    throw ParameterError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ParameterError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                         std::to_string(n_heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("dropout must lie in [0, 1)");
}

ModelConfig ModelConfig::preset(std::string_view name, int vocab_size, AttentionMode attention) {
  ModelConfig c;
  if (name == "tiny") {
    c.d_model = 64, c.n_layers = 2, c.n_heads = 2, c.d_ff = 256;
  } else if (name == "small") {
    c.d_model = 256, c.n_layers = 4, c.n_heads = 4, c.d_ff = 1024;
  } else if (name == "medium") {
    c.d_model = 512, c.n_layers = 6, c.n_heads = 8, c.d_ff = 2048;
  } else if (name == "large") {
    c.d_model = 768, c.n_layers = 12, c.n_heads = 12, c.d_ff = 3072;
  } else {
    throw ParameterError("unknown model preset '" + std::string(name) + "'");
  }
  c.dropout = 0.1;
  c.attention = attention;
  c.vocab_size = vocab_size;
  c.validate();
  return c;
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["dropout"] = c.dropout;
  j["max_seq_len"] = c.max_seq_len;
  j["attention"] = attention_mode_name(c.attention);
  j["vocab_size"] = c.vocab_size;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.attention = parse_attention_mode(j.at("attention").get<std::string>());
    c.vocab_size = j.at("vocab_size").get<int>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
}

nlohmann::ordered_json to_json(const Vocab& vocab) {
  nlohmann::ordered_json j;
  j["num_classes"] = vocab.num_classes();
  j["grid_n"] = vocab.grid_n();
  j["size"] = vocab.size();
  return j;
}

Vocab vocab_from_json(const nlohmann::json& j) {
  try {
    Vocab v(j.at("num_classes").get<int>(), j.at("grid_n").get<int>());
    if (j.contains("size") && j["size"].get<int>() != v.size()) {
      throw DataError("vocab size field disagrees with num_classes/grid_n");
    }
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("vocab: ") + e.what());
  }
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding);
  out.emplace_back("position_embedding", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerParams& p = layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.emplace_back(pre + "ln1.gamma", p.ln1_gamma);
    out.emplace_back(pre + "ln1.beta", p.ln1_beta);
    out.emplace_back(pre + "attn.wq", p.wq);
    out.emplace_back(pre + "attn.bq", p.bq);
    out.emplace_back(pre + "attn.wk", p.wk);
    out.emplace_back(pre + "attn.bk", p.bk);
    out.emplace_back(pre + "attn.wv", p.wv);
    out.emplace_back(pre + "attn.bv", p.bv);
    out.emplace_back(pre + "attn.wo", p.wo);
    out.emplace_back(pre + "attn.bo", p.bo);
    out.emplace_back(pre + "ln2.gamma", p.ln2_gamma);
    out.emplace_back(pre + "ln2.beta", p.ln2_beta);
    out.emplace_back(pre + "ff.w1", p.w_ff1);
    out.emplace_back(pre + "ff.b1", p.b_ff1);
    out.emplace_back(pre + "ff.w2", p.w_ff2);
    out.emplace_back(pre + "ff.b2", p.b_ff2);
  }
  out.emplace_back("final_ln.gamma", final_gamma);
  out.emplace_back("final_ln.beta", final_beta);
  out.emplace_back("output.w", w_out);
  out.emplace_back("output.b", b_out);
  return out;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named()) n += t.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  auto copy = [](const Tensor& t) {
    return Tensor(t.shape(), std::vector<Real>(t.values().begin(), t.values().end()), true);
  };
  ModelParams p;
  p.token_embedding = copy(token_embedding);
  p.position_embedding = copy(position_embedding);
  for (const LayerParams& l : layers) {
    LayerParams c;
    c.ln1_gamma = copy(l.ln1_gamma), c.ln1_beta = copy(l.ln1_beta);
    c.wq = copy(l.wq), c.bq = copy(l.bq), c.wk = copy(l.wk), c.bk = copy(l.bk);
    c.wv = copy(l.wv), c.bv = copy(l.bv), c.wo = copy(l.wo), c.bo = copy(l.bo);
    c.ln2_gamma = copy(l.ln2_gamma), c.ln2_beta = copy(l.ln2_beta);
    c.w_ff1 = copy(l.w_ff1), c.b_ff1 = copy(l.b_ff1);
    c.w_ff2 = copy(l.w_ff2), c.b_ff2 = copy(l.b_ff2);
    p.layers.push_back(std::move(c));
  }
  p.final_gamma = copy(final_gamma);
  p.final_beta = copy(final_beta);
  p.w_out = copy(w_out);
  p.b_out = copy(b_out);
  return p;
}

namespace {

constexpr double kInitStd = 0.02;

Tensor normal_param(Shape shape, Rng& rng) {
  std::vector<Real> v(shape_numel(shape));
  for (Real& x : v) x = static_cast<Real>(rng.truncated_normal(kInitStd));
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor const_param(Shape shape, Real value) { return Tensor::full(std::move(shape), value, true); }

}  // namespace

ModelParams init_params(const ModelConfig& config, Rng& rng) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const auto vocab = static_cast<std::size_t>(config.vocab_size);
  ModelParams p;
  Rng emb = rng.split("init.embedding");
  p.token_embedding = normal_param({vocab, d}, emb);
  p.position_embedding = normal_param({static_cast<std::size_t>(config.max_seq_len), d}, emb);
  for (int l = 0; l < config.n_layers; ++l) {
    Rng r = rng.split("init.layer").split(static_cast<std::uint64_t>(l));
    LayerParams lp;
    lp.ln1_gamma = const_param({d}, 1);
    lp.ln1_beta = const_param({d}, 0);
    lp.wq = normal_param({d, d}, r);
    lp.bq = const_param({d}, 0);
    lp.wk = normal_param({d, d}, r);
    lp.bk = const_param({d}, 0);
    lp.wv = normal_param({d, d}, r);
    lp.bv = const_param({d}, 0);
    lp.wo = normal_param({d, d}, r);
    lp.bo = const_param({d}, 0);
    lp.ln2_gamma = const_param({d}, 1);
    lp.ln2_beta = const_param({d}, 0);
    lp.w_ff1 = normal_param({d, ff}, r);
    lp.b_ff1 = const_param({ff}, 0);
    lp.w_ff2 = normal_param({ff, d}, r);
    lp.b_ff2 = const_param({d}, 0);
    p.layers.push_back(std::move(lp));
  }
  p.final_gamma = const_param({d}, 1);
  p.final_beta = const_param({d}, 0);
  Rng out = rng.split("init.output");
  p.w_out = normal_param({d, vocab}, out);
  p.b_out = const_param({vocab}, 0);
  return p;
}

Model make_model(const ModelConfig& config, const Vocab& vocab, Rng& rng) {
  if (config.vocab_size != vocab.size()) {
    throw ParameterError("config vocab_size " + std::to_string(config.vocab_size) +
                         " does not match vocabulary size " + std::to_string(vocab.size()));
  }
  return Model{config, vocab, init_params(config, rng)};
}

TokenBatch TokenBatch::pack(const std::vector<std::vector<TokenId>>& sequences, TokenId pad) {
  if (sequences.empty()) throw DimensionError("cannot pack an empty batch");
  TokenBatch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) b.seq_len = std::max(b.seq_len, s.size());
  if (b.seq_len == 0) throw DimensionError("cannot pack empty sequences");
  b.ids.assign(b.batch * b.seq_len, pad);
  b.valid.assign(b.batch * b.seq_len, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::copy(sequences[i].begin(), sequences[i].end(), b.ids.begin() + i * b.seq_len);
    std::fill_n(b.valid.begin() + i * b.seq_len, sequences[i].size(), 1);
  }
  return b;
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

}  // namespace

Tensor encode(const Model& model, const TokenBatch& batch, bool training, Rng* rng) {
  const ModelConfig& cfg = model.config;
  if (batch.batch == 0 || batch.seq_len == 0) throw DimensionError("empty token batch");
  if (batch.ids.size() != batch.batch * batch.seq_len || batch.valid.size() != batch.ids.size()) {
    throw DimensionError("token batch arrays do not match batch x seq_len");
  }
  if (batch.seq_len > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw LengthError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    if (batch.ids[i] < 0 || batch.ids[i] >= cfg.vocab_size) {
      throw VocabError("token id " + std::to_string(batch.ids[i]) + " at flat position " +
                       std::to_string(i) + " is outside the vocabulary of size " +
                       std::to_string(cfg.vocab_size));
    }
  }
  if (training && cfg.dropout > 0 && rng == nullptr) {
    throw ParameterError("training forward pass with dropout needs an rng");
  }

  const ModelParams& p = model.params;
  std::vector<std::int32_t> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<std::int32_t>(i % batch.seq_len);
  }
  Tensor x = add(embedding(p.token_embedding, batch.ids), embedding(p.position_embedding, positions));

  const AttentionDims dims{batch.batch, batch.seq_len, static_cast<std::size_t>(cfg.n_heads)};
  const bool causal = cfg.attention == AttentionMode::Causal;
  const Real drop = static_cast<Real>(cfg.dropout);
  for (const LayerParams& l : p.layers) {
    Tensor h = layer_norm(x, l.ln1_gamma, l.ln1_beta);
    Tensor q = linear(h, l.wq, l.bq);
    Tensor k = linear(h, l.wk, l.bk);
    Tensor v = linear(h, l.wv, l.bv);
    Tensor a = attention(q, k, v, dims, batch.valid, causal);
    x = add(x, linear(a, l.wo, l.bo));

    Tensor g = layer_norm(x, l.ln2_gamma, l.ln2_beta);
    Tensor f = linear(gelu(linear(g, l.w_ff1, l.b_ff1)), l.w_ff2, l.b_ff2);
    x = add(x, dropout(f, drop, training, rng));
  }
  return layer_norm(x, p.final_gamma, p.final_beta);
}

Tensor output_logits(const Model& model, const Tensor& hidden) {
  return linear(hidden, model.params.w_out, model.params.b_out);
}

Tensor forward(const Model& model, const TokenBatch& batch, bool training, Rng* rng) {
  Tensor logits = output_logits(model, encode(model, batch, training, rng));
  return reshape(logits, {batch.batch, batch.seq_len, static_cast<std::size_t>(model.config.vocab_size)});
}

std::vector<std::vector<Real>> embed_sequences(const Model& model, const std::vector<TokenSeq>& seqs,
                                               Pooling pooling) {
  std::vector<std::vector<Real>> out;
  if (seqs.empty()) return out;
  std::vector<std::vector<TokenId>> ids;
  for (const TokenSeq& s : seqs) {
    if (s.ids.empty()) throw DimensionError("cannot embed an empty sequence");
    ids.push_back(s.ids);
  }
  NoGradGuard no_grad;
  const TokenBatch batch = TokenBatch::pack(ids, model.vocab.pad());
  const Tensor hidden = encode(model, batch, false, nullptr);
  const auto d = static_cast<std::size_t>(model.config.d_model);
  const auto values = hidden.values();
  for (std::size_t b = 0; b < batch.batch; ++b) {
    std::vector<Real> e(d, 0);
    const std::size_t len = seqs[b].ids.size();
    if (pooling == Pooling::Last) {
      const std::size_t row = batch.row(b, len - 1);
      std::copy_n(values.begin() + row * d, d, e.begin());
    } else {
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t row = batch.row(b, t);
        for (std::size_t j = 0; j < d; ++j) e[j] += values[row * d + j];
      }
      for (Real& v : e) v /= static_cast<Real>(len);
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Real> embed_layout(const Model& model, const TokenSeq& seq, Pooling pooling) {
  return embed_sequences(model, {seq}, pooling).front();
}

namespace {

const std::string kMomentPrefixM = "adam.m.";
const std::string kMomentPrefixV = "adam.v.";

nlohmann::ordered_json model_meta(const Model& model) {
  nlohmann::ordered_json j;
  j["config"] = to_json(model.config);
  j["vocab"] = to_json(model.vocab);
  return j;
}

}  // namespace

void save_model(const std::filesystem::path& path, const Model& model, const TrainingState* state) {
  Checkpoint ckpt;
  ckpt.step = state ? state->step : 0;
  const auto named = model.params.named();
  for (auto& [name, t] : named) {
    ckpt.arrays.push_back({name, t.shape(), std::vector<Real>(t.values().begin(), t.values().end())});
  }
  if (state && !state->optimizer.m.empty()) {
    if (state->optimizer.m.size() != named.size() || state->optimizer.v.size() != named.size()) {
      throw DimensionError("optimizer state does not match parameter list");
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      ckpt.arrays.push_back({kMomentPrefixM + named[i].first, named[i].second.shape(), state->optimizer.m[i]});
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      ckpt.arrays.push_back({kMomentPrefixV + named[i].first, named[i].second.shape(), state->optimizer.v[i]});
    }
  }
  nlohmann::ordered_json meta = model_meta(model);
  if (state) meta["optimizer_step"] = state->optimizer.step;
  ckpt.meta_json = meta.dump();
  save_checkpoint(path, ckpt);

  nlohmann::ordered_json sidecar = model_meta(model);
  sidecar["checkpoint"] = path.filename().string();
  write_file_atomic(path.string() + ".json", sidecar.dump(2) + "\n");
}

LoadedModel load_model(const std::filesystem::path& path, const Vocab* expected_vocab) {
  const Checkpoint ckpt = load_checkpoint(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ckpt.meta_json);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint meta: ") + e.what());
  }
  if (!meta.contains("config") || !meta.contains("vocab")) {
    throw DataError("checkpoint " + path.string() + " carries no model description");
  }
  const ModelConfig config = model_config_from_json(meta["config"]);
  const Vocab vocab = vocab_from_json(meta["vocab"]);

  const std::filesystem::path sidecar_path = path.string() + ".json";
  if (std::filesystem::exists(sidecar_path)) {
    nlohmann::json side;
    try {
      side = nlohmann::json::parse(read_file(sidecar_path));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("sidecar " + sidecar_path.string() + ": " + e.what());
    }
    if (!(model_config_from_json(side.at("config")) == config) ||
        !(vocab_from_json(side.at("vocab")) == vocab)) {
      throw ParameterError("sidecar " + sidecar_path.string() + " disagrees with checkpoint header");
    }
  }
  if (config.vocab_size != vocab.size()) {
    throw ParameterError("checkpoint config vocab_size does not match its vocabulary");
  }
  if (expected_vocab && !(*expected_vocab == vocab)) {
    throw ParameterError("checkpoint vocabulary (C=" + std::to_string(vocab.num_classes()) + ", N=" +
                         std::to_string(vocab.grid_n()) + ") differs from the requested one (C=" +
                         std::to_string(expected_vocab->num_classes()) + ", N=" +
                         std::to_string(expected_vocab->grid_n()) + ")");
  }

  Rng scratch(0);
  LoadedModel out{make_model(config, vocab, scratch), {}, false};
  auto named = out.model.params.named();
  for (auto& [name, t] : named) {
    const NamedArray* a = ckpt.find(name);
    if (!a) throw DataError("checkpoint is missing tensor '" + name + "'");
    if (a->shape != t.shape()) {
      throw DataError("tensor '" + name + "' has shape " + shape_str(a->shape) + ", expected " +
                      shape_str(t.shape()));
    }
    std::copy(a->values.begin(), a->values.end(), t.mutable_values().begin());
  }
  out.state.step = ckpt.step;
  if (ckpt.find(kMomentPrefixM + named.front().first)) {
    AdamWState st;
    for (auto& [name, t] : named) {
      const NamedArray* m = ckpt.find(kMomentPrefixM + name);
      const NamedArray* v = ckpt.find(kMomentPrefixV + name);
      if (!m || !v || m->values.size() != t.numel() || v->values.size() != t.numel()) {
        throw DataError("incomplete optimizer state for '" + name + "'");
      }
      st.m.push_back(m->values);
      st.v.push_back(v->values);
    }
    st.step = meta.value("optimizer_step", ckpt.step);
    out.state.optimizer = std::move(st);
    out.has_optimizer_state = true;
  }
  return out;
}

}  // namespace layoutseq
