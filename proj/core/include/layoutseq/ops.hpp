#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "layoutseq/tensor.hpp"

namespace layoutseq {

class Rng;

// Differentiable operations. Each returns a new tensor; when an input requires
// a gradient the result records how to propagate it.

/// a[m,k] . b[k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
/// x[..., n] + bias[n], broadcast over leading axes.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Same values, new shape (numel must agree).
Tensor reshape(const Tensor& x, Shape shape);

/// Numerically stable softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

inline constexpr Real kLayerNormEps = static_cast<Real>(1e-5);

/// Normalizes over the last axis, then applies gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Real eps = kLayerNormEps);

/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);

/// Inverted dropout; identity when `training` is false or p == 0.
Tensor dropout(const Tensor& x, Real p, bool training, Rng* rng);

/// Mean of -log softmax(logits)[target] over rows whose target is not
/// `ignore_index`. Returns 0 when every row is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::int32_t ignore_index = -1);

/// Row lookup: table[V,d], ids -> [len(ids), d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

/// x[N,d] -> x[rows, d].
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

struct AttentionDims {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t heads = 0;
};

/// Multi-head scaled dot-product attention over q,k,v of shape
/// [batch*seq_len, d]. Key j is hidden from query i when `key_valid[b*T+j]`
/// is 0, or, with `causal`, when j > i. Returns concatenated heads [B*T, d].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionDims& dims,
                 std::span<const std::uint8_t> key_valid, bool causal);

}  // namespace layoutseq
