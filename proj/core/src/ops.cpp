#include "layoutseq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <string>

#include "layoutseq/error.hpp"
#include "layoutseq/parallel.hpp"
#include "layoutseq/rng.hpp"

namespace layoutseq {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(Shape shape, std::vector<Real> value, std::initializer_list<const Tensor*> inputs) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const Tensor* t : inputs) node->requires_grad = node->requires_grad || t->requires_grad();
  }
  if (node->requires_grad) {
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
  }
  return node;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

// Rows per parallel chunk so each chunk carries roughly 64k multiply-adds.
std::size_t row_chunk(std::size_t work_per_row) {
  return std::max<std::size_t>(1, 65536 / std::max<std::size_t>(work_per_row, 1));
}

// Explicit vectors: left to itself the compiler vectorizes the tile across
// rows with shuffles, which runs several times slower.
using Vec = Real __attribute__((vector_size(32)));
constexpr std::size_t kLanes = sizeof(Vec) / sizeof(Real);
constexpr std::size_t kTileVecs = 2;
constexpr std::size_t kTileCols = kLanes * kTileVecs;

inline Vec load_vec(const Real* p) {
  Vec v;
  std::memcpy(&v, p, sizeof(Vec));
  return v;
}

inline void store_vec(Real* p, Vec v) { std::memcpy(p, &v, sizeof(Vec)); }

inline Vec broadcast(Real x) {
  Vec v;
  for (std::size_t l = 0; l < kLanes; ++l) v[l] = x;
  return v;
}

// R rows of C, columns [j0, j0 + kTileCols), held in registers across k.
template <std::size_t R>
void gemm_tile(const Real* __restrict A, const Real* __restrict B, Real* __restrict C, std::size_t k,
               std::size_t n, std::size_t j0, bool accumulate) {
  Vec acc[R][kTileVecs];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < kTileVecs; ++v) acc[r][v] = broadcast(0);
  }
  for (std::size_t p = 0; p < k; ++p) {
    Vec b[kTileVecs];
    for (std::size_t v = 0; v < kTileVecs; ++v) b[v] = load_vec(B + p * n + j0 + v * kLanes);
    for (std::size_t r = 0; r < R; ++r) {
      const Vec a = broadcast(A[r * k + p]);
      for (std::size_t v = 0; v < kTileVecs; ++v) acc[r][v] += a * b[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    Real* c = C + r * n + j0;
    for (std::size_t v = 0; v < kTileVecs; ++v) {
      store_vec(c + v * kLanes, accumulate ? load_vec(c + v * kLanes) + acc[r][v] : acc[r][v]);
    }
  }
}

// Columns past the last full tile, one element at a time.
void gemm_tail(const Real* A, const Real* B, Real* C, std::size_t rows, std::size_t k, std::size_t n,
               std::size_t j0, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = j0; j < n; ++j) {
      Real acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += A[r * k + p] * B[p * n + j];
      C[r * n + j] = accumulate ? C[r * n + j] + acc : acc;
    }
  }
}

// C[m,n] (+)= A[m,k] . B[k,n]. Every C element sums over k in ascending order
// from zero (then adds to C when accumulating), so a row's result does not
// depend on which rows share its tile or thread.
void gemm_nn(const Real* A, const Real* B, Real* C, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  parallel_for(m, row_chunk(k * n), [=](std::size_t begin, std::size_t end) {
    const std::size_t full = n - n % kTileCols;
    std::size_t i = begin;
    for (; i < end; i += 6) {
      const std::size_t rows = std::min<std::size_t>(6, end - i);
      const Real* a = A + i * k;
      Real* c = C + i * n;
      for (std::size_t j0 = 0; j0 < full; j0 += kTileCols) {
        switch (rows) {
          case 6: gemm_tile<6>(a, B, c, k, n, j0, accumulate); break;
          case 5: gemm_tile<5>(a, B, c, k, n, j0, accumulate); break;
          case 4: gemm_tile<4>(a, B, c, k, n, j0, accumulate); break;
          case 3: gemm_tile<3>(a, B, c, k, n, j0, accumulate); break;
          case 2: gemm_tile<2>(a, B, c, k, n, j0, accumulate); break;
          default: gemm_tile<1>(a, B, c, k, n, j0, accumulate); break;
        }
      }
      if (full < n) gemm_tail(a, B, c, rows, k, n, full, accumulate);
    }
  });
}

std::vector<Real> transpose(const Real* X, std::size_t rows, std::size_t cols) {
  std::vector<Real> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = X[r * cols + c];
  }
  return t;
}

// D[k,n] += A[m,k]^T . G[m,n], accumulating over i in ascending order.
void gemm_tn_accumulate(const Real* A, const Real* G, Real* D, std::size_t m, std::size_t k,
                        std::size_t n) {
  const std::vector<Real> at = transpose(A, m, k);
  gemm_nn(at.data(), G, D, k, m, n, true);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n);
  gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n, false);
  auto node = make_node({m, n}, std::move(out), {&a, &b});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* na = a.node().get();
    Node* nb = b.node().get();
    node->backward = [self, na, nb, m, k, n] {
      if (na->requires_grad) {
        const std::vector<Real> bt = transpose(nb->value.data(), k, n);
        gemm_nn(self->grad.data(), bt.data(), na->grad_buffer().data(), m, n, k, true);
      }
      if (nb->requires_grad) {
        gemm_tn_accumulate(na->value.data(), self->grad.data(), nb->grad_buffer().data(), m, k, n);
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, int op) {
  require_same_shape(a, b, op == 0 ? "add" : op == 1 ? "sub" : "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = op == 0 ? av[i] + bv[i] : op == 1 ? av[i] - bv[i] : av[i] * bv[i];
  }
  auto node = make_node(a.shape(), std::move(out), {&a, &b});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* na = a.node().get();
    Node* nb = b.node().get();
    node->backward = [self, na, nb, op] {
      const auto& g = self->grad;
      if (na->requires_grad) {
        auto ga = na->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += op == 2 ? g[i] * nb->value[i] : g[i];
      }
      if (nb->requires_grad) {
        auto gb = nb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[i] += op == 0 ? g[i] : op == 1 ? -g[i] : g[i] * na->value[i];
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, 0); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, 1); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, 2); }

Tensor scale(const Tensor& x, Real factor) {
  const auto xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  auto node = make_node(x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nx = x.node().get();
    node->backward = [self, nx, factor] {
      auto gx = nx->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self->grad[i] * factor;
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  const std::size_t n = bias.dim(0);
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  const auto bv = bias.values();
  std::vector<Real> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] + bv[j];
  }
  auto node = make_node(x.shape(), std::move(out), {&x, &bias});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nx = x.node().get();
    Node* nb = bias.node().get();
    node->backward = [self, nx, nb, rows, n] {
      const auto& g = self->grad;
      if (nx->requires_grad) {
        auto gx = nx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (nb->requires_grad) {
        auto gb = nb->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor sum(const Tensor& x) {
  Real total = 0;
  for (Real v : x.values()) total += v;
  auto node = make_node({1}, {total}, {&x});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nx = x.node().get();
    node->backward = [self, nx] {
      auto gx = nx->grad_buffer();
      for (Real& g : gx) g += self->grad[0];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor mean(const Tensor& x) { return scale(sum(x), Real{1} / static_cast<Real>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto node = make_node(std::move(shape), std::vector<Real>(x.values().begin(), x.values().end()),
                        {&x});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nx = x.node().get();
    node->backward = [self, nx] {
      auto gx = nx->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self->grad[i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      Real z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const Real e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  auto node = make_node(s, std::move(out), {&x});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nx = x.node().get();
    node->backward = [self, nx, outer, inner, len] {
      auto gx = nx->grad_buffer();
      const auto& y = self->value;
      const auto& g = self->grad;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          Real dot = 0;
          for (std::size_t j = 0; j < len; ++j) dot += y[base + j * inner] * g[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  const std::size_t n = x.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != n || beta.dim(0) != n) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<Real> out(xv.size());
  std::vector<Real> xhat(xv.size());
  std::vector<Real> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xv.data() + r * n;
    Real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Real>(n);
    rstd[r] = Real{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const Real h = (row[j] - mu) * rstd[r];
      xhat[r * n + j] = h;
      out[r * n + j] = gv[j] * h + bv[j];
    }
  }
  auto node = make_node(x.shape(), std::move(out), {&x, &gamma, &beta});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nx = x.node().get();
    Node* ng = gamma.node().get();
    Node* nb = beta.node().get();
    node->backward = [self, nx, ng, nb, rows, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const auto& g = self->grad;
      if (ng->requires_grad) {
        auto gg = ng->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
        }
      }
      if (nb->requires_grad) {
        auto gb = nb->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
      }
      if (nx->requires_grad) {
        auto gx = nx->grad_buffer();
        const auto& gam = ng->value;
        for (std::size_t r = 0; r < rows; ++r) {
          Real mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const Real d = g[r * n + j] * gam[j];
            mean_d += d;
            mean_dx += d * xhat[r * n + j];
          }
          mean_d /= static_cast<Real>(n);
          mean_dx /= static_cast<Real>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const Real d = g[r * n + j] * gam[j];
            gx[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
          }
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

namespace {

constexpr Real kGeluC = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)
constexpr Real kGeluA = static_cast<Real>(0.044715);

}  // namespace

Tensor gelu(const Tensor& x) {
  const auto xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real v = xv[i];
    out[i] = Real{0.5} * v * (Real{1} + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  auto node = make_node(x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nx = x.node().get();
    node->backward = [self, nx] {
      auto gx = nx->grad_buffer();
      const auto& xs = nx->value;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const Real v = xs[i];
        const Real t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const Real du = kGeluC * (Real{1} + Real{3} * kGeluA * v * v);
        const Real d = Real{0.5} * (Real{1} + t) + Real{0.5} * v * (Real{1} - t * t) * du;
        gx[i] += self->grad[i] * d;
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor dropout(const Tensor& x, Real p, bool training, Rng* rng) {
  if (!(p >= 0) || p >= 1) {
    throw ParameterError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0) return x;
  if (rng == nullptr) throw ParameterError("dropout in training mode needs an Rng");
  const Real keep_scale = Real{1} / (Real{1} - p);
  const auto xv = x.values();
  std::vector<Real> mask(xv.size());
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng->uniform() < static_cast<double>(p) ? Real{0} : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  auto node = make_node(x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nx = x.node().get();
    node->backward = [self, nx, mask = std::move(mask)] {
      auto gx = nx->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self->grad[i] * mask[i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::int32_t ignore_index) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be [batch x vocab], got " +
                         shape_str(logits.shape()));
  }
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw RangeError("cross_entropy: target " + std::to_string(t) + " at row " +
                       std::to_string(r) + " outside [0, " + std::to_string(vocab) + ")");
    }
    ++counted;
  }
  const auto xv = logits.values();
  std::vector<Real> probs(counted ? xv.size() : 0);
  Real total = 0;
  for (std::size_t r = 0; r < rows && counted; ++r) {
    if (targets[r] == ignore_index) continue;
    const Real* row = xv.data() + r * vocab;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, row[j]);
    Real z = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const Real e = std::exp(row[j] - mx);
      probs[r * vocab + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    total += (std::log(z) + mx) - row[targets[r]];
  }
  const Real denom = counted ? static_cast<Real>(counted) : Real{1};
  auto node = make_node({1}, {total / denom}, {&logits});
  if (node->requires_grad && counted) {
    Node* self = node.get();
    Node* nl = logits.node().get();
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    node->backward = [self, nl, rows, vocab, denom, ignore_index, tgt = std::move(tgt),
                      probs = std::move(probs)] {
      auto gl = nl->grad_buffer();
      const Real g = self->grad[0] / denom;
      for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] == ignore_index) continue;
        for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += g * probs[r * vocab + j];
        gl[r * vocab + static_cast<std::size_t>(tgt[r])] -= g;
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  }
  if (ids.empty()) throw DimensionError("embedding: no ids");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  const auto tv = table.values();
  std::vector<Real> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw RangeError("embedding: id " + std::to_string(ids[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  auto node = make_node({ids.size(), d}, std::move(out), {&table});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nt = table.node().get();
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    node->backward = [self, nt, d, idv = std::move(idv)] {
      auto gt = nt->grad_buffer();
      for (std::size_t r = 0; r < idv.size(); ++r) {
        Real* dst = gt.data() + static_cast<std::size_t>(idv[r]) * d;
        const Real* src = self->grad.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() != 2) throw DimensionError("gather_rows: expected 2-D, got " + shape_str(x.shape()));
  if (rows.empty()) throw DimensionError("gather_rows: no rows requested");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto xv = x.values();
  std::vector<Real> out(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw RangeError("gather_rows: row " + std::to_string(rows[r]) + " outside [0, " +
                       std::to_string(n) + ")");
    }
    std::copy_n(xv.data() + rows[r] * d, d, out.data() + r * d);
  }
  auto node = make_node({rows.size(), d}, std::move(out), {&x});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nx = x.node().get();
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    node->backward = [self, nx, d, rv = std::move(rv)] {
      auto gx = nx->grad_buffer();
      for (std::size_t r = 0; r < rv.size(); ++r) {
        for (std::size_t j = 0; j < d; ++j) gx[rv[r] * d + j] += self->grad[r * d + j];
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionDims& dims,
                 std::span<const std::uint8_t> key_valid, bool causal) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t B = dims.batch, T = dims.seq_len, H = dims.heads;
  if (q.rank() != 2 || B * T != q.dim(0) || H == 0 || q.dim(1) % H != 0) {
    throw DimensionError("attention: " + shape_str(q.shape()) + " incompatible with batch " +
                         std::to_string(B) + ", seq " + std::to_string(T) + ", heads " +
                         std::to_string(H));
  }
  if (key_valid.size() != B * T) {
    throw DimensionError("attention: key mask has " + std::to_string(key_valid.size()) +
                         " entries, expected " + std::to_string(B * T));
  }
  const std::size_t d = q.dim(1), dh = d / H;
  const Real scale_factor = Real{1} / std::sqrt(static_cast<Real>(dh));
  const Real* qv = q.values().data();
  const Real* kv = k.values().data();
  const Real* vv = v.values().data();
  std::vector<Real> out(B * T * d, Real{0});
  std::vector<Real> probs(B * H * T * T, Real{0});
  const std::uint8_t* valid = key_valid.data();

  parallel_for(B * H, 1, [&](std::size_t begin, std::size_t end) {
    std::vector<Real> scores(T);
    for (std::size_t bh = begin; bh < end; ++bh) {
      const std::size_t b = bh / H, h = bh % H;
      for (std::size_t i = 0; i < T; ++i) {
        const Real* qi = qv + (b * T + i) * d + h * dh;
        Real mx = -std::numeric_limits<Real>::infinity();
        const std::size_t jmax = causal ? i + 1 : T;
        for (std::size_t j = 0; j < jmax; ++j) {
          if (!valid[b * T + j]) continue;
          const Real* kj = kv + (b * T + j) * d + h * dh;
          Real s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * scale_factor;
          mx = std::max(mx, scores[j]);
        }
        if (mx == -std::numeric_limits<Real>::infinity()) continue;
        Real* p = probs.data() + (bh * T + i) * T;
        Real z = 0;
        for (std::size_t j = 0; j < jmax; ++j) {
          if (!valid[b * T + j]) continue;
          p[j] = std::exp(scores[j] - mx);
          z += p[j];
        }
        Real* oi = out.data() + (b * T + i) * d + h * dh;
        for (std::size_t j = 0; j < jmax; ++j) {
          if (!valid[b * T + j]) continue;
          p[j] /= z;
          const Real* vj = vv + (b * T + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  });

  auto node = make_node(q.shape(), std::move(out), {&q, &k, &v});
  if (node->requires_grad) {
    Node* self = node.get();
    Node* nq = q.node().get();
    Node* nk = k.node().get();
    Node* nv = v.node().get();
    node->backward = [self, nq, nk, nv, B, T, H, d, dh, scale_factor, causal,
                      probs = std::move(probs)] {
      std::span<Real> gq = nq->requires_grad ? nq->grad_buffer() : std::span<Real>{};
      std::span<Real> gk = nk->requires_grad ? nk->grad_buffer() : std::span<Real>{};
      std::span<Real> gv = nv->requires_grad ? nv->grad_buffer() : std::span<Real>{};
      const Real* g = self->grad.data();
      parallel_for(B * H, 1, [&](std::size_t begin, std::size_t end) {
        std::vector<Real> dp(T);
        for (std::size_t bh = begin; bh < end; ++bh) {
          const std::size_t b = bh / H, h = bh % H;
          for (std::size_t i = 0; i < T; ++i) {
            const Real* p = probs.data() + (bh * T + i) * T;
            const Real* gi = g + (b * T + i) * d + h * dh;
            const std::size_t jmax = causal ? i + 1 : T;
            Real dot = 0;
            for (std::size_t j = 0; j < jmax; ++j) {
              if (p[j] == Real{0}) {
                dp[j] = 0;
                continue;
              }
              const Real* vj = nv->value.data() + (b * T + j) * d + h * dh;
              Real s = 0;
              for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += p[j] * s;
              if (!gv.empty()) {
                Real* gvj = gv.data() + (b * T + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * gi[c];
              }
            }
            const Real* qi = nq->value.data() + (b * T + i) * d + h * dh;
            Real* gqi = gq.empty() ? nullptr : gq.data() + (b * T + i) * d + h * dh;
            for (std::size_t j = 0; j < jmax; ++j) {
              if (p[j] == Real{0}) continue;
              const Real ds = p[j] * (dp[j] - dot) * scale_factor;
              const Real* kj = nk->value.data() + (b * T + j) * d + h * dh;
              if (gqi) {
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (!gk.empty()) {
                Real* gkj = gk.data() + (b * T + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
    };
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace layoutseq
