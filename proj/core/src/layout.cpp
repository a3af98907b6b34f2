#include "layoutseq/layout.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "layoutseq/error.hpp"

namespace layoutseq {

namespace {

// Absorbs representation error so that values lying on a grid line (k / N
// written in decimal) quantize to k rather than k - 1 or k + 1.
constexpr double kGridSnap = 1e-9;

}  // namespace

void validate_box(const BBox& box, int num_classes) {
  const auto fail = [&](const std::string& why) {
    throw RangeError("invalid box (class " + std::to_string(box.class_id) + ", x " +
                     std::to_string(box.x) + ", y " + std::to_string(box.y) + ", w " +
                     std::to_string(box.w) + ", h " + std::to_string(box.h) + "): " + why);
  };
  if (box.class_id < 0 || box.class_id >= num_classes) fail("class outside [0, C)");
  if (!(box.x >= -kCoordSlack && box.x < 1.0 + kCoordSlack)) fail("x outside [0, 1)");
  if (!(box.y >= -kCoordSlack && box.y < 1.0 + kCoordSlack)) fail("y outside [0, 1)");
  if (!(box.w > 0.0 && box.w <= 1.0 + kCoordSlack)) fail("w outside (0, 1]");
  if (!(box.h > 0.0 && box.h <= 1.0 + kCoordSlack)) fail("h outside (0, 1]");
  if (box.x + box.w > 1.0 + kCoordSlack) fail("x + w exceeds 1");
  if (box.y + box.h > 1.0 + kCoordSlack) fail("y + h exceeds 1");
}

BBox clamp_box(BBox box) {
  box.x = std::clamp(box.x, 0.0, 1.0);
  box.y = std::clamp(box.y, 0.0, 1.0);
  box.w = std::clamp(box.w, 0.0, 1.0 - box.x);
  box.h = std::clamp(box.h, 0.0, 1.0 - box.y);
  return box;
}

const char* token_kind_name(TokenKind kind) {
  switch (kind) {
    case TokenKind::Class: return "class";
    case TokenKind::X: return "x";
    case TokenKind::Y: return "y";
    case TokenKind::W: return "w";
    case TokenKind::H: return "h";
    case TokenKind::Bos: return "BOS";
    case TokenKind::Eos: return "EOS";
    case TokenKind::Mask: return "MASK";
    case TokenKind::Pad: return "PAD";
  }
  return "?";
}

Vocab::Vocab(int num_classes, int grid_n) : num_classes_(num_classes), grid_n_(grid_n) {
  if (num_classes < 1) throw ParameterError("vocab needs at least one class");
  if (grid_n < 1) throw ParameterError("vocab grid resolution must be positive");
}

TokenRange Vocab::range(TokenKind kind) const {
  const TokenId c = num_classes_, n = grid_n_;
  switch (kind) {
    case TokenKind::Class: return {0, c};
    case TokenKind::X: return {c, c + n};
    case TokenKind::Y: return {c + n, c + 2 * n};
    case TokenKind::W: return {c + 2 * n, c + 3 * n};
    case TokenKind::H: return {c + 3 * n, c + 4 * n};
    case TokenKind::Bos: return {bos(), bos() + 1};
    case TokenKind::Eos: return {eos(), eos() + 1};
    case TokenKind::Mask: return {mask(), mask() + 1};
    case TokenKind::Pad: return {pad(), pad() + 1};
  }
  throw VocabError("unknown token kind");
}

TokenId Vocab::encode(TokenKind kind, int value) const {
  const TokenRange r = range(kind);
  if (value < 0 || value >= r.size()) {
    throw VocabError(std::string("value ") + std::to_string(value) + " out of range for " +
                     token_kind_name(kind) + " tokens");
  }
  return r.begin + value;
}

TokenKind Vocab::kind(TokenId id) const {
  if (id < 0 || id >= size()) {
    throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(size()));
  }
  for (TokenKind k : {TokenKind::Class, TokenKind::X, TokenKind::Y, TokenKind::W, TokenKind::H,
                      TokenKind::Bos, TokenKind::Eos, TokenKind::Mask}) {
    if (range(k).contains(id)) return k;
  }
  return TokenKind::Pad;
}

int Vocab::value(TokenId id) const { return id - range(kind(id)).begin; }

std::string Vocab::token_name(TokenId id) const {
  const TokenKind k = kind(id);
  switch (k) {
    case TokenKind::Class: return "c" + std::to_string(value(id));
    case TokenKind::X:
    case TokenKind::Y:
    case TokenKind::W:
    case TokenKind::H: return std::string(token_kind_name(k)) + std::to_string(value(id));
    default: return token_kind_name(k);
  }
}

BoxTokens TokenSeq::box(std::size_t box_index) const {
  if (box_index >= num_boxes()) {
    throw RangeError("box index " + std::to_string(box_index) + " outside sequence with " +
                     std::to_string(num_boxes()) + " boxes");
  }
  BoxTokens b;
  std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(span_start(box_index)), 5, b.begin());
  return b;
}

int quantize(double v, int grid_n) {
  if (!(v >= -kCoordSlack && v < 1.0 + kCoordSlack)) {
    throw RangeError("coordinate " + std::to_string(v) + " outside [0, 1)");
  }
  const double scaled = std::floor(std::clamp(v, 0.0, 1.0) * grid_n + kGridSnap);
  return std::clamp(static_cast<int>(scaled), 0, grid_n - 1);
}

int quantize_extent(double extent, int grid_n) {
  if (!(extent > 0.0) || extent > 1.0 + kCoordSlack) {
    throw RangeError("extent " + std::to_string(extent) + " outside (0, 1]");
  }
  const double occupied = std::ceil(extent * grid_n - kGridSnap);
  return std::clamp(static_cast<int>(occupied) - 1, 0, grid_n - 1);
}

BBox dequantize_box(const BoxTokens& t, const Vocab& vocab) {
  for (std::size_t k = 0; k < 5; ++k) {
    if (vocab.kind(t[k]) != kSpanKinds[k]) {
      throw VocabError("token " + vocab.token_name(t[k]) + " is not a " +
                       token_kind_name(kSpanKinds[k]) + " token");
    }
  }
  const double n = vocab.grid_n();
  return BBox{vocab.value(t[0]), vocab.value(t[1]) / n, vocab.value(t[2]) / n,
              (vocab.value(t[3]) + 1) / n, (vocab.value(t[4]) + 1) / n};
}

BoxTokens quantize_box(const BBox& box, const Vocab& vocab) {
  validate_box(box, vocab.num_classes());
  const int n = vocab.grid_n();
  return {vocab.encode(TokenKind::Class, box.class_id),
          vocab.encode(TokenKind::X, quantize(box.x, n)),
          vocab.encode(TokenKind::Y, quantize(box.y, n)),
          vocab.encode(TokenKind::W, quantize_extent(box.w, n)),
          vocab.encode(TokenKind::H, quantize_extent(box.h, n))};
}

std::vector<BoxTokens> raster_tokens(const Layout& layout, const Vocab& vocab,
                                     std::size_t max_elements) {
  if (layout.boxes.empty()) throw LengthError("layout '" + layout.id + "' has no boxes");
  if (layout.boxes.size() > max_elements) {
    throw LengthError("layout '" + layout.id + "' has " + std::to_string(layout.boxes.size()) +
                      " boxes, limit is " + std::to_string(max_elements));
  }
  std::vector<BoxTokens> boxes;
  boxes.reserve(layout.boxes.size());
  for (const BBox& b : layout.boxes) boxes.push_back(quantize_box(b, vocab));
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const BoxTokens& l = boxes[a];
    const BoxTokens& r = boxes[b];
    if (l[2] != r[2]) return l[2] < r[2];
    if (l[1] != r[1]) return l[1] < r[1];
    return l[0] < r[0];
  });
  std::vector<BoxTokens> sorted;
  sorted.reserve(boxes.size());
  for (std::size_t i : order) sorted.push_back(boxes[i]);
  return sorted;
}

TokenSeq tokens_to_seq(const std::vector<BoxTokens>& boxes, const Vocab& vocab) {
  TokenSeq seq;
  seq.ids.reserve(2 + 5 * boxes.size());
  seq.ids.push_back(vocab.bos());
  for (const BoxTokens& b : boxes) seq.ids.insert(seq.ids.end(), b.begin(), b.end());
  seq.ids.push_back(vocab.eos());
  return seq;
}

TokenSeq layout_to_seq(const Layout& layout, const Vocab& vocab, std::size_t max_elements) {
  return tokens_to_seq(raster_tokens(layout, vocab, max_elements), vocab);
}

void validate_seq(const TokenSeq& seq, const Vocab& vocab, bool allow_mask) {
  const auto& ids = seq.ids;
  if (ids.empty()) throw ParseError("empty sequence", 0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab.size()) {
      throw ParseError("token id " + std::to_string(ids[i]) + " outside vocabulary", i);
    }
  }
  if (ids.front() != vocab.bos()) throw ParseError("sequence must start with BOS", 0);
  if (ids.size() < 2 || ids.back() != vocab.eos()) {
    throw ParseError("sequence must end with EOS", ids.size() - 1);
  }
  const std::size_t body = ids.size() - 2;
  if (body % 5 != 0) {
    throw ParseError("body length " + std::to_string(body) + " is not a multiple of 5",
                     ids.size() - 1 - body % 5);
  }
  for (std::size_t i = 1; i + 1 < ids.size(); ++i) {
    const TokenKind expected = kSpanKinds[(i - 1) % 5];
    const TokenKind actual = vocab.kind(ids[i]);
    if (actual == TokenKind::Mask) {
      if (!allow_mask) throw ParseError("unexpected MASK token", i);
      continue;
    }
    if (actual != expected) {
      throw ParseError(std::string("expected ") + token_kind_name(expected) + " token, got " +
                           vocab.token_name(ids[i]),
                       i);
    }
  }
}

Layout seq_to_layout(const TokenSeq& seq, const Vocab& vocab) {
  validate_seq(seq, vocab, false);
  Layout layout;
  for (std::size_t b = 0; b < seq.num_boxes(); ++b) layout.boxes.push_back(dequantize_box(seq.box(b), vocab));
  return layout;
}

Layout flip_lr(const Layout& layout) {
  Layout out = layout;
  for (BBox& b : out.boxes) b.x = std::max(0.0, 1.0 - b.x - b.w);
  return out;
}

BoxTokens flip_box_tokens(const BoxTokens& t, const Vocab& vocab) {
  const int n = vocab.grid_n();
  const int x = vocab.value(t[1]);
  const int w = vocab.value(t[3]);
  BoxTokens out = t;
  out[1] = vocab.encode(TokenKind::X, std::max(0, n - x - (w + 1)));
  return out;
}

}  // namespace layoutseq
