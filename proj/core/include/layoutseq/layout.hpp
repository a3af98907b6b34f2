#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace layoutseq {

using TokenId = std::int32_t;

inline constexpr std::size_t kDefaultMaxElements = 128;
/// Slack allowed on normalized coordinates before they are rejected.
inline constexpr double kCoordSlack = 1e-6;

/// Class-labeled box; x, y is the top-left corner, everything normalized to
/// the scene size.
struct BBox {
  int class_id = 0;
  double x = 0, y = 0, w = 0, h = 0;

  bool operator==(const BBox&) const = default;
};

struct Layout {
  std::vector<BBox> boxes;
  std::string id;
  /// Generating grammar mode, when known (used as retrieval relevance).
  std::optional<int> mode;
};

/// Throws RangeError unless the box satisfies the BBox invariants.
void validate_box(const BBox& box, int num_classes);
/// Clamps a box into the unit square (ingestion-time cleanup).
BBox clamp_box(BBox box);

enum class TokenKind : std::uint8_t { Class, X, Y, W, H, Bos, Eos, Mask, Pad };

const char* token_kind_name(TokenKind kind);

/// Kind of token expected at offset 0..4 inside a box span.
inline constexpr std::array<TokenKind, 5> kSpanKinds = {TokenKind::Class, TokenKind::X,
                                                        TokenKind::Y, TokenKind::W, TokenKind::H};

struct TokenRange {
  TokenId begin = 0;
  TokenId end = 0;
  int size() const { return end - begin; }
  bool contains(TokenId id) const { return id >= begin && id < end; }
};

/// Token id assignment:
///   [0, C)          class tokens (class k -> id k)
///   [C, C+N)        x anchors
///   [C+N, C+2N)     y anchors
///   [C+2N, C+3N)    w extents (occupied anchor count - 1)
///   [C+3N, C+4N)    h extents
///   C+4N .. C+4N+3  BOS, EOS, MASK, PAD
class Vocab {
 public:
  Vocab(int num_classes, int grid_n);

  int num_classes() const { return num_classes_; }
  int grid_n() const { return grid_n_; }
  int size() const { return num_classes_ + 4 * grid_n_ + 4; }

  TokenRange range(TokenKind kind) const;
  TokenId encode(TokenKind kind, int value) const;
  TokenKind kind(TokenId id) const;
  /// Class index or anchor index of a token (0 for special tokens).
  int value(TokenId id) const;

  TokenId bos() const { return num_classes_ + 4 * grid_n_; }
  TokenId eos() const { return bos() + 1; }
  TokenId mask() const { return bos() + 2; }
  TokenId pad() const { return bos() + 3; }

  std::string token_name(TokenId id) const;
  bool operator==(const Vocab&) const = default;

 private:
  int num_classes_;
  int grid_n_;
};

/// One box in token form: class, x, y, w, h ids.
using BoxTokens = std::array<TokenId, 5>;

/// BOS, c1, x1, y1, w1, h1, ..., EOS.
struct TokenSeq {
  std::vector<TokenId> ids;

  std::size_t num_boxes() const { return ids.size() >= 2 ? (ids.size() - 2) / 5 : 0; }
  static std::size_t span_start(std::size_t box_index) { return 1 + 5 * box_index; }
  BoxTokens box(std::size_t box_index) const;
  bool operator==(const TokenSeq&) const = default;
};

/// floor(v * N), clamped to N - 1. RangeError outside [0, 1) beyond slack.
int quantize(double v, int grid_n);
/// ceil(e * N) - 1 clamped to [0, N - 1]: occupied anchors minus one.
int quantize_extent(double extent, int grid_n);
/// Left/top edge for coordinates, (id + 1) / N for extents.
BBox dequantize_box(const BoxTokens& tokens, const Vocab& vocab);
BoxTokens quantize_box(const BBox& box, const Vocab& vocab);

/// Boxes quantized and sorted in raster order: by y anchor, then x anchor,
/// then class id, then original index.
std::vector<BoxTokens> raster_tokens(const Layout& layout, const Vocab& vocab,
                                     std::size_t max_elements = kDefaultMaxElements);
TokenSeq tokens_to_seq(const std::vector<BoxTokens>& boxes, const Vocab& vocab);

TokenSeq layout_to_seq(const Layout& layout, const Vocab& vocab,
                       std::size_t max_elements = kDefaultMaxElements);
/// Inverse of layout_to_seq up to quantization. ParseError on malformed input.
Layout seq_to_layout(const TokenSeq& seq, const Vocab& vocab);
/// Structural check: BOS/EOS framing, body length, token kind per position.
/// MASK is accepted at body positions only when `allow_mask` is set.
void validate_seq(const TokenSeq& seq, const Vocab& vocab, bool allow_mask);

/// Mirror left-right in continuous space: x' = 1 - x - w.
Layout flip_lr(const Layout& layout);
/// Same mirror on token ids: x' = N - x - (w + 1), clamped at 0.
BoxTokens flip_box_tokens(const BoxTokens& tokens, const Vocab& vocab);

/// Raster sort key (y anchor, x anchor) of a token box.
inline std::pair<TokenId, TokenId> raster_key(const BoxTokens& b) { return {b[2], b[1]}; }

}  // namespace layoutseq
