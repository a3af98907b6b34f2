#include <algorithm>
#include <set>

#include <gtest/gtest.h>

#include "../support/fixtures.hpp"
#include "layoutseq/corpus.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/layout.hpp"
#include "layoutseq/rng.hpp"

namespace layoutseq {
namespace {

using testing::random_grid_layout;

TEST(Vocab, SizeIsClassesPlusFourAnchorsPlusFourSpecials) {
  Vocab v(10, 32);
  EXPECT_EQ(v.size(), 10 + 4 * 32 + 4);
  EXPECT_EQ(v.bos(), 10 + 128);
  EXPECT_EQ(v.pad(), v.size() - 1);
}

TEST(Vocab, RangesPartitionTheIdSpace) {
  for (auto [c, n] : {std::pair{1, 1}, std::pair{6, 16}, std::pair{10, 32}, std::pair{133, 64}}) {
    Vocab v(c, n);
    std::vector<int> hits(static_cast<std::size_t>(v.size()), 0);
    for (TokenKind k : {TokenKind::Class, TokenKind::X, TokenKind::Y, TokenKind::W, TokenKind::H,
                        TokenKind::Bos, TokenKind::Eos, TokenKind::Mask, TokenKind::Pad}) {
      const TokenRange r = v.range(k);
      for (TokenId id = r.begin; id < r.end; ++id) {
        ++hits[static_cast<std::size_t>(id)];
        EXPECT_EQ(v.kind(id), k);
        EXPECT_EQ(v.encode(k, v.value(id)), id);
      }
    }
    for (int h : hits) EXPECT_EQ(h, 1);
    EXPECT_THROW(v.kind(v.size()), VocabError);
    EXPECT_THROW(v.kind(-1), VocabError);
    EXPECT_THROW(v.encode(TokenKind::X, n), VocabError);
  }
}

TEST(Quantize, Examples) {
  EXPECT_EQ(quantize(0.0, 32), 0);
  EXPECT_EQ(quantize(0.5, 32), 16);
  EXPECT_EQ(quantize(0.999, 32), 31);
  EXPECT_EQ(quantize(1.0, 32), 31);
  EXPECT_THROW(quantize(-0.01, 32), RangeError);
  EXPECT_THROW(quantize(1.01, 32), RangeError);
}

TEST(Quantize, GridLinesLandOnTheirCell) {
  for (int n : {7, 16, 32, 64}) {
    for (int k = 0; k < n; ++k) {
      EXPECT_EQ(quantize(k / static_cast<double>(n), n), k) << k << "/" << n;
      EXPECT_EQ(quantize(k * (1.0 / n), n), k) << k << "*1/" << n;
    }
  }
}

TEST(QuantizeExtent, ChairFixture) {
  // A chair occupying 3 grid cells wide and 4 tall maps to w-2 and h-3.
  for (int n : {8, 16, 32, 64}) {
    EXPECT_EQ(quantize_extent(3.0 / n, n), 2);
    EXPECT_EQ(quantize_extent(4.0 / n, n), 3);
  }
  Vocab v(5, 32);
  const BoxTokens t = quantize_box(BBox{2, 4.0 / 32, 10.0 / 32, 3.0 / 32, 4.0 / 32}, v);
  EXPECT_EQ(v.value(t[3]), 2);
  EXPECT_EQ(v.value(t[4]), 3);
}

TEST(QuantizeExtent, BoundariesAndErrors) {
  EXPECT_EQ(quantize_extent(1.0, 32), 31);
  EXPECT_EQ(quantize_extent(1e-6, 32), 0);  // under one cell keeps one anchor
  EXPECT_EQ(quantize_extent(2.5 / 32, 32), 2);
  EXPECT_THROW(quantize_extent(0.0, 32), RangeError);
  EXPECT_THROW(quantize_extent(-0.1, 32), RangeError);
}

TEST(Quantize, MonotoneAndExtentCovers) {
  Rng rng(1);
  for (int n : {4, 16, 32}) {
    std::vector<double> vs;
    for (int i = 0; i < 2000; ++i) vs.push_back(rng.uniform());
    std::sort(vs.begin(), vs.end());
    int prev = 0;
    for (double v : vs) {
      const int q = quantize(v, n);
      EXPECT_GE(q, prev);
      prev = q;
      const double e = std::max(v, 1e-4);
      EXPECT_GE((quantize_extent(e, n) + 1) / static_cast<double>(n), e - 1e-9);
    }
  }
}

TEST(Dequantize, RetractOnAllTokenIds) {
  for (int n : {4, 16, 32}) {
    Vocab v(3, n);
    for (int x = 0; x < n; ++x) {
      for (int w = 0; w < n - x; ++w) {
        const int y = (x * 7) % n;
        const int h = std::min(n - y - 1, (w * 3) % n);
        const BoxTokens t{v.encode(TokenKind::Class, x % 3), v.encode(TokenKind::X, x),
                          v.encode(TokenKind::Y, y), v.encode(TokenKind::W, w),
                          v.encode(TokenKind::H, h)};
        EXPECT_EQ(quantize_box(dequantize_box(t, v), v), t);
      }
    }
  }
}

TEST(Dequantize, FullFrameAndHalf) {
  Vocab v(1, 32);
  const BBox full = dequantize_box({0, v.encode(TokenKind::X, 0), v.encode(TokenKind::Y, 0),
                                    v.encode(TokenKind::W, 31), v.encode(TokenKind::H, 31)},
                                   v);
  EXPECT_EQ(full, (BBox{0, 0, 0, 1, 1}));
  const BBox half = dequantize_box({0, v.encode(TokenKind::X, 16), v.encode(TokenKind::Y, 0),
                                    v.encode(TokenKind::W, 0), v.encode(TokenKind::H, 0)},
                                   v);
  EXPECT_EQ(half.x, 0.5);
  EXPECT_THROW(dequantize_box({0, v.mask(), 1, 1, 1}, v), VocabError);
}

TEST(LayoutToSeq, SingleBoxIsSevenTokens) {
  Vocab v(3, 16);
  Layout l{{BBox{1, 0.25, 0.5, 0.125, 0.25}}, "one", {}};
  const TokenSeq s = layout_to_seq(l, v);
  ASSERT_EQ(s.ids.size(), 7u);
  EXPECT_EQ(s.ids.front(), v.bos());
  EXPECT_EQ(s.ids.back(), v.eos());
  EXPECT_EQ(s.ids[1], 1);
  EXPECT_EQ(v.value(s.ids[2]), 4);
  EXPECT_EQ(v.value(s.ids[3]), 8);
  EXPECT_EQ(v.value(s.ids[4]), 1);
  EXPECT_EQ(v.value(s.ids[5]), 3);
}

TEST(LayoutToSeq, RasterOrderAndTieBreaks) {
  Vocab v(3, 16);
  // Same row: left box first regardless of input order.
  Layout l{{BBox{0, 0.5, 0.25, 0.1, 0.1}, BBox{2, 0.125, 0.25, 0.1, 0.1}}, "", {}};
  TokenSeq s = layout_to_seq(l, v);
  EXPECT_EQ(s.ids[1], 2);
  EXPECT_EQ(s.ids[6], 0);
  // Higher row first even when further right.
  Layout l2{{BBox{0, 0.0, 0.5, 0.1, 0.1}, BBox{1, 0.9, 0.0, 0.1, 0.1}}, "", {}};
  s = layout_to_seq(l2, v);
  EXPECT_EQ(s.ids[1], 1);
  // Same cell: lower class id first, then input order.
  Layout l3{{BBox{2, 0.5, 0.5, 0.2, 0.1}, BBox{1, 0.5, 0.5, 0.1, 0.1}, BBox{1, 0.5, 0.5, 0.3, 0.1}},
            "", {}};
  s = layout_to_seq(l3, v);
  EXPECT_EQ(s.ids[1], 1);
  EXPECT_EQ(v.value(s.ids[4]), quantize_extent(0.1, 16));
  EXPECT_EQ(s.ids[6], 1);
  EXPECT_EQ(v.value(s.ids[9]), quantize_extent(0.3, 16));
  EXPECT_EQ(s.ids[11], 2);
}

TEST(LayoutToSeq, OrderIsTotalAndPermutationFreeForDistinctKeys) {
  Vocab v(4, 16);
  Rng rng(5);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Layout l = random_grid_layout(rng, v, 6);
    const TokenSeq ref = layout_to_seq(l, v);
    EXPECT_EQ(layout_to_seq(l, v), ref);
    std::set<std::tuple<TokenId, TokenId, TokenId>> keys;
    for (const BoxTokens& b : raster_tokens(l, v)) keys.insert({b[2], b[1], b[0]});
    // Boxes sharing (y, x, class) keep input order by design.
    if (keys.size() != l.boxes.size()) continue;
    ++checked;
    for (int p = 0; p < 5; ++p) {
      Layout shuffled = l;
      for (std::size_t i = shuffled.boxes.size(); i > 1; --i) {
        std::swap(shuffled.boxes[i - 1], shuffled.boxes[rng.uniform_index(i)]);
      }
      EXPECT_EQ(layout_to_seq(shuffled, v), ref);
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(LayoutToSeq, RejectsEmptyAndOversized) {
  Vocab v(2, 8);
  EXPECT_THROW(layout_to_seq(Layout{}, v), LengthError);
  Layout big;
  big.boxes.assign(129, BBox{0, 0, 0, 0.1, 0.1});
  EXPECT_THROW(layout_to_seq(big, v), LengthError);
  big.boxes.resize(128);
  EXPECT_EQ(layout_to_seq(big, v).ids.size(), 2u + 5 * 128);
}

TEST(SeqToLayout, RoundTripOnRandomLayouts) {
  Vocab v(5, 16);
  Rng rng(21);
  for (int i = 0; i < 100; ++i) {
    const Layout l = random_grid_layout(rng, v, 8);
    const TokenSeq s = layout_to_seq(l, v);
    const Layout back = seq_to_layout(s, v);
    EXPECT_EQ(layout_to_seq(back, v), s);
    // Grid-aligned inputs come back exactly, in raster order.
    std::multiset<std::tuple<int, double, double, double, double>> a, b;
    for (const BBox& x : l.boxes) a.insert({x.class_id, x.x, x.y, x.w, x.h});
    for (const BBox& x : back.boxes) b.insert({x.class_id, x.x, x.y, x.w, x.h});
    EXPECT_EQ(a, b);
  }
}

TEST(SeqToLayout, ParseErrorsCarryTheIndex) {
  Vocab v(3, 8);
  TokenSeq s = layout_to_seq(Layout{{BBox{1, 0.25, 0.25, 0.25, 0.25}}, "", {}}, v);
  TokenSeq masked = s;
  masked.ids[3] = v.mask();
  try {
    seq_to_layout(masked, v);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.index(), 3u);
  }
  EXPECT_NO_THROW(validate_seq(masked, v, true));

  TokenSeq truncated = s;
  truncated.ids.erase(truncated.ids.begin() + 5);
  EXPECT_THROW(seq_to_layout(truncated, v), ParseError);

  TokenSeq swapped = s;
  std::swap(swapped.ids[2], swapped.ids[3]);
  try {
    seq_to_layout(swapped, v);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.index(), 2u);
  }
  TokenSeq no_bos = s;
  no_bos.ids[0] = v.eos();
  EXPECT_THROW(seq_to_layout(no_bos, v), ParseError);
}

TEST(Flip, InvolutionFixedPointAndExample) {
  Layout l{{BBox{0, 0.0, 0.1, 0.25, 0.2}, BBox{1, 0.375, 0.5, 0.25, 0.1}}, "", {}};
  const Layout f = flip_lr(l);
  EXPECT_DOUBLE_EQ(f.boxes[0].x, 0.75);
  EXPECT_DOUBLE_EQ(f.boxes[1].x, 0.375);  // centered box is fixed
  EXPECT_EQ(f.boxes[0].y, l.boxes[0].y);
  EXPECT_EQ(f.boxes[0].w, l.boxes[0].w);
  const Layout ff = flip_lr(f);
  for (std::size_t i = 0; i < l.boxes.size(); ++i) EXPECT_NEAR(ff.boxes[i].x, l.boxes[i].x, 1e-15);

  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    BBox b{0, rng.uniform() * 0.9, rng.uniform() * 0.9, 0, 0.05};
    b.w = 0.01 + rng.uniform() * (0.99 - b.x);
    const BBox back = flip_lr(flip_lr(Layout{{b}, "", {}})).boxes[0];
    EXPECT_NEAR(back.x, b.x, 1e-12);
  }
}

TEST(Flip, TokenFlipMatchesContinuousFlipOnGrid) {
  Vocab v(4, 16);
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const Layout l = random_grid_layout(rng, v, 5);
    for (const BBox& b : l.boxes) {
      const BoxTokens t = quantize_box(b, v);
      const BoxTokens via_layout = quantize_box(flip_lr(Layout{{b}, "", {}}).boxes[0], v);
      EXPECT_EQ(flip_box_tokens(t, v), via_layout);
      EXPECT_EQ(flip_box_tokens(flip_box_tokens(t, v), v), t);
    }
  }
}

TEST(Corpus, PixelCoordinatesAreNormalizedAndEmptyRecordsSkipped) {
  const std::string text =
      R"({"id": "a", "width": 200, "height": 100, "boxes": [{"class": 1, "x": 50, "y": 25, "w": 100, "h": 50}]})"
      "\n"
      R"({"id": "b", "width": 200, "height": 100, "boxes": []})"
      "\n"
      R"({"id": "c", "boxes": [{"class": 0, "x": 1, "y": 1, "w": 1, "h": 1}]})"
      "\n";
  const Corpus c = parse_corpus_jsonl(text);
  ASSERT_EQ(c.layouts.size(), 1u);
  EXPECT_EQ(c.skipped, 2u);
  EXPECT_EQ(c.layouts[0].boxes[0], (BBox{1, 0.25, 0.25, 0.5, 0.5}));
}

TEST(Corpus, FormatParseRoundTripIsByteStable) {
  Vocab v(3, 16);
  Rng rng(4);
  Corpus c;
  c.header.class_names = {"a", "b", "c"};
  for (int i = 0; i < 20; ++i) {
    Layout l = random_grid_layout(rng, v, 4);
    l.id = "L" + std::to_string(i);
    l.mode = i % 3;
    c.layouts.push_back(l);
  }
  const std::string text = format_corpus_jsonl(c);
  const Corpus back = parse_corpus_jsonl(text);
  ASSERT_EQ(back.layouts.size(), c.layouts.size());
  EXPECT_TRUE(back.header.normalized);
  EXPECT_EQ(back.header.class_names, c.header.class_names);
  for (std::size_t i = 0; i < c.layouts.size(); ++i) {
    EXPECT_EQ(back.layouts[i].boxes, c.layouts[i].boxes);
    EXPECT_EQ(back.layouts[i].id, c.layouts[i].id);
    EXPECT_EQ(back.layouts[i].mode, c.layouts[i].mode);
  }
  EXPECT_EQ(format_corpus_jsonl(back), text);
}

TEST(Corpus, MalformedLineIsADataError) {
  EXPECT_THROW(parse_corpus_jsonl("{\"id\": 1,\n"), DataError);
  EXPECT_THROW(parse_corpus_jsonl(R"({"header": {"normalized": true}})"
                                  "\n"
                                  R"({"id": "x", "boxes": [{"class": 0}]})"),
               DataError);
}

}  // namespace
}  // namespace layoutseq
