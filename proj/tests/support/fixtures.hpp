#pragma once

#include <string>

#include "layoutseq/layout.hpp"
#include "layoutseq/rng.hpp"

namespace layoutseq::testing {

/// Random layout whose boxes sit exactly on grid lines, 1..max_boxes boxes.
inline Layout random_grid_layout(Rng& rng, const Vocab& vocab, std::size_t max_boxes) {
  const int n = vocab.grid_n();
  Layout l;
  const std::size_t count = 1 + rng.uniform_index(max_boxes);
  for (std::size_t i = 0; i < count; ++i) {
    const int x = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n)));
    const int y = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n)));
    const int w = 1 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n - x)));
    const int h = 1 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n - y)));
    l.boxes.push_back(BBox{static_cast<int>(rng.uniform_index(static_cast<std::size_t>(vocab.num_classes()))),
                           x / static_cast<double>(n), y / static_cast<double>(n),
                           w / static_cast<double>(n), h / static_cast<double>(n)});
  }
  return l;
}

}  // namespace layoutseq::testing
