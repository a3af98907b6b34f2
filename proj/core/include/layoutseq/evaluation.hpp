#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "layoutseq/layout.hpp"
#include "layoutseq/model.hpp"

namespace layoutseq {

/// Per-token NLL of every box token under the five-step masked factorization,
/// box-major (5 values per box).
std::vector<double> masked_token_nll(const Model& model, const TokenSeq& seq);
/// Per-transition next-token NLL (len - 1 values, EOS included).
std::vector<double> next_token_nll(const Model& model, const TokenSeq& seq);

struct NllResult {
  double nll = 0;        // nats per predicted token
  double total_nll = 0;  // summed over the corpus
  std::size_t tokens = 0;
  std::size_t layouts = 0;
  std::size_t skipped = 0;
};

/// Masked factorization over every box for bidirectional models, next-token
/// NLL for causal ones. Dropout off. Identical sequences are evaluated once
/// and weighted by multiplicity.
NllResult eval_nll(const Model& model, std::span<const Layout> corpus);

struct ClassNll {
  int class_id = 0;
  std::size_t count = 0;
  double nll = 0;  // mean class-position NLL; 0 when count is 0
};

/// NLL of the class token (first masked factor, or next-token NLL at class
/// positions for causal models) bucketed by ground-truth class.
std::vector<ClassNll> eval_per_class_nll(const Model& model, std::span<const Layout> corpus);
std::string per_class_csv(const std::vector<ClassNll>& rows, const std::vector<std::string>& class_names);

/// Raster index of the held-out box, keyed by layout id and seed so the
/// choice does not depend on corpus order. Falls back to the token content
/// when the id is empty.
std::size_t held_out_index(const Layout& layout, const TokenSeq& seq, std::uint64_t seed);

struct AccuracyResult {
  double value = 0;
  std::size_t count = 0;
};

/// Masks the held-out box in place and compares the argmax class (restricted
/// to class tokens) with the truth. Causal models see only the prefix. With
/// `classes`, the held-out box is drawn among boxes of those classes.
AccuracyResult eval_top1_class(const Model& model, std::span<const Layout> corpus, std::uint64_t seed,
                               const std::optional<std::set<int>>& classes = std::nullopt);

/// Conditions on the held-out box's class and raster position, greedy-decodes
/// x, y, w, h and averages IoU against the truth. With `classes`, the
/// held-out box is drawn among boxes of those classes and layouts without
/// one are skipped.
AccuracyResult eval_cond_miou(const Model& model, std::span<const Layout> corpus, std::uint64_t seed,
                              const std::optional<std::set<int>>& classes = std::nullopt);

struct EvalReport {
  NllResult nll;
  std::vector<ClassNll> per_class;
  AccuracyResult top1_class;
  AccuracyResult cond_miou;
  std::uint64_t seed = 0;
  nlohmann::ordered_json config;  // echoed verbatim
};

EvalReport evaluate(const Model& model, std::span<const Layout> corpus, std::uint64_t seed);
nlohmann::ordered_json to_json(const EvalReport& report, const std::vector<std::string>& class_names);
std::string format_report_table(const EvalReport& report, const std::vector<std::string>& class_names);

}  // namespace layoutseq
