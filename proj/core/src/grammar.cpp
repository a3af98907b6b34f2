#include "layoutseq/grammar.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

#include "layoutseq/error.hpp"
#include "layoutseq/io.hpp"
#include "layoutseq/rng.hpp"

namespace layoutseq {

using json = nlohmann::json;

namespace {

constexpr double kNormTolerance = 1e-9;
constexpr std::array<const char*, 4> kFields = {"x", "y", "w", "h"};

using Cells = std::array<int, 4>;  // x, y, w, h on the grid

}  // namespace

int CellExpr::eval(const Cells& anchor) const {
  int v = constant;
  for (std::size_t f = 0; f < 4; ++f) v += coef[f] * anchor[f];
  return v;
}

CellExpr parse_cell_expr(const std::string& text) {
  CellExpr e;
  std::size_t i = 0;
  auto skip = [&] {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  };
  bool first = true;
  skip();
  if (i == text.size()) throw DataError("empty cell expression");
  while (i < text.size()) {
    int sign = 1;
    if (text[i] == '+' || text[i] == '-') {
      sign = text[i] == '-' ? -1 : 1;
      ++i;
      skip();
    } else if (!first) {
      throw DataError("expected + or - in cell expression '" + text + "'");
    }
    if (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) {
      int v = 0;
      while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) v = v * 10 + (text[i++] - '0');
      e.constant += sign * v;
    } else if (text.compare(i, 7, "anchor.") == 0 && i + 7 < text.size()) {
      const char f = text[i + 7];
      const auto* it = std::find_if(kFields.begin(), kFields.end(), [&](const char* n) { return n[0] == f; });
      if (it == kFields.end()) throw DataError("unknown anchor field in '" + text + "'");
      e.coef[static_cast<std::size_t>(it - kFields.begin())] += sign;
      i += 8;
    } else {
      throw DataError("cannot parse cell expression '" + text + "'");
    }
    first = false;
    skip();
  }
  return e;
}

namespace {

std::vector<CellExpr> parse_field(const json& v, const std::string& path) {
  std::vector<CellExpr> out;
  auto one = [&](const json& x, const std::string& p) {
    if (x.is_number_integer()) {
      CellExpr e;
      e.constant = x.get<int>();
      out.push_back(e);
    } else if (x.is_string()) {
      try {
        out.push_back(parse_cell_expr(x.get<std::string>()));
      } catch (const DataError& err) {
        throw SchemaError(p, err.what());
      }
    } else {
      throw SchemaError(p, "expected an integer or an expression string");
    }
  };
  if (v.is_array()) {
    if (v.empty()) throw SchemaError(path, "empty list");
    for (std::size_t i = 0; i < v.size(); ++i) one(v[i], path + "[" + std::to_string(i) + "]");
  } else {
    one(v, path);
  }
  return out;
}

void check_normalized(double sum, const std::string& path, const std::string& what) {
  if (std::abs(sum - 1.0) > kNormTolerance) {
    std::ostringstream msg;
    msg << what << " sum to " << sum << ", not 1";
    throw SchemaError(path, msg.str());
  }
}

GrammarRule parse_rule(const json& j, const std::string& path, const std::vector<std::string>& classes,
                       const std::vector<GrammarRule>& earlier) {
  if (!j.is_object()) throw SchemaError(path, "rule must be an object");
  GrammarRule r;
  if (!j.contains("name") || !j["name"].is_string()) throw SchemaError(path + ".name", "missing rule name");
  r.name = j["name"].get<std::string>();
  if (!j.contains("class") || !j["class"].is_string()) throw SchemaError(path + ".class", "missing class name");
  const std::string cls = j["class"].get<std::string>();
  auto cit = std::find(classes.begin(), classes.end(), cls);
  if (cit == classes.end()) throw SchemaError(path + ".class", "unknown class '" + cls + "'");
  r.class_id = static_cast<int>(cit - classes.begin());

  const std::string type = j.value("type", std::string("place"));
  if (type == "place") {
    r.kind = GrammarRule::Kind::Place;
  } else if (type == "attach") {
    r.kind = GrammarRule::Kind::Attach;
    if (!j.contains("to") || !j["to"].is_string()) throw SchemaError(path + ".to", "attach rule needs 'to'");
    r.to = j["to"].get<std::string>();
    const bool known = std::any_of(earlier.begin(), earlier.end(), [&](const GrammarRule& e) { return e.name == r.to; });
    if (!known) throw SchemaError(path + ".to", "'" + r.to + "' is not an earlier rule of this mode");
  } else {
    throw SchemaError(path + ".type", "expected 'place' or 'attach'");
  }
  r.no_overlap = j.value("no_overlap", true);

  if (!j.contains("count") || !j["count"].is_object() || j["count"].empty()) {
    throw SchemaError(path + ".count", "expected an object {\"n\": p, ...}");
  }
  double count_sum = 0;
  for (const auto& [k, v] : j["count"].items()) {
    int n = 0;
    try {
      std::size_t used = 0;
      n = std::stoi(k, &used);
      if (used != k.size() || n < 0) throw std::invalid_argument(k);
    } catch (const std::exception&) {
      throw SchemaError(path + ".count." + k, "count keys must be non-negative integers");
    }
    if (!v.is_number() || v.get<double>() < 0) throw SchemaError(path + ".count." + k, "probability must be >= 0");
    r.count.emplace_back(n, v.get<double>());
    count_sum += v.get<double>();
  }
  std::sort(r.count.begin(), r.count.end());
  check_normalized(count_sum, path + ".count", "count probabilities");

  if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
    throw SchemaError(path + ".choices", "expected a non-empty list");
  }
  double explicit_sum = 0;
  std::size_t implicit = 0;
  for (const json& c : j["choices"]) {
    if (c.contains("p")) {
      explicit_sum += c["p"].get<double>();
    } else {
      ++implicit;
    }
  }
  const double share = implicit ? (1.0 - explicit_sum) / static_cast<double>(implicit) : 0.0;
  double choice_sum = 0;
  for (std::size_t ci = 0; ci < j["choices"].size(); ++ci) {
    const json& c = j["choices"][ci];
    const std::string cpath = path + ".choices[" + std::to_string(ci) + "]";
    if (!c.is_object()) throw SchemaError(cpath, "choice must be an object");
    std::array<std::vector<CellExpr>, 4> fields;
    for (std::size_t f = 0; f < 4; ++f) {
      if (!c.contains(kFields[f])) throw SchemaError(cpath + "." + kFields[f], "missing field");
      fields[f] = parse_field(c[kFields[f]], cpath + "." + kFields[f]);
      if (r.kind == GrammarRule::Kind::Place) {
        for (const CellExpr& e : fields[f]) {
          if (e.uses_anchor()) throw SchemaError(cpath + "." + kFields[f], "place rules cannot refer to an anchor");
        }
      }
    }
    const double p = c.contains("p") ? c["p"].get<double>() : share;
    if (!(p >= 0)) throw SchemaError(cpath + ".p", "probability must be >= 0");
    choice_sum += p;
    const std::size_t combos = fields[0].size() * fields[1].size() * fields[2].size() * fields[3].size();
    for (const CellExpr& x : fields[0]) {
      for (const CellExpr& y : fields[1]) {
        for (const CellExpr& w : fields[2]) {
          for (const CellExpr& h : fields[3]) {
            r.choices.push_back(GridChoice{{x, y, w, h}, p / static_cast<double>(combos)});
          }
        }
      }
    }
  }
  check_normalized(choice_sum, path + ".choices", "choice probabilities");
  return r;
}

}  // namespace

Grammar parse_grammar(const json& j) {
  if (!j.is_object()) throw SchemaError("$", "grammar must be an object");
  Grammar g;
  g.name = j.value("name", std::string("grammar"));
  if (!j.contains("grid") || !j["grid"].is_number_integer() || j["grid"].get<int>() < 1) {
    throw SchemaError("$.grid", "expected a positive integer");
  }
  g.grid_n = j["grid"].get<int>();
  if (!j.contains("classes") || !j["classes"].is_array() || j["classes"].empty()) {
    throw SchemaError("$.classes", "expected a non-empty list of names");
  }
  g.class_names = j["classes"].get<std::vector<std::string>>();
  if (!j.contains("modes") || !j["modes"].is_array() || j["modes"].empty()) {
    throw SchemaError("$.modes", "expected a non-empty list");
  }
  double mode_sum = 0;
  for (std::size_t m = 0; m < j["modes"].size(); ++m) {
    const json& mj = j["modes"][m];
    const std::string path = "$.modes[" + std::to_string(m) + "]";
    GrammarMode mode;
    mode.name = mj.value("name", "mode" + std::to_string(m));
    mode.p = mj.value("p", 0.0);
    if (!(mode.p >= 0)) throw SchemaError(path + ".p", "probability must be >= 0");
    mode_sum += mode.p;
    if (!mj.contains("rules") || !mj["rules"].is_array()) throw SchemaError(path + ".rules", "expected a list");
    for (std::size_t r = 0; r < mj["rules"].size(); ++r) {
      mode.rules.push_back(parse_rule(mj["rules"][r], path + ".rules[" + std::to_string(r) + "]", g.class_names,
                                      mode.rules));
    }
    g.modes.push_back(std::move(mode));
  }
  check_normalized(mode_sum, "$.modes", "mode probabilities");
  return g;
}

Grammar read_grammar(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string(), e.what());
  }
  return parse_grammar(j);
}

namespace {

bool overlaps(const Cells& a, const Cells& b) {
  return a[0] < b[0] + b[2] && b[0] < a[0] + a[2] && a[1] < b[1] + b[3] && b[1] < a[1] + a[3];
}

std::size_t pick_positive(Chooser& chooser, const std::vector<double>& weights, std::vector<std::size_t>& keep) {
  keep.clear();
  std::vector<double> w;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] > 0) {
      keep.push_back(i);
      w.push_back(weights[i]);
    }
  }
  return keep[chooser.pick(w)];
}

class RngChooser : public Chooser {
 public:
  explicit RngChooser(Rng& rng) : rng_(rng) {}
  std::size_t pick(const std::vector<double>& weights) override {
    if (weights.size() == 1) return 0;
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    const double u = rng_.uniform() * total;
    double acc = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }

 private:
  Rng& rng_;
};

// Replays a decision path, extending it with first options; records the
// option count at every depth and the path probability.
class PathChooser : public Chooser {
 public:
  std::vector<std::size_t> path;
  std::vector<std::size_t> sizes;
  std::size_t depth = 0;
  double prob = 1;

  void restart() {
    depth = 0;
    prob = 1;
  }

  std::size_t pick(const std::vector<double>& weights) override {
    if (depth == path.size()) path.push_back(0);
    if (sizes.size() <= depth) sizes.resize(depth + 1);
    sizes[depth] = weights.size();
    const std::size_t idx = path[depth++];
    prob *= weights[idx] / std::accumulate(weights.begin(), weights.end(), 0.0);
    return idx;
  }

  // Odometer step over the path just replayed; false when exhausted.
  bool advance() {
    path.resize(depth);
    sizes.resize(depth);
    while (!path.empty() && path.back() + 1 == sizes.back()) {
      path.pop_back();
      sizes.pop_back();
    }
    if (path.empty()) return false;
    ++path.back();
    return true;
  }
};

}  // namespace

GeneratedLayout generate_layout(const Grammar& grammar, Chooser& chooser) {
  std::vector<double> mode_w;
  for (const GrammarMode& m : grammar.modes) mode_w.push_back(m.p);
  std::vector<std::size_t> keep;
  const std::size_t mi = pick_positive(chooser, mode_w, keep);
  const GrammarMode& mode = grammar.modes[mi];
  const int n = grammar.grid_n;

  GeneratedLayout out;
  out.mode = static_cast<int>(mi);
  out.layout.mode = out.mode;
  std::map<std::string, std::vector<Cells>> placed;
  std::vector<std::pair<int, Cells>> boxes;

  for (const GrammarRule& rule : mode.rules) {
    std::vector<Cells>& mine = placed[rule.name];
    std::vector<Cells> anchors;
    if (rule.kind == GrammarRule::Kind::Attach) {
      anchors = placed.at(rule.to);
    } else {
      anchors.push_back(Cells{});
    }
    std::vector<double> count_w;
    for (const auto& [c, p] : rule.count) count_w.push_back(p);
    for (const Cells& anchor : anchors) {
      const int count = rule.count[pick_positive(chooser, count_w, keep)].first;
      for (int i = 0; i < count; ++i) {
        std::vector<Cells> cells;
        std::vector<double> w;
        for (const GridChoice& c : rule.choices) {
          Cells cell;
          for (std::size_t f = 0; f < 4; ++f) cell[f] = c.xywh[f].eval(anchor);
          const bool blocked = rule.no_overlap &&
                               std::any_of(mine.begin(), mine.end(), [&](const Cells& m) { return overlaps(m, cell); });
          cells.push_back(cell);
          w.push_back(blocked ? 0.0 : c.p);
        }
        if (std::none_of(w.begin(), w.end(), [](double x) { return x > 0; })) {
          throw GenerationError("rule '" + rule.name + "' in mode '" + mode.name + "' cannot place box " +
                                std::to_string(i + 1) + " of " + std::to_string(count) +
                                ": every choice overlaps an earlier box");
        }
        const Cells cell = cells[pick_positive(chooser, w, keep)];
        if (cell[0] < 0 || cell[1] < 0 || cell[2] < 1 || cell[3] < 1 || cell[0] + cell[2] > n ||
            cell[1] + cell[3] > n) {
          std::ostringstream msg;
          msg << "rule '" << rule.name << "' in mode '" << mode.name << "' placed a box off the " << n << "x" << n
              << " grid (x " << cell[0] << ", y " << cell[1] << ", w " << cell[2] << ", h " << cell[3] << ")";
          throw GenerationError(msg.str());
        }
        mine.push_back(cell);
        boxes.emplace_back(rule.class_id, cell);
      }
    }
  }
  const double g = static_cast<double>(n);
  for (const auto& [cls, c] : boxes) {
    out.layout.boxes.push_back(BBox{cls, c[0] / g, c[1] / g, c[2] / g, c[3] / g});
  }
  return out;
}

GeneratedLayout sample_layout(const Grammar& grammar, Rng& rng) {
  RngChooser chooser(rng);
  return generate_layout(grammar, chooser);
}

Corpus sample_corpus(const Grammar& grammar, std::size_t count, std::uint64_t seed, const std::string& id_prefix) {
  Corpus corpus;
  corpus.header.normalized = true;
  corpus.header.class_names = grammar.class_names;
  nlohmann::ordered_json prov;
  prov["grammar"] = grammar.name;
  prov["seed"] = seed;
  prov["count"] = count;
  corpus.header.provenance_json = prov.dump();
  const std::size_t width = std::max<std::size_t>(6, std::to_string(count).size());
  const Rng root(seed);
  corpus.layouts.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    GeneratedLayout g = sample_layout(grammar, rng);
    std::string digits = std::to_string(i);
    g.layout.id = id_prefix + std::string(width - digits.size(), '0') + digits;
    corpus.layouts.push_back(std::move(g.layout));
  }
  return corpus;
}

double GrammarOracle::total() const { return std::accumulate(probs.begin(), probs.end(), 0.0); }

GrammarOracle enumerate_oracle(const Grammar& grammar, std::size_t max_support) {
  const Vocab vocab = grammar.vocab();
  std::map<std::vector<TokenId>, double> support;
  PathChooser chooser;
  std::size_t paths = 0;
  do {
    chooser.restart();
    const GeneratedLayout g = generate_layout(grammar, chooser);
    support[layout_to_seq(g.layout, vocab).ids] += chooser.prob;
    ++paths;
    if (support.size() > max_support) {
      throw DataError("grammar support exceeds " + std::to_string(max_support) + " sequences (at least " +
                      std::to_string(support.size()) + " distinct after " + std::to_string(paths) + " paths)");
    }
  } while (chooser.advance());
  GrammarOracle oracle;
  oracle.vocab = vocab;
  for (auto& [ids, p] : support) {
    oracle.seqs.push_back(TokenSeq{ids});
    oracle.probs.push_back(p);
  }
  return oracle;
}

namespace {

using CondTable = std::map<std::vector<TokenId>, std::map<TokenId, double>>;

std::vector<TokenId> masked_pattern(const TokenSeq& seq, std::size_t box, std::size_t k, TokenId mask) {
  std::vector<TokenId> ids = seq.ids;
  const std::size_t start = TokenSeq::span_start(box);
  for (std::size_t j = k; j < 5; ++j) ids[start + j] = mask;
  return ids;
}

CondTable masked_table(const GrammarOracle& o) {
  CondTable t;
  for (std::size_t s = 0; s < o.seqs.size(); ++s) {
    const TokenSeq& seq = o.seqs[s];
    for (std::size_t b = 0; b < seq.num_boxes(); ++b) {
      for (std::size_t k = 0; k < 5; ++k) {
        t[masked_pattern(seq, b, k, o.vocab.mask())][seq.ids[TokenSeq::span_start(b) + k]] += o.probs[s];
      }
    }
  }
  return t;
}

CondTable prefix_table(const GrammarOracle& o) {
  CondTable t;
  for (std::size_t s = 0; s < o.seqs.size(); ++s) {
    const auto& ids = o.seqs[s].ids;
    for (std::size_t pos = 1; pos < ids.size(); ++pos) {
      t[std::vector<TokenId>(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(pos))][ids[pos]] += o.probs[s];
    }
  }
  return t;
}

double cond_nll(const CondTable& t, const std::vector<TokenId>& key, TokenId target) {
  const auto& dist = t.at(key);
  double z = 0;
  for (const auto& [tok, p] : dist) z += p;
  return -std::log(dist.at(target) / z);
}

}  // namespace

OracleEntropy oracle_entropy(const GrammarOracle& o) {
  OracleEntropy e;
  const double total = o.total();
  for (std::size_t s = 0; s < o.seqs.size(); ++s) {
    const double p = o.probs[s] / total;
    if (p > 0) e.joint -= p * std::log(p);
    e.mean_causal_tokens += p * static_cast<double>(o.seqs[s].ids.size() - 1);
    e.mean_masked_tokens += p * 5.0 * static_cast<double>(o.seqs[s].num_boxes());
  }
  e.causal_per_token = e.mean_causal_tokens > 0 ? e.joint / e.mean_causal_tokens : 0.0;

  const CondTable t = masked_table(o);
  double masked = 0;
  for (const auto& [pattern, dist] : t) {
    double z = 0;
    for (const auto& [tok, p] : dist) z += p;
    for (const auto& [tok, p] : dist) masked -= (p / total) * std::log(p / z);
  }
  e.masked_per_token = e.mean_masked_tokens > 0 ? masked / e.mean_masked_tokens : 0.0;
  return e;
}

std::map<TokenId, double> oracle_conditional(const GrammarOracle& o, const TokenSeq& context, std::size_t position,
                                             AttentionMode visibility) {
  if (position >= context.ids.size()) throw RangeError("conditional position outside the context");
  std::map<TokenId, double> dist;
  double z = 0;
  for (std::size_t s = 0; s < o.seqs.size(); ++s) {
    const auto& ids = o.seqs[s].ids;
    bool match = true;
    if (visibility == AttentionMode::Bidirectional) {
      if (ids.size() != context.ids.size()) continue;
      for (std::size_t i = 0; i < ids.size() && match; ++i) {
        if (context.ids[i] != o.vocab.mask() && context.ids[i] != ids[i]) match = false;
      }
    } else {
      if (ids.size() <= position) continue;
      for (std::size_t i = 0; i < position && match; ++i) match = context.ids[i] == ids[i];
    }
    if (!match) continue;
    dist[ids[position]] += o.probs[s];
    z += o.probs[s];
  }
  if (!(z > 0)) throw DataError("context has probability zero under the grammar");
  for (auto& [tok, p] : dist) p /= z;
  return dist;
}

std::vector<ClassOracleStats> oracle_class_stats(const GrammarOracle& o) {
  const CondTable masked = masked_table(o);
  const CondTable prefix = prefix_table(o);
  const double total = o.total();
  std::vector<ClassOracleStats> stats(static_cast<std::size_t>(o.vocab.num_classes()));
  for (std::size_t c = 0; c < stats.size(); ++c) stats[c].class_id = static_cast<int>(c);
  for (std::size_t s = 0; s < o.seqs.size(); ++s) {
    const TokenSeq& seq = o.seqs[s];
    const double p = o.probs[s] / total;
    for (std::size_t b = 0; b < seq.num_boxes(); ++b) {
      const std::size_t start = TokenSeq::span_start(b);
      ClassOracleStats& st = stats[static_cast<std::size_t>(o.vocab.value(seq.ids[start]))];
      st.occurrences += p;
      st.bidir_class_entropy += p * cond_nll(masked, masked_pattern(seq, b, 0, o.vocab.mask()), seq.ids[start]);
      for (std::size_t k = 1; k < 5; ++k) {
        st.geometry_entropy += p * cond_nll(masked, masked_pattern(seq, b, k, o.vocab.mask()), seq.ids[start + k]);
      }
      st.causal_class_entropy +=
          p * cond_nll(prefix, std::vector<TokenId>(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(start)),
                       seq.ids[start]);
    }
  }
  for (ClassOracleStats& st : stats) {
    if (st.occurrences > 0) {
      st.bidir_class_entropy /= st.occurrences;
      st.causal_class_entropy /= st.occurrences;
      st.geometry_entropy /= st.occurrences;
    }
  }
  return stats;
}

nlohmann::ordered_json oracle_to_json(const GrammarOracle& o) {
  nlohmann::ordered_json j;
  j["grid"] = o.vocab.grid_n();
  j["num_classes"] = o.vocab.num_classes();
  const OracleEntropy e = oracle_entropy(o);
  j["entropy"] = {{"joint", e.joint},
                  {"causal_per_token", e.causal_per_token},
                  {"masked_per_token", e.masked_per_token},
                  {"mean_causal_tokens", e.mean_causal_tokens},
                  {"mean_masked_tokens", e.mean_masked_tokens}};
  nlohmann::ordered_json cls = nlohmann::ordered_json::array();
  for (const ClassOracleStats& s : oracle_class_stats(o)) {
    cls.push_back({{"class_id", s.class_id},
                   {"occurrences", s.occurrences},
                   {"bidir_class_entropy", s.bidir_class_entropy},
                   {"causal_class_entropy", s.causal_class_entropy},
                   {"geometry_entropy", s.geometry_entropy}});
  }
  j["class_stats"] = std::move(cls);
  nlohmann::ordered_json support = nlohmann::ordered_json::object();
  for (std::size_t s = 0; s < o.seqs.size(); ++s) {
    std::string key;
    for (TokenId id : o.seqs[s].ids) {
      if (!key.empty()) key += ' ';
      key += std::to_string(id);
    }
    support[key] = o.probs[s];
  }
  j["support"] = std::move(support);
  return j;
}

GrammarOracle oracle_from_json(const json& j) {
  GrammarOracle o;
  try {
    o.vocab = Vocab(j.at("num_classes").get<int>(), j.at("grid").get<int>());
    for (const auto& [key, p] : j.at("support").items()) {
      TokenSeq seq;
      std::istringstream in(key);
      TokenId id;
      while (in >> id) seq.ids.push_back(id);
      o.seqs.push_back(std::move(seq));
      o.probs.push_back(p.get<double>());
    }
  } catch (const json::exception& e) {
    throw SchemaError("$", std::string("bad oracle cache: ") + e.what());
  }
  return o;
}

}  // namespace layoutseq
