#include <algorithm>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "commands.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/io.hpp"

namespace layoutseq::cli {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

const char* color(int class_id) { return kPalette[static_cast<std::size_t>(class_id) % std::size(kPalette)]; }

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Candidate {
  BBox box;
  double score = 0;
};

std::string name_of(int class_id, const std::vector<std::string>& names) {
  if (class_id >= 0 && class_id < static_cast<int>(names.size())) return names[static_cast<std::size_t>(class_id)];
  return "class" + std::to_string(class_id);
}

/// Layout boxes are filled and labeled; candidates are dashed outlines whose
/// opacity is their score over the best score in the pool.
std::string render_svg(const Layout& layout, const std::vector<Candidate>& candidates,
                       const std::vector<std::string>& names, int size, int grid_n, const std::string& metadata) {
  std::ostringstream svg;
  const double s = size;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
      << "\" viewBox=\"0 0 " << size << ' ' << size << "\" style=\"background:#ffffff\">\n"
      << "  <metadata>" << xml_escape(metadata) << "</metadata>\n";
  if (grid_n > 0) {
    svg << "  <g class=\"grid\" stroke=\"#e8e8e8\" stroke-width=\"1\">\n";
    for (int i = 0; i <= grid_n; ++i) {
      const std::string t = num(s * i / grid_n);
      svg << "    <line x1=\"" << t << "\" y1=\"0\" x2=\"" << t << "\" y2=\"" << size << "\"/>\n";
      svg << "    <line x1=\"0\" y1=\"" << t << "\" x2=\"" << size << "\" y2=\"" << t << "\"/>\n";
    }
    svg << "  </g>\n";
  }
  svg << "  <g class=\"layout\">\n";
  for (const BBox& b : layout.boxes) {
    const std::string name = xml_escape(name_of(b.class_id, names));
    svg << "    <rect x=\"" << num(b.x * s) << "\" y=\"" << num(b.y * s) << "\" width=\"" << num(b.w * s)
        << "\" height=\"" << num(b.h * s) << "\" fill=\"" << color(b.class_id) << "\" fill-opacity=\"0.35\" stroke=\""
        << color(b.class_id) << "\" stroke-width=\"2\"><title>" << name << "</title></rect>\n";
    svg << "    <text x=\"" << num(b.x * s + 3) << "\" y=\"" << num(b.y * s + 12)
        << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#222222\">" << name << "</text>\n";
  }
  svg << "  </g>\n";
  if (!candidates.empty()) {
    double best = 0;
    for (const Candidate& c : candidates) best = std::max(best, c.score);
    svg << "  <g class=\"candidates\">\n";
    for (const Candidate& c : candidates) {
      const double alpha = best > 0 ? c.score / best : 1.0;
      const BBox& b = c.box;
      svg << "    <rect x=\"" << num(b.x * s) << "\" y=\"" << num(b.y * s) << "\" width=\"" << num(b.w * s)
          << "\" height=\"" << num(b.h * s) << "\" fill=\"" << color(b.class_id) << "\" fill-opacity=\""
          << num(0.5 * alpha) << "\" stroke=\"" << color(b.class_id) << "\" stroke-opacity=\"" << num(alpha)
          << "\" stroke-width=\"2\" stroke-dasharray=\"6 3\"><title>"
          << xml_escape(name_of(b.class_id, names)) << " score " << c.score << "</title></rect>\n";
    }
    svg << "  </g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace

Command make_render(CLI::App& root) {
  Command cmd;
  cmd.app = root.add_subcommand("render", "Draw a layout, or insert candidates over their layout, as SVG");
  cmd.spec = std::make_unique<ArgSpec>(cmd.app);
  ArgSpec& a = *cmd.spec;
  a.option("--input", "input", std::string(), "Layout file (JSONL corpus) or candidates.json from insert");
  a.option("--id", "id", std::string(), "Layout id in a JSONL input (default: the first)");
  a.option("--iteration", "iteration", std::size_t{0}, "Insert step to draw from candidates.json");
  a.option("--size", "size", 512, "Image side in pixels");
  a.option("--grid-n", "grid_n", 16, "Anchor grid lines to draw (0 = none)");
  a.option("--out", "out", std::string(), "Output SVG file");

  cmd.run = [](RunConfig& rc) {
    const std::string input = rc.path("input");
    const std::string text = read_file(input);
    Layout layout;
    std::vector<Candidate> candidates;
    std::vector<std::string> names;

    const nlohmann::json doc = nlohmann::json::parse(text, nullptr, false);
    if (doc.is_object() && doc.contains("iterations")) {
      const auto& steps = doc["iterations"];
      const auto it = rc.get<std::size_t>("iteration");
      if (!steps.is_array() || it >= steps.size()) {
        throw DataError(input + ": no insert iteration " + std::to_string(it));
      }
      layout = layout_from_json(steps[it].at("layout"));
      for (const auto& c : steps[it].at("candidates")) {
        try {
          candidates.push_back({BBox{c.at("class").get<int>(), c.at("x").get<double>(), c.at("y").get<double>(),
                                     c.at("w").get<double>(), c.at("h").get<double>()},
                                c.at("score").get<double>()});
        } catch (const nlohmann::json::exception& e) {
          throw DataError(input + ": bad candidate: " + e.what());
        }
      }
      if (doc.contains("class_names")) names = doc["class_names"].get<std::vector<std::string>>();
    } else {
      const Corpus corpus = parse_corpus_jsonl(text);
      layout = pick_layout(corpus, rc.get<std::string>("id"), input);
      names = corpus.header.class_names;
    }

    const int size = rc.get<int>("size");
    if (size < 16) throw UsageError("--size must be at least 16");
    const std::filesystem::path out = rc.path("out");
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    write_file_atomic(out, render_svg(layout, candidates, names, size, rc.get<int>("grid_n"), rc.to_json().dump()));
    std::cout << "wrote " << out.string() << "\n";
  };
  return cmd;
}

}  // namespace layoutseq::cli
