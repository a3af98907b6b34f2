#include <cstdio>
#include <iostream>

#include "commands.hpp"
#include "layoutseq/error.hpp"
#include "layoutseq/evaluation.hpp"
#include "layoutseq/inference.hpp"
#include "layoutseq/io.hpp"
#include "layoutseq/retrieval.hpp"
#include "layoutseq/rng.hpp"
#include "layoutseq/training.hpp"

namespace layoutseq::cli {

using nlohmann::ordered_json;

namespace {

int infer_class_count(const Corpus& a, const Corpus& b) {
  if (!a.header.class_names.empty()) return static_cast<int>(a.header.class_names.size());
  int count = 0;
  for (const Corpus* c : {&a, &b}) {
    for (const Layout& l : c->layouts) {
      for (const BBox& box : l.boxes) count = std::max(count, box.class_id + 1);
    }
  }
  if (count == 0) throw DataError("cannot infer the class count: no class names and no boxes");
  return count;
}

void emit(const RunConfig& rc, const ordered_json& j) {
  if (rc.has("out")) {
    const std::filesystem::path out = rc.get<std::string>("out");
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    write_json(out, j);
  } else {
    std::cout << j.dump(2) << "\n";
  }
}

}  // namespace

Command make_train(CLI::App& root) {
  Command cmd;
  cmd.app = root.add_subcommand("train", "Train a bidirectional (masked span) or causal (next token) layout model");
  cmd.spec = std::make_unique<ArgSpec>(cmd.app);
  ArgSpec& a = *cmd.spec;
  a.option("--train", "train", std::string(), "Training corpus (JSONL)");
  a.option("--val", "val", std::string(), "Validation corpus (JSONL); optional");
  a.option("--model", "model", std::string("tiny"), "Size preset: tiny, small, medium or large")
      ->check(CLI::IsMember({"tiny", "small", "medium", "large"}));
  a.option("--attention", "attention", std::string("bidirectional"), "bidirectional or causal")
      ->check(CLI::IsMember({"bidirectional", "causal"}));
  a.option("--grid-n", "grid_n", 16, "Anchor grid size N");
  a.deferred<double>("--dropout", "dropout", "Dropout rate (default: the preset's)");
  a.option("--steps", "steps", std::int64_t{2000}, "Optimizer steps");
  a.option("--batch-size", "batch_size", std::size_t{8}, "Layouts per step");
  a.option("--lr", "lr", 1e-3, "Peak learning rate (cosine decay to 0)");
  a.option("--weight-decay", "weight_decay", 0.01, "AdamW decoupled weight decay");
  a.option("--flip-prob", "flip_prob", 0.5, "Left-right flip probability");
  a.option("--eval-every", "eval_every", std::int64_t{200}, "Steps between validation passes");
  a.option("--eval-limit", "eval_limit", std::size_t{0}, "Validation layouts per pass (0 = all)");
  a.option("--checkpoint", "checkpoint", std::string(), "Initialize weights from this checkpoint");
  a.option("--seed", "seed", std::uint64_t{0}, "Seed for initialization, data order, augmentation and dropout");
  a.option("--out", "out", std::string(), "Output directory for checkpoints and metrics");

  cmd.run = [](RunConfig& rc) {
    const Corpus train_corpus = read_corpus(rc.path("train"));
    const Corpus val_corpus = rc.has("val") ? read_corpus(rc.get<std::string>("val")) : Corpus{};
    const Vocab vocab(infer_class_count(train_corpus, val_corpus), rc.get<int>("grid_n"));
    const auto seed = rc.get<std::uint64_t>("seed");

    Model model;
    if (rc.has("checkpoint")) {
      std::filesystem::path p = rc.get<std::string>("checkpoint");
      if (std::filesystem::is_directory(p)) p /= "best.ckpt";
      model = load_model(p, &vocab).model;
    } else {
      ModelConfig config = ModelConfig::preset(rc.get<std::string>("model"), vocab.size(),
                                               parse_attention_mode(rc.get<std::string>("attention")));
      if (rc.has("dropout")) config.dropout = rc.get<double>("dropout");
      Rng init = Rng(seed).split("model.init");
      model = make_model(config, vocab, init);
    }
    rc.args["dropout"] = model.config.dropout;

    TrainPlan plan;
    plan.total_steps = rc.get<std::int64_t>("steps");
    plan.batch_size = rc.get<std::size_t>("batch_size");
    plan.base_lr = rc.get<double>("lr");
    plan.adamw.weight_decay = rc.get<double>("weight_decay");
    plan.flip_probability = rc.get<double>("flip_prob");
    plan.eval_every = rc.get<std::int64_t>("eval_every");
    plan.eval_limit = rc.get<std::size_t>("eval_limit");
    plan.seed = seed;
    plan.out_dir = ensure_dir(rc.path("out"));
    plan.on_record = [](const MetricsRecord& r) { std::cerr << format_metrics_line(r) << "\n"; };
    write_run_config(plan.out_dir, rc);

    const TrainResult result = train(plan, train_corpus.layouts, val_corpus.layouts, model);
    std::cout << "trained " << plan.total_steps << " steps, " << model.params.parameter_count() << " parameters";
    if (result.best_val_nll) std::cout << "; best val NLL " << *result.best_val_nll << " at step " << result.best_step;
    std::cout << "\n";
  };
  return cmd;
}

Command make_eval(CLI::App& root) {
  Command cmd;
  cmd.app = root.add_subcommand("eval", "NLL, per-class NLL, top-1 class accuracy and conditional mIoU on a corpus");
  cmd.spec = std::make_unique<ArgSpec>(cmd.app);
  ArgSpec& a = *cmd.spec;
  a.option("--checkpoint", "checkpoint", std::string(), "Checkpoint file or training output directory");
  a.option("--corpus", "corpus", std::string(), "Evaluation corpus (JSONL)");
  a.option("--seed", "seed", std::uint64_t{0}, "Seed for the held-out box choice");
  a.option("--out", "out", std::string(), "Directory for report.json and per_class.csv (optional)");

  cmd.run = [](RunConfig& rc) {
    const Model model = load_checkpoint_arg(rc.path("checkpoint"));
    const Corpus corpus = read_corpus(rc.path("corpus"));
    const auto names = class_names_for(corpus, model.vocab.num_classes());
    EvalReport report = evaluate(model, corpus.layouts, rc.get<std::uint64_t>("seed"));
    report.config = rc.to_json();
    if (rc.has("out")) {
      const auto out = ensure_dir(rc.get<std::string>("out"));
      write_json(out / "report.json", to_json(report, names));
      write_file_atomic(out / "per_class.csv", per_class_csv(report.per_class, names));
    }
    std::cout << format_report_table(report, names);
  };
  return cmd;
}

Command make_recommend(CLI::App& root) {
  Command cmd;
  cmd.app = root.add_subcommand("recommend", "Rank the classes most likely to be missing from a layout");
  cmd.spec = std::make_unique<ArgSpec>(cmd.app);
  ArgSpec& a = *cmd.spec;
  a.option("--checkpoint", "checkpoint", std::string(), "Checkpoint file or training output directory");
  a.option("--layout", "layout", std::string(), "Layout file (JSONL corpus)");
  a.option("--id", "id", std::string(), "Layout id within the file (default: the first)");
  a.option("--top-m", "top_m", std::size_t{3}, "Classes to return");
  a.option("--out", "out", std::string(), "Output JSON file (default: stdout)");

  cmd.run = [](RunConfig& rc) {
    const Model model = load_checkpoint_arg(rc.path("checkpoint"));
    const std::string source = rc.path("layout");
    const Corpus corpus = read_corpus(source);
    const Layout& layout = pick_layout(corpus, rc.get<std::string>("id"), source);
    const auto names = class_names_for(corpus, model.vocab.num_classes());
    ordered_json recs = ordered_json::array();
    for (const ClassScore& s : recommend_classes(model, layout, rc.get<std::size_t>("top_m"))) {
      recs.push_back({{"class", s.class_id},
                      {"name", names[static_cast<std::size_t>(s.class_id)]},
                      {"probability", s.probability},
                      {"position", s.position}});
    }
    ordered_json j;
    j["run_config"] = rc.to_json();
    j["layout_id"] = layout.id;
    j["recommendations"] = std::move(recs);
    emit(rc, j);
  };
  return cmd;
}

Command make_insert(CLI::App& root) {
  Command cmd;
  cmd.app = root.add_subcommand("insert", "Insert objects into a layout: recommend or fix a class, generate, rank, NMS");
  cmd.spec = std::make_unique<ArgSpec>(cmd.app);
  ArgSpec& a = *cmd.spec;
  a.option("--checkpoint", "checkpoint", std::string(), "Checkpoint file or training output directory");
  a.option("--layout", "layout", std::string(), "Layout file (JSONL corpus)");
  a.option("--id", "id", std::string(), "Layout id within the file (default: the first)");
  a.option("--class", "class", std::string(), "Class name or index to insert (default: top recommendation)");
  a.deferred<std::string>("--strategy", "strategy", "greedy, top_k, top_p or beam (default by attention mode)")
      ->check(CLI::IsMember({"greedy", "top_k", "top-k", "top_p", "top-p", "beam"}));
  a.deferred<int>("--top-k", "top_k", "Top-k cut (default 3 bidirectional, 15 causal)");
  a.deferred<double>("--top-p", "top_p", "Nucleus mass (default 1 bidirectional, 0.9 causal)");
  a.option("--beam-width", "beam_width", 4, "Beam width for --strategy beam");
  a.option("--temperature", "temperature", 1.0, "Softmax temperature");
  a.option("--nms-iou", "nms_iou", kDefaultNmsIou, "NMS IoU threshold");
  a.option("--candidates", "candidates", kDefaultCandidatesPerPosition, "Candidates per insertion position");
  a.option("--iterations", "iterations", 1, "Objects to insert one after another");
  a.flag("--tta-flip", "tta_flip", "Causal models: also decode the mirrored layout");
  a.option("--seed", "seed", std::uint64_t{0}, "Sampling seed");
  a.option("--out", "out", std::string(), "Output directory for candidates.json and layout.jsonl");

  cmd.run = [](RunConfig& rc) {
    const Model model = load_checkpoint_arg(rc.path("checkpoint"));
    const std::string source = rc.path("layout");
    const Corpus corpus = read_corpus(source);
    Layout layout = pick_layout(corpus, rc.get<std::string>("id"), source);
    const auto names = class_names_for(corpus, model.vocab.num_classes());
    const auto seed = rc.get<std::uint64_t>("seed");
    const int iterations = rc.get<int>("iterations");
    if (iterations < 1) throw UsageError("--iterations must be at least 1");
    std::optional<int> class_id;
    if (rc.has("class")) class_id = parse_class(rc.get<std::string>("class"), names);

    SamplerConfig sampler = model.config.attention == AttentionMode::Causal ? SamplerConfig::gpt_default(seed)
                                                                             : SamplerConfig::bert_default(seed);
    if (rc.has("strategy")) sampler.strategy = parse_strategy(rc.get<std::string>("strategy"));
    if (rc.has("top_k")) sampler.k = rc.get<int>("top_k");
    if (rc.has("top_p")) sampler.p = rc.get<double>("top_p");
    sampler.beam_width = rc.get<int>("beam_width");
    sampler.temperature = rc.get<double>("temperature");
    sampler.validate();
    rc.args["strategy"] = strategy_name(sampler.strategy);
    rc.args["top_k"] = sampler.k;
    rc.args["top_p"] = sampler.p;
    const auto out = ensure_dir(rc.path("out"));

    ordered_json steps = ordered_json::array();
    for (int it = 0; it < iterations; ++it) {
      SamplerConfig s = sampler;
      s.seed = Rng(seed).split(static_cast<std::uint64_t>(it)).seed();
      const InsertResult r = insert_object(model, layout, class_id, s, rc.get<double>("nms_iou"),
                                           rc.get<std::size_t>("candidates"), rc.get<bool>("tta_flip"));
      ordered_json step;
      step["layout"] = layout_json(layout);
      step["class"] = r.class_id;
      step["class_name"] = names[static_cast<std::size_t>(r.class_id)];
      ordered_json recs = ordered_json::array();
      for (const ClassScore& c : r.recommendations) {
        recs.push_back({{"class", c.class_id}, {"probability", c.probability}, {"position", c.position}});
      }
      step["recommendations"] = std::move(recs);
      step["candidates"] = candidates_to_json(r.candidates);
      steps.push_back(std::move(step));
      layout = r.layout;
    }

    ordered_json j;
    j["run_config"] = rc.to_json();
    j["class_names"] = names;
    j["iterations"] = std::move(steps);
    write_json(out / "candidates.json", j);
    Corpus result;
    result.header.normalized = true;
    result.header.class_names = names;
    result.header.provenance_json = rc.to_json().dump();
    result.layouts.push_back(layout);
    write_corpus(out / "layout.jsonl", result);
    write_run_config(out, rc);
    std::cout << "inserted " << iterations << " object(s); final layout has " << layout.boxes.size() << " boxes\n";
  };
  return cmd;
}

Command make_retrieve(CLI::App& root) {
  Command cmd;
  cmd.app = root.add_subcommand("retrieve", "Nearest-neighbor layout search over mean-pooled model embeddings");
  cmd.spec = std::make_unique<ArgSpec>(cmd.app);
  ArgSpec& a = *cmd.spec;
  a.option("--checkpoint", "checkpoint", std::string(), "Checkpoint file or training output directory");
  a.option("--corpus", "corpus", std::string(), "Corpus to index (JSONL)");
  a.option("--query", "query", std::vector<std::string>(), "Query layout ids (default: every layout)");
  a.option("--k", "k", std::size_t{5}, "Results per query");
  a.option("--relevance", "relevance", std::string(),
           "Relevance JSON {id: [ids]} for mAP, or 'modes' to use the corpus grammar modes");
  a.option("--save-index", "save_index", std::string(), "Also write the embedding index here");
  a.option("--out", "out", std::string(), "Output JSON file (default: stdout)");

  cmd.run = [](RunConfig& rc) {
    const Model model = load_checkpoint_arg(rc.path("checkpoint"));
    const Corpus corpus = read_corpus(rc.path("corpus"));
    const IndexBuild built = build_index(model, corpus.layouts);
    const EmbeddingIndex& index = built.index;
    if (rc.has("save_index")) save_index(rc.get<std::string>("save_index"), index);
    const auto k = rc.get<std::size_t>("k");
    auto queries = rc.get<std::vector<std::string>>("query");
    if (queries.empty()) queries = index.ids();

    ordered_json results = ordered_json::array();
    for (const std::string& id : queries) {
      const auto row = index.find(id);
      if (!row) throw DataError("query id '" + id + "' is not in the corpus index");
      ordered_json hits = ordered_json::array();
      for (const Hit& h : query(index, index.row(*row), k, id)) hits.push_back({{"id", h.id}, {"cosine", h.cosine}});
      results.push_back({{"id", id}, {"hits", std::move(hits)}});
    }

    ordered_json j;
    j["run_config"] = rc.to_json();
    j["k"] = k;
    j["skipped"] = built.skipped;
    j["queries"] = std::move(results);
    if (rc.has("relevance")) {
      const std::string rel = rc.get<std::string>("relevance");
      Relevance relevance;
      if (rel == "modes") {
        relevance = relevance_from_modes(corpus.layouts);
        std::map<int, std::size_t> sizes;
        for (const Layout& l : corpus.layouts) {
          if (l.mode && !l.id.empty()) ++sizes[*l.mode];
        }
        std::vector<std::size_t> mode_sizes;
        for (const auto& [mode, n] : sizes) mode_sizes.push_back(n);
        j["random_baseline"] = random_map_baseline(mode_sizes, k);
      } else {
        try {
          relevance = relevance_from_json(nlohmann::json::parse(read_file(rel)));
        } catch (const nlohmann::json::parse_error& e) {
          throw DataError(rel + ": " + e.what());
        }
      }
      const MapResult m = map_at_k(index, queries, relevance, k);
      j["map"] = m.map;
      j["map_queries"] = m.queries;
      j["map_excluded"] = m.excluded;
      std::cerr << "mAP@" << k << " " << m.map << " over " << m.queries << " queries\n";
    }
    emit(rc, j);
  };
  return cmd;
}

}  // namespace layoutseq::cli
