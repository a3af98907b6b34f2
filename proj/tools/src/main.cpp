#include <iostream>

#include "commands.hpp"
#include "layoutseq/error.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

}  // namespace

int main(int argc, char** argv) {
  using namespace layoutseq;
  using namespace layoutseq::cli;

  CLI::App app{"layoutseq: layout modeling with bidirectional and causal transformers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "layoutseq 0.1.0");

  std::vector<Command> commands;
  commands.push_back(make_gen_data(app));
  commands.push_back(make_ingest_coco(app));
  commands.push_back(make_train(app));
  commands.push_back(make_eval(app));
  commands.push_back(make_recommend(app));
  commands.push_back(make_insert(app));
  commands.push_back(make_retrieve(app));
  commands.push_back(make_render(app));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  for (Command& cmd : commands) {
    if (!cmd.app->parsed()) continue;
    try {
      RunConfig rc{cmd.spec->name(), cmd.spec->resolve()};
      cmd.run(rc);
      return 0;
    } catch (const UsageError& e) {
      std::cerr << "usage error: " << e.what() << "\n";
      return kExitUsage;
    } catch (const ParameterError& e) {
      std::cerr << "usage error: " << e.what() << "\n";
      return kExitUsage;
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitData;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitData;
    }
  }
  return kExitUsage;
}
