#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

namespace layoutseq::cli {

/// Bad flags or config values; exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Registers flags on a subcommand and records each one's RunConfig key and
/// default. Resolution order: defaults, then the --config file, then flags
/// given on the command line.
class ArgSpec {
 public:
  explicit ArgSpec(CLI::App* app);

  template <class T>
  CLI::Option* option(const std::string& flags, const std::string& key, T default_value, const std::string& help) {
    auto storage = std::make_shared<T>(default_value);
    CLI::Option* opt = app_->add_option(flags, *storage, help);
    record(key, opt, nlohmann::ordered_json(default_value), [storage] { return nlohmann::ordered_json(*storage); });
    return opt;
  }

  /// Option whose default means "decided later" (echoed once resolved).
  template <class T>
  CLI::Option* deferred(const std::string& flags, const std::string& key, const std::string& help) {
    auto storage = std::make_shared<T>();
    CLI::Option* opt = app_->add_option(flags, *storage, help);
    record(key, opt, nullptr, [storage] { return nlohmann::ordered_json(*storage); });
    return opt;
  }

  CLI::Option* flag(const std::string& flags, const std::string& key, const std::string& help);

  /// Fully resolved arguments for this run.
  nlohmann::ordered_json resolve() const;
  const std::string& name() const { return name_; }

 private:
  struct Entry {
    std::string key;
    CLI::Option* opt;
    nlohmann::ordered_json default_value;
    std::function<nlohmann::ordered_json()> value;
  };
  void record(const std::string& key, CLI::Option* opt, nlohmann::ordered_json default_value,
              std::function<nlohmann::ordered_json()> value);

  CLI::App* app_;
  std::string name_;
  std::shared_ptr<std::string> config_path_;
  std::vector<Entry> entries_;
};

/// Resolved view of one invocation; `to_json` is what gets echoed into
/// outputs, and feeding it back through --config reproduces the run.
struct RunConfig {
  std::string command;
  nlohmann::ordered_json args;

  nlohmann::ordered_json to_json() const;

  template <class T>
  T get(const std::string& key) const {
    const auto it = args.find(key);
    if (it == args.end() || it->is_null()) throw UsageError("missing required setting '" + key + "'");
    try {
      return it->get<T>();
    } catch (const nlohmann::json::exception&) {
      throw UsageError("setting '" + key + "' has the wrong type: " + it->dump());
    }
  }
  bool has(const std::string& key) const;
  /// Required path; UsageError naming the flag when absent or empty.
  std::string path(const std::string& key) const;
};

}  // namespace layoutseq::cli
