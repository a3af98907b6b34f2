#include "run_config.hpp"

#include <algorithm>

#include "layoutseq/io.hpp"

namespace layoutseq::cli {

using nlohmann::ordered_json;

ArgSpec::ArgSpec(CLI::App* app) : app_(app), name_(app->get_name()), config_path_(std::make_shared<std::string>()) {
  app_->add_option("--config", *config_path_,
                   "JSON settings file: an echoed run_config.json or a plain object of settings");
}

void ArgSpec::record(const std::string& key, CLI::Option* opt, ordered_json default_value,
                     std::function<ordered_json()> value) {
  entries_.push_back({key, opt, std::move(default_value), std::move(value)});
}

CLI::Option* ArgSpec::flag(const std::string& flags, const std::string& key, const std::string& help) {
  auto storage = std::make_shared<bool>(false);
  CLI::Option* opt = app_->add_flag(flags, *storage, help);
  record(key, opt, false, [storage] { return ordered_json(*storage); });
  return opt;
}

ordered_json ArgSpec::resolve() const {
  ordered_json args = ordered_json::object();
  for (const Entry& e : entries_) args[e.key] = e.default_value;

  if (!config_path_->empty()) {
    ordered_json file;
    try {
      file = ordered_json::parse(read_file(*config_path_));
    } catch (const nlohmann::json::parse_error& e) {
      throw UsageError("--config " + *config_path_ + ": " + e.what());
    }
    if (!file.is_object()) throw UsageError("--config " + *config_path_ + ": expected a JSON object");
    if (file.contains("args")) {
      if (file.contains("command") && file["command"] != name_) {
        throw UsageError("--config " + *config_path_ + " was written by '" + file["command"].dump() +
                         "', not '" + name_ + "'");
      }
      file = file["args"];
    }
    for (const auto& [key, value] : file.items()) {
      if (!args.contains(key)) throw UsageError("--config " + *config_path_ + ": unknown setting '" + key + "'");
      args[key] = value;
    }
  }
  for (const Entry& e : entries_) {
    if (e.opt->count() > 0) args[e.key] = e.value();
  }
  return args;
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["tool"] = "layoutseq";
  j["command"] = command;
  j["args"] = args;
  return j;
}

bool RunConfig::has(const std::string& key) const {
  const auto it = args.find(key);
  return it != args.end() && !it->is_null() && !(it->is_string() && it->get<std::string>().empty());
}

std::string RunConfig::path(const std::string& key) const {
  if (!has(key)) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    throw UsageError("--" + flag + " is required");
  }
  return get<std::string>(key);
}

}  // namespace layoutseq::cli
