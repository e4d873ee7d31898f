#pragma once

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <hded/trainer.hpp>

namespace hded::cli {

// Bad config file, unknown key or unparsable value. Maps to the usage exit code.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfigKey {
  std::string name;  // snake_case; flag is --kebab-case, env is HDED_UPPER_CASE
  std::string help;
  std::function<void(TrainConfig&, const std::string&)> apply;
  std::function<std::string(const TrainConfig&)> show;
};

const std::vector<ConfigKey>& config_keys();
const ConfigKey* find_key(const std::string& name);

std::string flag_name(const std::string& key);  // learning_rate -> learning-rate
std::string env_name(const std::string& key);   // learning_rate -> HDED_LEARNING_RATE

/// `key = value` lines; '#' and ';' start comments, [sections] are ignored.
/// Later lines win. Unknown keys are an error naming the line.
std::map<std::string, std::string> parse_ini(const std::string& text, const std::string& origin);
std::map<std::string, std::string> read_ini(const std::string& path);

/// HDED_* variables from `envp` (null-terminated, as in environ).
std::map<std::string, std::string> env_settings(char** envp);

/// Layers settings over `base` in order (later layers win).
TrainConfig resolve_config(TrainConfig base, const std::vector<std::map<std::string, std::string>>& layers);

/// Every key with its effective value, one `key = value` line each.
std::string to_ini(const TrainConfig& config);

}  // namespace hded::cli
