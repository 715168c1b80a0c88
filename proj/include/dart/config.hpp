#pragma once

// Flat "key = value" run configuration with dotted keys (model.embed_dim,
// longir.window, train.iters, data.sigma, ...).

#include <filesystem>
#include <string>
#include <vector>

#include "dart/train.hpp"

namespace dart {

struct RunConfig {
  DartConfig model;
  TrainConfig train;
  DataConfig data;
};

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string doc;
};

/// Every accepted key with its default, in canonical order.
const std::vector<ConfigKey>& config_keys();

/// Parses config text on top of the defaults. One "key = value" per line;
/// '#' starts a comment; blank lines are ignored. Unknown or repeated keys
/// and malformed values raise ConfigError naming the line.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical text listing every key; parse_run_config(to_config_text(c))
/// reproduces c.
std::string to_config_text(const RunConfig& cfg);

/// Validates the model, schedule and data settings together.
void validate(const RunConfig& cfg);

}  // namespace dart
