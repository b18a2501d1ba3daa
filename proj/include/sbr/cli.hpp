// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbr/r3cnn.hpp"
#include "sbr/synthdata.hpp"

namespace sbr {

struct DatasetSection {
  GeneratorParams train;
  /// Read the training split from this manifest instead of generating it.
  std::string manifest;
  int eval_num_images = 100;
  std::uint64_t eval_seed = 1000;
  std::string eval_manifest;
};

struct ExperimentConfig {
  DatasetSection dataset;
  ModelConfig model;
  std::uint64_t model_seed = 0;
  OptimConfig optim;
  std::string output_dir = "runs/default";
};

/// Raised for schema violations; the message starts with the dotted key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Full document with every key; parse(serialize(c)) == c.
std::string config_to_string(const ExperimentConfig& cfg);

/// Missing keys take defaults, unknown keys are rejected. `overrides` are
/// `section.key=value` assignments (value parsed as JSON when it parses,
/// otherwise taken as a string) applied before validation.
ExperimentConfig config_from_string(const std::string& text, const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

/// Range checks across sections; throws ConfigError.
void validate_config(const ExperimentConfig& cfg);

/// Pyramid strides of the configured backbone.
std::vector<int> backbone_strides(const BackboneConfig& cfg);

/// Entry point of the `sbrcnn` tool. Exit codes: 0 ok, 1 user error
/// (bad flags, config, files), 2 internal error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sbr
