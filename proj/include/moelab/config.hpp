#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/model.hpp"
#include "moelab/training.hpp"

namespace moelab {

// One run = a model section and a train section; the JSON wire format of
// these structs defines the config-file key names.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Overlay `user` onto `base`, recursing through objects. Every user key must
// already exist in base (unknown keys are rejected with their dotted path)
// and leaf values must keep their JSON type class.
void merge_config(nlohmann::json& base, const nlohmann::json& user,
                  const std::string& prefix = "");

// "a.b.c=value": the path must reach an existing leaf; the value text is
// parsed as a scalar JSON literal when possible, otherwise taken as a string.
void apply_override(nlohmann::json& base, const std::string& assignment);

// defaults <- optional config file <- overrides, in order. The returned JSON
// is the resolved snapshot a command writes next to its artifacts.
nlohmann::json resolve_config(const std::string& config_path,
                              const std::vector<std::string>& overrides,
                              const RunConfig& defaults = RunConfig{});

}  // namespace moelab
