#pragma once

#include <span>
#include <string>
#include <vector>

#include "come/datagen.hpp"
#include "come/harness.hpp"

namespace come {

// Run configuration as JSON with sections data, model, train and ablation.
// Missing keys keep their defaults; unknown keys and ill-typed values are
// rejected with std::invalid_argument naming the dotted key.
RunConfig parse_run_config(const std::string& json_text);

// Applies "section.key=value" overrides on top of `json_text` (empty text
// means all defaults) before parsing. The value is read as JSON when it
// parses as JSON and as a string otherwise.
RunConfig load_run_config(const std::string& json_text, std::span<const std::string> overrides);

// Fully resolved configuration, every key present, pretty-printed.
std::string dump_run_config(const RunConfig& config);

// Generator section alone, used for dataset sidecars.
std::string dump_data_config(const DataConfig& config);
DataConfig parse_data_config(const std::string& json_text);

// Dotted names of every configuration key, in document order.
std::vector<std::string> config_keys();

}  // namespace come
