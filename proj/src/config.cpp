#include "come/config.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>
#include <string_view>

#include "json.hpp"

namespace come {

using nlohmann::json;

namespace {

template <class V>
void data_fields(DataConfig& d, const std::string& prefix, V&& v) {
  v(prefix + "sources", d.sources);
  v(prefix + "width", d.width);
  v(prefix + "tokens", d.tokens);
  v(prefix + "classes", d.classes);
  v(prefix + "shared_rank", d.shared_rank);
  v(prefix + "source_rank", d.source_rank);
  v(prefix + "samples", d.samples);
  v(prefix + "weights", d.weights);
  v(prefix + "mean_scale", d.mean_scale);
  v(prefix + "shared_scale", d.shared_scale);
  v(prefix + "source_scale", d.source_scale);
  v(prefix + "noise", d.noise);
  v(prefix + "shared_signal", d.shared_signal);
  v(prefix + "source_signal", d.source_signal);
  v(prefix + "common_source_subspace", d.common_source_subspace);
  v(prefix + "train_fraction", d.train_fraction);
  v(prefix + "seed", d.seed);
}

template <class V>
void run_fields(RunConfig& c, V&& v) {
  data_fields(c.data, "data.", v);

  ModelConfig& m = c.model;
  v("model.kind", m.kind);
  v("model.heads", m.heads);
  v("model.attention_residual", m.attention_residual);
  v("model.experts", m.experts);
  v("model.top_k", m.top_k);
  v("model.expert_hidden", m.expert_hidden);
  v("model.capacity_factor", m.capacity_factor);
  v("model.gate_temperature", m.gate_temperature);
  v("model.renormalize_gates", m.renormalize_gates);
  v("model.clustering", m.clustering);
  v("model.fine_centers", m.fine_centers);
  v("model.coarse_centers", m.coarse_centers);
  v("model.lloyd_iters", m.lloyd_iters);
  v("model.multistep_k", m.multistep_k);
  v("model.multistep_steps", m.multistep_steps);
  v("model.multistep_iters", m.multistep_iters);
  v("model.suppress_fraction", m.suppress_fraction);
  v("model.ste_seed", m.ste_seed);
  v("model.see_seed", m.see_seed);
  v("model.traceability_weight", m.traceability_weight);
  v("model.balance_weight", m.balance_weight);
  v("model.average_traceability", m.average_traceability);
  v("model.load", m.load);
  v("model.dense_hidden", m.dense_hidden);

  TrainConfig& t = c.train;
  v("train.steps", t.steps);
  v("train.batch_size", t.batch_size);
  v("train.lr", t.optimizer.lr);
  v("train.beta1", t.optimizer.beta1);
  v("train.beta2", t.optimizer.beta2);
  v("train.eps", t.optimizer.eps);
  v("train.weight_decay", t.optimizer.weight_decay);
  v("train.log_every", t.log_every);
  v("train.eval_every", t.eval_every);
  v("train.seed", t.seed);

  Ablation& a = c.ablation;
  v("ablation.no_ste", a.no_ste);
  v("ablation.no_see", a.no_see);
  v("ablation.no_dse", a.no_dse);
  v("ablation.no_clustering", a.no_clustering);
  v("ablation.no_tb", a.no_tb);
  v("ablation.no_s2e", a.no_s2e);
}

json::json_pointer pointer(const std::string& dotted) {
  std::string p = "/";
  for (char ch : dotted) p += ch == '.' ? '/' : ch;
  return json::json_pointer(p);
}

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw std::invalid_argument("config key '" + key + "': " + what);
}

json to_json_value(std::size_t v) { return v; }
json to_json_value(double v) { return v; }
json to_json_value(bool v) { return v; }
json to_json_value(const std::vector<double>& v) { return v; }
json to_json_value(ClusterStrategy v) { return std::string(to_string(v)); }
json to_json_value(LoadVariant v) { return std::string(to_string(v)); }
json to_json_value(ModelKind v) { return std::string(to_string(v)); }

void from_json_value(const json& j, const std::string& key, std::size_t& out) {
  if (j.is_number_unsigned()) {
    out = j.get<std::size_t>();
  } else if (j.is_number_integer()) {
    bad(key, "must not be negative");
  } else if (j.is_number_float() && j.get<double>() >= 0.0 &&
             j.get<double>() == static_cast<double>(static_cast<std::size_t>(j.get<double>()))) {
    out = static_cast<std::size_t>(j.get<double>());
  } else {
    bad(key, "expected a non-negative integer, got " + j.dump());
  }
}

void from_json_value(const json& j, const std::string& key, double& out) {
  if (!j.is_number()) bad(key, "expected a number, got " + j.dump());
  out = j.get<double>();
}

void from_json_value(const json& j, const std::string& key, bool& out) {
  if (!j.is_boolean()) bad(key, "expected true or false, got " + j.dump());
  out = j.get<bool>();
}

void from_json_value(const json& j, const std::string& key, std::vector<double>& out) {
  if (!j.is_array()) bad(key, "expected an array of numbers, got " + j.dump());
  out.clear();
  for (const json& e : j) {
    if (!e.is_number()) bad(key, "expected an array of numbers, got " + j.dump());
    out.push_back(e.get<double>());
  }
}

template <class E, class Parse>
void from_json_enum(const json& j, const std::string& key, E& out, Parse parse) {
  if (!j.is_string()) bad(key, "expected a string, got " + j.dump());
  try {
    out = parse(j.get<std::string>());
  } catch (const std::invalid_argument& e) {
    bad(key, e.what());
  }
}

void from_json_value(const json& j, const std::string& key, ClusterStrategy& out) {
  from_json_enum(j, key, out, parse_cluster_strategy);
}
void from_json_value(const json& j, const std::string& key, LoadVariant& out) {
  from_json_enum(j, key, out, parse_load_variant);
}
void from_json_value(const json& j, const std::string& key, ModelKind& out) {
  from_json_enum(j, key, out, parse_model_kind);
}

// Collects the dotted names of every leaf in `j` (arrays count as leaves).
void leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  if (!j.is_object()) {
    out.push_back(prefix);
    return;
  }
  if (j.empty() && !prefix.empty()) out.push_back(prefix);
  for (const auto& [k, v] : j.items()) leaves(v, prefix.empty() ? k : prefix + "." + k, out);
}

json parse_json(const std::string& text) {
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return json::object();
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw std::invalid_argument("configuration must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("configuration is not valid JSON: ") + e.what());
  }
}

template <class Fields>
void read_fields(const json& j, Fields fields) {
  std::set<std::string> known;
  fields([&](const std::string& key, auto& field) {
    known.insert(key);
    const auto ptr = pointer(key);
    if (j.contains(ptr)) from_json_value(j.at(ptr), key, field);
  });
  std::vector<std::string> present;
  leaves(j, "", present);
  for (const std::string& key : present)
    if (!known.contains(key)) bad(key, "unknown key");
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  const json j = parse_json(json_text);
  RunConfig c;
  try {
    read_fields(j, [&](auto&& v) { run_fields(c, v); });
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("configuration: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& json_text, std::span<const std::string> overrides) {
  json j = parse_json(json_text);
  const std::vector<std::string> keys = config_keys();
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw std::invalid_argument("override '" + o + "' is not of the form key=value");
    }
    const std::string key = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) bad(key, "unknown key");
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    try {
      j[pointer(key)] = value;
    } catch (const json::exception& e) {
      bad(key, e.what());
    }
  }
  return parse_run_config(j.dump());
}

std::string dump_run_config(const RunConfig& config) {
  RunConfig c = config;
  json j = json::object();
  run_fields(c, [&](const std::string& key, auto& field) { j[pointer(key)] = to_json_value(field); });
  return j.dump(2);
}

std::string dump_data_config(const DataConfig& config) {
  DataConfig d = config;
  json j = json::object();
  data_fields(d, "", [&](const std::string& key, auto& field) { j[pointer(key)] = to_json_value(field); });
  return j.dump(2);
}

DataConfig parse_data_config(const std::string& json_text) {
  const json j = parse_json(json_text);
  DataConfig d;
  read_fields(j, [&](auto&& v) { data_fields(d, "", v); });
  make_generator(d);
  return d;
}

std::vector<std::string> config_keys() {
  RunConfig c;
  std::vector<std::string> keys;
  run_fields(c, [&](const std::string& key, auto&) { keys.push_back(key); });
  return keys;
}

}  // namespace come
