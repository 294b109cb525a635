#include "moelab/config.hpp"

#include <fstream>

namespace moelab {

using nlohmann::json;

void to_json(json& j, const RunConfig& c) {
  j = json{{"model", c.model}, {"train", c.train}};
}

void from_json(const json& j, RunConfig& c) {
  j.at("model").get_to(c.model);
  j.at("train").get_to(c.train);
}

namespace {

std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

// int/uint/double count as one class: integer literals are fine for double
// fields and vice versa wherever the target struct accepts them.
bool same_type_class(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void check_leaf_type(const json& slot, const json& value,
                     const std::string& path) {
  if (!same_type_class(slot, value))
    throw ConfigError("config: wrong type for '" + path + "' (expected " +
                      slot.type_name() + ", got " + value.type_name() + ")");
}

}  // namespace

void merge_config(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object())
    throw ConfigError("config: expected an object at '" +
                      (prefix.empty() ? std::string("<root>") : prefix) + "'");
  for (const auto& [key, value] : user.items()) {
    const std::string path = join_path(prefix, key);
    if (!base.contains(key))
      throw ConfigError("config: unknown key '" + path + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, path);
    } else {
      check_leaf_type(slot, value, path);
      slot = value;
    }
  }
}

void apply_override(json& base, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment +
                      "' is not of the form key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  json value;
  try {
    value = json::parse(text);
    if (!value.is_primitive() || value.is_null()) value = text;
  } catch (const json::exception&) {
    value = text;
  }

  json* node = &base;
  std::string walked;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key =
        dot == std::string::npos ? path.substr(start)
                                 : path.substr(start, dot - start);
    if (key.empty())
      throw ConfigError("override '" + assignment +
                        "' has an empty path segment");
    walked = join_path(walked, key);
    if (!node->is_object() || !node->contains(key))
      throw ConfigError("config: unknown key '" + walked + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object())
    throw ConfigError("config: '" + path + "' is a section, not a value");
  check_leaf_type(*node, value, path);
  *node = value;
}

json resolve_config(const std::string& config_path,
                    const std::vector<std::string>& overrides,
                    const RunConfig& defaults) {
  json resolved = defaults;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw IoError("cannot open config: " + config_path);
    json user;
    try {
      in >> user;
    } catch (const json::exception& e) {
      throw ConfigError(config_path + ": " + e.what());
    }
    merge_config(resolved, user);
  }
  for (const std::string& assignment : overrides)
    apply_override(resolved, assignment);
  return resolved;
}

}  // namespace moelab
