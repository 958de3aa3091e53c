#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "czsl/adversarial.hpp"
#include "czsl/errors.hpp"
#include "czsl/io_util.hpp"
#include "czsl/sampler.hpp"
#include "czsl/trainer.hpp"

namespace czsl {

// Full run configuration as exposed by the CLI; mirrors the config file
// keys one to one.
struct EngineConfig {
  struct {
    std::string manifest, features, embeddings;
  } data;
  struct {
    int hidden = 0;  // 0 -> feature dim
    int embed = 0;   // 0 -> feature dim
    double dropout = 0.1;
    double tau_inv = 20.0;
    bool freeze_words = false;
  } model;
  TrainConfig train;  // carries adv/osp sub-configs and the seed
  struct {
    int grid_size = 200;
  } eval;
  bool track_val_auc = false;
};

inline nlohmann::json config_to_json(const EngineConfig& c) {
  nlohmann::json j;
  j["data"] = {{"manifest", c.data.manifest},
               {"features", c.data.features},
               {"embeddings", c.data.embeddings}};
  j["model"] = {{"hidden", c.model.hidden},
                {"embed", c.model.embed},
                {"dropout", c.model.dropout},
                {"tau_inv", c.model.tau_inv},
                {"freeze_words", c.model.freeze_words}};
  j["train"] = {{"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"seed", c.train.seed},
                {"ckpt_every", c.train.ckpt_every},
                {"adv_weight", c.train.adv_weight},
                {"track_val_auc", c.track_val_auc}};
  j["adv"] = {{"enabled", c.train.adv.enabled},
              {"epsilon_list", c.train.adv.epsilon_list},
              {"noise_k", c.train.adv.noise_k}};
  j["osp"] = {{"enabled", c.train.osp.enabled},
              {"budget_ratio", c.train.osp.budget_ratio},
              {"alpha", c.train.osp.alpha}};
  j["eval"] = {{"grid_size", c.eval.grid_size}};
  return j;
}

inline EngineConfig config_from_json(const nlohmann::json& j) {
  EngineConfig c;
  try {
    const auto& d = j.at("data");
    c.data.manifest = d.at("manifest").get<std::string>();
    c.data.features = d.at("features").get<std::string>();
    c.data.embeddings = d.at("embeddings").get<std::string>();
    const auto& m = j.at("model");
    c.model.hidden = m.at("hidden").get<int>();
    c.model.embed = m.at("embed").get<int>();
    c.model.dropout = m.at("dropout").get<double>();
    c.model.tau_inv = m.at("tau_inv").get<double>();
    c.model.freeze_words = m.at("freeze_words").get<bool>();
    const auto& t = j.at("train");
    c.train.lr = t.at("lr").get<double>();
    c.train.weight_decay = t.at("weight_decay").get<double>();
    c.train.batch_size = t.at("batch_size").get<int>();
    c.train.epochs = t.at("epochs").get<int>();
    c.train.seed = t.at("seed").get<uint64_t>();
    c.train.ckpt_every = t.at("ckpt_every").get<int>();
    c.train.adv_weight = t.at("adv_weight").get<double>();
    c.track_val_auc = t.at("track_val_auc").get<bool>();
    const auto& a = j.at("adv");
    c.train.adv.enabled = a.at("enabled").get<bool>();
    c.train.adv.epsilon_list = a.at("epsilon_list").get<std::vector<double>>();
    c.train.adv.noise_k = a.at("noise_k").get<double>();
    const auto& o = j.at("osp");
    c.train.osp.enabled = o.at("enabled").get<bool>();
    c.train.osp.budget_ratio = o.at("budget_ratio").get<double>();
    c.train.osp.alpha = o.at("alpha").get<double>();
    const auto& e = j.at("eval");
    c.eval.grid_size = e.at("grid_size").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  return c;
}

namespace config_detail {

inline void flatten_keys(const nlohmann::json& j, const std::string& prefix,
                         std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object())
      flatten_keys(*it, path, out);
    else
      out.push_back(path);
  }
}

inline std::string valid_keys_message() {
  std::vector<std::string> keys;
  flatten_keys(config_to_json(EngineConfig{}), "", keys);
  std::string msg = "valid keys:";
  for (const std::string& k : keys) msg += " " + k;
  return msg;
}

// Every key in `user` must exist in `base` with a compatible shape.
inline void merge_validated(nlohmann::json& base, const nlohmann::json& user,
                            const std::string& prefix) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key()))
      throw ConfigError("unknown config key '" + path + "'; " + valid_keys_message());
    if (base[it.key()].is_object()) {
      if (!it->is_object())
        throw ConfigError("config key '" + path + "' must be an object");
      merge_validated(base[it.key()], *it, path);
    } else {
      base[it.key()] = *it;
    }
  }
}

}  // namespace config_detail

// Defaults overlaid with an optional config file; keys are validated.
inline nlohmann::json load_config_json(const std::string& path) {
  nlohmann::json base = config_to_json(EngineConfig{});
  if (!path.empty()) {
    nlohmann::json user;
    try {
      user = nlohmann::json::parse(io::read_text_file(path));
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    config_detail::merge_validated(base, user, "");
  }
  return base;
}

// Applies one `dotted.path=value` override; the value parses as JSON, with
// a bare-string fallback.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);
  nlohmann::json* node = &cfg;
  size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    size_t dot = path.find('.', start);
    parts.push_back(path.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object())
      throw ConfigError("unknown config key '" + path + "'; " +
                        config_detail::valid_keys_message());
    node = &(*node)[parts[i]];
  }
  const std::string& leaf = parts.back();
  if (!node->contains(leaf) || (*node)[leaf].is_object())
    throw ConfigError("unknown config key '" + path + "'; " +
                      config_detail::valid_keys_message());
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;  // treat as plain string
  }
  (*node)[leaf] = parsed;
}

inline EngineConfig resolve_config(const std::string& path,
                                   const std::vector<std::string>& overrides) {
  nlohmann::json j = load_config_json(path);
  for (const std::string& ov : overrides) apply_override(j, ov);
  return config_from_json(j);
}

}  // namespace czsl
