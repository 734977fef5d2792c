#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pmmrec/synthetic.hpp"
#include "pmmrec/training.hpp"

namespace pmmrec {

/// Unknown key, malformed value or unreadable configuration file.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Everything one command needs. Text form: `key = value` lines.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticConfig synthetic;
  TransferMode mode = TransferMode::full;
  bool from_scratch = false;
  std::string items;         // item file of the dataset a command works on
  std::string interactions;  // interaction file of that dataset
  std::string bundle;        // input checkpoint
  std::string out_dir = ".";
  std::string phase = "test";
  std::size_t min_interactions = 5;
  std::size_t cold_threshold = 10;
  std::size_t eval_batch = 64;
  bool exclude_history = false;
  double gradcheck_step = 1e-5;
  double gradcheck_tol = 1e-4;
  std::uint64_t seed = 1;

  friend bool operator==(const RunConfig& a, const RunConfig& b);
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, end);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* b = text.data();
  const char* e = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

struct ConfigField {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
ConfigField size_field(std::string key, T RunConfig::*group, std::size_t T::*member) {
  return {key,
          [key, group, member](RunConfig& c, const std::string& v) {
            (c.*group).*member = parse_number<std::size_t>(key, v);
          },
          [group, member](const RunConfig& c) { return std::to_string((c.*group).*member); }};
}

template <class T>
ConfigField double_field(std::string key, T RunConfig::*group, double T::*member) {
  return {key,
          [key, group, member](RunConfig& c, const std::string& v) {
            (c.*group).*member = parse_number<double>(key, v);
          },
          [group, member](const RunConfig& c) { return format_double((c.*group).*member); }};
}

inline const std::vector<ConfigField>& config_schema() {
  static const std::vector<ConfigField> fields = [] {
    using M = ModelConfig;
    using S = SyntheticConfig;
    std::vector<ConfigField> f;
    // Architecture.
    f.push_back(size_field("d", &RunConfig::model, &M::d));
    f.push_back(size_field("n_heads", &RunConfig::model, &M::n_heads));
    f.push_back(size_field("encoder_blocks", &RunConfig::model, &M::encoder_blocks));
    f.push_back(size_field("user_blocks", &RunConfig::model, &M::user_blocks));
    f.push_back(size_field("vocab_size", &RunConfig::model, &M::vocab_size));
    f.push_back(size_field("p_max", &RunConfig::model, &M::p_max));
    f.push_back(size_field("q", &RunConfig::model, &M::q));
    f.push_back(size_field("patch_dim", &RunConfig::model, &M::patch_dim));
    f.push_back(size_field("max_len", &RunConfig::model, &M::max_len));
    f.push_back({"vision_positions",
                 [](RunConfig& c, const std::string& v) {
                   c.model.vision_positions = parse_bool("vision_positions", v);
                 },
                 [](const RunConfig& c) { return std::string(c.model.vision_positions ? "true" : "false"); }});
    f.push_back(double_field("dropout", &RunConfig::model, &M::dropout));
    // Optimization.
    f.push_back({"learning_rate",
                 [](RunConfig& c, const std::string& v) {
                   c.train.optimizer.learning_rate = parse_number<double>("learning_rate", v);
                 },
                 [](const RunConfig& c) { return format_double(c.train.optimizer.learning_rate); }});
    f.push_back({"weight_decay",
                 [](RunConfig& c, const std::string& v) {
                   c.train.optimizer.weight_decay = parse_number<double>("weight_decay", v);
                 },
                 [](const RunConfig& c) { return format_double(c.train.optimizer.weight_decay); }});
    f.push_back({"beta1",
                 [](RunConfig& c, const std::string& v) {
                   c.train.optimizer.beta1 = parse_number<double>("beta1", v);
                 },
                 [](const RunConfig& c) { return format_double(c.train.optimizer.beta1); }});
    f.push_back({"beta2",
                 [](RunConfig& c, const std::string& v) {
                   c.train.optimizer.beta2 = parse_number<double>("beta2", v);
                 },
                 [](const RunConfig& c) { return format_double(c.train.optimizer.beta2); }});
    f.push_back({"adam_eps",
                 [](RunConfig& c, const std::string& v) {
                   c.train.optimizer.eps = parse_number<double>("adam_eps", v);
                 },
                 [](const RunConfig& c) { return format_double(c.train.optimizer.eps); }});
    f.push_back({"clip_norm",
                 [](RunConfig& c, const std::string& v) {
                   c.train.optimizer.clip_norm = parse_number<double>("clip_norm", v);
                 },
                 [](const RunConfig& c) { return format_double(c.train.optimizer.clip_norm); }});
    f.push_back(size_field("max_epochs", &RunConfig::train, &TrainConfig::max_epochs));
    f.push_back(size_field("patience", &RunConfig::train, &TrainConfig::patience));
    f.push_back(size_field("batch_size", &RunConfig::train, &TrainConfig::batch_size));
    f.push_back(size_field("L_max", &RunConfig::train, &TrainConfig::max_len));
    f.push_back(size_field("trainable_top_blocks", &RunConfig::train, &TrainConfig::trainable_top_blocks));
    f.push_back(size_field("threads", &RunConfig::train, &TrainConfig::threads));
    // Objectives.
    f.push_back({"objectives",
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.train.objectives = parse_objectives(v, c.train.objectives);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(std::string("config key 'objectives': ") + e.what());
                   }
                 },
                 [](const RunConfig& c) { return objectives_string(c.train.objectives); }});
    f.push_back({"pooling",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "mean") c.train.objectives.pooling = Pooling::mean;
                   else if (v == "last") c.train.objectives.pooling = Pooling::last;
                   else throw ConfigError("config key 'pooling': expected mean or last, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.train.objectives.pooling == Pooling::mean ? "mean" : "last");
                 }});
    auto obj_double = [](std::string key, double ObjectiveConfig::*m) {
      return ConfigField{key,
                         [key, m](RunConfig& c, const std::string& v) {
                           c.train.objectives.*m = parse_number<double>(key, v);
                         },
                         [m](const RunConfig& c) { return format_double(c.train.objectives.*m); }};
    };
    f.push_back(obj_double("temperature", &ObjectiveConfig::temperature));
    f.push_back(obj_double("shuffle_rate", &ObjectiveConfig::shuffle_rate));
    f.push_back(obj_double("replace_rate", &ObjectiveConfig::replace_rate));
    f.push_back(obj_double("dap_weight", &ObjectiveConfig::dap_weight));
    f.push_back(obj_double("contrastive_weight", &ObjectiveConfig::contrastive_weight));
    f.push_back(obj_double("nid_weight", &ObjectiveConfig::nid_weight));
    f.push_back(obj_double("rcl_weight", &ObjectiveConfig::rcl_weight));
    // Synthetic generator (vocab_size, q and patch_dim are shared with the model).
    f.push_back(size_field("syn_users", &RunConfig::synthetic, &S::n_users));
    f.push_back(size_field("syn_items", &RunConfig::synthetic, &S::n_items));
    f.push_back(size_field("syn_target_users", &RunConfig::synthetic, &S::target_users));
    f.push_back(size_field("syn_target_items", &RunConfig::synthetic, &S::target_items));
    f.push_back(size_field("syn_L_min", &RunConfig::synthetic, &S::L_min));
    f.push_back(size_field("syn_L_max", &RunConfig::synthetic, &S::L_max));
    f.push_back(size_field("syn_tokens_per_item", &RunConfig::synthetic, &S::tokens_per_item));
    f.push_back(size_field("syn_styles", &RunConfig::synthetic, &S::n_latent_styles));
    f.push_back(size_field("syn_branching", &RunConfig::synthetic, &S::branching));
    f.push_back(double_field("syn_noise", &RunConfig::synthetic, &S::transition_noise));
    f.push_back(double_field("syn_skew", &RunConfig::synthetic, &S::popularity_skew));
    f.push_back(double_field("syn_item_spread", &RunConfig::synthetic, &S::item_spread));
    // Pipeline.
    f.push_back({"mode",
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.mode = parse_transfer_mode(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(std::string("config key 'mode': ") + e.what());
                   }
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.mode)); }});
    f.push_back({"from_scratch",
                 [](RunConfig& c, const std::string& v) { c.from_scratch = parse_bool("from_scratch", v); },
                 [](const RunConfig& c) { return std::string(c.from_scratch ? "true" : "false"); }});
    auto str_field = [](std::string key, std::string RunConfig::*m) {
      return ConfigField{key, [m](RunConfig& c, const std::string& v) { c.*m = v; },
                         [m](const RunConfig& c) { return c.*m; }};
    };
    f.push_back(str_field("items", &RunConfig::items));
    f.push_back(str_field("interactions", &RunConfig::interactions));
    f.push_back(str_field("bundle", &RunConfig::bundle));
    f.push_back(str_field("out_dir", &RunConfig::out_dir));
    f.push_back({"phase",
                 [](RunConfig& c, const std::string& v) {
                   if (v != "valid" && v != "test") {
                     throw ConfigError("config key 'phase': expected valid or test, got '" + v + "'");
                   }
                   c.phase = v;
                 },
                 [](const RunConfig& c) { return c.phase; }});
    auto top_size = [](std::string key, std::size_t RunConfig::*m) {
      return ConfigField{key,
                         [key, m](RunConfig& c, const std::string& v) {
                           c.*m = parse_number<std::size_t>(key, v);
                         },
                         [m](const RunConfig& c) { return std::to_string(c.*m); }};
    };
    f.push_back(top_size("min_interactions", &RunConfig::min_interactions));
    f.push_back(top_size("cold_threshold", &RunConfig::cold_threshold));
    f.push_back(top_size("eval_batch", &RunConfig::eval_batch));
    f.push_back({"exclude_history",
                 [](RunConfig& c, const std::string& v) {
                   c.exclude_history = parse_bool("exclude_history", v);
                 },
                 [](const RunConfig& c) { return std::string(c.exclude_history ? "true" : "false"); }});
    f.push_back({"gradcheck_step",
                 [](RunConfig& c, const std::string& v) { c.gradcheck_step = parse_number<double>("gradcheck_step", v); },
                 [](const RunConfig& c) { return format_double(c.gradcheck_step); }});
    f.push_back({"gradcheck_tol",
                 [](RunConfig& c, const std::string& v) { c.gradcheck_tol = parse_number<double>("gradcheck_tol", v); },
                 [](const RunConfig& c) { return format_double(c.gradcheck_tol); }});
    f.push_back({"seed",
                 [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    return f;
  }();
  return fields;
}

inline const ConfigField& find_field(const std::string& key) {
  for (const auto& f : config_schema())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace detail

/// Applies one `key = value` (or `key=value`) assignment.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  detail::find_field(key).set(c, value);
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  return detail::find_field(key).get(c);
}

/// Copies derived settings into the nested configs and validates the result.
inline void finalize_config(RunConfig& c) {
  c.train.seed = c.seed;
  c.synthetic.seed = c.seed;
  c.synthetic.vocab_size = c.model.vocab_size;
  c.synthetic.q = c.model.q;
  c.synthetic.patch_dim = c.model.patch_dim;
  c.model.trainable_top_blocks = c.train.trainable_top_blocks;
  try {
    c.model.validate();
    c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  if (!(c.gradcheck_step > 0.0) || !(c.gradcheck_tol > 0.0)) {
    throw ConfigError("config keys 'gradcheck_step' and 'gradcheck_tol' must be positive");
  }
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
  for (const auto& f : detail::config_schema())
    if (f.get(a) != f.get(b)) return false;
  return true;
}

/// Parses configuration text. `source` names the origin in error messages.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(no) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(body.substr(0, eq));
    const std::string value = detail::trim(body.substr(eq + 1));
    try {
      set_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(no) + ": " + e.what());
    }
  }
}

inline constexpr std::string_view kEnvPrefix = "PMMREC_";

/// Values from PMMREC_<KEY> environment variables (key upper-cased).
inline std::vector<std::pair<std::string, std::string>> environment_overrides(char** envp) {
  std::vector<std::pair<std::string, std::string>> out;
  if (envp == nullptr) return out;
  for (char** e = envp; *e != nullptr; ++e) {
    std::string_view kv(*e);
    if (kv.substr(0, kEnvPrefix.size()) != kEnvPrefix) continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    const std::string upper(kv.substr(kEnvPrefix.size(), eq - kEnvPrefix.size()));
    std::string key;
    for (const auto& f : detail::config_schema()) {
      std::string u = f.key;
      for (char& ch : u) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      if (u == upper) key = f.key;
    }
    if (key.empty()) {
      throw ConfigError("environment variable " + std::string(kv.substr(0, eq)) +
                        " does not name a config key");
    }
    out.emplace_back(key, std::string(kv.substr(eq + 1)));
  }
  return out;
}

/// defaults < file < environment < command-line `key=value` overrides.
inline RunConfig parse_config(const std::string& file, const std::vector<std::string>& overrides,
                              const std::vector<std::pair<std::string, std::string>>& env = {}) {
  RunConfig c;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file);
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(c, ss.str(), file);
  }
  for (const auto& [k, v] : env) {
    try {
      set_config_value(c, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("environment: ") + e.what());
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("override '" + o + "' is not of the form key=value");
    }
    set_config_value(c, detail::trim(o.substr(0, eq)), detail::trim(o.substr(eq + 1)));
  }
  finalize_config(c);
  return c;
}

/// Every key in schema order; parsing the output reproduces the config.
inline std::string dump_config(const RunConfig& c) {
  std::ostringstream os;
  for (const auto& f : detail::config_schema()) os << f.key << " = " << f.get(c) << '\n';
  return os.str();
}

}  // namespace pmmrec
