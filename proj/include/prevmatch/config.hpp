#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "prevmatch/data.hpp"
#include "prevmatch/trainer.hpp"

namespace prevmatch {

/// Full experiment configuration. Defaults define the shipping synthetic
/// setup (5 classes with one rare class, 20 labeled / 500 unlabeled).
struct TrainConfig {
  std::uint64_t seed = 1;

  // dataset
  int img_height = 20;
  int img_width = 20;
  int crop_size = 16;
  int classes = 5;
  int in_channels = 3;
  int labeled_count = 20;
  int unlabeled_count = 500;
  int val_count = 50;
  int test_count = 100;
  int shifted_count = 100;
  bool class_imbalance = true;
  double rare_weight = 0.08;
  double noise_level = 0.6;
  double shift_offset = 0.4;

  // model
  int hidden_width = 16;
  int depth = 4;  // conv layers including the classifier layer

  // optimization
  int epochs = 60;
  int steps_per_epoch = 24;  // 0 = one pass over the unlabeled pool
  int batch_labeled = 4;
  int batch_unlabeled = 4;
  double base_lr = 0.1;
  double momentum = 0.9;
  double poly_power = 0.9;

  // consistency thresholds
  double tau_standard = 0.95;
  double tau_prev = 0.9;

  // previous guidance
  int prev_capacity = 8;     // N
  int ensemble_upper = 3;    // K
  double dirichlet_alpha = 1.0;
  std::string lambda_mode = "warmup_decay";
  double lambda_max = 1.0;
  double warmup_frac = 0.3;
  std::string save_criteria = "best";  // best | interval
  int save_interval = 3;
  bool previous_guidance = true;
  bool random_selection = true;
  bool random_weights = true;

  // metrics
  int pseudo_eval_count = 128;  // 0 = full unlabeled pool

  void validate() const {
    if (crop_size > img_height || crop_size > img_width) {
      throw std::invalid_argument("config: crop_size must fit inside the generated scene");
    }
    if (classes < 2) throw std::invalid_argument("config: classes must be >= 2");
    if (tau_standard < 0.0 || tau_standard > 1.0 || tau_prev < 0.0 || tau_prev > 1.0) {
      throw std::invalid_argument("config: thresholds must lie in [0,1]");
    }
    if (prev_capacity < 1) throw std::invalid_argument("config: prev_capacity must be >= 1");
    if (ensemble_upper < 1) throw std::invalid_argument("config: ensemble_upper must be >= 1");
    if (!(dirichlet_alpha > 0.0)) {
      throw std::invalid_argument("config: dirichlet_alpha must be positive");
    }
    if (depth < 1) throw std::invalid_argument("config: depth must be >= 1");
    if (hidden_width < 1) throw std::invalid_argument("config: hidden_width must be >= 1");
    if (save_criteria != "best" && save_criteria != "interval") {
      throw std::invalid_argument("config: save_criteria must be 'best' or 'interval'");
    }
    if (save_interval < 1) throw std::invalid_argument("config: save_interval must be >= 1");
    if ((random_selection || random_weights) && !previous_guidance) {
      throw std::invalid_argument(
          "config: random_selection/random_weights require previous_guidance = true");
    }
    if (rare_weight <= 0.0 || rare_weight >= 1.0) {
      throw std::invalid_argument("config: rare_weight must lie in (0,1)");
    }
    lambda_mode_from(lambda_mode);  // throws on unknown mode
    LambdaSchedule ls{lambda_mode_from(lambda_mode), lambda_max, warmup_frac};
    ls.validate();
  }

  SceneSpec scene_spec() const {
    SceneSpec s;
    s.height = img_height;
    s.width = img_width;
    s.in_channels = in_channels;
    s.num_classes = classes;
    s.noise_level = noise_level;
    s.shift_offset = shift_offset;
    const int nshape = classes - 1;
    if (class_imbalance && nshape >= 2) {
      // last class is the rare one; the rest share the remaining mass
      s.shape_weights.assign(static_cast<std::size_t>(nshape),
                             (1.0 - rare_weight) / (nshape - 1));
      s.shape_weights.back() = rare_weight;
    } else {
      s.shape_weights.assign(static_cast<std::size_t>(nshape), 1.0 / nshape);
    }
    s.shifted_weights.assign(static_cast<std::size_t>(nshape), 1.0 / nshape);
    return s;
  }

  SplitCounts split_counts() const {
    SplitCounts c;
    c.labeled = labeled_count;
    c.unlabeled = unlabeled_count;
    c.val = val_count;
    c.test = test_count;
    c.shifted = shifted_count;
    return c;
  }

  LambdaSchedule lambda_schedule() const {
    return LambdaSchedule{lambda_mode_from(lambda_mode), lambda_max, warmup_frac};
  }

  FitConfig fit_config() const {
    FitConfig f;
    f.step.tau_standard = tau_standard;
    f.step.tau_prev = tau_prev;
    f.step.ensemble_upper = ensemble_upper;
    f.step.dirichlet_alpha = dirichlet_alpha;
    f.step.previous_guidance = previous_guidance;
    f.step.random_selection = random_selection;
    f.step.random_weights = random_weights;
    f.step.crop = crop_size;
    f.lambda_sched = lambda_schedule();
    f.epochs = epochs;
    f.steps_per_epoch = steps_per_epoch;
    f.batch_labeled = batch_labeled;
    f.batch_unlabeled = batch_unlabeled;
    f.base_lr = base_lr;
    f.momentum = momentum;
    f.poly_power = poly_power;
    f.prev_capacity = prev_capacity;
    f.save_on_best = save_criteria == "best";
    f.save_interval = save_interval;
    f.pseudo_eval_count = pseudo_eval_count;
    f.seed = seed;
    f.hidden_width = hidden_width;
    f.depth = depth;
    return f;
  }

  bool is_baseline() const { return !previous_guidance; }
};

namespace detail {

struct ConfigField {
  const char* key;
  std::function<void(TrainConfig&, const std::string&, int line)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline long long parse_int_value(const std::string& key, const std::string& v, int line) {
  std::size_t pos = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) {
    throw std::invalid_argument("config line " + std::to_string(line) + ": key '" + key +
                                "' expects an integer, got '" + v + "'");
  }
  return x;
}

inline double parse_real_value(const std::string& key, const std::string& v, int line) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) {
    throw std::invalid_argument("config line " + std::to_string(line) + ": key '" + key +
                                "' expects a real number, got '" + v + "'");
  }
  return x;
}

inline bool parse_bool_value(const std::string& key, const std::string& v, int line) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("config line " + std::to_string(line) + ": key '" + key +
                              "' expects a boolean (true/false), got '" + v + "'");
}

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

#define PM_CONFIG_INT(name)                                                                   \
  ConfigField{#name,                                                                          \
              [](TrainConfig& c, const std::string& v, int line) {                            \
                c.name = static_cast<int>(parse_int_value(#name, v, line));                   \
              },                                                                              \
              [](const TrainConfig& c) { return std::to_string(c.name); }}
#define PM_CONFIG_U64(name)                                                                   \
  ConfigField{#name,                                                                          \
              [](TrainConfig& c, const std::string& v, int line) {                            \
                c.name = static_cast<std::uint64_t>(parse_int_value(#name, v, line));         \
              },                                                                              \
              [](const TrainConfig& c) { return std::to_string(c.name); }}
#define PM_CONFIG_REAL(name)                                                                  \
  ConfigField{#name,                                                                          \
              [](TrainConfig& c, const std::string& v, int line) {                            \
                c.name = parse_real_value(#name, v, line);                                    \
              },                                                                              \
              [](const TrainConfig& c) { return fmt_real(c.name); }}
#define PM_CONFIG_BOOL(name)                                                                  \
  ConfigField{#name,                                                                          \
              [](TrainConfig& c, const std::string& v, int line) {                            \
                c.name = parse_bool_value(#name, v, line);                                    \
              },                                                                              \
              [](const TrainConfig& c) { return std::string(c.name ? "true" : "false"); }}
#define PM_CONFIG_STR(name)                                                                   \
  ConfigField{#name,                                                                          \
              [](TrainConfig& c, const std::string& v, int) { c.name = v; },                  \
              [](const TrainConfig& c) { return c.name; }}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      PM_CONFIG_U64(seed),
      PM_CONFIG_INT(img_height),
      PM_CONFIG_INT(img_width),
      PM_CONFIG_INT(crop_size),
      PM_CONFIG_INT(classes),
      PM_CONFIG_INT(in_channels),
      PM_CONFIG_INT(labeled_count),
      PM_CONFIG_INT(unlabeled_count),
      PM_CONFIG_INT(val_count),
      PM_CONFIG_INT(test_count),
      PM_CONFIG_INT(shifted_count),
      PM_CONFIG_BOOL(class_imbalance),
      PM_CONFIG_REAL(rare_weight),
      PM_CONFIG_REAL(noise_level),
      PM_CONFIG_REAL(shift_offset),
      PM_CONFIG_INT(hidden_width),
      PM_CONFIG_INT(depth),
      PM_CONFIG_INT(epochs),
      PM_CONFIG_INT(steps_per_epoch),
      PM_CONFIG_INT(batch_labeled),
      PM_CONFIG_INT(batch_unlabeled),
      PM_CONFIG_REAL(base_lr),
      PM_CONFIG_REAL(momentum),
      PM_CONFIG_REAL(poly_power),
      PM_CONFIG_REAL(tau_standard),
      PM_CONFIG_REAL(tau_prev),
      PM_CONFIG_INT(prev_capacity),
      PM_CONFIG_INT(ensemble_upper),
      PM_CONFIG_REAL(dirichlet_alpha),
      PM_CONFIG_STR(lambda_mode),
      PM_CONFIG_REAL(lambda_max),
      PM_CONFIG_REAL(warmup_frac),
      PM_CONFIG_STR(save_criteria),
      PM_CONFIG_INT(save_interval),
      PM_CONFIG_BOOL(previous_guidance),
      PM_CONFIG_BOOL(random_selection),
      PM_CONFIG_BOOL(random_weights),
      PM_CONFIG_INT(pseudo_eval_count),
  };
  return fields;
}

#undef PM_CONFIG_INT
#undef PM_CONFIG_U64
#undef PM_CONFIG_REAL
#undef PM_CONFIG_BOOL
#undef PM_CONFIG_STR

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Apply one `key = value` assignment (used by both the file parser and
/// the CLI flag overrides). Unknown keys are rejected.
inline void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value,
                               int line = 0) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(cfg, value, line);
      return;
    }
  }
  throw std::invalid_argument("config line " + std::to_string(line) + ": unknown key '" + key +
                              "'");
}

/// Parse `key = value` lines ('#' starts a comment). Missing keys keep
/// their defaults; the parsed config is validated before returning.
inline TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
    }
    apply_config_entry(cfg, key, value, line_no);
  }
  cfg.validate();
  return cfg;
}

/// Canonical echo of every effective value, one `key = value` per line.
/// Reparsing the echo reproduces the config exactly.
inline std::string config_echo(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) {
    out += f.key;
    out += " = ";
    out += f.get(cfg);
    out += "\n";
  }
  return out;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::config_fields()) keys.emplace_back(f.key);
  return keys;
}

}  // namespace prevmatch
